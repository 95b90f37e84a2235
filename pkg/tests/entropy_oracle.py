"""Stand-alone entropy-minimisation mean teacher for cross-checking the loop.

Plain numpy on dicts of arrays with a hand-derived backward pass. Nothing
from the package is used except the named-seed helper, so the data order
matches. Expression order mirrors the obvious textbook formulas, which is
what makes a bitwise comparison possible.
"""

import math

import numpy as np
from scipy.special import erf

from bee.stream import sub_rng

B1, B2, EPS = 0.9, 0.999, 1e-8


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class EntropyBaseline:
    def __init__(self, params, n_blocks, shallow, lr, momentum):
        self.student = {k: v.copy() for k, v in params.items()}
        self.teacher = {k: v.copy() for k, v in params.items()}
        self.L = n_blocks
        self.train_names = [f"block{j}.{p}" for j in sorted(shallow) for p in ("weight", "bias")]
        self.lr = lr
        self.momentum = momentum
        self.reset_adam()

    def reset_adam(self):
        self.t = 0
        self.m = {k: np.zeros_like(self.student[k]) for k in self.train_names}
        self.v = {k: np.zeros_like(self.student[k]) for k in self.train_names}

    def _forward(self, params, x):
        pre, post = [], [x]
        h = x
        for j in range(1, self.L + 1):
            a = h @ params[f"block{j}.weight"] + params[f"block{j}.bias"]
            h = a * (0.5 * (1.0 + erf(a * (1.0 / math.sqrt(2.0)))))
            pre.append(a)
            post.append(h)
        return pre, post, h @ params["head.weight"] + params["head.bias"]

    def predict(self, x):
        _, _, s = self._forward(self.student, x)
        _, _, t = self._forward(self.teacher, x)
        return _softmax(s) * 0.5 + 0.5 * _softmax(t)

    def step(self, x):
        """Entropy step on the averaged prediction, then the teacher EMA."""
        pre, post, s = self._forward(self.student, x)
        _, _, t = self._forward(self.teacher, x)
        p_s = _softmax(s)
        y = p_s * 0.5 + 0.5 * _softmax(t)
        n = x.shape[0]
        logy = np.log(np.maximum(y, 1e-12))
        # d/dy of -(1/n) sum y log y
        g = -1.0 * (logy + 1.0) / n
        g = g * 0.5
        g = p_s * (g - np.sum(g * p_s, axis=1, keepdims=True))
        g = g @ self.student["head.weight"].T
        grads = {}
        lowest = min(int(k[5 : k.index(".")]) for k in self.train_names)
        for j in range(self.L, lowest - 1, -1):
            a = pre[j - 1]
            cdf = 0.5 * (1.0 + erf(a * (1.0 / math.sqrt(2.0))))
            pdf = (1.0 / math.sqrt(2.0 * math.pi)) * np.exp(-0.5 * a * a)
            g = g * (cdf + a * pdf)
            grads[f"block{j}.weight"] = post[j - 1].T @ g
            grads[f"block{j}.bias"] = g.sum(axis=0)
            g = g @ self.student[f"block{j}.weight"].T
        self._adam({k: grads[k] for k in self.train_names})
        self._ema()
        return y

    def _adam(self, grads):
        self.t += 1
        bc1 = 1.0 - B1**self.t
        bc2 = 1.0 - B2**self.t
        for k, g in grads.items():
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * g
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * (g * g)
            self.student[k] = self.student[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + EPS)

    def _ema(self):
        m = self.momentum
        for k in self.train_names:
            t, s = self.teacher[k], self.student[k]
            if m == 0.0:
                self.teacher[k] = s.copy()
            elif m != 1.0:
                self.teacher[k] = np.clip(m * t + (1.0 - m) * s, np.minimum(t, s), np.maximum(t, s))


def warm_up(baseline, source_x, seed, epochs, batch_size):
    """Entropy steps over shuffled source batches, then fresh optimiser moments."""
    n_steps = int(round(epochs * math.ceil(len(source_x) / batch_size)))
    rng = sub_rng(seed, "warmup.batches")
    order = np.concatenate([rng.permutation(len(source_x)) for _ in range(max(1, math.ceil(epochs)))])
    for i in range(n_steps):
        baseline.step(source_x[order[i * batch_size : (i + 1) * batch_size]])
    baseline.reset_adam()


def run(baseline, batches):
    """Predict each batch, then adapt on it; returns the committed predictions."""
    out = []
    for x in batches:
        out.append(baseline.predict(x))
        baseline.step(x)
    return out
