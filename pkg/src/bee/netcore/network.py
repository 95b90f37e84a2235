"""MLP backbone split into blocks, with every intermediate feature exposed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .params import ParamSet

ACTIVATIONS = {"gelu": ad.gelu, "identity": ad.identity}


@dataclass(frozen=True)
class Network:
    """Architecture description; parameters live in a separate ParamSet.

    ``widths`` lists D_0 (input) through D_L. Block ``j`` (1-based) maps
    D_{j-1} to D_j with an affine map followed by ``activation``; the head
    maps D_L to ``n_classes`` logits. ``shallow`` holds the 1-based block
    indices that may be updated at test time.
    """

    widths: tuple[int, ...]
    n_classes: int
    activation: str = "gelu"
    shallow: frozenset[int] = field(default_factory=lambda: frozenset({1}))

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "shallow", frozenset(int(j) for j in self.shallow))
        bad = [j for j in self.shallow if not 1 <= j <= self.n_blocks]
        if bad:
            raise ValueError(f"shallow block indices out of range: {bad}")

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for j in range(1, self.n_blocks + 1):
            shapes.append((f"block{j}.weight", (self.widths[j - 1], self.widths[j])))
            shapes.append((f"block{j}.bias", (self.widths[j],)))
        shapes.append(("head.weight", (self.widths[-1], self.n_classes)))
        shapes.append(("head.bias", (self.n_classes,)))
        return shapes

    def trainable_names(self) -> list[str]:
        return [n for n, _ in self.param_shapes() if n.startswith("block") and int(n[5 : n.index(".")]) in self.shallow]

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        """Fan-in scaled uniform weights, zero biases."""
        entries = []
        for name, shape in self.param_shapes():
            if name.endswith("weight"):
                bound = 1.0 / np.sqrt(shape[0])
                entries.append((name, rng.uniform(-bound, bound, size=shape)))
            else:
                entries.append((name, np.zeros(shape)))
        return ParamSet(entries)

    def check_params(self, params) -> None:
        expected = self.param_shapes()
        got = [(k, tuple(np.shape(params[k]))) for k in params]
        if got != expected:
            raise ValueError(f"parameters do not fit architecture: expected {expected}, got {got}")


def forward_graph(net: Network, params, batch) -> tuple[list[ad.Var], ad.Var]:
    """Forward pass over graph nodes. ``params`` maps names to Var."""
    x = ad.const(batch) if not isinstance(batch, ad.Var) else batch
    if x.value.ndim != 2 or x.value.shape[0] < 1:
        raise ValueError(f"batch must be a non-empty 2-D array, got shape {x.value.shape}")
    if x.value.shape[1] != net.in_dim:
        raise ValueError(f"input dimension {x.value.shape[1]} does not match network input {net.in_dim}")
    act = ACTIVATIONS[net.activation]
    feats = []
    h = x
    for j in range(1, net.n_blocks + 1):
        h = act(ad.affine(h, params[f"block{j}.weight"], params[f"block{j}.bias"]))
        feats.append(h)
    logits = ad.affine(h, params["head.weight"], params["head.bias"])
    return feats, logits


def forward(net: Network, params: ParamSet, batch: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Return the L block features (each N x D_j) and the N x C logits."""
    consts = {k: ad.const(params[k]) for k in params}
    feats, logits = forward_graph(net, consts, np.asarray(batch))
    return [f.value for f in feats], logits.value


def predict_proba(net: Network, params: ParamSet, batch: np.ndarray) -> np.ndarray:
    _, logits = forward(net, params, batch)
    return ad.softmax_rows(logits)
