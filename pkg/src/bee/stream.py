"""Synthetic source task and a continually shifting target stream.

The source task is a Gaussian-blob classification problem. Target domains
are fresh source draws pushed through one of five parametric corruptions at
severity 1..5. Labels and domain ids travel with each batch but only the
evaluator reads them; the adapter is handed ``batch.x`` alone.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

KINDS = ("additive_noise", "rotation", "scaling", "coordinate_mask", "mean_shift")

# index 0 is the identity row; 1..5 are the severities
SEVERITY_TABLE = {
    "additive_noise": (0.0, 0.5, 1.0, 1.5, 2.0, 3.0),  # noise std, sigma0 units
    "rotation": (0.0, 10.0, 20.0, 35.0, 50.0, 70.0),  # degrees
    "scaling": (1.0, 1.2, 1.5, 2.0, 3.0, 4.0),  # multiplicative factor
    "coordinate_mask": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),  # fraction of coordinates zeroed
    "mean_shift": (0.0, 0.5, 1.0, 1.5, 2.0, 3.0),  # shift length, sigma0 units per coordinate
}


def sub_seed(root: int, name: str) -> np.random.SeedSequence:
    """Independent, stable child seed for a named component."""
    return np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def sub_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(root, name))


@dataclass(frozen=True)
class SourceTask:
    dim: int = 32
    n_classes: int = 10
    sigma0: float = 1.0
    center_scale: float = 1.0
    n_train: int = 5000
    n_holdout: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2 or self.n_classes < 2:
            raise ValueError("need dim >= 2 and n_classes >= 2")
        if self.sigma0 < 0:
            raise ValueError(f"sigma0 must be nonnegative, got {self.sigma0}")

    def centers(self) -> np.ndarray:
        rng = sub_rng(self.seed, "centers")
        return rng.normal(scale=self.center_scale, size=(self.n_classes, self.dim))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` points with labels balanced to within one per class, shuffled."""
        labels = np.arange(n) % self.n_classes
        rng.shuffle(labels)
        x = self.centers()[labels] + self.sigma0 * rng.standard_normal((n, self.dim))
        return x, labels.astype(np.int64)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray | None = None
    n_classes: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]


def gen_source(task: SourceTask) -> tuple[Dataset, Dataset]:
    """Disjoint train and holdout draws, deterministic per seed."""
    x_tr, y_tr = task.sample(task.n_train, sub_rng(task.seed, "source.train"))
    x_ho, y_ho = task.sample(task.n_holdout, sub_rng(task.seed, "source.holdout"))
    return Dataset(x_tr, y_tr, n_classes=task.n_classes), Dataset(x_ho, y_ho, n_classes=task.n_classes)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5 (0 = identity), got {self.severity}")

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.severity}"

    @property
    def magnitude(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity]


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _rotation_matrix(dim: int, degrees: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate every plane of a random orthonormal pairing by ``degrees``."""
    basis = _random_orthogonal(dim, rng)
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    G = np.eye(dim)
    for i in range(0, dim - 1, 2):
        G[i, i], G[i, i + 1], G[i + 1, i], G[i + 1, i + 1] = c, -s, s, c
    return basis @ G @ basis.T


def corrupt(x: np.ndarray, spec: CorruptionSpec, sigma0: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one corruption to a sample or a batch of samples (rows).

    Structural parameters (rotation basis, mask, shift direction) come from
    ``spec.seed``; per-sample noise comes from ``rng`` or, if absent, from a
    generator seeded by ``spec.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    dim = X.shape[1]
    mag = spec.magnitude
    if spec.severity == 0:
        return x.copy()
    structure = sub_rng(spec.seed, f"corruption.{spec.kind}")
    if spec.kind == "additive_noise":
        noise_rng = rng if rng is not None else sub_rng(spec.seed, "corruption.noise")
        out = X + mag * sigma0 * noise_rng.standard_normal(X.shape)
    elif spec.kind == "rotation":
        out = X @ _rotation_matrix(dim, mag, structure).T
    elif spec.kind == "scaling":
        out = X * mag
    elif spec.kind == "coordinate_mask":
        n_masked = int(round(mag * dim))
        keep = np.ones(dim)
        keep[structure.permutation(dim)[:n_masked]] = 0.0
        out = X * keep
    else:
        signs = structure.choice([-1.0, 1.0], size=dim)
        out = X + mag * sigma0 * signs
    return out[0] if single else out


@dataclass(frozen=True)
class DomainSpec:
    corruption: CorruptionSpec
    n_batches: int = 50
    batch_size: int = 64


# alternates additive/shift, geometric and masking families
DEFAULT_SCHEDULE = (
    ("additive_noise", 5),
    ("rotation", 5),
    ("coordinate_mask", 5),
    ("mean_shift", 5),
    ("scaling", 5),
    ("coordinate_mask", 4),
    ("additive_noise", 4),
    ("rotation", 4),
)


@dataclass
class DomainSchedule:
    domains: list[DomainSpec]
    task: SourceTask
    seed: int = 0

    @property
    def total_batches(self) -> int:
        return sum(d.n_batches for d in self.domains)

    def names(self) -> list[str]:
        return [f"{i}:{d.corruption.name}" for i, d in enumerate(self.domains)]


def default_schedule(task: SourceTask, seed: int, n_domains: int = 8, n_batches: int = 50, batch_size: int = 64) -> DomainSchedule:
    domains = []
    for i in range(n_domains):
        kind, sev = DEFAULT_SCHEDULE[i % len(DEFAULT_SCHEDULE)]
        spec = CorruptionSpec(kind, sev, seed=int(sub_seed(seed, f"domain.{i}").generate_state(1)[0]))
        domains.append(DomainSpec(spec, n_batches, batch_size))
    return DomainSchedule(domains, task, seed)


@dataclass(frozen=True)
class StreamBatch:
    """One test batch. ``labels`` and ``domain`` are for the evaluator only."""

    x: np.ndarray
    labels: np.ndarray = field(repr=False)
    domain: int = field(repr=False)


def iter_stream(schedule: DomainSchedule) -> Iterator[StreamBatch]:
    """Yield the target stream batch by batch; deterministic per schedule seed."""
    task = schedule.task
    for i, dom in enumerate(schedule.domains):
        draw = sub_rng(schedule.seed, f"stream.{i}")
        noise = sub_rng(schedule.seed, f"stream.{i}.noise")
        for _ in range(dom.n_batches):
            x, y = task.sample(dom.batch_size, draw)
            yield StreamBatch(corrupt(x, dom.corruption, task.sigma0, noise), y, i)


def stream_dataset(schedule: DomainSchedule) -> Dataset:
    xs, ys, ds = [], [], []
    for b in iter_stream(schedule):
        xs.append(b.x)
        ys.append(b.labels)
        ds.append(np.full(len(b.labels), b.domain))
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds), schedule.task.n_classes)


def batches_from_dataset(ds: Dataset, batch_size: int) -> Iterator[StreamBatch]:
    """Replay a stored stream. Batches never straddle a domain boundary."""
    if ds.domain is None:
        raise ValueError("stream replay needs domain ids")
    start = 0
    n = len(ds)
    while start < n:
        stop = min(start + batch_size, n)
        same = np.flatnonzero(ds.domain[start:stop] != ds.domain[start])
        if same.size:
            stop = start + int(same[0])
        yield StreamBatch(ds.x[start:stop], ds.y[start:stop], int(ds.domain[start]))
        start = stop


# -- BEED dataset file -------------------------------------------------------

DATA_MAGIC = b"BEED"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def encode_dataset(ds: Dataset) -> bytes:
    n, d = ds.x.shape
    parts = [
        DATA_MAGIC,
        struct.pack("<IIII", DATA_VERSION, n, d, ds.n_classes),
        np.ascontiguousarray(ds.x, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.y, dtype="<u4").tobytes(),
    ]
    if ds.domain is not None:
        parts.append(np.ascontiguousarray(ds.domain, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < 20:
        raise DatasetFormatError(f"truncated header: {len(buf)} bytes")
    if buf[:4] != DATA_MAGIC:
        raise DatasetFormatError(f"bad magic at byte 0: {buf[:4]!r}")
    version, n, d, c = struct.unpack("<IIII", buf[4:20])
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 4")
    pos = 20
    need = pos + 8 * n * d + 4 * n
    if len(buf) < need:
        raise DatasetFormatError(f"truncated at byte {len(buf)}: need {need} bytes")
    x = np.frombuffer(buf[pos : pos + 8 * n * d], dtype="<f8").astype(np.float64).reshape(n, d)
    pos += 8 * n * d
    y = np.frombuffer(buf[pos : pos + 4 * n], dtype="<u4").astype(np.int64)
    pos += 4 * n
    domain = None
    if len(buf) == pos + 4 * n:
        domain = np.frombuffer(buf[pos:], dtype="<u4").astype(np.int64)
    elif len(buf) != pos:
        raise DatasetFormatError(f"unexpected {len(buf) - pos} trailing bytes at byte {pos}")
    return Dataset(x, y, domain, c)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
