from __future__ import annotations

import hashlib
from collections.abc import Iterator, Mapping

import numpy as np


class ParamSet(Mapping):
    """Ordered, named collection of float arrays.

    Insertion order is the canonical order used for serialisation and for
    comparing architectures. Arrays are owned by the set; ``copy`` is deep.
    """

    def __init__(self, entries=()):
        self._data: dict[str, np.ndarray] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, value in items:
            if name in self._data:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(value)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name!r}")
            self._data[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({inner})"

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._data.items()]

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._data.items())

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        """New set with the given entries swapped in; shapes must match."""
        out = []
        for k, v in self._data.items():
            if k in updates:
                new = np.asarray(updates[k])
                if new.shape != v.shape:
                    raise ValueError(f"{k}: shape {new.shape} does not match {v.shape}")
                out.append((k, new.copy()))
            else:
                out.append((k, v.copy()))
        unknown = set(updates) - set(self._data)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        return ParamSet(out)

    def subset(self, names) -> "ParamSet":
        return ParamSet((k, self._data[k].copy()) for k in self._data if k in set(names))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self._data.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def num_elements(self) -> int:
        return sum(v.size for v in self._data.values())

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.signature() != other.signature():
            return False
        return all(np.array_equal(self._data[k], other[k]) for k in self._data)


def check_compatible(a: ParamSet, b: ParamSet) -> None:
    if a.signature() != b.signature():
        raise ValueError(f"incompatible parameter sets: {a.signature()} vs {b.signature()}")
