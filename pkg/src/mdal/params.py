"""Named collections of dense float64 arrays.

``ParamSet`` is used for network parameters, per-parameter step sizes,
gradients and optimizer moments alike; all of them share one structure so
that element-wise updates can check congruence cheaply.
"""
from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ContractViolation, NonFiniteError


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: a plain stack of 3x3 convolutions."""

    channels: tuple[int, ...] = (3, 8, 16, 16, 1)
    kernel: int = 3

    def layer_names(self) -> list[str]:
        return [f"conv{k}" for k in range(len(self.channels) - 1)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for k, name in enumerate(self.layer_names()):
            cin, cout = self.channels[k], self.channels[k + 1]
            out[f"{name}.weight"] = (cout, cin, self.kernel, self.kernel)
            out[f"{name}.bias"] = (cout,)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"channels": list(self.channels), "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Arch":
        return cls(channels=tuple(int(c) for c in d["channels"]), kernel=int(d.get("kernel", 3)))


def _freeze(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("parameter arrays must be finite")
    arr.setflags(write=False)
    return arr


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable ordered mapping ``name -> float64 array``."""

    __slots__ = ("_arrays", "arch")

    def __init__(self, arrays: Mapping[str, Any], arch: Arch | None = None):
        self._arrays = {k: _freeze(v) for k, v in arrays.items()}
        self.arch = arch

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._arrays.items())
        return f"ParamSet({shapes})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.congruent(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def congruent(self, other: Mapping[str, np.ndarray]) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == np.shape(other[k]) for k in self)

    def check_congruent(self, *others: Mapping[str, np.ndarray]) -> None:
        for o in others:
            if not self.congruent(o):
                raise ContractViolation(
                    f"structure mismatch: {self.shapes()} vs "
                    f"{ {k: np.shape(v) for k, v in o.items()} }"
                )

    def map(self, fn: Callable[[np.ndarray], Any]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._arrays.items()}, self.arch)

    def zip_map(self, fn: Callable[..., Any], *others: Mapping[str, np.ndarray]) -> "ParamSet":
        self.check_congruent(*others)
        return ParamSet({k: fn(v, *(o[k] for o in others)) for k, v in self._arrays.items()}, self.arch)

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def full_like(self, value: float) -> "ParamSet":
        return self.map(lambda v: np.full_like(v, value))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._arrays.values()]) if self._arrays else np.zeros(0)

    def unflat(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ContractViolation(f"flat vector has {vec.size} entries, expected {self.size}")
        out, pos = {}, 0
        for k, v in self._arrays.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamSet(out, self.arch)

    def dot(self, other: Mapping[str, np.ndarray]) -> float:
        self.check_congruent(other)
        return float(sum(np.vdot(v, other[k]) for k, v in self._arrays.items()))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))


StepSizes = ParamSet
Grads = ParamSet
