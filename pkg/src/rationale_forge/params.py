"""Named parameter sets for the two players, each independently freezable."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParamSet:
    """An ordered mapping of names to trainable tensors with a frozen flag.

    The frozen flag gates every update path: the optimizer skips frozen sets
    entirely, leaving both values and moment state untouched.
    """

    def __init__(self, name: str, tensors: dict[str, Tensor]):
        self.name = name
        self.tensors = dict(tensors)
        self.frozen = False

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def checksum(self) -> str:
        """SHA-256 over names and raw value bytes; bit-exact identity probe."""
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            src = values[name]
            if src.shape != t.data.shape:
                raise ValueError(f"{self.name}/{name}: shape {src.shape} does not "
                                 f"match parameter shape {t.data.shape}")
            t.data[...] = src

    def grad_norm(self) -> float:
        sq = 0.0
        for t in self.tensors.values():
            if t.grad is not None:
                sq += float((t.grad * t.grad).sum())
        return float(np.sqrt(sq))


class ModelParams:
    """The generator and predictor parameter sets; disjoint by construction."""

    def __init__(self, generator: ParamSet, predictor: ParamSet):
        self.generator = generator
        self.predictor = predictor

    def sets(self) -> tuple[ParamSet, ParamSet]:
        return (self.generator, self.predictor)

    def named_tensors(self):
        for pset in self.sets():
            for name, t in pset.items():
                yield f"{pset.name}/{name}", t

    def zero_grad(self) -> None:
        for pset in self.sets():
            pset.zero_grad()
