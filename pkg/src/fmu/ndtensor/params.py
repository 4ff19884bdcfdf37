"""Named trainable parameters and finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .core import NonFiniteError, ShapeError, Tensor, backward, default_dtype, no_grad
from .rng import Rng


@dataclass
class Param:
    name: str
    value: Tensor
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Insertion-ordered map ``name -> Param`` with seeded, name-keyed initialisation."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._entries: dict[str, Param] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def entries(self) -> list[Param]:
        return list(self._entries.values())

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(value, requires_grad=trainable)
        self._entries[name] = Param(name, t, np.zeros(t.shape, dtype=t.dtype), trainable)
        return t

    def create(self, name: str, shape, init: str = "normal", std: float = 1.0, value: float = 0.0) -> Tensor:
        """Create a parameter from its own named substream of the store seed."""
        shape = tuple(int(s) for s in shape)
        if init == "normal":
            data = std * Rng(self.seed, ("param", name)).normal(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "constant":
            data = np.full(shape, value)
        else:
            raise ValueError(f"unknown init {init!r}")
        return self.add(name, data)

    def set_value(self, name: str, data) -> None:
        p = self._entries[name]
        data = np.asarray(data, dtype=p.value.dtype)
        if data.shape != p.value.shape:
            raise ShapeError(f"{name}: new value shape {data.shape} != {p.value.shape}")
        p.value = Tensor(data, requires_grad=p.trainable)

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for p in self._entries.values():
            if p.name.startswith(prefix):
                p.trainable = trainable
                p.value = Tensor(p.value.data, requires_grad=trainable)

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self._entries.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for p in self._entries.values():
            out.add(p.name, p.value.data, trainable=p.trainable)
        return out

    def cast(self, dtype) -> None:
        for p in self._entries.values():
            p.value = Tensor(p.value.data, requires_grad=p.trainable, dtype=dtype)
            p.grad = np.zeros(p.value.shape, dtype=dtype)

    def num_values(self, prefix: str = "") -> int:
        return sum(p.value.data.size for p in self._entries.values() if p.name.startswith(prefix))


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-4,
    max_coords: int = 6,
    seed: int = 0,
    names: list[str] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``; up to
    ``max_coords`` coordinates per parameter are sampled. Needs 64-bit mode.
    """
    if default_dtype() is not np.float64:
        raise RuntimeError("grad_check needs 64-bit mode (use precision(np.float64) or FMU_VERIFY=1)")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params.zero_grad()
    loss = f(params)
    backward(loss, params)
    analytic = {p.name: p.grad.copy() for p in params.entries()}
    params.zero_grad()

    rng = Rng(seed, ("grad_check",))
    worst = 0.0
    for p in params.entries():
        if not p.trainable or (names is not None and p.name not in names):
            continue
        base = p.value.data.copy()
        size = base.size
        coords = np.arange(size) if size <= max_coords else rng.split(p.name).integers(size, max_coords)
        for c in coords:
            pert = base.copy().reshape(-1)
            pert[c] = base.reshape(-1)[c] + eps
            params.set_value(p.name, pert.reshape(base.shape))
            with no_grad():
                fp = f(params).item()
            pert[c] = base.reshape(-1)[c] - eps
            params.set_value(p.name, pert.reshape(base.shape))
            with no_grad():
                fm = f(params).item()
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[p.name].reshape(-1)[c])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                params.set_value(p.name, base)
                raise NonFiniteError(f"grad_check: non-finite gradient estimate for {p.name}[{c}]")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        params.set_value(p.name, base)
    return worst
