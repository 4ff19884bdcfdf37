"""Constant-velocity flow matching over latent tokens.

The data end of the path is ``t = 0`` (encoder tokens), the noise end ``t = 1``
(standard normal). Along ``z_t = (1 - t) z0 + t z1`` the target velocity is
the constant ``z1 - z0``; sampling integrates from ``t = 1`` down to ``t = 0``.

A velocity model here is any callable ``vn(z_t, t, cond) -> Tensor`` where
``t`` is a per-sample array of shape ``[B]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .ndtensor import ParamStore, Rng, ShapeError, Tensor

VelocityFn = Callable[[Tensor, np.ndarray, "Tensor | None"], Tensor]


def _time_column(t, ndim: int, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("flow time must lie in [0, 1]")
    return t.reshape((batch,) + (1,) * (ndim - 1))


@dataclass
class FlowPath:
    z0: Tensor
    z1: Tensor
    t: np.ndarray
    zt: Tensor
    target: Tensor


def make_path(z0, z1, t) -> FlowPath:
    z0, z1 = nt.as_tensor(z0), nt.as_tensor(z1)
    if z0.shape != z1.shape:
        raise ShapeError(f"make_path: z0 {z0.shape} and z1 {z1.shape} differ")
    col = _time_column(t, z0.ndim, z0.shape[0])
    tt = Tensor(col)
    zt = z0 * (1.0 - tt) + z1 * tt
    return FlowPath(z0, z1, col.reshape(-1).copy(), zt, z1 - z0)


@dataclass
class FlowBatch:
    z0: Tensor
    z1: Tensor
    t: np.ndarray
    cond: Tensor | None = None


def _predict(vn: VelocityFn, batch: FlowBatch) -> tuple[Tensor, Tensor]:
    path = make_path(batch.z0, batch.z1, batch.t)
    return vn(path.zt, path.t, batch.cond), path.target


def regression_from_pred(pred: Tensor, target: Tensor) -> Tensor:
    """Batch mean of the squared L2 norm of ``target - pred``."""
    err = target - pred
    per_sample = nt.sum_(err * err, axis=tuple(range(1, err.ndim)))
    return nt.mean(per_sample)


def mean_velocity_from_pred(pred: Tensor, target: Tensor) -> Tensor:
    """Squared L2 norm of the per-coordinate batch-mean velocity error."""
    if pred.shape[0] < 2:
        raise ValueError("mean velocity loss needs a batch of at least 2")
    gap = nt.mean(pred - target, axis=0)
    return nt.sum_(gap * gap)


def fm_regression_loss(vn: VelocityFn, batch: FlowBatch) -> Tensor:
    pred, target = _predict(vn, batch)
    return regression_from_pred(pred, target)


def mean_velocity_loss(vn: VelocityFn, batch: FlowBatch) -> Tensor:
    pred, target = _predict(vn, batch)
    return mean_velocity_from_pred(pred, target)


def l1_mean(a, b) -> Tensor:
    return nt.mean(nt.abs_(nt.as_tensor(a) - nt.as_tensor(b)))


def combined_fm_loss(z0_hat, z_le, vn: VelocityFn, batch: FlowBatch, lambda_mean: float = 5.0) -> Tensor:
    """Mean absolute sample error plus ``lambda_mean`` times the mean-velocity loss."""
    if lambda_mean < 0:
        raise ValueError("lambda_mean must be non-negative")
    loss = l1_mean(z0_hat, z_le)
    if lambda_mean:
        loss = loss + lambda_mean * mean_velocity_loss(vn, batch)
    return loss


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")


def integrate(vn: VelocityFn, z1: Tensor, cond, steps: int) -> Tensor:
    """Explicit Euler from ``t = 1`` to ``t = 0`` evaluating at ``t_s = s / S``."""
    z = z1
    batch = z.shape[0]
    dt = 1.0 / steps
    for s in range(steps, 0, -1):
        t = np.full(batch, s / steps)
        z = z - dt * vn(z, t, cond)
    return z


def sample(vn: VelocityFn, cond, cfg: SamplerConfig, rng: Rng, shape=None) -> Tensor:
    """Draw ``z1 ~ N(0, I)`` and integrate it to the data end; differentiable when recording."""
    if shape is None:
        if cond is None:
            raise ValueError("sample needs either cond or an explicit shape")
        shape = cond.shape
    z1 = nt.rand_normal(rng, shape)
    return integrate(vn, z1, cond, cfg.steps)


class PolyTimeVelocity:
    """Scalar velocity model linear in its parameters: ``a(t) z + b(t)``.

    ``a`` and ``b`` are expansions in shifted Chebyshev polynomials of ``t``.
    Used for low-dimensional checks where the optimal field is known in closed form.
    """

    def __init__(self, degree: int = 7, namespace: str = "toy"):
        self.degree = degree
        self.ns = namespace

    def init(self, params: ParamStore) -> None:
        params.create(f"{self.ns}.a", (self.degree + 1,), init="zeros")
        params.create(f"{self.ns}.b", (self.degree + 1,), init="zeros")

    def basis(self, t) -> np.ndarray:
        s = 2.0 * np.asarray(t, dtype=np.float64).reshape(-1) - 1.0
        return np.polynomial.chebyshev.chebvander(s, self.degree)

    def bind(self, params: ParamStore) -> VelocityFn:
        def vn(z, t, cond=None):
            phi = Tensor(self.basis(t).reshape((z.shape[0],) + (1,) * (z.ndim - 1) + (self.degree + 1,)))
            a = nt.sum_(phi * params[f"{self.ns}.a"], axis=-1)
            b = nt.sum_(phi * params[f"{self.ns}.b"], axis=-1)
            return a * z + b

        return vn
