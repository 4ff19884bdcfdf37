"""N-stage GAP unfolding with learned step sizes and prior-guided denoisers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nt
from .flowmatch import SamplerConfig, sample
from .ndtensor import ParamStore, Rng, Tensor
from .nnblocks import (
    DenoiserConfig,
    Denoiser,
    EncoderConfig,
    LatentEncoder,
    VelocityConfig,
    VelocityNet,
    encode,
    encode_condition,
)
from .sensing import SensingSystem, forward_t, pinv_apply, pinv_t

PRIOR_ENCODER = "encoder"
PRIOR_FLOW = "flow"
PRIOR_NONE = "none"


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    height: int = 32
    bands: int = 8
    factor: int = 4
    prior_channels: int = 16
    denoiser_width: int = 16
    encoder_width: int = 32
    mobile_blocks: int = 2
    mixer_depth: int = 2
    encoder_padding: str = "same"
    velocity: str = "simplecnn"
    velocity_hidden: int = 32
    time_dim: int = 8
    # False: the condition branch is a fresh encoder; True: it reuses the measurement half of LE
    cond_shares_le: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return (self.width // self.factor, self.height // self.factor)


@dataclass(frozen=True)
class UnfoldingConfig:
    stages: int = 3
    prior: str = PRIOR_FLOW
    rho_init: float = 1.0
    train_rho: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one unfolding stage")
        if self.prior not in (PRIOR_ENCODER, PRIOR_FLOW, PRIOR_NONE):
            raise ValueError(f"unknown prior source {self.prior!r}")


@dataclass
class UnfoldingState:
    x: Tensor
    theta: Tensor
    stage: int


@dataclass
class FMUNetwork:
    """Bundle of every block the reconstruction pipeline needs, with their namespaces.

    ``le`` (latent encoder), ``cond`` (condition encoder), ``vel`` (velocity
    net), ``den.k`` (stage denoisers) and ``unf.rho.k`` (stage step sizes).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    unfolding: UnfoldingConfig = field(default_factory=UnfoldingConfig)

    def __post_init__(self):
        m = self.model
        use_prior = self.unfolding.prior != PRIOR_NONE
        enc = EncoderConfig(
            in_channels=2 * m.bands,
            factor=m.factor,
            width=m.encoder_width,
            mobile_blocks=m.mobile_blocks,
            mixer_depth=m.mixer_depth,
            out_channels=m.prior_channels,
            padding=m.encoder_padding,
        )
        self.encoder = LatentEncoder(enc, "le") if use_prior else None
        self.cond_encoder = LatentEncoder(EncoderConfig(**{**enc.__dict__, "in_channels": m.bands}), "cond") if use_prior else None
        self.velocity = (
            VelocityNet(VelocityConfig(m.velocity, m.prior_channels, m.velocity_hidden, m.time_dim, m.grid), "vel")
            if use_prior
            else None
        )
        dcfg = DenoiserConfig(m.bands, m.denoiser_width, m.prior_channels, m.factor, use_prior)
        self.denoisers = [Denoiser(dcfg, f"den.{k}") for k in range(self.unfolding.stages)]

    @property
    def stages(self) -> int:
        return self.unfolding.stages

    def init(self, params: ParamStore) -> ParamStore:
        for k in range(self.stages):
            params.create(f"unf.rho.{k}", (1,), init="constant", value=self.unfolding.rho_init)
            params.set_trainable(f"unf.rho.{k}", self.unfolding.train_rho)
        for den in self.denoisers:
            den.init(params)
        if self.encoder is not None:
            self.encoder.init(params)
            if not self.model.cond_shares_le:
                self.cond_encoder.init(params)
            self.velocity.init(params)
        return params

    def velocity_fn(self, params: ParamStore):
        return lambda z, t, cond: self.velocity(params, z, t, cond)

    def condition(self, params: ParamStore, y_norm) -> Tensor:
        if self.model.cond_shares_le:
            # measurement half of LE with the clean-cube half zeroed
            y_norm = nt.as_tensor(y_norm)
            return encode(self.encoder, params, y_norm, Tensor(np.zeros(y_norm.shape)))
        return encode_condition(self.cond_encoder, params, y_norm)


def _batched(a: np.ndarray, ndim: int) -> np.ndarray:
    return a if a.ndim == ndim else a[None]


def gap_project(sys: SensingSystem, theta: Tensor, y, rho=1.0) -> Tensor:
    """``theta + rho * pinv(y - Phi theta)``; ``rho = 1`` is the exact Euclidean projection."""
    residual = nt.as_tensor(y) - forward_t(sys, theta)
    return theta + nt.as_tensor(rho) * pinv_t(sys, residual)


def fmu_forward(net: FMUNetwork, params: ParamStore, sys: SensingSystem, y, prior: Tensor | None = None, return_states: bool = False):
    """Run every stage and return the reconstruction clamped to [0, 1], ``[B, W, H, L]``."""
    if net.unfolding.prior != PRIOR_NONE and prior is None:
        raise ValueError(f"prior source {net.unfolding.prior!r} needs a prior tensor")
    y = nt.as_tensor(_batched(np.asarray(nt.as_tensor(y).data), 3))
    theta = pinv_t(sys, y)
    states = []
    for k, den in enumerate(net.denoisers):
        x = gap_project(sys, theta, y, params[f"unf.rho.{k}"])
        theta = den(params, x, prior if net.unfolding.prior != PRIOR_NONE else None)
        states.append(UnfoldingState(x, theta, k + 1))
    out = nt.clamp(theta, 0.0, 1.0)
    return (out, states) if return_states else out


def reconstruct(
    net: FMUNetwork,
    params: ParamStore,
    sys: SensingSystem,
    y,
    sampler: SamplerConfig = SamplerConfig(8),
    rng: Rng | None = None,
) -> np.ndarray:
    """Inference: condition on ``pinv(y)``, sample one flow prior, unfold. Returns ``[B, W, H, L]``."""
    y = _batched(np.asarray(y), 3)
    with nt.no_grad():
        prior = None
        if net.unfolding.prior != PRIOR_NONE:
            if rng is None:
                raise ValueError("flow-prior reconstruction needs an rng")
            cond = net.condition(params, pinv_apply(sys, y))
            prior = sample(net.velocity_fn(params), cond, sampler, rng)
        return fmu_forward(net, params, sys, y, prior).data.copy()
