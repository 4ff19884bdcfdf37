"""Trainable pieces: latent encoder, prior-modulated U-shaped denoiser, velocity nets.

All blocks are stateless apart from their configuration. Weights live in a
:class:`~fmu.ndtensor.ParamStore` under the block's namespace; ``init`` creates
them and ``__call__`` reads them at call time, so optimiser updates are picked
up without rebinding.

Token tensors (latent priors) are ``[B, n, c]`` with ``n = gw * gh`` laid out
row-major over a ``(gw, gh)`` grid, ``gw = W / r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import ParamStore, ShapeError, Tensor


def _init_dense(params: ParamStore, name: str, fan_in: int, fan_out: int, zero: bool = False, gain: float = 1.0):
    if zero:
        params.create(f"{name}.w", (fan_in, fan_out), init="zeros")
    else:
        params.create(f"{name}.w", (fan_in, fan_out), std=gain / math.sqrt(fan_in))
    params.create(f"{name}.b", (fan_out,), init="zeros")


def _dense(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _init_conv(params: ParamStore, name: str, k: int, cin: int, cout: int, zero: bool = False, gain: float = 1.0):
    if zero:
        params.create(f"{name}.w", (k, k, cin, cout), init="zeros")
    else:
        params.create(f"{name}.w", (k, k, cin, cout), std=gain / math.sqrt(k * k * cin))
    params.create(f"{name}.b", (cout,), init="zeros")


def _conv(params: ParamStore, name: str, x: Tensor, padding: str) -> Tensor:
    return nt.conv2d(x, params[f"{name}.w"], padding) + params[f"{name}.b"]


def _init_layer_norm(params: ParamStore, name: str, ch: int):
    params.create(f"{name}.g", (ch,), init="constant", value=1.0)
    params.create(f"{name}.b", (ch,), init="zeros")


def _layer_norm(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return nt.layer_norm(x) * params[f"{name}.g"] + params[f"{name}.b"]


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell ``factor`` times along both grid axes."""
    if factor == 1:
        return x
    b, gw, gh, c = x.shape
    x = nt.reshape(x, (b, gw, 1, gh, 1, c))
    x = nt.broadcast_to(x, (b, gw, factor, gh, factor, c))
    return nt.reshape(x, (b, gw * factor, gh * factor, c))


def tokens_to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, c = tokens.shape
    if n != grid[0] * grid[1]:
        raise ShapeError(f"{n} tokens do not fill a {grid} grid")
    return nt.reshape(tokens, (b, grid[0], grid[1], c))


def grid_to_tokens(x: Tensor) -> Tensor:
    b, gw, gh, c = x.shape
    return nt.reshape(x, (b, gw * gh, c))


# ---------------------------------------------------------------------------
# latent encoder


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 16
    factor: int = 4
    width: int = 32
    mobile_blocks: int = 2
    mixer_depth: int = 2
    out_channels: int = 16
    padding: str = "same"


class LatentEncoder:
    """Pixel unshuffle, MobileBlocks, a convolutional token mixer, then a token projection.

    A MobileBlock is depthwise 3x3 -> pointwise -> GELU with a residual. The
    mixer alternates a depthwise 3x3 token-mixing step over the token grid with
    a channel MLP, each pre-normalised and residual.
    """

    def __init__(self, cfg: EncoderConfig, namespace: str = "le"):
        self.cfg = cfg
        self.ns = namespace

    def grid(self, width: int, height: int) -> tuple[int, int]:
        r = self.cfg.factor
        if width % r or height % r:
            raise ShapeError(f"extents {width}x{height} not divisible by unshuffle factor {r}")
        return (width // r, height // r)

    def init(self, params: ParamStore) -> None:
        c, ns = self.cfg, self.ns
        _init_dense(params, f"{ns}.stem", c.in_channels * c.factor**2, c.width)
        for i in range(c.mobile_blocks):
            params.create(f"{ns}.mb{i}.dw", (3, 3, c.width), std=1 / 3)
            _init_dense(params, f"{ns}.mb{i}.pw", c.width, c.width)
        for i in range(c.mixer_depth):
            _init_layer_norm(params, f"{ns}.mix{i}.ln1", c.width)
            params.create(f"{ns}.mix{i}.tok", (3, 3, c.width), std=1 / 3)
            _init_layer_norm(params, f"{ns}.mix{i}.ln2", c.width)
            _init_dense(params, f"{ns}.mix{i}.fc1", c.width, 2 * c.width)
            _init_dense(params, f"{ns}.mix{i}.fc2", 2 * c.width, c.width)
        _init_layer_norm(params, f"{ns}.ln_out", c.width)
        _init_dense(params, f"{ns}.out", c.width, c.out_channels)

    def __call__(self, params: ParamStore, inp: Tensor) -> Tensor:
        c, ns, pad = self.cfg, self.ns, self.cfg.padding
        if inp.ndim != 4 or inp.shape[3] != c.in_channels:
            raise ShapeError(f"encoder {ns}: expected [B, W, H, {c.in_channels}], got {inp.shape}")
        self.grid(inp.shape[1], inp.shape[2])
        h = _dense(params, f"{ns}.stem", nt.pixel_unshuffle(inp, c.factor))
        for i in range(c.mobile_blocks):
            u = nt.depthwise_conv2d(h, params[f"{ns}.mb{i}.dw"], pad)
            h = h + nt.gelu(_dense(params, f"{ns}.mb{i}.pw", u))
        for i in range(c.mixer_depth):
            u = _layer_norm(params, f"{ns}.mix{i}.ln1", h)
            h = h + nt.depthwise_conv2d(u, params[f"{ns}.mix{i}.tok"], pad)
            u = _layer_norm(params, f"{ns}.mix{i}.ln2", h)
            h = h + _dense(params, f"{ns}.mix{i}.fc2", nt.gelu(_dense(params, f"{ns}.mix{i}.fc1", u)))
        h = _dense(params, f"{ns}.out", _layer_norm(params, f"{ns}.ln_out", h))
        return grid_to_tokens(h)


def encode(le: LatentEncoder, params: ParamStore, y_norm, x) -> Tensor:
    """Latent prior of a clean cube given its normalised measurement: ``LE(concat(y_norm, x))``."""
    y_norm, x = nt.as_tensor(y_norm), nt.as_tensor(x)
    if y_norm.shape != x.shape:
        raise ShapeError(f"encode: y_norm {y_norm.shape} and x {x.shape} differ")
    return le(params, nt.concat([y_norm, x], axis=-1))


def encode_condition(ce: LatentEncoder, params: ParamStore, y_norm) -> Tensor:
    """Measurement-only condition tokens."""
    return ce(params, nt.as_tensor(y_norm))


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    bands: int = 8
    width: int = 16
    prior_channels: int = 16
    factor: int = 4
    use_prior: bool = True
    padding: str = "same"


class Denoiser:
    """Residual U-net with two down/up levels; tokens modulate every level.

    Modulation is feature-wise ``h + h * gamma + beta`` with ``gamma, beta``
    linear in the tokens and broadcast from the token grid to the level size.
    The output convolution starts at zero so the block is the identity at init.
    """

    LEVELS = ("enc0", "enc1", "mid", "dec1", "dec0")

    def __init__(self, cfg: DenoiserConfig, namespace: str = "den.0"):
        self.cfg = cfg
        self.ns = namespace

    def _level_width(self, level: str) -> int:
        w = self.cfg.width
        return {"enc0": w, "enc1": 2 * w, "mid": 4 * w, "dec1": 2 * w, "dec0": w}[level]

    def init(self, params: ParamStore) -> None:
        c, ns = self.cfg, self.ns
        w = c.width
        _init_conv(params, f"{ns}.in", 3, c.bands, w)
        for level in self.LEVELS:
            ch = self._level_width(level)
            _init_conv(params, f"{ns}.{level}.c1", 3, ch, ch)
            _init_conv(params, f"{ns}.{level}.c2", 3, ch, ch, gain=0.5)
            if c.use_prior:
                _init_dense(params, f"{ns}.{level}.gamma", c.prior_channels, ch, gain=0.1)
                _init_dense(params, f"{ns}.{level}.beta", c.prior_channels, ch, gain=0.1)
        _init_dense(params, f"{ns}.down1", 4 * w, 2 * w)
        _init_dense(params, f"{ns}.down2", 8 * w, 4 * w)
        _init_dense(params, f"{ns}.up2", 4 * w, 8 * w)
        _init_dense(params, f"{ns}.up1", 2 * w, 4 * w)
        _init_conv(params, f"{ns}.out", 3, w, c.bands, zero=True)

    def _block(self, params, level, h, prior_grid):
        ns, pad = self.ns, self.cfg.padding
        if prior_grid is not None:
            factor = h.shape[1] // prior_grid.shape[1]
            gamma = upsample_nearest(_dense(params, f"{ns}.{level}.gamma", prior_grid), factor)
            beta = upsample_nearest(_dense(params, f"{ns}.{level}.beta", prior_grid), factor)
            h = h + h * gamma + beta
        u = nt.gelu(_conv(params, f"{ns}.{level}.c1", h, pad))
        return h + _conv(params, f"{ns}.{level}.c2", u, pad)

    def __call__(self, params: ParamStore, x: Tensor, prior: Tensor | None = None) -> Tensor:
        c, ns, pad = self.cfg, self.ns, self.cfg.padding
        if x.ndim != 4 or x.shape[3] != c.bands:
            raise ShapeError(f"denoiser {ns}: expected [B, W, H, {c.bands}], got {x.shape}")
        b, wd, ht, _ = x.shape
        if wd % 4 or ht % 4:
            raise ShapeError(f"denoiser {ns}: extents {wd}x{ht} must be divisible by 4")
        grid = None
        if c.use_prior:
            if prior is None:
                raise ValueError(f"denoiser {ns} is configured with a prior but none was given")
            gshape = (wd // c.factor, ht // c.factor)
            if (wd // 4) % gshape[0] or (ht // 4) % gshape[1]:
                raise ShapeError(f"prior grid {gshape} does not divide the coarsest level {(wd // 4, ht // 4)}")
            if prior.shape[0] != b:
                raise ShapeError(f"prior batch {prior.shape[0]} != cube batch {b}")
            grid = tokens_to_grid(prior, gshape)

        h0 = _conv(params, f"{ns}.in", x, pad)
        s0 = self._block(params, "enc0", h0, grid)
        h1 = _dense(params, f"{ns}.down1", nt.pixel_unshuffle(s0, 2))
        s1 = self._block(params, "enc1", h1, grid)
        h2 = _dense(params, f"{ns}.down2", nt.pixel_unshuffle(s1, 2))
        h2 = self._block(params, "mid", h2, grid)
        u1 = nt.pixel_shuffle(_dense(params, f"{ns}.up2", h2), 2) + s1
        u1 = self._block(params, "dec1", u1, grid)
        u0 = nt.pixel_shuffle(_dense(params, f"{ns}.up1", u1), 2) + s0
        u0 = self._block(params, "dec0", u0, grid)
        return x + _conv(params, f"{ns}.out", u0, pad)


# ---------------------------------------------------------------------------
# velocity networks

SIMPLE_CNN = "simplecnn"
MLP = "mlp"


def time_features(t, batch: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1], shape ``[B, dim]``."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("flow time must lie in [0, 1]")
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class VelocityConfig:
    variant: str = SIMPLE_CNN
    channels: int = 16
    hidden: int = 32
    time_dim: int = 8
    grid: tuple[int, int] = (8, 8)


class VelocityNet:
    """``v(z_t, t, cond)`` on token tensors; SimpleCNN mixes over the token grid, MLP is per token."""

    def __init__(self, cfg: VelocityConfig, namespace: str = "vel"):
        if cfg.variant not in (SIMPLE_CNN, MLP):
            raise ValueError(f"unknown velocity variant {cfg.variant!r}")
        self.cfg = cfg
        self.ns = namespace

    @property
    def final_layer(self) -> str:
        return f"{self.ns}.out"

    def init(self, params: ParamStore) -> None:
        c, ns = self.cfg, self.ns
        _init_dense(params, f"{ns}.temb", c.time_dim, c.hidden)
        if c.variant == SIMPLE_CNN:
            _init_conv(params, f"{ns}.c1", 3, 2 * c.channels, c.hidden)
            _init_conv(params, f"{ns}.c2", 3, c.hidden, c.hidden)
        else:
            _init_dense(params, f"{ns}.fc1", 2 * c.channels, c.hidden)
            _init_dense(params, f"{ns}.fc2", c.hidden, c.hidden)
        _init_dense(params, f"{ns}.out", c.hidden, c.channels, gain=0.1)

    def __call__(self, params: ParamStore, z: Tensor, t, cond: Tensor) -> Tensor:
        c, ns = self.cfg, self.ns
        if z.shape != cond.shape or z.ndim != 3 or z.shape[2] != c.channels:
            raise ShapeError(f"velocity {ns}: z {z.shape} and cond {cond.shape} must both be [B, n, {c.channels}]")
        b = z.shape[0]
        temb = _dense(params, f"{ns}.temb", Tensor(time_features(t, b, c.time_dim)))
        if c.variant == SIMPLE_CNN:
            h = nt.concat([tokens_to_grid(z, c.grid), tokens_to_grid(cond, c.grid)], axis=-1)
            h = nt.gelu(_conv(params, f"{ns}.c1", h, "same") + nt.reshape(temb, (b, 1, 1, c.hidden)))
            h = nt.gelu(_conv(params, f"{ns}.c2", h, "same"))
            return grid_to_tokens(_dense(params, f"{ns}.out", h))
        h = nt.concat([z, cond], axis=-1)
        h = nt.gelu(_dense(params, f"{ns}.fc1", h) + nt.reshape(temb, (b, 1, c.hidden)))
        h = nt.gelu(_dense(params, f"{ns}.fc2", h))
        return _dense(params, f"{ns}.out", h)
