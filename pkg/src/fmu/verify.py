"""64-bit gradient verification suite: every op kind, every network block, and the full pipeline."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ndtensor as nt
from .flowmatch import integrate
from .ndtensor import ParamStore, Rng, Tensor, grad_check
from .nnblocks import MLP, SIMPLE_CNN, Denoiser, DenoiserConfig, EncoderConfig, LatentEncoder, VelocityConfig, VelocityNet, encode
from .sensing import SensingSystem, forward, pinv_apply
from .unfolding import FMUNetwork, ModelConfig, UnfoldingConfig, fmu_forward

TOLERANCE = 1e-4


def _away(x: np.ndarray, kinks=(0.0,), gap: float = 0.05) -> np.ndarray:
    # keep samples off non-differentiable points so central differences are valid
    x = x.copy()
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap) * 2
    return x


def _probe(out: Tensor, rng: Rng) -> Tensor:
    """Random linear functional of ``out``, so every output coordinate matters."""
    w = Tensor(rng.normal(out.shape))
    return nt.sum_(out * w)


def _op_cases(rng: Rng) -> dict[str, tuple[dict, Callable]]:
    n = rng.normal
    u = lambda shape, lo=-1.0, hi=1.0: rng.uniform(shape, lo, hi)
    cases = {
        "add": ({"a": n((2, 3, 4)), "b": n((4,))}, lambda p: nt.add(p["a"], p["b"])),
        "sub": ({"a": n((2, 3)), "b": n((2, 1))}, lambda p: nt.sub(p["a"], p["b"])),
        "mul": ({"a": n((2, 3, 4)), "b": n((3, 1))}, lambda p: nt.mul(p["a"], p["b"])),
        "scale": ({"a": n((3, 4))}, lambda p: nt.scale(p["a"], -1.7)),
        "relu": ({"a": _away(u((3, 5)))}, lambda p: nt.relu(p["a"])),
        "gelu": ({"a": 2 * n((3, 5))}, lambda p: nt.gelu(p["a"])),
        "sigmoid": ({"a": 2 * n((3, 5))}, lambda p: nt.sigmoid(p["a"])),
        "abs": ({"a": _away(u((3, 5)))}, lambda p: nt.abs_(p["a"])),
        "clamp": ({"a": _away(u((4, 5), -1, 1.5), (0.0, 1.0))}, lambda p: nt.clamp(p["a"], 0.0, 1.0)),
        "layer_norm": ({"a": n((2, 3, 6))}, lambda p: nt.layer_norm(p["a"])),
        "matmul": ({"a": n((2, 3, 4)), "b": n((4, 5))}, lambda p: nt.matmul(p["a"], p["b"])),
        "sum": ({"a": n((2, 3, 4))}, lambda p: nt.sum_(p["a"], axis=1, keepdims=True)),
        "mean": ({"a": n((2, 3, 4))}, lambda p: nt.mean(p["a"], axis=(0, 2))),
        "broadcast": ({"a": n((3, 1))}, lambda p: nt.broadcast_to(p["a"], (2, 3, 4))),
        "reshape": ({"a": n((2, 6))}, lambda p: nt.reshape(p["a"], (3, 4))),
        "transpose": ({"a": n((2, 3, 4))}, lambda p: nt.transpose(p["a"], (2, 0, 1))),
        "concat": ({"a": n((2, 3)), "b": n((2, 2))}, lambda p: nt.concat([p["a"], p["b"]], axis=1)),
        "pixel_unshuffle": ({"a": n((1, 4, 6, 2))}, lambda p: nt.pixel_unshuffle(p["a"], 2)),
        "pixel_shuffle": ({"a": n((1, 2, 3, 8))}, lambda p: nt.pixel_shuffle(p["a"], 2)),
    }
    for pad in ("same", "valid", "circular"):
        cases[f"conv2d[{pad}]"] = (
            {"a": n((2, 5, 6, 3)), "w": n((3, 3, 3, 4))},
            lambda p, pad=pad: nt.conv2d(p["a"], p["w"], pad),
        )
        cases[f"depthwise_conv2d[{pad}]"] = (
            {"a": n((2, 5, 6, 3)), "w": n((3, 3, 3))},
            lambda p, pad=pad: nt.depthwise_conv2d(p["a"], p["w"], pad),
        )
    mat = n((6, 4))
    cases["linear_map"] = ({"a": n((2, 4))}, lambda p: nt.linear_map(p["a"], lambda x: x @ mat.T, lambda g: g @ mat))
    return cases


def _store(values: dict, seed: int) -> ParamStore:
    ps = ParamStore(seed)
    for k, v in values.items():
        ps.add(k, v)
    return ps


def _jitter(params: ParamStore, rng: Rng, std: float = 0.2) -> ParamStore:
    # zero-initialised output layers would hide upstream gradients
    for p in params.entries():
        params.set_value(p.name, p.value.data + std * rng.split(p.name).normal(p.value.shape))
    return params


def _require_signal(name: str, loss, params: ParamStore) -> None:
    """A check against an all-zero gradient proves nothing; refuse it."""
    nt.backward(loss(params), params)
    dead = [p.name for p in params.entries() if p.trainable and not np.any(p.grad)]
    params.zero_grad()
    if dead:
        raise RuntimeError(f"{name}: zero gradient for {dead}")


def op_suite(seed: int = 0) -> dict[str, float]:
    rng = Rng(seed, ("ops",))
    out = {}
    for name, (values, fn) in _op_cases(rng).items():
        probe_rng = rng.split(("probe", name))
        ps = _store(values, seed)
        out[name] = grad_check(lambda p, fn=fn, r=probe_rng: _probe(fn(p), Rng.from_state(r.get_state())), ps, max_coords=8)
    return out


def block_suite(seed: int = 0) -> dict[str, float]:
    """Latent encoder, denoiser, both velocity nets, the differentiable sampler, and 8x8x3 end-to-end."""
    rng = Rng(seed, ("blocks",))
    out = {}

    def check(name, init, f, std=0.2):
        ps = _jitter(init(ParamStore(seed)), rng.split((name, "jitter")), std)
        w_rng = rng.split((name, "probe"))
        loss = lambda p: _probe(f(p), Rng.from_state(w_rng.get_state()))
        _require_signal(name, loss, ps)
        out[name] = grad_check(loss, ps, max_coords=3)

    le = LatentEncoder(EncoderConfig(in_channels=4, factor=2, width=6, mobile_blocks=1, mixer_depth=1, out_channels=3), "le")
    x_le = Tensor(rng.uniform((2, 4, 4, 4)))
    check("latent_encoder", lambda p: (le.init(p), p)[1], lambda p: le(p, x_le))

    den = Denoiser(DenoiserConfig(bands=3, width=4, prior_channels=3, factor=4), "den.0")
    x_den = Tensor(rng.uniform((1, 8, 8, 3)))
    prior = Tensor(rng.normal((1, 4, 3)))
    check("denoiser", lambda p: (den.init(p), p)[1], lambda p: den(p, x_den, prior))

    z = Tensor(rng.normal((2, 4, 3)))
    cond = Tensor(rng.normal((2, 4, 3)))
    t = np.array([0.3, 0.8])
    for variant in (SIMPLE_CNN, MLP):
        vn = VelocityNet(VelocityConfig(variant, channels=3, hidden=5, time_dim=4, grid=(2, 2)), "vel")
        check(f"velocity[{variant}]", lambda p, vn=vn: (vn.init(p), p)[1], lambda p, vn=vn: vn(p, z, t, cond))

    vn = VelocityNet(VelocityConfig(SIMPLE_CNN, channels=3, hidden=5, time_dim=4, grid=(2, 2)), "vel")
    check("sampler[S=4]", lambda p: (vn.init(p), p)[1], lambda p: integrate(lambda a, s, c: vn(p, a, s, c), z, cond, 4))

    model = ModelConfig(width=8, height=8, bands=3, factor=4, prior_channels=3, denoiser_width=4, encoder_width=6, mobile_blocks=1, mixer_depth=1)
    net = FMUNetwork(model, UnfoldingConfig(stages=2, prior="encoder"))
    sys = SensingSystem.filter(rng.uniform((8, 8, 3)))
    cube = rng.uniform((1, 8, 8, 3))
    y = forward(sys, cube)
    y_norm = pinv_apply(sys, y)

    def e2e(p):
        err = fmu_forward(net, p, sys, y, encode(net.encoder, p, y_norm, cube)) - Tensor(cube)
        return err * err

    def frozen(*prefixes):
        def init(p):
            net.init(p)
            for pre in prefixes:
                p.set_trainable(pre, False)
            return p

        return init

    # small jitter: larger weights saturate the output clamp and zero every gradient
    check("fmu_forward[8x8x3,encoder]", frozen("cond.", "vel."), e2e, std=0.02)

    z_start = rng.normal((1, 4, 3))

    def e2e_flow(p):
        prior = integrate(net.velocity_fn(p), Tensor(z_start), net.condition(p, y_norm), 2)
        err = fmu_forward(net, p, sys, y, prior) - Tensor(cube)
        return err * err

    check("fmu_forward[8x8x3,flow]", frozen("le."), e2e_flow, std=0.02)
    return out


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per case; runs in 64-bit mode regardless of the ambient precision."""
    with nt.precision(np.float64):
        res = op_suite(seed)
        res.update(block_suite(seed))
    return res
