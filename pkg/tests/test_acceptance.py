"""Numbered acceptance criteria. The summary at the end of the run prints one PASS/FAIL line for each."""

import json
import math
import struct
import time
from dataclasses import replace

import numpy as np
import pytest

from fmu import io
from fmu import ndtensor as nt
from fmu import sensing as S
from fmu.flowmatch import FlowBatch, PolyTimeVelocity, fm_regression_loss, integrate, mean_velocity_from_pred
from fmu.metrics import psnr, ssim
from fmu.ndtensor import ParamStore, Rng, Tensor
from fmu.training import (
    AdamState,
    DataConfig,
    TrainConfig,
    ablation,
    adam_step,
    build_dataset,
    cosine_lr,
    evaluate,
    train_phase1,
    train_phase2,
)
from fmu.unfolding import ModelConfig, UnfoldingConfig, gap_project
from fmu.verify import TOLERANCE, gradient_suite


def _random_system(rng: Rng, max_pixels: int | None = None):
    mode = S.CASSI if rng.uniform(()) < 0.5 else S.FILTER
    while True:
        w, h = (int(v) for v in 1 + rng.integers(32, size=2))
        if max_pixels is None or w * h <= max_pixels:
            break
    bands = 1 + int(rng.integers(8))
    shape = (w, h) if mode == S.CASSI else (w, h, bands)
    mask = rng.uniform(shape)
    mask[rng.uniform(shape) < 0.1] = 0.0  # dead pixels
    if mode == S.CASSI:
        return S.SensingSystem.cassi(mask, bands, int(rng.integers(3)))
    return S.SensingSystem.filter(mask)


@pytest.mark.criterion(1, "projection consistency")
def test_criterion_1_projection_consistency(record_property):
    rng = Rng(1, ("acceptance",))
    start = time.perf_counter()
    worst, modes = 0.0, set()
    for i in range(100):
        r = rng.split(i)
        sys = _random_system(r)
        modes.add(sys.mode)
        y = S.forward(sys, r.uniform(sys.cube_shape))
        x = gap_project(sys, Tensor(r.uniform(sys.cube_shape)), y, rho=1.0).data
        live = sys.phi_diag > 1e-8
        worst = max(worst, float(np.max(np.abs(S.forward(sys, x) - y)[live], initial=0.0)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |Phi x - y| = {worst:.2e} in {elapsed:.1f} s")
    assert modes == {S.CASSI, S.FILTER}
    assert worst <= 1e-5
    assert elapsed < 10


@pytest.mark.criterion(2, "operator oracle equivalence")
def test_criterion_2_dense_oracles(record_property):
    rng = Rng(2, ("acceptance",))
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        r = rng.split(i)
        sys = _random_system(r, max_pixels=256)
        phi = S.build_dense(sys)
        x = r.uniform(sys.cube_shape)
        y = r.normal(sys.measurement_shape)
        errs = (
            S.forward(sys, x).reshape(-1) - phi @ S.vec(x),
            S.vec(S.adjoint(sys, y)) - phi.T @ y.reshape(-1),
            S.vec(S.pinv_apply(sys, y)) - np.linalg.pinv(phi, rcond=1e-10) @ y.reshape(-1),
        )
        worst = max(worst, *(float(np.max(np.abs(e))) for e in errs))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max deviation {worst:.2e} in {elapsed:.1f} s")
    assert worst <= 1e-5
    assert elapsed < 30


@pytest.mark.criterion(3, "gradient suite")
def test_criterion_3_gradient_suite(record_property):
    start = time.perf_counter()
    res = gradient_suite(0)
    elapsed = time.perf_counter() - start
    worst_case = max(res, key=res.get)
    record_property("detail", f"{len(res)} cases, worst {worst_case} {res[worst_case]:.2e} in {elapsed:.0f} s")
    covered = {name.split("[")[0] for name in res}
    assert set(nt.op_kinds()) <= covered
    for block in ("latent_encoder", "denoiser", "velocity[simplecnn]", "velocity[mlp]", "sampler[S=4]"):
        assert block in res
    assert any(name.startswith("fmu_forward[8x8x3") for name in res)
    assert max(res.values()) <= TOLERANCE
    assert elapsed < 300


# 1-D Gaussian endpoints: data N(1, 0.5^2) at t = 0, noise N(0, 1) at t = 1
MU0, SIGMA0 = 1.0, 0.5
# irreducible loss E_t Var(z1 - z0 | z_t) = int_0^1 s0^2 s1^2 / ((1-t)^2 s0^2 + t^2 s1^2) dt,
# which is pi/4 for s0 = 1/2, s1 = 1
BAYES_RESIDUAL = math.pi / 4


@pytest.mark.criterion(4, "Gaussian flow-matching oracle")
def test_criterion_4_gaussian_flow(record_property):
    start = time.perf_counter()
    with nt.precision(np.float64):
        rng = Rng(0, ("gaussian",))
        model = PolyTimeVelocity(degree=7)
        ps = ParamStore(0)
        model.init(ps)
        vn = model.bind(ps)

        def batch(r, n):
            return FlowBatch(Tensor(MU0 + SIGMA0 * r.split("z0").normal((n, 1))), Tensor(r.split("z1").normal((n, 1))), r.split("t").uniform(n))

        adam, steps = AdamState(), 1500
        for s in range(steps):
            nt.backward(fm_regression_loss(vn, batch(rng.split(s), 2048)), ps)
            adam_step(ps, adam, cosine_lr(s, steps, 3e-2, 1e-4))
        with nt.no_grad():
            loss = fm_regression_loss(vn, batch(rng.split("eval"), 200_000)).item()
            z = integrate(vn, Tensor(rng.split("sample").normal((100_000, 1))), None, 64).data[:, 0]
    elapsed = time.perf_counter() - start
    d_loss = loss / BAYES_RESIDUAL - 1
    d_mean = z.mean() / MU0 - 1
    d_var = z.var() / SIGMA0**2 - 1
    record_property("detail", f"loss {d_loss:+.2%} mean {d_mean:+.2%} var {d_var:+.2%} in {elapsed:.1f} s")
    assert abs(d_loss) <= 0.05
    assert abs(d_mean) <= 0.05
    assert abs(d_var) <= 0.05
    assert elapsed < 60


def test_gaussian_bayes_residual_by_quadrature():
    from scipy.integrate import quad

    s0, s1 = SIGMA0, 1.0
    val, _ = quad(lambda t: s0**2 * s1**2 / ((1 - t) ** 2 * s0**2 + t**2 * s1**2), 0, 1)
    assert val == pytest.approx(BAYES_RESIDUAL, rel=1e-10)


@pytest.mark.criterion(5, "mean-velocity constraint")
def test_criterion_5_mean_velocity():
    rng = Rng(5, ("acceptance",))
    with nt.precision(np.float64):
        target = rng.normal((6, 4, 3))
        # errors that cancel across the batch: +e for half the samples, -e for the mirror half
        e = rng.normal((3, 4, 3))
        unbiased = target + np.concatenate([e, -e])
        assert mean_velocity_from_pred(Tensor(unbiased), Tensor(target)).item() == pytest.approx(0.0, abs=1e-6)
        c = rng.normal((4, 3))
        offset = mean_velocity_from_pred(Tensor(target + c), Tensor(target)).item()
        assert offset == pytest.approx(float(np.sum(c * c)), abs=1e-6)
        for i in range(100):
            r = rng.split(i)
            b, n, ch = (int(v) for v in 2 + r.integers(7, size=3))
            err = r.normal((b, n, ch)) + r.normal((n, ch))
            pred, tgt = Tensor(err), Tensor(np.zeros_like(err))
            l_mean = mean_velocity_from_pred(pred, tgt).item()
            per_coord = float(np.mean(err**2))
            assert l_mean <= n * ch * per_coord


ABLATION_SEEDS = (7, 8, 9)
ABLATION_EPOCHS = 5


@pytest.mark.criterion(6, "desk-scale prior ablation")
def test_criterion_6_prior_ablation(record_property):
    start = time.perf_counter()
    gains = []
    for seed in ABLATION_SEEDS:
        res = ablation(TrainConfig(seed=seed, epochs=ABLATION_EPOCHS))
        gains.append(res.gain_db)
    elapsed = time.perf_counter() - start
    record_property("detail", "gains " + " ".join(f"{g:+.2f}" for g in gains) + f" dB in {elapsed / 60:.0f} min")
    assert sum(g >= 0.3 for g in gains) >= 2
    assert elapsed < 3600


TINY = TrainConfig(
    epochs=2,
    steps_per_epoch=3,
    batch_size=2,
    data=DataConfig(n_train=3, n_test=1),
    model=ModelConfig(width=16, height=16, bands=8, prior_channels=4, denoiser_width=4, encoder_width=8, mobile_blocks=1, mixer_depth=1, velocity_hidden=8),
    unfolding=UnfoldingConfig(stages=2),
    train_sampler_steps=2,
    eval_sampler_steps=2,
)


@pytest.mark.criterion(7, "two-phase contracts")
def test_criterion_7_two_phase(tmp_path):
    ds = build_dataset(TINY)
    p1 = train_phase1(TINY, dataset=ds)
    cfg2 = replace(TINY, phase=2)
    p2 = train_phase2(cfg2, p1, dataset=ds)
    for name in p1.params.names("le."):
        assert p2.params[name].data.tobytes() == p1.params[name].data.tobytes()

    for cfg, run in ((TINY, lambda **k: train_phase1(TINY, dataset=ds, **k)), (cfg2, lambda **k: train_phase2(cfg2, p1, dataset=ds, **k))):
        full = p1 if cfg is TINY else p2
        head = run(max_steps=2)
        io.save_ckpt(tmp_path / "head.fmu", head)
        rest = run(resume=io.load_ckpt(tmp_path / "head.fmu"))
        for name in full.params:
            np.testing.assert_allclose(rest.params[name].data, full.params[name].data, atol=1e-6)

    again = train_phase2(cfg2, train_phase1(TINY, dataset=ds), dataset=ds)
    m1 = evaluate(cfg2, p2, ds.test, ds.sys, seed=0)
    m2 = evaluate(cfg2, again, ds.test, ds.sys, seed=0)
    np.testing.assert_allclose(m1, m2, atol=1e-6)


@pytest.mark.criterion(8, "metrics")
def test_criterion_8_metrics():
    a = Rng(8).uniform((16, 16, 4), 0.0, 0.9)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-3)
    assert ssim(a, a) == 1.0
    assert cosine_lr(0, 10_000, 4e-4, 1e-6) == 4e-4
    assert cosine_lr(10_000, 10_000, 4e-4, 1e-6) == 1e-6


def _split(blob):
    (n,) = struct.unpack("<I", blob[4:8])
    return json.loads(blob[8 : 8 + n]), blob[8 + n :]


def _join(magic, header, payload):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<I", len(head)) + head + payload


@pytest.mark.criterion(9, "format round trips")
def test_criterion_9_formats(tmp_path):
    cube = Rng(9).normal((5, 7, 3)).astype(np.float32)
    io.save_cube(tmp_path / "c.hsc", cube)
    assert io.load_cube(tmp_path / "c.hsc").tobytes() == cube.tobytes()
    ck = train_phase1(TINY, max_steps=2)
    io.save_ckpt(tmp_path / "k.fmu", ck)
    back = io.load_ckpt(tmp_path / "k.fmu")
    assert io.ckpt_bytes(back) == (tmp_path / "k.fmu").read_bytes()
    for name in ck.params:
        assert back.params[name].data.tobytes() == ck.params[name].data.tobytes()

    def code(fn, blob):
        with pytest.raises(io.FormatError) as exc:
            fn(blob)
        return exc.value.code

    cb = io.cube_bytes(cube)
    header, payload = _split(cb)
    assert code(io.cube_from_bytes, b"XXXX" + cb[4:]) == "bad_magic"
    assert code(io.cube_from_bytes, cb[:4] + struct.pack("<I", 3) + b"{{{") == "bad_header"
    assert code(io.cube_from_bytes, cb[:-4]) == "truncated_payload"
    assert code(io.cube_from_bytes, cb + b"\0") == "trailing_bytes"
    assert code(io.cube_from_bytes, _join(io.CUBE_MAGIC, {**header, "width": 0}, b"")) == "shape_mismatch"

    kb = io.ckpt_bytes(ck)
    header, payload = _split(kb)
    shifted = json.loads(json.dumps(header))
    shifted["entries"][1]["offset"] += 4
    assert code(io.ckpt_from_bytes, _join(io.CKPT_MAGIC, shifted, payload)) == "offset_mismatch"
    reshaped = json.loads(json.dumps(header))
    reshaped["entries"][0]["shape"] = [int(np.prod(reshaped["entries"][0]["shape"])) + 1]
    assert code(io.ckpt_from_bytes, _join(io.CKPT_MAGIC, reshaped, payload)) == "shape_mismatch"
    assert code(io.ckpt_from_bytes, kb[:-8]) == "truncated_payload"
    assert code(io.ckpt_from_bytes, b"HSC1" + kb[4:]) == "bad_magic"
