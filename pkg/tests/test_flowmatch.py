import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmu import ndtensor as nt
from fmu.flowmatch import (
    FlowBatch,
    PolyTimeVelocity,
    SamplerConfig,
    combined_fm_loss,
    fm_regression_loss,
    integrate,
    make_path,
    mean_velocity_from_pred,
    mean_velocity_loss,
    regression_from_pred,
    sample,
)
from fmu.ndtensor import ParamStore, Rng, Tensor


def _oracle_vn(batch_target):
    """Velocity model that returns a fixed tensor regardless of input."""
    return lambda z, t, cond: Tensor(batch_target)


def test_path_endpoints_and_midpoint():
    rng = Rng(0)
    z0, z1 = rng.normal((3, 4, 2)), rng.normal((3, 4, 2))
    p0 = make_path(z0, z1, 0.0)
    np.testing.assert_array_equal(p0.zt.data, Tensor(z0).data)
    p1 = make_path(z0, z1, 1.0)
    np.testing.assert_array_equal(p1.zt.data, Tensor(z1).data)
    np.testing.assert_allclose(p0.target.data, z1 - z0, atol=1e-6)
    mid = make_path(np.zeros((1, 3)), 2 * np.ones((1, 3)), 0.5)
    np.testing.assert_array_equal(mid.zt.data, 1.0)


def test_path_per_sample_times(f64):
    rng = Rng(1)
    z0, z1 = rng.normal((3, 5)), rng.normal((3, 5))
    t = np.array([0.1, 0.3, 0.9])
    np.testing.assert_allclose(make_path(z0, z1, t).zt.data, (1 - t[:, None]) * z0 + t[:, None] * z1, atol=1e-15)


def test_path_errors():
    with pytest.raises(nt.ShapeError):
        make_path(np.zeros((2, 3)), np.zeros((2, 4)), 0.5)
    with pytest.raises(ValueError):
        make_path(np.zeros((2, 3)), np.zeros((2, 3)), 1.2)


def test_regression_loss_zero_and_null_model(f64):
    rng = Rng(2)
    z0, z1 = rng.normal((4, 6, 2)), rng.normal((4, 6, 2))
    batch = FlowBatch(z0, z1, rng.uniform(4))
    assert fm_regression_loss(_oracle_vn(z1 - z0), batch).item() == pytest.approx(0.0, abs=1e-20)
    null = fm_regression_loss(_oracle_vn(np.zeros_like(z0)), batch).item()
    assert null == pytest.approx(np.mean(np.sum((z1 - z0) ** 2, axis=(1, 2))), rel=1e-12)


def test_mean_velocity_exact_offset_and_mirror(f64):
    rng = Rng(3)
    target = rng.normal((6, 5, 3))
    c = rng.normal((5, 3))
    assert mean_velocity_from_pred(Tensor(target), Tensor(target)).item() == 0.0
    assert mean_velocity_from_pred(Tensor(target + c), Tensor(target)).item() == pytest.approx(np.sum(c**2), rel=1e-12)
    # mirrored error pattern: unbiased in the mean, nonzero pointwise
    e = rng.normal((3, 5, 3))
    err = np.concatenate([e, -e])
    target = rng.normal((6, 5, 3))
    assert mean_velocity_from_pred(Tensor(target + err), Tensor(target)).item() < 1e-28
    assert regression_from_pred(Tensor(target + err), Tensor(target)).item() > 1.0


def test_mean_velocity_needs_batch():
    with pytest.raises(ValueError):
        mean_velocity_from_pred(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))


@given(b=st.integers(2, 8), n=st.integers(1, 6), c=st.integers(1, 4), seed=st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_mean_velocity_jensen_inequality(b, n, c, seed):
    with nt.precision(np.float64):
        rng = Rng(seed)
        pred, target = Tensor(rng.normal((b, n, c))), Tensor(3 * rng.normal((b, n, c)))
        lm = mean_velocity_from_pred(pred, target).item()
        lp = regression_from_pred(pred, target).item()
        assert lm <= n * c * lp + 1e-12
        # the tight form: squared norm of the mean never exceeds the mean squared norm
        assert lm <= lp * (1 + 1e-12)


def test_combined_loss_parts(f64):
    rng = Rng(4)
    z0, z1 = rng.normal((4, 3, 2)), rng.normal((4, 3, 2))
    batch = FlowBatch(z0, z1, rng.uniform(4))
    zhat = rng.normal(z0.shape)
    biased = _oracle_vn(z1 - z0 + 0.5)
    l0 = combined_fm_loss(zhat, z0, biased, batch, lambda_mean=0.0).item()
    assert l0 == pytest.approx(np.mean(np.abs(zhat - z0)), rel=1e-12)
    l5 = combined_fm_loss(zhat, z0, biased, batch).item()
    assert l5 - l0 == pytest.approx(5 * 0.25 * 6, rel=1e-9)
    assert combined_fm_loss(z0, z0, _oracle_vn(z1 - z0), batch).item() == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        combined_fm_loss(zhat, z0, biased, batch, lambda_mean=-1)


def test_doubling_endpoints_doubles_target():
    rng = Rng(5)
    z0, z1 = rng.normal((2, 3)), rng.normal((2, 3))
    a = make_path(z0, z1, 0.4).target.data
    b = make_path(2 * z0, 2 * z1, 0.4).target.data
    np.testing.assert_array_equal(b, 2 * a)


def test_constant_field_integration_is_exact_and_step_invariant(f64):
    rng = Rng(6)
    z1 = Tensor(rng.normal((2, 4, 3)))
    c = rng.normal((2, 4, 3))
    outs = [integrate(lambda z, t, cond: Tensor(c), z1, None, s).data for s in (1, 7, 100)]
    for o in outs:
        np.testing.assert_allclose(o, z1.data - c, atol=1e-12)
    zero = integrate(lambda z, t, cond: Tensor(np.zeros(z.shape)), z1, None, 5)
    np.testing.assert_array_equal(zero.data, z1.data)


def test_euler_visits_times_from_noise_end():
    seen = []

    def vn(z, t, cond):
        seen.append(float(t[0]))
        return Tensor(np.zeros(z.shape))

    integrate(vn, Tensor(np.zeros((1, 2))), None, 4)
    assert seen == [1.0, 0.75, 0.5, 0.25]


def test_sampler_config_and_sample_determinism():
    with pytest.raises(ValueError):
        SamplerConfig(0)
    assert SamplerConfig().steps == 8
    vn = lambda z, t, cond: cond
    cond = Tensor(np.ones((2, 3, 4)))
    a = sample(vn, cond, SamplerConfig(3), Rng(1, ("s",))).data
    b = sample(vn, cond, SamplerConfig(3), Rng(1, ("s",))).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample(vn, None, SamplerConfig(3), Rng(1))


def test_poly_time_velocity_is_linear_in_z():
    model = PolyTimeVelocity(degree=3)
    ps = ParamStore(0)
    model.init(ps)
    ps.set_value("toy.a", np.array([0.5, 0.1, 0.0, 0.0]))
    ps.set_value("toy.b", np.array([1.0, 0.0, 0.0, 0.0]))
    vn = model.bind(ps)
    z = Tensor(np.array([[0.0], [2.0]]))
    out = vn(z, np.array([0.5, 0.5])).data
    # at t = 0.5 the shifted Chebyshev argument is 0: T0 = 1, T1 = 0
    np.testing.assert_allclose(out[:, 0], [1.0, 2.0])


def test_sampler_is_differentiable(f64):
    model = PolyTimeVelocity(degree=2)
    ps = ParamStore(0)
    model.init(ps)
    rng = Rng(7)
    for n in ("toy.a", "toy.b"):
        ps.set_value(n, 0.3 * rng.normal(3))
    z1 = Tensor(rng.normal((4, 1)))
    f = lambda p: nt.sum_(integrate(model.bind(p), z1, None, 4) * Tensor(rng.split("w").normal((4, 1))))
    assert nt.grad_check(f, ps, max_coords=3) < 1e-8
