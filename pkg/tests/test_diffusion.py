import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drdselect.diffusion import (
    ddim_reconstruct, ddim_step, ddpm_sample, ddpm_step, forward_noise, linear_schedule, predict_x0,
    reverse_path, snr,
)
from drdselect.gmm import AnalyticDenoiser, make_world
from drdselect.rng import substream


def test_two_step_schedule_products(tiny_sched):
    np.testing.assert_allclose(tiny_sched.betas, [0.1, 0.2])
    np.testing.assert_allclose(tiny_sched.alpha_bars, [1.0, 0.9, 0.72], rtol=0, atol=1e-15)


def test_constant_beta_is_geometric():
    s = linear_schedule(40, 0.01, 0.01, 40)
    np.testing.assert_allclose(s.alpha_bars, 0.99 ** np.arange(41), rtol=1e-13)


def test_default_schedule_invariants(sched):
    sched.check_invariants()
    assert sched.alpha_bars[1000] < 1e-4
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.T_infer == 50
    assert sched.inference_grid[0] == 1 and sched.inference_grid[-1] == 1000
    assert np.all(np.diff(sched.inference_grid) > 0)


def test_grid_translation_roundtrip(sched):
    for pos in range(sched.T_infer):
        assert sched.grid_position(sched.grid_timestep(pos)) == pos
    with pytest.raises(ValueError):
        sched.grid_position(2)


@pytest.mark.parametrize("bad", [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_schedule_rejects_bad_betas(bad):
    with pytest.raises(ValueError):
        linear_schedule(100, *bad, 10)


def test_snr_values(tiny_sched, sched):
    assert snr(tiny_sched, 1) == pytest.approx(9.0, rel=1e-14)
    ratios = snr(sched, np.arange(1, 1001))
    assert np.all(np.diff(ratios) < 0)
    with pytest.raises(ValueError):
        snr(sched, 0)


@pytest.mark.parametrize("gamma", [0.05, 1.0])
def test_snr_boundary_algebra(gamma):
    ab = gamma / (1 + gamma)
    assert ab / (1 - ab) == pytest.approx(gamma, abs=1e-12)


def test_forward_noise_special_cases(tiny_sched):
    x0 = np.array([1.0, 0.0])
    np.testing.assert_allclose(forward_noise(x0, 2, np.zeros(2), tiny_sched), np.sqrt(0.72) * x0)
    e = np.array([0.3, -1.2])
    np.testing.assert_allclose(forward_noise(np.zeros(2), 2, e, tiny_sched), np.sqrt(0.28) * e)
    np.testing.assert_allclose(forward_noise(x0, 2, [0.0, 1.0], tiny_sched), [0.848528137, 0.529150262], atol=1e-9)
    assert np.array_equal(forward_noise(x0, 0, e, tiny_sched), x0)
    with pytest.raises(ValueError):
        forward_noise(x0, 1, np.zeros(3), tiny_sched)


def test_forward_noise_marginal_moments(sched):
    x0 = np.array([1.5, -0.5])
    t = 300
    eps = substream(1, "moments").standard_normal((10_000, 2))
    xt = forward_noise(np.tile(x0, (10_000, 1)), t, eps, sched)
    ab = sched.alpha_bars[t]
    se = np.sqrt((1 - ab) / 10_000)
    assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) < 3 * se)
    cov = np.cov(xt.T)
    # sample variance has standard error about var * sqrt(2 / n)
    assert np.all(np.abs(np.diag(cov) - (1 - ab)) < 3 * (1 - ab) * np.sqrt(2 / 10_000))
    assert abs(cov[0, 1]) < 3 * (1 - ab) / np.sqrt(10_000)


def test_ddim_step_identities(sched):
    rng = substream(2, "ddim")
    x0, e = rng.standard_normal(2), rng.standard_normal(2)
    xt = forward_noise(x0, 500, e, sched)
    np.testing.assert_allclose(ddim_step(xt, 500, 300, e, sched), forward_noise(x0, 300, e, sched), atol=1e-12)
    np.testing.assert_allclose(ddim_step(xt, 500, 0, e, sched), x0, atol=1e-12)
    ratio = np.sqrt(sched.alpha_bars[300] / sched.alpha_bars[500])
    np.testing.assert_allclose(ddim_step(xt, 500, 300, np.zeros(2), sched), ratio * xt, rtol=1e-13)
    with pytest.raises(ValueError):
        ddim_step(xt, 300, 300, e, sched)


def test_predict_x0_inverts_forward(sched):
    x0, e = np.array([0.2, 3.0]), np.array([-1.0, 0.5])
    np.testing.assert_allclose(predict_x0(forward_noise(x0, 700, e, sched), 700, e, sched), x0, atol=1e-12)


def test_reverse_path(sched):
    t = sched.grid_timestep(3)
    path = reverse_path(sched, t)
    assert path[0] == t and path[-1] == 0 and len(path) == 5
    with pytest.raises(ValueError):
        reverse_path(sched, 2)


@settings(max_examples=50, deadline=None)
@given(pos=st.integers(0, 49), seed=st.integers(0, 2**32 - 1))
def test_exact_inversion_with_true_noise(sched, true_noise, pos, seed):
    rng = substream(seed, "inv")
    x0, e = rng.normal(0, 3, 2), rng.standard_normal(2)
    t = sched.grid_timestep(pos)
    rec = ddim_reconstruct(forward_noise(x0, t, e, sched), t, 0, true_noise(e), sched)
    assert np.max(np.abs(rec - x0)) <= 1e-9


def test_reconstruct_rejects_off_grid_and_bad_shape(sched, true_noise):
    with pytest.raises(ValueError):
        ddim_reconstruct(np.zeros(2), 2, 0, true_noise(np.zeros(2)), sched)
    with pytest.raises(ValueError):
        ddim_reconstruct(np.zeros(2), sched.grid_timestep(5), 0, true_noise(np.zeros(3)), sched)


def test_reconstruct_zero_is_fixed_point_in_symmetric_world(sched):
    den = AnalyticDenoiser(make_world("G2"), sched)
    for pos in (0, 10, 30, 49):
        t = sched.grid_timestep(pos)
        np.testing.assert_array_equal(ddim_reconstruct(np.zeros((1, 2)), t, 0, den, sched), 0.0)


def test_reconstruct_contracts_toward_mean(sched):
    den = AnalyticDenoiser(make_world("G2"), sched)
    t = sched.grid_timestep(20)
    rng = substream(3, "contract")
    radii = [0.0, 1.0, 2.0, 3.0]
    devs = []
    for r in radii:
        x0 = np.tile([r, 0.0], (2000, 1))
        e = rng.standard_normal((2000, 2))
        xt = forward_noise(x0, t, e, sched)
        rec = ddim_reconstruct(xt, t, 0, den, sched)
        # each step scales by sqrt(a'a) + sqrt((1-a')(1-a)) <= 1, so the chain never expands
        assert np.all(np.linalg.norm(rec, axis=1) <= np.linalg.norm(xt, axis=1) + 1e-12)
        devs.append(np.mean(np.sum((rec - x0) ** 2, axis=1)))
    assert np.all(np.diff(devs) > 0)


def test_ddpm_step_sigma_zero_is_ddim(sched):
    rng = substream(4, "ddpm")
    x, e, z = rng.standard_normal((3, 2))
    np.testing.assert_allclose(ddpm_step(x, 400, e, sched, z, sigma=0.0), ddim_step(x, 400, 399, e, sched), atol=1e-13)


def test_ddpm_sample_matches_class_mean(w2, sched):
    den = AnalyticDenoiser(w2, sched)
    xs = ddpm_sample(0, den, sched, seed=5, n=2000)
    assert np.all(np.abs(xs.mean(axis=0) - [-2.0, 0.0]) < 0.15)


def test_ddpm_sample_deterministic_and_sigma_zero(w2, sched):
    den = AnalyticDenoiser(w2, sched)
    a = ddpm_sample(1, den, sched, seed=9)
    b = ddpm_sample(1, den, sched, seed=9)
    assert a.tobytes() == b.tobytes()
    x_T = substream(9, "ddpm_sample").standard_normal((1, 2))
    det = ddpm_sample(1, den, sched, seed=9, sigmas=np.zeros(1000))
    x = x_T
    for t in range(1000, 0, -1):
        x = ddim_step(x, t, t - 1, den.predict(x, t, 1), sched)
    np.testing.assert_allclose(det, x[0], atol=1e-10)
