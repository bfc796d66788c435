import json

import numpy as np
import pytest

from drdselect.diffusion import linear_schedule, snr
from drdselect.gmm import AnalyticDenoiser, GmmWorld, make_world, sample_dataset
from drdselect.oracle import oracle_timestep
from drdselect.timestep import (
    SelectorParams, TimestepSelection, diffusion_classifier_logprob, feasible_timesteps, logprob_differences,
    mi_derivative_proxy, select_timesteps,
)


def test_default_feasible_set(sched):
    feas = feasible_timesteps(sched)
    assert feas == [int(sched.grid_timestep(p)) for p in range(13, 27)]
    assert feas[0] == 266 and feas[-1] == 531
    ratios = snr(sched, np.array(feas))
    assert np.all((ratios >= 0.05) & (ratios <= 1.0))


def test_gamma_max_one_excludes_high_signal(sched):
    for t in feasible_timesteps(sched, 0.01, 1.0):
        assert sched.alpha_bars[t] <= 0.5


def test_widening_never_shrinks(sched):
    narrow = set(feasible_timesteps(sched, 0.2, 0.5))
    for lo, hi in [(0.1, 0.5), (0.2, 2.0), (0.01, 10.0)]:
        assert narrow <= set(feasible_timesteps(sched, lo, hi))


def test_feasible_errors(sched):
    with pytest.raises(ValueError):
        feasible_timesteps(sched, 1.0, 0.5)
    with pytest.raises(ValueError):
        feasible_timesteps(sched, 1e6, 2e6)


def test_classifier_symmetric_midpoint(w2_den, sched):
    lp = diffusion_classifier_logprob([0.0, 0.0], 400, w2_den, sched, num_eps=20, seed=0)
    p = np.exp(lp)
    assert abs(p[0] - p[1]) < 0.05
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_classifier_high_snr_picks_true_class(w2_den, sched):
    # SNR ~ 8 here; much closer to t = 0 the classifier's logit gap shrinks
    # like (1 - alpha_bar) and its argmax degrades toward a coin flip
    t = sched.grid_timestep(5)
    wins = sum(np.argmax(diffusion_classifier_logprob([-2.0, 0.0], t, w2_den, sched, 20, seed=s)) == 0
               for s in range(100))
    assert wins >= 95


def test_classifier_full_noise_is_uniform(w2_den, sched):
    lp = diffusion_classifier_logprob([-2.0, 0.0], 1000, w2_den, sched, 20, seed=3)
    np.testing.assert_allclose(lp, np.log(0.5), atol=0.1)


def test_single_class_proxy_is_zero(sched):
    g2 = make_world("G2")
    den = AnalyticDenoiser(g2, sched)
    ds = sample_dataset(g2, 20, 0)
    for t in feasible_timesteps(sched)[::4]:
        assert mi_derivative_proxy(ds.X, ds.y, t, den, sched, 5) == 0.0


@pytest.mark.xfail(strict=True, reason="the diffusion-classifier logit scales like abar(1-abar), whose t-derivative "
                   "is largest near t=0 and vanishes at abar=1/2; see the decisions ledger")
def test_proxy_small_at_negligible_noise(w2, w2_den, sched):
    ds = sample_dataset(w2, 20, 1)
    t_low = int(np.argmin(np.abs(sched.alpha_bars[1:] - 0.999))) + 1
    low = mi_derivative_proxy(ds.X, ds.y, t_low, w2_den, sched, 20, seed=1)
    feas = feasible_timesteps(sched)
    mid = mi_derivative_proxy(ds.X, ds.y, feas[len(feas) // 2], w2_den, sched, 20, seed=1)
    assert low <= mid


def test_doubling_b_is_within_two_standard_errors(w2, w2_den, sched):
    ds = sample_dataset(w2, 40, 2)
    t = feasible_timesteps(sched)[5]
    rows20 = np.r_[0:10, 40:50]
    rows40 = np.r_[0:20, 40:60]
    d20 = np.abs(logprob_differences(ds.X[rows20], ds.y[rows20], t, w2_den, sched, 20, seed=2))
    d40 = np.abs(logprob_differences(ds.X[rows40], ds.y[rows40], t, w2_den, sched, 20, seed=2))
    se = d20.std(ddof=1) / np.sqrt(len(d20))
    assert abs(d40.mean() - d20.mean()) < 2 * se


def test_absolute_value_placement(w2, w2_den, sched):
    ds = sample_dataset(w2, 10, 3)
    t = feasible_timesteps(sched)[3]
    d = logprob_differences(ds.X, ds.y, t, w2_den, sched, 5, seed=3)
    assert mi_derivative_proxy(ds.X, ds.y, t, w2_den, sched, 5, seed=3) == pytest.approx(np.mean(np.abs(d)))
    assert mi_derivative_proxy(ds.X, ds.y, t, w2_den, sched, 5, seed=3, absolute="outside") == pytest.approx(abs(np.mean(d)))
    with pytest.raises(ValueError):
        mi_derivative_proxy(ds.X, ds.y, t, w2_den, sched, 5, absolute="both")
    with pytest.raises(ValueError):
        logprob_differences(ds.X, ds.y, 1000, w2_den, sched)


def test_proxy_invariant_under_relabeling(sched):
    w = GmmWorld([[(1.0, [-1.0, 0.5], np.eye(2))], [(1.0, [1.5, 0.0], np.eye(2))]])
    flipped = GmmWorld([[(1.0, [1.5, 0.0], np.eye(2))], [(1.0, [-1.0, 0.5], np.eye(2))]])
    ds = sample_dataset(w, 10, 4)
    t = feasible_timesteps(sched)[4]
    a = logprob_differences(ds.X, ds.y, t, AnalyticDenoiser(w, sched), sched, 8, seed=4)
    b = logprob_differences(ds.X, 1 - ds.y, t, AnalyticDenoiser(flipped, sched), sched, 8, seed=4)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_selection_shape_and_roundtrip(w2, w2_den, sched):
    ds = sample_dataset(w2, 30, 5)
    sel = select_timesteps(ds, w2_den, sched, SelectorParams(B=10, num_eps=5), seed=5)
    assert SelectorParams() == SelectorParams(20, 20, 1, 0.05, 1.0)
    for c, t in sel.timesteps.items():
        assert t in sel.feasible
        curve = dict(sel.curves[c])
        best = max(curve.values())
        assert t == min(s for s, v in curve.items() if v == best)
        assert sel.grid_positions[c] == sched.grid_position(t)
    back = TimestepSelection.from_json(sel.to_json({"note": 1}))
    assert back.timesteps == sel.timesteps and back.curves == sel.curves and back.params == sel.params
    assert json.loads(sel.to_json({"note": 1}))["note"] == 1


def test_single_feasible_timestep_is_forced(w2, sched):
    ab = sched.alpha_bars
    t = sched.grid_timestep(20)
    g = ab[t] / (1 - ab[t])
    params = SelectorParams(B=5, num_eps=3, gamma_min=g * 0.999, gamma_max=g * 1.001)
    sel = select_timesteps(sample_dataset(w2, 10, 0), AnalyticDenoiser(w2, sched), sched, params)
    assert sel.feasible == [t] and set(sel.timesteps.values()) == {t}


def test_classifier_logit_closed_form(w2, w2_den, sched):
    """With unit covariances the mean noise error differs across classes by abar (1 - abar) ||x0 - mu_c||^2."""
    from drdselect.timestep import classifier_logprob_given_noise
    from drdselect.rng import substream

    x0 = np.array([[0.7, -0.4]])
    eps = substream(0, "cf").standard_normal((1, 200_000, 2))
    for t in (50, 266, 450):
        ab = sched.alpha_bars[t]
        lp = classifier_logprob_given_noise(x0, t, eps, w2_den, sched)[0]
        dist = np.sum((x0 - w2.means) ** 2, axis=1)
        gap = ab * (1 - ab) * (dist[1] - dist[0])
        assert lp[0] - lp[1] == pytest.approx(gap, rel=0.02)


def test_ties_go_to_smaller_timestep(sched):
    g2 = make_world("G2")
    sel = select_timesteps(sample_dataset(g2, 10, 0), AnalyticDenoiser(g2, sched), sched, SelectorParams(B=5, num_eps=2))
    assert sel.timesteps[0] == sel.feasible[0]


def test_symmetric_classes_pick_nearby_timesteps(w2, w2_den, sched):
    gaps = []
    for seed in range(5):
        sel = select_timesteps(sample_dataset(w2, 200, seed), w2_den, sched, SelectorParams(), seed)
        gaps.append(abs(sel.grid_positions[0] - sel.grid_positions[1]))
    assert np.median(gaps) <= 1


@pytest.mark.xfail(strict=True, reason="the diffusion-classifier posterior peaks 8-9 grid steps later than "
                   "the exact-posterior MI derivative on this world; see the decisions ledger")
def test_proxy_argmax_tracks_oracle_in_1d(sched):
    world = make_world("W1overlap")
    den = AnalyticDenoiser(world, sched)
    t_oracle, _ = oracle_timestep(world, sched)
    gaps = []
    for seed in range(5):
        sel = select_timesteps(sample_dataset(world, 200, seed), den, sched, SelectorParams(), seed)
        gaps += [abs(p - sched.grid_position(t_oracle)) for p in sel.grid_positions.values()]
    assert np.median(gaps) <= 2
