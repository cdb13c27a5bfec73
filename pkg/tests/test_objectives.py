import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpo_lab import objectives
from smpo_lab.denoiser import DenoiserModel, backward
from smpo_lab.diffusion import InversionResult, forward_noise, renoise_invert
from smpo_lab.harness.checks import gradcheck, identity_sweep, small_problem
from smpo_lab.objectives import (DEFAULT_BETA, LOG2, TimestepMismatchError, dpo_loss,
                                 dpo_scalar, dpo_score, smoothed_dpo_scalar, smpo_loss,
                                 smpo_score)
from smpo_lab.preference import MissingLabelError


def _bias_model(out, T=20):
    m = DenoiserModel(2, 2, T, hidden_dim=6, depth=2, t_embedding=4, init="zeros")
    m.biases[-1][:] = out
    return m


def _forward_inversion(x0, t, eps, sched):
    x = forward_noise(x0, t, eps, sched)
    return InversionResult(x, x, t, [], np.zeros(len(x)), np.zeros(len(x)))


class TestDiffusionLoss:
    def test_perfect_model_is_zero(self, small_sched):
        e = np.array([[0.3, -1.2]])
        g = objectives.diffusion_loss(_bias_model(e[0]), np.ones((1, 2)), np.ones((1, 2)),
                                      np.array([5]), e, small_sched)
        assert g.value == 0.0

    def test_zero_model(self, small_sched):
        e = np.array([[0.3, -1.2]])
        g = objectives.diffusion_loss(_bias_model(0.0), np.ones((1, 2)), np.ones((1, 2)),
                                      np.array([5]), e, small_sched)
        assert g.value == pytest.approx(np.sum(e ** 2) * small_sched.weight(5), rel=1e-14)


class TestScores:
    def test_identical_models_score_zero(self, small_sched, rng):
        m = DenoiserModel(2, 2, 20, hidden_dim=8, depth=2, t_embedding=4, seed=3)
        x0, c, e = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        t = np.array([2, 6, 11, 19])
        assert np.all(dpo_score(m, m.copy(), x0, c, t, e, small_sched) == 0.0)
        inv = renoise_invert(m, x0, t, 9, c, 1.0, small_sched)
        assert np.all(smpo_score(m, m.copy(), x0, c, t, inv, small_sched) == 0.0)

    def test_better_model_scores_negative(self, small_sched):
        e = np.array([0.7, -0.4])
        s = dpo_score(_bias_model(e), _bias_model(0.0), np.ones(2), np.ones(2), 8, e,
                      small_sched)
        assert s < 0

    def test_implied_noise_recovers_dpo(self, small_sched, rng):
        m, ref = small_problem(0)[:2]
        x0, c, e = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        t = np.array([1, 4, 8, 12, 19])
        a = dpo_score(m, ref, x0, c, t, e, small_sched)
        b = smpo_score(m, ref, x0, c, t, _forward_inversion(x0, t, e, small_sched),
                       small_sched)
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)

    def test_timestep_mismatch(self, small_sched, rng):
        m, ref = small_problem(0)[:2]
        inv = renoise_invert(m, rng.normal(size=2), 5, 9, np.zeros(2), 1.0, small_sched)
        with pytest.raises(TimestepMismatchError):
            smpo_score(m, ref, rng.normal(size=2), np.zeros(2), 6, inv, small_sched)


class TestPreferenceLosses:
    def test_model_equal_reference_gives_log2(self, small_sched, rng):
        m = small_problem(1)[1]
        pair = {"condition": rng.normal(size=(3, 2)), "x_w": rng.normal(size=(3, 2)),
                "x_l": rng.normal(size=(3, 2)), "coefficient": np.array([2.0, -1.0, 7.0])}
        t = np.array([3, 9, 17])
        g = dpo_loss(m, m.copy(), pair, t, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)),
                     DEFAULT_BETA, small_sched)
        assert g.value == pytest.approx(LOG2, abs=1e-15)

    def test_swap_negates_margin(self, small_sched):
        model, ref, sched, pair, t, eps, beta = small_problem(2)
        g = dpo_loss(model, ref, pair, t, eps[0], eps[1], beta, sched)
        swapped = dict(pair, x_w=pair["x_l"], x_l=pair["x_w"])
        h = dpo_loss(model, ref, swapped, t, eps[1], eps[0], beta, sched)
        np.testing.assert_allclose(h.breakdown.margin, -g.breakdown.margin, rtol=1e-14)
        np.testing.assert_allclose(h.breakdown.loss,
                                   np.logaddexp(0.0, g.breakdown.margin), rtol=1e-14)

    def test_zero_coefficient_gates_everything(self, small_sched):
        model, ref, sched, pair, t, eps, beta = small_problem(3)
        inv = [renoise_invert(model, pair[k], t, 9, pair["condition"], 1.0, sched)
               for k in ("x_w", "x_l")]
        g = smpo_loss(model, ref, pair, t, inv[0], inv[1], beta, sched, coefficient=0.0)
        np.testing.assert_allclose(g.breakdown.loss, LOG2, rtol=0, atol=1e-12)
        assert backward(model, g).norm() == 0.0

    def test_reduces_to_dpo(self, small_sched):
        model, ref, sched, pair, t, eps, beta = small_problem(4, batch=50)
        inv = [_forward_inversion(pair[k], t, e, sched) for k, e in zip(("x_w", "x_l"), eps)]
        a = smpo_loss(model, ref, pair, t, inv[0], inv[1], beta, sched, coefficient=1.0)
        b = dpo_loss(model, ref, pair, t, eps[0], eps[1], beta, sched)
        np.testing.assert_allclose(a.breakdown.loss, b.breakdown.loss, rtol=0, atol=1e-12)

    def test_margin_scales_with_coefficient(self, small_sched):
        model, ref, sched, pair, t, eps, beta = small_problem(5)
        inv = [renoise_invert(model, pair[k], t, 9, pair["condition"], 1.0, sched)
               for k in ("x_w", "x_l")]
        base = smpo_loss(model, ref, pair, t, inv[0], inv[1], beta, sched, coefficient=1.0)
        for k in (-3.0, 0.5, 4.0):
            g = smpo_loss(model, ref, pair, t, inv[0], inv[1], beta, sched, coefficient=k)
            np.testing.assert_allclose(g.breakdown.margin, k * base.breakdown.margin,
                                       rtol=1e-13)

    def test_missing_label(self, small_sched):
        model, ref, sched, pair, t, eps, beta = small_problem(6)
        inv = [renoise_invert(model, pair[k], t, 9, pair["condition"], 1.0, sched)
               for k in ("x_w", "x_l")]
        bare = {k: v for k, v in pair.items() if k != "coefficient"}
        with pytest.raises(MissingLabelError):
            smpo_loss(model, ref, bare, t, inv[0], inv[1], beta, sched)

    def test_default_beta(self):
        assert DEFAULT_BETA == 2000.0


@pytest.mark.parametrize("objective", ["diffusion", "dpo", "smpo"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(objective, seed):
    assert gradcheck(objective, seed) < 1e-4


@pytest.mark.parametrize("seed", range(2))
def test_gradient_through_inversion(seed):
    assert gradcheck("smpo", seed, detach=False) < 1e-4


def test_silu_gradients():
    assert gradcheck("smpo", 0, activation="silu") < 1e-4


class TestSmoothingIdentity:
    lp = st.floats(-5, 5)

    @settings(max_examples=200)
    @given(lp, lp, lp, lp, st.floats(0.01, 100))
    def test_unit_alpha_gamma_is_plain_dpo(self, a, b, c, d, beta):
        direct, reduced = smoothed_dpo_scalar(a, b, c, d, 1.0, 1.0, beta)
        plain = dpo_scalar(a, b, c, d, beta)
        assert direct == pytest.approx(plain, abs=1e-10)
        assert reduced == pytest.approx(plain, abs=1e-15)

    @given(lp, lp, lp, lp, st.floats(0.1, 20), st.floats(0.01, 100))
    def test_balanced_is_log2(self, a, b, c, d, gamma, beta):
        direct, reduced = smoothed_dpo_scalar(a, b, c, d, gamma / 2, gamma, beta)
        assert reduced == LOG2
        assert direct == pytest.approx(LOG2, abs=1e-10)

    def test_sweep(self):
        assert identity_sweep(10_000, 0) < 1e-10
