import numpy as np
import pytest

from smpo_lab.autodiff import GraphReuseError
from smpo_lab.denoiser import (DenoiserModel, DimensionMismatchError, GradientBundle,
                               LossGraph, Tape, backward, eps_predict, eps_predict_guided)
from smpo_lab.harness.checks import finite_difference, relative_error
from smpo_lab import objectives


def _model(seed=0, **kw):
    kw = {"hidden_dim": 10, "depth": 2, "t_embedding": 4, **kw}
    m = DenoiserModel(2, 2, 20, seed=seed, **kw)
    for b in m.biases:
        b += 0.05
    return m


def test_zero_model_outputs_bias_path(rng):
    m = DenoiserModel(2, 2, 20, init="zeros")
    m.biases[-1][:] = [0.3, -0.7]
    for _ in range(3):
        out = eps_predict(m, rng.normal(size=2), int(rng.integers(1, 21)), rng.normal(size=2))
        assert np.array_equal(out, [0.3, -0.7])


def test_forward_is_pure(rng):
    m = _model()
    x, c = rng.normal(size=2), rng.normal(size=2)
    assert eps_predict(m, x, 5, c).tobytes() == eps_predict(m, x, 5, c).tobytes()


def test_single_and_batched_calls_agree(rng):
    m = _model()
    x, c = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    t = np.array([1, 5, 9, 20])
    batched = m.forward(x, t, c)
    for i in range(4):
        np.testing.assert_allclose(m.forward(x[i], t[i], c[i]), batched[i], rtol=1e-13)


def test_weight_perturbation_matches_jvp(rng):
    m = _model(seed=2)
    x, c = rng.normal(size=2), rng.normal(size=2)
    direction = [rng.normal(size=p.shape) for p in m.parameters()]
    probe = rng.normal(size=2)

    # analytic directional derivative of <probe, eps> through the tape
    tape = Tape(m)
    out = tape.eps(m, x[None, :], 7, c)
    from smpo_lab import autodiff as ad
    root = ad.mean(ad.scale(ad.sq_norm_rows(out + 0.0), 0.0) + ad.scale(
        ad.multiply(out, probe[None, :]), 2.0).value.sum() * 0 + ad.scale(out, probe[None, :]))
    g = backward(m, LossGraph(root, tape)).arrays()
    jvp = sum(float(np.sum(a * d)) for a, d in zip(g, direction)) * probe.size

    def f(h):
        m2 = m.copy()
        for p, d in zip(m2.parameters(), direction):
            p += h * d
        return float(probe @ m2.forward(x, 7, c))

    errs = []
    for h in (1e-3, 5e-4):
        errs.append(abs((f(h) - f(-h)) / (2 * h) - jvp))
    # central differences converge at O(h^2)
    assert errs[1] < errs[0] / 3.0 or errs[1] < 1e-10
    assert errs[1] < 1e-5


def test_guidance_identities(rng):
    m = _model(seed=3)
    x, c = rng.normal(size=2), rng.normal(size=2)
    assert np.array_equal(eps_predict_guided(m, x, 4, c, 1.0), eps_predict(m, x, 4, c))
    assert np.array_equal(eps_predict_guided(m, x, 4, c, 0.0),
                          eps_predict(m, x, 4, m.null_condition))
    up = eps_predict_guided(m, x, 4, c, 7.5)
    down = eps_predict_guided(m, x, 4, c, -7.5)
    np.testing.assert_allclose((up + down) / 2, eps_predict_guided(m, x, 4, c, 0.0),
                               rtol=0, atol=1e-12)


def test_dimension_mismatch():
    m = _model()
    with pytest.raises(DimensionMismatchError):
        eps_predict(m, np.zeros(3), 1, np.zeros(2))
    with pytest.raises(DimensionMismatchError):
        eps_predict(m, np.zeros(2), 1, np.zeros(5))


def test_constant_loss_has_exactly_zero_gradient(rng):
    m = _model()
    ref = m.copy()
    pair = {"condition": rng.normal(size=(3, 2)), "x_w": rng.normal(size=(3, 2)),
            "x_l": rng.normal(size=(3, 2)), "coefficient": np.zeros(3)}
    sched = __import__("smpo_lab.numerics", fromlist=["x"]).make_schedule(20, "linear_beta", 0.002, 0.3)
    from smpo_lab.diffusion import renoise_invert
    t = np.array([3, 9, 15])
    inv = [renoise_invert(m, pair[k], t, 3, pair["condition"], 1.0, sched) for k in ("x_w", "x_l")]
    for p in m.parameters():
        p += 0.1 * rng.normal(size=p.shape)
    g = backward(m, objectives.smpo_loss(m, ref, pair, t, inv[0], inv[1], 2000.0, sched))
    assert g.norm() == 0.0
    assert all(np.all(a == 0.0) for a in g.arrays())


def test_diffusion_loss_gradient_matches_finite_differences(rng, small_sched):
    m = _model(seed=4)
    for W in m.weights:
        W *= 2.0
    x0, c, eps = rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    build = lambda: objectives.diffusion_loss(m, x0, c, np.array([11]), eps, small_sched)  # noqa: E731
    assert m.n_params() <= 1000
    err = relative_error(backward(m, build()).flat(), finite_difference(lambda: build().value, m))
    assert err < 1e-4


def test_gradient_is_linear_in_the_loss(rng, small_sched):
    m = _model(seed=5)
    x0, c = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    e1, e2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    t = np.array([4, 12])
    g1 = backward(m, objectives.diffusion_loss(m, x0, c, t, e1, small_sched))
    g2 = backward(m, objectives.diffusion_loss(m, x0, c, t, e2, small_sched))
    tape = Tape(m)
    a = objectives.diffusion_loss(m, x0, c, t, e1, small_sched, tape)
    b = objectives.diffusion_loss(m, x0, c, t, e2, small_sched, tape)
    both = backward(m, LossGraph(a.root + b.root, tape))
    np.testing.assert_allclose(both.flat(), (g1 + g2).flat(), rtol=0, atol=1e-12)


def test_graph_reuse_is_rejected(rng, small_sched):
    m = _model()
    graph = objectives.diffusion_loss(m, rng.normal(size=(1, 2)), rng.normal(size=(1, 2)),
                                      np.array([3]), rng.normal(size=(1, 2)), small_sched)
    backward(m, graph)
    with pytest.raises(GraphReuseError):
        backward(m, graph)


def test_bundle_shapes_match_parameters(rng, small_sched):
    m = _model()
    g = backward(m, objectives.diffusion_loss(m, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                                              np.array([3, 4]), rng.normal(size=(2, 2)),
                                              small_sched))
    assert [a.shape for a in g.arrays()] == [p.shape for p in m.parameters()]
    assert isinstance(g, GradientBundle) and np.isfinite(g.loss)


def test_round_trip_serialization(rng):
    m = _model(seed=9, activation="silu")
    m2 = DenoiserModel.from_dict(m.to_dict())
    assert m2.checksum() == m.checksum()
    assert m2.architecture() == m.architecture()


def test_checksum_tracks_parameters():
    m = _model()
    m2 = m.copy()
    assert m.checksum() == m2.checksum()
    m2.biases[0][0] += 1e-12
    assert m.checksum() != m2.checksum()
