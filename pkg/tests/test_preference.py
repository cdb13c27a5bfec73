import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpo_lab.harness.data import gen_toy_data
from smpo_lab.numerics import InvalidRangeError
from smpo_lab.preference import (DEFAULT_GAMMA, DegenerateStatsError, PreferenceDataset,
                                 PreferencePair, RewardFunction, RewardStats, SmoothedLabel,
                                 bt_prob, check_labels, label_dataset, normalize_rewards,
                                 read_jsonl, score, weight_ratio, write_jsonl)

SIGMOID_ONE = 0.7310585786300049  # 1 / (1 + e^-1), correctly rounded double

finite = st.floats(-50, 50, allow_nan=False)


class TestScore:
    def test_at_target_is_zero(self):
        assert score(RewardFunction(), np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_distance_two(self):
        assert score(RewardFunction(), np.array([3.0, 2.0]), np.array([1.0, 2.0])) == -4.0

    def test_pure(self, rng):
        x, c = rng.normal(size=2), rng.normal(size=2)
        assert score(RewardFunction(), x, c) == score(RewardFunction(), x, c)

    def test_axis_projection(self):
        r = RewardFunction("axis_projection", axis=(1.0, -1.0))
        assert score(r, np.array([2.0, 0.5]), np.zeros(2)) == 1.5

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            RewardFunction("nope")


class TestNormalize:
    def test_endpoints(self):
        out = normalize_rewards([2.0, 4.0], RewardStats(4.0, 2.0, 2))
        assert list(out) == [-1.0, 0.0]

    def test_midpoint(self):
        assert normalize_rewards([3.0], RewardStats(4.0, 2.0, 2))[0] == -0.5

    def test_affine_transform(self, rng):
        r = rng.normal(size=20)
        st_ = RewardStats.from_scores(r)
        st_aff = RewardStats.from_scores(3 * r + 7)
        np.testing.assert_allclose(normalize_rewards(3 * r + 7, st_aff),
                                   normalize_rewards(r, st_), rtol=0, atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateStatsError):
            normalize_rewards([1.0], RewardStats(1.0, 1.0, 2))


class TestWeightRatio:
    def test_equal(self):
        assert weight_ratio(-0.3, -0.3) == 0.5

    def test_hand_value(self):
        assert weight_ratio(0.0, -1.0) == pytest.approx(SIGMOID_ONE, abs=1e-15)

    @given(finite, finite)
    def test_complement(self, a, b):
        assert weight_ratio(a, b) + weight_ratio(b, a) == pytest.approx(1.0, abs=1e-15)


class TestBradleyTerry:
    def test_tie(self):
        assert bt_prob(2.0, 2.0) == 0.5

    def test_unit_gap(self):
        assert bt_prob(1.0, 0.0) == pytest.approx(SIGMOID_ONE, abs=1e-15)

    def test_monotone_limit(self):
        vals = [bt_prob(d, 0.0) for d in (0.0, 1.0, 5.0, 20.0, 800.0)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 1.0 and bt_prob(-800.0, 0.0) == 0.0


class TestSmoothedLabel:
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(0.01, 100))
    def test_ranges(self, ratio, gamma):
        lab = SmoothedLabel(ratio, gamma)
        assert -gamma < lab.coefficient < gamma
        assert lab.ratio + lab.swapped().ratio == pytest.approx(1.0, abs=1e-15)
        assert lab.coefficient == pytest.approx(-lab.swapped().coefficient, abs=1e-12)

    def test_zero_coefficient_iff_half(self):
        assert SmoothedLabel(0.5, 10).coefficient == 0.0
        assert SmoothedLabel(0.5 + 1e-9, 10).coefficient != 0.0

    @pytest.mark.parametrize("ratio,gamma", [(0.0, 1.0), (1.0, 1.0), (0.5, 0.0), (0.5, -2)])
    def test_invalid(self, ratio, gamma):
        with pytest.raises(InvalidRangeError):
            SmoothedLabel(ratio, gamma)

    def test_default_gamma(self):
        assert DEFAULT_GAMMA == 10


def _ratios(ds):
    return np.array([p.label.ratio for p in ds.pairs])


class TestLabelDataset:
    def test_winner_first_and_consistent(self):
        ds = label_dataset(gen_toy_data("gmm2d", 300, 1), RewardFunction(), 10.0)
        assert all(p.reward_w >= p.reward_l for p in ds.pairs)
        assert all(p.label.ratio >= 0.5 for p in ds.pairs)
        assert check_labels(ds)

    @pytest.mark.parametrize("a,b", [(3.0, 7.0), (0.01, -100.0), (250.0, 0.0)])
    def test_affine_invariance(self, a, b):
        raw = gen_toy_data("ring", 200, 2)
        base = label_dataset(raw, RewardFunction(), 10.0)
        other = label_dataset(raw, RewardFunction().affine(a, b), 10.0)
        np.testing.assert_allclose(_ratios(other), _ratios(base), rtol=0, atol=1e-12)

    def test_swap_antisymmetry(self):
        ds = label_dataset(gen_toy_data("gmm2d", 100, 3), RewardFunction(), 10.0)
        for p in ds.pairs:
            q = p.swapped()
            assert q.label.ratio + p.label.ratio == pytest.approx(1.0, abs=1e-15)
            assert q.label.coefficient == -p.label.coefficient

    def test_idempotent(self):
        once = label_dataset(gen_toy_data("gmm2d", 100, 4), RewardFunction(), 10.0)
        twice = label_dataset(once, RewardFunction(), 10.0)
        assert _ratios(once).tobytes() == _ratios(twice).tobytes()

    def test_identical_candidates(self, caplog):
        x = np.array([1.0, 2.0])
        pairs = [PreferencePair(str(i), x, x.copy(), x.copy()) for i in range(5)]
        with caplog.at_level(logging.WARNING):
            ds = label_dataset(PreferenceDataset(pairs), RewardFunction(), 10.0)
        assert all(p.label.ratio == 0.5 and p.label.coefficient == 0.0 for p in ds.pairs)
        assert "equal" in caplog.text

    def test_empty(self):
        with pytest.raises(InvalidRangeError):
            label_dataset(PreferenceDataset([]), RewardFunction())


class TestJsonl:
    def test_round_trip(self, tmp_path):
        ds = label_dataset(gen_toy_data("gmm2d", 50, 5), RewardFunction(), 10.0)
        path = tmp_path / "pairs.jsonl"
        write_jsonl(ds, path)
        back = read_jsonl(path)
        assert back.reward_stats == ds.reward_stats and back.extra == ds.extra
        for p, q in zip(ds.pairs, back.pairs):
            assert p.x_w.tobytes() == q.x_w.tobytes()
            assert p.label == q.label and p.reward_w == q.reward_w
        assert check_labels(back)

    def test_full_precision_floats(self, tmp_path):
        x = np.array([0.1 + 0.2, 1.0 / 3.0])
        ds = PreferenceDataset([PreferencePair("a", x, x, x)], seed=0)
        path = tmp_path / "p.jsonl"
        write_jsonl(ds, path)
        row = json.loads(path.read_text().splitlines()[1])
        assert row["x_w"] == list(x)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(ValueError):
            read_jsonl(path)

    def test_bytes_deterministic(self, tmp_path):
        for name in ("a", "b"):
            write_jsonl(gen_toy_data("gmm2d", 30, 9), tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
