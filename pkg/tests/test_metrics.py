import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from galileo.envs import GnfcTaskSpec, GroundTruthModel, TcgaTaskSpec, TrajectoryDataset, collect_offline_dataset
from galileo.metrics import (ActionGrid, CurveReport, EvaluationError, auuc, auuc_from_scores,
                             delta_response_test, eval_states_from, mise, mmse, monotonicity_violations,
                             permutation_noise_floor, response_curve, uplift_curve)


class Offset:
    def __init__(self, task, c=0.0, slope=1.0):
        self.task, self.c, self.slope = task, c, slope

    def predict_response(self, x, a):
        return self.task.mean_response(x, np.zeros_like(a)) + self.slope * np.asarray(a) + self.c


@pytest.fixture(scope="module")
def gnfc():
    task = GnfcTaskSpec(e=0.2, p=0.2)
    data = collect_offline_dataset(task, 20, np.random.default_rng(0))
    states = eval_states_from(data, np.random.default_rng(1))
    return task, data, states, ActionGrid.for_task(task, data)


class TestGrid:
    def test_defaults(self, gnfc):
        task, data, _, grid = gnfc
        assert len(grid) == 9
        assert grid.points[0] == pytest.approx(data.a.min() - 1)
        assert grid.points[-1] == pytest.approx(data.a.max() + 1)
        tg = ActionGrid.for_task(TcgaTaskSpec())
        assert len(tg) == 33 and tg.points[0] == 0.0 and tg.points[-1] == 1.0

    def test_equidistant(self, gnfc):
        gaps = np.diff(gnfc[3].points)
        assert np.max(np.abs(gaps - gaps[0])) <= 1e-12

    def test_eval_fraction(self, gnfc):
        _, data, states, _ = gnfc
        assert len(states) == round(0.2 * len(data))


class TestMise:
    def test_exact_model(self, gnfc):
        task, _, states, grid = gnfc
        assert mise(GroundTruthModel(task), task, states, grid) <= 1e-9
        assert mmse(GroundTruthModel(task), task, states, grid) <= 1e-9

    @pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
    def test_constant_offset(self, gnfc, c):
        task, _, states, grid = gnfc
        assert mise(Offset(task, c), task, states, grid) == pytest.approx(abs(c) * math.sqrt(grid.length), rel=1e-9)
        assert mmse(Offset(task, c), task, states, grid) == pytest.approx(abs(c), rel=1e-9)

    def test_mmse_dominates_mean_error(self, gnfc):
        task, _, states, grid = gnfc
        for model in (Offset(task, 1.0, -2.0), Offset(task, 0.3, 0.5), Offset(task, -1.0, 3.0)):
            assert mmse(model, task, states, grid) >= mise(model, task, states, grid) / math.sqrt(grid.length) - 1e-12

    def test_order_and_direction_invariance(self, gnfc):
        task, _, states, grid = gnfc
        model = Offset(task, 0.7, -1.5)
        base = mise(model, task, states, grid)
        perm = np.random.default_rng(0).permutation(len(states))
        assert mise(model, task, states[perm], grid) == pytest.approx(base, rel=1e-12)
        assert mise(model, task, states, ActionGrid(grid.points[::-1])) == pytest.approx(base, rel=1e-12)

    def test_sampled_target_is_seeded(self, gnfc):
        task, _, states, grid = gnfc
        m = GroundTruthModel(task)
        a = mise(m, task, states, grid, outcome_rng=np.random.default_rng(3))
        b = mise(m, task, states, grid, outcome_rng=np.random.default_rng(3))
        assert a == b
        # pure outcome noise of std 2 integrated over the grid
        assert a == pytest.approx(2 * math.sqrt(grid.length), rel=0.15)

    def test_empty_states(self, gnfc):
        task, _, _, grid = gnfc
        with pytest.raises(EvaluationError):
            mise(GroundTruthModel(task), task, np.zeros((0, 2)), grid)


class TestCurves:
    def test_exact_model(self, gnfc):
        task, _, states, grid = gnfc
        c = response_curve(GroundTruthModel(task), task, states, grid)
        assert_array_equal(c.predicted, c.truth)
        assert c.n_states == len(states)

    def test_truth_slope_one(self, gnfc):
        task, _, states, grid = gnfc
        c = response_curve(GroundTruthModel(task), task, states, grid)
        assert_allclose(np.diff(c.truth) / np.diff(grid.points), 1.0, atol=1e-9)
        assert monotonicity_violations(c.truth) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            CurveReport(ActionGrid([0.0, 1.0]), np.zeros(2), np.zeros(3), 1)

    def test_save(self, gnfc, tmp_path):
        task, _, states, grid = gnfc
        c = response_curve(GroundTruthModel(task), task, states, grid)
        c.save(tmp_path / "curve.csv", {"task": task.name})
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "action,truth,predicted" and len(lines) == 10
        assert (tmp_path / "curve.csv.json").exists()


class TestDelta:
    def test_zero_delta(self, gnfc):
        task, data, _, _ = gnfc
        rows = delta_response_test(Offset(task, 1.0, -3.0), task, data, [0.0])
        assert rows[0][1] == 0.0

    def test_ground_truth_slope(self, gnfc):
        task, data, _, _ = gnfc
        for d, pred, true in delta_response_test(GroundTruthModel(task), task, data, np.linspace(-1, 1, 5)):
            assert true == pytest.approx(d, abs=1e-9) and pred == pytest.approx(d, abs=1e-9)

    def test_opposite_sign_detected(self, gnfc):
        task, data, _, _ = gnfc
        for d, pred, _ in delta_response_test(Offset(task, 0.0, -2.0), task, data, [-0.5, 0.5]):
            assert np.sign(pred) == -np.sign(d)


def heterogeneous_rct(n, rng, constant=False):
    """Outcome ``y = x0 + tau(x) * 1[a > 0.5] + noise`` with ``tau(x) = 2 x0`` (or 1)."""
    x = rng.uniform(0, 1, (n, 2))
    a = rng.uniform(0, 1, n)
    tau = np.ones(n) if constant else 2 * x[:, 0]
    y = x[:, 0] + tau * (a > 0.5) + 0.1 * rng.normal(size=n)
    return TrajectoryDataset(x, a, y, y[:, None], np.arange(n), np.zeros(n, dtype=int), policy_tag="rct")


class UpliftModel:
    def __init__(self, sign=1.0, constant=False, rng=None):
        self.sign, self.constant, self.rng = sign, constant, rng

    def predict_response(self, x, a):
        if self.rng is not None:
            return self.rng.normal(size=len(a))
        tau = np.ones(len(a)) if self.constant else 2 * x[:, 0]
        return x[:, 0] + self.sign * tau * (np.asarray(a) > 0.5)


class TestAuuc:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_oracle_beats_random_and_anti(self, seed):
        rng = np.random.default_rng(seed)
        rct = heterogeneous_rct(4000, rng)
        oracle, _ = auuc(UpliftModel(), rct, action_range=(0, 1))
        anti, _ = auuc(UpliftModel(-1.0), rct, action_range=(0, 1))
        rand, _ = auuc(UpliftModel(rng=np.random.default_rng(seed + 10)), rct, action_range=(0, 1))
        assert oracle > 0 > anti
        assert oracle > rand

    def test_constant_uplift_below_noise_floor(self):
        rng = np.random.default_rng(0)
        rct = heterogeneous_rct(4000, rng, constant=True)
        value, _ = auuc(UpliftModel(constant=True), rct, action_range=(0, 1))
        floor = permutation_noise_floor(rct.a > 0.5, rct.y, np.random.default_rng(1), n_perm=100)
        assert abs(value) < floor

    def test_rank_only(self):
        rng = np.random.default_rng(0)
        rct = heterogeneous_rct(1000, rng)
        s = rng.normal(size=1000)
        a, _ = auuc_from_scores(s, rct.a > 0.5, rct.y)
        b, _ = auuc_from_scores(np.exp(3 * s) + 7, rct.a > 0.5, rct.y)
        assert a == b

    def test_curve_shape(self):
        frac, curve = uplift_curve([3.0, 2.0, 1.0, 0.0], [True, False, True, False], [5.0, 1.0, 2.0, 0.0])
        assert_allclose(frac, [0, 0.25, 0.5, 0.75, 1.0])
        assert curve[-1] == pytest.approx((3.5 - 0.5))
        assert curve[2] == pytest.approx((5.0 - 1.0) * 0.5)

    def test_requires_rct(self):
        rct = heterogeneous_rct(10, np.random.default_rng(0))
        rct.policy_tag = "behavior"
        with pytest.raises(EvaluationError):
            auuc(UpliftModel(), rct)

    def test_empty_group(self):
        rct = heterogeneous_rct(10, np.random.default_rng(0))
        rct.a[:] = 0.1
        rct.a[0] = 0.0
        with pytest.raises(EvaluationError):
            auuc(UpliftModel(), rct, action_range=(0, 1))


class TestDeterminism:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_metrics_repeatable(self, seed):
        task = GnfcTaskSpec()
        data = collect_offline_dataset(task, 3, np.random.default_rng(seed))
        states = eval_states_from(data, np.random.default_rng(seed))
        grid = ActionGrid.for_task(task, data)
        m = Offset(task, 0.2, 0.1)
        assert mise(m, task, states, grid) == mise(m, task, states, grid)
        assert mmse(m, task, states, grid) == mmse(m, task, states, grid)
