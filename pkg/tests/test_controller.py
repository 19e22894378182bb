import math

import numpy as np
import pytest
from hypothesis import given, seed
from hypothesis import strategies as st

from oracles import example_inverse
from mrgpr import experiments as ex
from mrgpr.controller import (
    ControllerFault,
    HistoryBuffer,
    ModelReferenceController,
    MrGprController,
    closed_loop_error,
    constant_input,
    iss_gain_bound,
    oracle_controller,
    random_input,
    tail_peak,
)
from mrgpr.data_pipeline import build_regressor, collect_episodes, dataset_from_episodes
from mrgpr.gp_core import Hyperparameters, TrainingPair, fit, posterior_mean, predict_mean
from mrgpr.plant import (
    NormalFormPlant,
    PlantState,
    ReferenceModel,
    example_plant,
    ideal_control,
    ideal_state_feedback,
    rollout,
)

PLANT = example_plant()
REF = ReferenceModel.linear(-0.4)


@pytest.fixture(scope="module")
def model():
    cfg = ex.ExperimentConfig(T=200, hp_budget=50)
    _, ds = ex.collect(cfg)
    return ex.train(ds, ex.fit_hyperparameters(cfg, ds))


@pytest.fixture
def tiny_model():
    pairs = [TrainingPair(r, t) for r, t in [((0.5, 0.2, 0.3, -0.12), -0.17), ((0.0, 0.0, 0.0, 0.0), 0.0), ((1, -1, 0.5, 0.2), 0.4)]]
    return fit(pairs, Hyperparameters(1.0, (1.0, 1.0, 1.0, 1.0), 1e-8))


class TestHistoryBuffer:
    def test_warm_up(self):
        b = HistoryBuffer(2)
        assert not b.warmed_up
        b.push(1.0, 10.0)
        assert not b.warmed_up
        b.push(2.0, 20.0)
        assert b.warmed_up and b.steps_seen == 2

    def test_oldest_first_ring(self):
        b = HistoryBuffer(3)
        for k in range(5):
            b.push(k, 10 * k)
        assert b.y_hist == (2.0, 3.0, 4.0)
        assert b.u_hist == (20.0, 30.0, 40.0)

    def test_clear(self):
        b = HistoryBuffer(1)
        b.push(1, 1)
        b.clear()
        assert b.steps_seen == 0 and b.y_hist == () and not b.warmed_up

    def test_capacity(self):
        with pytest.raises(ValueError):
            HistoryBuffer(0)


class TestControl:
    def test_cold_start_zero(self, tiny_model):
        assert MrGprController(tiny_model, REF).control(1.1) == 0.0

    def test_traces_regressor(self, tiny_model):
        c = MrGprController(tiny_model, REF, cold_start=constant_input(0.2))
        assert c.control(0.5) == 0.2
        u = c.control(0.3)
        assert c.queries[-1].tolist() == [0.5, 0.2, 0.3, -0.4 * 0.3]
        assert u == posterior_mean(tiny_model, [0.5, 0.2, 0.3, -0.12])

    def test_n3_regressor_order(self):
        c = ModelReferenceController(lambda xi: float(xi.sum()), REF, 3)
        c.control(1.0)
        c.control(2.0)  # cold start: inputs 0, 0
        c.control(3.0)
        assert c.queries[0].tolist() == [1.0, 2.0, 0.0, 0.0, 3.0, -0.4 * 3.0]

    def test_reset(self, tiny_model):
        c = MrGprController(tiny_model, REF)
        c.control(0.5)
        c.control(0.3)
        c.reset()
        c.reset()
        assert c.buffer.steps_seen == 0 and c.queries == []
        assert c.control(0.7) == 0.0
        assert c.model is tiny_model

    def test_same_sequence_same_outputs(self, tiny_model):
        ys = [0.4, -0.2, 0.1, 0.05, -0.3]
        a, b = MrGprController(tiny_model, REF), MrGprController(tiny_model, REF)
        a.control(9.0)
        a.reset()
        assert [a.control(y) for y in ys] == [b.control(y) for y in ys]

    def test_random_cold_start_is_reproducible(self):
        policy = random_input(3)
        assert policy(0) == policy(0) and policy(0) != policy(1)
        assert -1.2 <= policy(5) <= 1.2

    def test_fault_on_non_finite(self):
        c = ModelReferenceController(lambda xi: math.nan, REF, 2)
        c.control(0.1)
        with pytest.raises(ControllerFault):
            c.control(0.2)

    def test_rejects_non_finite_measurement(self, tiny_model):
        with pytest.raises(ValueError):
            MrGprController(tiny_model, REF).control(math.inf)

    def test_close_to_ideal_with_dense_data(self, model):
        held = dataset_from_episodes(collect_episodes(PLANT, 100, 5, base_seed=10**6), 2)
        X = held.regressors[np.abs(held.regressors).max(axis=1) <= 3]
        assert len(X) > 100
        for xi in X:
            c = ModelReferenceController(lambda q: posterior_mean(model, q), REF, 2)
            c.buffer.push(xi[0], xi[1])
            # query at the held-out (zeta1, s) by a reference model that returns y(t+1)
            c.ref = ReferenceModel(lambda y, s=xi[3]: s)
            u = c.control(xi[2])
            assert abs(u - ideal_control(PLANT, xi[:3], xi[3])) <= 0.01


class TestOutputFeedback:
    def test_only_y_matters(self, model):
        # same y sequence, internal state stored scaled by 2
        scaled = NormalFormPlant(
            2,
            f=lambda z, y: y * y + z[0] / 2,
            g=lambda z, y: 1.0,
            h=lambda z, y: np.array([0.5 * math.sin(y) * z[0]]),
        )
        a = rollout(PLANT, MrGprController(model, REF), PlantState([0.6], -0.4), 25)
        b = rollout(scaled, MrGprController(model, REF), PlantState([1.2], -0.4), 25)
        assert np.array_equal(a.u, b.u) and np.array_equal(a.y, b.y)

    def test_logged_queries_match_trajectory_windows(self, model):
        ctrl = MrGprController(model, REF)
        traj = rollout(PLANT, ctrl, PlantState([-1.1], 1.1), 30)
        assert len(ctrl.queries) == 29
        for t, q in enumerate(ctrl.queries, start=1):
            expected = build_regressor([traj.y[t - 1], traj.y[t], REF(traj.y[t])], [traj.u[t - 1]])
            assert np.array_equal(q, expected)

    def test_oracle_controller_matches_after_cold_start(self):
        traj = rollout(PLANT, oracle_controller(PLANT, REF), PlantState([1.1], 1.1), 40)
        assert traj.u[0] == 0.0 and traj.y[1] == pytest.approx(2.31)
        assert np.all(np.abs(traj.y[2:] + 0.4 * traj.y[1:-1]) <= 1e-10)


class TestClosedLoopError:
    def test_ideal_is_zero(self):
        traj = rollout(PLANT, ideal_state_feedback(PLANT, REF), PlantState([1.1], -1.1), 50)
        assert np.all(np.abs(closed_loop_error(traj, REF)[1:]) <= 1e-10)

    def test_zero_trajectory(self):
        traj = rollout(PLANT, [0.0] * 10, PlantState([0.0], 0.0), 10)
        assert not closed_loop_error(traj, REF).any()

    def test_equals_inverse_error(self, model):
        ctrl = MrGprController(model, REF)
        traj = rollout(PLANT, ctrl, PlantState([1.1], -1.1), 30)
        e = closed_loop_error(traj, REF)
        # the applied inputs are the single-query means
        mu = traj.u[1:]
        assert np.allclose(mu, predict_mean(model, np.array(ctrl.queries)), rtol=0, atol=1e-8)
        c = np.array([example_inverse(*q) for q in ctrl.queries])
        np.testing.assert_allclose(e[1:], mu - c, rtol=0, atol=1e-12)


@pytest.mark.parametrize("ic", ex.DEFAULT_INITIAL_CONDITIONS)
def test_limsup_within_iss_gain(model, ic):
    ctrl = MrGprController(model, REF)
    traj = rollout(PLANT, ctrl, PlantState([ic[1]], ic[0]), 100)
    mu = predict_mean(model, np.array(ctrl.queries))
    delta = np.abs(mu - [example_inverse(*q) for q in ctrl.queries]).max()
    assert tail_peak(traj.y) <= iss_gain_bound(delta, -0.4, 1.0)


class TestHelpers:
    def test_tail_peak_window(self):
        y = np.zeros(51)
        y[39] = 5.0
        assert tail_peak(y) == 0.0
        y[40] = -2.0
        assert tail_peak(y) == 2.0

    @given(st.floats(0, 10), st.floats(-0.99, 0.99))
    @seed(1)
    def test_iss_gain(self, delta, a):
        assert iss_gain_bound(delta, a) == pytest.approx(delta / (1 - abs(a)))

    def test_iss_gain_needs_contraction(self):
        with pytest.raises(ValueError):
            iss_gain_bound(1.0, 1.0)
