import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import GapCollapseError, InvalidParamsError
from idm import (
    acceleration_from_columns, desired_gap, equilibrium_gap, params_valid, predict_accel,
    predict_instance, simulate_forward,
)
from models import IdmParams, KinematicState
from trajectory_data import braking_profile


class TestIdmParams:

    def test_literature_values(self, literature):
        assert literature.to_array().tolist() == [6.5, 1.6, 0.73, 1.67, 4.0, 2.0, 0.0]
        assert literature.is_valid()

    def test_violations_name_the_failed_invariant(self):
        bad = IdmParams(v0=-1.0, T=1.6, a=0.73, b=0.0, delta=4.0, s0=2.0, s1=0.0)
        assert bad.violations() == ["v0 > 0", "b > 0"]
        with pytest.raises(InvalidParamsError, match="v0 > 0"):
            bad.ensure_valid()

    def test_from_array_rejects_wrong_length(self):
        with pytest.raises(InvalidParamsError):
            IdmParams.from_array([1.0, 2.0])

    def test_params_valid_mask(self, literature):
        rows = np.stack([literature.to_array()] * 3)
        rows[1, 0] = 0.0
        rows[2, 6] = np.nan
        assert params_valid(rows).tolist() == [True, False, False]


class TestAcceleration:

    def test_free_road_start_accelerates_at_a(self, literature):
        state = KinematicState(v=0.0, dv=0.0, s=1e6)
        assert_allclose(predict_accel(literature, state), literature.a, rtol=1e-9)

    def test_desired_gap_formula(self, literature):
        p = literature.model_copy(update={"s1": 0.5})
        v, dv = 5.0, 1.0
        expected = p.s0 + p.s1 * np.sqrt(v / p.v0) + p.T * v + v * dv / (2 * np.sqrt(p.a * p.b))
        assert_allclose(desired_gap(p, v, dv), expected, rtol=1e-12)

    def test_desired_gap_is_not_clamped(self, literature):
        # strongly opening gap drives s* below zero
        assert desired_gap(literature, 5.0, -10.0) < 0

    def test_closing_gap_brakes_harder(self, literature):
        slow = predict_accel(literature, KinematicState(v=5.0, dv=0.0, s=15.0))
        closing = predict_accel(literature, KinematicState(v=5.0, dv=2.0, s=15.0))
        assert closing < slow

    def test_at_desired_speed_with_infinite_gap(self, literature):
        state = KinematicState(v=literature.v0, dv=0.0, s=1e9)
        assert abs(predict_accel(literature, state)) < 1e-9

    def test_invalid_params_raise(self, literature):
        bad = literature.model_copy(update={"a": -0.1})
        with pytest.raises(InvalidParamsError, match="a > 0"):
            predict_accel(bad, KinematicState(v=1.0, dv=0.0, s=10.0))

    def test_invalid_state_raises(self, literature):
        with pytest.raises(InvalidParamsError, match="gap must be positive"):
            predict_accel(literature, KinematicState(v=1.0, dv=0.0, s=0.0))

    def test_vectorized_matches_scalar(self, literature, clean_data):
        inst = clean_data.dataset.instances[0]
        batch = predict_instance(literature, inst)
        one_by_one = [
            predict_accel(literature, KinematicState(v=v, dv=dv, s=s))
            for v, dv, s in zip(inst.v, inst.dv, inst.s)
        ]
        assert_allclose(batch, one_by_one, rtol=1e-12, atol=1e-12)

    def test_column_form_matches(self, literature):
        v, dv, s = np.array([3.0, 4.0]), np.array([0.5, -0.2]), np.array([12.0, 9.0])
        cols = literature.to_array()
        direct = acceleration_from_columns(cols, v, dv, s)
        assert_allclose(
            direct,
            [predict_accel(literature, KinematicState(v=a, dv=b, s=c)) for a, b, c in zip(v, dv, s)],
        )


class TestEquilibrium:

    def test_equilibrium_gap_gives_zero_acceleration(self, literature):
        v = 5.0
        s_eq = equilibrium_gap(literature, v)
        assert abs(predict_accel(literature, KinematicState(v=v, dv=0.0, s=s_eq))) < 1e-12

    def test_no_equilibrium_at_or_above_v0(self, literature):
        assert equilibrium_gap(literature, literature.v0) == float("inf")

    def test_constant_leader_holds_equilibrium(self, literature):
        v = 5.0
        init = KinematicState(v=v, dv=0.0, s=equilibrium_gap(literature, v))
        inst = simulate_forward(literature, np.full(200, v), init, 0.1)
        assert_allclose(inst.a_obs, 0.0, atol=1e-9)
        assert_allclose(inst.s, init.s, atol=1e-8)
        assert_allclose(inst.v, v, atol=1e-8)


class TestSimulateForward:

    def test_a_obs_is_model_acceleration(self, literature, leaders):
        v = float(leaders[0][0])
        init = KinematicState(v=v, dv=0.0, s=equilibrium_gap(literature, v))
        inst = simulate_forward(literature, leaders[0], init, 0.1)
        assert inst.n == len(leaders[0])
        assert_allclose(predict_instance(literature, inst), inst.a_obs, rtol=1e-12, atol=1e-12)

    def test_speed_never_negative(self, literature):
        init = KinematicState(v=6.0, dv=6.0, s=8.0)
        inst = simulate_forward(literature, np.zeros(100), init, 0.1)
        assert np.all(inst.v >= 0)

    def test_gap_collapse_reports_step(self, literature):
        # stopped follower, leader reversing at 5 m/s: gap shrinks 0.5 m per step
        init = KinematicState(v=0.0, dv=5.0, s=2.0)
        with pytest.raises(GapCollapseError) as info:
            simulate_forward(literature, np.full(20, -5.0), init, 0.1)
        assert info.value.step == 4

    def test_rejects_bad_dt(self, literature):
        with pytest.raises(InvalidParamsError):
            simulate_forward(literature, np.ones(5), KinematicState(v=1.0, dv=0.0, s=5.0), 0.0)


class TestShape:

    def test_acceleration_rises_with_gap(self, literature):
        for dv in (-2.0, 0.0, 2.0):
            accel = [predict_accel(literature, KinematicState(v=5.0, dv=dv, s=s))
                     for s in np.linspace(0.5, 80.0, 60)]
            assert np.all(np.diff(accel) > 0)

    def test_acceleration_falls_with_closing_speed(self, literature):
        for s in (5.0, 15.0, 40.0):
            accel = [predict_accel(literature, KinematicState(v=5.0, dv=dv, s=s))
                     for dv in np.linspace(-2.0, 3.0, 50)]
            assert np.all(np.diff(accel) < 0)

    def test_scalar_formula(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            v0, T, a, b = rng.uniform(3, 30), rng.uniform(0.5, 2.5), rng.uniform(0.3, 2), rng.uniform(0.5, 3)
            delta, s0, s1 = rng.uniform(1, 6), rng.uniform(0, 4), rng.uniform(0, 1)
            v, dv, s = rng.uniform(0, v0), rng.uniform(-3, 3), rng.uniform(0.5, 100)
            p = IdmParams(v0=v0, T=T, a=a, b=b, delta=delta, s0=s0, s1=s1)
            s_star = s0 + s1 * math.sqrt(v / v0) + T * v + v * dv / (2 * math.sqrt(a * b))
            expected = a * (1 - (v / v0) ** delta - (s_star / s) ** 2)
            assert predict_accel(p, KinematicState(v=v, dv=dv, s=s)) == pytest.approx(expected, rel=1e-12, abs=1e-12)


class TestIntegration:

    @staticmethod
    def _gap_on_coarse_grid(p, dt, stride):
        n = int(round(10.0 / dt)) + 1
        leader = 5.0 + np.sin(0.5 * dt * np.arange(n))
        init = KinematicState(v=5.0, dv=0.0, s=equilibrium_gap(p, 5.0))
        return simulate_forward(p, leader, init, dt).s[::stride]

    def test_halving_dt_converges(self, literature):
        reference = self._gap_on_coarse_grid(literature, 0.0125, 8)
        err_full = np.max(np.abs(self._gap_on_coarse_grid(literature, 0.1, 1) - reference))
        err_half = np.max(np.abs(self._gap_on_coarse_grid(literature, 0.05, 2) - reference))
        assert err_half < 0.75 * err_full

    def test_braking_leader_keeps_gap_open(self, literature):
        leader = braking_profile(5.0, 1.5, 300, 0.1)
        init = KinematicState(v=5.0, dv=0.0, s=equilibrium_gap(literature, 5.0))
        inst = simulate_forward(literature, leader, init, 0.1)
        assert inst.s.min() > 0
        assert inst.v[-1] < 1.0
