import numpy as np
import pytest
from numpy.testing import assert_allclose

import rng as seeding
from errors import DataValidationError, GapCollapseError
from idm import predict_instance
from models import IdmParams
from trajectory_data import (
    braking_profile, default_leader_profiles, draw_population, generate_synthetic,
    ingest_trajectories, instance_stats, literature_params_by_driver, parse_trajectories,
    serialize_trajectories, truth_from_json, truth_to_json,
)

HEADER = "driver_id,instance_id,time_s,v_mps,dv_mps,gap_m,accel_mps2\n"


def _rows(driver, instance, times, gap=10.0):
    return "".join(
        f"{driver},{instance},{t},5.0,0.1,{gap},{0.01 * i}\n" for i, t in enumerate(times)
    )


class TestParse:

    def test_valid_file(self):
        text = HEADER + _rows("A", "1", [0.0, 0.1, 0.2]) + _rows("B", "1", [5.0, 5.1])
        data = parse_trajectories(text)
        assert data.n_instances == 2
        assert data.drivers == ("A", "B")
        assert data.instances[0].dt == pytest.approx(0.1)
        assert_allclose(data.instances[0].a_obs, [0.0, 0.01, 0.02])

    def test_driver_ids_stay_strings(self):
        text = HEADER + _rows("007", "01", [0.0, 0.1])
        inst = parse_trajectories(text).instances[0]
        assert inst.key == ("007", "01")

    def test_empty_file(self):
        with pytest.raises(DataValidationError, match="empty"):
            parse_trajectories("")

    def test_wrong_header(self):
        with pytest.raises(DataValidationError, match="expected columns"):
            parse_trajectories("a,b,c\n1,2,3\n")

    def test_unparseable_value_names_row(self):
        text = HEADER + "A,1,0.0,5.0,0.1,10,0\nA,1,0.1,fast,0.1,10,0\n"
        with pytest.raises(DataValidationError, match="row 3"):
            parse_trajectories(text)

    def test_non_uniform_dt(self):
        text = HEADER + _rows("A", "1", [0.0, 0.1, 0.2, 0.5, 0.6])
        with pytest.raises(DataValidationError, match="non-uniform dt"):
            parse_trajectories(text)

    def test_single_sample_instance(self):
        with pytest.raises(DataValidationError, match="shorter than 2"):
            parse_trajectories(HEADER + _rows("A", "1", [0.0]))

    def test_nonpositive_gap(self):
        with pytest.raises(DataValidationError, match="nonpositive gap"):
            parse_trajectories(HEADER + _rows("A", "1", [0.0, 0.1], gap=0.0))


class TestIngest:

    def test_clean_file_has_no_rejections(self):
        _, summary = ingest_trajectories(HEADER + _rows("A", "1", [0.0, 0.1, 0.2]))
        assert summary.n_kept == 1
        assert summary.rejections == []

    def test_discontinuous_instance_is_rejected(self):
        text = (
            HEADER
            + _rows("A", "1", [0.0, 0.1, 0.2])
            + _rows("A", "2", [0.0, 0.1, 0.3, 0.4])
            + _rows("B", "1", [0.0, 0.1])
        )
        data, summary = ingest_trajectories(text)
        assert summary.n_rows == 9
        assert (summary.n_kept, summary.n_rejected) == (2, 1)
        rejection = summary.rejections[0]
        assert (rejection.driver_id, rejection.instance_id) == ("A", "2")
        assert "non-uniform dt" in rejection.reason
        assert [inst.key for inst in data.instances] == [("A", "1"), ("B", "1")]

    def test_bad_row_rejects_only_its_instance(self):
        text = HEADER + _rows("A", "1", [0.0, 0.1]) + "B,1,0.0,5.0,,10,0\nB,1,0.1,5.0,0.1,10,0\n"
        data, summary = ingest_trajectories(text)
        assert data.drivers == ("A",)
        assert summary.n_rejected == 1


class TestSerialize:

    def test_round_trip(self, clean_data):
        original = clean_data.dataset
        parsed = parse_trajectories(serialize_trajectories(original))
        assert parsed.drivers == original.drivers
        assert parsed == original

    def test_round_trip_is_exact_for_noisy_values(self, noisy_data):
        once = parse_trajectories(serialize_trajectories(noisy_data.dataset))
        twice = parse_trajectories(serialize_trajectories(once))
        assert once == noisy_data.dataset
        assert twice == once
        for a, b in zip(twice.instances, noisy_data.dataset.instances):
            assert a.a_obs.tobytes() == b.a_obs.tobytes()

    def test_instance_stats_use_sample_std(self):
        data = parse_trajectories(HEADER + _rows("A", "1", [0.0, 0.1, 0.2]))
        stats = instance_stats(data.instances[0])
        assert stats.mean_a == pytest.approx(0.01)
        assert stats.std_a == pytest.approx(0.01)


class TestSynthetic:

    def test_noise_free_data_matches_truth(self, clean_data):
        for inst in clean_data.dataset.instances:
            truth = clean_data.truth[inst.driver_id]
            assert_allclose(predict_instance(truth, inst), inst.a_obs, rtol=1e-12, atol=1e-12)

    def test_same_seed_same_data(self, two_driver_truth, leaders):
        a = generate_synthetic(two_driver_truth, leaders, noise_std=0.1, seed=5)
        b = generate_synthetic(two_driver_truth, leaders, noise_std=0.1, seed=5)
        c = generate_synthetic(two_driver_truth, leaders, noise_std=0.1, seed=6)
        assert a.dataset == b.dataset
        assert not np.array_equal(a.dataset.instances[0].a_obs, c.dataset.instances[0].a_obs)

    def test_noise_only_touches_acceleration(self, clean_data, noisy_data):
        for clean, noisy in zip(clean_data.dataset.instances, noisy_data.dataset.instances):
            assert_allclose(clean.v, noisy.v)
            assert_allclose(clean.s, noisy.s)
            assert 0.02 < np.std(noisy.a_obs - clean.a_obs) < 0.1

    def test_instances_per_driver(self, clean_data):
        assert clean_data.dataset.n_instances == 4
        assert [len(clean_data.dataset.driver_instances(d)) for d in ("d1", "d2")] == [2, 2]

    def test_aggressive_leader_is_reported(self, literature):
        # leader reversing into the follower
        with pytest.raises(GapCollapseError):
            generate_synthetic({"d1": literature}, [np.concatenate([[0.0], np.full(99, -5.0)])])

    def test_standing_start_without_jam_distance(self, literature):
        driver = literature.model_copy(update={"s0": 0.0})
        with pytest.raises(GapCollapseError) as info:
            generate_synthetic({"d1": driver}, [np.concatenate([[0.0], np.full(49, 2.0)])])
        assert info.value.step == 0
        assert info.value.gap == 0.0

    def test_negative_noise_rejected(self, two_driver_truth, leaders):
        with pytest.raises(DataValidationError):
            generate_synthetic(two_driver_truth, leaders, noise_std=-1.0)

    def test_draw_population_is_valid_and_seeded(self):
        first = draw_population(12, seeding.spawn(1, seeding.SYNTH))
        again = draw_population(12, seeding.spawn(1, seeding.SYNTH))
        assert first == again
        assert list(first)[:2] == ["d01", "d02"]
        assert all(p.is_valid() for p in first.values())

    def test_leader_profiles_stay_positive(self):
        for profile in default_leader_profiles(5, 400, 0.1, seeding.spawn(2, seeding.SYNTH, 0)):
            assert profile.shape == (400,)
            assert profile.min() > 0

    def test_braking_profile_stops(self):
        profile = braking_profile(10.0, 2.0, 100, 0.1)
        assert profile[0] == 10.0
        assert profile[-1] == 0.0

    def test_truth_json_round_trip(self, two_driver_truth):
        assert truth_from_json(truth_to_json(two_driver_truth)) == two_driver_truth

    def test_literature_params_by_driver(self, clean_data):
        lit = literature_params_by_driver(clean_data.dataset)
        assert set(lit) == {"d1", "d2"}
        assert lit["d1"] == IdmParams.literature()
