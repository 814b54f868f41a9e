import math
from dataclasses import replace

import numpy as np
import pytest

import belief_mppi.sim as sim
from belief_mppi.constraints import SafetyParams
from belief_mppi.controllers import CostSpec, MppiConfig
from belief_mppi.dynamics import IDX_EY, NoiseModel
from belief_mppi.sim import (
    AggregateReport,
    ConfigInvalid,
    ExperimentConfig,
    IntervalCounter,
    RunRecord,
    aggregate,
    apply_axis,
    initial_state,
    monte_carlo,
    run_closed_loop,
    stadium_track,
    sweep,
)


def small_config(**kw):
    defaults = dict(
        controller=MppiConfig(kind="smppi", samples=32, horizon=10, temperature=2.0,
                              inner_samples=4),
        cost=CostSpec(),
        noise=NoiseModel(np.zeros((3, 3))),
        runs=2,
        max_steps=60,
        master_seed=5,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestConfigValidation:
    def test_collision_threshold_must_be_inside(self):
        with pytest.raises(ConfigInvalid):
            small_config(collision_threshold=2.5)

    def test_runs_positive(self):
        with pytest.raises(ConfigInvalid):
            small_config(runs=0)

    def test_timestep_ratio(self):
        with pytest.raises(ConfigInvalid):
            small_config(dt_control=0.05, dt_plant=0.02)

    def test_plant_and_model_params(self):
        cfg = small_config()
        assert cfg.plant_params().integrator == "rk4"
        assert cfg.plant_params().dt == cfg.dt_plant
        assert cfg.model_params().integrator == "euler"
        assert cfg.model_params().dt == cfg.dt_control
        assert cfg.plant_substeps == 5


class TestIntervalCounter:
    def test_two_disjoint_intervals(self):
        trace = [0.0, 1.9, 2.0, 1.0, 0.5, 1.85, 1.9, 0.2]
        counter = IntervalCounter()
        for v in trace:
            counter.update(abs(v) > 1.8)
        assert counter.count == 2

    def test_initial_violation_counts_once(self):
        counter = IntervalCounter(active=True)
        for v in (True, True, False, True):
            counter.update(v)
        assert counter.count == 1


class TestRunClosedLoop:
    def test_noise_free_lap_completes(self):
        # center-tracking weights: the small sample budget should still
        # produce a clean lap without the plant noise
        cfg = small_config(
            max_steps=600,
            cost=CostSpec(q_diag=np.array([2.0, 0, 0.02, 0, 0, 0.2, 2.0, 0])),
        )
        rec = run_closed_loop(cfg, 0)
        assert not rec.crashed
        assert rec.collisions == 0
        assert rec.lap_time is not None
        assert 10.0 < rec.lap_time < 30.0
        assert rec.satisfaction_rate == 1.0

    def test_forced_crash_terminates_run(self, monkeypatch):
        calls = {"n": 0}
        real = sim.sample_noise

        def kicked(rng, model, size=None):
            calls["n"] += 1
            w = real(rng, model, size)
            if calls["n"] == 10:
                w = np.asarray(w, dtype=float)
                w[1] = 50.0  # lateral velocity kick, drives e_y over the lane edge
            return w

        monkeypatch.setattr(sim, "sample_noise", kicked)
        cfg = small_config(max_steps=200, record_trajectory=True)
        rec = run_closed_loop(cfg, 0)
        assert rec.crashed
        assert rec.lap_time is None
        assert rec.steps <= 12
        # crash implies termination: no post-crash samples in the log
        assert rec.trajectory.shape[0] == rec.steps
        # the excursion beyond the collision threshold is counted as an event
        assert rec.collisions >= 1

    def test_trajectory_log_schema(self):
        cfg = small_config(max_steps=20, record_trajectory=True)
        rec = run_closed_loop(cfg, 0)
        assert rec.trajectory.shape == (rec.steps, len(sim.TRAJECTORY_COLUMNS))
        t = rec.trajectory[:, 0]
        assert np.allclose(np.diff(t), cfg.dt_control)

    def test_initial_state_jitter_deterministic(self):
        cfg = small_config()
        a = initial_state(cfg, 3)
        b = initial_state(cfg, 3)
        c = initial_state(cfg, 4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mppi_has_no_satisfaction_rate(self):
        cfg = small_config(controller=MppiConfig(kind="mppi", samples=16, horizon=8,
                                                 temperature=2.0), max_steps=15)
        rec = run_closed_loop(cfg, 0)
        assert rec.satisfaction_rate is None


class TestMonteCarlo:
    def test_crash_ratio_arithmetic(self):
        records = [
            RunRecord(0, "smppi", True, 2, None, 3.0, 0.9, 50, 0.01, 0.02),
            RunRecord(1, "smppi", False, 0, 15.0, 5.0, 1.0, 300, 0.01, 0.02),
            RunRecord(2, "smppi", False, 1, 16.0, 4.8, 0.95, 310, 0.01, 0.02),
            RunRecord(3, "smppi", False, 0, 15.5, 4.9, 1.0, 305, 0.01, 0.02),
        ]
        rep = aggregate(records, small_config())
        assert rep.crash_ratio == 0.25
        assert rep.collision_ratio == 0.75
        assert rep.completion_ratio == 0.75
        assert rep.crash_ci == pytest.approx(math.sqrt(0.25 * 0.75 / 4))

    def test_same_seed_identical_reports(self):
        cfg = small_config(runs=2, max_steps=30)
        a = monte_carlo(cfg)
        b = monte_carlo(cfg)
        assert a.crash_ratio == b.crash_ratio
        assert a.collision_ratio == b.collision_ratio
        for ra, rb in zip(a.records, b.records):
            assert ra.crashed == rb.crashed
            assert ra.collisions == rb.collisions
            assert ra.lap_time == rb.lap_time
            assert ra.mean_speed == rb.mean_speed
            assert ra.satisfaction_rate == rb.satisfaction_rate

    def test_worker_count_invariant(self):
        base = small_config(runs=3, max_steps=40)
        serial = monte_carlo(replace(base, workers=1))
        parallel = monte_carlo(replace(base, workers=2))
        for ra, rb in zip(serial.records, parallel.records):
            assert ra.run_index == rb.run_index
            assert ra.crashed == rb.crashed
            assert ra.collisions == rb.collisions
            assert ra.mean_speed == rb.mean_speed
            assert ra.satisfaction_rate == rb.satisfaction_rate


class TestSweep:
    def test_single_point_matches_monte_carlo(self):
        cfg = small_config(runs=2, max_steps=30)
        [(point, rep)] = sweep(cfg, {"q_ey": [0.1]})
        direct = monte_carlo(apply_axis(cfg, "q_ey", 0.1))
        assert point == {"q_ey": 0.1}
        assert rep.crash_ratio == direct.crash_ratio
        assert rep.collision_ratio == direct.collision_ratio
        assert [r.mean_speed for r in rep.records] == [r.mean_speed for r in direct.records]

    def test_grid_size(self):
        cfg = small_config(runs=1, max_steps=10)
        results = sweep(cfg, {"M": [8, 16], "N": [2, 4]})
        assert len(results) == 4
        assert [p for p, _ in results] == [
            {"M": 8, "N": 2}, {"M": 8, "N": 4}, {"M": 16, "N": 2}, {"M": 16, "N": 4},
        ]

    def test_axis_application(self):
        cfg = small_config()
        assert apply_axis(cfg, "q_ey", 7.0).cost.q_diag[IDX_EY] == 7.0
        assert apply_axis(cfg, "M", 99).controller.samples == 99
        assert apply_axis(cfg, "N", 9).controller.inner_samples == 9
        with pytest.raises(ConfigInvalid):
            apply_axis(cfg, "bogus", 1)

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigInvalid):
            sweep(small_config(), {"q_ey": []})
