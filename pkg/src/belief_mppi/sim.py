"""Closed-loop simulation and Monte-Carlo experiment harness.

The plant runs a finer RK4 integration than the controller's internal
Euler model (deliberate model mismatch); process noise is injected once
per control period on the velocity channels. Runs are embarrassingly
parallel with per-run substreams, and aggregation is order-fixed so a
batch is bit-reproducible for any worker count.
"""

import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from . import streams
from .belief import CovSubset, DEFAULT_SUBSET, VehicleBeliefContext, propagate_mc_batch
from .constraints import residual_values, track_dcbf_values
from .controllers import Controller, CostSpec, MppiConfig
from .dynamics import (
    IDX_EY,
    IDX_S,
    NoiseModel,
    Track,
    VehicleParams,
    VehicleState,
    make_test_track,
    sample_noise,
    step_array,
    with_timestep,
)

TRAJECTORY_COLUMNS = (
    "t", "s", "e_Y", "e_psi", "vX", "vY", "psi_dot", "delta", "T",
    "h", "residual", "sigma_y",
)


class ConfigInvalid(ValueError):
    pass


class IntervalCounter:
    """Counts maximal contiguous violation intervals from streamed samples."""

    def __init__(self, active: bool = False):
        self.count = 0
        self._active = active

    def update(self, violating: bool):
        if violating and not self._active:
            self.count += 1
        self._active = bool(violating)


def stadium_track(straight: float = 20.0, radius: float = 6.0,
                  half_width: float = 2.0) -> Track:
    """Default experiment circuit: two straights joined by half-circle arcs."""
    arc = np.pi * radius
    return make_test_track(
        [(straight, 0.0), (arc, 1.0 / radius), (straight, 0.0), (arc, 1.0 / radius)],
        half_width=half_width,
    )


@dataclass(eq=False)
class ExperimentConfig:
    controller: MppiConfig = field(default_factory=MppiConfig)
    cost: CostSpec = field(default_factory=CostSpec)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    track: Track = field(default_factory=stadium_track)
    noise: NoiseModel = None
    subset: CovSubset = field(default_factory=lambda: DEFAULT_SUBSET)
    dt_control: float = 0.05
    dt_plant: float = 0.01
    runs: int = 100
    master_seed: int = 0
    laps: int = 1
    collision_threshold: float = 1.8
    max_steps: int = 1200
    init_speed: float = 2.0
    init_jitter: float = 0.1
    workers: int = 1
    record_trajectory: bool = False
    trajectory_stride: int = 1
    monitor_window: int = 0  # 0 -> half the controller horizon

    def __post_init__(self):
        if self.noise is None:
            self.noise = NoiseModel(np.diag([0.15**2, 0.15**2, 0.3**2]))
        if self.runs < 1:
            raise ConfigInvalid("experiment.runs must be >= 1")
        if self.laps < 1:
            raise ConfigInvalid("experiment.laps must be >= 1")
        if self.max_steps < 1:
            raise ConfigInvalid("experiment.max_steps must be >= 1")
        if not self.collision_threshold < self.track.half_width:
            raise ConfigInvalid(
                "collision threshold must be below the crash threshold (track half width)"
            )
        if self.dt_control <= 0.0 or self.dt_plant <= 0.0:
            raise ConfigInvalid("timesteps must be > 0")
        sub = self.dt_control / self.dt_plant
        if abs(sub - round(sub)) > 1e-9 or round(sub) < 1:
            raise ConfigInvalid("dt_control must be an integer multiple of dt_plant")
        if self.workers < 1:
            raise ConfigInvalid("experiment.workers must be >= 1")
        if self.trajectory_stride < 1:
            raise ConfigInvalid("experiment.trajectory_stride must be >= 1")
        if self.monitor_window < 0:
            raise ConfigInvalid("experiment.monitor_window must be >= 0")

    @property
    def plant_substeps(self) -> int:
        return round(self.dt_control / self.dt_plant)

    def plant_params(self) -> VehicleParams:
        return with_timestep(self.vehicle, self.dt_plant, "rk4")

    def model_params(self) -> VehicleParams:
        return with_timestep(self.vehicle, self.dt_control, "euler")


@dataclass
class RunRecord:
    run_index: int
    controller: str
    crashed: bool
    collisions: int
    lap_time: float = None          # seconds; None when the lap was not completed
    mean_speed: float = 0.0
    satisfaction_rate: float = None  # None for the unshielded controller
    steps: int = 0
    compute_time_mean: float = 0.0
    compute_time_max: float = 0.0
    trajectory: np.ndarray = None


@dataclass
class AggregateReport:
    controller: str
    runs: int
    crash_ratio: float
    crash_ci: float
    collision_ratio: float
    collision_ci: float
    completion_ratio: float
    mean_lap_time: float
    mean_speed: float
    mean_satisfaction: float
    hz: float
    records: list


class SafetyMonitor:
    """Realized safety-condition bookkeeping along the executed trajectory.

    For the belief-space controller the realized belief at a step carries the
    process uncertainty accumulated over a sliding window of executed
    controls (re-propagated Monte-Carlo style from the measured state at the
    window start); deterministic shielded rollouts use sigma_y = 0. The
    monitor records the fraction of executed steps whose (h_k, h_{k-1}) pair
    satisfies the discrete safety condition.
    """

    def __init__(self, cfg: ExperimentConfig, run_index: int):
        self.kind = cfg.controller.kind
        self.nu = cfg.cost.backoff
        self.beta = cfg.cost.safety.cbf_rate
        self.half_width = cfg.track.half_width
        # Default window: half the replanning horizon, i.e. the mid-horizon
        # uncertainty the controller itself reasons about.
        window = cfg.monitor_window or max(1, cfg.controller.horizon // 2)
        self.window = deque(maxlen=window)
        self.inner = max(2, cfg.controller.inner_samples)
        self.subset = cfg.subset
        self.p_ey = cfg.subset.position(IDX_EY)
        self.ctx = VehicleBeliefContext(cfg.model_params(), cfg.track, cfg.noise, cfg.subset)
        self.master_seed = cfg.master_seed
        self.run_index = run_index
        self.h_prev = None
        self.satisfied = 0
        self.total = 0
        self.last = (np.nan, np.nan, 0.0)  # (h, residual, sigma_y) of the latest step

    def _window_sigma(self, step_index: int) -> float:
        rng = streams.substream(self.master_seed, streams.DOMAIN_RUN, self.run_index,
                                streams.DOMAIN_MONITOR, step_index)
        x0, _ = self.window[0]
        t = len(self.subset)
        means = x0[None, :].copy()
        covs = np.zeros((1, t, t))
        for _, u in self.window:
            means, covs, ok = propagate_mc_batch(
                means, covs, u[None, :], self.inner, rng, self.ctx
            )
            if not ok[0] or not np.all(np.isfinite(covs)):
                break
        return float(np.sqrt(max(covs[0, self.p_ey, self.p_ey], 0.0)))

    def update(self, state_before, control, state_after, step_index: int):
        self.window.append((np.asarray(state_before, dtype=float).copy(),
                            np.asarray(control, dtype=float).copy()))
        sigma_y = self._window_sigma(step_index) if self.kind == "bss" else 0.0
        h = float(track_dcbf_values(state_after[IDX_EY], sigma_y, self.half_width, self.nu))
        if self.h_prev is None:
            self.h_prev = h  # k=0 convention: previous belief equals the current one
        residual = float(residual_values(h, self.h_prev, self.beta))
        self.satisfied += residual >= 0.0
        self.total += 1
        self.h_prev = h
        self.last = (h, residual, sigma_y)

    @property
    def rate(self):
        if self.kind == "mppi" or self.total == 0:
            return None
        return self.satisfied / self.total


def initial_state(cfg: ExperimentConfig, run_index: int) -> np.ndarray:
    rng = streams.substream(cfg.master_seed, streams.DOMAIN_RUN, run_index,
                            streams.DOMAIN_INIT)
    jitter = cfg.init_jitter * rng.standard_normal(2)
    state = VehicleState.rolling(cfg.init_speed + jitter[0], cfg.vehicle,
                                 e_y=jitter[1])
    return state.as_array()


def run_closed_loop(cfg: ExperimentConfig, run_index: int = 0) -> RunRecord:
    """Simulate one run: alternate controller and plant until lap completion,
    crash (|e_Y| beyond the lane), or step-budget exhaustion."""
    track = cfg.track
    plant = cfg.plant_params()
    controller = Controller(
        cfg.controller, cfg.cost, cfg.model_params(), track,
        noise=cfg.noise, subset=cfg.subset,
        seed=cfg.master_seed, run_path=(streams.DOMAIN_RUN, run_index),
    )
    plant_rng = streams.substream(cfg.master_seed, streams.DOMAIN_RUN, run_index,
                                  streams.DOMAIN_PLANT)
    monitor = SafetyMonitor(cfg, run_index)

    x = initial_state(cfg, run_index)
    target = cfg.laps * track.length
    progress = 0.0
    prev_s = x[IDX_S]
    crashed = False
    collisions = IntervalCounter(abs(x[IDX_EY]) > cfg.collision_threshold)
    lap_time = None
    rows = [] if cfg.record_trajectory else None
    times = []
    steps = 0

    for step_index in range(cfg.max_steps):
        tic = time.perf_counter()
        u0, _ = controller.control_step(x)
        times.append(time.perf_counter() - tic)

        w = sample_noise(plant_rng, cfg.noise)
        x_before = x
        frame_ok = True
        for j in range(cfg.plant_substeps):
            noise_j = w if j == cfg.plant_substeps - 1 else None
            x, ok = step_array(x, u0, noise_j, plant, track, cfg.noise.channels)
            if not bool(ok):
                frame_ok = False
                break
        steps = step_index + 1

        ds = x[IDX_S] - prev_s
        if track.closed:
            ds = (ds + 0.5 * track.length) % track.length - 0.5 * track.length
        progress += ds
        prev_s = x[IDX_S]

        monitor.update(x_before, u0, x, step_index)
        if rows is not None and step_index % cfg.trajectory_stride == 0:
            h, residual, sigma_y = monitor.last
            rows.append((step_index * cfg.dt_control + cfg.dt_control, x[IDX_S],
                         x[IDX_EY], x[5], x[0], x[1], x[2], u0[0], u0[1],
                         h, residual, sigma_y))

        collisions.update(abs(x[IDX_EY]) > cfg.collision_threshold)

        if not frame_ok or abs(x[IDX_EY]) > track.half_width:
            crashed = True
            break
        if progress >= target:
            lap_time = steps * cfg.dt_control
            break

    elapsed = steps * cfg.dt_control
    mean_speed = progress / elapsed if elapsed > 0 else 0.0
    return RunRecord(
        run_index=run_index,
        controller=cfg.controller.kind,
        crashed=crashed,
        collisions=collisions.count,
        lap_time=lap_time,
        mean_speed=mean_speed,
        satisfaction_rate=monitor.rate,
        steps=steps,
        compute_time_mean=float(np.mean(times)) if times else 0.0,
        compute_time_max=float(np.max(times)) if times else 0.0,
        trajectory=np.array(rows) if rows else None,
    )


def _run_one(args):
    cfg, index = args
    return run_closed_loop(cfg, index)


def monte_carlo(cfg: ExperimentConfig) -> AggregateReport:
    """Independent seeded runs aggregated into crash/collision statistics."""
    indices = list(range(cfg.runs))
    if cfg.workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_one, [(cfg, i) for i in indices]))
    else:
        records = [run_closed_loop(cfg, i) for i in indices]
    return aggregate(records, cfg)


def aggregate(records, cfg: ExperimentConfig) -> AggregateReport:
    r = len(records)
    crashes = sum(rec.crashed for rec in records)
    collisions = np.array([rec.collisions for rec in records], dtype=float)
    crash_ratio = crashes / r
    crash_ci = float(np.sqrt(crash_ratio * (1.0 - crash_ratio) / r))
    collision_ci = float(collisions.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
    lap_times = [rec.lap_time for rec in records if rec.lap_time is not None]
    sats = [rec.satisfaction_rate for rec in records if rec.satisfaction_rate is not None]
    total_steps = sum(rec.steps for rec in records)
    total_time = sum(rec.compute_time_mean * rec.steps for rec in records)
    return AggregateReport(
        controller=cfg.controller.kind,
        runs=r,
        crash_ratio=crash_ratio,
        crash_ci=crash_ci,
        collision_ratio=float(collisions.mean()),
        collision_ci=collision_ci,
        completion_ratio=len(lap_times) / r,
        mean_lap_time=float(np.mean(lap_times)) if lap_times else float("nan"),
        mean_speed=float(np.mean([rec.mean_speed for rec in records])),
        mean_satisfaction=float(np.mean(sats)) if sats else float("nan"),
        hz=total_steps / total_time if total_time > 0 else float("nan"),
        records=list(records),
    )


def default_experiment(kind: str = "bss", **overrides) -> ExperimentConfig:
    """The tuned default racing experiment (stadium track, noisy plant).

    Sample counts follow the benchmark protocol: 2048 plain-MPPI rollouts,
    512 shielded, 256 x 16 for the belief-space controller.
    """
    samples = {"mppi": 2048, "smppi": 512, "bss": 256}[kind]
    cfg = dict(
        controller=MppiConfig(kind=kind, samples=samples, horizon=20,
                              temperature=1.0, inner_samples=16),
        cost=CostSpec(),
        vehicle=VehicleParams(),
        noise=None,
        runs=100,
        master_seed=0,
    )
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


SWEEP_AXES = ("q_ey", "M", "N")


def apply_axis(cfg: ExperimentConfig, name: str, value) -> ExperimentConfig:
    if name == "q_ey":
        q = cfg.cost.q_diag.copy()
        q[IDX_EY] = float(value)
        return replace(cfg, cost=replace(cfg.cost, q_diag=q))
    if name == "M":
        return replace(cfg, controller=replace(cfg.controller, samples=int(value)))
    if name == "N":
        return replace(cfg, controller=replace(cfg.controller, inner_samples=int(value)))
    raise ConfigInvalid(f"unknown sweep axis {name!r} (supported: {SWEEP_AXES})")


def sweep(cfg: ExperimentConfig, axes):
    """Monte-Carlo batches over a parameter grid with shared (paired) seeds.

    axes: ordered mapping axis name -> list of values; the grid is their
    cartesian product in row-major order. Returns [(point dict, report)].
    """
    names = list(axes)
    if not names or any(len(axes[n]) == 0 for n in names):
        raise ConfigInvalid("sweep axis must be non-empty")
    results = []
    for combo in product(*(axes[n] for n in names)):
        point = dict(zip(names, combo))
        sub = cfg
        for n, v in point.items():
            sub = apply_axis(sub, n, v)
        results.append((point, monte_carlo(sub)))
    return results
