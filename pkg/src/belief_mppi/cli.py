"""Command-line front end: config files, single runs, Monte-Carlo batches
and parameter sweeps with CSV/report emission.

Config files are flat INI-style text ([section] key = value). Every value
has a default taken from the library dataclasses, so an empty file is a
valid experiment. Timing numbers go to a separate timing CSV: wall-clock
measurements are inherently nondeterministic and would break the
byte-reproducibility contract of the result CSVs.
"""

import argparse
import configparser
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .belief import CovSubset, DEFAULT_SUBSET
from .constraints import SafetyParams, allocate_budget, backoff_cantelli, backoff_gaussian
from .controllers import CONTROLLER_KINDS, ControlBounds, CostSpec, MppiConfig
from .dynamics import NoiseModel, OpenLoop, Track, VehicleParams, load_track, make_test_track
from .sim import (
    AggregateReport,
    ConfigInvalid,
    ExperimentConfig,
    RunRecord,
    SWEEP_AXES,
    monte_carlo,
    run_closed_loop,
    stadium_track,
    sweep,
)

OUT_ENV = "BELIEF_MPPI_OUT"


class ConfigError(ValueError):
    """Config problem with the offending "section.key" in the message."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.parser = parser
        self.name = name

    def get(self, key: str, parse, default):
        if not self.parser.has_option(self.name, key):
            return default
        raw = self.parser.get(self.name, key)
        try:
            return parse(raw)
        except Exception as exc:
            raise ConfigError(f"{self.name}.{key}: {exc}") from exc


def read_raw_config(path, overrides=()):
    """Parse the file (must exist) and apply dotted-key overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        key, _, value = item.partition("=")
        section, _, option = key.partition(".")
        if not section or not option or not _:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), option.strip(), value.strip())
    return parser


def _parse_segments(text: str):
    segments = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.replace(":", " ").split()
        if len(parts) != 2:
            raise ValueError(f"segment {chunk!r} is not 'length:curvature'")
        segments.append((float(parts[0]), float(parts[1])))
    return segments


def _build_track(sec: _Section) -> Track:
    kind = sec.get("kind", str.strip, "stadium")
    half_width = sec.get("half_width", float, 2.0)
    if kind == "stadium":
        try:
            return stadium_track(
                straight=sec.get("straight", float, 20.0),
                radius=sec.get("radius", float, 6.0),
                half_width=half_width,
            )
        except (OpenLoop, ValueError) as exc:
            raise ConfigError(f"track: {exc}") from exc
    if kind == "file":
        path = sec.get("path", str.strip, None)
        if path is None:
            raise ConfigError("track.path: required for track.kind = file")
        if not Path(path).is_file():
            raise ConfigError(f"track.path: track file not found: {path}")
        return load_track(path)
    if kind == "segments":
        segs = sec.get("segments", _parse_segments, None)
        if not segs:
            raise ConfigError("track.segments: required for track.kind = segments")
        try:
            return make_test_track(segs, half_width=half_width)
        except OpenLoop as exc:
            raise ConfigError(f"track.segments: {exc}") from exc
    raise ConfigError(f"track.kind: unknown kind {kind!r}")


def _build_vehicle(sec: _Section) -> VehicleParams:
    base = VehicleParams()
    peak = sec.get("peak_force", float, base.peak_fx_front)
    b_lat = sec.get("pacejka_b", float, base.b_lat_front)
    c_lat = sec.get("pacejka_c", float, base.c_lat_front)
    b_long = sec.get("pacejka_b_long", float, base.b_long_front)
    c_long = sec.get("pacejka_c_long", float, base.c_long_front)
    try:
        return VehicleParams(
            mass=sec.get("mass", float, base.mass),
            inertia_z=sec.get("inertia_z", float, base.inertia_z),
            lf=sec.get("lf", float, base.lf),
            lr=sec.get("lr", float, base.lr),
            wheel_radius=sec.get("wheel_radius", float, base.wheel_radius),
            wheel_inertia=sec.get("wheel_inertia", float, base.wheel_inertia),
            b_lat_front=b_lat, b_lat_rear=b_lat,
            c_lat_front=c_lat, c_lat_rear=c_lat,
            b_long_front=b_long, b_long_rear=b_long,
            c_long_front=c_long, c_long_rear=c_long,
            peak_fx_front=peak, peak_fy_front=peak,
            peak_fx_rear=peak, peak_fy_rear=peak,
            drive_gain=sec.get("drive_gain", float, base.drive_gain),
            roll_resist=sec.get("roll_resist", float, base.roll_resist),
            v_floor=sec.get("v_floor", float, base.v_floor),
        )
    except ValueError as exc:
        raise ConfigError(f"vehicle: {exc}") from exc


def _build_noise(sec: _Section) -> NoiseModel:
    std_vx = sec.get("std_vx", float, 0.15)
    std_vy = sec.get("std_vy", float, 0.15)
    std_yaw = sec.get("std_yaw", float, 0.3)
    if min(std_vx, std_vy, std_yaw) < 0.0:
        raise ConfigError("noise: standard deviations must be >= 0")
    return NoiseModel(np.diag([std_vx**2, std_vy**2, std_yaw**2]))


def _parse_kinds(text: str):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    for k in kinds:
        if k not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {k!r}")
    if not kinds:
        raise ValueError("empty controller list")
    return kinds


def _build_controller(sec: _Section, kind: str) -> MppiConfig:
    base = MppiConfig()
    sigma_delta = sec.get("sigma_delta", float, 0.15)
    sigma_throttle = sec.get("sigma_throttle", float, 0.35)
    base_bounds = base.bounds
    try:
        bounds = ControlBounds(
            delta_max=sec.get("delta_max", float, base_bounds.delta_max),
            throttle_min=sec.get("throttle_min", float, base_bounds.throttle_min),
            throttle_max=sec.get("throttle_max", float, base_bounds.throttle_max),
        )
        return MppiConfig(
            kind=kind,
            samples=sec.get(f"samples_{kind}", int,
                            sec.get("samples", int, base.samples)),
            horizon=sec.get("horizon", int, base.horizon),
            temperature=sec.get("temperature", float, base.temperature),
            control_cost_weight=sec.get("control_cost_weight", float,
                                        base.control_cost_weight),
            sigma_eps=np.diag([sigma_delta**2, sigma_throttle**2]),
            bounds=bounds,
            inner_samples=sec.get(f"inner_samples_{kind}", int,
                                  sec.get("inner_samples", int,
                                          base.inner_samples)),
            persist_particles=sec.get("persist_particles", _parse_bool,
                                      base.persist_particles),
        )
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from exc


def _build_cost(sec: _Section) -> CostSpec:
    base = CostSpec()
    q = [
        sec.get("q_vx", float, base.q_diag[0]),
        sec.get("q_vy", float, base.q_diag[1]),
        sec.get("q_yaw", float, base.q_diag[2]),
        sec.get("q_omega_f", float, base.q_diag[3]),
        sec.get("q_omega_r", float, base.q_diag[4]),
        sec.get("q_epsi", float, base.q_diag[5]),
        sec.get("q_ey", float, base.q_diag[6]),
        sec.get("q_s", float, base.q_diag[7]),
    ]
    p_fail = sec.get("p_fail", float, 0.05)
    mode = sec.get("backoff", str.strip, "gaussian")
    if mode not in ("gaussian", "cantelli"):
        raise ConfigError(f"costs.backoff: unknown mode {mode!r}")
    base_safety = SafetyParams()
    try:
        eps = allocate_budget(p_fail, 2)[0]
        nu = backoff_gaussian(eps) if mode == "gaussian" else backoff_cantelli(eps)
        safety = SafetyParams(
            cbf_rate=sec.get("cbf_rate", float, base_safety.cbf_rate),
            penalty=sec.get("penalty", float, base_safety.penalty),
        )
        return CostSpec(
            q_diag=np.array(q),
            v_goal=sec.get("v_goal", float, base.v_goal),
            obstacle_penalty=sec.get("obstacle_penalty", float, base.obstacle_penalty),
            terminal_scale=sec.get("terminal_scale", float, base.terminal_scale),
            safety=safety,
            backoff=nu,
        )
    except (ValueError, ConfigInvalid) as exc:
        raise ConfigError(f"costs: {exc}") from exc


def build_experiment(parser: configparser.ConfigParser, kind: str = None):
    """(ExperimentConfig for the first/selected kind, list of all kinds)."""
    ctrl_sec = _Section(parser, "controller")
    kinds = ctrl_sec.get("kind", _parse_kinds, ["bss"])
    if kind is not None:
        if kind not in CONTROLLER_KINDS:
            raise ConfigError(f"controller.kind: unknown controller kind {kind!r}")
        kinds = [kind]
    exp_sec = _Section(parser, "experiment")
    try:
        cfg = ExperimentConfig(
            controller=_build_controller(ctrl_sec, kinds[0]),
            cost=_build_cost(_Section(parser, "costs")),
            vehicle=_build_vehicle(_Section(parser, "vehicle")),
            track=_build_track(_Section(parser, "track")),
            noise=_build_noise(_Section(parser, "noise")),
            dt_control=exp_sec.get("dt_control", float, 0.05),
            dt_plant=exp_sec.get("dt_plant", float, 0.01),
            runs=exp_sec.get("runs", int, 100),
            master_seed=exp_sec.get("seed", int, 0),
            laps=exp_sec.get("laps", int, 1),
            collision_threshold=exp_sec.get("collision_threshold", float, 1.8),
            max_steps=exp_sec.get("max_steps", int, 1200),
            init_speed=exp_sec.get("init_speed", float, 2.0),
            init_jitter=exp_sec.get("init_jitter", float, 0.1),
            workers=exp_sec.get("workers", int, 1),
            record_trajectory=exp_sec.get("record_trajectory", _parse_bool, False),
            trajectory_stride=exp_sec.get("trajectory_stride", int, 1),
            monitor_window=exp_sec.get("monitor_window", int, 0),
        )
    except ConfigInvalid as exc:
        raise ConfigError(f"experiment: {exc}") from exc
    configs = [cfg]
    for other in kinds[1:]:
        configs.append(replace(cfg, controller=_build_controller(ctrl_sec, other)))
    return configs


def dump_config(parser: configparser.ConfigParser, path):
    """Write the (post-override) raw configuration back out."""
    with open(path, "w") as fh:
        parser.write(fh)


def config_equal(a, b) -> bool:
    """Structural equality of two experiment configurations."""
    if type(a) is not type(b):
        return False
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and bool(np.array_equal(a, b))
    if hasattr(a, "__dataclass_fields__"):
        return all(
            config_equal(getattr(a, f), getattr(b, f))
            for f in a.__dataclass_fields__
            if not f.startswith("_")
        )
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(config_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return a == b


# ---------------------------------------------------------------------------
# CSV / report emission


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_trajectory(path, record: RunRecord):
    from .sim import TRAJECTORY_COLUMNS

    rows = record.trajectory if record.trajectory is not None else []
    write_csv(path, TRAJECTORY_COLUMNS, rows)


AGGREGATE_COLUMNS = (
    "controller", "runs", "crash_ratio", "crash_ci", "collision_ratio",
    "collision_ci", "completion_ratio", "mean_lap_time", "mean_speed",
    "mean_satisfaction",
)

RUN_COLUMNS = (
    "controller", "run", "crashed", "collisions", "lap_time", "mean_speed",
    "satisfaction_rate", "steps",
)


def aggregate_rows(reports):
    return [
        (r.controller, r.runs, r.crash_ratio, r.crash_ci, r.collision_ratio,
         r.collision_ci, r.completion_ratio, r.mean_lap_time, r.mean_speed,
         r.mean_satisfaction)
        for r in reports
    ]


def run_rows(reports):
    rows = []
    for rep in reports:
        for rec in rep.records:
            rows.append((rec.controller, rec.run_index, rec.crashed, rec.collisions,
                         rec.lap_time, rec.mean_speed, rec.satisfaction_rate,
                         rec.steps))
    return rows


def timing_rows(reports):
    rows = []
    for rep in reports:
        for rec in rep.records:
            rows.append((rec.controller, rec.run_index, rec.compute_time_mean,
                         rec.compute_time_max))
    return rows


def summary_text(reports) -> str:
    lines = [f"{'Method':<10} {'Crashes':>9} {'Collisions':>11} {'Speed [Hz]':>11}"]
    for r in reports:
        lines.append(
            f"{r.controller:<10} {100.0 * r.crash_ratio:>8.1f}% "
            f"{100.0 * r.collision_ratio:>10.1f}% {r.hz:>11.1f}"
        )
    return "\n".join(lines) + "\n"


def _out_dir(args) -> Path:
    out = os.environ.get(OUT_ENV) or args.out
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _common_overrides(args):
    overrides = list(args.set or ())
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"experiment.workers={args.workers}")
    if getattr(args, "samples", None) is not None:
        overrides.append(f"controller.samples={args.samples}")
    if getattr(args, "inner_samples", None) is not None:
        overrides.append(f"controller.inner_samples={args.inner_samples}")
    return overrides


# ---------------------------------------------------------------------------
# Subcommands


def cmd_run(args) -> int:
    try:
        parser = read_raw_config(args.config, _common_overrides(args))
        configs = build_experiment(parser, kind=args.controller)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    cfg = replace(configs[0], record_trajectory=True)
    out = _out_dir(args)
    record = run_closed_loop(cfg, run_index=args.run_index)
    write_trajectory(out / "trajectory.csv", record)
    outcome = "lap complete" if record.lap_time is not None else (
        "crashed" if record.crashed else "incomplete (step budget)"
    )
    lap = f"{record.lap_time:.2f} s" if record.lap_time is not None else "-"
    sat = f"{record.satisfaction_rate:.3f}" if record.satisfaction_rate is not None else "-"
    summary = (
        f"controller={cfg.controller.kind} outcome={outcome} lap_time={lap} "
        f"collisions={record.collisions} mean_speed={record.mean_speed:.2f} m/s "
        f"satisfaction={sat} steps={record.steps}\n"
    )
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    if record.lap_time is not None:
        return 0
    return 2 if record.crashed else 3


def cmd_batch(args) -> int:
    try:
        parser = read_raw_config(args.config, _common_overrides(args))
        configs = build_experiment(parser, kind=args.controller)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    reports = [monte_carlo(cfg) for cfg in configs]
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate_rows(reports))
    write_csv(out / "runs.csv", RUN_COLUMNS, run_rows(reports))
    write_csv(out / "timing.csv",
              ("controller", "run", "compute_time_mean", "compute_time_max"),
              timing_rows(reports))
    text = summary_text(reports)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def parse_axis_spec(tokens):
    """Axis strings like "q_ey=0.1,1,10,40" or "M=128:512:128 N=4:16:4"."""
    text = " ".join(tokens).strip()
    if not text:
        raise ConfigError("empty sweep axis")
    axes = {}
    for token in text.split():
        name, eq, rest = token.partition("=")
        name = name.strip()
        if not eq or not rest:
            raise ConfigError(f"axis {token!r} is not of the form name=values")
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r} (supported: {', '.join(SWEEP_AXES)})")
        cast = float if name == "q_ey" else int
        try:
            if ":" in rest:
                start, stop, step = (float(p) for p in rest.split(":"))
                if step <= 0 or stop < start:
                    raise ValueError("range must be start:stop:step with step > 0")
                count = int(math.floor((stop - start) / step + 1e-9)) + 1
                values = [cast(start + i * step) for i in range(count)]
            else:
                values = [cast(v) for v in rest.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"axis {token!r}: {exc}") from exc
        if not values:
            raise ConfigError(f"axis {token!r} has no values")
        axes[name] = values
    return axes


def cmd_sweep(args) -> int:
    try:
        axes = parse_axis_spec(args.axis)
        parser = read_raw_config(args.config, _common_overrides(args))
        configs = build_experiment(parser, kind=args.controller)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    names = list(axes)
    header = ("controller", *names, "crash_ratio", "crash_ci",
              "collision_ratio", "collision_ci")
    rows = []
    timing = []
    for cfg in configs:
        for point, report in sweep(cfg, axes):
            key = tuple(point[n] for n in names)
            rows.append((report.controller, *key, report.crash_ratio, report.crash_ci,
                         report.collision_ratio, report.collision_ci))
            timing.append((report.controller, *key, report.hz))
    write_csv(out / "sweep.csv", header, rows)
    write_csv(out / "timing_sweep.csv", ("controller", *names, "hz"), timing)
    for row in rows:
        print(",".join(_fmt(v) for v in row))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="belief-mppi",
        description="Sampling-based stochastic MPC experiments (MPPI / Shield-MPPI / belief-space MPPI)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        p.add_argument("--workers", type=int, default=None, help="override experiment.workers")
        p.add_argument("--out", default="out", help=f"output directory (env {OUT_ENV} overrides)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config value", default=[])
        p.add_argument("--controller", default=None, choices=CONTROLLER_KINDS,
                       help="run a single controller kind")
        p.add_argument("--M", dest="samples", type=int, default=None,
                       help="override controller.samples")
        p.add_argument("--N", dest="inner_samples", type=int, default=None,
                       help="override controller.inner_samples")

    p_run = sub.add_parser("run", help="single closed-loop run with trajectory log")
    add_common(p_run)
    p_run.add_argument("--run-index", type=int, default=0, help="seed index of the run")
    p_run.set_defaults(func=cmd_run)

    p_batch = sub.add_parser("batch", help="Monte-Carlo batch per configured controller")
    add_common(p_batch)
    p_batch.set_defaults(func=cmd_batch)

    p_sweep = sub.add_parser("sweep", help="parameter sweep (q_ey values or M/N grid)")
    add_common(p_sweep)
    p_sweep.add_argument("axis", nargs="*", help='e.g. "q_ey=0.1,1,10,40" or "M=128:512:128 N=4:16:4"')
    p_sweep.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
