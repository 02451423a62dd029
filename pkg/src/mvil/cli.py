"""Command-line interface: simulate, run, montecarlo, benchmark, observability.

Every report path writes delimited output (9 significant digits) and renders
matplotlib figures next to it.  Config values come from an optional flat config
file; individual keys are overridable with repeated --set KEY=VALUE flags.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness, io, plots
from .geometry import Pose3, quat_to_rot
from .harness import RunConfig
from .propagation import ImuSample
from .sim import CameraFrame, GapSchedule, MeasurementStream, build_world, gen_measurements


def _load_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(io.load_config(args.config))
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise SystemExit(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        values[k.strip()] = io.parse_value(v)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    base = asdict(RunConfig())
    for k in values:
        if k not in base:
            raise SystemExit(f"unknown config key {k!r}")
    base.update(values)
    return RunConfig.from_flat(base)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", default="out", help="output directory")


class _TruthTrajectory:
    """Frame-timestamp truth lookup backing file-based runs."""

    def __init__(self, rows):
        self._by_t = {round(t, 9): (q, p, v) for t, q, p, v in rows}

    def rotation_world_from_body(self, t: float) -> np.ndarray:
        return quat_to_rot(self._by_t[round(t, 9)][0]).T

    def position(self, t: float) -> np.ndarray:
        return self._by_t[round(t, 9)][1]

    def velocity(self, t: float) -> np.ndarray:
        return self._by_t[round(t, 9)][2]


class FileWorld:
    """World reconstructed from simulate's output files."""

    def __init__(self, sim_dir: str | Path):
        d = Path(sim_dir)
        self.prior_map = io.load_map(d / "map.csv")
        rows, rotvec, trans = io.load_truth(d / "truth.csv")
        self.traj_run = _TruthTrajectory(rows)
        from .geometry import small_angle_quat

        self._T_GL = Pose3(quat_to_rot(small_angle_quat(rotvec)).T, trans)

    def true_transform(self) -> Pose3:
        return self._T_GL

    def keyframe_pose(self, kf_id):
        return self.prior_map.keyframe_pose(kf_id)

    def keyframe_cov(self, kf_id):
        return self.prior_map.keyframe_cov(kf_id)


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    out = plots.ensure_dir(args.out)
    world = build_world(cfg.sim_config(), cfg.seed)
    meas_seed = int(np.random.SeedSequence([cfg.seed, 0xFEED]).generate_state(1)[0])
    stream = gen_measurements(world, cfg.gaps(), meas_seed)

    io.write_map(out / "map.csv", io.PriorMap.from_world(world))
    io.write_measurements(out / "measurements.csv", stream.imu, stream.frames)
    truth_rows = []
    for fr in stream.frames:
        t = fr.timestamp
        truth_rows.append((t, harness._q_IL_true(world.traj_run, t),
                           world.traj_run.position(t), world.traj_run.velocity(t)))
    io.write_truth(out / "truth.csv", truth_rows,
                   world.config.T_GW_rotvec, world.config.T_GW_translation)
    io.write_config(out / "config.cfg", cfg.to_flat())

    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    ts = np.linspace(0, world.traj_run.duration, 500)
    run_xy = np.array([world.traj_run.position(t) for t in ts])
    map_xy = np.array([world.traj_map.position(t) for t in ts])
    ax.plot(run_xy[:, 0], run_xy[:, 1], "C1-", label="run trajectory")
    ax.plot(map_xy[:, 0], map_xy[:, 1], "C0--", label="map trajectory")
    ax.scatter(world.landmarks_W[:, 0], world.landmarks_W[:, 1], s=1, c="gray", alpha=0.4)
    ax.axis("equal")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.savefig(out / "world.png", dpi=120)
    plt.close(fig)
    n_match = sum(1 for f in stream.frames if f.match is not None)
    print(f"world written to {out}: {len(world.keyframes)} keyframes, "
          f"{len(world.map_landmarks)} map landmarks, {len(stream.frames)} frames, "
          f"{n_match} matches")
    return 0


def _stream_from_files(sim_dir: Path) -> MeasurementStream:
    imu, frames = io.load_measurements(sim_dir / "measurements.csv")
    pm = io.load_map(sim_dir / "map.csv")
    io.attach_landmark_positions(frames, pm)
    return MeasurementStream(imu, frames, np.zeros((1, 6)))


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    out = plots.ensure_dir(args.out)
    if args.sim_dir:
        d = Path(args.sim_dir)
        # The recorded config travels with the files; CLI flags override it.
        merged = io.load_config(d / "config.cfg")
        merged.update({k: cfg.to_flat()[k] for k in _explicit_overrides(args)})
        cfg = RunConfig.from_flat(merged)
        world = FileWorld(d)
        stream = _stream_from_files(d)
        result = harness.run_single(cfg, world=world, stream=stream)
        plot_world = None
    else:
        world = build_world(cfg.sim_config(), cfg.seed)
        meas_seed = int(np.random.SeedSequence([cfg.seed, 0xFEED]).generate_state(1)[0])
        stream = gen_measurements(world, cfg.gaps(), meas_seed)
        result = harness.run_single(cfg, world=world, stream=stream)
        plot_world = world

    harness.write_run_csv(out / "trajectory.csv", result)
    stats = result.match_gap_stats()
    with open(out / "metrics.csv", "w") as fh:
        fh.write("metric,value\n")
        rows = [("position_rmse_m", result.position_rmse()),
                ("orientation_rmse_deg", result.orientation_rmse_deg()),
                ("mean_nees_pose", float(np.nanmean(result.nees_pose))),
                ("coverage_3sigma", result.coverage_3sigma()),
                ("diverged", int(result.diverged)),
                ("match_gap_mean_s", stats["mean"]),
                ("match_gap_min_s", stats["min"]),
                ("match_gap_max_s", stats["max"]),
                ("match_gap_std_s", stats["std"])]
        for k, v in rows:
            fh.write(f"{k},{format(float(v), '.9g')}\n")
    plots.save_trajectory_figure(out / "trajectory.png", result, plot_world)
    plots.save_error_3sigma_figure(out / "error_3sigma.png", result)
    print(f"run complete: rmse={result.position_rmse():.4g} m, "
          f"diverged={result.diverged}; reports in {out}")
    return 0


def _explicit_overrides(args) -> set:
    keys = set()
    for kv in getattr(args, "set", None) or []:
        keys.add(kv.split("=", 1)[0].strip())
    if getattr(args, "seed", None) is not None:
        keys.add("seed")
    return keys


_MODE_PRESETS = {
    "odometry": dict(mode="odometry"),
    "mvil-sm": dict(mode="mvil", map_mode="SM", fej=False),
    "mvil-sm-fej": dict(mode="mvil", map_mode="SM", fej=True),
    "mvil-mm": dict(mode="mvil", map_mode="MM", fej=False),
    "mvil-mm-fej": dict(mode="mvil", map_mode="MM", fej=True),
    "mvil-mm-mc": dict(mode="mvil", map_mode="MM", fej=False, map_uncertainty="perfect"),
}


def cmd_montecarlo(args) -> int:
    cfg = _load_run_config(args)
    out = plots.ensure_dir(args.out)
    mode_names = [m.strip() for m in args.modes.split(",")] if args.modes else ["mvil-mm-fej"]
    configs = {}
    for name in mode_names:
        if name not in _MODE_PRESETS:
            raise SystemExit(f"unknown mode {name!r}; choose from {sorted(_MODE_PRESETS)}")
        flat = cfg.to_flat()
        flat.update(_MODE_PRESETS[name])
        configs[name] = RunConfig.from_flat(flat)

    results = harness.run_mode_comparison(configs, args.runs, master_seed=cfg.seed,
                                          workers=args.workers)
    reports = {name: harness.summarize_runs(runs) for name, runs in results.items()}

    with open(out / "montecarlo.csv", "w") as fh:
        fh.write("mode,runs,mean_position_rmse_m,mean_orientation_rmse_deg,"
                 "coverage_3sigma,diverged_runs\n")
        for name, rep in reports.items():
            fh.write(f"{name},{rep.n_runs},{rep.mean_position_rmse:.9g},"
                     f"{rep.mean_orientation_rmse_deg:.9g},{rep.coverage_3sigma:.9g},"
                     f"{rep.diverged_runs}\n")
    first = next(iter(reports.values()))
    with open(out / "nees_series.csv", "w") as fh:
        fh.write("t," + ",".join(reports) + "\n")
        for i, t in enumerate(first.t):
            vals = [format(float(rep.nees_mean_series[i]), ".9g") for rep in reports.values()]
            fh.write(f"{t:.9g}," + ",".join(vals) + "\n")

    plots.save_nees_figure(out / "nees.png", first.t,
                           [rep.nees_mean_series for rep in reports.values()],
                           args.runs, labels=list(reports))
    plots.save_rmse_bars(out / "rmse.png", list(reports),
                         [rep.mean_position_rmse for rep in reports.values()])
    for name, rep in reports.items():
        print(f"{name}: rmse={rep.mean_position_rmse:.4g} m, "
              f"coverage={rep.coverage_3sigma:.3f}, diverged={rep.diverged_runs}/{rep.n_runs}")
    print(f"reports in {out}")
    return 0


def cmd_benchmark(args) -> int:
    out = plots.ensure_dir(args.out)
    sizes = [int(s) for s in args.sizes.split(",")]
    table = harness.benchmark_update(sizes, reps=args.reps)
    with open(out / "timing.csv", "w") as fh:
        fh.write("M,schmidt_us,full_ekf_us\n")
        for i, M in enumerate(table["M"]):
            fh.write(f"{M},{table['schmidt_us'][i]:.9g},{table['full_ekf_us'][i]:.9g}\n")
        if "schmidt_slope" in table:
            fh.write(f"# schmidt_slope,{table['schmidt_slope']:.9g}\n")
            fh.write(f"# full_ekf_slope,{table['full_ekf_slope']:.9g}\n")
    plots.save_timing_figure(out / "timing.png", table)
    print(f"schmidt slope {table.get('schmidt_slope', float('nan')):.2f}, "
          f"full-EKF slope {table.get('full_ekf_slope', float('nan')):.2f}; reports in {out}")
    return 0


def cmd_observability(args) -> int:
    out = plots.ensure_dir(args.out)
    rep = harness.observability_report(seed=args.seed if args.seed is not None else 5,
                                       k_steps=args.steps)
    with open(out / "singular_values.csv", "w") as fh:
        fh.write("regime,index,sigma,sigma_over_max\n")
        for name in ("ideal", "estimated", "fej"):
            sv = rep[name]["sv"]
            for i, s in enumerate(sv):
                fh.write(f"{name},{i},{s:.9g},{s / sv[0]:.9g}\n")
    plots.save_singular_values_figure(out / "singular_values.png",
                                      {k: rep[k]["sv"] for k in ("ideal", "estimated", "fej")})
    for name in ("ideal", "estimated", "fej"):
        print(f"{name}: null-space dim {rep[name]['dim']}")
    print(f"reports in {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mvil",
                                     description="map-based visual-inertial localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build a world and write map/measurement/truth files")
    _add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("run", help="run the filter on one config")
    _add_common(p)
    p.add_argument("--sim-dir", help="directory produced by `simulate` (replay its files)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("montecarlo", help="Monte Carlo batch, optionally over several modes")
    _add_common(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--modes", help="comma list: " + ",".join(_MODE_PRESETS))
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_montecarlo)

    p = sub.add_parser("benchmark", help="update-complexity timing vs map size")
    _add_common(p)
    p.add_argument("--sizes", default="20,40,80,160,320")
    p.add_argument("--reps", type=int, default=11)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("observability", help="null-space analysis across regimes")
    _add_common(p)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(fn=cmd_observability)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
