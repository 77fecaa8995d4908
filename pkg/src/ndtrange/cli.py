"""Command line front end: ``ndtrange <subcommand> [options]``.

Every subcommand reads and writes fixed file names inside ``--out-dir`` so the
stages can be chained by hand or run together with ``pipeline``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .cloud import read_cloud, write_cloud
from .factors import read_factors_csv, write_factors_csv, factor_vector
from .forest import load_model, save_model
from .harness import (EvalConfig, Experiment, TIMING_MODES, build_dataset, dump_config, emit_comparison,
                      emit_report, holdout_evaluation, load_config, model_filename, prepare_experiment,
                      read_ground_truth, read_sweep, read_trajectory_csv, route_summary, run_dynamic_comparison,
                      run_pipeline, sweep_ranges, train_models, with_overrides, write_ground_truth, write_holdout,
                      write_trajectory_csv)
from .ndt import build_ndt_map, read_ndt_map, write_ndt_map
from .planner import build_range_profile, read_profile_csv, write_profile_csv
from .scene import dump_scene_spec, generate_scene, load_scene_spec, make_trajectory

log = logging.getLogger("ndtrange")


def _config(args) -> EvalConfig:
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, timing_mode=args.timing_mode)
    scene_file = Path(args.out_dir) / "scene.yaml"
    if cfg.scene is None and args.command not in ("scene", "pipeline") and scene_file.exists():
        # later stages reuse the scene written by the ``scene`` stage
        from dataclasses import replace
        cfg = replace(cfg, scene=load_scene_spec(scene_file))
    cfg.validate()
    return cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_scene(args) -> None:
    cfg = _config(args)
    out = _out(args)
    spec = cfg.scene_spec()
    dump_scene_spec(out / "scene.yaml", spec)
    write_cloud(out / "scene_cloud.txt", generate_scene(spec))
    write_trajectory_csv(out / "trajectory.csv", make_trajectory(spec, cfg.waypoint_spacing))
    dump_config(out / "config.yaml", cfg)
    log.info("scene written to %s", out)


def cmd_build_map(args) -> None:
    cfg = _config(args)
    out = _out(args)
    m = build_ndt_map(read_cloud(out / "scene_cloud.txt"), cfg.cell_size)
    write_ndt_map(out / "ndt_map.txt", m)
    log.info("%d cells", len(m))


def cmd_factors(args) -> None:
    cfg = _config(args)
    out = _out(args)
    m = read_ndt_map(out / "ndt_map.txt")
    traj = read_trajectory_csv(out / "trajectory.csv")
    rows = [(i, factor_vector(m, traj.positions[i], r, cfg.factors))
            for i in range(len(traj)) for r in cfg.candidate_ranges]
    write_factors_csv(out / "factors.csv", rows)


def _experiment(cfg: EvalConfig, out: Path) -> Experiment:
    return prepare_experiment(cfg, ndt_map=read_ndt_map(out / "ndt_map.txt"))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    out = _out(args)
    exp = _experiment(cfg, out)
    write_ground_truth(out / "ground_truth.csv", [exp.ground_truth[i] for i in range(len(exp.trajectory))])
    reports = sweep_ranges(exp, with_factors=False)
    emit_report(reports, out, "csv", cfg.timing_mode)
    if exp.excluded_ids:
        log.warning("waypoints without ground truth: %s", exp.excluded_ids)


def _dataset(out: Path):
    factors = {(w, fv.range): fv for w, fv in read_factors_csv(out / "factors.csv")}
    reports = read_sweep(out)
    for rep in reports:
        rep.factors = [factors[(rep.waypoint_id, r)] for r in rep.ranges]
    return build_dataset(reports)


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out(args)
    data, dropped = _dataset(out)
    if dropped:
        log.warning("%d rows with flagged targets left out of training", dropped)
    write_holdout(out / "holdout.csv", holdout_evaluation(data, cfg.candidate_ranges, cfg))
    (out / "models").mkdir(exist_ok=True)
    for r, m in train_models(data, cfg.candidate_ranges, cfg.forest).items():
        save_model(out / "models" / model_filename(r), m)


def cmd_plan(args) -> None:
    cfg = _config(args)
    out = _out(args)
    m = read_ndt_map(out / "ndt_map.txt")
    traj = read_trajectory_csv(out / "trajectory.csv")
    models = {r: load_model(out / "models" / model_filename(r)) for r in cfg.candidate_ranges}
    factors = None
    if (out / "factors.csv").exists():
        factors = {(w, fv.range): fv for w, fv in read_factors_csv(out / "factors.csv")}
    profile = build_range_profile(models, m, traj, cfg.threshold_cm, cfg.candidate_ranges, cfg.factors, factors)
    write_profile_csv(out / "profile.csv", profile)


def cmd_compare(args) -> None:
    cfg = _config(args)
    out = _out(args)
    exp = _experiment(cfg, out)
    stored = read_ground_truth(out / "ground_truth.csv") if (out / "ground_truth.csv").exists() else None
    if stored is not None:
        exp.ground_truth.update(stored)
    report = run_dynamic_comparison(exp, read_profile_csv(out / "profile.csv"))
    emit_comparison(report, out, cfg.timing_mode)
    d, s = report.dynamic, report.static
    print(f"dynamic: {d['mean_time_ms']:.2f} ms, {d['mean_error_cm']:.2f} cm, "
          f"{d['pct_within_threshold']:.1f}% within {report.threshold_cm:g} cm")
    print(f"static:  {s['mean_time_ms']:.2f} ms, {s['mean_error_cm']:.2f} cm, "
          f"{s['pct_within_threshold']:.1f}% within {report.threshold_cm:g} cm")


def cmd_report(args) -> None:
    cfg = _config(args)
    out = _out(args)
    reports = read_sweep(out)
    emit_report(reports, out, "plotdata", cfg.timing_mode)
    s = route_summary(reports)
    print("range_m  mean_error_cm  mean_time_ms  max_time_ms")
    for j, r in enumerate(s["range"]):
        print(f"{r:7g}  {s['mean_error_cm'][j]:13.2f}  {s['mean_time_ms'][j]:12.2f}  {s['max_time_ms'][j]:11.2f}")


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    res = run_pipeline(cfg, _out(args))
    d, s = res.comparison.dynamic, res.comparison.static
    print(f"dynamic {d['mean_time_ms']:.2f} ms vs static {s['mean_time_ms']:.2f} ms; "
          f"{d['pct_within_threshold']:.1f}% of waypoints within {cfg.threshold_cm:g} cm")


COMMANDS = {
    "scene": (cmd_scene, "generate the scene cloud and trajectory"),
    "build-map": (cmd_build_map, "build the NDT map from the scene cloud"),
    "factors": (cmd_factors, "map factors per waypoint and range"),
    "sweep": (cmd_sweep, "ground truth plus offset evaluation at every range"),
    "train": (cmd_train, "one random forest per range, with a holdout check"),
    "plan": (cmd_plan, "range profile for the error threshold"),
    "compare": (cmd_compare, "dynamic profile against the static maximum range"),
    "report": (cmd_report, "route summary and long-format plot data"),
    "pipeline": (cmd_pipeline, "all stages in one go"),
}


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommand copies use SUPPRESS so they do not reset flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="YAML config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--out-dir", default=d("ndtrange_out"), help="working directory for all files")
    p.add_argument("--timing-mode", choices=TIMING_MODES, default=d(None), help="serial (default) or parallel")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndtrange", description="Dynamic observation ranges for NDT localization.")
    _add_common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        _add_common(sub.add_parser(name, help=help_text), suppress=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except (OSError, ValueError) as exc:
        print(f"ndtrange {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
