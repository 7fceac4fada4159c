"""Command-line harness: simulate, run-session, run-campaign, evaluate, inspect-map.

Exit codes: 0 success, 1 runtime/solver failure, 2 usage or configuration
error.  ``OBVI_LOG`` selects the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import kernels
from .config import (
    ConfigError,
    ScenarioConfig,
    load_config,
    pipeline_config_from_dict,
    resolved_estimator_json,
    scenario_config_from_dict,
)
from .evalmetrics import (
    align_trajectory,
    compute_ate,
    object_metrics,
    waypoint_consistency,
    write_cdf_csv,
    write_metrics_csv,
    write_summary_json,
)
from .geometry import Ellipsoid, Pose
from .ltm import LongTermMap, LtmParseError, deserialize, serialize
from .pipeline import PipelineConfig, run_session
from .simworld import (
    generate_campaign,
    generate_session,
    generate_world,
    read_log,
    session_spec_from_json,
    session_spec_to_json,
    world_from_json,
    world_to_json,
    write_log,
)

log = logging.getLogger("obvi.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pose_json(p: Pose) -> dict:
    return {"t": [float(x) for x in p.translation], "q": [float(x) for x in p.rotation]}


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["t"]), np.array(d["q"]))


def write_trajectory(path: Path, session_index: int, poses) -> None:
    doc = {"session_index": session_index, "poses": [_pose_json(p) for p in poses]}
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_trajectory(path: Path):
    doc = json.loads(Path(path).read_text())
    return int(doc["session_index"]), [_pose_from_json(p) for p in doc["poses"]]


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    doc = load_config(args.config) if args.config else {}
    scen = scenario_config_from_dict(doc)
    seed = args.seed if args.seed is not None else scen.seed
    out = Path(args.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)

    world = generate_world(scen.world, seed, scen.classes)
    specs = generate_campaign(world, scen.campaign, seed)
    (out / "world.json").write_text(json.dumps(world_to_json(world), sort_keys=True))
    (out / "campaign.json").write_text(
        json.dumps({"seed": seed, "sessions": [session_spec_to_json(s) for s in specs]},
                   sort_keys=True)
    )
    n_frames = 0
    n_det = 0
    for spec in specs:
        sess = generate_session(world, spec)
        write_log(sess, out / "logs" / f"session_{spec.index:02d}.jsonl")
        n_frames += len(sess)
        n_det += sum(len(f.detections) for f in sess.frames())
    print(f"world: {len(world.objects)} objects, {world.features.shape[0]} features, "
          f"{len(world.waypoints)} waypoints")
    print(f"campaign: {len(specs)} sessions, {n_frames} frames, {n_det} detections")
    print(f"scenario written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run-session / run-campaign
# ---------------------------------------------------------------------------


def _load_classes_for_run(args, scenario_dir: Path = None):
    if scenario_dir is not None and (scenario_dir / "world.json").exists():
        doc = json.loads((scenario_dir / "world.json").read_text())
        from .simworld import ClassSpec

        return {
            name: ClassSpec(tuple(c["mean_dimensions"]), tuple(c["dim_variances"]),
                            float(c["match_radius"]))
            for name, c in doc["classes"].items()
        }
    raise CliError("class catalog unavailable: world.json not found", EXIT_USAGE)


def _estimator_config(args) -> PipelineConfig:
    doc = load_config(args.config) if args.config else {}
    cfg = pipeline_config_from_dict(doc)
    if getattr(args, "mode", None):
        import dataclasses

        cfg = dataclasses.replace(cfg, mode=args.mode)
    return cfg


def _run_one_session(log_path: Path, cfg: PipelineConfig, classes, ltm_in_path,
                     out: Path):
    obs_log = read_log(log_path)
    ltm_in = None
    if ltm_in_path is not None:
        ltm_in = deserialize(Path(ltm_in_path).read_bytes())
    result = run_session(obs_log, cfg, classes, ltm_in)
    i = obs_log.session_index
    traj = out / f"trajectory_{i:02d}.json"
    ltm_path = out / f"ltm_{i:02d}.json"
    report = out / f"report_{i:02d}.json"
    try:
        write_trajectory(traj, i, result.trajectory)
        ltm_path.write_bytes(serialize(result.ltm))
        report.write_text(json.dumps(result.report, sort_keys=True, indent=2) + "\n")
    except Exception:
        for p in (traj, ltm_path, report):
            p.unlink(missing_ok=True)
        raise
    return result, traj, ltm_path, report


def cmd_run_session(args) -> int:
    log_path = Path(args.log)
    if not log_path.exists():
        raise CliError(f"observation log not found: {log_path}", EXIT_USAGE)
    cfg = _estimator_config(args)
    classes = _load_classes_for_run(args, log_path.parent.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, traj, ltm_path, report = _run_one_session(
        log_path, cfg, classes, args.ltm_in, out
    )
    print(f"session {result.session_index}: {result.report['n_frames']} frames, "
          f"{result.report['n_objects']} objects, "
          f"{result.report['wall_time_s']:.1f} s")
    print(f"trajectory: {traj}")
    print(f"long-term map: {ltm_path}")
    return EXIT_OK


def cmd_run_campaign(args) -> int:
    scenario = Path(args.scenario)
    campaign_doc = scenario / "campaign.json"
    if not campaign_doc.exists():
        raise CliError(f"not a scenario directory (no campaign.json): {scenario}",
                       EXIT_USAGE)
    sessions = [session_spec_from_json(s)
                for s in json.loads(campaign_doc.read_text())["sessions"]]
    cfg = _estimator_config(args)
    classes = _load_classes_for_run(args, scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    use_ltm = not args.no_ltm

    manifest_path = out / "manifest.json"
    manifest = {
        "version": 1,
        "use_ltm": use_ltm,
        "kernels": kernels.IMPLEMENTATION,
        "config_hash": hashlib.sha256(
            resolved_estimator_json(cfg).encode()).hexdigest(),
        "scenario_hashes": {
            "world.json": _sha256(scenario / "world.json"),
            "campaign.json": _sha256(campaign_doc),
        },
        "sessions": [],
    }
    completed = {}
    if manifest_path.exists() and args.resume:
        old = json.loads(manifest_path.read_text())
        if (old.get("config_hash") == manifest["config_hash"]
                and old.get("use_ltm") == use_ltm
                and old.get("scenario_hashes") == manifest["scenario_hashes"]):
            for s in old.get("sessions", []):
                ok = all(
                    (out / s["artifacts"][k]).exists()
                    and _sha256(out / s["artifacts"][k]) == s["sha256"][k]
                    for k in ("trajectory", "ltm")
                )
                if ok:
                    completed[s["index"]] = s
        if completed:
            log.info("resuming: sessions %s already complete", sorted(completed))

    prev_ltm_path = None
    for spec in sessions:
        log_path = scenario / "logs" / f"session_{spec.index:02d}.jsonl"
        if not log_path.exists():
            raise CliError(f"missing observation log {log_path}", EXIT_USAGE)
        manifest["scenario_hashes"][f"logs/session_{spec.index:02d}.jsonl"] = \
            _sha256(log_path)
        if spec.index in completed:
            entry = completed[spec.index]
            manifest["sessions"].append(entry)
            if use_ltm:
                prev_ltm_path = out / entry["artifacts"]["ltm"]
            print(f"session {spec.index}: already complete, skipped")
            continue
        t0 = time.perf_counter()
        try:
            result, traj, ltm_path, report = _run_one_session(
                log_path, cfg, classes, prev_ltm_path if use_ltm else None, out
            )
        except Exception as e:
            _write_manifest(manifest_path, manifest)
            raise CliError(f"session {spec.index} failed: {e}") from e
        entry = {
            "index": spec.index,
            "log": str(log_path.relative_to(scenario)),
            "artifacts": {
                "trajectory": traj.name,
                "ltm": ltm_path.name,
                "report": report.name,
            },
            "sha256": {"trajectory": _sha256(traj), "ltm": _sha256(ltm_path)},
            "wall_time_s": time.perf_counter() - t0,
        }
        manifest["sessions"].append(entry)
        _write_manifest(manifest_path, manifest)
        if use_ltm:
            prev_ltm_path = ltm_path
        print(f"session {spec.index}: done in {entry['wall_time_s']:.1f} s "
              f"({result.report['n_objects']} objects)")
    _write_manifest(manifest_path, manifest)
    print(f"campaign complete: {len(manifest['sessions'])} sessions in {out}")
    return EXIT_OK


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    campaign_dir = Path(args.campaign)
    scenario_dir = Path(args.scenario)
    out = Path(args.out) if args.out else campaign_dir / "eval"
    manifest_path = campaign_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"no manifest in {campaign_dir}", EXIT_USAGE)
    manifest = json.loads(manifest_path.read_text())

    # tamper detection: every recorded artifact must hash as the manifest says
    missing = []
    for s in manifest["sessions"]:
        for kind in ("trajectory", "ltm"):
            p = campaign_dir / s["artifacts"][kind]
            if not p.exists():
                missing.append(str(p))
            elif _sha256(p) != s["sha256"][kind]:
                raise CliError(
                    f"manifest hash mismatch for {p}; refusing to evaluate", EXIT_USAGE
                )
    for rel, digest in manifest["scenario_hashes"].items():
        p = scenario_dir / rel
        if not p.exists():
            missing.append(str(p))
        elif _sha256(p) != digest:
            raise CliError(
                f"scenario file {p} changed since the campaign ran", EXIT_USAGE
            )
    if missing:
        raise CliError("missing artifacts: " + ", ".join(missing), EXIT_USAGE)

    world = world_from_json(json.loads((scenario_dir / "world.json").read_text()))
    gt_objects = [(o.semantic_class, o.ellipsoid) for o in world.objects]
    radius = {name: spec.match_radius for name, spec in world.classes.items()}

    rows = []
    summary = {"sessions": {}, "kernels": manifest.get("kernels"),
               "use_ltm": manifest.get("use_ltm")}
    visits = {}
    for s in manifest["sessions"]:
        idx = s["index"]
        obs_log = read_log(scenario_dir / s["log"])
        _, est = read_trajectory(campaign_dir / s["artifacts"]["trajectory"])
        ref = [obs_log.truth_pose(t) for t in range(len(obs_log))]
        if len(est) != len(ref):
            raise CliError(f"session {idx}: trajectory length mismatch")
        T = align_trajectory(est, ref)
        ate = compute_ate(est, ref, T)
        ltm = deserialize((campaign_dir / s["artifacts"]["ltm"]).read_bytes())
        est_objects = [
            (e.semantic_class, Ellipsoid.from_vector(e.mu, ltm.mode))
            for e in ltm.entries
        ]
        om = object_metrics(est_objects, gt_objects, radius)
        map_bytes = len(zlib.compress(
            (campaign_dir / s["artifacts"]["ltm"]).read_bytes(), 6))
        rows += [
            {"session": idx, "metric": "translation_ate_rmse_m", "value": ate.translation_ate_rmse},
            {"session": idx, "metric": "translation_ate_mean_m", "value": ate.translation_ate_mean},
            {"session": idx, "metric": "orientation_ate_deg", "value": ate.orientation_ate_deg},
            {"session": idx, "metric": "object_center_error_median_m", "value": om.center_error_quartiles[1]},
            {"session": idx, "metric": "object_iou_median", "value": om.iou_quartiles[1]},
            {"session": idx, "metric": "estimated_per_gt", "value": om.estimated_per_gt},
            {"session": idx, "metric": "recall", "value": om.recall},
            {"session": idx, "metric": "compressed_map_bytes", "value": map_bytes},
        ]
        summary["sessions"][str(idx)] = {
            "translation_ate_rmse_m": ate.translation_ate_rmse,
            "translation_ate_mean_m": ate.translation_ate_mean,
            "orientation_ate_deg": ate.orientation_ate_deg,
            "object_center_error_quartiles_m": list(om.center_error_quartiles),
            "object_iou_quartiles": list(om.iou_quartiles),
            "estimated_per_gt": om.estimated_per_gt,
            "recall": om.recall,
            "n_map_objects": len(ltm.entries),
            "compressed_map_bytes": map_bytes,
        }
        for wid, frame in obs_log.waypoint_visits:
            visits.setdefault(wid, []).append((f"session_{idx}", est[frame]))

    deviations, pos_cdf, ori_cdf = waypoint_consistency(visits)
    summary["waypoint_consistency"] = {
        "n_deviations": len(deviations),
        "position_dev_median_m": float(np.median([d.position_dev for d in deviations]))
        if deviations else None,
        "position_dev_max_m": float(max(d.position_dev for d in deviations))
        if deviations else None,
        "orientation_dev_median_deg": float(
            np.median([d.orientation_dev_deg for d in deviations]))
        if deviations else None,
        "per_visit": [
            {"waypoint": d.waypoint_id, "label": d.label,
             "position_dev_m": d.position_dev,
             "orientation_dev_deg": d.orientation_dev_deg}
            for d in deviations
        ],
    }

    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    write_summary_json(out / "summary.json", summary)
    if len(pos_cdf):
        write_cdf_csv(out / "cdf_position.csv", pos_cdf)
        write_cdf_csv(out / "cdf_orientation.csv", ori_cdf)
    n = len(manifest["sessions"])
    print(f"evaluated {n} sessions -> {out}")
    if deviations:
        print(f"waypoint position deviation median "
              f"{summary['waypoint_consistency']['position_dev_median_m']:.3f} m, "
              f"max {summary['waypoint_consistency']['position_dev_max_m']:.3f} m")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect-map
# ---------------------------------------------------------------------------


def cmd_inspect_map(args) -> int:
    path = Path(args.map)
    if not path.exists():
        raise CliError(f"map file not found: {path}", EXIT_USAGE)
    ltm = deserialize(path.read_bytes())
    print(f"long-term map: session {ltm.session_index}, mode {ltm.mode}, "
          f"{len(ltm.entries)} objects")
    for e in ltm.entries:
        pos = ", ".join(f"{x:8.3f}" for x in e.mu[:3])
        print(f"  id {e.object_id:4d}  {e.semantic_class:10s} pos [{pos}] "
              f"cov trace {float(np.trace(e.sigma)):10.4g}  obs {e.obs_count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="obvi",
        description="Object-visual SLAM with long-term object maps: synthetic "
                    "multi-session simulation, estimation, and evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    sim.add_argument("--config", help="scenario config JSON")
    sim.add_argument("--out", required=True, help="output scenario directory")
    sim.add_argument("--seed", type=int, help="override the config seed")
    sim.set_defaults(func=cmd_simulate)

    rs = sub.add_parser("run-session", help="run SLAM on one observation log")
    rs.add_argument("log", help="observation log (.jsonl)")
    rs.add_argument("--ltm-in", help="long-term map from the previous session")
    rs.add_argument("--config", help="estimator config JSON")
    rs.add_argument("--out", required=True, help="output directory")
    rs.add_argument("--mode", choices=["upright", "full"], help="object parameterization")
    rs.add_argument("--seed", type=int, help="accepted for interface parity (estimation is deterministic)")
    rs.set_defaults(func=cmd_run_session)

    rc = sub.add_parser("run-campaign", help="run all sessions, chaining maps")
    rc.add_argument("scenario", help="scenario directory from `obvi simulate`")
    rc.add_argument("--config", help="estimator config JSON")
    rc.add_argument("--out", required=True, help="output campaign directory")
    rc.add_argument("--mode", choices=["upright", "full"])
    rc.add_argument("--no-ltm", action="store_true",
                    help="do not hand the long-term map between sessions")
    rc.add_argument("--no-resume", dest="resume", action="store_false",
                    help="re-run sessions even if the manifest marks them complete")
    rc.set_defaults(func=cmd_run_campaign, resume=True)

    ev = sub.add_parser("evaluate", help="compute metrics for a finished campaign")
    ev.add_argument("campaign", help="campaign directory")
    ev.add_argument("scenario", help="scenario directory")
    ev.add_argument("--out", help="metrics output directory (default: <campaign>/eval)")
    ev.set_defaults(func=cmd_evaluate)

    im = sub.add_parser("inspect-map", help="print a long-term map")
    im.add_argument("map", help="map file (ltm_XX.json)")
    im.set_defaults(func=cmd_inspect_map)
    return p


def main(argv=None) -> int:
    level = os.environ.get("OBVI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except LtmParseError as e:
        print(f"map parse error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # solver failures and other runtime errors
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
