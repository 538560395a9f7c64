"""Command-line pipeline.

Every stage reads the previous stage's files from the output directory and
writes its own, so ``all`` is exactly the stage subcommands run in order::

    georef     tracks, gcps, map, [flight log, rulers] -> traj_georef.csv,
               calibration.txt, map_local.geojson
    smooth     traj_georef.csv -> traj_smooth.csv
    filter     traj_smooth.csv -> traj_filtered.csv, filter_report.csv
    conflicts  traj_filtered.csv -> conflict.csv
    match      traj_filtered.csv, signals -> route.csv, violation.csv
    metrics    all of the above -> traj.csv, heatmap_<kind>.csv,
               cycle_rates.csv, metrics.txt, manifest.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .conflicts import detect_conflicts, read_conflicts, write_conflicts
from .dedup import run_filters, write_filter_report
from .georef import (CameraModel, build_local_frame, fit_homography,
                     georeference_table, map_to_local, refine_distortion, write_calibration)
from .ingest import (parse_flight_log, parse_gcps, parse_map, parse_rulers, parse_signals,
                     parse_tracks, write_map)
from .kinematics import refine_trajectory
from .matching import (match_all, per_cycle_violation_rate, read_routes, read_violations,
                       write_routes, write_violations)
from .metrics import ExportBundle, export_all, grid_extent, scene_metrics
from .tables import read_traj_csv, write_traj_csv

log = logging.getLogger("trajfuse")

STAGES = ("georef", "smooth", "filter", "conflicts", "match", "metrics")

# file -> stage that writes it
PRODUCER = {
    "traj_georef.csv": "georef", "calibration.txt": "georef", "map_local.geojson": "georef",
    "traj_smooth.csv": "smooth", "traj_filtered.csv": "filter", "filter_report.csv": "filter",
    "conflict.csv": "conflicts", "route.csv": "match", "violation.csv": "match",
}


class StageError(RuntimeError):
    pass


class StrictHandler(logging.Handler):
    """Turns warnings into errors under ``--strict``."""

    def __init__(self):
        super().__init__(logging.WARNING)

    def emit(self, record):
        raise StageError(f"strict mode: {record.getMessage()}")


def _require(out: Path, *names) -> list[Path]:
    paths = []
    for name in names:
        p = out / name
        if not p.exists():
            raise StageError(f"missing prior-stage artifact {p} "
                             f"(produced by the '{PRODUCER.get(name, '?')}' stage)")
        paths.append(p)
    return paths


def _input(cfg: PipelineConfig, name: str, required: bool = True) -> Path | None:
    p = cfg.path(name)
    if p is None:
        if required:
            raise StageError(f"paths.{name} is not configured")
        return None
    if not p.exists():
        raise StageError(f"input file not found: {p} (paths.{name})")
    return p


@contextmanager
def _executor(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def _load_table(cfg, path):
    return read_traj_csv(path, cfg.frame_rate_hz, cfg.scene_id)


def _load_map(out: Path):
    (p,) = _require(out, "map_local.geojson")
    return parse_map(p)


def _load_signals(cfg: PipelineConfig):
    p = _input(cfg, "signals", required=False)
    if p is None:
        return None
    return parse_signals(p, cfg.signal.clock_offset_s, cfg.signal.reference_movement)


# --- stages ---------------------------------------------------------------------

def stage_georef(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    tracks = parse_tracks(_input(cfg, "tracks"), frame_rate_hz=cfg.frame_rate_hz,
                          scene_id=cfg.scene_id, strict=strict)
    rep = tracks.parse_report
    for line, reason in rep.rejected:
        log.warning("tracks: line %d rejected: %s", line, reason)
    gcps = parse_gcps(_input(cfg, "gcps"))
    imap = parse_map(_input(cfg, "map"))
    if imap.crs == "local":
        raise StageError("map in crs 'local' cannot anchor the local frame; use wgs84 or pixel")
    cc = cfg.camera
    altitude = cc.altitude_m
    flight = _input(cfg, "flight_log", required=False)
    if altitude is None and flight is not None:
        altitude = parse_flight_log(flight).median_altitude_m
    cam = CameraModel(cc.fx, cc.fy, cc.cx, cc.cy, cc.dist, None, altitude, cc.width_px, cc.height_px)
    rulers = _input(cfg, "rulers", required=False)
    if rulers is not None and cc.refine_distortion:
        cam = refine_distortion(cam, parse_rulers(rulers))
        log.info("georef: refined distortion %s", " ".join(f"{c:.6g}" for c in cam.dist))
    h = fit_homography(gcps, cam)
    frame = build_local_frame(imap, h)
    table = georeference_table(tracks, cam, h, frame, ex)
    write_traj_csv(table, out / "traj_georef.csv")
    write_calibration(out / "calibration.txt", cam, h, frame)
    write_map(map_to_local(imap, frame, h), out / "map_local.geojson")
    log.info("georef: %d rows in, %d accepted, %d tracks, GCP rms %.4f m",
             rep.rows_in, rep.rows_accepted, len(table), h.rms_residual_m)


def stage_smooth(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    (src,) = _require(out, "traj_georef.csv")
    table = _load_table(cfg, src)
    trajs = table.sorted()

    def run(t):
        return refine_trajectory(t, cfg.smoother, cfg.refine)

    results = [run(t) for t in trajs] if ex is None else list(ex.map(run, trajs))
    next_id = max((t.track_id for t in trajs), default=0) + 1
    pieces = []
    for orig, res in zip(trajs, results):
        for k, p in enumerate(res):
            if k > 0:
                log.info("smooth: track %d split at frame %d, new id %d",
                         orig.track_id, int(p.frame[0]), next_id)
                p = p.replace(track_id=next_id)
                next_id += 1
            pieces.append(p)
    smoothed = table.with_trajectories(pieces)
    write_traj_csv(smoothed, out / "traj_smooth.csv")
    n_interp = sum(int(t.interpolated.sum()) for t in pieces)
    log.info("smooth: %d tracks in, %d out, %d interpolated states", len(trajs), len(pieces), n_interp)


def stage_filter(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    (src,) = _require(out, "traj_smooth.csv")
    imap = _load_map(out)
    table = _load_table(cfg, src)
    kept, report = run_filters(table, cfg.filter, imap, ex)
    write_traj_csv(kept, out / "traj_filtered.csv")
    write_filter_report(report, out / "filter_report.csv")


def stage_conflicts(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    _, src = _require(out, "traj_smooth.csv", "traj_filtered.csv")
    table = _load_table(cfg, src)
    events = detect_conflicts(table, cfg.conflict, ex)
    write_conflicts(events, out / "conflict.csv", cfg.conflict)


def stage_match(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    (src,) = _require(out, "traj_filtered.csv")
    imap = _load_map(out)
    table = _load_table(cfg, src)
    timeline = _load_signals(cfg)
    routes, violations = match_all(table.sorted(), imap, timeline,
                                   cfg.signal.yellow_is_violation, ex)
    write_routes(routes, out / "route.csv")
    write_violations(violations, out / "violation.csv")


def stage_metrics(cfg: PipelineConfig, out: Path, ex=None, strict=False):
    src, conf, route, viol = _require(out, "traj_filtered.csv", "conflict.csv", "route.csv",
                                      "violation.csv")
    imap = _load_map(out)
    table = _load_table(cfg, src)
    events = read_conflicts(conf, cfg.frame_rate_hz)
    routes = read_routes(route)
    violations = read_violations(viol)
    timeline = _load_signals(cfg)
    rates = []
    if timeline is not None and timeline.cycle_boundaries:
        rates = per_cycle_violation_rate(violations, routes, timeline)
    mc = cfg.metrics
    metrics = scene_metrics(table, events, routes, violations, mc.duration_s,
                            cfg.conflict.assoc_radius_m)
    extent = grid_extent(imap.stop_line_polygon.bounds, mc.cell_size_m, mc.heatmap_margin_m)
    bundle = ExportBundle(table, routes, violations, events, rates, metrics, extent,
                          mc.cell_size_m, cfg.conflict)
    rows = export_all(bundle, out, cfg.config_hash(), cfg.config_version)
    log.info("metrics: %d trajectory rows, %d conflicts, %d violations",
             rows["traj.csv"], rows["conflict.csv"], rows["violation.csv"])


STAGE_FUNCS = {"georef": stage_georef, "smooth": stage_smooth, "filter": stage_filter,
               "conflicts": stage_conflicts, "match": stage_match, "metrics": stage_metrics}


def run(subcommand: str, cfg: PipelineConfig, strict: bool = False) -> Path:
    """Run one stage or ``all``; returns the output directory."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stages = STAGES if subcommand == "all" else (subcommand,)
    with _executor(cfg.threads) as ex:
        for name in stages:
            log.info("stage %s", name)
            STAGE_FUNCS[name](cfg, out, ex, strict)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajfuse", description="Drone trajectory processing pipeline.")
    p.add_argument("subcommand", choices=STAGES + ("all",))
    p.add_argument("--config", required=True, help="pipeline YAML config")
    p.add_argument("--out", help="output directory (overrides paths.out_dir)")
    p.add_argument("--threads", type=int, help="worker threads (overrides config)")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config with all defaults and exit")
    p.add_argument("--strict", action="store_true", help="treat warnings as errors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    strict_handler = None
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = dataclasses.replace(cfg, paths=dataclasses.replace(
                cfg.paths, out_dir=str(Path(args.out).resolve())))
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("threads: must be positive")
            cfg = dataclasses.replace(cfg, threads=args.threads)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        if args.strict:
            strict_handler = StrictHandler()
            logging.getLogger("trajfuse").addHandler(strict_handler)
        out = run(args.subcommand, cfg, args.strict)
        log.info("done: %s", out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if strict_handler is not None:
            logging.getLogger("trajfuse").removeHandler(strict_handler)


if __name__ == "__main__":
    sys.exit(main())
