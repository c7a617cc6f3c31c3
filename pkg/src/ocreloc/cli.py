"""``ocreloc`` command line: gen, build-map, localize, evaluate.

Exit codes: 0 success, 2 configuration, 3 ingestion, 4 localization
precondition, 5 evaluation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import RunConfig, add_config_flags, config_from_args, dump_config
from .errors import (
    ConfigError,
    DescriptorError,
    EmptyMapError,
    EvaluationError,
    IngestError,
    MapFormatError,
)
from .evaluation import INDOOR_THRESHOLDS, OUTDOOR_THRESHOLDS, evaluate, parse_thresholds
from .io import (
    ingest_colmap_text,
    load_map,
    read_poses,
    read_query,
    read_query_list,
    save_map,
    write_colmap_text,
    write_features,
    write_poses,
    write_query_list,
)
from .mapping import build_map

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_LOCALIZE, EXIT_EVAL = 0, 2, 3, 4, 5

log = logging.getLogger("ocreloc")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _sidecar(root: Path, name: str) -> Path:
    return root / f"{name}.ocfeat"


# --- gen -----------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out: Path) -> None:
    from .io import format_pose_line
    from .synthetic import add_noise, generate_scene

    scene = add_noise(generate_scene(cfg.scene), cfg.noise)
    out.mkdir(parents=True, exist_ok=True)
    write_colmap_text(out / "sfm", scene.db_images, scene.tracks, scene.landmarks_xyz)
    for im in scene.db_images:
        p = _sidecar(out / "features", im.name)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_features(p, im)
    qdir = out / "queries"
    qdir.mkdir(parents=True, exist_ok=True)
    for q in scene.queries:
        p = _sidecar(qdir, q.name)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_features(p, q)
    write_query_list(qdir / "list.txt", [(q.name, q.camera) for q in scene.queries])
    with open(out / "gt_poses.txt", "w") as f:
        for name in sorted(scene.query_gt):
            f.write(format_pose_line(name, scene.query_gt[name]) + "\n")
    save_map(scene.gt_map, out / "gt_map.ocmap")
    (out / "config.toml").write_text(dump_config(cfg))
    log.info("wrote %d db images, %d landmarks, %d queries to %s",
             len(scene.db_images), len(scene.tracks), len(scene.queries), out)


# --- build-map -----------------------------------------------------------------

def _resolve_input(inp: Path, features: Optional[Path]):
    if (inp / "sfm").is_dir():
        sfm = inp / "sfm"
        if features is None and (inp / "features").is_dir():
            features = inp / "features"
    else:
        sfm = inp
    return sfm, features


def cmd_build_map(cfg: RunConfig, inp: Path, out: Path, features: Optional[Path]) -> dict:
    sfm, feats = _resolve_input(inp, features)
    images, tracks = ingest_colmap_text(sfm, feats)
    m = build_map(images, tracks, cfg.map)
    save_map(m, out)
    s = m.build_stats
    stats = {
        "images": len(images),
        "tracks": len(tracks),
        "kept": s.kept,
        "dropped": s.total_dropped,
        "dropped_by_reason": dict(sorted(s.dropped.items())),
        "mean_reproj_err_px": s.mean_reproj_err,
    }
    return stats


# --- localize ------------------------------------------------------------------

_WORKER: dict = {}


def _worker_init(map_path: str, cfg: RunConfig) -> None:
    from .retrieval import GlobalIndex

    m = load_map(map_path)
    _WORKER.update(map=m, index=GlobalIndex(m), cfg=cfg.localizer())


def _worker_run(query):
    from .pipeline import localize_query

    r = localize_query(query, _WORKER["map"], _WORKER["cfg"], _WORKER["index"])
    return r.name, (r.estimate.pose if r.estimate is not None else r.failure), r.log_record()


def load_queries(qdir: Path, m=None):
    entries = read_query_list(qdir / "list.txt")
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise IngestError("duplicate query names", qdir / "list.txt")
    queries = []
    for i, (name, cam) in enumerate(sorted(entries, key=lambda e: e[0])):
        queries.append(read_query(_sidecar(qdir, name), name, cam, image_id=-(i + 1)))
    return queries


def cmd_localize(cfg: RunConfig, map_path: Path, qdir: Path, out: Path, log_path: Path) -> dict:
    from .pipeline import check_compatible

    m = load_map(map_path)
    queries = load_queries(qdir)
    for q in queries:
        check_compatible(q, m)
    workers = cfg.run.workers
    results = []
    if workers == 1:
        _worker_init(str(map_path), cfg)
        for i, q in enumerate(queries, 1):
            results.append(_worker_run(q))
            log.info("localized %d/%d", i, len(queries))
    else:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(str(map_path), cfg)) as ex:
            for i, r in enumerate(ex.map(_worker_run, queries, chunksize=1), 1):
                results.append(r)
                log.info("localized %d/%d", i, len(queries))
    results.sort(key=lambda r: r[0])
    write_poses(out, {name: pose for name, pose, _ in results})
    with open(log_path, "w") as f:
        for _, _, rec in results:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    failed = sum(1 for _, p, _ in results if isinstance(p, str) or p is None)
    return {"queries": len(results), "failed": failed}


# --- evaluate ------------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig, poses: Path, gt: Path, report_dir: Optional[Path]):
    if cfg.evaluate.thresholds:
        th = parse_thresholds(cfg.evaluate.thresholds)
    else:
        th = OUTDOOR_THRESHOLDS if cfg.evaluate.preset == "outdoor" else INDOOR_THRESHOLDS
    try:
        est = read_poses(poses)
        truth = read_poses(gt)
    except IngestError as exc:
        raise EvaluationError(str(exc)) from None
    missing_gt = [n for n, p in truth.items() if p is None]
    if missing_gt:
        raise EvaluationError(f"{gt}: ground truth for {missing_gt[0]} is a failure line")
    report = evaluate(est, truth, th)
    if report_dir is not None:
        write_report(report, report_dir)
    return report


def write_report(report, report_dir: Path) -> None:
    from .plotting import plot_error_cdf

    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "errors.tsv", "w") as f:
        f.write("name\ttrans_m\trot_deg\tstatus\n")
        for n, t, r in zip(report.names, report.trans_err.tolist(), report.rot_err.tolist()):
            status = "ok" if t != float("inf") else "failed"
            f.write(f"{n}\t{t!r}\t{r!r}\t{status}\n")
    (report_dir / "summary.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    plot_error_cdf(report, report_dir / "error_cdf.png")


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.HelpFormatter
    p = _Parser(prog="ocreloc", description="Observation-constrained visual re-localization.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, sections):
        sp.add_argument("--config", type=Path, default=None, help="TOML configuration file")
        sp.add_argument("--log-level", default=None, help="logging level (default: from [run] log_level, INFO)")
        add_config_flags(sp, sections)

    g = sub.add_parser("gen", help="generate a synthetic scene", formatter_class=fmt)
    g.add_argument("out", type=Path, help="output directory")
    common(g, ("scene", "noise"))

    b = sub.add_parser("build-map", help="triangulate an SFM text model into a map file", formatter_class=fmt)
    b.add_argument("input", type=Path, help="scene directory (sfm/ + features/) or SFM text model directory")
    b.add_argument("out", type=Path, help="output map file")
    b.add_argument("--features", type=Path, default=None, help="feature sidecar directory")
    common(b, ("map",))

    lo = sub.add_parser("localize", help="localize queries against a map", formatter_class=fmt)
    lo.add_argument("map", type=Path, help="map file")
    lo.add_argument("queries", type=Path, help="query directory with list.txt and sidecars")
    lo.add_argument("out", type=Path, help="output pose file")
    lo.add_argument("--log", type=Path, default=None, help="JSON-lines log (default: <out>.jsonl)")
    lo.add_argument("--workers", type=int, default=None, help="worker processes (default: from [run] workers, 1)")
    common(lo, ("retrieval", "match", "pnp", "refine", "run"))

    e = sub.add_parser("evaluate", help="score a pose file against ground truth", formatter_class=fmt)
    e.add_argument("poses", type=Path, help="estimated pose file")
    e.add_argument("ground_truth", type=Path, help="ground-truth pose file")
    e.add_argument("--json", action="store_true", help="print a JSON summary instead of text")
    e.add_argument("--report-dir", type=Path, default=None, help="write errors.tsv, summary.json and error_cdf.png here")
    common(e, ("evaluate",))
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args, args.config)
        if getattr(args, "workers", None) is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.run.workers = args.workers
    except ConfigError as exc:
        print(f"ocreloc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = args.log_level or cfg.run.log_level
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args, cfg)
    except CliError as exc:
        print(f"ocreloc: {exc}", file=sys.stderr)
        return exc.code


def _dispatch(args, cfg: RunConfig) -> int:
    cmd = args.command
    try:
        if cmd == "gen":
            try:
                cmd_gen(cfg, args.out)
            except OSError as exc:
                raise CliError(EXIT_CONFIG, f"cannot write scene: {exc}") from None
            return EXIT_OK
        if cmd == "build-map":
            try:
                stats = cmd_build_map(cfg, args.input, args.out, args.features)
            except (IngestError, EmptyMapError, OSError) as exc:
                raise CliError(EXIT_INGEST, f"ingestion error: {exc}") from None
            print(f"kept {stats['kept']} landmarks, dropped {stats['dropped']} "
                  f"{stats['dropped_by_reason']}, mean reprojection error {stats['mean_reproj_err_px']:.4g} px")
            return EXIT_OK
        if cmd == "localize":
            log_path = args.log or args.out.with_name(args.out.name + ".jsonl")
            try:
                summary = cmd_localize(cfg, args.map, args.queries, args.out, log_path)
            except (IngestError, MapFormatError, OSError) as exc:
                raise CliError(EXIT_INGEST, f"ingestion error: {exc}") from None
            except DescriptorError as exc:
                raise CliError(EXIT_LOCALIZE, f"localization precondition failed: {exc}") from None
            print(f"localized {summary['queries'] - summary['failed']}/{summary['queries']} queries")
            return EXIT_OK
        if cmd == "evaluate":
            try:
                report = cmd_evaluate(cfg, args.poses, args.ground_truth, args.report_dir)
            except (EvaluationError, OSError) as exc:
                raise CliError(EXIT_EVAL, f"evaluation error: {exc}") from None
            if args.json:
                print(json.dumps(report.to_dict(), sort_keys=True))
            else:
                print(report.formatted())
                print(f"median error {report.median_trans:.6g} m, {report.median_rot:.6g} deg "
                      f"({report.num_queries} queries, {report.num_failed} failed)")
            return EXIT_OK
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    raise CliError(EXIT_CONFIG, f"unknown command {cmd}")


if __name__ == "__main__":
    sys.exit(main())
