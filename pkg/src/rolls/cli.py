"""Command-line front end: synth, labelgen, train, finetune, infer, eval, render, bench.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .cloud_io import load_cloud, save_cloud
from .config import ConfigError, RunConfig, load_run_config
from .labels import OccupancyQuerySet, export_height_map_pgm, load_height_map, save_height_map
from .metrics import REPORT_SCHEMA, MetricError, MetricsReport, evaluate, extract_surface
from .occupancy import OccupancyGrid, load_grid, save_grid
from .pipeline import frame_from_labels, make_labels, synthesize_frame
from .synth import NOISE_PRESETS, random_scene

log = logging.getLogger("rolls")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CLOUD_FORMAT = "pcd-ascii"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------------


def _versions() -> dict:
    import matplotlib
    import scipy

    return {"rolls": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


@contextmanager
def _threads(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands that write into a dataset or output directory get their own manifest file
MANIFEST_NAMES = {"labelgen": "labelgen.manifest.json", "infer": "infer.manifest.json",
                  "render": "render.manifest.json"}


def _manifest(out_dir, command, args, cfg: RunConfig, timings: dict, extra: dict | None = None):
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(Path(out_dir) / MANIFEST_NAMES.get(command, "manifest.json"), {
        "command": command, "arguments": argv, "config": cfg.to_dict(), "seed": cfg.seed,
        "versions": _versions(), "timings_s": timings, **(extra or {}),
    })


def _existing(path, flag: str, kind: str = "path") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {kind} {str(p)!r} does not exist")
    return p


def _frame_dirs(data: Path, flag: str = "--data") -> list[Path]:
    dirs = sorted(d for d in data.iterdir() if d.is_dir() and (d / "radar.pcd").exists())
    if not dirs:
        raise UsageError(f"{flag}: no frame directories with radar.pcd under {str(data)!r}")
    return dirs


def _run_dir(args) -> Path:
    out = Path(args.runs) / args.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = {"model.seed": getattr(args, "seed", None), "frames": getattr(args, "frames", None),
                 "noise": getattr(args, "noise", None),
                 "model.lr_stage1": getattr(args, "lr", None) if args.command == "train" else None,
                 "model.lr_stage2": getattr(args, "lr", None) if args.command == "finetune" else None,
                 "model.iterations_stage1": getattr(args, "iterations", None) if args.command == "train" else None,
                 "model.iterations_stage2": getattr(args, "iterations", None) if args.command == "finetune" else None}
    cfg = load_run_config(getattr(args, "config", None), overrides)
    return cfg


def _load_frames(dirs: list[Path], cfg: RunConfig, need_teacher: bool):
    frames = []
    for n, d in enumerate(dirs):
        if not (d / "queries.npz").exists():
            raise UsageError(f"--data: {str(d)!r} has no labels; run `rolls labelgen` first")
        radar = load_cloud(d / "radar.pcd")
        teacher = None
        if need_teacher:
            teacher = load_grid(d / "teacher.occg").labels()
        frames.append(frame_from_labels(
            d.name, radar, OccupancyQuerySet.load(d / "queries.npz"),
            load_height_map(d / "height.hmap"), teacher, cfg.model, n,
        ))
    return frames


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model.grid
    for i in range(cfg.frames):
        scene = random_scene(cfg.seed * 1000 + i, spec)
        f = synthesize_frame(scene, spec, cfg.sensors, cfg.noise, i)
        d = out / f.frame_id
        d.mkdir(exist_ok=True)
        scene.save(d / "scene.json")
        save_cloud(f.lidar, d / "lidar.pcd", CLOUD_FORMAT)
        save_cloud(f.radar, d / "radar.pcd", CLOUD_FORMAT)
        save_grid(f.gt, d / "gt.occg")
        log.info("%s: %d lidar / %d radar points", f.frame_id, len(f.lidar), len(f.radar))
    return {"out": out, "frames": cfg.frames}


def cmd_labelgen(args, cfg: RunConfig) -> dict:
    data = _existing(args.data, "--data")
    dirs = _frame_dirs(data)
    for n, d in enumerate(dirs):
        lidar, radar = load_cloud(d / "lidar.pcd"), load_cloud(d / "radar.pcd")
        queries, hmap, teacher = make_labels(lidar, radar, cfg.model, n)
        queries.save(d / "queries.npz")
        save_height_map(hmap, d / "height.hmap")
        export_height_map_pgm(hmap, d / "height.pgm")
        save_grid(OccupancyGrid.from_labels(cfg.model.grid, teacher), d / "teacher.occg")
    return {"out": data, "frames": len(dirs)}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .render import plot_loss_curve
    from .train import save_model, train_stage1

    data = _existing(args.data, "--data")
    frames = _load_frames(_frame_dirs(data), cfg, need_teacher=False)
    out = _run_dir(args)
    model, history = train_stage1(frames, cfg.model)
    save_model(model, out / "checkpoint.bin", {"stage": 1})
    history.write_csv(out / "losses.csv")
    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    plot_loss_curve(history.rows, renders / "losses.png", "stage-1 loss")
    first, last = history.rows[0]["total"], history.rows[-1]["total"]
    print(f"stage 1: {len(history.rows)} iterations, batch loss {first:.4f} -> {last:.4f}")
    return {"out": out, "final_loss": last}


def cmd_finetune(args, cfg: RunConfig) -> dict:
    from .render import plot_loss_curve
    from .train import finetune_stage2, load_model, save_model

    ckpt = _existing(args.checkpoint, "--checkpoint")
    data = _existing(args.data, "--data")
    model = load_model(ckpt)
    # keep the trained architecture; only the stage-2 schedule comes from the run config
    model.config = dataclasses.replace(
        model.config, lr_stage2=cfg.model.lr_stage2, iterations_stage2=cfg.model.iterations_stage2,
        batch_size_stage2=cfg.model.batch_size_stage2, seed=cfg.model.seed,
    )
    frames = _load_frames(_frame_dirs(data), cfg, need_teacher=True)
    out = _run_dir(args)
    model, history = finetune_stage2(model, frames, model.config)
    save_model(model, out / "checkpoint.bin", {"stage": 2})
    history.write_csv(out / "losses.csv")
    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    plot_loss_curve(history.rows, renders / "losses.png", "stage-2 loss")
    return {"out": out}


def cmd_infer(args, cfg: RunConfig) -> dict:
    from .train import infer_occupancy, load_model

    model = load_model(_existing(args.checkpoint, "--checkpoint"))
    data = _existing(args.data, "--data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in _frame_dirs(data):
        grid = infer_occupancy(model, load_cloud(d / "radar.pcd"))
        save_grid(grid, out / f"{d.name}.occg")
    return {"out": out}


def _aggregate(reports: list[MetricsReport]) -> MetricsReport:
    def mean(key):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    counts = {k: int(sum(r.counts[k] for r in reports)) for k in reports[0].counts}
    counts["frames"] = len(reports)
    return MetricsReport(mean("cd"), mean("nfcd"), mean("l2"), mean("ar"), counts, dict(reports[0].config))


def cmd_eval(args, cfg: RunConfig) -> dict:
    data = _existing(args.data, "--data")
    if args.checkpoint is None and args.pred is None:
        raise UsageError("one of --checkpoint or --pred is required")
    model = None
    if args.checkpoint is not None:
        from .train import load_model

        model = load_model(_existing(args.checkpoint, "--checkpoint"))
    pred_dir = _existing(args.pred, "--pred") if args.pred is not None else None
    out = _run_dir(args)
    per_frame, reports = {}, []
    for d in _frame_dirs(data):
        if model is not None:
            from .train import infer_occupancy

            pred = infer_occupancy(model, load_cloud(d / "radar.pcd"))
        else:
            pred = load_grid(_existing(pred_dir / f"{d.name}.occg", "--pred", "prediction"))
        gt = load_grid(d / "gt.occg")
        lidar = load_cloud(d / "lidar.pcd")
        rep = evaluate(pred, extract_surface(gt).points, lidar.points, lidar.sensor_origin,
                       args.near_field, args.threshold)
        reports.append(rep)
        per_frame[d.name] = rep.to_dict()
    report = _aggregate(reports)
    _validate_report(report.to_dict())
    (out / "metrics.json").write_text(report.to_json() + "\n")
    _write_json(out / "metrics_per_frame.json", per_frame)
    print(report.table(args.name))
    print(report.to_json())
    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    from .render import plot_metrics

    plot_metrics({args.name: report.to_dict()}, renders / "metrics.png")
    return {"out": out, "metrics": report.to_dict()}


def _validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def cmd_render(args, cfg: RunConfig) -> dict:
    from .render import render_cloud, render_grid

    src = _existing(args.input, "--input")
    out = Path(args.out)
    name = args.stem or src.stem
    if src.suffix == ".occg":
        files = render_grid(load_grid(src), out, name, args.threshold, figure=not args.no_figure)
    else:
        files = render_cloud(load_cloud(src), out, name, figure=not args.no_figure)
    for f in files:
        print(f)
    return {"out": out, "files": [str(f) for f in files]}


def bench_stats(samples_ms: list[float]) -> dict:
    a = np.asarray(samples_ms, dtype=np.float64)
    return {"repeats": len(a), "mean_ms": float(a.mean()), "median_ms": float(np.median(a)),
            "p95_ms": float(np.percentile(a, 95)), "min_ms": float(a.min()), "max_ms": float(a.max()),
            "samples_ms": a.tolist()}


def cmd_bench(args, cfg: RunConfig) -> dict:
    from .model import OccupancyModel
    from .train import infer_occupancy, load_model

    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    model = load_model(_existing(args.checkpoint, "--checkpoint")) if args.checkpoint else OccupancyModel(cfg.model)
    if args.data is not None:
        radars = [load_cloud(d / "radar.pcd") for d in _frame_dirs(_existing(args.data, "--data"))]
    else:
        spec = model.spec
        scene = random_scene(cfg.seed * 1000, spec)
        radars = [synthesize_frame(scene, spec, cfg.sensors, cfg.noise, 0).radar]
    infer_occupancy(model, radars[0])  # warm-up
    samples = []
    for r in range(args.repeats):
        t0 = time.perf_counter()
        infer_occupancy(model, radars[r % len(radars)])
        samples.append(1000.0 * (time.perf_counter() - t0))
    report = bench_stats(samples)
    report["grid_dims"] = list(model.spec.dims)
    out = _run_dir(args)
    _write_json(out / "bench.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return {"out": out, "bench": report}


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (flags override its values)")
    common.add_argument("--seed", type=int, help="override the config seed (also via ROLLS_SEED)")
    common.add_argument("--threads", type=int, help="cap numeric library worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    run = _Parser(add_help=False)
    run.add_argument("--runs", type=Path, default=Path("runs"), help="root of run directories (default: runs)")
    run.add_argument("--name", default="default", help="run name; outputs go to <runs>/<name>/")

    p = _Parser(prog="rolls", description="Radar occupancy estimation with LiDAR-derived weak supervision.")
    p.add_argument("--version", action="version", version=f"rolls {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="synthesize paired LiDAR/radar frames with GT grids")
    s.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    s.add_argument("--frames", type=int, help="number of frames (default 8)")
    s.add_argument("--noise", choices=sorted(NOISE_PRESETS), help="radar noise preset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("labelgen", parents=[common], help="write occupancy queries, height maps and teacher grids")
    s.add_argument("--data", type=Path, required=True, help="dataset directory from `synth`")
    s.set_defaults(func=cmd_labelgen)

    s = sub.add_parser("train", parents=[common, run], help="stage-1 training on radar + LiDAR labels")
    s.add_argument("--data", type=Path, required=True, help="labelled dataset directory")
    s.add_argument("--iterations", type=int, help="stage-1 iterations")
    s.add_argument("--lr", type=float, help="stage-1 learning rate")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common, run], help="stage-2 fine-tuning against the carved teacher")
    s.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")
    s.add_argument("--data", type=Path, required=True, help="labelled dataset directory")
    s.add_argument("--iterations", type=int, help="stage-2 iterations")
    s.add_argument("--lr", type=float, help="stage-2 learning rate")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", parents=[common], help="predict occupancy grids for every frame")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="directory for <frame>.occg predictions")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common, run], help="CD / NFCD / AR / L2 against ground truth")
    s.add_argument("--data", type=Path, required=True, help="dataset directory with gt.occg per frame")
    s.add_argument("--checkpoint", type=Path, help="model to evaluate (runs inference)")
    s.add_argument("--pred", type=Path, help="directory of precomputed <frame>.occg predictions")
    s.add_argument("--threshold", type=float, default=0.5, help="occupancy threshold (default 0.5)")
    s.add_argument("--near-field", type=float, default=20.0, help="NFCD radius in meters (default 20)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="PLY / PGM / PNG renders of a grid or cloud")
    s.add_argument("--input", type=Path, required=True, help=".occg grid or point cloud file")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--stem", help="output file stem (default: input stem)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--no-figure", action="store_true", help="skip the matplotlib PNG")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("bench", parents=[common, run], help="time infer_occupancy per frame")
    s.add_argument("--checkpoint", type=Path, help="model checkpoint (default: freshly initialised model)")
    s.add_argument("--data", type=Path, help="dataset directory (default: one synthetic frame)")
    s.add_argument("--repeats", type=int, default=10)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        with _threads(args.threads):
            t0 = time.perf_counter()
            result = args.func(args, cfg)
            elapsed = time.perf_counter() - t0
        out = result.pop("out", None)
        if out is not None:
            _manifest(out, args.command, args, cfg, {"total": elapsed},
                      {"result": json.loads(json.dumps(result, default=str))})
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rolls {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, MetricError, FloatingPointError) as exc:
        print(f"rolls {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
