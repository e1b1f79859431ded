"""``bevfuse`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import os
import sys


def _apply_thread_cap(environ=os.environ) -> None:
    """Map ``BEVFUSE_THREADS`` onto the BLAS/OpenMP variables before numpy loads."""
    raw = environ.get("BEVFUSE_THREADS")
    if not raw:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise ValueError(f"BEVFUSE_THREADS must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        environ[var] = raw


try:
    _apply_thread_cap()
    _THREAD_ERROR = None
except ValueError as _e:
    _THREAD_ERROR = str(_e)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, PipelineConfig, load_config  # noqa: E402
from .data.dataset import Dataset, DatasetError, write_dataset  # noqa: E402
from .data.pcd import PcdError  # noqa: E402
from .data.sweep_io import SweepFormatError  # noqa: E402
from .tensor.checkpoint import CheckpointError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
DATA_ERRORS = (DatasetError, SweepFormatError, PcdError, CheckpointError, OSError)

log = logging.getLogger("bevfuse")


def _config(path) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


def _dataset(path) -> Dataset:
    return Dataset(path)


def _manifest_digest(ds: Dataset) -> str:
    return hashlib.sha256((ds.root / "manifest.json").read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args.config)
    if args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    root = write_dataset(cfg.data, args.out, args.scenes, start=args.start)
    print(f"wrote {args.scenes} samples to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import save_model, split_ids, train

    cfg = _config(args.config)
    ds = _dataset(args.data)
    train_ids, eval_ids = split_ids(ds.sample_ids, cfg.train.train_fraction)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    res = train(cfg, ds, epochs=args.epochs, seed=args.seed, train_ids=train_ids, loss_csv=loss_csv,
                progress=lambda r: print(f"epoch {r.epoch}: heatmap {r.heatmap_loss:.4f} reg {r.reg_loss:.4f} "
                                         f"total {r.total:.4f} ({r.seconds:.1f}s)", flush=True))
    extra = {
        "seed": cfg.train.seed if args.seed is None else args.seed,
        "epochs": len(res.history),
        "train_ids": res.train_ids,
        "eval_ids": eval_ids,
        "data_manifest_sha256": _manifest_digest(ds),
    }
    save_model(res.model, args.out, extra)
    print(f"checkpoint {args.out}, loss log {loss_csv}")
    return EXIT_OK


def _eval_ids(args, ds: Dataset, meta: dict, cfg: PipelineConfig):
    from .metrics import filter_scenes
    from .train import split_ids

    if args.split == "all":
        ids = list(ds.sample_ids)
    elif meta.get("eval_ids") is not None:
        ids = ds.subset(meta["eval_ids"])
    else:
        ids = split_ids(ds.sample_ids, cfg.train.train_fraction)[1]
    if args.filter:
        keep = {d["sample_id"] for d in filter_scenes(ds.descriptions(), args.filter, key=lambda d: d["description"])}
        ids = [i for i in ids if i in keep]
    if not ids:
        raise DatasetError(f"no samples to evaluate (split {args.split!r}, filter {args.filter!r})")
    return ids


def cmd_eval(args) -> int:
    from .head import DetectionSet
    from .metrics import EvalConfig, evaluate, pr_curves
    from .train import ground_truth, load_model, meta_path, predict, preflight

    ds = _dataset(args.data)
    if args.ckpt:
        model = load_model(args.ckpt)
        meta = json.loads(meta_path(args.ckpt).read_text())
        cfg = model.cfg
        preflight(cfg, ds)
        if tuple(model.class_names) != tuple(ds.class_names):
            raise DatasetError(f"checkpoint classes {model.class_names} differ from dataset {ds.class_names}")
        ids = _eval_ids(args, ds, meta, cfg)
        dets = predict(model, ds, ids)
        label = Path(args.ckpt).name
    else:
        cfg = PipelineConfig()
        try:
            dets = DetectionSet.read(args.predictions, ds.class_names)
        except ValueError as e:
            raise DatasetError(str(e)) from e
        ids = _eval_ids(args, ds, {}, cfg)
        label = Path(args.predictions).name
    if args.save_predictions:
        dets.write(args.save_predictions)
    gts = ground_truth(ds, ids)
    preds = {sid: dets.detections.get(sid, []) for sid in ids}
    ecfg = EvalConfig(class_names=tuple(ds.class_names))
    report = evaluate(gts, preds, ecfg)
    out = report.to_dict()
    out["filter"] = args.filter
    out["split"] = args.split
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
    if args.curves:
        with open(args.curves, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("class", "threshold", "recall", "precision"))
            w.writerows(pr_curves(gts, preds, ecfg))
    print(report.table(label), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .train import preflight

    cfg = _config(args.config)
    ds = _dataset(args.data)
    preflight(cfg, ds)
    report = run_bench(cfg, ds, frames=args.frames, compare_camera_only=not args.no_compare, seed=args.seed)
    report.write_json(args.report, include_raw=args.raw)
    print(report.table())
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import SUITES, run_suite

    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        print(f"[{name}]")
        for res in run_suite(name):
            print(res.line())
            failed += not res.passed
    print(f"{failed} failed" if failed else "all checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevfuse", description="Radar-camera BEV detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="pipeline config; its data.* keys drive the generator")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first sample")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; metadata goes to <out>.json")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-csv", help="per-epoch loss log (default <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--predictions", help="JSON-lines detections instead of running a model")
    e.add_argument("--data", required=True)
    e.add_argument("--filter", help="keep samples whose description contains this term, e.g. rain or night")
    e.add_argument("--split", choices=("eval", "all"), default="eval")
    e.add_argument("--report", required=True)
    e.add_argument("--curves", help="write precision/recall series as CSV")
    e.add_argument("--save-predictions", help="write the detections as JSON lines")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage inference timing")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--report", required=True)
    b.add_argument("--frames", type=int, help="timed frames (default bench.frames)")
    b.add_argument("--seed", type=int, default=0, help="weight initialization seed")
    b.add_argument("--no-compare", action="store_true", help="skip the camera-only reference run")
    b.add_argument("--raw", action="store_true", help="include per-frame timings in the report")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="run oracle check suites")
    c.add_argument("--suite", choices=("gradients", "equivalence", "roundtrip", "metrics", "all"), default="all")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _THREAD_ERROR:
        print(f"error: {_THREAD_ERROR}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
