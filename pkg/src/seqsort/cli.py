"""Command-line entry point: ``seqsort <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 partial data
failures (per-file problems were reported and skipped).
"""
from __future__ import annotations

import argparse
import filecmp
import json
import logging
import os
import re
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import GlobalConfig
from .dataset import partition, split_manifest
from .errors import ConfigError, EmptySplit, InvalidClass, SeqSortError
from .evaluation import grad_cam, predict_many, report_from_predictions, write_gradcam, write_report
from .labeling import PLANES, SEQUENCES, count_labels, enforce_class_threshold
from .nn.checkpoint import load_checkpoint
from .phantom import PhantomSpec, generate
from .pipeline import (
    IngestResult,
    datapoints_from_manifest,
    ingest,
    load_manifest,
    manifest_rows,
    record_from_row,
    write_json,
)
from .preprocess import build_datapoint
from .training import BEST_CKPT, LAST_CKPT, resume, train

log = logging.getLogger("seqsort")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2
UNCLASSIFIED = "unclassified"
ROUTING_REPORT = "routing_report.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output


def emit(rows: list[dict], fmt: str, out=None) -> None:
    """Print result rows as tab-separated lines (header first) or JSON."""
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows, indent=1) + "\n")
        return
    if not rows:
        return
    keys = list(rows[0])
    out.write("\t".join(keys) + "\n")
    for row in rows:
        out.write("\t".join("" if row.get(k) is None else str(row.get(k)) for k in keys) + "\n")


def sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "series"


# ---------------------------------------------------------------------------
# shared steps


def _load_config(args) -> GlobalConfig:
    cfg = GlobalConfig.from_file(args.config) if args.config else GlobalConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _labeled_datapoints(cfg: GlobalConfig, manifest: Path):
    rows, root = load_manifest(manifest)
    dps = datapoints_from_manifest(rows, root, cfg.input_size, cfg.vendor_map)
    keep = enforce_class_threshold(count_labels(dp.label for dp in dps), cfg.min_class_count)
    dropped = sorted({str(dp.label) for dp in dps if dp.label not in keep})
    if dropped:
        log.warning("excluding %d labels below %d datapoints: %s", len(dropped), cfg.min_class_count, ", ".join(dropped))
    return [dp for dp in dps if dp.label in keep]


def _splits(cfg: GlobalConfig, manifest: Path):
    if cfg.split.val_fraction <= 0:
        raise ConfigError("val_fraction must be > 0: validation drives model selection")
    dps = _labeled_datapoints(cfg, manifest)
    if not dps:
        raise EmptySplit("no labeled datapoints above the class threshold")
    return partition(dps, cfg.split)


def _train_config(cfg: GlobalConfig, out: Path):
    return replace(cfg.train, checkpoint_dir=out, oversample=cfg.oversample, augment=cfg.augment)


def _finish_training(out: Path, best, records, test, fmt) -> None:
    from .plots import training_curves

    training_curves(records, out / "training_curves.png")
    rows = [{"epoch": r.epoch, "lr": r.lr_at_epoch_end, "train_loss": r.train_loss, "val_loss_sum": r.val_loss_sum,
             "val_acc_seq": r.val_acc_seq, "val_acc_plane": r.val_acc_plane} for r in records]
    if test:
        report = report_from_predictions(test, predict_many(best, test))
        _write_eval_outputs(report, out / "test_eval")
        rows.append({"epoch": "test", "lr": None, "train_loss": None, "val_loss_sum": None,
                     "val_acc_seq": str(report.seq_accuracy), "val_acc_plane": str(report.plane_accuracy)})
    emit(rows, fmt)


def _write_eval_outputs(report, out: Path) -> list[Path]:
    from .plots import confusion_figure

    paths = write_report(report, out)
    paths.append(confusion_figure(report.seq_confusion, [c.value for c in SEQUENCES], "sequence",
                                  out / "sequence_confusion.png"))
    paths.append(confusion_figure(report.plane_confusion, [c.value for c in PLANES], "plane",
                                  out / "plane_confusion.png"))
    return paths


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        studies_per_class=args.studies_per_class,
        slices_per_series=tuple(args.slices),
        image_size=tuple(args.image_size),
        seed=0 if args.seed is None else args.seed,
        write_format=args.write_format,
        secondary_captures=args.secondary,
    )
    rows = generate(spec, args.out)
    emit([{"series": len(rows), "files": sum(len(r["files"]) for r in rows), "manifest": str(Path(args.out) / "manifest.json")}],
         args.format)
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    root = Path(args.input_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    result = ingest(root, cfg.vendor_map, cfg.label_map())
    out = Path(args.out)
    manifest = {
        "root": os.path.relpath(root.resolve(), out.resolve().parent),
        "series": manifest_rows(result, root),
        "secondary_captures": len(result.secondary),
        "errors": result.errors,
    }
    write_json(out, manifest)
    for err in result.errors:
        log.warning("%s: %s (%s)", err["file"], err["error"], err["detail"])
    labeled = sum(lb is not None for lb in result.labels)
    emit([{"series": len(result.records), "labeled": labeled, "unlabeled": len(result.records) - labeled,
           "secondary_captures": len(result.secondary), "errors": len(result.errors), "manifest": str(out)}], args.format)
    return EXIT_PARTIAL if result.errors else EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    tr, va, te = _splits(cfg, Path(args.manifest))
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "split.json", split_manifest(tr, va, te))
    best, records = train(tr, va, _train_config(cfg, out), exclude_studies={dp.study_instance_uid for dp in te})
    _finish_training(out, best, records, te, args.format)
    return EXIT_OK


def cmd_resume(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint)
    out = ckpt.parent
    tr, va, te = _splits(cfg, Path(args.manifest))
    stored = out / "split.json"
    if stored.exists() and json.loads(stored.read_text()) != split_manifest(tr, va, te):
        raise ConfigError("data split differs from the interrupted run (check seed and config)")
    best, records = resume(ckpt, tr, va, _train_config(cfg, out), exclude_studies={dp.study_instance_uid for dp in te})
    _finish_training(out, best, records, te, args.format)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = load_checkpoint(args.checkpoint).params
    cfg = replace(cfg, train=replace(cfg.train, input_size=params.input_size))
    dps = _labeled_datapoints(cfg, Path(args.manifest))
    if args.split_manifest:
        splits = json.loads(Path(args.split_manifest).read_text())
        dps = [dp for dp in dps if splits.get(dp.study_instance_uid) == args.split]
    if not dps:
        raise EmptySplit("no datapoints to evaluate")
    report = report_from_predictions(dps, predict_many(params, dps))
    paths = _write_eval_outputs(report, Path(args.out))
    rows = [{"scope": "all", "sequence": str(report.seq_accuracy), "plane": str(report.plane_accuracy),
             "combined": str(report.combined_accuracy)}]
    for vendor, accs in report.by_vendor.items():
        rows.append({"scope": vendor, **{k: str(a) for k, a in accs.items()}})
    emit(rows, args.format)
    log.info("wrote %s", ", ".join(map(str, paths)))
    return EXIT_OK


def _parse_class(head: str, text: str) -> int:
    names = SEQUENCES if head == "sequence" else PLANES
    if text.lstrip("-").isdigit():
        return int(text)
    for c in names:
        if c.value.lower() == text.lower():
            return c.index
    raise InvalidClass(f"{text!r} is not a {head} class")


def cmd_gradcam(args) -> int:
    cfg = _load_config(args)
    params = load_checkpoint(args.checkpoint).params
    cls = _parse_class(args.head, args.target_class)
    rows, root = load_manifest(args.manifest)
    match = [r for r in rows if r["series_key"] == args.series]
    if not match:
        raise ConfigError(f"series {args.series!r} not in manifest")
    dp = datapoints_from_manifest(match, root, params.input_size, cfg.vendor_map, labeled_only=False)[0]
    cam = grad_cam(params, dp, args.head, cls)
    out = Path(args.out)
    stem = sanitize(args.series)
    paths = write_gradcam(cam, dp, out, stem)
    from .plots import gradcam_overlay

    names = SEQUENCES if args.head == "sequence" else PLANES
    paths.append(gradcam_overlay(dp.pixels.mean(axis=-1), cam.heat, f"{args.head}: {names[cls].value}",
                                 out / f"{stem}_overlay.png"))
    emit([{"series": args.series, "head": args.head, "class": names[cls].value, "heat_max": float(cam.heat.max()),
           "files": ",".join(map(str, paths))}], args.format)
    return EXIT_OK


def _place(src: Path, dst: Path) -> str:
    """Hard-link (or copy across filesystems); never moves. Returns the action taken."""
    if dst.exists():
        if os.path.samefile(src, dst) or filecmp.cmp(src, dst, shallow=False):
            return "kept"
        raise SeqSortError(f"{dst} exists with different content")
    dst.parent.mkdir(parents=True, exist_ok=True)
    try:
        os.link(src, dst)
        return "linked"
    except OSError:
        tmp = dst.with_name(dst.name + ".tmp")
        shutil.copy2(src, tmp)
        os.replace(tmp, dst)
        return "copied"


def sort_tree(input_dir: Path, params, out: Path, cfg: GlobalConfig) -> tuple[dict, bool]:
    """Route every file under ``input_dir`` into ``out``; returns the routing report and a partial-failure flag."""
    result: IngestResult = ingest(input_dir, cfg.vendor_map, cfg.label_map())
    routes: list[dict] = []
    failures = list(result.errors)
    unclassified = [Path(e["file"]) for e in result.errors] + [Path(f) for f in result.secondary]

    ok_records, dps = [], []
    for record in result.records:
        try:
            dps.append(build_datapoint(record, None, params.input_size))
            ok_records.append(record)
        except SeqSortError as exc:
            failures.append({"series": record.group_key, "error": type(exc).__name__, "detail": str(exc)})
            unclassified.extend(Path(m.file_path) for m in record.members)
    preds = predict_many(params, dps)
    for record, pred in zip(ok_records, preds):
        dest = out / pred.seq_pred.value / pred.plane_pred.value / sanitize(record.group_key)
        actions = [_place(Path(m.file_path), dest / Path(m.file_path).name) for m in record.members]
        routes.append({
            "series_key": record.group_key,
            "folder": os.path.relpath(dest, out),
            "sequence": pred.seq_pred.value,
            "plane": pred.plane_pred.value,
            "seq_probs": {c.value: round(float(p), 6) for c, p in zip(SEQUENCES, pred.seq_probs)},
            "plane_probs": {c.value: round(float(p), 6) for c, p in zip(PLANES, pred.plane_probs)},
            "files": [os.path.relpath(m.file_path, input_dir) for m in record.members],
            "actions": sorted(set(actions)),
        })
    unc_rows = []
    for f in sorted(set(unclassified)):
        rel = os.path.relpath(f, input_dir)
        _place(f, out / UNCLASSIFIED / rel)
        unc_rows.append(rel)
    report = {"series": routes, "unclassified": unc_rows, "errors": failures}
    write_json(out / ROUTING_REPORT, report)
    return report, bool(failures)


def cmd_sort(args) -> int:
    cfg = _load_config(args)
    input_dir, out = Path(args.input_dir).resolve(), Path(args.out).resolve()
    if not input_dir.is_dir():
        raise ConfigError(f"{input_dir} is not a directory")
    if out == input_dir or input_dir in out.parents:
        raise ConfigError("output directory must not be inside the input tree")
    params = load_checkpoint(args.checkpoint).params
    report, partial = sort_tree(input_dir, params, out, cfg)
    emit([{"series": len(report["series"]), "unclassified_files": len(report["unclassified"]),
           "errors": len(report["errors"]), "report": str(out / ROUTING_REPORT)}], args.format)
    return EXIT_PARTIAL if partial else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--format", choices=("tsv", "json"), default="tsv", help="stdout format (default tsv)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    p = _Parser(prog="seqsort", description="Cardiac MRI series grouping, classification and sorting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic labeled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--studies-per-class", type=int, default=10)
    s.add_argument("--slices", type=int, nargs=2, default=(4, 12), metavar=("MIN", "MAX"))
    s.add_argument("--image-size", type=int, nargs=2, default=(96, 112), metavar=("H", "W"))
    s.add_argument("--write-format", choices=("dicom_fixture", "pgm_triplet"), default="dicom_fixture")
    s.add_argument("--secondary", type=int, default=0, help="number of secondary-capture files to add")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("ingest", parents=[common], help="group and label a DICOM tree into a series manifest")
    s.add_argument("input_dir")
    s.add_argument("--out", required=True, help="manifest JSON path")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common], help="split, oversample and train from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="run directory (checkpoints, log, split, figures)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("resume", parents=[common], help="continue an interrupted training run")
    s.add_argument("--checkpoint", required=True, help=f"the run's {LAST_CKPT}")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_resume)

    s = sub.add_parser("eval", parents=[common], help="accuracy report and confusion matrices")
    s.add_argument("--checkpoint", required=True, help=f"usually the run's {BEST_CKPT}")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split-manifest", help="split.json from a training run")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sort", parents=[common], help="classify a directory and file series into folders")
    s.add_argument("input_dir")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sort)

    s = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap for one series")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--series", required=True, help="series_key from the manifest")
    s.add_argument("--head", choices=("sequence", "plane"), required=True)
    s.add_argument("--class", dest="target_class", required=True, help="class name or index")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gradcam)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidClass, EmptySplit) as exc:
        print(f"seqsort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SeqSortError as exc:
        print(f"seqsort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
