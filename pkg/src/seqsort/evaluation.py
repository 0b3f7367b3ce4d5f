"""Accuracy reports, confusion matrices and Grad-CAM."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .dicom import Vendor
from .errors import EmptySplit, InvalidClass, VersionMismatch
from .labeling import PLANES, SEQUENCES, PlaneClass, SequenceClass, label_table
from .nn import layers as L
from .nn.model import ModelParams, backward, forward, predict_proba
from .preprocess import Datapoint, resize_bilinear, to_uint8, write_pgm

TIE_BREAK = "lowest class index"


@dataclass(frozen=True)
class Accuracy:
    correct: int
    total: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.total) if self.total else Fraction(0)

    @property
    def percent(self) -> Fraction:
        return 100 * self.fraction

    def percent_text(self) -> str:
        exact = Decimal(self.percent.numerator) / Decimal(self.percent.denominator)
        return str(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))

    def __str__(self) -> str:
        return f"{self.correct}/{self.total} ({self.percent_text()})"

    def to_json(self) -> dict:
        return {"correct": self.correct, "total": self.total, "percent": float(self.percent), "text": str(self)}


@dataclass(frozen=True)
class Prediction:
    datapoint_ref: str
    seq_probs: np.ndarray
    plane_probs: np.ndarray
    seq_pred: SequenceClass
    plane_pred: PlaneClass


@dataclass
class EvalReport:
    seq_accuracy: Accuracy
    plane_accuracy: Accuracy
    combined_accuracy: Accuracy
    per_class_seq: dict[str, Accuracy]
    per_class_plane: dict[str, Accuracy]
    seq_confusion: np.ndarray  # rows = true class, columns = predicted
    plane_confusion: np.ndarray
    by_vendor: dict[str, dict[str, Accuracy]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sequence": self.seq_accuracy.to_json(),
            "plane": self.plane_accuracy.to_json(),
            "combined": self.combined_accuracy.to_json(),
            "per_class_sequence": {k: [a.correct, a.total] for k, a in self.per_class_seq.items()},
            "per_class_plane": {k: [a.correct, a.total] for k, a in self.per_class_plane.items()},
            "sequence_confusion": self.seq_confusion.tolist(),
            "plane_confusion": self.plane_confusion.tolist(),
            "by_vendor": {v: {k: str(a) for k, a in accs.items()} for v, accs in self.by_vendor.items()},
            "labels": label_table(),
            "tie_break": TIE_BREAK,
        }


# ---------------------------------------------------------------------------
# prediction


def _check_labels(params: ModelParams) -> None:
    if params.labels != label_table():
        raise VersionMismatch("model label table differs from this build's taxonomy")


def predict_many(params: ModelParams, datapoints: Sequence[Datapoint], batch_size: int = 32) -> list[Prediction]:
    _check_labels(params)
    if not datapoints:
        return []
    x = np.stack([dp.pixels for dp in datapoints])
    seq, plane = predict_proba(params, x, batch_size)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return [
        Prediction(dp.source_series, s, p, SEQUENCES[int(np.argmax(s))], PLANES[int(np.argmax(p))])
        for dp, s, p in zip(datapoints, seq, plane)
    ]


def predict(params: ModelParams, dp: Datapoint) -> Prediction:
    return predict_many(params, [dp])[0]


# ---------------------------------------------------------------------------
# reports


def confusion(true: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


def report_from_indices(seq_true, seq_pred, plane_true, plane_pred, vendors: Sequence[str] | None = None) -> EvalReport:
    """Build a report from class-index arrays (one entry per datapoint)."""
    seq_true, seq_pred = np.asarray(seq_true, dtype=np.int64), np.asarray(seq_pred, dtype=np.int64)
    plane_true, plane_pred = np.asarray(plane_true, dtype=np.int64), np.asarray(plane_pred, dtype=np.int64)
    n = len(seq_true)
    if n == 0:
        raise EmptySplit("nothing to evaluate")
    if not (len(seq_pred) == len(plane_true) == len(plane_pred) == n):
        raise ValueError("prediction and label arrays differ in length")
    seq_ok = seq_true == seq_pred
    plane_ok = plane_true == plane_pred
    both = seq_ok & plane_ok

    def per_class(true, ok, names):
        out = {}
        for i, name in enumerate(names):
            sel = true == i
            if sel.any():
                out[name.value] = Accuracy(int(ok[sel].sum()), int(sel.sum()))
        return out

    by_vendor = {}
    if vendors is not None:
        vendors = np.asarray([v.value if isinstance(v, Vendor) else str(v) for v in vendors])
        for v in sorted(set(vendors)):
            sel = vendors == v
            by_vendor[v] = {
                "sequence": Accuracy(int(seq_ok[sel].sum()), int(sel.sum())),
                "plane": Accuracy(int(plane_ok[sel].sum()), int(sel.sum())),
                "combined": Accuracy(int(both[sel].sum()), int(sel.sum())),
            }
    return EvalReport(
        seq_accuracy=Accuracy(int(seq_ok.sum()), n),
        plane_accuracy=Accuracy(int(plane_ok.sum()), n),
        combined_accuracy=Accuracy(int(both.sum()), n),
        per_class_seq=per_class(seq_true, seq_ok, SEQUENCES),
        per_class_plane=per_class(plane_true, plane_ok, PLANES),
        seq_confusion=confusion(seq_true, seq_pred, len(SEQUENCES)),
        plane_confusion=confusion(plane_true, plane_pred, len(PLANES)),
        by_vendor=by_vendor,
    )


def report_from_predictions(datapoints: Sequence[Datapoint], preds: Sequence[Prediction]) -> EvalReport:
    if any(dp.label is None for dp in datapoints):
        raise ValueError("evaluation needs labeled datapoints")
    return report_from_indices(
        [dp.label.sequence.index for dp in datapoints],
        [p.seq_pred.index for p in preds],
        [dp.label.plane.index for dp in datapoints],
        [p.plane_pred.index for p in preds],
        [dp.vendor for dp in datapoints],
    )


def evaluate(params: ModelParams, test_set: Sequence[Datapoint]) -> EvalReport:
    if not test_set:
        raise EmptySplit("test set is empty")
    return report_from_predictions(test_set, predict_many(params, test_set))


def _write_matrix_csv(path: Path, matrix: np.ndarray, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *[n.value for n in names]])
        for name, row in zip(names, matrix):
            w.writerow([name.value, *row.tolist()])


def write_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """``report.json`` plus one CSV per confusion matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "report.json", out_dir / "sequence_confusion.csv", out_dir / "plane_confusion.csv"]
    tmp = paths[0].with_suffix(".json.tmp")
    tmp.write_text(json.dumps(report.to_json(), indent=1) + "\n")
    tmp.replace(paths[0])
    _write_matrix_csv(paths[1], report.seq_confusion, SEQUENCES)
    _write_matrix_csv(paths[2], report.plane_confusion, PLANES)
    return paths


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass(frozen=True)
class GradCamMap:
    heat: np.ndarray
    target_head: str
    target_class: int


HEADS = {"sequence": len(SEQUENCES), "plane": len(PLANES)}


def grad_cam(params: ModelParams, dp: Datapoint, target_head: str, target_class: int) -> GradCamMap:
    """Class activation map from the last conv block (post-ReLU, pre-pool).

    Channel weights are spatially averaged gradients of the target logit; the
    ReLU'd weighted sum is upsampled bilinearly to the input size and scaled
    so its maximum is 1.
    """
    if target_head not in HEADS:
        raise InvalidClass(f"unknown head {target_head!r}")
    if not 0 <= int(target_class) < HEADS[target_head]:
        raise InvalidClass(f"class {target_class} out of range for {target_head} head")
    x = dp.pixels[None].astype(params.dtype, copy=False)
    seq, plane, cache = forward(params, x, train=False)
    dseq, dplane = np.zeros_like(seq), np.zeros_like(plane)
    (dseq if target_head == "sequence" else dplane)[0, target_class] = 1
    grad = backward(params, cache, dseq, dplane, to_features=True)[0].astype(np.float64)
    feats = cache["features"][0].astype(np.float64)
    weights = grad.mean(axis=(0, 1))
    cam = np.maximum(feats @ weights, 0.0)
    heat = resize_bilinear(cam, params.input_size)
    peak = heat.max()
    heat = heat / peak if peak > 0 else np.zeros_like(heat)
    return GradCamMap(heat, target_head, int(target_class))


def heat_mass_fraction(heat: np.ndarray, mask: np.ndarray) -> float:
    total = heat.sum()
    return float(heat[mask].sum() / total) if total > 0 else 0.0


def write_gradcam(cam: GradCamMap, dp: Datapoint, out_dir: str | Path, stem: str) -> list[Path]:
    """Raw heat and a 50/50 overlay on the channel-mean image, both 8-bit PGM."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw, overlay = out_dir / f"{stem}_heat.pgm", out_dir / f"{stem}_overlay.pgm"
    write_pgm(raw, cam.heat)
    write_pgm(overlay, 0.5 * dp.pixels.astype(np.float64).mean(axis=-1) + 0.5 * cam.heat)
    return [raw, overlay]


def heat_to_uint8(heat: np.ndarray) -> np.ndarray:
    return to_uint8(heat)
