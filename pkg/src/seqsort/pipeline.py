"""Directory ingestion, series manifests and datapoint loading."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dicom import (
    DEFAULT_VENDOR_MAP,
    DicomImageMeta,
    SeriesRecord,
    Vendor,
    VendorMap,
    group_series,
    is_secondary_capture,
    read_dicom,
)
from .errors import SeqSortError
from .labeling import JointLabel, LabelMap, PlaneClass, SequenceClass, assign_label
from .preprocess import INPUT_SIZE, Datapoint, build_datapoint


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SEQSORT_THREADS", "1")))
    except ValueError:
        return 1


def walk_files(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.is_file())


def _parse_one(path: Path):
    try:
        return read_dicom(path), None
    except (SeqSortError, OSError) as exc:
        return None, {"file": str(path), "error": type(exc).__name__, "detail": str(exc)}


def parse_files(paths: Iterable[Path], workers: int | None = None):
    """Parse every file; returns ``(metas, errors)`` in input order."""
    paths = list(paths)
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(_parse_one, paths))
    else:
        results = [_parse_one(p) for p in paths]
    metas = [m for m, _ in results if m is not None]
    errors = [e for _, e in results if e is not None]
    return metas, errors


@dataclass
class IngestResult:
    records: list[SeriesRecord]
    labels: list[JointLabel | None]
    secondary: list[str] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)


def ingest(root: str | Path, vendor_map: VendorMap = DEFAULT_VENDOR_MAP, label_map: LabelMap | None = None,
           workers: int | None = None) -> IngestResult:
    label_map = label_map or LabelMap.default()
    metas, errors = parse_files(walk_files(root), workers)
    secondary = sorted(m.file_path for m in metas if is_secondary_capture(m))
    primary = [m for m in metas if not is_secondary_capture(m)]
    records = group_series(primary, vendor_map) if primary else []
    labels = [assign_label(r, label_map) for r in records]
    return IngestResult(records, labels, secondary, errors)


def manifest_rows(result: IngestResult, root: str | Path) -> list[dict]:
    root = Path(root)
    rows = []
    for record, label in zip(result.records, result.labels):
        rows.append({
            "series_key": record.group_key,
            "study_uid": record.study_instance_uid,
            "vendor": record.vendor.value,
            "sequence": label.sequence.value if label else None,
            "plane": label.plane.value if label else None,
            "files": [os.path.relpath(m.file_path, root) for m in record.members],
            "description": record.representative_description,
            "protocol_name": record.protocol_name,
        })
    return rows


def write_json(path: str | Path, obj) -> None:
    """Atomic JSON write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> tuple[list[dict], Path]:
    """Rows and the directory their ``files`` entries are relative to."""
    path = Path(path)
    data = json.loads(path.read_text())
    if isinstance(data, dict):
        root = Path(data.get("root", path.parent))
        if not root.is_absolute():
            root = path.parent / root
        return data["series"], root
    return data, path.parent


def row_label(row: dict) -> JointLabel | None:
    if not row.get("sequence") or not row.get("plane"):
        return None
    return JointLabel(SequenceClass(row["sequence"]), PlaneClass(row["plane"]))


def record_from_row(row: dict, root: Path, vendor_map: VendorMap = DEFAULT_VENDOR_MAP) -> SeriesRecord:
    metas, errors = parse_files([root / f for f in row["files"]], workers=1)
    if errors:
        raise SeqSortError(f"series {row['series_key']}: {errors[0]['detail']}")
    records = group_series(metas, vendor_map)
    if len(records) != 1:
        raise SeqSortError(f"series {row['series_key']} files form {len(records)} series")
    return records[0]


def datapoints_from_manifest(rows: list[dict], root: Path, size: int = INPUT_SIZE,
                             vendor_map: VendorMap = DEFAULT_VENDOR_MAP, dtype=np.float32,
                             labeled_only: bool = True) -> list[Datapoint]:
    out = []
    for row in rows:
        label = row_label(row)
        if label is None and labeled_only:
            continue
        files = row["files"]
        if files and str(files[0]).endswith(".pgm"):
            from .phantom import load_pgm_datapoints

            out.extend(load_pgm_datapoints(root, [row], size, dtype))
            continue
        dp = build_datapoint(record_from_row(row, root, vendor_map), label, size, dtype)
        out.append(dp)
    return out


def stack_pixels(datapoints) -> np.ndarray:
    return np.stack([dp.pixels for dp in datapoints])


def vendor_of(row: dict) -> Vendor:
    return Vendor(row.get("vendor", "Unknown"))
