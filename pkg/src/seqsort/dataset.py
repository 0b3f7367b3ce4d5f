"""Study-level stratified splitting, minority oversampling and augmentation."""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InsufficientStudies, InsufficientStudiesWarning
from .labeling import JointLabel
from .preprocess import Datapoint

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.64
    val_fraction: float = 0.16
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fr}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass(frozen=True)
class OversampleSpec:
    class_max_ratio: float = 4.0
    vendor_max_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.class_max_ratio < 1 or self.vendor_max_ratio < 1:
            raise ConfigError("oversampling ratios must be >= 1")


@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma_max: float = 0.05
    contrast_gamma_range: tuple[float, float] = (0.7, 1.4)
    rotation_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_max_frac: float = 0.05
    deform_grid: int = 4
    deform_max_px: float = 8.0
    channel_shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        g0, g1 = self.contrast_gamma_range
        s0, s1 = self.scale_range
        if not (0 < g0 <= g1) or not (0 < s0 <= s1):
            raise ConfigError("gamma and scale ranges must be positive and ordered")
        mags = (self.noise_sigma_max, self.rotation_max_deg, self.translate_max_frac, self.deform_max_px)
        if min(mags) < 0 or self.deform_grid < 2:
            raise ConfigError("augmentation magnitudes must be >= 0 and deform_grid >= 2")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentSpec":
        return cls(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), 0.0, 4, 0.0, False, seed)


# ---------------------------------------------------------------------------
# partition


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def partition(datapoints: Sequence[Datapoint], spec: SplitSpec):
    """Split by study so no study straddles two splits; stratified by joint label.

    A study carrying several labels joins the stratum of its rarest label.
    Returns ``(train, val, test)``; input order is kept within each split.
    """
    if any(dp.label is None for dp in datapoints):
        raise ValueError("partition requires labeled datapoints")
    study_labels: dict[str, set[JointLabel]] = defaultdict(set)
    for dp in datapoints:
        study_labels[dp.study_instance_uid].add(dp.label)
    active = [i for i, f in enumerate(spec.fractions) if f > 0]
    if len(study_labels) < max(3, len(active)):
        raise InsufficientStudies(f"need at least 3 studies, got {len(study_labels)}")

    label_studies = Counter(label for labels in study_labels.values() for label in labels)
    strata: dict[JointLabel, list[str]] = defaultdict(list)
    for study in sorted(study_labels):
        rarest = min(study_labels[study], key=lambda lb: (label_studies[lb], lb.sequence.index, lb.plane.index))
        strata[rarest].append(study)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, 0x5B117]))
    assignment: dict[str, int] = {}
    for label in sorted(strata, key=lambda lb: (lb.sequence.index, lb.plane.index)):
        studies = strata[label]
        order = rng.permutation(len(studies))
        shuffled = [studies[i] for i in order]
        if len(studies) < len(active):
            warnings.warn(
                InsufficientStudiesWarning(f"stratum {label}: {len(studies)} studies, all assigned to train"),
                stacklevel=2,
            )
            assignment.update((s, 0) for s in shuffled)
            continue
        counts = largest_remainder(len(studies), spec.fractions)
        pos = 0
        for split, k in enumerate(counts):
            assignment.update((s, split) for s in shuffled[pos : pos + k])
            pos += k

    out: tuple[list, list, list] = ([], [], [])
    for dp in datapoints:
        out[assignment[dp.study_instance_uid]].append(dp)
    return out


def split_manifest(train, val, test) -> dict[str, str]:
    manifest = {}
    for name, split in zip(SPLIT_NAMES, (train, val, test)):
        for dp in split:
            manifest[dp.study_instance_uid] = name
    return dict(sorted(manifest.items()))


def write_split_manifest(path: str | Path, train, val, test) -> None:
    Path(path).write_text(json.dumps(split_manifest(train, val, test), indent=1) + "\n")


# ---------------------------------------------------------------------------
# oversampling


def _ratio_ok(counts: Counter, ratio: float) -> bool:
    return not counts or max(counts.values()) <= ratio * min(counts.values())


def oversample(train: Sequence[Datapoint], spec: OversampleSpec) -> list[Datapoint]:
    """Duplicate minority labels, then minority vendors, until both ratio caps hold.

    Copies are references to the original datapoints. Classes are balanced
    first; vendor top-ups pick the currently rarest label within the vendor so
    the class balance is preserved, and the two passes repeat until stable.
    """
    if not train:
        raise ValueError("cannot oversample an empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, 0x0E75]))
    out = list(train)
    by_label: dict = defaultdict(list)
    by_vendor: dict = defaultdict(list)
    for dp in train:
        by_label[dp.label].append(dp)
        by_vendor[dp.vendor].append(dp)
    # per-group round-robin cursors over a seeded shuffle of the originals
    cycles = {}

    def draw(key, pool):
        if key not in cycles:
            cycles[key] = [pool[i] for i in rng.permutation(len(pool))], 0
        items, pos = cycles[key]
        cycles[key] = items, pos + 1
        return items[pos % len(items)]

    label_keys = sorted(by_label, key=lambda lb: (lb.sequence.index, lb.plane.index))
    vendor_keys = sorted(by_vendor, key=lambda v: v.value)
    label_counts = Counter({lb: len(by_label[lb]) for lb in label_keys})
    vendor_counts = Counter({v: len(by_vendor[v]) for v in vendor_keys})

    for _ in range(1000):
        top = max(label_counts.values())
        need = math.ceil(top / spec.class_max_ratio)
        for lb in label_keys:
            while label_counts[lb] < need:
                dp = draw(("label", lb), by_label[lb])
                out.append(dp)
                label_counts[lb] += 1
                vendor_counts[dp.vendor] += 1
        top = max(vendor_counts.values())
        need = math.ceil(top / spec.vendor_max_ratio)
        for v in vendor_keys:
            if vendor_counts[v] >= need:
                continue
            v_labels = sorted({dp.label for dp in by_vendor[v]}, key=lambda lb: (lb.sequence.index, lb.plane.index))
            pools = {lb: [dp for dp in by_vendor[v] if dp.label == lb] for lb in v_labels}
            while vendor_counts[v] < need:
                lb = min(v_labels, key=lambda x: label_counts[x])
                dp = draw(("vendor", v, lb), pools[lb])
                out.append(dp)
                label_counts[lb] += 1
                vendor_counts[v] += 1
        if _ratio_ok(label_counts, spec.class_max_ratio) and _ratio_ok(vendor_counts, spec.vendor_max_ratio):
            return out
    raise RuntimeError("oversampling did not converge")


# ---------------------------------------------------------------------------
# augmentation


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _displacement_field(rng, grid: int, max_px: float, shape) -> tuple[np.ndarray, np.ndarray]:
    angle = rng.uniform(0, 2 * np.pi, size=(grid, grid))
    radius = max_px * rng.uniform(0, 1, size=(grid, grid))
    coarse = [radius * np.sin(angle), radius * np.cos(angle)]
    h, w = shape
    zoom = (h / grid, w / grid)
    # order=1 zoom is a convex combination, so |displacement| stays <= max_px
    fields = [ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in coarse]
    return fields[0][:h, :w], fields[1][:h, :w]


def augment(dp: Datapoint, spec: AugmentSpec, rng: np.random.Generator) -> Datapoint:
    """Random geometric, contrast and noise perturbation of one datapoint."""
    x = dp.pixels
    h, w, c = x.shape
    dtype = x.dtype
    angle = np.deg2rad(rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg))
    scale = rng.uniform(*spec.scale_range)
    shift = rng.uniform(-spec.translate_max_frac, spec.translate_max_frac, size=2) * (h, w)
    geometric = angle != 0 or scale != 1 or np.any(shift != 0) or spec.deform_max_px > 0
    if geometric:
        rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
        cy, cx = (h - 1) / 2, (w - 1) / 2
        # inverse map: output pixel -> source coordinate
        yr, xr = rows - cy - shift[0], cols - cx - shift[1]
        cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
        src_r = cos * yr - sin * xr + cy
        src_c = sin * yr + cos * xr + cx
        if spec.deform_max_px > 0:
            dr, dc = _displacement_field(rng, spec.deform_grid, spec.deform_max_px, (h, w))
            src_r, src_c = src_r + dr, src_c + dc
        coords = np.stack([src_r, src_c])
        x = np.stack(
            [ndimage.map_coordinates(x[..., k].astype(np.float64), coords, order=1, mode="constant") for k in range(c)],
            axis=-1,
        )
    gammas = rng.uniform(*spec.contrast_gamma_range, size=c)
    if np.any(gammas != 1.0):
        x = np.clip(x, 0.0, 1.0) ** gammas
    sigma = rng.uniform(0.0, spec.noise_sigma_max)
    if sigma > 0:
        x = x + rng.normal(0.0, sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    if spec.channel_shuffle:
        x = x[..., rng.permutation(c)]
    return dp.with_pixels(np.ascontiguousarray(x, dtype=dtype))
