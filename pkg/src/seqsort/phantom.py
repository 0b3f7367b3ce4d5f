"""Synthetic, class-separable cardiac-like series for desk-scale runs.

Sequence class picks a texture family, plane class picks the field-of-view
envelope the texture is drawn in. Per-study nuisance (intensity scale and
offset, small rotation and shift, noise) varies within a class.

Texture assignment (sequence -> family), fixed so results compare across
machines:

    CineBSSFP    ring        EGE         gradient    FST2       noise band
    MOLLINative  checker     Perfusion   disc        T2StarMap  stripes
    TIScout      radial      WBLGE       blobs

Plane envelopes: ShortAxis circle, FourChamber wide ellipse, TwoChamber tall
ellipse, ThreeChamber diamond.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dicom import MR_IMAGE_SOP_CLASS, SECONDARY_CAPTURE_SOP_CLASS, Vendor, write_dicom
from .errors import ConfigError, SeqSortError
from .labeling import ADMISSIBLE, JointLabel, PlaneClass, SequenceClass
from .preprocess import Datapoint, read_pgm, stack_channels, write_pgm

S, P = SequenceClass, PlaneClass

TEXTURES: dict[SequenceClass, str] = {
    S.CineBSSFP: "ring",
    S.EGE: "gradient",
    S.FST2: "noise_band",
    S.MOLLINative: "checker",
    S.Perfusion: "disc",
    S.T2StarMap: "stripes",
    S.TIScout: "radial",
    S.WBLGE: "blobs",
}
ENVELOPES: dict[PlaneClass, str] = {
    P.ShortAxis: "circle",
    P.FourChamber: "wide_ellipse",
    P.TwoChamber: "tall_ellipse",
    P.ThreeChamber: "diamond",
}
_PLANE_TAG = {P.ShortAxis: "SA", P.FourChamber: "4CH", P.TwoChamber: "2CH", P.ThreeChamber: "3CH"}
_SEQ_TAG = {
    S.CineBSSFP: "cine", S.EGE: "EGE", S.FST2: "STIR", S.MOLLINative: "MOLLI_native",
    S.Perfusion: "perfusion", S.T2StarMap: "T2star", S.TIScout: "TI_scout", S.WBLGE: "PSIR",
}
DEFAULT_CLASSES: tuple[JointLabel, ...] = tuple(
    JointLabel(s, p)
    for s in TEXTURES
    for p in (P.TwoChamber, P.ThreeChamber, P.FourChamber, P.ShortAxis)
    if JointLabel(s, p) in ADMISSIBLE
)

MANUFACTURERS = {
    Vendor.VendorA: "Philips Medical Systems",
    Vendor.VendorB: "SIEMENS",
    Vendor.VendorC: "GE MEDICAL SYSTEMS",
}
_VENDOR_CYCLE = (Vendor.VendorA, Vendor.VendorB, Vendor.VendorC)

DISC_RADIUS = 0.42  # in normalized [-1, 1] image coordinates, centred
DISC_PERIOD = 0.16
# plane geometry must stay visible under sparse textures: a raised floor plus an outline
ENVELOPE_FLOOR = 0.4
RIM_WIDTH = 0.04
UID_ROOT = "1.2.826.0.1.3680043.9.7433"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class PhantomSpec:
    classes: tuple[JointLabel, ...] = DEFAULT_CLASSES
    studies_per_class: int = 10
    slices_per_series: tuple[int, int] = (4, 12)
    image_size: tuple[int, int] = (96, 112)
    seed: int = 0
    write_format: str = "dicom_fixture"  # or "pgm_triplet"
    secondary_captures: int = 0
    noise: float = 0.03

    def __post_init__(self):
        bad = [str(c) for c in self.classes if c not in ADMISSIBLE or c.sequence not in TEXTURES or c.plane not in ENVELOPES]
        if bad:
            raise ConfigError(f"phantom cannot render classes {bad}")
        lo, hi = self.slices_per_series
        if not 1 <= lo <= hi or self.studies_per_class < 1:
            raise ConfigError("invalid phantom sizes")
        if self.write_format not in ("dicom_fixture", "pgm_triplet"):
            raise ConfigError(f"unknown write_format {self.write_format!r}")


def description_for(label: JointLabel) -> str:
    return f"{_SEQ_TAG[label.sequence]}_{_PLANE_TAG[label.plane]}"


# ---------------------------------------------------------------------------
# rendering


def _grid(shape):
    h, w = shape
    v, u = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    return u, v


def _envelope(kind: str, u, v):
    """Soft object mask and a bright rim tracing its outline."""
    if kind == "circle":
        d = np.hypot(u, v) / 0.85
    elif kind == "wide_ellipse":
        d = np.hypot(u / 0.95, v / 0.6)
    elif kind == "tall_ellipse":
        d = np.hypot(u / 0.6, v / 0.95)
    else:
        d = np.abs(u) + np.abs(v)
    return np.clip((1.0 - d) / 0.04 + 0.5, 0.0, 1.0), np.exp(-(((d - 0.97) / RIM_WIDTH) ** 2))


_BLOBS = ((-0.35, -0.3), (0.3, -0.35), (0.0, 0.05), (-0.3, 0.35), (0.35, 0.3))


def _texture(kind: str, u, v, t: float, rng):
    r = np.hypot(u, v)
    if kind == "ring":
        return np.exp(-(((r - (0.45 + 0.08 * t)) / 0.08) ** 2))
    if kind == "gradient":
        return (u + 1) / 2
    if kind == "noise_band":
        band = np.abs(v - 0.1 * (t - 0.5)) < 0.25
        return band * rng.uniform(0.3, 1.0, size=u.shape)
    if kind == "checker":
        cell = 0.4
        return ((np.floor(u / cell + 0.2 * t) + np.floor(v / cell)) % 2).astype(float)
    if kind == "disc":
        # bright disc carrying a fine dot lattice; no other family has that frequency
        dots = np.cos(2 * np.pi * u / DISC_PERIOD) * np.cos(2 * np.pi * v / DISC_PERIOD)
        return (r < DISC_RADIUS) * (0.65 + 0.35 * dots)
    if kind == "stripes":
        return 0.5 + 0.5 * np.cos(2 * np.pi * (u / 0.4 + 0.2 * t))
    if kind == "radial":
        return 0.5 + 0.5 * np.cos(2 * np.pi * (2.5 * r - 0.3 * t))
    if kind == "blobs":
        out = np.zeros_like(u)
        for k, (bu, bv) in enumerate(_BLOBS):
            amp = 0.6 + 0.4 * np.cos(np.pi * (t + k / 5))
            out += amp * np.exp(-((u - bu) ** 2 + (v - bv) ** 2) / (2 * 0.12**2))
        return np.clip(out, 0, 1)
    raise ValueError(kind)


@dataclass
class _Nuisance:
    angle: float
    shift: tuple[float, float]
    scale: float
    offset: float


def _nuisance(rng) -> _Nuisance:
    return _Nuisance(
        angle=np.deg2rad(rng.uniform(-5, 5)),
        shift=(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)),
        scale=rng.uniform(300, 3000),
        offset=rng.uniform(0, 100),
    )


def render_slice(label: JointLabel, t: float, shape, nuisance: _Nuisance, rng, noise: float = 0.03) -> np.ndarray:
    """One slice as float intensities in [0, 1] before scanner scaling."""
    u, v = _grid(shape)
    c, s = np.cos(nuisance.angle), np.sin(nuisance.angle)
    uu = c * (u - nuisance.shift[0]) + s * (v - nuisance.shift[1])
    vv = -s * (u - nuisance.shift[0]) + c * (v - nuisance.shift[1])
    env, rim = _envelope(ENVELOPES[label.plane], uu, vv)
    tex = _texture(TEXTURES[label.sequence], uu, vv, t, rng)
    img = np.maximum(env * (ENVELOPE_FLOOR + (1 - ENVELOPE_FLOOR) * tex), rim)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def render_series(label: JointLabel, rng, n_slices: int, shape, noise: float = 0.03) -> list[np.ndarray]:
    """Slices as uint16 stored values, already in acquisition order."""
    nz = _nuisance(rng)
    out = []
    for i in range(n_slices):
        t = i / max(n_slices - 1, 1)
        img = render_slice(label, t, shape, nz, rng, noise)
        out.append(np.round(img * nz.scale + nz.offset).astype(np.uint16))
    return out


def disc_mask(size: int) -> np.ndarray:
    """Region of the disc on a size x size datapoint (study shift ignored)."""
    v, u = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    return np.hypot(u, v) < DISC_RADIUS


# ---------------------------------------------------------------------------
# writing


def _series_plan(spec: PhantomSpec):
    for ci, label in enumerate(spec.classes):
        for k in range(spec.studies_per_class):
            yield ci, k, label


def generate(spec: PhantomSpec, out_dir: str | Path) -> list[dict]:
    """Write the phantom tree and ``manifest.json``; returns the manifest rows."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SeqSortError(f"cannot create {out_dir}: {exc}") from exc
    rows = []
    for ci, k, label in _series_plan(spec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, ci, k]))
        vendor = _VENDOR_CYCLE[k % len(_VENDOR_CYCLE)]
        n = int(rng.integers(spec.slices_per_series[0], spec.slices_per_series[1] + 1))
        slices = render_series(label, rng, n, spec.image_size, spec.noise)
        study_uid = f"{UID_ROOT}.{spec.seed}.{ci + 1}.{k + 1}"
        series_uid = f"{study_uid}.1"
        desc = description_for(label)
        study_dir = out_dir / IMAGE_DIR / f"study_{ci + 1:02d}_{k + 1:02d}"
        study_dir.mkdir(parents=True, exist_ok=True)
        if spec.write_format == "pgm_triplet":
            files = _write_pgm_triplet(study_dir, slices)
            key = f"{study_uid}/{series_uid}"
        else:
            files, key = _write_dicom_series(study_dir, slices, label, vendor, study_uid, series_uid, desc, rng)
        rows.append({
            "series_key": key,
            "study_uid": study_uid,
            "vendor": vendor.value,
            "sequence": label.sequence.value,
            "plane": label.plane.value,
            "files": [str(Path(f).relative_to(out_dir)) for f in files],
        })
    if spec.write_format == "dicom_fixture" and spec.secondary_captures:
        _write_secondary_captures(out_dir, spec)
    (out_dir / "manifest.json").write_text(json.dumps(rows, indent=1) + "\n")
    return rows


def _write_pgm_triplet(study_dir: Path, slices) -> list[Path]:
    n = len(slices)
    picks = (0, 0, 1) if n == 2 else (0, (n - 1) // 2, n - 1)
    paths = []
    for name, idx in zip(("first", "middle", "last"), picks):
        img = slices[idx].astype(np.float64)
        lo, hi = img.min(), img.max()
        path = study_dir / f"{name}.pgm"
        write_pgm(path, (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img))
        paths.append(path)
    return paths


def _write_dicom_series(study_dir, slices, label, vendor, study_uid, series_uid, desc, rng):
    # VendorB exports split the series into two UIDs sharing the protocol name
    split = vendor is Vendor.VendorB and len(slices) > 1
    protocol = f"{desc}_prot"
    files = []
    for i, img in enumerate(slices):
        uid = f"{series_uid}.{i + 1}"
        series = f"{study_uid}.2" if split and i % 2 else series_uid
        attrs = {
            "SOPClassUID": MR_IMAGE_SOP_CLASS,
            "SOPInstanceUID": uid,
            "ImageType": ["ORIGINAL", "PRIMARY", "M"],
            "Modality": "MR",
            "Manufacturer": MANUFACTURERS[vendor],
            "SeriesDescription": desc,
            "ProtocolName": protocol,
            "StudyInstanceUID": study_uid,
            "SeriesInstanceUID": series,
            "InstanceNumber": i + 1,
            "ImagePositionPatient": [-100.0, -100.0, -40.0 + 8.0 * i],
            "ImageOrientationPatient": [1, 0, 0, 0, 1, 0],
            "RescaleSlope": 1.0,
            "RescaleIntercept": 0.0,
        }
        name = f"IM{rng.integers(0, 16**8):08x}.dcm"
        path = study_dir / name
        write_dicom(path, attrs, img, explicit=bool(i % 3))
        files.append(path)
    key = f"{study_uid}/protocol:{protocol}" if vendor is Vendor.VendorB else f"{study_uid}/{series_uid}"
    return files, key


def _write_secondary_captures(out_dir: Path, spec: PhantomSpec) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF, 0x5C]))
    for i in range(spec.secondary_captures):
        img = rng.integers(0, 255, size=spec.image_size, dtype=np.uint8)
        study_uid = f"{UID_ROOT}.{spec.seed}.1.1"
        write_dicom(out_dir / IMAGE_DIR / f"secondary_{i:02d}.dcm", {
            "SOPClassUID": SECONDARY_CAPTURE_SOP_CLASS,
            "SOPInstanceUID": f"{UID_ROOT}.{spec.seed}.99.{i}",
            "ImageType": ["DERIVED", "SECONDARY"],
            "Manufacturer": MANUFACTURERS[Vendor.VendorA],
            "SeriesDescription": "screen save",
            "StudyInstanceUID": study_uid,
            "SeriesInstanceUID": f"{study_uid}.99",
            "InstanceNumber": 1,
        }, img)


# ---------------------------------------------------------------------------
# reading back PGM triplets


def load_pgm_datapoints(root: str | Path, rows: list[dict], size: int = 256, dtype=np.float32) -> list[Datapoint]:
    root = Path(root)
    out = []
    for row in rows:
        images = [read_pgm(root / f).astype(np.float64) for f in row["files"]]
        out.append(Datapoint(
            pixels=stack_channels(images, size, dtype),
            label=JointLabel(SequenceClass(row["sequence"]), PlaneClass(row["plane"])),
            study_instance_uid=row["study_uid"],
            vendor=Vendor(row["vendor"]),
            source_series=row["series_key"],
        ))
    return out
