"""Series -> fixed-shape network input."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dicom import DicomImageMeta, SeriesRecord, Vendor, rescaled_pixels
from .labeling import JointLabel

INPUT_SIZE = 256


@dataclass(frozen=True, eq=False)
class Datapoint:
    pixels: np.ndarray  # (size, size, 3), values in [0, 1]
    label: JointLabel | None
    study_instance_uid: str
    vendor: Vendor
    source_series: str

    def with_pixels(self, pixels: np.ndarray) -> "Datapoint":
        return replace(self, pixels=pixels)


def select_three(record: SeriesRecord) -> tuple[DicomImageMeta, DicomImageMeta, DicomImageMeta]:
    """First, middle and last member; short series repeat the first image."""
    m = record.members
    n = len(m)
    if n == 0:
        raise ValueError("series has no members")
    if n == 2:
        return m[0], m[0], m[1]
    return m[0], m[(n - 1) // 2], m[n - 1]


def resize_bilinear(image: np.ndarray, size: int | tuple[int, int] = INPUT_SIZE) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    out_h, out_w = (size, size) if isinstance(size, int) else size
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize_minmax(channel: np.ndarray) -> np.ndarray:
    channel = np.asarray(channel, dtype=np.float64)
    lo, hi = channel.min(), channel.max()
    if hi == lo:
        return np.zeros_like(channel)
    return np.clip((channel - lo) / (hi - lo), 0.0, 1.0)


def prepare_channel(image: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    # Normalizing before the resize as well makes the result exactly invariant
    # to affine intensity changes; the final normalization is what defines it.
    return normalize_minmax(resize_bilinear(normalize_minmax(image), size))


def stack_channels(images, size: int = INPUT_SIZE, dtype=np.float32) -> np.ndarray:
    return np.stack([prepare_channel(img, size) for img in images], axis=-1).astype(dtype)


def build_datapoint(
    record: SeriesRecord,
    label: JointLabel | None,
    size: int = INPUT_SIZE,
    dtype=np.float32,
) -> Datapoint:
    """Decode, rescale, resize and normalize the first/middle/last images."""
    cache: dict[str, np.ndarray] = {}
    images = []
    for meta in select_three(record):
        if meta.file_path not in cache:
            cache[meta.file_path] = rescaled_pixels(meta)
        images.append(cache[meta.file_path])
    return Datapoint(
        pixels=stack_channels(images, size, dtype),
        label=label,
        study_instance_uid=record.study_instance_uid,
        vendor=record.vendor,
        source_series=record.group_key,
    )


# ---------------------------------------------------------------------------
# PGM (P5) helpers, used for debug dumps and heatmaps


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)


def dump_datapoint(dp: Datapoint, out_dir: str | Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, name in enumerate(("first", "middle", "last")):
        path = out_dir / f"{stem}_{name}.pgm"
        write_pgm(path, dp.pixels[..., c])
        paths.append(path)
    return paths
