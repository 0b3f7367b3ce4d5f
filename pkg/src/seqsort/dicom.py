"""Minimal DICOM Part-10 reader/writer and vendor-aware series grouping.

Only uncompressed little-endian data (explicit or implicit VR) is handled.
The reader extracts the handful of attributes the sorting pipeline needs and
records where the pixel payload lives, so pixels are decoded lazily.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    MalformedStream,
    MissingMandatoryAttribute,
    PixelDecodeFailure,
    UnsupportedTransferSyntax,
)

IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
SUPPORTED_TRANSFER_SYNTAXES = {IMPLICIT_VR_LE, EXPLICIT_VR_LE}
SECONDARY_CAPTURE_SOP_CLASS = "1.2.840.10008.5.1.4.1.1.7"
MR_IMAGE_SOP_CLASS = "1.2.840.10008.5.1.4.1.1.4"

_UNDEFINED = 0xFFFFFFFF
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_ITEM = (0xFFFE, 0xE000)
_ITEM_END = (0xFFFE, 0xE00D)
_SEQ_END = (0xFFFE, 0xE0DD)

# keyword -> (tag, VR). Covers what we read plus what the fixture writer emits.
DICTIONARY: dict[str, tuple[tuple[int, int], str]] = {
    "FileMetaInformationGroupLength": ((0x0002, 0x0000), "UL"),
    "FileMetaInformationVersion": ((0x0002, 0x0001), "OB"),
    "MediaStorageSOPClassUID": ((0x0002, 0x0002), "UI"),
    "MediaStorageSOPInstanceUID": ((0x0002, 0x0003), "UI"),
    "TransferSyntaxUID": ((0x0002, 0x0010), "UI"),
    "ImplementationClassUID": ((0x0002, 0x0012), "UI"),
    "ImageType": ((0x0008, 0x0008), "CS"),
    "SOPClassUID": ((0x0008, 0x0016), "UI"),
    "SOPInstanceUID": ((0x0008, 0x0018), "UI"),
    "Modality": ((0x0008, 0x0060), "CS"),
    "Manufacturer": ((0x0008, 0x0070), "LO"),
    "SeriesDescription": ((0x0008, 0x103E), "LO"),
    "PatientID": ((0x0010, 0x0020), "LO"),
    "ProtocolName": ((0x0018, 0x1030), "LO"),
    "StudyInstanceUID": ((0x0020, 0x000D), "UI"),
    "SeriesInstanceUID": ((0x0020, 0x000E), "UI"),
    "SeriesNumber": ((0x0020, 0x0011), "IS"),
    "InstanceNumber": ((0x0020, 0x0013), "IS"),
    "ImagePositionPatient": ((0x0020, 0x0032), "DS"),
    "ImageOrientationPatient": ((0x0020, 0x0037), "DS"),
    "SamplesPerPixel": ((0x0028, 0x0002), "US"),
    "PhotometricInterpretation": ((0x0028, 0x0004), "CS"),
    "Rows": ((0x0028, 0x0010), "US"),
    "Columns": ((0x0028, 0x0011), "US"),
    "BitsAllocated": ((0x0028, 0x0100), "US"),
    "BitsStored": ((0x0028, 0x0101), "US"),
    "HighBit": ((0x0028, 0x0102), "US"),
    "PixelRepresentation": ((0x0028, 0x0103), "US"),
    "RescaleIntercept": ((0x0028, 0x1052), "DS"),
    "RescaleSlope": ((0x0028, 0x1053), "DS"),
    "PixelData": ((0x7FE0, 0x0010), "OW"),
}
_TAG_TO_KEYWORD = {tag: kw for kw, (tag, _) in DICTIONARY.items()}
_TAG_TO_VR = {tag: vr for _, (tag, vr) in DICTIONARY.items()}
_TAG = {kw: tag for kw, (tag, _) in DICTIONARY.items()}


class Vendor(str, enum.Enum):
    VendorA = "VendorA"  # whole sequence exported as one series
    VendorB = "VendorB"  # image types split into series sharing a protocol name
    VendorC = "VendorC"  # same export style as VendorA
    Unknown = "Unknown"


@dataclass(frozen=True)
class VendorMap:
    """Case-insensitive substring table from Manufacturer to Vendor; first hit wins."""

    entries: tuple[tuple[str, Vendor], ...]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str | Vendor]]) -> "VendorMap":
        return cls(tuple((s.strip().lower(), Vendor(v)) for s, v in pairs))

    def lookup(self, manufacturer: str | None) -> Vendor:
        text = (manufacturer or "").lower()
        for needle, vendor in self.entries:
            if needle and needle in text:
                return vendor
        return Vendor.Unknown


DEFAULT_VENDOR_MAP = VendorMap.from_pairs(
    [
        ("philips", Vendor.VendorA),
        ("siemens", Vendor.VendorB),
        ("ge medical", Vendor.VendorC),
        ("ge healthcare", Vendor.VendorC),
        ("general electric", Vendor.VendorC),
    ]
)


@dataclass(frozen=True)
class DicomImageMeta:
    file_path: str
    series_description: str
    series_instance_uid: str
    instance_number: int
    protocol_name: str | None
    manufacturer: str
    study_instance_uid: str
    image_position: tuple[float, float, float] | None
    image_type_terms: tuple[str, ...]
    rows: int
    columns: int
    pixel_bits_allocated: int
    pixel_representation: str  # "unsigned" | "signed"
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    image_orientation: tuple[float, ...] | None = None
    sop_class_uid: str = ""
    samples_per_pixel: int = 1
    transfer_syntax_uid: str = EXPLICIT_VR_LE
    pixel_offset: int = field(default=0, compare=False)
    pixel_length: int = field(default=0, compare=False)


# ---------------------------------------------------------------------------
# reading


def _read_element_header(data: bytes, pos: int, explicit: bool):
    if pos + 8 > len(data):
        raise MalformedStream(f"truncated element header at offset {pos}")
    group, elem = struct.unpack_from("<HH", data, pos)
    tag = (group, elem)
    if group == 0xFFFE:
        (length,) = struct.unpack_from("<I", data, pos + 4)
        return tag, None, length, pos + 8
    if not explicit:
        (length,) = struct.unpack_from("<I", data, pos + 4)
        return tag, _TAG_TO_VR.get(tag), length, pos + 8
    vr = bytes(data[pos + 4 : pos + 6])
    if not (vr.isalpha() and vr.isupper()):
        raise MalformedStream(f"invalid VR {vr!r} for tag {group:04X},{elem:04X}")
    if vr in _LONG_VRS:
        if pos + 12 > len(data):
            raise MalformedStream(f"truncated element header at offset {pos}")
        (length,) = struct.unpack_from("<I", data, pos + 8)
        return tag, vr.decode(), length, pos + 12
    (length,) = struct.unpack_from("<H", data, pos + 6)
    return tag, vr.decode(), length, pos + 8


def _skip_sequence(data: bytes, pos: int, explicit: bool) -> int:
    """Skip an undefined-length sequence body; returns offset after its delimiter."""
    while True:
        tag, _, length, pos = _read_element_header(data, pos, explicit)
        if tag == _SEQ_END:
            return pos
        if tag != _ITEM:
            raise MalformedStream(f"expected item tag, got {tag[0]:04X},{tag[1]:04X}")
        if length == _UNDEFINED:
            pos = _skip_item(data, pos, explicit)
        else:
            pos += length
        if pos > len(data):
            raise MalformedStream("sequence item runs past end of stream")


def _skip_item(data: bytes, pos: int, explicit: bool) -> int:
    while True:
        tag, vr, length, pos = _read_element_header(data, pos, explicit)
        if tag == _ITEM_END:
            return pos
        if length == _UNDEFINED:
            # UN with undefined length is encoded as implicit VR
            pos = _skip_sequence(data, pos, explicit and vr != "UN")
        else:
            pos += length
        if pos > len(data):
            raise MalformedStream("item element runs past end of stream")


def _text(raw: bytes) -> str:
    return raw.decode("latin-1").strip("\x00 ")


def _multi(raw: bytes) -> list[str]:
    text = _text(raw)
    return [t.strip() for t in text.split("\\")] if text else []


def _us(raw: bytes) -> int:
    if len(raw) < 2:
        raise MalformedStream("US value shorter than 2 bytes")
    return struct.unpack_from("<H", raw)[0]


def parse_dicom_header(data: bytes, file_path: str | Path = "") -> DicomImageMeta:
    """Parse the attributes needed for sorting from an in-memory Part-10 stream."""
    data = bytes(data)
    if len(data) >= 132 and data[128:132] == b"DICM":
        pos = 132
    elif len(data) >= 8 and data[:2] == b"\x02\x00":
        pos = 0
    else:
        raise MalformedStream("missing DICM magic and no group-2 meta element at start")

    meta_values: dict[tuple[int, int], bytes] = {}
    while pos + 2 <= len(data) and struct.unpack_from("<H", data, pos)[0] == 0x0002:
        tag, _, length, pos = _read_element_header(data, pos, explicit=True)
        if length == _UNDEFINED or pos + length > len(data):
            raise MalformedStream("truncated file meta element")
        meta_values[tag] = data[pos : pos + length]
        pos += length
    if _TAG["TransferSyntaxUID"] not in meta_values:
        raise MalformedStream("file meta group has no TransferSyntaxUID")
    ts = _text(meta_values[_TAG["TransferSyntaxUID"]])
    if ts not in SUPPORTED_TRANSFER_SYNTAXES:
        raise UnsupportedTransferSyntax(f"transfer syntax {ts} is not supported")
    explicit = ts == EXPLICIT_VR_LE

    values: dict[tuple[int, int], bytes] = {}
    pixel_offset = pixel_length = None
    n = len(data)
    while pos < n:
        tag, vr, length, pos = _read_element_header(data, pos, explicit)
        if tag == _TAG["PixelData"]:
            if length == _UNDEFINED:
                raise UnsupportedTransferSyntax("encapsulated pixel data")
            if pos + length > n:
                raise MalformedStream("pixel data truncated")
            pixel_offset, pixel_length = pos, length
            pos += length
            continue
        if length == _UNDEFINED:
            pos = _skip_sequence(data, pos, explicit and vr != "UN")
            continue
        if pos + length > n:
            raise MalformedStream(f"element {tag[0]:04X},{tag[1]:04X} truncated")
        if tag in _TAG_TO_KEYWORD:
            values[tag] = data[pos : pos + length]
        pos += length

    def get(keyword: str) -> bytes | None:
        return values.get(_TAG[keyword])

    def required(keyword: str) -> bytes:
        raw = get(keyword)
        if raw is None or (DICTIONARY[keyword][1] in ("UI", "LO") and not _text(raw)):
            raise MissingMandatoryAttribute(f"{keyword} absent in {file_path or '<stream>'}")
        return raw

    series_uid = _text(required("SeriesInstanceUID"))
    if pixel_offset is None:
        raise MissingMandatoryAttribute(f"PixelData absent in {file_path or '<stream>'}")
    study_uid = _text(required("StudyInstanceUID"))
    rows, cols = _us(required("Rows")), _us(required("Columns"))
    bits = _us(required("BitsAllocated"))
    if bits not in (8, 16):
        raise PixelDecodeFailure(f"BitsAllocated={bits} not supported")
    rep = _us(get("PixelRepresentation")) if get("PixelRepresentation") is not None else 0
    samples = _us(get("SamplesPerPixel")) if get("SamplesPerPixel") is not None else 1
    if rows <= 0 or cols <= 0:
        raise PixelDecodeFailure("Rows and Columns must be positive")
    expected = rows * cols * samples * bits // 8
    # odd-length 8-bit payloads carry one pad byte
    if pixel_length not in (expected, expected + (expected % 2)):
        raise PixelDecodeFailure(
            f"pixel payload {pixel_length} bytes, expected {expected} for {rows}x{cols}x{samples}"
        )

    def floats(keyword: str) -> tuple[float, ...] | None:
        raw = get(keyword)
        if raw is None or not _text(raw):
            return None
        try:
            return tuple(float(v) for v in _multi(raw))
        except ValueError as exc:
            raise MalformedStream(f"bad {keyword}: {_text(raw)!r}") from exc

    position = floats("ImagePositionPatient")
    if position is not None and len(position) != 3:
        raise MalformedStream("ImagePositionPatient must have 3 values")
    orientation = floats("ImageOrientationPatient")
    if orientation is not None and len(orientation) != 6:
        raise MalformedStream("ImageOrientationPatient must have 6 values")
    slope = floats("RescaleSlope")
    intercept = floats("RescaleIntercept")
    instance_raw = get("InstanceNumber")
    try:
        instance = int(_text(instance_raw)) if instance_raw is not None and _text(instance_raw) else 0
    except ValueError as exc:
        raise MalformedStream(f"bad InstanceNumber {_text(instance_raw)!r}") from exc
    protocol = get("ProtocolName")
    protocol_text = _text(protocol) if protocol is not None else ""

    return DicomImageMeta(
        file_path=str(file_path),
        series_description=_text(get("SeriesDescription") or b""),
        series_instance_uid=series_uid,
        instance_number=max(instance, 0),
        protocol_name=protocol_text or None,
        manufacturer=_text(get("Manufacturer") or b""),
        study_instance_uid=study_uid,
        image_position=position,
        image_type_terms=tuple(t.upper() for t in _multi(get("ImageType") or b"")),
        rows=rows,
        columns=cols,
        pixel_bits_allocated=bits,
        pixel_representation="signed" if rep == 1 else "unsigned",
        rescale_slope=slope[0] if slope else 1.0,
        rescale_intercept=intercept[0] if intercept else 0.0,
        image_orientation=orientation,
        sop_class_uid=_text(get("SOPClassUID") or b""),
        samples_per_pixel=samples,
        transfer_syntax_uid=ts,
        pixel_offset=pixel_offset,
        pixel_length=pixel_length,
    )


def read_dicom(path: str | Path) -> DicomImageMeta:
    with open(path, "rb") as fh:
        return parse_dicom_header(fh.read(), file_path=path)


def decode_pixels(meta: DicomImageMeta, data: bytes | None = None) -> np.ndarray:
    """Stored pixel values as a (rows, columns) integer array.

    Multi-sample images are averaged to a single plane.
    """
    try:
        if data is None:
            with open(meta.file_path, "rb") as fh:
                fh.seek(meta.pixel_offset)
                payload = fh.read(meta.pixel_length)
        else:
            payload = bytes(data[meta.pixel_offset : meta.pixel_offset + meta.pixel_length])
    except OSError as exc:
        raise PixelDecodeFailure(f"cannot read pixels of {meta.file_path}: {exc}") from exc
    signed = meta.pixel_representation == "signed"
    dtype = {8: "i1" if signed else "u1", 16: "<i2" if signed else "<u2"}[meta.pixel_bits_allocated]
    count = meta.rows * meta.columns * meta.samples_per_pixel
    if len(payload) < count * meta.pixel_bits_allocated // 8:
        raise PixelDecodeFailure(f"pixel payload of {meta.file_path} is short")
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    if meta.samples_per_pixel == 1:
        return arr.reshape(meta.rows, meta.columns)
    return arr.reshape(meta.rows, meta.columns, meta.samples_per_pixel).mean(axis=2)


def rescaled_pixels(meta: DicomImageMeta, data: bytes | None = None) -> np.ndarray:
    stored = decode_pixels(meta, data)
    return stored.astype(np.float64) * meta.rescale_slope + meta.rescale_intercept


# ---------------------------------------------------------------------------
# writing (fixtures and phantom trees)


def _pad(raw: bytes, vr: str) -> bytes:
    if len(raw) % 2:
        raw += b"\x00" if vr in ("UI", "OB", "UN") else b" "
    return raw


def encode_value(vr: str, value) -> bytes:
    if isinstance(value, bytes):
        return _pad(value, vr)
    if vr == "US":
        vals = value if isinstance(value, (list, tuple)) else [value]
        return b"".join(struct.pack("<H", int(v)) for v in vals)
    if vr == "UL":
        return struct.pack("<I", int(value))
    if vr == "DS":
        vals = value if isinstance(value, (list, tuple)) else [value]
        return _pad("\\".join(format(float(v), ".10g") for v in vals).encode(), vr)
    if vr == "IS":
        return _pad(str(int(value)).encode(), vr)
    if isinstance(value, (list, tuple)):
        value = "\\".join(value)
    return _pad(str(value).encode("latin-1"), vr)


def encode_element(tag: tuple[int, int], vr: str, raw: bytes, explicit: bool, undefined=False) -> bytes:
    length = _UNDEFINED if undefined else len(raw)
    head = struct.pack("<HH", *tag)
    if not explicit:
        return head + struct.pack("<I", length) + raw
    if vr.encode() in _LONG_VRS:
        return head + vr.encode() + b"\x00\x00" + struct.pack("<I", length) + raw
    return head + vr.encode() + struct.pack("<H", length) + raw


def write_dicom(
    path: str | Path | None,
    attrs: dict,
    pixels: np.ndarray | None,
    *,
    explicit: bool = True,
    preamble: bool = True,
    transfer_syntax: str | None = None,
    extra_elements: Sequence[tuple[tuple[int, int], bytes]] = (),
) -> bytes:
    """Serialize a single-frame dataset. Keys of ``attrs`` are DICTIONARY keywords.

    ``extra_elements`` are (tag, already-encoded element bytes) spliced in tag
    order, which lets tests plant sequences or private data.
    """
    ts = transfer_syntax or (EXPLICIT_VR_LE if explicit else IMPLICIT_VR_LE)
    attrs = dict(attrs)
    if pixels is not None:
        pixels = np.asarray(pixels)
        if pixels.dtype.itemsize == 1:
            bits = 8
        else:
            pixels = pixels.astype("<i2" if pixels.dtype.kind == "i" else "<u2")
            bits = 16
        attrs.setdefault("Rows", pixels.shape[0])
        attrs.setdefault("Columns", pixels.shape[1])
        attrs.setdefault("BitsAllocated", bits)
        attrs.setdefault("BitsStored", bits)
        attrs.setdefault("HighBit", bits - 1)
        attrs.setdefault("PixelRepresentation", 1 if pixels.dtype.kind == "i" else 0)
        attrs.setdefault("SamplesPerPixel", 1)
        attrs.setdefault("PhotometricInterpretation", "MONOCHROME2")

    body: list[tuple[tuple[int, int], bytes]] = []
    for kw, value in attrs.items():
        if value is None:
            continue
        tag, vr = DICTIONARY[kw]
        if tag[0] == 0x0002:
            continue
        body.append((tag, encode_element(tag, vr, encode_value(vr, value), explicit)))
    if pixels is not None:
        tag = _TAG["PixelData"]
        vr = "OB" if pixels.dtype.itemsize == 1 else "OW"
        body.append((tag, encode_element(tag, vr, _pad(pixels.tobytes(), "OB"), explicit)))
    body.extend(extra_elements)
    body.sort(key=lambda item: item[0])

    meta_items = [
        ("FileMetaInformationVersion", b"\x00\x01"),
        ("MediaStorageSOPClassUID", attrs.get("SOPClassUID", MR_IMAGE_SOP_CLASS)),
        ("MediaStorageSOPInstanceUID", attrs.get("SOPInstanceUID", "1.2.3.4")),
        ("TransferSyntaxUID", ts),
        ("ImplementationClassUID", "1.2.826.0.1.3680043.10.1"),
    ]
    meta = b""
    for kw, value in meta_items:
        tag, vr = DICTIONARY[kw]
        meta += encode_element(tag, vr, encode_value(vr, value), explicit=True)
    tag, vr = DICTIONARY["FileMetaInformationGroupLength"]
    meta = encode_element(tag, vr, encode_value(vr, len(meta)), explicit=True) + meta

    out = (b"\x00" * 128 + b"DICM" if preamble else b"") + meta + b"".join(e for _, e in body)
    if path is not None:
        Path(path).write_bytes(out)
    return out


# ---------------------------------------------------------------------------
# series assembly


def is_secondary_capture(meta: DicomImageMeta) -> bool:
    return "SECONDARY" in meta.image_type_terms or meta.sop_class_uid == SECONDARY_CAPTURE_SOP_CLASS


@dataclass(frozen=True)
class SeriesRecord:
    group_key: str
    vendor: Vendor
    study_instance_uid: str
    members: tuple[DicomImageMeta, ...]
    representative_description: str

    @property
    def protocol_name(self) -> str | None:
        return self.members[0].protocol_name


def group_key_for(meta: DicomImageMeta, vendor: Vendor) -> str:
    if vendor is Vendor.VendorB and meta.protocol_name:
        return f"{meta.study_instance_uid}/protocol:{meta.protocol_name}"
    return f"{meta.study_instance_uid}/{meta.series_instance_uid}"


def _slice_normal(members: Sequence[DicomImageMeta]) -> np.ndarray | None:
    # summed in path order so the result does not depend on input order
    total = np.zeros(3)
    for m in sorted(members, key=lambda m: m.file_path):
        o = np.asarray(m.image_orientation, dtype=float)
        total += np.cross(o[:3], o[3:])
    norm = np.linalg.norm(total)
    return total / norm if norm > 0 else None


def sort_members(members: Sequence[DicomImageMeta]) -> tuple[DicomImageMeta, ...]:
    normal = None
    if all(m.image_position is not None and m.image_orientation is not None for m in members):
        normal = _slice_normal(members)
    if normal is None:
        return tuple(sorted(members, key=lambda m: (m.instance_number, m.file_path)))

    def key(m: DicomImageMeta):
        proj = round(float(np.dot(m.image_position, normal)), 6) + 0.0
        return (proj, m.instance_number, m.file_path)

    return tuple(sorted(members, key=key))


def group_series(metas: Sequence[DicomImageMeta], vendor_map: VendorMap = DEFAULT_VENDOR_MAP) -> list[SeriesRecord]:
    """Group parsed images into series records, ordered by group key."""
    if not metas:
        raise EmptyInput("no images to group")
    groups: dict[str, list[DicomImageMeta]] = {}
    for m in metas:
        key = group_key_for(m, vendor_map.lookup(m.manufacturer))
        groups.setdefault(key, []).append(m)
    records = []
    for key in sorted(groups):
        members = sort_members(groups[key])
        records.append(
            SeriesRecord(
                group_key=key,
                vendor=vendor_map.lookup(members[0].manufacturer),
                study_instance_uid=members[0].study_instance_uid,
                members=members,
                representative_description=members[0].series_description,
            )
        )
    return records
