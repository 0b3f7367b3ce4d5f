"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"SQSRTCK\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header: label tables, input size, dtype, epoch,
              RNG state, Adam hyperparameters and step, CRC32 of the payload,
              and a tensor table of (section, name, shape, offset, nbytes)
    ...       payload: raw little-endian tensors back to back

Sections are ``weights``, ``state`` (batch-norm running stats), ``adam_m``
and ``adam_v``. Files are written to a temporary name and renamed.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointIOFailure, CorruptCheckpoint, VersionMismatch
from ..labeling import TAXONOMY_VERSION, label_table
from .model import ModelParams
from .optim import AdamState

MAGIC = b"SQSRTCK\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    p = ckpt.params
    sections = [("weights", p.weights), ("state", p.state)]
    if ckpt.adam is not None:
        sections += [("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)]
    table, chunks, offset = [], [], 0
    for section, arrays in sections:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            table.append({"section": section, "name": name, "shape": list(arr.shape),
                          "dtype": arr.dtype.newbyteorder("<").str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "taxonomy_version": TAXONOMY_VERSION,
        "labels": p.labels,
        "input_size": p.input_size,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "adam": None if ckpt.adam is None else {
            "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon, "step": ckpt.adam.step,
        },
        "extra": ckpt.extra,
        "payload_crc32": zlib.crc32(payload),
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, expect_labels: bool = True) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    payload = blob[16 + hlen :]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    if expect_labels and (header["labels"] != label_table() or header["taxonomy_version"] != TAXONOMY_VERSION):
        raise VersionMismatch(f"{path}: label table differs from this build's taxonomy")

    sections: dict[str, dict[str, np.ndarray]] = {"weights": {}, "state": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CorruptCheckpoint(f"{path}: tensor {t['name']} truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        sections[t["section"]][t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    params = ModelParams(sections["weights"], sections["state"], header["input_size"], header["labels"])
    adam = None
    if header["adam"] is not None:
        adam = AdamState(m=sections["adam_m"], v=sections["adam_v"], **header["adam"])
    return Checkpoint(params, adam, header["epoch"], header["rng_state"], header["extra"])
