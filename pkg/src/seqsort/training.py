"""Epoch loop, validation, checkpointing and best-model selection.

All randomness is derived from ``(seed, purpose, epoch, index)`` so an
interrupted run resumes onto exactly the same trajectory.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import AugmentSpec, OversampleSpec, augment, derive_rng, oversample
from .errors import ConfigError, EmptySplit, VersionMismatch
from .labeling import label_table
from .nn import layers as L
from .nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn.model import DROPOUT_RATE, ModelParams, backward, forward, init_params
from .nn.optim import AdamState, CyclicLRSpec, adam_step, cyclic_lr
from .preprocess import INPUT_SIZE, Datapoint

log = logging.getLogger(__name__)

# purpose tags mixed into derived seeds
_INIT, _SHUFFLE, _AUG, _DROP = 0x1417, 0x5AFF, 0xA06, 0xD20

LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
LOG_FILE = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 480
    batch_size: int = 32
    lr: CyclicLRSpec = field(default_factory=CyclicLRSpec)
    oversample: OversampleSpec = field(default_factory=OversampleSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    checkpoint_dir: Path | None = None
    val_every: int = 1
    input_size: int = INPUT_SIZE
    dropout_rate: float = DROPOUT_RATE

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch normalization")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")


@dataclass
class TrainLogRecord:
    epoch: int
    lr_at_epoch_end: float
    train_loss: float
    val_loss_seq: float | None
    val_loss_plane: float | None
    val_loss_sum: float | None
    val_acc_seq: float | None
    val_acc_plane: float | None
    wall_seconds: float

    def to_json(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall time, for run-to-run comparison."""
        d = asdict(self)
        d.pop("wall_seconds")
        return d


@dataclass
class _RunState:
    params: ModelParams
    adam: AdamState
    epoch: int  # completed epochs
    best_epoch: int | None
    best_loss: float
    records: list[TrainLogRecord]
    best_params: ModelParams | None = None


# ---------------------------------------------------------------------------
# helpers


def targets(datapoints: Sequence[Datapoint]) -> tuple[np.ndarray, np.ndarray]:
    seq = np.array([dp.label.sequence.index for dp in datapoints], dtype=np.int64)
    plane = np.array([dp.label.plane.index for dp in datapoints], dtype=np.int64)
    return seq, plane


def validation_metrics(params: ModelParams, val_set: Sequence[Datapoint], batch_size: int = 32) -> dict:
    """Infer-mode mean cross-entropy per head and accuracies."""
    ts, tp = targets(val_set)
    seq_loss = plane_loss = 0.0
    seq_hit = plane_hit = 0
    for start in range(0, len(val_set), batch_size):
        chunk = val_set[start : start + batch_size]
        x = np.stack([dp.pixels for dp in chunk]).astype(params.dtype, copy=False)
        s, p, _ = forward(params, x, train=False)
        _, (_, _), (ls, lp) = L.two_head_loss(s, p, ts[start : start + len(chunk)], tp[start : start + len(chunk)])
        seq_loss += ls * len(chunk)
        plane_loss += lp * len(chunk)
        seq_hit += int((np.argmax(s, axis=1) == ts[start : start + len(chunk)]).sum())
        plane_hit += int((np.argmax(p, axis=1) == tp[start : start + len(chunk)]).sum())
    n = len(val_set)
    seq_loss, plane_loss = float(seq_loss / n), float(plane_loss / n)
    return {
        "val_loss_seq": seq_loss,
        "val_loss_plane": plane_loss,
        "val_loss_sum": seq_loss + plane_loss,
        "val_acc_seq": seq_hit / n,
        "val_acc_plane": plane_hit / n,
    }


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Full batches plus a final partial one when it has at least 2 samples."""
    out = [slice(i, i + batch_size) for i in range(0, n - n % batch_size, batch_size)]
    if n % batch_size >= 2:
        out.append(slice(n - n % batch_size, n))
    return out


def dataset_fingerprint(datapoints: Iterable[Datapoint]) -> str:
    h = hashlib.sha256()
    for dp in datapoints:
        h.update(f"{dp.source_series}|{dp.label}|{dp.study_instance_uid}\n".encode())
        h.update(np.ascontiguousarray(dp.pixels).tobytes())
    return h.hexdigest()


def _check_inputs(train_set, val_set, exclude_studies):
    if not train_set:
        raise EmptySplit("training set is empty")
    if not val_set:
        raise EmptySplit("validation set is empty")
    if any(dp.label is None for dp in (*train_set, *val_set)):
        raise ValueError("training and validation datapoints must be labeled")
    train_labels = {dp.label for dp in train_set}
    missing = {dp.label for dp in val_set} - train_labels
    if missing:
        raise ValueError(f"validation labels absent from training: {sorted(map(str, missing))}")
    held_out = {dp.study_instance_uid for dp in val_set} | set(exclude_studies)
    leaked = held_out & {dp.study_instance_uid for dp in train_set}
    if leaked:
        raise ValueError(f"{len(leaked)} held-out studies appear in the training set")
    return held_out


# ---------------------------------------------------------------------------
# epoch loop


def _run_epoch(state: _RunState, pool: list[Datapoint], config: TrainConfig, held_out: set[str]) -> float:
    epoch = state.epoch + 1
    order = derive_rng(config.seed, _SHUFFLE, epoch).permutation(len(pool))
    slices = batch_slices(len(pool), config.batch_size)
    nb = len(slices)
    total, count = 0.0, 0
    dtype = state.params.dtype
    for b, sl in enumerate(slices):
        idx = order[sl]
        batch = [pool[i] for i in idx]
        if any(dp.study_instance_uid in held_out for dp in batch):
            raise AssertionError("held-out study reached a training batch")
        x = np.stack([
            augment(dp, config.augment, derive_rng(config.seed, config.augment.seed, _AUG, epoch, int(i))).pixels
            for dp, i in zip(batch, idx)
        ]).astype(dtype, copy=False)
        ts, tp = targets(batch)
        drop_rng = derive_rng(config.seed, _DROP, epoch, b)
        s, p, cache = forward(state.params, x, train=True, rng=drop_rng, dropout_rate=config.dropout_rate)
        loss, (ds, dp_), _ = L.two_head_loss(s, p, ts, tp)
        grads = backward(state.params, cache, ds.astype(dtype), dp_.astype(dtype))
        lr = cyclic_lr(state.epoch + b / nb, config.lr)
        adam_step(state.params.weights, grads, state.adam, lr)
        total += loss * len(batch)
        count += len(batch)
    return total / count


def _log_path(config: TrainConfig) -> Path | None:
    return None if config.checkpoint_dir is None else Path(config.checkpoint_dir) / LOG_FILE


def _rng_state(config: TrainConfig, epoch: int) -> dict:
    return {"seed": config.seed, "next_epoch": epoch + 1, "scheme": "seedsequence(seed,purpose,epoch,index)"}


def _persist(state: _RunState, config: TrainConfig, fingerprint: str, improved: bool) -> None:
    if config.checkpoint_dir is None:
        return
    ckdir = Path(config.checkpoint_dir)
    if improved:
        rec = state.records[-1].comparable()
        save_checkpoint(ckdir / BEST_CKPT, Checkpoint(
            state.params, None, state.epoch, _rng_state(config, state.epoch),
            {"best_epoch": state.epoch, "val": rec},
        ))
    save_checkpoint(ckdir / LAST_CKPT, Checkpoint(
        state.params, state.adam, state.epoch, _rng_state(config, state.epoch),
        {
            "best_epoch": state.best_epoch,
            "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
            # wall time stays out so checkpoints of identical runs are bitwise equal
            "log": [r.comparable() for r in state.records],
            "train_fingerprint": fingerprint,
            "config_epochs": config.epochs,
        },
    ))


def _write_log(path: Path | None, records: list[TrainLogRecord]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps(r.to_json()) + "\n" for r in records))
    tmp.replace(path)


def _loop(state: _RunState, pool, val_set, config: TrainConfig, held_out, fingerprint) -> None:
    log_path = _log_path(config)
    while state.epoch < config.epochs:
        t0 = time.perf_counter()
        train_loss = _run_epoch(state, pool, config, held_out)
        state.epoch += 1
        metrics = dict.fromkeys(("val_loss_seq", "val_loss_plane", "val_loss_sum", "val_acc_seq", "val_acc_plane"))
        if state.epoch % config.val_every == 0 or state.epoch == config.epochs:
            metrics = validation_metrics(state.params, val_set, config.batch_size)
        rec = TrainLogRecord(
            epoch=state.epoch,
            lr_at_epoch_end=cyclic_lr(state.epoch, config.lr),
            train_loss=float(train_loss),
            wall_seconds=time.perf_counter() - t0,
            **metrics,
        )
        if not math.isfinite(rec.train_loss):
            raise FloatingPointError(f"non-finite training loss at epoch {state.epoch}")
        state.records.append(rec)
        improved = rec.val_loss_sum is not None and rec.val_loss_sum < state.best_loss
        if improved:
            state.best_loss, state.best_epoch = rec.val_loss_sum, state.epoch
            if config.checkpoint_dir is None:
                state.best_params = state.params.copy()
        _persist(state, config, fingerprint, improved)
        _write_log(log_path, state.records)
        log.info(
            "epoch %d/%d lr=%.3g train=%.4f val_sum=%s%s", state.epoch, config.epochs, rec.lr_at_epoch_end,
            rec.train_loss, "n/a" if rec.val_loss_sum is None else f"{rec.val_loss_sum:.4f}", " *" if improved else "",
        )


def _best(state: _RunState, config: TrainConfig) -> ModelParams:
    if config.checkpoint_dir is not None and state.best_epoch is not None:
        return load_checkpoint(Path(config.checkpoint_dir) / BEST_CKPT).params
    return state.best_params if state.best_params is not None else state.params


def _prepare(train_set, val_set, config, exclude_studies):
    held_out = _check_inputs(train_set, val_set, exclude_studies)
    size = config.input_size
    for dp in (*train_set, *val_set):
        if dp.pixels.shape != (size, size, 3):
            raise ValueError(f"datapoint {dp.source_series} has shape {dp.pixels.shape}, expected {(size, size, 3)}")
    pool = oversample(list(train_set), config.oversample)
    return held_out, pool, dataset_fingerprint(train_set)


def train(train_set: Sequence[Datapoint], val_set: Sequence[Datapoint], config: TrainConfig,
          exclude_studies: Iterable[str] = (), dtype=np.float32) -> tuple[ModelParams, list[TrainLogRecord]]:
    """Train from scratch; returns the parameters with the lowest summed validation loss and the log."""
    held_out, pool, fingerprint = _prepare(train_set, val_set, config, exclude_studies)
    params = init_params(derive_rng(config.seed, _INIT), config.input_size, dtype=dtype)
    state = _RunState(params, AdamState.zeros_like(params.weights), 0, None, math.inf, [])
    log.info("training on %d datapoints (%d after oversampling), validating on %d", len(train_set), len(pool), len(val_set))
    _loop(state, pool, val_set, config, held_out, fingerprint)
    return _best(state, config), state.records


def resume(checkpoint: str | Path, train_set: Sequence[Datapoint], val_set: Sequence[Datapoint], config: TrainConfig,
           exclude_studies: Iterable[str] = ()) -> tuple[ModelParams, list[TrainLogRecord]]:
    """Continue a run from its ``last.ckpt``. A finished run returns its stored best unchanged."""
    ckpt = load_checkpoint(checkpoint)
    if ckpt.params.labels != label_table():
        raise VersionMismatch("checkpoint label table differs from this build")
    if ckpt.adam is None or "log" not in ckpt.extra:
        raise VersionMismatch(f"{checkpoint} is not a resumable training checkpoint")
    if ckpt.params.input_size != config.input_size:
        raise ConfigError(f"checkpoint input size {ckpt.params.input_size} != configured {config.input_size}")
    if config.checkpoint_dir is None:
        config = _with_dir(config, Path(checkpoint).parent)
    records = _restore_records(ckpt.extra["log"], config)
    best_loss = ckpt.extra.get("best_loss")
    state = _RunState(ckpt.params, ckpt.adam, ckpt.epoch, ckpt.extra.get("best_epoch"),
                      math.inf if best_loss is None else best_loss, records)
    if state.epoch >= config.epochs:
        return _best(state, config), records
    held_out, pool, fingerprint = _prepare(train_set, val_set, config, exclude_studies)
    if fingerprint != ckpt.extra.get("train_fingerprint"):
        raise ConfigError("training set differs from the one the checkpoint was trained on")
    log.info("resuming at epoch %d of %d", state.epoch + 1, config.epochs)
    _loop(state, pool, val_set, config, held_out, fingerprint)
    return _best(state, config), state.records


def _restore_records(rows: list[dict], config: TrainConfig) -> list[TrainLogRecord]:
    """Checkpointed records plus wall times from the JSONL log when it is still there."""
    walls: dict[int, float] = {}
    path = _log_path(config)
    if path is not None and path.exists():
        walls = {r.epoch: r.wall_seconds for r in read_log(path)}
    return [TrainLogRecord(**r, wall_seconds=walls.get(r["epoch"], 0.0)) for r in rows]


def _with_dir(config: TrainConfig, ckdir: Path) -> TrainConfig:
    return replace(config, checkpoint_dir=ckdir)


def read_log(path: str | Path) -> list[TrainLogRecord]:
    return [TrainLogRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
