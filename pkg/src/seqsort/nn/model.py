"""The two-head convolutional classifier: four conv blocks, two dense layers,
a 17-way sequence head and a 10-way plane head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from ..labeling import PLANES, SEQUENCES, label_table
from . import layers as L

CONV_FILTERS = (32, 32, 64, 128)
DENSE_UNITS = (256, 64)
N_SEQUENCE = len(SEQUENCES)
N_PLANE = len(PLANES)
DROPOUT_RATE = 0.2


def layer_shapes(input_size: int = 256, in_channels: int = 3) -> dict[str, tuple[int, ...]]:
    """Learnable parameter shapes, in the canonical (checkpoint) order."""
    if input_size % 16:
        raise ShapeMismatch(f"input size must be divisible by 16, got {input_size}")
    shapes: dict[str, tuple[int, ...]] = {}
    c = in_channels
    for i, f in enumerate(CONV_FILTERS, 1):
        shapes[f"conv{i}.w"] = (3, 3, c, f)
        shapes[f"conv{i}.b"] = (f,)
        shapes[f"bn{i}.gamma"] = (f,)
        shapes[f"bn{i}.beta"] = (f,)
        c = f
    flat = (input_size // 16) ** 2 * c
    for i, units in enumerate(DENSE_UNITS, 1):
        shapes[f"dense{i}.w"] = (flat, units)
        shapes[f"dense{i}.b"] = (units,)
        shapes[f"bnd{i}.gamma"] = (units,)
        shapes[f"bnd{i}.beta"] = (units,)
        flat = units
    shapes["head_seq.w"] = (flat, N_SEQUENCE)
    shapes["head_seq.b"] = (N_SEQUENCE,)
    shapes["head_plane.w"] = (flat, N_PLANE)
    shapes["head_plane.b"] = (N_PLANE,)
    return shapes


def _bn_names():
    return [f"bn{i}" for i in range(1, 5)] + ["bnd1", "bnd2"]


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    state: dict[str, np.ndarray]  # batch-norm running statistics
    input_size: int = 256
    labels: dict[str, list[str]] = field(default_factory=label_table)

    @property
    def dtype(self):
        return self.weights["conv1.w"].dtype

    def count(self) -> int:
        return int(sum(a.size for a in self.weights.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.state.items()},
            self.input_size,
            {k: list(v) for k, v in self.labels.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.state.items()},
            self.input_size,
            {k: list(v) for k, v in self.labels.items()},
        )


def init_params(rng: np.random.Generator, input_size: int = 256, dtype=np.float64) -> ModelParams:
    weights = {}
    for name, shape in layer_shapes(input_size).items():
        if name.endswith(".w"):
            weights[name] = L.he_normal(shape, rng, dtype)
        elif name.endswith(".gamma"):
            weights[name] = np.ones(shape, dtype)
        else:
            weights[name] = np.zeros(shape, dtype)
    state = {}
    for bn in _bn_names():
        n = weights[f"{bn}.gamma"].shape[0]
        state[f"{bn}.mean"] = np.zeros(n, dtype)
        state[f"{bn}.var"] = np.ones(n, dtype)
    return ModelParams(weights, state, input_size)


def zero_params(input_size: int = 256, dtype=np.float64) -> ModelParams:
    p = init_params(np.random.default_rng(0), input_size, dtype)
    for k, v in p.weights.items():
        if k.endswith(".w"):
            v[...] = 0
    return p


def forward(params: ModelParams, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
            dropout_rate: float = DROPOUT_RATE):
    """Return ``(seq_logits, plane_logits, cache)``.

    Train mode uses batch statistics (updating the running ones in place) and
    active dropout drawn from ``rng``.
    """
    s = params.input_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ShapeMismatch(f"expected input (N, {s}, {s}, 3), got {x.shape}")
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    w, st = params.weights, params.state
    h = x.astype(params.dtype, copy=False)
    cache: dict = {"blocks": []}
    for i in range(1, 5):
        h, c_conv = L.conv2d_forward(h, w[f"conv{i}.w"], w[f"conv{i}.b"])
        h, c_bn = L.batchnorm_forward(h, w[f"bn{i}.gamma"], w[f"bn{i}.beta"], st[f"bn{i}.mean"], st[f"bn{i}.var"], train)
        h, c_relu = L.relu_forward(h)
        if i == 4:
            cache["features"] = h
        h, c_pool = L.maxpool2_forward(h)
        h, c_drop = L.dropout_forward(h, dropout_rate, train, rng, spatial=True)
        cache["blocks"].append((c_conv, c_bn, c_relu, c_pool, c_drop))
    cache["flat_shape"] = h.shape
    h = h.reshape(h.shape[0], -1)
    cache["dense"] = []
    for i in (1, 2):
        h, c_fc = L.dense_forward(h, w[f"dense{i}.w"], w[f"dense{i}.b"])
        h, c_bn = L.batchnorm_forward(h, w[f"bnd{i}.gamma"], w[f"bnd{i}.beta"], st[f"bnd{i}.mean"], st[f"bnd{i}.var"], train)
        h, c_relu = L.relu_forward(h)
        h, c_drop = L.dropout_forward(h, dropout_rate, train, rng, spatial=False)
        cache["dense"].append((c_fc, c_bn, c_relu, c_drop))
    seq, cache["head_seq"] = L.dense_forward(h, w["head_seq.w"], w["head_seq.b"])
    plane, cache["head_plane"] = L.dense_forward(h, w["head_plane.w"], w["head_plane.b"])
    return seq, plane, cache


def backward(params: ModelParams, cache, dseq, dplane, to_features: bool = False):
    """Gradients of all learnable parameters.

    With ``to_features`` the walk stops at the last conv block's post-ReLU
    activations and returns the gradient there instead.
    """
    grads: dict[str, np.ndarray] = {}
    dh, grads["head_seq.w"], grads["head_seq.b"] = L.dense_backward(dseq, cache["head_seq"])
    dh2, grads["head_plane.w"], grads["head_plane.b"] = L.dense_backward(dplane, cache["head_plane"])
    dh = dh + dh2
    for i in (2, 1):
        c_fc, c_bn, c_relu, c_drop = cache["dense"][i - 1]
        dh = L.dropout_backward(dh, c_drop)
        dh = L.relu_backward(dh, c_relu)
        dh, grads[f"bnd{i}.gamma"], grads[f"bnd{i}.beta"] = L.batchnorm_backward(dh, c_bn)
        dh, grads[f"dense{i}.w"], grads[f"dense{i}.b"] = L.dense_backward(dh, c_fc)
    dh = dh.reshape(cache["flat_shape"])
    for i in (4, 3, 2, 1):
        c_conv, c_bn, c_relu, c_pool, c_drop = cache["blocks"][i - 1]
        dh = L.dropout_backward(dh, c_drop)
        dh = L.maxpool2_backward(dh, c_pool)
        if to_features:
            return dh
        dh = L.relu_backward(dh, c_relu)
        dh, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = L.batchnorm_backward(dh, c_bn)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv2d_backward(dh, c_conv)
    return grads


def predict_proba(params: ModelParams, x: np.ndarray, batch_size: int = 32):
    seqs, planes = [], []
    for start in range(0, len(x), batch_size):
        s, p, _ = forward(params, x[start : start + batch_size], train=False)
        seqs.append(L.softmax(s))
        planes.append(L.softmax(p))
    return np.concatenate(seqs), np.concatenate(planes)
