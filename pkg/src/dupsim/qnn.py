"""Minimal int8-quantized feed-forward inference engine.

Models are small stacks of dense / conv2d / relu / maxpool / softmax layers.
Weights use symmetric per-layer int8 quantization (zero point 0): an integer
weight ``w_q`` together with a positive per-layer ``scale`` reproduces the
float reference weight as ``w_q * scale`` with error at most ``scale / 2``.
All layer arithmetic runs in float32 on dequantized weights, so a
straightline float implementation is an exact oracle up to rounding.

The clean model is never mutated by any fault machinery: perturbed copies
are produced with :func:`clone_and_overwrite` / :func:`replace_weights`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

INT8_MIN = -128
INT8_MAX = 127

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool", "softmax")
PARAM_KINDS = ("dense", "conv2d")

MODEL_FORMAT = "dupsim-int8-v1"


class ShapeMismatch(ValueError):
    """Input tensor is incompatible with a layer's geometry."""


class NonFiniteInput(ValueError):
    """Input tensor contains NaN or Inf."""


class LabelOutOfRange(ValueError):
    """A class label falls outside [0, num_classes)."""


class EmptyDataset(ValueError):
    """An operation requiring samples received none."""


class IndexOutOfRange(IndexError):
    """A weight or layer index falls outside the model."""


@dataclass
class QuantLayer:
    """One layer: int8 weights (empty for parameter-free kinds), float bias,
    per-layer quantization scale and kind-specific integer geometry."""

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    scale: float
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.int8).ravel()
        self.bias = np.asarray(self.bias, dtype=np.float32).ravel()
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(self.scale)

    @property
    def weight_count(self) -> int:
        return int(self.weights.size)

    def dequantized(self) -> np.ndarray:
        return self.weights.astype(np.float32) * np.float32(self.scale)


@dataclass
class QuantModel:
    """Ordered stack of QuantLayers plus the output class count."""

    layers: list
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def layer_weight_counts(self) -> list:
        return [layer.weight_count for layer in self.layers]

    @property
    def total_weights(self) -> int:
        return sum(self.layer_weight_counts)

    @property
    def param_layer_indexes(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.weight_count > 0]

    def flat_weights(self) -> np.ndarray:
        """All int8 weights concatenated in layer order."""
        parts = [l.weights for l in self.layers if l.weight_count > 0]
        if not parts:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate(parts)


def quantize_weights(float_weights) -> tuple:
    """Symmetric int8 quantization: scale = max|w| / 127, zero point 0.

    Returns (int8 array, scale). An all-zero tensor gets scale 1.0 so the
    scale stays positive.
    """
    w = np.asarray(float_weights, dtype=np.float64).ravel()
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / INT8_MAX if peak > 0 else 1.0
    q = np.clip(np.rint(w / scale), INT8_MIN, INT8_MAX).astype(np.int8)
    return q, scale


def _window_view(x, kernel, stride):
    """Gather kernel windows of x [B,C,H,W] -> [B, C, k, k, oh, ow]."""
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"kernel {kernel} does not fit input {h}x{w}")
    out = np.empty((b, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return out, oh, ow


def _apply_dense(layer, x):
    geom = layer.geometry
    n_in, n_out = geom["in_features"], geom["out_features"]
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ShapeMismatch(f"dense expects [B, {n_in}], got {x.shape}")
    w = layer.dequantized().reshape(n_out, n_in)
    out = x @ w.T
    if layer.bias.size:
        out = out + layer.bias
    return out


def _apply_conv2d(layer, x):
    geom = layer.geometry
    c_in, c_out = geom["in_channels"], geom["out_channels"]
    k, stride = geom["kernel"], geom["stride"]
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ShapeMismatch(f"conv2d expects [B, {c_in}, H, W], got {x.shape}")
    windows, oh, ow = _window_view(x, k, stride)
    cols = windows.reshape(x.shape[0], c_in * k * k, oh * ow)
    w = layer.dequantized().reshape(c_out, c_in * k * k)
    out = np.einsum("oc,bcp->bop", w, cols).reshape(x.shape[0], c_out, oh, ow)
    if layer.bias.size:
        out = out + layer.bias[None, :, None, None]
    return out


def _apply_maxpool(layer, x):
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool expects [B, C, H, W], got {x.shape}")
    k = layer.geometry["kernel"]
    stride = layer.geometry.get("stride", k)
    windows, oh, ow = _window_view(x, k, stride)
    return windows.max(axis=(2, 3))


def softmax(z, axis=-1):
    """Numerically stable softmax (max subtraction)."""
    z = np.asarray(z, dtype=np.float32)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


_APPLY = {
    "dense": _apply_dense,
    "conv2d": _apply_conv2d,
    "maxpool": _apply_maxpool,
    "relu": lambda layer, x: np.maximum(x, np.float32(0.0)),
    "softmax": lambda layer, x: softmax(x),
}


def forward(model: QuantModel, batch) -> np.ndarray:
    """Run the model on a batch, returning [batch, num_classes] scores.

    Pure: the model is never modified. Raises NonFiniteInput on NaN/Inf
    inputs and ShapeMismatch when the batch does not compose with the
    first layer (or any intermediate geometry).
    """
    x = np.asarray(batch, dtype=np.float32)
    if not np.isfinite(x).all():
        raise NonFiniteInput("batch contains NaN or Inf")
    for layer in model.layers:
        x = _APPLY[layer.kind](layer, x)
    return x


def cross_entropy_loss(logits, targets) -> float:
    """Mean softmax cross-entropy, computed in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64).ravel()
    if z.ndim != 2 or z.shape[0] != t.shape[0]:
        raise ShapeMismatch(f"logits {z.shape} incompatible with {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise LabelOutOfRange(f"targets must lie in [0, {z.shape[1]})")
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - z[np.arange(t.size), t]))


def predict(model: QuantModel, x) -> np.ndarray:
    return np.argmax(forward(model, x), axis=1)


def accuracy(model: QuantModel, x, labels) -> float:
    """Fraction of argmax-correct predictions over a labeled set."""
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise EmptyDataset("accuracy needs at least one sample")
    return float(np.mean(predict(model, x) == labels))


def _copy_model(model: QuantModel) -> QuantModel:
    layers = [
        QuantLayer(l.kind, l.weights.copy(), l.bias.copy(), l.scale, dict(l.geometry))
        for l in model.layers
    ]
    return QuantModel(layers, model.num_classes)


def clone_and_overwrite(model: QuantModel, faults) -> QuantModel:
    """Return an independent copy with int8 weights overwritten at the given
    global flat indexes. ``faults`` is a sequence of (flat_index, new_value);
    flat indexes run over all weights in layer order. The source model is
    untouched (no storage aliasing)."""
    total = model.total_weights
    clone = _copy_model(model)
    offsets = np.cumsum([0] + clone.layer_weight_counts)
    for flat_index, value in faults:
        flat_index = int(flat_index)
        if not 0 <= flat_index < total:
            raise IndexOutOfRange(f"flat index {flat_index} outside [0, {total})")
        if not INT8_MIN <= int(value) <= INT8_MAX:
            raise ValueError(f"value {value} outside int8 range")
        li = int(np.searchsorted(offsets, flat_index, side="right")) - 1
        clone.layers[li].weights[flat_index - offsets[li]] = np.int8(value)
    return clone


def replace_weights(template: QuantModel, flat_int8) -> QuantModel:
    """Copy of the template with all weights taken from a flat int8 array."""
    flat = np.asarray(flat_int8, dtype=np.int8).ravel()
    if flat.size != template.total_weights:
        raise ShapeMismatch(
            f"expected {template.total_weights} weights, got {flat.size}"
        )
    clone = _copy_model(template)
    offset = 0
    for layer in clone.layers:
        n = layer.weight_count
        if n:
            layer.weights = flat[offset : offset + n].copy()
            offset += n
    return clone


# --- model files: one-line JSON header + raw int8 weight blob -------------

def save_model(model: QuantModel, path) -> None:
    """Write a model file: a single JSON header line (layer kinds, geometry,
    scales, float biases, num_classes) terminated by \\n, followed by the
    little-endian int8 weight blob of every layer in declaration order."""
    header = {
        "format": MODEL_FORMAT,
        "byte_order": "little",
        "num_classes": model.num_classes,
        "layers": [
            {
                "kind": l.kind,
                "geometry": l.geometry,
                "scale": l.scale,
                "bias": [float(b) for b in l.bias],
                "weight_count": l.weight_count,
            }
            for l in model.layers
        ],
    }
    blob = model.flat_weights().tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(blob)


def load_model(path) -> QuantModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} model file: {path}")
        blob = fh.read()
    weights = np.frombuffer(blob, dtype=np.int8)
    layers = []
    offset = 0
    for spec in header["layers"]:
        n = int(spec["weight_count"])
        w = weights[offset : offset + n].copy()
        offset += n
        layers.append(
            QuantLayer(spec["kind"], w, np.array(spec["bias"], dtype=np.float32),
                       float(spec["scale"]), dict(spec["geometry"]))
        )
    if offset != weights.size:
        raise ValueError(f"weight blob length mismatch in {path}")
    return QuantModel(layers, int(header["num_classes"]))
