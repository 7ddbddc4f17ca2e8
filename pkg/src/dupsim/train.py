"""SGD trainer for the float reference models behind the quantized victims.

Architectures are plain layer lists ``[(kind, geometry), ...]`` shared with
:mod:`dupsim.qnn`; training runs in float32 with hand-rolled backprop and
the result is symmetric-int8 quantized into a :class:`~dupsim.qnn.QuantModel`.
Deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

from . import qnn


def mlp_arch(in_features, hidden, num_classes):
    """Dense stack: in -> hidden[0] -> ... -> num_classes with ReLUs."""
    dims = [in_features] + list(hidden) + [num_classes]
    arch = []
    for i in range(len(dims) - 1):
        arch.append(("dense", {"in_features": dims[i], "out_features": dims[i + 1]}))
        if i < len(dims) - 2:
            arch.append(("relu", {}))
    return arch


def cnn_arch(in_channels, image_size, num_classes):
    """conv3 -> relu -> maxpool2 -> conv3 -> relu -> dense head."""
    s1 = image_size - 2          # valid 3x3 conv
    s2 = s1 // 2                 # 2x2 maxpool
    s3 = s2 - 2                  # second valid 3x3 conv
    feat = 12 * s3 * s3
    return [
        ("conv2d", {"in_channels": in_channels, "out_channels": 6, "kernel": 3, "stride": 1}),
        ("relu", {}),
        ("maxpool", {"kernel": 2, "stride": 2}),
        ("conv2d", {"in_channels": 6, "out_channels": 12, "kernel": 3, "stride": 1}),
        ("relu", {}),
        ("dense", {"in_features": feat, "out_features": num_classes}),
    ]


def build_arch(name, in_shape, num_classes):
    """Named toy architectures; in_shape is the per-sample feature shape."""
    if name == "mlp_small":
        return mlp_arch(int(np.prod(in_shape)), [56], num_classes)
    if name == "mlp_deep":
        return mlp_arch(int(np.prod(in_shape)), [48, 24], num_classes)
    if name == "cnn_small":
        if len(in_shape) != 3:
            raise ValueError("cnn_small expects [C, H, W] samples")
        return cnn_arch(in_shape[0], in_shape[1], num_classes)
    raise ValueError(f"unknown architecture {name!r}")


ARCH_NAMES = ("mlp_small", "mlp_deep", "cnn_small")


def arch_of_model(model):
    """Recover the (kind, geometry) list from a quantized model."""
    return [(l.kind, dict(l.geometry)) for l in model.layers]


def _init_params(arch, rng):
    params = []
    for kind, geom in arch:
        if kind == "dense":
            fan_in = geom["in_features"]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(geom["out_features"], fan_in)).astype(np.float32)
            params.append({"w": w, "b": np.zeros(geom["out_features"], np.float32)})
        elif kind == "conv2d":
            c_in, c_out, k = geom["in_channels"], geom["out_channels"], geom["kernel"]
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(c_out, c_in, k, k)).astype(np.float32)
            params.append({"w": w, "b": np.zeros(c_out, np.float32)})
        else:
            params.append(None)
    return params


def _float_forward(arch, params, x, want_caches=False):
    caches = []
    for (kind, geom), p in zip(arch, params):
        if kind == "dense":
            shape_in = x.shape
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            caches.append((x, shape_in))
            x = x @ p["w"].T + p["b"]
        elif kind == "conv2d":
            k, stride = geom["kernel"], geom["stride"]
            windows, oh, ow = qnn._window_view(x, k, stride)
            cols = windows.reshape(x.shape[0], -1, oh * ow)
            caches.append((cols, x.shape, oh, ow))
            w2 = p["w"].reshape(p["w"].shape[0], -1)
            x = np.einsum("oc,bcp->bop", w2, cols).reshape(
                x.shape[0], p["w"].shape[0], oh, ow) + p["b"][None, :, None, None]
        elif kind == "relu":
            caches.append(x > 0)
            x = np.maximum(x, 0)
        elif kind == "maxpool":
            k = geom["kernel"]
            stride = geom.get("stride", k)
            windows, oh, ow = qnn._window_view(x, k, stride)
            out = windows.max(axis=(2, 3))
            caches.append((windows, out, x.shape, k, stride, oh, ow))
            x = out
        elif kind == "softmax":
            caches.append(None)
            x = qnn.softmax(x)
    return (x, caches) if want_caches else x


def _scatter_windows(grad_windows, x_shape, k, stride, oh, ow):
    dx = np.zeros(x_shape, dtype=np.float32)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += \
                grad_windows[:, :, i, j]
    return dx


def _float_backward(arch, params, caches, grad):
    grads = [None] * len(arch)
    for idx in reversed(range(len(arch))):
        kind, geom = arch[idx]
        p, cache = params[idx], caches[idx]
        if kind == "dense":
            xin, shape_in = cache
            grads[idx] = {"w": grad.T @ xin, "b": grad.sum(axis=0)}
            grad = (grad @ p["w"]).reshape(shape_in)
        elif kind == "conv2d":
            cols, x_shape, oh, ow = cache
            k, stride = geom["kernel"], geom["stride"]
            gb = grad.reshape(grad.shape[0], grad.shape[1], oh * ow)
            dw = np.einsum("bop,bcp->oc", gb, cols).reshape(p["w"].shape)
            db = gb.sum(axis=(0, 2))
            w2 = p["w"].reshape(p["w"].shape[0], -1)
            dcols = np.einsum("oc,bop->bcp", w2, gb)
            gwin = dcols.reshape(x_shape[0], x_shape[1], k, k, oh, ow)
            grad = _scatter_windows(gwin, x_shape, k, stride, oh, ow)
            grads[idx] = {"w": dw, "b": db}
        elif kind == "relu":
            grad = grad * cache
        elif kind == "maxpool":
            windows, out, x_shape, k, stride, oh, ow = cache
            mask = windows == out[:, :, None, None]
            mask = mask / np.maximum(mask.sum(axis=(2, 3), keepdims=True), 1)
            grad = _scatter_windows(mask * grad[:, :, None, None], x_shape,
                                    k, stride, oh, ow)
    return grads


def fit(arch, x, y, seed=0, epochs=30, lr=0.05, batch_size=64, momentum=0.9):
    """Minibatch SGD with momentum on softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    params = _init_params(arch, rng)
    velocity = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
                for p in params]
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            xb, yb = x[sel], y[sel]
            logits, caches = _float_forward(arch, params, xb, want_caches=True)
            probs = qnn.softmax(logits)
            grad = probs.copy()
            grad[np.arange(yb.size), yb] -= 1.0
            grad /= yb.size
            grads = _float_backward(arch, params, caches, grad.astype(np.float32))
            for p, v, g in zip(params, velocity, grads):
                if p is None:
                    continue
                for key in p:
                    v[key] = momentum * v[key] - lr * g[key]
                    p[key] += v[key]
    return params


def quantize_params(arch, params, num_classes):
    """Symmetric per-layer int8 quantization of trained float parameters."""
    layers = []
    for (kind, geom), p in zip(arch, params):
        if p is None:
            layers.append(qnn.QuantLayer(kind, np.zeros(0, np.int8),
                                         np.zeros(0, np.float32), 1.0, dict(geom)))
        else:
            q, scale = qnn.quantize_weights(p["w"])
            layers.append(qnn.QuantLayer(kind, q, p["b"].copy(), scale, dict(geom)))
    return qnn.QuantModel(layers, num_classes)


def train_toy(arch_name, x, y, seed=0, epochs=30, lr=0.05, batch_size=64):
    """Train an architecture by name and return the quantized model."""
    num_classes = int(np.max(y)) + 1
    arch = build_arch(arch_name, tuple(np.asarray(x).shape[1:]), num_classes)
    params = fit(arch, x, y, seed=seed, epochs=epochs, lr=lr, batch_size=batch_size)
    return quantize_params(arch, params, num_classes)


def retrain_arch(arch, x, y, num_classes, seed=0, epochs=30, lr=0.05, batch_size=64):
    """Train an explicit architecture with the standard recipe."""
    params = fit(arch, x, y, seed=seed, epochs=epochs, lr=lr, batch_size=batch_size)
    return quantize_params(arch, params, num_classes)
