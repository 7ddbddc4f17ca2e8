"""Defense harness: wider victims, on-chip layer protection, and
package-shuffle obfuscation of the transmission order.

Each defense is a configurable transformation on the victim or its
transmission path; campaigns measure how much it inflates attack cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel, train

DEFENSE_KINDS = ("none", "widen_model", "protect_layers",
                 "shuffle_predefined", "shuffle_random")
SHUFFLE_MODES = ("predefined", "random")


class AllPackagesProtected(ValueError):
    """Protection left no corruptible package; nothing is attackable."""


class UnsupportedLayerKind(ValueError):
    """Widening is only defined for dense stacks."""


@dataclass
class DefenseConfig:
    kind: str = "none"
    width_factor: int = 2
    protected_layers: tuple = ()
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"defense kind must be one of {DEFENSE_KINDS}")
        if self.width_factor < 1:
            raise ValueError("width_factor must be >= 1")
        self.protected_layers = tuple(int(i) for i in self.protected_layers)


def _widen_arch(arch, factor):
    """Scale every interior feature dimension of a dense stack by ``factor``.

    The data interface is fixed: the first dense keeps its in_features and
    the last dense keeps its out_features, so an interior-to-interior layer
    grows by factor^2 weights.
    """
    dense_positions = [i for i, (kind, _) in enumerate(arch) if kind == "dense"]
    for kind, _ in arch:
        if kind not in ("dense", "relu", "softmax"):
            raise UnsupportedLayerKind(f"cannot widen layer kind {kind!r}")
    widened = [(kind, dict(geom)) for kind, geom in arch]
    last = dense_positions[-1]
    for pos in dense_positions:
        geom = widened[pos][1]
        if pos != dense_positions[0]:
            geom["in_features"] *= factor
        if pos != last:
            geom["out_features"] *= factor
    return widened


def widen(model, factor, train_x, train_y, seed=0, epochs=30, lr=0.05):
    """Architecturally widened victim, retrained from scratch with the
    standard recipe (the defense re-trains, it does not stretch weights)."""
    arch = train.arch_of_model(model)
    widened = _widen_arch(arch, int(factor))
    return train.retrain_arch(widened, train_x, train_y, model.num_classes,
                              seed=seed, epochs=epochs, lr=lr)


def protect(stream: channel.PackageStream, protected_layers) -> np.ndarray:
    """Corruptible-package mask: False wherever a package's span intersects
    a protected layer (those weights live on-chip and never cross the bus).

    Raises AllPackagesProtected when no corruptible package with a usable
    trigger remains.
    """
    mask = np.ones(stream.n_packages, dtype=bool)
    width = stream.width
    for layer_index in protected_layers:
        if not 0 <= layer_index < len(stream.layer_spans):
            raise IndexError(f"protected layer {layer_index} outside model")
        start, count = stream.layer_spans[layer_index]
        if count == 0:
            continue
        mask[start // width : (start + count - 1) // width + 1] = False
    # a fault needs a trigger at i >= 0 corrupting package i + 1
    if not mask[1:].any():
        raise AllPackagesProtected("every corruptible package is protected")
    return mask


def shuffle_transmission(stream: channel.PackageStream, mode: str,
                         seed: int) -> tuple:
    """Permute the package order before transmission.

    Returns (shuffled stream, permutation record); ``shuffled[k] ==
    original[perm[k]]``. Both modes draw the permutation from ``seed``; a
    predefined deployment reuses one seed for every transmission while a
    random deployment refreshes it each time. The receiver must invert the
    permutation (:func:`invert_shuffle`) before loading weights.
    """
    if mode not in SHUFFLE_MODES:
        raise ValueError(f"shuffle mode must be one of {SHUFFLE_MODES}")
    perm = np.random.default_rng(seed).permutation(stream.n_packages)
    shuffled = channel.PackageStream(stream.packages[perm], stream.layer_spans,
                                     stream.weight_count)
    return shuffled, perm


def invert_shuffle(stream: channel.PackageStream, perm) -> channel.PackageStream:
    """Receiver-side inversion restoring the original package order."""
    inverse = np.argsort(perm)
    return channel.PackageStream(stream.packages[inverse], stream.layer_spans,
                                 stream.weight_count)
