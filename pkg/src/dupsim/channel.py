"""Weight-transmission channel with duplication faults.

Model weights stream from off-chip memory as fixed-width int8 packages, one
per clock cycle. A strategy file arms a fault trigger on chosen cycles: a
triggered package is sampled twice by the receiver, so the *following*
received slot holds a copy of the triggered package. Each trigger succeeds
independently with probability ``fault_success_rate``; a failed injection
leaves the stream untouched. Two measured success-rate presets are exposed
for the ring-oscillator and latch-ring-oscillator power-plundering circuits.

Consecutive triggers must sit at least ``min_attack_gap`` packages apart
(crash avoidance), and the last package can never be triggered because it
has no successor to corrupt.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import qnn

RO_SUCCESS_RATE = 0.8484
LRO_SUCCESS_RATE = 0.5891


class GapViolation(ValueError):
    """Two triggers closer than the configured minimum attack gap."""


class TriggerOnLastPackage(ValueError):
    """The final package has no successor and cannot be a trigger."""


class LengthMismatch(ValueError):
    """Stream length does not match the template model."""


@dataclass(frozen=True)
class ChannelConfig:
    """package_width: int8 weights per package (bus width);
    fault_success_rate: probability a trigger corrupts its target;
    min_attack_gap: minimum packages between consecutive triggers."""

    package_width: int = 4
    fault_success_rate: float = 1.0
    min_attack_gap: int = 12
    rng_seed: int = 0

    def __post_init__(self):
        if self.package_width < 1:
            raise ValueError("package_width must be >= 1")
        if not 0.0 <= self.fault_success_rate <= 1.0:
            raise ValueError("fault_success_rate must lie in [0, 1]")
        if self.min_attack_gap < 0:
            raise ValueError("min_attack_gap must be >= 0")

    def rng(self):
        return np.random.default_rng(self.rng_seed)


@dataclass
class PackageStream:
    """Ordered fixed-width packages plus the layer layout they came from.

    ``layer_spans`` records (flat_start, weight_count) for every model layer
    (zero count for parameter-free kinds); ``layer_boundaries`` is the
    package index where each parameterized layer begins. Tail padding is
    zero bytes and is dropped on deserialization.
    """

    packages: np.ndarray
    layer_spans: tuple
    weight_count: int

    def __post_init__(self):
        self.packages = np.asarray(self.packages, dtype=np.int8)
        if self.packages.ndim != 2:
            raise ValueError("packages must be a [n_packages, width] array")

    @property
    def n_packages(self) -> int:
        return int(self.packages.shape[0])

    @property
    def width(self) -> int:
        return int(self.packages.shape[1])

    @property
    def layer_boundaries(self) -> list:
        bounds = [start // self.width for start, count in self.layer_spans if count > 0]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("layer boundaries are not strictly increasing")
        return bounds

    def flat(self) -> np.ndarray:
        """Weight payload with tail padding removed."""
        return self.packages.reshape(-1)[: self.weight_count]

    def copy(self) -> "PackageStream":
        return PackageStream(self.packages.copy(), self.layer_spans, self.weight_count)


@dataclass
class StrategyFile:
    """Per-cycle trigger bitstream plus its header (delay, period, targets)."""

    trigger_bits: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trigger_bits = np.asarray(self.trigger_bits, dtype=np.uint8)

    @property
    def target_indexes(self) -> list:
        return [int(i) for i in np.flatnonzero(self.trigger_bits)]

    @property
    def stream_len(self) -> int:
        return int(self.trigger_bits.size)


@dataclass
class FaultOutcomeLog:
    """One (trigger index, succeeded) record per armed trigger."""

    records: list = field(default_factory=list)

    def successes(self) -> int:
        return sum(1 for _, ok in self.records if ok)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("trigger_index,succeeded\n")
            for idx, ok in self.records:
                fh.write(f"{idx},{int(ok)}\n")


def serialize(model: qnn.QuantModel, cfg: ChannelConfig) -> PackageStream:
    """Flatten all weights in layer order into zero-padded fixed-width packages."""
    width = cfg.package_width
    spans = []
    offset = 0
    for layer in model.layers:
        spans.append((offset, layer.weight_count))
        offset += layer.weight_count
    flat = model.flat_weights()
    n_packages = max(1, -(-flat.size // width))
    padded = np.zeros(n_packages * width, dtype=np.int8)
    padded[: flat.size] = flat
    return PackageStream(padded.reshape(n_packages, width), tuple(spans), flat.size)


def deserialize(stream: PackageStream, template: qnn.QuantModel) -> qnn.QuantModel:
    """Rebuild a model from a (possibly faulted) stream; template untouched."""
    if stream.weight_count != template.total_weights:
        raise LengthMismatch(
            f"stream carries {stream.weight_count} weights, "
            f"template has {template.total_weights}"
        )
    return qnn.replace_weights(template, stream.flat())


def build_strategy(target_indexes, stream_len: int, cfg: ChannelConfig) -> StrategyFile:
    """Bitstream with 1s at the trigger indexes.

    Targets must be sorted, unique, within [0, stream_len - 1) -- the last
    package cannot trigger -- and pairwise at least ``min_attack_gap`` apart.
    The header records the first-trigger delay, the single-cycle pulse
    period, and the target list.
    """
    targets = [int(t) for t in target_indexes]
    if targets != sorted(set(targets)):
        raise ValueError("target indexes must be sorted and unique")
    for t in targets:
        if not 0 <= t < stream_len:
            raise qnn.IndexOutOfRange(f"trigger {t} outside stream of {stream_len}")
        if t == stream_len - 1:
            raise TriggerOnLastPackage(f"trigger {t} has no successor package")
    for t1, t2 in zip(targets, targets[1:]):
        if t2 - t1 < cfg.min_attack_gap:
            raise GapViolation(
                f"triggers {t1} and {t2} closer than gap {cfg.min_attack_gap}"
            )
    bits = np.zeros(stream_len, dtype=np.uint8)
    bits[targets] = 1
    header = {
        "triggering_delay": targets[0] if targets else 0,
        "triggering_period": 1,
        "target_indexes": targets,
    }
    return StrategyFile(bits, header)


def transmit(stream: PackageStream, strat: StrategyFile, cfg: ChannelConfig,
             rng) -> tuple:
    """Simulate one transmission under the strategy file.

    For each armed trigger i (ascending) that succeeds -- probability
    ``fault_success_rate``, one draw per trigger -- the received slot i+1 is
    overwritten with the receiver's slot i (double sampling). At rates 0 and
    1 the outcome is forced and no randomness is consumed. Returns the
    received stream and the per-trigger outcome log.
    """
    if strat.stream_len != stream.n_packages:
        raise LengthMismatch(
            f"strategy covers {strat.stream_len} cycles, stream has "
            f"{stream.n_packages} packages"
        )
    out = stream.packages.copy()
    log = FaultOutcomeLog()
    rate = cfg.fault_success_rate
    for i in strat.target_indexes:
        if i >= stream.n_packages - 1:
            raise TriggerOnLastPackage(f"trigger {i} has no successor package")
        if rate >= 1.0:
            ok = True
        elif rate <= 0.0:
            ok = False
        else:
            ok = bool(rng.random() < rate)
        if ok:
            out[i + 1] = out[i]
        log.records.append((int(i), ok))
    return PackageStream(out, stream.layer_spans, stream.weight_count), log


def package_index_of(model: qnn.QuantModel, layer: int, weight: int,
                     cfg: ChannelConfig) -> int:
    """Package index holding weight ``weight`` of model layer ``layer``."""
    if not 0 <= layer < len(model.layers):
        raise qnn.IndexOutOfRange(f"layer {layer} outside model")
    count = model.layers[layer].weight_count
    if not 0 <= weight < count:
        raise qnn.IndexOutOfRange(f"weight {weight} outside layer of {count}")
    offset = sum(l.weight_count for l in model.layers[:layer])
    return (offset + weight) // cfg.package_width


# --- strategy files on disk: JSON header line + base64-packed bit array ----

def save_strategy(strat: StrategyFile, path) -> None:
    header = {
        "delay": int(strat.header.get("triggering_delay", 0)),
        "period": int(strat.header.get("triggering_period", 1)),
        "targets": strat.target_indexes,
        "stream_len": strat.stream_len,
    }
    packed = base64.b64encode(np.packbits(strat.trigger_bits).tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(packed)
        fh.write(b"\n")


def load_strategy(path) -> StrategyFile:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        packed = base64.b64decode(fh.readline().strip())
    n = int(header["stream_len"])
    bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=n)
    return StrategyFile(bits, {
        "triggering_delay": header["delay"],
        "triggering_period": header["period"],
        "target_indexes": header["targets"],
    })
