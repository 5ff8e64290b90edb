"""Sampled waveforms, the eight built-in pulse kinds, and numeric waveform algebra."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

DEFAULT_SAMPLE_RATE = 1e9
DEFAULT_LENGTH = 6000


class WaveformError(ValueError):
    pass


class WaveKind(enum.Enum):
    DC = "dc"
    SINE = "sine"
    RECTANGLE = "rect"
    GAUSSIAN = "gauss"
    TRAPEZOID = "trapezoid"
    TRIANGLE = "triangle"
    SLOPE = "slope"
    FLATTOP = "flattop"

    @classmethod
    def from_name(cls, name: str) -> "WaveKind":
        try:
            return cls(name)
        except ValueError:
            raise WaveformError(f"unknown primitive {name!r}") from None


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise WaveformError("waveform needs at least one sample")
        if not self.sample_rate > 0:
            raise WaveformError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    def identical(self, other: "Waveform") -> bool:
        """Bitwise equality of samples plus equal rate and start time."""
        return (
            self.sample_rate == other.sample_rate
            and self.t0 == other.t0
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


@dataclass(frozen=True)
class _KindSpec:
    required: tuple[str, ...]
    optional: dict[str, float] = field(default_factory=dict)


# amplitude defaults to 1 everywhere; everything else a kind needs is mandatory
KIND_PARAMS: dict[WaveKind, _KindSpec] = {
    WaveKind.DC: _KindSpec((), {"a": 1.0}),
    WaveKind.SINE: _KindSpec(("f",), {"a": 1.0, "phi": 0.0}),
    WaveKind.RECTANGLE: _KindSpec(("t1", "t2"), {"a": 1.0}),
    WaveKind.GAUSSIAN: _KindSpec(("mu", "sigma"), {"a": 1.0}),
    WaveKind.TRAPEZOID: _KindSpec(("t1", "t2", "r"), {"a": 1.0}),
    WaveKind.TRIANGLE: _KindSpec(("t1", "t2"), {"a": 1.0}),
    WaveKind.SLOPE: _KindSpec(("T",), {"a": 1.0, "t0": 0.0}),
    WaveKind.FLATTOP: _KindSpec(("t1", "t2", "sigma"), {"a": 1.0}),
}


def resolve_params(kind: WaveKind, params: dict[str, float]) -> dict[str, float]:
    spec = KIND_PARAMS[kind]
    allowed = set(spec.required) | set(spec.optional)
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise WaveformError(f"{kind.value}: unknown parameter(s) {', '.join(unknown)}")
    missing = [name for name in spec.required if name not in params]
    if missing:
        raise WaveformError(f"{kind.value}: missing parameter(s) {', '.join(missing)}")
    out = dict(spec.optional)
    out.update({k: float(v) for k, v in params.items()})
    return out


def _check_window(kind: WaveKind, p: dict[str, float]) -> None:
    if not p["t2"] > p["t1"]:
        raise WaveformError(f"{kind.value}: width t2 - t1 must be positive")


def evaluate_kind(kind: WaveKind, p: dict[str, float], t: np.ndarray) -> np.ndarray:
    """Closed form of ``kind`` at times ``t`` (seconds); ``p`` must be resolved."""
    a = p["a"]
    if kind is WaveKind.DC:
        return np.full(t.shape, a)
    if kind is WaveKind.SINE:
        return a * np.sin(2 * np.pi * p["f"] * t + p["phi"])
    if kind is WaveKind.RECTANGLE:
        _check_window(kind, p)
        return np.where((t >= p["t1"]) & (t < p["t2"]), a, 0.0)
    if kind is WaveKind.GAUSSIAN:
        sigma = p["sigma"]
        if not sigma > 0:
            raise WaveformError("gauss: sigma must be positive")
        x = (t - p["mu"]) / sigma
        return a * np.exp(-0.5 * x * x)
    if kind is WaveKind.TRAPEZOID:
        _check_window(kind, p)
        t1, t2, r = p["t1"], p["t2"], p["r"]
        if not r > 0 or 2 * r > t2 - t1:
            raise WaveformError("trapezoid: ramp r must satisfy 0 < 2r <= t2 - t1")
        ramp = np.minimum((t - t1) / r, (t2 - t) / r)
        return a * np.clip(ramp, 0.0, 1.0)
    if kind is WaveKind.TRIANGLE:
        _check_window(kind, p)
        t1, t2 = p["t1"], p["t2"]
        half = 0.5 * (t2 - t1)
        return a * np.clip(1.0 - np.abs(t - (t1 + half)) / half, 0.0, 1.0)
    if kind is WaveKind.SLOPE:
        if not p["T"] > 0:
            raise WaveformError("slope: width T must be positive")
        return a * np.clip((t - p["t0"]) / p["T"], 0.0, 1.0)
    if kind is WaveKind.FLATTOP:
        _check_window(kind, p)
        sigma = p["sigma"]
        if not sigma > 0:
            raise WaveformError("flattop: sigma must be positive")
        k = 1.0 / (math.sqrt(2.0) * sigma)
        return 0.5 * a * (erf((t - p["t1"]) * k) - erf((t - p["t2"]) * k))
    raise WaveformError(f"no closed form for {kind}")  # pragma: no cover


def generate(
    kind: WaveKind | str,
    params: dict[str, float],
    length: int = DEFAULT_LENGTH,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    t0: float = 0.0,
) -> Waveform:
    if isinstance(kind, str):
        kind = WaveKind.from_name(kind)
    if length < 1:
        raise WaveformError("length must be at least 1")
    if not sample_rate > 0:
        raise WaveformError("sample_rate must be positive")
    p = resolve_params(kind, params)
    t = t0 + np.arange(length) / sample_rate
    return Waveform(evaluate_kind(kind, p, t), sample_rate, t0)


def _check_rates(a: Waveform, b: Waveform) -> None:
    if a.sample_rate != b.sample_rate:
        raise WaveformError(
            f"sample_rate mismatch: {a.sample_rate} vs {b.sample_rate}"
        )


def _zero_extend(x: np.ndarray, n: int) -> np.ndarray:
    if x.size == n:
        return x
    out = np.zeros(n)
    out[: x.size] = x
    return out


_POINTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def pointwise(op: str, a: Waveform, b: Waveform) -> Waveform:
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise WaveformError(f"unknown pointwise op {op!r}") from None
    _check_rates(a, b)
    n = max(len(a), len(b))
    out = fn(_zero_extend(a.samples, n), _zero_extend(b.samples, n))
    return Waveform(out, a.sample_rate, a.t0)


def add(a: Waveform, b: Waveform) -> Waveform:
    return pointwise("add", a, b)


def sub(a: Waveform, b: Waveform) -> Waveform:
    return pointwise("sub", a, b)


def mul(a: Waveform, b: Waveform) -> Waveform:
    return pointwise("mul", a, b)


def scale(w: Waveform, k: float) -> Waveform:
    return Waveform(w.samples * k, w.sample_rate, w.t0)


def integrate(w: Waveform) -> Waveform:
    """Cumulative left-Riemann integral; out[n] covers samples 0..n."""
    return Waveform(np.cumsum(w.samples) / w.sample_rate, w.sample_rate, w.t0)


def differentiate_numeric(w: Waveform) -> Waveform:
    """Backward difference times the sample rate, with out[0] = 0.

    This is the exact right inverse of :func:`integrate` for n >= 1.
    """
    out = np.empty_like(w.samples)
    out[0] = 0.0
    out[1:] = np.diff(w.samples) * w.sample_rate
    return Waveform(out, w.sample_rate, w.t0)


def convolve(a: Waveform, kernel: Waveform) -> Waveform:
    """Full linear convolution scaled by the sample period."""
    _check_rates(a, kernel)
    out = np.convolve(a.samples, kernel.samples) / a.sample_rate
    return Waveform(out, a.sample_rate, a.t0 + kernel.t0)
