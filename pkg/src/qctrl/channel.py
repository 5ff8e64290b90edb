"""Per-channel defect compensation (FIR, gain, offset, delay) and DAC rendering."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .expr import Call, Expr, Scale, Sum, Difference, Product, Quotient, Const, sample_expr
from .waveform import DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE, Waveform, WaveKind, generate

DAC_MAX = 32767
DAC_MIN = -32768
MAX_TAPS = 1024
MAX_DELAY = 10**6


class ChannelError(ValueError):
    pass


class ChannelRole(enum.Enum):
    X = "X"
    Y = "Y"
    Z = "Z"
    DC = "DC"
    READOUT_I = "ReadoutI"
    READOUT_Q = "ReadoutQ"


@dataclass(frozen=True)
class FirFilter:
    taps: tuple[float, ...]

    def __post_init__(self):
        taps = tuple(float(x) for x in self.taps)
        if not 1 <= len(taps) <= MAX_TAPS:
            raise ChannelError(f"FIR needs 1..{MAX_TAPS} taps, got {len(taps)}")
        if not all(math.isfinite(x) for x in taps):
            raise ChannelError("FIR taps must be finite")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def identity(cls) -> "FirFilter":
        return cls((1.0,))

    @classmethod
    def moving_average(cls, n: int) -> "FirFilter":
        return cls((1.0 / n,) * n)


@dataclass(frozen=True)
class ChannelConfig:
    role: ChannelRole = ChannelRole.Z
    fir: FirFilter | None = None
    offset: float = 0.0
    delay_samples: int = 0
    gain: float = 1.0
    full_scale_volts: float = 1.0

    def __post_init__(self):
        if abs(self.offset) > 1:
            raise ChannelError(f"|offset| must be <= 1, got {self.offset}")
        if not isinstance(self.delay_samples, (int, np.integer)) or not 0 <= self.delay_samples <= MAX_DELAY:
            raise ChannelError(f"delay_samples must be an integer in 0..{MAX_DELAY}")
        if not self.gain > 0:
            raise ChannelError(f"gain must be positive, got {self.gain}")
        if not self.full_scale_volts > 0:
            raise ChannelError("full_scale_volts must be positive")

    def with_added_delay(self, extra: int) -> "ChannelConfig":
        return replace(self, delay_samples=self.delay_samples + extra)


@dataclass
class DacRecord:
    codes: np.ndarray
    sample_rate: float
    clipped: int = 0

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int16)

    def to_bytes(self) -> bytes:
        return self.codes.astype("<i2").tobytes()


def fir_apply(w: Waveform, f: FirFilter) -> Waveform:
    """Causal FIR, zero initial state, output truncated to the input length."""
    out = np.convolve(w.samples, np.asarray(f.taps))[: len(w)]
    return Waveform(out, w.sample_rate, w.t0)


def delay(w: Waveform, n: int, fill: float = 0.0) -> Waveform:
    if n == 0:
        return w
    out = np.concatenate([np.full(n, float(fill)), w.samples])
    return Waveform(out, w.sample_rate, w.t0)


def apply_channel(w: Waveform, cfg: ChannelConfig) -> Waveform:
    """FIR -> gain -> offset -> delay; delay padding carries the offset value."""
    if cfg.fir is not None:
        w = fir_apply(w, cfg.fir)
    samples = w.samples
    if cfg.gain != 1.0:
        samples = samples * cfg.gain
    if cfg.offset != 0.0:
        samples = samples + cfg.offset
    if samples is not w.samples:
        w = Waveform(samples, w.sample_rate, w.t0)
    return delay(w, cfg.delay_samples, cfg.offset)


def render_dac(w: Waveform, cfg: ChannelConfig | None = None) -> DacRecord:
    s = w.samples
    clipped = int(np.count_nonzero((s > 1.0) | (s < -1.0)))
    codes = np.rint(np.clip(s, -1.0, 1.0) * DAC_MAX).astype(np.int16)
    return DacRecord(codes, w.sample_rate, clipped)


def dac_to_volts(record: DacRecord, cfg: ChannelConfig) -> np.ndarray:
    return record.codes.astype(np.float64) / DAC_MAX * cfg.full_scale_volts


# ---------------------------------------------------------------- IQ pairs


def _quadrature(node: Expr) -> tuple[Expr, int]:
    """Copy of ``node`` with every sine carrier advanced by pi/2, plus the count."""
    if isinstance(node, Call):
        if node.kind is not WaveKind.SINE:
            return node, 0
        args = dict(node.args)
        phi = args.get("phi", Const(0.0))
        args["phi"] = Sum(phi, Const(math.pi / 2))
        return Call(node.kind, tuple(args.items())), 1
    if isinstance(node, Scale):
        inner, n = _quadrature(node.operand)
        return Scale(node.factor, inner), n
    if isinstance(node, (Sum, Difference, Product, Quotient)):
        left, n1 = _quadrature(node.left)
        right, n2 = _quadrature(node.right)
        return type(node)(left, right), n1 + n2
    return node, 0


def gen_iq_pair(
    source: Expr | dict,
    cfg_x: ChannelConfig,
    cfg_y: ChannelConfig,
    bindings: dict | None = None,
    length: int = DEFAULT_LENGTH,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
) -> tuple[Waveform, Waveform]:
    """X/Y drive pair; Y is X with its sine carrier(s) advanced by pi/2.

    ``source`` is either sine parameters (``a``, ``f``, ``phi``) or an
    expression containing at least one sine call, e.g. an envelope times a
    carrier.  Each output then passes through its own channel config, whose
    offsets null LO leakage and whose gain/delay balance the image sideband.
    """
    if isinstance(source, dict):
        params = dict(source)
        x = generate(WaveKind.SINE, params, length, sample_rate)
        params["phi"] = params.get("phi", 0.0) + math.pi / 2
        y = generate(WaveKind.SINE, params, length, sample_rate)
    else:
        shifted, carriers = _quadrature(source)
        if carriers == 0:
            raise ChannelError("IQ pair needs a sinusoidal carrier")
        x = sample_expr(source, bindings, length, sample_rate)
        y = sample_expr(shifted, bindings, length, sample_rate)
    return apply_channel(x, cfg_x), apply_channel(y, cfg_y)
