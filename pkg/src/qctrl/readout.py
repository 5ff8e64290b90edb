"""Readout Server core: preprocessing, homodyne IQ extraction, IQ-plane discrimination."""

from __future__ import annotations

import enum
import functools
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .channel import FirFilter, fir_apply
from .datalink import DEFAULT_STREAM_PORT, DigitizerReceiver, Record
from .waveform import Waveform

CODE_SCALE = 2048.0


class ReadoutError(ValueError):
    pass


class IncompleteRecord(ReadoutError):
    def __init__(self, record: Record):
        super().__init__(f"record {record.key} incomplete, missing frames {record.missing}")
        self.missing = list(record.missing)


class AcquisitionTimeout(ReadoutError):
    code = "acquisition-timeout"

    def __init__(self, wanted: int, received: int, timeout: float):
        super().__init__(f"received {received} of {wanted} records within {timeout} s")
        self.received = received


class QubitState(enum.IntEnum):
    ZERO = 0
    ONE = 1


@dataclass(frozen=True)
class IQPoint:
    i: float
    q: float

    def __post_init__(self):
        if not (math.isfinite(self.i) and math.isfinite(self.q)):
            raise ReadoutError("IQ point must be finite")

    def __iter__(self):
        return iter((self.i, self.q))


@dataclass(frozen=True)
class InputBinding:
    device_id: int
    channel_id: int
    name: str


@dataclass
class AcquisitionConfig:
    channels: list[InputBinding] = field(default_factory=lambda: [InputBinding(0, 0, "R0")])
    record_length: int = 10_000
    sample_rate: float = 1e9
    demod_freq: float = 50e6
    fir: FirFilter | None = None
    stream_port: int = DEFAULT_STREAM_PORT

    def __post_init__(self):
        if self.record_length < 1:
            raise ReadoutError("record_length must be at least 1")
        if not 0 < self.demod_freq < self.sample_rate / 2:
            raise ReadoutError("demod_freq must lie in (0, sample_rate/2)")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ReadoutError("duplicate input channel names")

    def binding(self, name: str | None = None) -> InputBinding:
        if not self.channels:
            raise ReadoutError("no input channels bound")
        if name is None:
            return self.channels[0]
        for c in self.channels:
            if c.name == name:
                return c
        raise ReadoutError(f"unknown input channel {name!r}")


def preprocess(record: Record, fir: FirFilter | None = None, sample_rate: float = 1e9) -> Waveform:
    if not record.complete:
        raise IncompleteRecord(record)
    w = Waveform(record.samples.astype(np.float64) / CODE_SCALE, sample_rate)
    return fir_apply(w, fir) if fir is not None else w


@functools.lru_cache(maxsize=32)
def _reference(n: int, freq: float, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    phase = 2 * np.pi * freq / sample_rate * np.arange(n)
    return np.cos(phase), np.sin(phase)


def homodyne(w: Waveform | np.ndarray, freq: float, sample_rate: float | None = None) -> IQPoint:
    """Project onto cos/sin at ``freq``.

    For ``A cos(2 pi f n / fs + phi)`` over whole periods this returns
    ``(A cos phi, -A sin phi)``; no window is applied.
    """
    if isinstance(w, Waveform):
        x, fs = w.samples, w.sample_rate
    else:
        x, fs = np.asarray(w, dtype=np.float64), sample_rate
    if fs is None:
        raise ReadoutError("sample_rate required for a bare array")
    if not 0 <= freq < fs / 2:
        raise ReadoutError("demodulation frequency must be below Nyquist")
    cos, sin = _reference(x.size, float(freq), float(fs))
    k = 2.0 / x.size
    return IQPoint(float(k * np.dot(x, cos)), float(k * np.dot(x, sin)))


def phase_of(p: IQPoint) -> float:
    return math.atan2(-p.q, p.i)


@dataclass(frozen=True)
class Discriminator:
    """Linear boundary ``w . p = b``; the ``w . p > b`` side is |1>."""

    w: tuple[float, float]
    b: float

    def __post_init__(self):
        if math.hypot(*self.w) == 0:
            raise ReadoutError("discriminator normal must be non-zero")

    def score(self, p) -> float:
        i, q = p
        return self.w[0] * i + self.w[1] * q - self.b

    def classify_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return (pts @ np.asarray(self.w) - self.b > 0).astype(np.int8)

    def to_text(self) -> str:
        # shortest positional form that round-trips exactly
        return " ".join(np.format_float_positional(v, unique=True, trim="-") for v in (*self.w, self.b)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Discriminator":
        parts = text.split()
        if len(parts) != 3:
            raise ReadoutError(f"expected 'w_i w_q b', got {text.strip()!r}")
        wi, wq, b = (float(x) for x in parts)
        return cls((wi, wq), b)


def train_discriminator(points0, points1) -> Discriminator:
    """Perpendicular bisector of the segment joining the two class centroids."""
    p0 = np.asarray([tuple(p) for p in points0], dtype=np.float64).reshape(-1, 2)
    p1 = np.asarray([tuple(p) for p in points1], dtype=np.float64).reshape(-1, 2)
    if len(p0) == 0 or len(p1) == 0:
        raise ReadoutError("both classes need at least one point")
    c0, c1 = p0.mean(axis=0), p1.mean(axis=0)
    w = c1 - c0
    if not np.any(w):
        raise ReadoutError("class centroids coincide")
    b = float(w @ (c0 + c1) / 2)
    return Discriminator((float(w[0]), float(w[1])), b)


def classify(d: Discriminator, p) -> QubitState:
    return QubitState.ONE if d.score(p) > 0 else QubitState.ZERO


def save_discriminator(d: Discriminator, path: str | Path) -> None:
    Path(path).write_text(d.to_text())


def load_discriminator(path: str | Path) -> Discriminator:
    return Discriminator.from_text(Path(path).read_text())


def two_gaussian_error(distance: float, sigma: float) -> float:
    """Misassignment rate of the bisector rule for two isotropic Gaussians."""
    return 0.5 * float(erfc(distance / (2 * sigma) / math.sqrt(2)))


# ---------------------------------------------------------------- sessions


class Mode(str, enum.Enum):
    RAW = "raw"
    IQ = "iq"
    STATE = "state"


@dataclass
class AcquisitionResult:
    mode: Mode
    seq: list[int] = field(default_factory=list)
    points: list[IQPoint] = field(default_factory=list)
    states: list[int] = field(default_factory=list)
    records: list[np.ndarray] = field(default_factory=list)
    incomplete: int = 0


def acquire_session(
    receiver: DigitizerReceiver,
    cfg: AcquisitionConfig,
    n_triggers: int,
    mode: Mode | str = Mode.IQ,
    discriminator: Discriminator | None = None,
    channel: str | None = None,
    timeout: float = 10.0,
) -> AcquisitionResult:
    """Consume the next ``n_triggers`` complete records of one bound input."""
    mode = Mode(mode)
    if mode is Mode.STATE and discriminator is None:
        raise ReadoutError("state mode needs a trained discriminator")
    result = AcquisitionResult(mode)
    if n_triggers <= 0:
        return result
    binding = cfg.binding(channel)
    want = (binding.device_id, binding.channel_id)
    _drain(receiver.records)
    receiver.accepting.set()
    deadline = time.monotonic() + timeout
    try:
        while len(result.seq) < n_triggers:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AcquisitionTimeout(n_triggers, len(result.seq), timeout)
            try:
                rec = receiver.records.get(timeout=remaining)
            except queue.Empty:
                continue
            if rec.key[:2] != want:
                continue
            if not rec.complete or len(rec.samples) != cfg.record_length:
                result.incomplete += 1
                continue
            result.seq.append(rec.trigger_seq)
            if mode is Mode.RAW:
                result.records.append(rec.samples.copy())
                continue
            p = homodyne(preprocess(rec, cfg.fir, cfg.sample_rate), cfg.demod_freq)
            if mode is Mode.IQ:
                result.points.append(p)
            else:
                result.states.append(int(classify(discriminator, p)))
    finally:
        receiver.accepting.clear()
    return result


def _drain(q: queue.Queue) -> None:
    while True:
        try:
            q.get_nowait()
        except queue.Empty:
            return


class ReadoutServer:
    """Virtual digitizer: one receive socket, an acquisition config, per-input discriminators."""

    def __init__(self, cfg: AcquisitionConfig | None = None, host: str = "127.0.0.1"):
        self.host = host
        self.cfg = cfg or AcquisitionConfig()
        self.receiver: DigitizerReceiver | None = None
        self.discriminators: dict[str, Discriminator] = {}
        self._session = threading.Lock()

    def configure(self, cfg: AcquisitionConfig) -> None:
        with self._session:
            if self.receiver is not None and self.receiver.address[1] != cfg.stream_port:
                self.receiver.stop()
                self.receiver = None
            self.cfg = cfg

    def ensure_receiver(self) -> DigitizerReceiver:
        if self.receiver is None:
            self.receiver = DigitizerReceiver(self.host, self.cfg.stream_port)
            self.receiver.accepting.clear()
            self.receiver.start()
        return self.receiver

    def acquire(self, n: int, mode: str = "iq", channel: str | None = None, timeout: float = 10.0) -> AcquisitionResult:
        name = self.cfg.binding(channel).name
        disc = self.discriminators.get(name)
        if Mode(mode) is Mode.STATE and disc is None:
            raise ReadoutError(f"no trained discriminator for input {name!r}")
        with self._session:
            rx = self.ensure_receiver()
            return acquire_session(rx, self.cfg, n, mode, disc, name, timeout)

    def train(self, points0, points1, channel: str | None = None) -> Discriminator:
        d = train_discriminator(points0, points1)
        self.discriminators[self.cfg.binding(channel).name] = d
        return d

    def discriminator(self, channel: str | None = None) -> Discriminator:
        name = self.cfg.binding(channel).name
        try:
            return self.discriminators[name]
        except KeyError:
            raise ReadoutError(f"no trained discriminator for input {name!r}") from None

    def close(self) -> None:
        if self.receiver is not None:
            self.receiver.stop()
            self.receiver = None
