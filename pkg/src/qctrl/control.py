"""Control Server core: virtual instrument over separate AWG and DC devices."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from pathlib import Path

from . import link
from .channel import ChannelConfig, DacRecord, apply_channel, render_dac
from .expr import Expr, parse_expr, sample_expr
from .link import InstrumentLink, Op, Ticket
from .store import WaveformStore
from .waveform import DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE, Waveform

DEFAULT_DC_RANGE_VOLTS = 10.0


class ControlError(ValueError):
    code = "control-error"


class DuplicateChannel(ControlError):
    code = "duplicate-channel"


class BindingConflict(ControlError):
    code = "binding-conflict"


class UnknownChannel(ControlError, KeyError):
    code = "unknown-channel"

    def __str__(self):
        return ControlError.__str__(self)


class KindMismatch(ControlError):
    code = "kind-mismatch"


class OutOfRange(ControlError):
    code = "out-of-range"


class UnarmedChannels(ControlError):
    code = "unarmed-channels"

    def __init__(self, names: list[str]):
        super().__init__(f"channels without an uploaded waveform: {', '.join(names)}")
        self.names = names


class BindingKind(enum.Enum):
    WAVEFORM = "waveform"
    TRIGGER = "trigger"
    DC = "dc"


@dataclass(frozen=True)
class ChannelBinding:
    virtual_channel: str
    device_id: int
    physical_channel: int
    kind: BindingKind = BindingKind.WAVEFORM
    latency_samples: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", BindingKind(self.kind))
        if self.latency_samples < 0:
            raise ControlError("latency_samples must be non-negative")

    @property
    def target(self) -> tuple[int, int, BindingKind]:
        return (self.device_id, self.physical_channel, self.kind)


def parse_bindings(text: str) -> list[ChannelBinding]:
    """``virtual_name device_id physical_channel kind latency_samples`` per line."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ControlError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        name, dev, ch, kind, lat = parts
        try:
            out.append(ChannelBinding(name, int(dev), int(ch), BindingKind(kind), int(lat)))
        except ValueError as exc:
            raise ControlError(f"line {lineno}: {exc}") from None
    return out


def load_bindings(path: str | Path) -> list[ChannelBinding]:
    return parse_bindings(Path(path).read_text())


@dataclass
class Upload:
    channel: str
    slot: int
    record: DacRecord
    ticket: Ticket


class VirtualInstrument:
    """Named channels mapped onto (device, physical channel) pairs.

    Channel configs hold the user's compensation settings; the timing
    alignment computed by :meth:`align_timing` is kept separately and added
    to ``delay_samples`` when a waveform is rendered.
    """

    def __init__(self, link: InstrumentLink | None = None, store: WaveformStore | None = None,
                 device_addresses: dict[int, tuple[str, int]] | None = None,
                 dc_range_volts: float = DEFAULT_DC_RANGE_VOLTS):
        self.link = link or InstrumentLink()
        self.store = store or WaveformStore()
        self.device_addresses = dict(device_addresses or {})
        self.dc_range_volts = dc_range_volts
        self.bindings: dict[str, ChannelBinding] = {}
        self.channel_configs: dict[str, ChannelConfig] = {}
        self.alignment: dict[str, int] = {}
        self.armed: dict[str, int] = {}
        self._lock = threading.RLock()
        self._channel_locks: dict[str, threading.Lock] = {}

    # -------------------------------------------------------- bindings

    def bind_channel(self, binding: ChannelBinding) -> None:
        with self._lock:
            if binding.virtual_channel in self.bindings:
                raise DuplicateChannel(f"channel {binding.virtual_channel!r} already bound")
            for other in self.bindings.values():
                if other.target == binding.target:
                    raise BindingConflict(
                        f"{binding.virtual_channel!r} and {other.virtual_channel!r} both map to "
                        f"device {binding.device_id} channel {binding.physical_channel} ({binding.kind.value})"
                    )
            if not self.link.has_device(binding.device_id):
                self.link.add_device(binding.device_id, self.device_addresses.get(binding.device_id))
            self.bindings[binding.virtual_channel] = binding
            self.channel_configs.setdefault(binding.virtual_channel, ChannelConfig())
            self._channel_locks[binding.virtual_channel] = threading.Lock()

    def unbind_channel(self, name: str) -> None:
        with self._lock:
            self._binding(name)
            for table in (self.bindings, self.channel_configs, self.alignment, self.armed, self._channel_locks):
                table.pop(name, None)

    def list_channels(self) -> list[ChannelBinding]:
        with self._lock:
            return [self.bindings[k] for k in sorted(self.bindings)]

    def _binding(self, name: str) -> ChannelBinding:
        try:
            return self.bindings[name]
        except KeyError:
            raise UnknownChannel(f"unknown channel {name!r}") from None

    def _require(self, name: str, kind: BindingKind) -> ChannelBinding:
        b = self._binding(name)
        if b.kind is not kind:
            raise KindMismatch(f"channel {name!r} is {b.kind.value}, operation needs {kind.value}")
        return b

    def configure_channel(self, name: str, cfg: ChannelConfig) -> None:
        with self._lock:
            self._binding(name)
            self.channel_configs[name] = cfg

    def effective_config(self, name: str) -> ChannelConfig:
        cfg = self.channel_configs[name]
        extra = self.alignment.get(name, 0)
        return cfg.with_added_delay(extra) if extra else cfg

    # -------------------------------------------------------- timing

    def align_timing(self) -> dict[str, int]:
        """Pad every waveform channel up to the slowest channel's latency."""
        with self._lock:
            wave = {n: b.latency_samples for n, b in self.bindings.items() if b.kind is BindingKind.WAVEFORM}
            if not wave:
                self.alignment = {}
                return {}
            top = max(wave.values())
            self.alignment = {n: top - lat for n, lat in wave.items()}
            return dict(self.alignment)

    # -------------------------------------------------------- waveforms

    def resolve(self, source: int | str | Expr, bindings: dict | None = None,
                length: int = DEFAULT_LENGTH, sample_rate: float = DEFAULT_SAMPLE_RATE) -> Waveform:
        if isinstance(source, bool):
            raise ControlError("waveform source must be a slot index or an expression")
        if isinstance(source, int):
            return self.store.get(source)
        node = parse_expr(source) if isinstance(source, str) else source
        return sample_expr(node, bindings or {}, length, sample_rate)

    def render(self, name: str, source, bindings: dict | None = None,
               length: int = DEFAULT_LENGTH, sample_rate: float = DEFAULT_SAMPLE_RATE) -> DacRecord:
        w = self.resolve(source, bindings, length, sample_rate)
        cfg = self.effective_config(name)
        return render_dac(apply_channel(w, cfg), cfg)

    def write_wave(self, name: str, source, bindings: dict | None = None,
                   length: int = DEFAULT_LENGTH, sample_rate: float = DEFAULT_SAMPLE_RATE) -> Upload:
        b = self._require(name, BindingKind.WAVEFORM)
        with self._channel_locks[name]:
            record = self.render(name, source, bindings, length, sample_rate)
            slot = b.physical_channel
            ticket = self.link.submit(b.device_id, Op.UPLOAD_WAVE, link.upload_wave_body(slot, record.codes))
            self.armed[name] = slot
        return Upload(name, slot, record, ticket)

    def set_dc(self, name: str, volts: float) -> Ticket:
        b = self._require(name, BindingKind.DC)
        if not abs(volts) <= self.dc_range_volts:
            raise OutOfRange(f"{volts} V outside +/-{self.dc_range_volts} V")
        uv = int(round(volts * 1e6))
        with self._channel_locks[name]:
            return self.link.submit(b.device_id, Op.DC_SET, link.dc_set_body(b.physical_channel, uv))

    def play_all(self, trigger_mode: int = 0) -> dict[str, Ticket]:
        """Arm every waveform channel, or nothing if any lacks an upload."""
        with self._lock:
            wave = [b for b in self.list_channels() if b.kind is BindingKind.WAVEFORM]
            unarmed = [b.virtual_channel for b in wave if b.virtual_channel not in self.armed]
            if unarmed:
                raise UnarmedChannels(unarmed)
            for dev in sorted({b.device_id for b in wave}):
                self.link.submit(dev, Op.SET_TRIG, link.set_trig_body(trigger_mode))
            return {
                b.virtual_channel: self.link.submit(
                    b.device_id, Op.PLAY, link.play_body(b.physical_channel, self.armed[b.virtual_channel])
                )
                for b in wave
            }

    def close(self) -> None:
        self.link.close()
