"""RPC method tables for the Control and Readout servers."""

from __future__ import annotations

from concurrent.futures import TimeoutError as FuturesTimeout

from .channel import ChannelConfig, ChannelRole, FirFilter
from .control import BindingKind, ChannelBinding, VirtualInstrument, parse_bindings
from .expr import parse_expr, sample_expr
from .link import TaskStatus
from .readout import (
    AcquisitionConfig,
    InputBinding,
    Mode,
    ReadoutServer,
    load_discriminator,
    save_discriminator,
)
from .rpc import RpcError, Service, field

DEVICE_TIMEOUT = 60.0


def _wait(ticket, timeout: float) -> dict:
    try:
        result = ticket.result(timeout)
    except FuturesTimeout:
        raise RpcError("device-timeout", f"device {ticket.device_id} did not answer within {timeout} s") from None
    if result.status is TaskStatus.DISCONNECTED:
        raise RpcError("device-disconnected", result.error or "device connection lost")
    if result.status is not TaskStatus.OK:
        raise RpcError("device-error", result.error or result.status.value)
    return {"device": result.device_id, "request_id": result.request_id}


def _fir(taps) -> FirFilter | None:
    return None if taps is None else FirFilter(tuple(taps))


def control_service(vi: VirtualInstrument) -> Service:
    svc = Service("control")

    @svc.method("ping")
    def ping():
        return {"pong": True, "server": "control"}

    @svc.method("bind_channel", {
        "name": field(str), "device": field(int), "channel": field(int),
        "kind": field(str, default="waveform"), "latency": field(int, default=0),
    })
    def bind_channel(name, device, channel, kind, latency):
        """Map a virtual channel onto a device channel."""
        try:
            kind = BindingKind(kind)
        except ValueError:
            raise RpcError("invalid-params", "field 'kind' must be one of waveform|trigger|dc", {"fields": ["kind"]})
        vi.bind_channel(ChannelBinding(name, device, channel, kind, latency))
        return {"ok": True}

    @svc.method("load_bindings", {"text": field(str)})
    def load_bindings(text):
        """Bind every line of a binding file."""
        bindings = parse_bindings(text)
        for b in bindings:
            vi.bind_channel(b)
        return {"bound": len(bindings)}

    @svc.method("list_channels")
    def list_channels():
        return {"channels": [
            {"name": b.virtual_channel, "device": b.device_id, "channel": b.physical_channel,
             "kind": b.kind.value, "latency": b.latency_samples,
             "added_delay": vi.alignment.get(b.virtual_channel, 0),
             "armed": b.virtual_channel in vi.armed}
            for b in vi.list_channels()
        ]}

    @svc.method("configure_channel", {
        "name": field(str), "role": field(str, default="Z"), "fir": field(list, default=None, nullable=True),
        "offset": field(float, default=0.0), "gain": field(float, default=1.0),
        "delay": field(int, default=0), "full_scale_volts": field(float, default=1.0),
    })
    def configure_channel(name, role, fir, offset, gain, delay, full_scale_volts):
        cfg = ChannelConfig(ChannelRole(role), _fir(fir), float(offset), delay, float(gain), float(full_scale_volts))
        vi.configure_channel(name, cfg)
        return {"ok": True}

    @svc.method("align_timing")
    def align_timing():
        return {"added": vi.align_timing()}

    @svc.method("define_wave", {
        "slot": field(int), "expr": field(str), "bindings": field(dict, default=None, nullable=True),
        "length": field(int, default=6000), "sample_rate": field(float, default=1e9),
    })
    def define_wave(slot, expr, bindings, length, sample_rate):
        """Parse and sample an expression into a store slot."""
        w = sample_expr(parse_expr(expr), bindings or {}, length, float(sample_rate))
        vi.store.put(slot, w)
        return {"ok": True, "slot": slot, "samples": len(w)}

    @svc.method("write_wave", {
        "channel": field(str), "slot": field(int, default=None, nullable=True),
        "expr": field(str, default=None, nullable=True), "bindings": field(dict, default=None, nullable=True),
        "length": field(int, default=6000), "sample_rate": field(float, default=1e9),
        "timeout": field(float, default=DEVICE_TIMEOUT),
    })
    def write_wave(channel, slot, expr, bindings, length, sample_rate, timeout):
        """Render a stored slot or an expression through the channel pipeline and upload it."""
        if (slot is None) == (expr is None):
            raise RpcError("invalid-params", "give exactly one of 'slot' or 'expr'", {"fields": ["slot", "expr"]})
        upload = vi.write_wave(channel, slot if expr is None else expr, bindings, length, float(sample_rate))
        ack = _wait(upload.ticket, timeout)
        return {"ok": True, "samples": int(upload.record.codes.size), "clipped": upload.record.clipped, **ack}

    @svc.method("set_dc", {"channel": field(str), "volts": field(float), "timeout": field(float, default=DEVICE_TIMEOUT)})
    def set_dc(channel, volts, timeout):
        ticket = vi.set_dc(channel, float(volts))
        _wait(ticket, timeout)
        return {"ok": True, "microvolts": int(round(volts * 1e6))}

    @svc.method("play_all", {"trigger_mode": field(int, default=0), "timeout": field(float, default=DEVICE_TIMEOUT)})
    def play_all(trigger_mode, timeout):
        tickets = vi.play_all(trigger_mode)
        for t in tickets.values():
            _wait(t, timeout)
        return {"ok": True, "played": sorted(tickets)}

    return svc


def _acq_config(params: dict, current: AcquisitionConfig) -> AcquisitionConfig:
    channels = current.channels
    if params["channels"] is not None:
        try:
            channels = [InputBinding(int(c["device"]), int(c["channel"]), str(c["name"])) for c in params["channels"]]
        except (KeyError, TypeError, ValueError):
            raise RpcError("invalid-params", "channels entries need device, channel, name", {"fields": ["channels"]}) from None
    return AcquisitionConfig(
        channels=channels,
        record_length=params["record_length"] if params["record_length"] is not None else current.record_length,
        sample_rate=float(params["sample_rate"] if params["sample_rate"] is not None else current.sample_rate),
        demod_freq=float(params["demod_freq"] if params["demod_freq"] is not None else current.demod_freq),
        fir=_fir(params["fir"]) if params["fir"] is not None else current.fir,
        stream_port=params["stream_port"] if params["stream_port"] is not None else current.stream_port,
    )


def _points(values, name: str) -> list[tuple[float, float]]:
    try:
        pts = [(float(p[0]), float(p[1])) for p in values]
    except (TypeError, ValueError, IndexError):
        raise RpcError("invalid-params", f"field {name!r} must be a list of [i, q] pairs", {"fields": [name]}) from None
    return pts


def readout_service(server: ReadoutServer) -> Service:
    svc = Service("readout")
    opt = {"default": None, "nullable": True}

    @svc.method("ping")
    def ping():
        return {"pong": True, "server": "readout"}

    @svc.method("configure", {
        "channels": field(list, **opt), "record_length": field(int, **opt), "sample_rate": field(float, **opt),
        "demod_freq": field(float, **opt), "fir": field(list, **opt), "stream_port": field(int, **opt),
    })
    def configure(**params):
        """Update the virtual digitizer configuration; omitted fields keep their value."""
        cfg = _acq_config(params, server.cfg)
        server.configure(cfg)
        return {"ok": True, "record_length": cfg.record_length, "demod_freq": cfg.demod_freq,
                "channels": [c.name for c in cfg.channels]}

    @svc.method("acquire", {
        "n": field(int), "mode": field(str, default="iq"), "channel": field(str, **opt),
        "timeout": field(float, default=10.0),
    })
    def acquire(n, mode, channel, timeout):
        """Acquire n triggers; iq/state replies carry only per-trigger results."""
        try:
            mode = Mode(mode)
        except ValueError:
            raise RpcError("invalid-params", "field 'mode' must be raw|iq|state", {"fields": ["mode"]}) from None
        if n < 0:
            raise RpcError("invalid-params", "field 'n' must be non-negative", {"fields": ["n"]})
        res = server.acquire(n, mode.value, channel, timeout)
        out = {"seq": res.seq}
        if mode is Mode.IQ:
            out["points"] = [[p.i, p.q] for p in res.points]
        elif mode is Mode.STATE:
            out["states"] = res.states
        else:
            out["records"] = [r.tolist() for r in res.records]
        return out

    @svc.method("train", {"points0": field(list), "points1": field(list), "channel": field(str, **opt)})
    def train(points0, points1, channel):
        d = server.train(_points(points0, "points0"), _points(points1, "points1"), channel)
        return {"w": list(d.w), "b": d.b}

    @svc.method("classify", {"points": field(list), "channel": field(str, **opt)})
    def classify(points, channel):
        d = server.discriminator(channel)
        return {"states": [int(s) for s in d.classify_many(_points(points, "points"))]}

    @svc.method("save_discriminator", {"path": field(str), "channel": field(str, **opt)})
    def save(path, channel):
        d = server.discriminator(channel)
        save_discriminator(d, path)
        return {"ok": True, "w": list(d.w), "b": d.b}

    @svc.method("load_discriminator", {"path": field(str), "channel": field(str, **opt)})
    def load(path, channel):
        d = load_discriminator(path)
        server.discriminators[server.cfg.binding(channel).name] = d
        return {"ok": True, "w": list(d.w), "b": d.b}

    return svc
