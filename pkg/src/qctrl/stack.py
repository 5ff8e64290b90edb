"""Launch and tear down the Manager, both servers, and device emulators in one process."""

from __future__ import annotations

import dataclasses
import errno
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError
from .control import VirtualInstrument, load_bindings
from .datalink import DEFAULT_STREAM_PORT
from .emulators import AwgEmulator, DigitizerEmulator, EmuDigitizerProfile
from .readout import AcquisitionConfig, ReadoutServer
from .rpc import DEFAULT_PORTS, LineServer, RpcClient, serve_manager, serve_service
from .services import control_service, readout_service

log = logging.getLogger(__name__)

COMPONENTS = ("manager", "control", "readout", "awg-emu", "digitizer-emu")


class PortInUse(OSError):
    def __init__(self, name: str, port: int):
        super().__init__(errno.EADDRINUSE, f"{name} port {port} already in use")
        self.name = name
        self.port = port


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _opt_float(raw: str) -> float | None:
    return None if raw.strip().lower() in ("", "none", "off", "0") else float(raw)


def _opt_int(raw: str) -> int | None:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _opt_str(raw: str) -> str | None:
    return raw or None


@dataclass
class StackConfig:
    host: str = "127.0.0.1"
    manager_port: int = DEFAULT_PORTS["manager"]
    control_port: int = DEFAULT_PORTS["control"]
    readout_port: int = DEFAULT_PORTS["readout"]
    awg_devices: tuple[int, ...] = (0, 1)
    awg_port_base: int = 9000
    awg_rate_limit: float | None = None
    stream_port: int = DEFAULT_STREAM_PORT
    bindings: str | None = None
    profile: str | None = None
    loss: float = 0.0
    reorder: float = 0.0
    digitizer_triggers: int | None = None
    demo: bool = False
    demo_shots: int = 2000

    _PARSERS = {
        "host": str, "manager_port": int, "control_port": int, "readout_port": int,
        "awg_devices": _ints, "awg_port_base": int, "awg_rate_limit": _opt_float,
        "stream_port": int, "bindings": _opt_str, "profile": _opt_str, "loss": float,
        "reorder": float, "digitizer_triggers": _opt_int, "demo": _bool, "demo_shots": int,
    }

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "StackConfig":
        kwargs = {}
        for key, raw in values.items():
            parse = cls._PARSERS.get(key)
            if parse is None:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("manager_port", "control_port", "readout_port", "stream_port", "awg_port_base"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ConfigError(f"{name} {port} out of range")
        if not 0 <= self.loss <= 1 or not 0 <= self.reorder <= 1:
            raise ConfigError("loss and reorder are fractions in [0, 1]")
        fixed = [p for p in (self.manager_port, self.control_port, self.readout_port) if p]
        fixed += [self.awg_port_base + d for d in self.awg_devices] if self.awg_port_base else []
        dup = [p for p, n in Counter(fixed).items() if n > 1]
        if dup:
            raise ConfigError(f"port(s) assigned twice: {', '.join(map(str, sorted(dup)))}")

    def digitizer_profile(self) -> EmuDigitizerProfile:
        prof = EmuDigitizerProfile.from_file(self.profile) if self.profile else demo_profile()
        return dataclasses.replace(prof, loss=self.loss or prof.loss, reorder=self.reorder or prof.reorder)


def demo_profile() -> EmuDigitizerProfile:
    """Alternating |0>/|1> readout traces, slow enough to share a core with the servers."""
    return EmuDigitizerProfile(record_length=2000, carrier_freq=50e6, amplitude=0.01, noise_sigma=0.1,
                               trigger_interval=1e-3, schedule=(0, 1), trace_bank=128)


def _bind(name: str, port: int, start):
    try:
        return start()
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(name, port) from None
        raise


class Stack:
    """Owns every component it started; :meth:`stop` tears them down in reverse order."""

    def __init__(self, cfg: StackConfig):
        self.cfg = cfg
        self.awgs: dict[int, AwgEmulator] = {}
        self.vi: VirtualInstrument | None = None
        self.readout: ReadoutServer | None = None
        self.servers: dict[str, LineServer] = {}
        self.digitizer: DigitizerEmulator | None = None

    def address(self, name: str) -> tuple[str, int]:
        return self.servers[name].address

    def start(self, components=COMPONENTS) -> "Stack":
        unknown = sorted(set(components) - set(COMPONENTS))
        if unknown:
            raise ConfigError(f"unknown component(s): {', '.join(unknown)}")
        try:
            if "awg-emu" in components:
                self.start_awgs()
            if "control" in components:
                self.start_control()
            if "readout" in components:
                self.start_readout()
            if "manager" in components:
                self.start_manager()
            if "digitizer-emu" in components:
                self.start_digitizer()
        except BaseException:
            self.stop()
            raise
        return self

    def start_awgs(self) -> None:
        c = self.cfg
        for dev in c.awg_devices:
            port = c.awg_port_base + dev if c.awg_port_base else 0
            self.awgs[dev] = _bind(f"awg-emu {dev}", port,
                                   lambda: AwgEmulator(c.host, port, c.awg_rate_limit).start())

    def device_addresses(self) -> dict[int, tuple[str, int]]:
        c = self.cfg
        addrs = {d: (c.host, c.awg_port_base + d) for d in c.awg_devices}
        addrs.update({d: (c.host, emu.port) for d, emu in self.awgs.items()})
        return addrs

    def start_control(self) -> None:
        c = self.cfg
        self.vi = VirtualInstrument(device_addresses=self.device_addresses())
        if c.bindings:
            for b in load_bindings(Path(c.bindings)):
                self.vi.bind_channel(b)
        self.servers["control"] = _bind("control", c.control_port,
                                        lambda: serve_service(control_service(self.vi), (c.host, c.control_port)))

    def start_readout(self) -> None:
        c = self.cfg
        self.readout = ReadoutServer(AcquisitionConfig(stream_port=c.stream_port), host=c.host)
        _bind("digitizer stream", c.stream_port, self.readout.ensure_receiver)
        # an ephemeral stream port becomes the configured one
        self.readout.cfg.stream_port = self.readout.receiver.address[1]
        self.servers["readout"] = _bind("readout", c.readout_port,
                                        lambda: serve_service(readout_service(self.readout), (c.host, c.readout_port)))

    def start_manager(self) -> None:
        c = self.cfg
        routes = {
            "control": self.servers["control"].address if "control" in self.servers else (c.host, c.control_port),
            "readout": self.servers["readout"].address if "readout" in self.servers else (c.host, c.readout_port),
        }
        self.servers["manager"] = _bind("manager", c.manager_port,
                                        lambda: serve_manager(routes, (c.host, c.manager_port)))

    def start_digitizer(self, profile: EmuDigitizerProfile | None = None) -> DigitizerEmulator:
        c = self.cfg
        port = self.readout.cfg.stream_port if self.readout is not None else c.stream_port
        self.digitizer = DigitizerEmulator(profile or c.digitizer_profile(), (c.host, port))
        self.digitizer.start(c.digitizer_triggers)
        return self.digitizer

    def client(self, timeout: float = 30.0) -> RpcClient:
        return RpcClient(self.address("manager"), timeout)

    def stop(self) -> None:
        if self.digitizer is not None:
            self.digitizer.stop()
            self.digitizer = None
        for name in ("manager", "readout", "control"):
            server = self.servers.pop(name, None)
            if server is not None:
                server.stop()
        if self.readout is not None:
            self.readout.close()
            self.readout = None
        if self.vi is not None:
            self.vi.close()
            self.vi = None
        for emu in self.awgs.values():
            emu.stop()
        self.awgs.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


# ---------------------------------------------------------------- demo


DEMO_BINDINGS = """\
XY0  0 0 waveform 4
Z0   0 1 waveform 0
RO0  1 0 waveform 2
FLUX 1 0 dc 0
"""


def run_demo(client: RpcClient, profile: EmuDigitizerProfile, shots: int = 2000) -> dict:
    """Upload a pulse sequence, calibrate a discriminator, and read out states."""
    client.call("control.load_bindings", {"text": DEMO_BINDINGS})
    client.call("control.align_timing")
    client.call("control.define_wave", {"slot": 3, "expr": "gauss(a=0.5, mu=3e-6, sigma=2e-7)"})
    client.call("control.write_wave", {"channel": "XY0", "slot": 3})
    client.call("control.write_wave", {"channel": "Z0", "expr": "flattop(a=0.3, t1=1e-6, t2=5e-6, sigma=5e-8)"})
    client.call("control.write_wave", {"channel": "RO0", "expr": "sine(a=0.4, f=5e7) * rect(t1=3.5e-6, t2=5.5e-6)"})
    client.call("control.set_dc", {"channel": "FLUX", "volts": 0.25})
    client.call("control.play_all")

    client.call("readout.configure", {"record_length": profile.record_length,
                                      "sample_rate": profile.sample_rate, "demod_freq": profile.carrier_freq})
    period = len(profile.schedule)
    cal = client.call("readout.acquire", {"n": shots, "mode": "iq", "timeout": 60.0})
    by_state: dict[int, list] = {0: [], 1: []}
    for seq, p in zip(cal["seq"], cal["points"]):
        by_state[profile.schedule[seq % period]].append(p)
    disc = client.call("readout.train", {"points0": by_state[0], "points1": by_state[1]})
    run = client.call("readout.acquire", {"n": shots, "mode": "state", "timeout": 60.0})
    errors = {0: 0, 1: 0}
    counts = {0: 0, 1: 0}
    for seq, s in zip(run["seq"], run["states"]):
        truth = profile.schedule[seq % period]
        counts[truth] += 1
        errors[truth] += int(s != truth)
    p01 = errors[0] / max(counts[0], 1)
    p10 = errors[1] / max(counts[1], 1)
    return {
        "shots": len(run["states"]),
        "discriminator": disc,
        "p1_given_0": p01,
        "p0_given_1": p10,
        "assignment_fidelity": 1 - (p01 + p10) / 2,
    }


def format_demo(summary: dict) -> str:
    return (
        f"readout demo: {summary['shots']} shots, "
        f"P(1|0)={summary['p1_given_0']:.4f}, P(0|1)={summary['p0_given_1']:.4f}, "
        f"assignment fidelity {summary['assignment_fidelity']:.4f}"
    )
