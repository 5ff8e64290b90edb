"""Software stand-ins for AWG / DC-source endpoints and the 1 GS/s digitizer."""

from __future__ import annotations

import dataclasses
import gc
import logging
import math
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import link
from .datalink import CODE_MAX, HEADER as FRAME_HEADER, MAGIC, MAX_SAMPLES, VERSION
from .link import Op, ProtocolError, Status, WireMessage, make_response

log = logging.getLogger(__name__)

DC_RANGE_UV = 10_000_000


# ---------------------------------------------------------------- AWG / DC


@dataclass
class EmuAwgState:
    slots: dict[int, bytes] = field(default_factory=dict)
    offsets: dict[int, int] = field(default_factory=dict)
    delays: dict[int, int] = field(default_factory=dict)
    trigger_mode: int = 0
    plays: list[tuple[int, int]] = field(default_factory=list)
    dc_microvolts: dict[int, int] = field(default_factory=dict)
    bytes_received: int = 0
    messages: int = 0
    rate_limit_bps: float | None = None
    readback: bool = True

    def snapshot(self) -> dict:
        return {
            "slots": dict(sorted(self.slots.items())),
            "offsets": dict(sorted(self.offsets.items())),
            "delays": dict(sorted(self.delays.items())),
            "trigger_mode": self.trigger_mode,
            "plays": list(self.plays),
            "dc": dict(sorted(self.dc_microvolts.items())),
        }


_STATS = struct.Struct("<QQ")


def handle_awg_message(state: EmuAwgState, msg: WireMessage) -> WireMessage:
    """Apply one request to ``state``; every request gets exactly one response."""
    body = msg.body
    try:
        op = Op(msg.opcode)
    except ValueError:
        return make_response(msg, Status.BAD_OPCODE)
    try:
        if op is Op.UPLOAD_WAVE:
            slot, codes = link.parse_upload_wave(body)
            state.slots[slot] = codes.tobytes()
        elif op is Op.SET_OFFSET:
            ch, code = struct.unpack("<Bh", body)
            state.offsets[ch] = code
        elif op is Op.SET_DELAY:
            ch, samples = struct.unpack("<BI", body)
            state.delays[ch] = samples
        elif op is Op.SET_TRIG:
            (state.trigger_mode,) = struct.unpack("<B", body)
        elif op is Op.PLAY:
            ch, slot = struct.unpack("<BH", body)
            if slot not in state.slots:
                return make_response(msg, Status.EMPTY_SLOT)
            state.plays.append((ch, slot))
        elif op is Op.READ_WAVE:
            (slot,) = struct.unpack("<H", body)
            if not state.readback:
                return make_response(msg, Status.BAD_OPCODE)
            data = state.slots.get(slot)
            if data is None:
                return make_response(msg, Status.EMPTY_SLOT)
            return make_response(msg, Status.OK, struct.pack("<I", len(data) // 2) + data)
        elif op is Op.STATS:
            if body:
                raise ProtocolError("STATS takes no body")
            return make_response(msg, Status.OK, _STATS.pack(state.bytes_received, state.messages))
        elif op is Op.DC_SET:
            ch, uv = link.parse_dc_set(body)
            if abs(uv) > DC_RANGE_UV:
                return make_response(msg, Status.OUT_OF_RANGE)
            state.dc_microvolts[ch] = uv
        elif op is Op.PING:
            pass
    except (struct.error, ProtocolError):
        return make_response(msg, Status.BAD_BODY)
    return make_response(msg, Status.OK)


def parse_stats(payload: bytes) -> tuple[int, int]:
    return _STATS.unpack(payload)


class AwgEmulator:
    """TCP endpoint speaking the instrument-link protocol.

    ``rate_limit_bps`` throttles ingress to mimic a device link slower than
    the host NIC; ``pause()`` stalls request processing without closing.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, rate_limit_bps: float | None = None):
        self.state = EmuAwgState(rate_limit_bps=rate_limit_bps)
        self._lock = threading.Lock()
        self._running = threading.Event()
        self._running.set()
        self._stopped = threading.Event()
        self._listener = socket.create_server((host, port), reuse_port=False)
        self.address = self._listener.getsockname()
        self._conns: list[socket.socket] = []
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "AwgEmulator":
        self._thread = threading.Thread(target=self._accept_loop, name=f"awg-emu-{self.port}", daemon=True)
        self._thread.start()
        return self

    def pause(self) -> None:
        self._running.clear()

    def resume(self) -> None:
        self._running.set()

    def stop(self) -> None:
        self._stopped.set()
        self._running.set()
        try:
            # wakes a blocked accept(); close() alone does not on Linux
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        for c in list(self._conns):
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _read_body(self, conn: socket.socket, n: int) -> bytearray:
        rate = self.state.rate_limit_bps
        if not rate:
            return link.recv_exact(conn, n)
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        t0 = time.perf_counter()
        while got < n:
            k = conn.recv_into(view[got:], min(n - got, 65536))
            if k == 0:
                raise ProtocolError("stream closed inside a message")
            got += k
            ahead = got * 8 / rate - (time.perf_counter() - t0)
            if ahead > 0:
                time.sleep(ahead)
        return buf

    def _serve(self, conn: socket.socket) -> None:
        try:
            while not self._stopped.is_set():
                first = conn.recv(4, socket.MSG_WAITALL)
                if len(first) < 4:
                    break
                (total,) = link.LEN_FIELD.unpack(first)
                if total < 4:
                    raise ProtocolError(f"total_len {total} too small")
                rest = self._read_body(conn, total)
                opcode, rid = struct.unpack_from("<HH", rest)
                msg = WireMessage(opcode, rid, memoryview(rest)[4:])
                self._running.wait()
                if self._stopped.is_set():
                    break
                with self._lock:
                    self.state.bytes_received += 4 + total
                    self.state.messages += 1
                    reply = handle_awg_message(self.state, msg)
                link.send_message(conn, reply)
        except (OSError, ProtocolError) as exc:
            log.debug("awg emulator %s connection ended: %s", self.port, exc)
        finally:
            conn.close()


def run_awg_emulator(port: int = 0, host: str = "127.0.0.1", rate_limit_bps: float | None = None) -> AwgEmulator:
    return AwgEmulator(host, port, rate_limit_bps).start()


def awg_process_main(port: int, rate_limit_bps, ready, stop) -> None:
    emu = AwgEmulator("127.0.0.1", port, rate_limit_bps).start()
    ready.put(emu.port)
    stop.wait()
    emu.stop()


# ---------------------------------------------------------------- digitizer


@dataclass
class EmuDigitizerProfile:
    record_length: int = 10_000
    sample_rate: float = 1e9
    carrier_freq: float = 50e6
    amplitude: float = 0.5
    phase_zero: float = 0.0
    phase_one: float = math.pi / 2
    noise_sigma: float = 0.05
    trigger_interval: float = 500e-6
    schedule: tuple[int, ...] = (0,)
    device_id: int = 0
    channel_id: int = 0
    seed: int = 0
    # >0: synthesize this many traces per state up front and cycle through them
    trace_bank: int = 0
    loss: float = 0.0
    reorder: float = 0.0
    drop_frames: tuple[int, ...] = ()
    # triggers emitted back to back per wake-up; the mean rate is unchanged
    burst: int = 1

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.trigger_interval > 0:
            raise ValueError("trigger_interval must be positive")
        if self.record_length < 1:
            raise ValueError("record_length must be positive")
        if self.burst < 1:
            raise ValueError("burst must be at least 1")
        if not self.schedule or any(s not in (0, 1) for s in self.schedule):
            raise ValueError("schedule must be a non-empty sequence of 0/1 states")
        self.schedule = tuple(int(s) for s in self.schedule)
        self.drop_frames = tuple(int(i) for i in self.drop_frames)

    def state_for(self, trigger_seq: int) -> int:
        return self.schedule[trigger_seq % len(self.schedule)]

    def phase(self, state: int) -> float:
        return self.phase_one if state else self.phase_zero

    @property
    def frames_per_record(self) -> int:
        return -(-self.record_length // MAX_SAMPLES)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "EmuDigitizerProfile":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown profile key {key!r}")
            default = fields[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            elif isinstance(default, int) and not isinstance(default, bool):
                kwargs[key] = int(float(raw))
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "EmuDigitizerProfile":
        from .config import read_key_values

        return cls.from_mapping(read_key_values(path))


def synth_readout_trace(profile: EmuDigitizerProfile, state: int, seed) -> np.ndarray:
    """12-bit codes of one dispersive readout record for ``state``."""
    n = np.arange(profile.record_length)
    w = 2 * np.pi * profile.carrier_freq / profile.sample_rate
    clean = profile.amplitude * np.cos(w * n + profile.phase(state))
    if profile.noise_sigma > 0:
        clean = clean + np.random.default_rng(seed).normal(0.0, profile.noise_sigma, n.size)
    return np.rint(CODE_MAX * np.clip(clean, -1.0, 1.0)).astype(np.int16)


def trigger_seed(profile: EmuDigitizerProfile, trigger_seq: int) -> list[int]:
    return [profile.seed, trigger_seq]


def _payloads(codes: np.ndarray) -> list[bytes]:
    raw = codes.astype("<i2").tobytes()
    step = 2 * MAX_SAMPLES
    return [raw[i:i + step] for i in range(0, max(len(raw), 1), step)]


@dataclass
class EmuStats:
    triggers: int = 0
    frames: int = 0
    bytes: int = 0
    dropped_frames: int = 0
    slipped: int = 0
    elapsed: float = 0.0

    @property
    def slip_fraction(self) -> float:
        return self.slipped / self.triggers if self.triggers else 0.0

    @property
    def mbps(self) -> float:
        return self.bytes * 8 / self.elapsed / 1e6 if self.elapsed else 0.0


class DigitizerEmulator:
    """Streams one fragmented record per trigger to ``target`` over UDP.

    A trigger counts as slipped when its frames leave more than one pacing
    period (``burst`` trigger intervals) after the scheduled time.
    """

    def __init__(self, profile: EmuDigitizerProfile, target: tuple[str, int]):
        self.profile = profile
        self.target = target
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 << 20)
        self.stats = EmuStats()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._bank: dict[int, list[list[bytes]]] = {}
        self._fault_rng = np.random.default_rng([profile.seed, 0xFA17])
        if profile.trace_bank > 0:
            for state in set(profile.schedule):
                self._bank[state] = [
                    _payloads(synth_readout_trace(profile, state, [profile.seed, state, j]))
                    for j in range(profile.trace_bank)
                ]

    def payloads_for(self, trigger_seq: int) -> list[bytes]:
        p = self.profile
        state = p.state_for(trigger_seq)
        if self._bank:
            bank = self._bank[state]
            return bank[(trigger_seq // len(p.schedule)) % len(bank)]
        return _payloads(synth_readout_trace(p, state, trigger_seed(p, trigger_seq)))

    def _send_trigger(self, seq: int) -> None:
        p = self.profile
        payloads = self.payloads_for(seq)
        count = len(payloads)
        order = list(range(count))
        rng = self._fault_rng
        if p.reorder and count > 1 and rng.random() < p.reorder:
            rng.shuffle(order)
        sendto = self.sock.sendto
        pack = FRAME_HEADER.pack
        st = self.stats
        for i in order:
            if i in p.drop_frames or (p.loss and rng.random() < p.loss):
                st.dropped_frames += 1
                continue
            data = payloads[i]
            dgram = pack(MAGIC, VERSION, p.channel_id, p.device_id, seq & 0xFFFFFFFF, i, count, len(data) // 2) + data
            sendto(dgram, self.target)
            st.frames += 1
            st.bytes += len(dgram)

    def run(self, n_triggers: int | None = None, duration: float | None = None, start_seq: int = 0) -> EmuStats:
        p = self.profile
        interval = p.trigger_interval
        period = interval * p.burst
        st = self.stats
        t0 = time.perf_counter()
        k = 0
        while not self._stop.is_set():
            if n_triggers is not None and k >= n_triggers:
                break
            deadline = t0 + (k // p.burst) * period
            if duration is not None and k * interval >= duration:
                break
            now = time.perf_counter()
            if now < deadline:
                time.sleep(deadline - now)
                continue
            if now - deadline > period:
                st.slipped += 1
            self._send_trigger(start_seq + k)
            st.triggers += 1
            k += 1
        st.elapsed = time.perf_counter() - t0
        return st

    def start(self, n_triggers: int | None = None, duration: float | None = None) -> "DigitizerEmulator":
        self._thread = threading.Thread(target=self.run, args=(n_triggers, duration),
                                        name="digitizer-emu", daemon=True)
        self._thread.start()
        return self

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def stop(self) -> None:
        self._stop.set()
        self.join(2.0)
        self.sock.close()


def run_digitizer_emulator(port: int, profile: EmuDigitizerProfile, host: str = "127.0.0.1",
                           n_triggers: int | None = None, duration: float | None = None) -> DigitizerEmulator:
    return DigitizerEmulator(profile, (host, port)).start(n_triggers, duration)


def _boost_priority(level: int) -> None:
    try:
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(level))
        return
    except (OSError, AttributeError):
        pass
    try:
        os.nice(-level)
    except OSError:
        log.info("cannot raise digitizer emulator priority; running unboosted")


def digitizer_process_main(profile: EmuDigitizerProfile, target, n_triggers, duration, delay, results,
                           priority_boost: int = 0) -> None:
    """Entry point for running the digitizer in its own process (benchmarks).

    ``priority_boost`` asks for a real-time (else a lower nice) scheduling
    class when permitted, so the stand-in for a hardware trigger source is not
    starved by the host under test; without the privilege it runs normally.
    """
    if priority_boost:
        _boost_priority(priority_boost)
    gc.disable()
    emu = DigitizerEmulator(profile, tuple(target))
    if delay:
        time.sleep(delay)
    st = emu.run(n_triggers, duration)
    results.put(dataclasses.asdict(st))
    emu.sock.close()
