"""Benchmarks: waveform generation, multi-AWG transmission, digitizer ingest."""

from __future__ import annotations

import gc
import json
import math
import multiprocessing as mp
import os
import platform
import queue
import socket
import statistics
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import link
from .datalink import DigitizerReceiver
from .emulators import EmuDigitizerProfile, awg_process_main, digitizer_process_main, parse_stats
from .link import InstrumentLink, Op, TaskStatus, WireMessage
from .readout import homodyne, preprocess
from .waveform import DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE, WaveKind, generate

# Reference per-kind generation times (microseconds, 6000 points)
GEN_BUDGETS_US = {
    "DC": 30, "Sine": 48, "Rectangle": 33, "Gaussian": 66,
    "IsoscelesTrapezoid": 46, "Triangle": 47, "Slope": 32, "Flattop": 79,
}

GEN_CASES: dict[str, tuple[WaveKind, dict[str, float]]] = {
    "DC": (WaveKind.DC, {"a": 0.5}),
    "Sine": (WaveKind.SINE, {"a": 0.5, "f": 1e7, "phi": 0.3}),
    "Rectangle": (WaveKind.RECTANGLE, {"a": 0.5, "t1": 1e-6, "t2": 5e-6}),
    "Gaussian": (WaveKind.GAUSSIAN, {"a": 0.5, "mu": 3e-6, "sigma": 5e-7}),
    "IsoscelesTrapezoid": (WaveKind.TRAPEZOID, {"a": 0.5, "t1": 1e-6, "t2": 5e-6, "r": 5e-7}),
    "Triangle": (WaveKind.TRIANGLE, {"a": 0.5, "t1": 1e-6, "t2": 5e-6}),
    "Slope": (WaveKind.SLOPE, {"a": 0.5, "t0": 1e-6, "T": 4e-6}),
    "Flattop": (WaveKind.FLATTOP, {"a": 0.5, "t1": 1e-6, "t2": 5e-6, "sigma": 1e-7}),
}

TX_BYTES = 25_600_000
TX_CHUNK_SAMPLES = 512_000
TX_RATE_LIMIT_BPS = 200e6
RX_DURATION = 10.0
MIN_TIMING_ITERATIONS = 30


# ---------------------------------------------------------------- report


def machine_descriptor() -> dict:
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        mem = 0
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpus": os.cpu_count(),
        "memory_gb": round(mem / 2**30, 1),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class BenchCase:
    name: str
    samples: int
    iterations: int
    median_s: float
    p95_s: float
    throughput: float = 0.0
    unit: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_times(cls, name: str, samples: int, times: list[float], **kw) -> "BenchCase":
        arr = np.asarray(times, dtype=np.float64)
        return cls(name, samples, arr.size, float(np.median(arr)), float(np.percentile(arr, 95)), **kw)


@dataclass
class BenchReport:
    bench: str
    cases: list[BenchCase] = field(default_factory=list)
    machine: dict = field(default_factory=machine_descriptor)
    summary: dict = field(default_factory=dict)

    def case(self, name: str) -> BenchCase:
        for c in self.cases:
            if c.name == name:
                return c
        raise KeyError(name)

    def json_lines(self) -> list[str]:
        head = {"bench": self.bench, "type": "machine", **self.machine}
        lines = [json.dumps(head, sort_keys=True)]
        for c in self.cases:
            lines.append(json.dumps({"bench": self.bench, "type": "case", **asdict(c)}, sort_keys=True))
        lines.append(json.dumps({"bench": self.bench, "type": "summary", **self.summary}, sort_keys=True))
        return lines

    def table(self) -> str:
        m = self.machine
        out = [f"{self.bench}  [{m['platform']}, {m['cpus']} cpu, {m['memory_gb']} GB, python {m['python']}]"]
        extra_keys = sorted({k for c in self.cases for k in c.extra})
        cols = ["case", "samples", "iters", "median", "p95", "throughput"] + extra_keys
        rows = []
        for c in self.cases:
            tp = f"{c.throughput:.1f} {c.unit}" if c.unit else ""
            rows.append([c.name, str(c.samples), str(c.iterations), _fmt_time(c.median_s),
                         _fmt_time(c.p95_s), tp] + [_fmt(c.extra.get(k, "")) for k in extra_keys])
        widths = [max(len(str(x)) for x in col) for col in zip(cols, *rows)]
        out.append("  ".join(h.ljust(w) for h, w in zip(cols, widths)))
        for r in rows:
            out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        for k, v in self.summary.items():
            out.append(f"{k}: {_fmt(v)}")
        return "\n".join(out)


def _fmt_time(s: float) -> str:
    if s < 1e-3:
        return f"{s * 1e6:.1f} us"
    if s < 1:
        return f"{s * 1e3:.2f} ms"
    return f"{s:.3f} s"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# ---------------------------------------------------------------- generation


def bench_gen(iterations: int = 200, length: int = DEFAULT_LENGTH, sample_rate: float = DEFAULT_SAMPLE_RATE,
              warmup: int = 5) -> BenchReport:
    if iterations < MIN_TIMING_ITERATIONS:
        raise ValueError(f"timing cases need at least {MIN_TIMING_ITERATIONS} iterations")
    report = BenchReport("gen")
    clock = time.perf_counter
    for name, (kind, params) in GEN_CASES.items():
        for _ in range(warmup):
            generate(kind, params, length, sample_rate)
        times = []
        for _ in range(iterations):
            t = clock()
            generate(kind, params, length, sample_rate)
            times.append(clock() - t)
        c = BenchCase.from_times(name, length, times, unit="Msample/s")
        c.throughput = length / c.median_s / 1e6
        c.extra["budget_us"] = GEN_BUDGETS_US[name]
        report.cases.append(c)
    medians = {c.name: c.median_s for c in report.cases}
    report.summary = {
        "max_median_us": max(medians.values()) * 1e6,
        "slowest": max(medians, key=medians.get),
        "flattop_vs_slowest": medians["Flattop"] / max(medians.values()),
    }
    return report


# ---------------------------------------------------------------- transmission


class AwgFleet:
    """Emulated AWGs, each in its own process so devices do not share an interpreter."""

    def __init__(self, n: int, rate_limit_bps: float | None = TX_RATE_LIMIT_BPS):
        ctx = mp.get_context("spawn")
        self._stop = ctx.Event()
        ready = ctx.Queue()
        self.procs = [ctx.Process(target=awg_process_main, args=(0, rate_limit_bps, ready, self._stop), daemon=True)
                      for _ in range(n)]
        for p in self.procs:
            p.start()
        self.ports = [ready.get(timeout=60) for _ in self.procs]

    def addresses(self) -> list[tuple[str, int]]:
        return [("127.0.0.1", p) for p in self.ports]

    def close(self) -> None:
        self._stop.set()
        for p in self.procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tx_payload(total_bytes: int = TX_BYTES, chunk_samples: int = TX_CHUNK_SAMPLES) -> list[bytes]:
    """UPLOAD_WAVE bodies whose sample bytes add up to ``total_bytes``."""
    n_samples = total_bytes // 2
    rng = np.random.default_rng(1234)
    codes = rng.integers(-32768, 32768, size=n_samples, dtype=np.int16)
    return [link.upload_wave_body(k, codes[i:i + chunk_samples])
            for k, i in enumerate(range(0, n_samples, chunk_samples))]


def device_stats(address: tuple[str, int]) -> tuple[int, int]:
    with socket.create_connection(address, timeout=10) as s:
        link.send_message(s, WireMessage(Op.STATS, 0, b""))
        reply = link.read_message(s)
    return parse_stats(reply.payload)


def push_link(addresses: list[tuple[str, int]], bodies: list[bytes], timeout: float = 300.0) -> float:
    """Seconds to deliver every body to every device through :class:`InstrumentLink`."""
    with InstrumentLink(io_timeout=timeout) as lk:
        for dev, addr in enumerate(addresses):
            lk.add_device(dev, addr)
            lk.call(dev, Op.PING, timeout=10)
        t = time.perf_counter()
        tickets = [lk.submit(dev, Op.UPLOAD_WAVE, b) for b in bodies for dev in range(len(addresses))]
        results = lk.drain(tickets, timeout)
        elapsed = time.perf_counter() - t
    bad = [r for r in results if r.status is not TaskStatus.OK]
    if bad:
        raise RuntimeError(f"{len(bad)} uploads failed: {bad[0].error}")
    return elapsed


def push_plain(address: tuple[str, int], bodies: list[bytes]) -> float:
    """Same transfer over one bare socket, no worker threads."""
    with socket.create_connection(address, timeout=300) as s:
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        link.send_message(s, WireMessage(Op.PING, 0, b""))
        link.read_message(s)
        t = time.perf_counter()
        for rid, b in enumerate(bodies, 1):
            link.send_message(s, WireMessage(Op.UPLOAD_WAVE, rid & 0xFFFF, b))
            reply = link.read_message(s)
            if reply is None or reply.status != 0:
                raise RuntimeError("plain push rejected")
        return time.perf_counter() - t


def bench_tx(ns=(1, 2, 4, 8), total_bytes: int = TX_BYTES, repeats: int = 3,
             rate_limit_bps: float | None = TX_RATE_LIMIT_BPS) -> BenchReport:
    bodies = tx_payload(total_bytes)
    payload_bytes = sum(len(b) for b in bodies)
    wire_bytes = sum(len(b) + 8 for b in bodies)
    report = BenchReport("tx")
    with AwgFleet(max(ns), rate_limit_bps) as fleet:
        addrs = fleet.addresses()
        for n in ns:
            times = []
            for _ in range(repeats):
                before = [device_stats(a)[0] for a in addrs[:n]]
                times.append(push_link(addrs[:n], bodies))
                after = [device_stats(a)[0] for a in addrs[:n]]
                # the delta also holds the warm-up PING and the second STATS request, 8 bytes each
                got = [a - b - 16 for a, b in zip(after, before)]
                if any(g != wire_bytes for g in got):
                    raise RuntimeError(f"byte count mismatch: sent {wire_bytes}, devices saw {got}")
            c = BenchCase.from_times(f"N={n}", total_bytes // 2, times, unit="MB/s/device")
            c.throughput = payload_bytes / c.median_s / 1e6
            c.extra.update(devices=n, bytes_per_device=wire_bytes)
            report.cases.append(c)
        plain = [push_plain(addrs[0], bodies) for _ in range(repeats)]
    t1 = report.case(f"N={ns[0]}").median_s
    report.summary = {
        "rate_limit_mbps": (rate_limit_bps or 0) / 1e6,
        "plain_single_stream_s": statistics.median(plain),
        "baseline_ratio": t1 / statistics.median(plain),
    }
    for n in ns[1:]:
        report.summary[f"ratio_T{n}_T1"] = report.case(f"N={n}").median_s / t1
    return report


# ---------------------------------------------------------------- ingest

RX_PROFILES = {
    # single-frame records; 40k triggers/s of 1472-byte datagrams is about 471 Mbps,
    # paced in 1 ms bursts so the sender's wake-ups do not starve the receiver
    "throughput": dict(record_length=728, trigger_interval=1 / 40_000, trace_bank=64, noise_sigma=0.05, burst=40),
    # 14-frame records every 500 us: 320 Mbps of payload
    "realtime": dict(record_length=10_000, trigger_interval=500e-6, trace_bank=64, noise_sigma=0.05),
    "loss": dict(record_length=10_000, trigger_interval=1e-3, trace_bank=16, noise_sigma=0.05, loss=0.01),
}


@dataclass
class IngestResult:
    triggers_sent: int
    frames_sent: int
    frames_dropped: int
    slip_fraction: float
    sender_mbps: float
    frames_received: int
    bytes_received: int
    ingest_mbps: float
    active_seconds: float
    records_complete: int
    records_incomplete: int
    records_corrupt: int
    duplicates: int
    bad_frames: int
    max_queue_depth: int
    processed: int


def _start_digitizer(profile: EmuDigitizerProfile, target, n_triggers, duration, delay=0.3, priority_boost=10):
    ctx = mp.get_context("spawn")
    results = ctx.Queue()
    proc = ctx.Process(target=digitizer_process_main,
                       args=(profile, target, n_triggers, duration, delay, results, priority_boost), daemon=True)
    proc.start()
    return proc, results


def run_ingest(profile: EmuDigitizerProfile, duration: float | None = None, n_triggers: int | None = None,
               consume: bool = True, demod_freq: float | None = None, port: int = 0,
               settle: float = 0.3) -> IngestResult:
    """Stream ``profile`` at a local receiver and report what arrived.

    With ``consume`` a worker thread pops completed records and demodulates
    them, so the queue depth reflects a live acquisition.
    """
    old_switch = sys.getswitchinterval()
    sys.setswitchinterval(2e-4)
    # a full collection pauses the receive loop for 10-25 ms, longer than the queue bound allows
    gc.collect()
    gc_was_enabled = gc.isenabled()
    gc.disable()
    rx = DigitizerReceiver("127.0.0.1", port)
    if not consume:
        rx.accepting.clear()
    rx.start()
    processed = 0
    stop = threading.Event()
    freq = demod_freq or profile.carrier_freq

    def consumer():
        nonlocal processed
        while not stop.is_set() or not rx.records.empty():
            try:
                rec = rx.records.get(timeout=0.05)
            except queue.Empty:
                continue
            if rec.complete:
                homodyne(preprocess(rec, None, profile.sample_rate), freq)
            processed += 1

    worker = threading.Thread(target=consumer, daemon=True) if consume else None
    if worker:
        worker.start()
    try:
        proc, results = _start_digitizer(profile, rx.address, n_triggers, duration)
        emu = results.get(timeout=(duration or 0) + (n_triggers or 0) * profile.trigger_interval * 4 + 120)
        proc.join(timeout=10)
        time.sleep(settle + 2 * rx.stale_after)
    finally:
        stop.set()
        if worker:
            worker.join(timeout=5)
        rx.stop()
        sys.setswitchinterval(old_switch)
        if gc_was_enabled:
            gc.enable()
    st = rx.reassembler.stats
    return IngestResult(
        triggers_sent=emu["triggers"], frames_sent=emu["frames"], frames_dropped=emu["dropped_frames"],
        slip_fraction=emu["slipped"] / max(emu["triggers"], 1),
        sender_mbps=emu["bytes"] * 8 / max(emu["elapsed"], 1e-9) / 1e6,
        frames_received=st.frames, bytes_received=st.bytes,
        ingest_mbps=st.bytes * 8 / rx.stats.active_seconds / 1e6, active_seconds=rx.stats.active_seconds,
        records_complete=st.records_complete, records_incomplete=st.records_incomplete,
        records_corrupt=st.records_corrupt, duplicates=st.duplicates, bad_frames=st.bad_frames,
        max_queue_depth=rx.stats.max_queue_depth, processed=processed,
    )


def expected_loss_fraction(frame_loss: float, frames_per_record: int) -> float:
    return 1.0 - (1.0 - frame_loss) ** frames_per_record


def bench_rx(profiles=("throughput", "realtime", "loss"), duration: float = RX_DURATION,
             loss_triggers: int = 3000) -> BenchReport:
    report = BenchReport("rx")
    for name in profiles:
        prof = EmuDigitizerProfile(**RX_PROFILES[name])
        if name == "loss":
            r = run_ingest(prof, n_triggers=loss_triggers, consume=True)
        else:
            r = run_ingest(prof, duration=duration, consume=(name == "realtime"))
        case = BenchCase(name, prof.record_length, r.triggers_sent, r.active_seconds, r.active_seconds,
                         r.ingest_mbps, "Mbps", extra={
                             "frames": r.frames_received, "complete": r.records_complete,
                             "incomplete": r.records_incomplete, "corrupt": r.records_corrupt,
                             "max_depth": r.max_queue_depth, "slip": r.slip_fraction,
                         })
        if name == "loss":
            p = expected_loss_fraction(prof.loss, prof.frames_per_record)
            n = r.triggers_sent
            sigma = math.sqrt(n * p * (1 - p))
            case.extra.update(expected_incomplete=n * p, sigma=sigma,
                              within_3sigma=abs(r.records_incomplete - n * p) <= 3 * sigma)
        report.cases.append(case)
    return report


def write_report(report: BenchReport, as_json: bool, out=None) -> None:
    out = out or sys.stdout
    if as_json:
        for line in report.json_lines():
            print(line, file=out)
    else:
        print(report.table(), file=out)


__all__ = [
    "BenchCase", "BenchReport", "GEN_BUDGETS_US", "GEN_CASES", "IngestResult", "RX_PROFILES",
    "bench_gen", "bench_rx", "bench_tx", "expected_loss_fraction", "machine_descriptor",
    "push_link", "push_plain", "run_ingest", "tx_payload", "write_report",
]
