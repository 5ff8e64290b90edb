"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import json
import math
import threading
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from qctrl import bench
from qctrl.datalink import Frame, Reassembler, decode_frame, encode_frame, fragment
from qctrl.emulators import DigitizerEmulator, EmuDigitizerProfile
from qctrl.expr import differentiate_expr, parse_expr, sample_expr
from qctrl.link import Op, WireMessage, dc_set_body, decode_message, encode_message
from qctrl.readout import (
    AcquisitionConfig,
    ReadoutServer,
    homodyne,
    two_gaussian_error,
)
from qctrl.rpc import RpcClient, dumps
from qctrl.services import control_service, readout_service
from qctrl.control import VirtualInstrument
from qctrl.stack import Stack, StackConfig
from qctrl.waveform import Waveform, differentiate_numeric, generate, integrate

FS = 1e9


@pytest.fixture
def verdict(capsys):
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


# ---------------------------------------------------------------- 1


def test_c01_generation_timing(verdict):
    r = bench.bench_gen(iterations=200)
    worst = max(r.cases, key=lambda c: c.median_s)
    detail = ", ".join(f"{c.name} {c.median_s * 1e6:.0f}us/{c.extra['budget_us']}us" for c in r.cases)
    verdict(1, "waveform generation median <= 1 ms per kind", len(r.cases) == 8 and worst.median_s <= 1e-3,
            f"worst {worst.name} {worst.median_s * 1e6:.0f} us; measured/reference: {detail}")


# ---------------------------------------------------------------- 2


def test_c02_transmission_scaling(verdict):
    r = bench.bench_tx()
    ratios = {n: r.summary[f"ratio_T{n}_T1"] for n in (2, 4, 8)}
    detail = f"T1 {r.case('N=1').median_s:.3f} s, " + ", ".join(f"T{n}/T1 {v:.3f}" for n, v in ratios.items())
    verdict(2, "T(N) <= 1.5 T(1) for N in 2,4,8 with 25.6 MB per device",
            all(v <= 1.5 for v in ratios.values()), detail + f", plain-stream ratio {r.summary['baseline_ratio']:.3f}")


# ---------------------------------------------------------------- 3 and 4


def _cpu_ticks():
    """(steal, total) jiffies from /proc/stat, or None off Linux."""
    try:
        with open("/proc/stat") as f:
            v = [int(x) for x in f.readline().split()[1:]]
    except OSError:
        return None
    return (v[7] if len(v) > 7 else 0), sum(v)


def _steal_since(t0) -> str:
    t1 = _cpu_ticks()
    if t0 is None or t1 is None or t1[1] == t0[1]:
        return "host steal n/a"
    return f"host steal {100 * (t1[0] - t0[0]) / (t1[1] - t0[1]):.1f}% of cpu time"


def test_c03_ingest_throughput(verdict):
    prof = EmuDigitizerProfile(**bench.RX_PROFILES["throughput"])
    t0 = _cpu_ticks()
    r = bench.run_ingest(prof, duration=10.0, consume=False)
    clean = (r.records_incomplete == r.records_corrupt == r.bad_frames == r.duplicates == 0
             and r.frames_received == r.frames_sent and r.records_complete == r.triggers_sent)
    verdict(3, "ingest + reassembly >= 400 Mbps for 10 s, no errors", r.ingest_mbps >= 400 and r.active_seconds >= 9.5 and clean,
            f"{r.ingest_mbps:.0f} Mbps over {r.active_seconds:.2f} s, {r.frames_received}/{r.frames_sent} frames, "
            f"incomplete {r.records_incomplete}, corrupt {r.records_corrupt}, bad {r.bad_frames}, {_steal_since(t0)}")


def test_c04_realtime_acquisition(verdict):
    prof = EmuDigitizerProfile(**bench.RX_PROFILES["realtime"])
    t0 = _cpu_ticks()
    r = bench.run_ingest(prof, duration=10.0, consume=True)
    ok = r.max_queue_depth <= 16 and r.slip_fraction < 0.01 and r.records_complete == r.triggers_sent
    verdict(4, "10k-sample records every 500 us: queue depth <= 16, slip < 1%", ok,
            f"max depth {r.max_queue_depth}, slip {100 * r.slip_fraction:.2f}%, "
            f"{r.records_complete}/{r.triggers_sent} records demodulated at {r.sender_mbps:.0f} Mbps, "
            f"{_steal_since(t0)}")


# ---------------------------------------------------------------- 5


def _direct(x, f):
    n = len(x)
    i = math.fsum(x[k] * math.cos(2 * math.pi * f * k / FS) for k in range(n))
    q = math.fsum(x[k] * math.sin(2 * math.pi * f * k / FS) for k in range(n))
    return 2 * i / n, 2 * q / n


def test_c05_homodyne(verdict):
    x = 0.8 * np.cos(2 * np.pi * 50e6 * np.arange(1000) / FS + math.pi / 3)
    p = homodyne(Waveform(x, FS), 50e6)
    oi, oq = _direct(x, 50e6)
    ref_err = max(abs(p.i - oi), abs(p.q - oq), abs(p.i - 0.4), abs(p.q + 0.6928203230275509))

    rng = np.random.default_rng(2024)
    lin_worst = eq_worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(16, 2049))
        f = int(rng.integers(1, n // 2)) * FS / n
        a = rng.uniform(-2, 2)
        w1, w2 = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        lhs = homodyne(Waveform(a * w1 + w2, FS), f)
        h1, h2 = homodyne(Waveform(w1, FS), f), homodyne(Waveform(w2, FS), f)
        scale = abs(a) * 2 * np.abs(w1).mean() + 2 * np.abs(w2).mean()
        lin_worst = max(lin_worst, abs(lhs.i - a * h1.i - h2.i) / scale, abs(lhs.q - a * h1.q - h2.q) / scale)

        amp, phi, delta = rng.uniform(0.01, 1), rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi, math.pi)
        t = np.arange(n)
        p0 = homodyne(Waveform(amp * np.cos(2 * np.pi * f * t / FS + phi), FS), f)
        p1 = homodyne(Waveform(amp * np.cos(2 * np.pi * f * t / FS + phi + delta), FS), f)
        c, s = math.cos(delta), math.sin(delta)
        eq_worst = max(eq_worst, abs(p1.i - (c * p0.i + s * p0.q)), abs(-p1.q - (s * p0.i - c * p0.q)))
    ok = ref_err < 1e-9 and lin_worst <= 1e-12 and eq_worst < 1e-9
    verdict(5, "homodyne reference point, linearity, phase equivariance", ok,
            f"reference err {ref_err:.1e}, linearity {lin_worst:.1e} rel over 1000, equivariance {eq_worst:.1e} over 1000")


# ---------------------------------------------------------------- 6


def _flattop_oracle(t, a, t1, t2, sigma, h=0.05e-9):
    """Gaussian (unit area) convolved with a rect on [t1, t2], by midpoint summation on a fine grid."""
    s = t1 + (np.arange(int(round((t2 - t1) / h))) + 0.5) * h
    out = np.empty_like(t)
    norm = h / (sigma * math.sqrt(2 * math.pi))
    reach = 12 * sigma
    for k, tk in enumerate(t):
        lo, hi = np.searchsorted(s, tk - reach), np.searchsorted(s, tk + reach)
        d = (tk - s[lo:hi]) / sigma
        out[k] = a * norm * np.exp(-0.5 * d * d).sum()
    return out


def test_c06_flattop_identity(verdict):
    a, t1, t2, sigma = 0.9, 1.0e-6, 4.5e-6, 8e-8
    w = generate("flattop", {"a": a, "t1": t1, "t2": t2, "sigma": sigma})
    t = np.arange(6000) / FS
    oracle = _flattop_oracle(t, a, t1, t2, sigma)
    err = float(np.max(np.abs(w.samples - oracle)))
    verdict(6, "flattop equals Gaussian-rect convolution within 1e-6", len(w) == 6000 and err < 1e-6,
            f"max abs diff {err:.2e} over 6000 samples")


# ---------------------------------------------------------------- 7


def test_c07_calculus(verdict):
    rng = np.random.default_rng(7)
    inv_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6001))
        fs = float(rng.choice([1e9, 2.5e8, 1e6]))
        x = rng.normal(0, rng.uniform(1e-3, 10), n)
        back = differentiate_numeric(integrate(Waveform(x, fs))).samples
        if n > 1:
            inv_worst = max(inv_worst, float(np.max(np.abs(back[1:] - x[1:])) / np.max(np.abs(x))))

    def central_err(text, exclude=()):
        e = parse_expr(text)
        y = sample_expr(e).samples
        d = sample_expr(differentiate_expr(e)).samples / FS
        ref = (y[2:] - y[:-2]) / 2
        diff = np.abs(d[1:-1] - ref)
        for lo, hi in exclude:
            diff[lo - 1:hi - 1] = 0
        return float(diff.max())

    sym = {
        "dc": central_err("dc(a=0.7)"),
        "sine": central_err("sine(a=1, f=1e7, phi=0.4)"),
        "gauss": central_err("gauss(a=1, mu=3e-6, sigma=5e-7)"),
        "slope": central_err("slope(a=1, t0=1e-6, T=2e-6)", exclude=[(997, 1004), (2997, 3004)]),
        "product": central_err("gauss(mu=3e-6, sigma=5e-7) * sine(f=1e7)"),
    }
    ok = inv_worst <= 1e-9 and max(sym.values()) < 1e-4
    verdict(7, "differentiate_numeric(integrate(w)) = w; symbolic vs central differences", ok,
            f"inverse {inv_worst:.1e} rel over 100; symbolic " + ", ".join(f"{k} {v:.1e}" for k, v in sym.items()))


# ---------------------------------------------------------------- 8


def test_c08_reassembly(verdict):
    rng = np.random.default_rng(8)
    perm_ok = dup_ok = loss_ok = True
    for trial in range(10_000):
        n = int(rng.integers(1, 400))
        data = rng.integers(-2048, 2048, n).astype(np.int16)
        frames = fragment(data, int(rng.integers(4)), int(rng.integers(2)), trial, max_samples=int(rng.integers(8, 129)))
        order = rng.permutation(len(frames))
        kind = trial % 3
        r = Reassembler()
        if kind == 0:
            out = [x for i in order if (x := r.ingest(frames[i])) is not None]
            perm_ok &= len(out) == 1 and out[0].samples.tobytes() == data.tobytes()
        elif kind == 1:
            stream = list(order) + list(rng.choice(len(frames), int(rng.integers(1, 4))))
            rng.shuffle(stream)
            out = [x for i in stream if (x := r.ingest(frames[i])) is not None]
            dup_ok &= len(out) == 1 and out[0].samples.tobytes() == data.tobytes()
        else:
            if len(frames) < 2:
                continue
            lost = int(rng.integers(len(frames)))
            out = [x for i in order if i != lost and (x := r.ingest(frames[i])) is not None]
            flushed = r.flush(0)
            loss_ok &= not out and len(flushed) == 1 and flushed[0].missing == [lost] and not flushed[0].complete
    verdict(8, "reassembly permutation invariance, duplicate idempotence, loss detection",
            perm_ok and dup_ok and loss_ok, "10000 shuffled frame streams")


# ---------------------------------------------------------------- 9


def test_c09_discrimination(verdict):
    shots = 10_000
    prof = EmuDigitizerProfile(record_length=1000, carrier_freq=50e6, amplitude=0.0127, noise_sigma=0.1,
                               phase_zero=0.0, phase_one=math.pi / 2, trigger_interval=300e-6,
                               schedule=(0, 1), seed=99)
    server = ReadoutServer(AcquisitionConfig(record_length=1000, demod_freq=50e6, stream_port=0))
    rx = server.ensure_receiver()
    server.cfg.stream_port = rx.address[1]
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("res", server.acquire(2 * shots, "iq", timeout=300)))
    t.start()
    while not rx.accepting.is_set():
        time.sleep(0.01)
    proc, results = bench._start_digitizer(prof, rx.address, 2 * shots + 400, None, delay=0.1)
    t.join()
    proc.terminate()
    server.close()
    res = box["res"]
    pts = np.array([tuple(p) for p in res.points])
    truth = np.array([prof.state_for(s) for s in res.seq])
    p0, p1 = pts[truth == 0][:shots], pts[truth == 1][:shots]
    d = server.train(p0, p1)
    labels = d.classify_many(np.vstack([p0, p1]))
    c0, c1 = p0.mean(axis=0), p1.mean(axis=0)
    allp = np.vstack([p0, p1])
    oracle = (((allp - c1) ** 2).sum(axis=1) < ((allp - c0) ** 2).sum(axis=1)).astype(np.int8)
    empirical = float(np.mean(labels != np.r_[np.zeros(len(p0)), np.ones(len(p1))]))
    dist = float(np.linalg.norm(c1 - c0))
    sig = float(np.sqrt(np.mean([p0[:, 0].var(ddof=1), p0[:, 1].var(ddof=1), p1[:, 0].var(ddof=1), p1[:, 1].var(ddof=1)])))
    analytic = two_gaussian_error(dist, sig)
    ok = (len(p0) == len(p1) == shots and analytic / 2 <= empirical <= 2 * analytic
          and np.array_equal(labels, oracle))
    verdict(9, "IQ discrimination error within 2x of two-Gaussian model; labels = nearest centroid", ok,
            f"empirical {empirical:.4f}, analytic {analytic:.4f} (d {dist:.4f}, sigma {sig:.5f}), "
            f"{int(np.sum(labels != oracle))} label mismatches over {2 * shots} shots")


# ---------------------------------------------------------------- 10


def test_c10_golden_bytes(verdict):
    golden_wire = encode_message(WireMessage(Op.DC_SET, 7, dc_set_body(1, 1_250_000)))
    wire_ok = golden_wire == bytes.fromhex("0d000000" "1000" "0700" "01" "d012130000000000")
    golden_frame = encode_frame(Frame(0, 0, 0, 0, 1, np.array([-2048], dtype=np.int16)))
    frame_ok = golden_frame == bytes.fromhex("5144" "01" "00" "0000" "00000000" "0000" "0100" "0100" "00f8")
    rng = np.random.default_rng(10)
    rt_ok = True
    for _ in range(1000):
        m = WireMessage(int(rng.integers(65536)), int(rng.integers(65536)), rng.bytes(int(rng.integers(0, 300))))
        rt_ok &= decode_message(encode_message(m)) == m
        count = int(rng.integers(1, 65536))
        f = Frame(int(rng.integers(256)), int(rng.integers(65536)), int(rng.integers(2**32)), int(rng.integers(count)),
                  count, rng.integers(-2048, 2048, int(rng.integers(0, 729))).astype(np.int16))
        rt_ok &= decode_frame(encode_frame(f)) == f
    verdict(10, "wire/frame golden vectors and 1000 random round trips", wire_ok and frame_ok and rt_ok,
            f"DC_SET golden {'ok' if wire_ok else 'MISMATCH'}, frame golden {'ok' if frame_ok else 'MISMATCH'}, "
            f"round trips {'ok' if rt_ok else 'FAILED'}")


# ---------------------------------------------------------------- 11

ACQ_PROFILE = dict(carrier_freq=50e6, amplitude=0.3, noise_sigma=0.05, trigger_interval=1e-3, schedule=(0, 1), seed=4)


def _fresh_stack():
    cfg = StackConfig(manager_port=0, control_port=0, readout_port=0, awg_port_base=0, stream_port=0)
    return Stack(cfg).start(("awg-emu", "control", "readout", "manager"))


def _acquire_line(client, stack, line, n, record_length):
    """Send an acquire request, then stream exactly ``n`` fresh triggers.

    Sequence numbers continue across calls on one stack; the reassembler
    drops keys it has already completed.
    """
    box = {}
    start = getattr(stack, "_next_seq", 0)
    stack._next_seq = start + n
    rx = stack.readout.receiver
    rx.accepting.clear()
    t = threading.Thread(target=lambda: box.setdefault("reply", client.call_raw(line)))
    t.start()
    while not rx.accepting.is_set():
        time.sleep(0.005)
    emu = DigitizerEmulator(EmuDigitizerProfile(record_length=record_length, **ACQ_PROFILE), rx.address)
    emu.run(n_triggers=n, start_seq=start)
    emu.sock.close()
    t.join(30)
    return box["reply"]


def _script(tmp):
    disc = str(tmp / "disc.txt")
    req = lambda rid, target, method, params=None: (rid, target, method, params or {})
    return [
        req(1, "control", "ping"),
        req(2, "control", "load_bindings", {"text": "XY 0 0 waveform 3\nZ 1 0 waveform 7\nF 1 0 dc 0\n"}),
        req(3, "control", "bind_channel", {"name": "T", "device": 0, "channel": 1, "kind": "trigger"}),
        req(4, "control", "bind_channel", {"name": "T", "device": 0, "channel": 2}),
        req(5, "control", "align_timing"),
        req(6, "control", "configure_channel", {"name": "Z", "fir": [0.25, 0.25, 0.25, 0.25], "offset": 0.01}),
        req(7, "control", "define_wave", {"slot": 3, "expr": "gauss(mu=3e-6,sigma=5e-7)"}),
        req(8, "control", "write_wave", {"channel": "XY", "slot": 3}),
        req(9, "control", "play_all"),
        req(10, "control", "write_wave", {"channel": "Z", "expr": "flattop(a=A, t1=1e-6, t2=4e-6, sigma=5e-8)",
                                          "bindings": {"A": 0.5}}),
        req(11, "control", "set_dc", {"channel": "F", "volts": 1.25}),
        req(12, "control", "set_dc", {"channel": "F", "volts": 12}),
        req(13, "control", "play_all", {"trigger_mode": 1}),
        req(14, "control", "list_channels"),
        req(15, "control", "write_wave", {"channel": "F", "slot": 3}),
        req(16, "control", "nonexistent"),
        req(17, "readout", "ping"),
        req(18, "readout", "configure", {"record_length": 2000, "demod_freq": 5e7}),
        req(19, "readout", "acquire", {"n": "ten"}),
        req(20, "readout", "acquire", {"n": 3, "mode": "state"}),
        ("acq", 21, {"n": 60, "mode": "iq"}),
        req(22, "readout", "train", {"points0": [[0.3, 0.0], [0.29, 0.01]], "points1": [[0.0, -0.3], [0.01, -0.31]]}),
        ("acq", 23, {"n": 60, "mode": "state"}),
        ("acq", 24, {"n": 2, "mode": "raw"}),
        req(25, "readout", "classify", {"points": [[0.3, 0.0], [0.0, -0.3]]}),
        req(26, "readout", "save_discriminator", {"path": disc}),
        req(27, "readout", "load_discriminator", {"path": disc}),
    ]


def _run_script(script, stack, client, target_client):
    replies = {}
    for item in script:
        if item[0] == "acq":
            _, rid, params = item
            line = dumps({"id": rid, "target": "readout", "method": "acquire", "params": {**params, "timeout": 20}})
            replies[rid] = _acquire_line(target_client("readout"), stack, line, params["n"], 2000)
            continue
        rid, target, method, params = item
        line = dumps({"id": rid, "target": target, "method": method, "params": params})
        replies[rid] = target_client(target).call_raw(line)
    return replies


def test_c11_manager_transparency_and_economy(verdict, tmp_path):
    script = _script(tmp_path)
    with _fresh_stack() as a, _fresh_stack() as b:
        with RpcClient(a.address("manager"), 60) as via, RpcClient(b.address("control"), 60) as ctl, \
                RpcClient(b.address("readout"), 60) as ro:
            via_manager = _run_script(script, a, via, lambda target: via)
            direct = _run_script(script, b, None, lambda target: ctl if target == "control" else ro)
        covered = {(i[1], i[2]) for i in script if i[0] != "acq"} | {("readout", "acquire")}
        schema = {("control", m) for m in control_service(VirtualInstrument()).methods}
        schema |= {("readout", m) for m in readout_service(ReadoutServer()).methods}
        mismatched = sorted(rid for rid in direct if direct[rid] != via_manager[rid])
        errors = sum("error" in json.loads(v) for v in direct.values())
        acq_ok = all("result" in json.loads(direct[i[1]]) for i in script if i[0] == "acq")

        sizes = {}
        with RpcClient(a.address("manager"), 60) as c:
            for length in (1000, 10_000):
                c.call("readout.configure", {"record_length": length})
                for mode in ("iq", "state"):
                    for n in (50, 100):
                        line = dumps({"id": 0, "target": "readout", "method": "acquire",
                                      "params": {"n": n, "mode": mode, "timeout": 20}})
                        sizes[(length, mode, n)] = len(_acquire_line(c, a, line, n, length))
    flat = all(abs(sizes[(10_000, m, n)] - sizes[(1000, m, n)]) <= 0.05 * sizes[(1000, m, n)]
               for m in ("iq", "state") for n in (50, 100))
    linear = all(1.7 <= sizes[(L, m, 100)] / sizes[(L, m, 50)] <= 2.3 for L in (1000, 10_000) for m in ("iq", "state"))
    ok = not mismatched and acq_ok and schema <= covered and flat and linear
    verdict(11, "manager responses byte-identical to direct; iq/state reply size O(n), record-length free", ok,
            f"{len(direct)} requests ({errors} error replies), {len(schema)} schema methods covered, "
            f"mismatches {mismatched or 'none'}; iq bytes n=100: {sizes[(1000, 'iq', 100)]} @1k vs "
            f"{sizes[(10_000, 'iq', 100)]} @10k samples; state {sizes[(1000, 'state', 100)]} vs {sizes[(10_000, 'state', 100)]}")
