"""``qctrl`` command line: run servers and emulators, benchmarks, and the demo."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from . import bench
from .config import ConfigError, load_config
from .stack import COMPONENTS, PortInUse, Stack, StackConfig, format_demo, run_demo

EXIT_CONFIG = 2
EXIT_PORT = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qctrl", description=__doc__)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="launch servers and/or emulators until SIGTERM")
    run.add_argument("component", choices=COMPONENTS + ("all",))
    run.add_argument("--config", help="key=value file; QCTRL_* environment variables override it")
    run.add_argument("--port", type=int, help="listen port of a single component")
    run.add_argument("--profile", help="digitizer profile file (key=value lines)")
    run.add_argument("--loss", type=float, help="digitizer frame-loss fraction")
    run.add_argument("--reorder", type=float, help="digitizer per-record reorder fraction")
    run.add_argument("--rate-limit", type=float, help="AWG ingress limit in bits/s")
    run.add_argument("--once", action="store_true", help="exit after startup (and the demo, if configured)")

    g = sub.add_parser("bench-gen", help="waveform generation timing")
    g.add_argument("--iterations", type=int, default=200)

    t = sub.add_parser("bench-tx", help="push a payload to N emulated AWGs")
    t.add_argument("--devices", default="1,2,4,8")
    t.add_argument("--bytes", type=int, default=bench.TX_BYTES)
    t.add_argument("--repeats", type=int, default=3)
    t.add_argument("--rate-limit", type=float, default=bench.TX_RATE_LIMIT_BPS,
                   help="per-device ingress limit in bits/s; 0 disables")

    r = sub.add_parser("bench-rx", help="digitizer ingest and real-time acquisition")
    r.add_argument("--profile", choices=tuple(bench.RX_PROFILES) + ("all",), default="all")
    r.add_argument("--duration", type=float, default=bench.RX_DURATION)

    d = sub.add_parser("demo", help="all-in-one stack on ephemeral ports with a readout calibration")
    d.add_argument("--shots", type=int, default=2000)
    return p


def _stack_config(args) -> StackConfig:
    values = load_config(args.config)
    if args.port is not None:
        key = {"manager": "manager_port", "control": "control_port", "readout": "readout_port",
               "awg-emu": "awg_port_base", "digitizer-emu": "stream_port"}.get(args.component)
        if key is None:
            raise ConfigError("--port needs a single component")
        values[key] = str(args.port)
    for flag, key in (("profile", "profile"), ("loss", "loss"), ("reorder", "reorder"), ("rate_limit", "awg_rate_limit")):
        v = getattr(args, flag)
        if v is not None:
            values[key] = str(v)
    return StackConfig.from_mapping(values)


def _wait_for_signal() -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    while not done.wait(0.5):
        pass


def cmd_run(args) -> int:
    cfg = _stack_config(args)
    components = COMPONENTS if args.component == "all" else (args.component,)
    with Stack(cfg) as stack:
        stack.start(components)
        listening = {name: "%s:%d" % srv.address for name, srv in stack.servers.items()}
        listening.update({f"awg{d}": f"{cfg.host}:{e.port}" for d, e in stack.awgs.items()})
        _emit(args, {"event": "started", "components": list(components), "listening": listening})
        if cfg.demo and {"manager", "control", "readout", "digitizer-emu"} <= set(components):
            with stack.client(timeout=120) as c:
                summary = run_demo(c, stack.digitizer.profile, cfg.demo_shots)
            _emit(args, {"event": "demo", **summary}, format_demo(summary))
        if not args.once:
            _wait_for_signal()
        _emit(args, {"event": "stopped"})
    return 0


def cmd_demo(args) -> int:
    cfg = StackConfig(manager_port=0, control_port=0, readout_port=0, awg_port_base=0, stream_port=0,
                      demo=True, demo_shots=args.shots)
    with Stack(cfg).start() as stack, stack.client(timeout=120) as c:
        summary = run_demo(c, stack.digitizer.profile, args.shots)
    _emit(args, {"event": "demo", **summary}, format_demo(summary))
    return 0


def _emit(args, record: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(record, sort_keys=True), flush=True)
    else:
        print(text if text is not None else " ".join(f"{k}={v}" for k, v in record.items()), flush=True)


def cmd_bench(args) -> int:
    try:
        report = _run_bench(args)
    except ValueError as exc:
        print(f"qctrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    bench.write_report(report, args.json)
    return 0


def _run_bench(args) -> bench.BenchReport:
    if args.command == "bench-gen":
        return bench.bench_gen(args.iterations)
    if args.command == "bench-tx":
        ns = tuple(int(x) for x in args.devices.split(","))
        return bench.bench_tx(ns, args.bytes, args.repeats, args.rate_limit or None)
    profiles = tuple(bench.RX_PROFILES) if args.profile == "all" else (args.profile,)
    return bench.bench_rx(profiles, args.duration)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "demo":
            return cmd_demo(args)
        return cmd_bench(args)
    except ConfigError as exc:
        print(f"qctrl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PortInUse as exc:
        print(f"qctrl: {exc.strerror}", file=sys.stderr)
        return EXIT_PORT


if __name__ == "__main__":
    sys.exit(main())
