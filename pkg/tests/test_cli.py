import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from qctrl import cli
from qctrl.config import ConfigError, load_config, parse_key_values
from qctrl.stack import PortInUse, Stack, StackConfig

QCTRL = [sys.executable, "-m", "qctrl.cli"]


def ephemeral_config(tmp_path, extra=""):
    path = tmp_path / "stack.cfg"
    path.write_text("manager_port = 0\ncontrol_port = 0\nreadout_port = 0\nawg_port_base = 0\nstream_port = 0\n" + extra)
    return str(path)


def clean_env():
    return {k: v for k, v in os.environ.items() if not k.startswith("QCTRL_")}


def test_key_value_parsing():
    assert parse_key_values("a = 1\n# c\nb=x y  # tail\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_key_values("a=1\nnonsense\n")
    env = {"QCTRL_CONTROL_PORT": "9999", "OTHER": "1"}
    assert load_config(None, {"control_port": "1"}, env) == {"control_port": "9999"}


def test_stack_config_validation():
    assert StackConfig.from_mapping({"awg_devices": "0,3", "demo": "yes", "awg_rate_limit": "off"}).awg_devices == (0, 3)
    for bad in ({"nope": "1"}, {"manager_port": "70000"}, {"control_port": "x"},
                {"manager_port": "8801", "control_port": "8801"}, {"loss": "2"}):
        with pytest.raises(ConfigError):
            StackConfig.from_mapping(bad)


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["run", "all", "--config", str(tmp_path / "absent.cfg"), "--once"]) == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_bad_key_exits_2(tmp_path, capsys):
    assert cli.main(["run", "control", "--config", ephemeral_config(tmp_path, "colour = red\n"), "--once"]) == 2
    assert "colour" in capsys.readouterr().err


def test_port_collision_names_port(tmp_path, capsys):
    blocker = socket.create_server(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    try:
        rc = cli.main(["run", "control", "--config", ephemeral_config(tmp_path), "--port", str(port), "--once"])
    finally:
        blocker.close()
    assert rc == cli.EXIT_PORT
    assert f"control port {port} already in use" in capsys.readouterr().err


def test_stack_port_in_use_cleans_up():
    blocker = socket.create_server(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    cfg = StackConfig(manager_port=port, control_port=0, readout_port=0, awg_port_base=0, stream_port=0)
    stack = Stack(cfg)
    with pytest.raises(PortInUse) as e:
        stack.start(("awg-emu", "control", "readout", "manager"))
    blocker.close()
    assert e.value.name == "manager" and stack.servers == {} and stack.awgs == {}


def test_run_all_demo_prints_fidelity(tmp_path):
    cfg = ephemeral_config(tmp_path, "demo = 1\ndemo_shots = 400\n")
    out = subprocess.run(QCTRL + ["run", "all", "--config", cfg, "--once"], capture_output=True, text=True,
                         timeout=120, env=clean_env())
    assert out.returncode == 0, out.stderr
    assert "assignment fidelity" in out.stdout
    lines = out.stdout.splitlines()
    assert lines[0].startswith("event=started") and lines[-1] == "event=stopped"


def test_json_demo_subcommand():
    out = subprocess.run(QCTRL + ["--json", "demo", "--shots", "400"], capture_output=True, text=True,
                         timeout=120, env=clean_env())
    assert out.returncode == 0, out.stderr
    summary = json.loads(out.stdout.strip().splitlines()[-1])
    assert summary["event"] == "demo" and summary["shots"] == 400
    assert summary["assignment_fidelity"] > 0.9


def test_sigterm_shutdown_and_env_override(tmp_path):
    env = clean_env()
    probe = socket.create_server(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    env["QCTRL_CONTROL_PORT"] = str(port)
    proc = subprocess.Popen(QCTRL + ["--json", "run", "control", "--config", ephemeral_config(tmp_path)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        started = json.loads(proc.stdout.readline())
        assert started["event"] == "started" and started["listening"]["control"] == f"127.0.0.1:{port}"
        from qctrl.rpc import client_call

        assert client_call(("127.0.0.1", port), "control.ping")["pong"]
        proc.send_signal(signal.SIGTERM)
        rest, err = proc.communicate(timeout=10)
    finally:
        if proc.poll() is None:
            proc.kill()
    assert proc.returncode == 0, err
    assert json.loads(rest.strip())["event"] == "stopped"


def test_bench_gen_json_lines():
    out = subprocess.run(QCTRL + ["--json", "bench-gen", "--iterations", "30"], capture_output=True, text=True,
                         timeout=120, env=clean_env())
    assert out.returncode == 0, out.stderr
    recs = [json.loads(x) for x in out.stdout.splitlines()]
    assert [r["type"] for r in recs] == ["machine"] + ["case"] * 8 + ["summary"]
    assert all(r["iterations"] == 30 for r in recs if r["type"] == "case")


def test_bench_gen_too_few_iterations_exits_2(capsys):
    assert cli.main(["bench-gen", "--iterations", "5"]) == 2
    assert "at least" in capsys.readouterr().err
