"""Newline-delimited JSON RPC: envelopes, schema checks, servers, client, Manager.

Request:  ``{"id": ..., "target": "control", "method": "ping", "params": {...}}``
Response: ``{"id": ..., "result": ...}`` or ``{"id": ..., "error": {"code", "message"}}``

Every response is serialized with sorted keys and compact separators, so a
response relayed verbatim by the Manager is byte-identical to a direct one.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Any, Callable

log = logging.getLogger(__name__)

TARGETS = ("control", "readout", "manager")
DEFAULT_PORTS = {"manager": 8800, "control": 8801, "readout": 8802}
MAX_LINE = 64 << 20


class RpcError(Exception):
    def __init__(self, code: str, message: str, data: Any = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.data = data

    def to_dict(self) -> dict:
        err = {"code": self.code, "message": self.message}
        if self.data is not None:
            err["data"] = self.data
        return err


class RpcTransportError(RpcError):
    def __init__(self, message: str):
        super().__init__("transport-error", message)


class RpcTimeout(RpcError):
    def __init__(self, message: str):
        super().__init__("timeout", message)


def dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()


def error_response(rid, code: str, message: str, data=None) -> dict:
    return {"id": rid, "error": RpcError(code, message, data).to_dict()}


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class Field:
    types: tuple[type, ...]
    required: bool = True
    default: Any = None


def field(*types: type, default: Any = ..., nullable: bool = False) -> Field:
    if nullable:
        types = types + (type(None),)
    if default is ...:
        return Field(types, True)
    return Field(types, False, default)


def _matches(value, types: tuple[type, ...]) -> bool:
    for t in types:
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return True
        if t not in (int, float) and isinstance(value, t):
            return True
    return False


def validate(params, schema: dict[str, Field]) -> dict:
    if params is None:
        params = {}
    if not isinstance(params, dict):
        raise RpcError("invalid-params", "params must be an object")
    bad = sorted(set(params) - set(schema))
    if bad:
        raise RpcError("invalid-params", f"unknown field(s): {', '.join(bad)}", {"fields": bad})
    out = {}
    for name, spec in schema.items():
        if name not in params:
            if spec.required:
                raise RpcError("invalid-params", f"missing field {name!r}", {"fields": [name]})
            out[name] = spec.default
            continue
        value = params[name]
        if not _matches(value, spec.types):
            want = "|".join("null" if t is type(None) else t.__name__ for t in spec.types)
            raise RpcError("invalid-params", f"field {name!r} must be {want}", {"fields": [name]})
        out[name] = value
    return out


@dataclass(frozen=True)
class Method:
    fn: Callable[..., Any]
    schema: dict[str, Field]
    doc: str = ""


class Service:
    """A named RPC target with a method table."""

    def __init__(self, target: str):
        self.target = target
        self.methods: dict[str, Method] = {}

    def method(self, name: str, schema: dict[str, Field] | None = None):
        def deco(fn):
            self.methods[name] = Method(fn, schema or {}, (fn.__doc__ or "").strip())
            return fn
        return deco

    def dispatch(self, envelope) -> dict:
        rid = envelope.get("id") if isinstance(envelope, dict) else None
        if not isinstance(envelope, dict):
            return error_response(rid, "invalid-request", "request must be an object")
        target = envelope.get("target", self.target)
        if target != self.target:
            return error_response(rid, "unknown-target", f"this server is {self.target!r}, not {target!r}")
        name = envelope.get("method")
        m = self.methods.get(name) if isinstance(name, str) else None
        if m is None:
            return error_response(rid, "unknown-method", f"{self.target} has no method {name!r}")
        try:
            params = validate(envelope.get("params"), m.schema)
            return {"id": rid, "result": m.fn(**params)}
        except RpcError as exc:
            return {"id": rid, "error": exc.to_dict()}
        except Exception as exc:  # domain errors become error responses, never silence
            code = getattr(exc, "code", None) or _code_for(exc)
            log.debug("%s.%s failed", self.target, name, exc_info=True)
            return error_response(rid, code, str(exc))

    def handle_line(self, line: bytes) -> bytes:
        try:
            envelope = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return dumps(error_response(None, "parse-error", str(exc)))
        return dumps(self.dispatch(envelope))


def _code_for(exc: Exception) -> str:
    if isinstance(exc, (ValueError, LookupError)):
        return "invalid-request"
    return "server-error"


# ---------------------------------------------------------------- servers


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: LineServer = self.server  # type: ignore[assignment]
        while True:
            try:
                line = self.rfile.readline(MAX_LINE)
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            reply = server.respond(line, self)
            try:
                self.wfile.write(reply)
                self.wfile.flush()
            except OSError:
                return


class LineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], respond: Callable[[bytes, Any], bytes]):
        self.respond = respond
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "LineServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        name=f"rpc-{self.address[1]}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_service(service: Service, address: tuple[str, int]) -> LineServer:
    return LineServer(address, lambda line, _h: service.handle_line(line)).start()


# ---------------------------------------------------------------- manager


class _Upstreams:
    """Per-client-connection upstream sockets, opened lazily."""

    def __init__(self, routes: dict[str, tuple[str, int]], timeout: float):
        self.routes = routes
        self.timeout = timeout
        self.conns: dict[str, tuple[socket.socket, Any]] = {}

    def forward(self, target: str, line: bytes) -> bytes:
        conn = self.conns.get(target)
        if conn is None:
            sock = socket.create_connection(self.routes[target], timeout=self.timeout)
            sock.settimeout(self.timeout)
            conn = self.conns[target] = (sock, sock.makefile("rb"))
        sock, rfile = conn
        try:
            sock.sendall(line if line.endswith(b"\n") else line + b"\n")
            reply = rfile.readline(MAX_LINE)
        except OSError:
            self.drop(target)
            raise
        if not reply:
            self.drop(target)
            raise ConnectionError(f"{target} closed the connection")
        return reply

    def drop(self, target: str) -> None:
        conn = self.conns.pop(target, None)
        if conn is not None:
            conn[1].close()
            conn[0].close()

    def close(self) -> None:
        for t in list(self.conns):
            self.drop(t)


class Manager:
    """Pure forwarder between clients and the Control / Readout servers.

    Request lines are relayed unchanged and upstream replies are relayed
    unchanged; only ``manager.*`` methods are answered locally.
    """

    def __init__(self, routes: dict[str, tuple[str, int]], upstream_timeout: float = 60.0):
        bad = sorted(set(routes) - {"control", "readout"})
        if bad:
            raise ValueError(f"unroutable target(s): {', '.join(bad)}")
        self.routes = {k: (str(v[0]), int(v[1])) for k, v in routes.items()}
        self.upstream_timeout = upstream_timeout
        self.service = Service("manager")
        self.service.method("ping")(lambda: {"pong": True, "server": "manager"})
        self.service.method("routes")(
            lambda: {"routes": {k: f"{h}:{p}" for k, (h, p) in sorted(self.routes.items())}}
        )
        self.forwarded = 0
        self._count_lock = threading.Lock()

    def respond(self, line: bytes, handler) -> bytes:
        ups: _Upstreams = getattr(handler, "_upstreams", None)
        if ups is None:
            ups = handler._upstreams = _Upstreams(self.routes, self.upstream_timeout)
        try:
            envelope = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return dumps(error_response(None, "parse-error", str(exc)))
        if not isinstance(envelope, dict):
            return dumps(error_response(None, "invalid-request", "request must be an object"))
        rid = envelope.get("id")
        target = envelope.get("target")
        if target == "manager":
            return dumps(self.service.dispatch(envelope))
        if target not in self.routes:
            return dumps(error_response(rid, "unknown-target", f"no route for target {target!r}"))
        try:
            reply = ups.forward(target, line)
        except (OSError, ConnectionError) as exc:
            return dumps(error_response(rid, "upstream-unreachable", f"{target}: {exc}"))
        with self._count_lock:
            self.forwarded += 1
        return reply


def serve_manager(routes: dict[str, tuple[str, int]], address: tuple[str, int] = ("127.0.0.1", DEFAULT_PORTS["manager"])) -> LineServer:
    mgr = Manager(routes)
    server = LineServer(address, mgr.respond)
    server.manager = mgr
    return server.start()


# ---------------------------------------------------------------- client

_ids = itertools.count(1)


def split_method(method: str) -> tuple[str, str]:
    target, sep, name = method.partition(".")
    if not sep:
        raise ValueError(f"method must look like target.name, got {method!r}")
    return target, name


class RpcClient:
    """Persistent connection issuing one request at a time."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self.address = tuple(address)
        self.timeout = timeout
        try:
            self.sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as exc:
            raise RpcTransportError(f"cannot connect to {self.address}: {exc}") from None
        self.sock.settimeout(timeout)
        self.rfile = self.sock.makefile("rb")

    def call_raw(self, line: bytes) -> bytes:
        try:
            self.sock.sendall(line)
            reply = self.rfile.readline(MAX_LINE)
        except socket.timeout:
            raise RpcTimeout(f"no reply from {self.address} within {self.timeout} s") from None
        except OSError as exc:
            raise RpcTransportError(str(exc)) from None
        if not reply:
            raise RpcTransportError(f"{self.address} closed the connection")
        return reply

    def request(self, method: str, params: dict | None = None, rid=None) -> dict:
        target, name = split_method(method)
        rid = next(_ids) if rid is None else rid
        reply = json.loads(self.call_raw(dumps({"id": rid, "target": target, "method": name, "params": params or {}})))
        if reply.get("id") != rid:
            raise RpcTransportError(f"correlation mismatch: sent {rid!r}, got {reply.get('id')!r}")
        return reply

    def call(self, method: str, params: dict | None = None):
        reply = self.request(method, params)
        if "error" in reply:
            err = reply["error"]
            raise RpcError(err.get("code", "server-error"), err.get("message", ""), err.get("data"))
        return reply["result"]

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_call(address: tuple[str, int], method: str, params: dict | None = None, timeout: float = 10.0):
    with RpcClient(address, timeout) as c:
        return c.call(method, params)
