"""Length-prefixed binary protocol to AWG / DC endpoints, one FIFO worker per device.

Every message is ``total_len u32 | opcode u16 | request_id u16 | body`` with
``total_len`` counting opcode, request id and body.  All integers are
little-endian.  A response echoes the request id, sets bit 15 of the opcode
and starts its body with a status byte.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import socket
import struct
import threading
import time
from concurrent.futures import Future, wait
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IHH")
LEN_FIELD = struct.Struct("<I")
RESPONSE_BIT = 0x8000
MAX_BODY = 2**32 - 8
DEFAULT_PORT_BASE = 9000


class Op(enum.IntEnum):
    UPLOAD_WAVE = 0x0001
    SET_OFFSET = 0x0002
    SET_DELAY = 0x0003
    SET_TRIG = 0x0004
    PLAY = 0x0005
    READ_WAVE = 0x0006
    STATS = 0x0007
    DC_SET = 0x0010
    PING = 0x00FF


class Status(enum.IntEnum):
    OK = 0
    BAD_OPCODE = 1
    BAD_BODY = 2
    EMPTY_SLOT = 3
    OUT_OF_RANGE = 4


class ProtocolError(ValueError):
    pass


class LinkError(RuntimeError):
    pass


class UnknownDevice(LinkError):
    pass


@dataclass(frozen=True)
class WireMessage:
    opcode: int
    request_id: int
    body: bytes = b""

    @property
    def is_response(self) -> bool:
        return bool(self.opcode & RESPONSE_BIT)

    @property
    def status(self) -> int:
        return self.body[0] if self.body else Status.OK

    @property
    def payload(self) -> bytes:
        return self.body[1:]


def encode_header(m: WireMessage) -> bytes:
    if len(m.body) > MAX_BODY:
        raise ProtocolError(f"body of {len(m.body)} bytes exceeds {MAX_BODY}")
    return HEADER.pack(4 + len(m.body), m.opcode, m.request_id)


def encode_message(m: WireMessage) -> bytes:
    return encode_header(m) + bytes(m.body)


def decode_message(buf: bytes) -> WireMessage:
    """Decode exactly one message occupying all of ``buf``."""
    if len(buf) < HEADER.size:
        raise ProtocolError(f"short buffer: {len(buf)} bytes < {HEADER.size}-byte header")
    total, opcode, rid = HEADER.unpack_from(buf)
    if total < 4:
        raise ProtocolError(f"total_len {total} is smaller than opcode + request_id")
    if total + 4 != len(buf):
        raise ProtocolError(f"length mismatch: header says {total + 4} bytes, buffer has {len(buf)}")
    return WireMessage(opcode, rid, bytes(buf[HEADER.size:]))


def make_response(request: WireMessage, status: int = Status.OK, payload: bytes = b"") -> WireMessage:
    return WireMessage(request.opcode | RESPONSE_BIT, request.request_id, bytes([status]) + payload)


# ---------------------------------------------------------------- stream I/O


def recv_exact(sock: socket.socket, n: int, buf: bytearray | None = None) -> bytearray:
    buf = bytearray(n) if buf is None else buf
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 20))
        if k == 0:
            raise ProtocolError(f"stream closed after {got} of {n} bytes")
        got += k
    return buf


def read_message(sock: socket.socket) -> WireMessage | None:
    """Next message from a stream, or None on a clean close between messages."""
    first = sock.recv(LEN_FIELD.size, socket.MSG_WAITALL)
    if not first:
        return None
    if len(first) < LEN_FIELD.size:
        raise ProtocolError("stream closed inside a header")
    (total,) = LEN_FIELD.unpack(first)
    rest = recv_exact(sock, total)
    return decode_message(first + rest)


def send_message(sock: socket.socket, m: WireMessage) -> None:
    sock.sendall(encode_header(m))
    if m.body:
        sock.sendall(m.body)


# ---------------------------------------------------------------- bodies

_U16_U32 = struct.Struct("<HI")
_U8_I16 = struct.Struct("<Bh")
_U8_U32 = struct.Struct("<BI")
_U8_U16 = struct.Struct("<BH")
_U8_I64 = struct.Struct("<Bq")


def upload_wave_body(slot: int, codes) -> bytes:
    codes = np.asarray(codes, dtype="<i2")
    return _U16_U32.pack(slot, codes.size) + codes.tobytes()


def parse_upload_wave(body: bytes) -> tuple[int, np.ndarray]:
    if len(body) < _U16_U32.size:
        raise ProtocolError("UPLOAD_WAVE body too short")
    slot, count = _U16_U32.unpack_from(body)
    if len(body) != _U16_U32.size + 2 * count:
        raise ProtocolError(f"UPLOAD_WAVE declares {count} samples, carries {(len(body) - 6) / 2}")
    return slot, np.frombuffer(body, dtype="<i2", offset=_U16_U32.size)


def set_offset_body(channel: int, code: int) -> bytes:
    return _U8_I16.pack(channel, code)


def set_delay_body(channel: int, samples: int) -> bytes:
    return _U8_U32.pack(channel, samples)


def set_trig_body(mode: int) -> bytes:
    return bytes([mode])


def play_body(channel: int, slot: int) -> bytes:
    return _U8_U16.pack(channel, slot)


def read_wave_body(slot: int) -> bytes:
    return struct.pack("<H", slot)


def dc_set_body(channel: int, microvolts: int) -> bytes:
    return _U8_I64.pack(channel, microvolts)


def parse_dc_set(body: bytes) -> tuple[int, int]:
    if len(body) != _U8_I64.size:
        raise ProtocolError("DC_SET body must be 9 bytes")
    return _U8_I64.unpack(body)


# ---------------------------------------------------------------- worker link


class TaskStatus(enum.Enum):
    OK = "ok"
    DEVICE_ERROR = "device-error"
    DISCONNECTED = "disconnected"
    TIMEOUT = "timeout"


@dataclass
class TaskResult:
    device_id: int
    request_id: int
    opcode: int
    status: TaskStatus
    body: bytes = b""
    submitted: float = 0.0
    completed: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status is TaskStatus.OK


@dataclass(eq=False)
class Ticket:
    device_id: int
    request_id: int
    opcode: int
    submitted: float
    future: Future = field(default_factory=Future)

    def done(self) -> bool:
        return self.future.done()

    def result(self, timeout: float | None = None) -> TaskResult:
        return self.future.result(timeout)


@dataclass(eq=False)
class _Task:
    ticket: Ticket
    message: WireMessage


class _DeviceWorker:
    """Sole owner of one device connection; executes tasks strictly in FIFO order."""

    def __init__(self, link: "InstrumentLink", device_id: int, address: tuple[str, int]):
        self.link = link
        self.device_id = device_id
        self.address = address
        self.queue: queue.Queue[_Task | None] = queue.Queue()
        self.sock: socket.socket | None = None
        self.dead_reason = ""
        self.thread = threading.Thread(target=self._run, name=f"awg-{device_id}", daemon=True)
        self.thread.start()

    def _connect(self) -> None:
        sock = socket.create_connection(self.address, timeout=self.link.connect_timeout)
        sock.settimeout(self.link.io_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock

    def _finish(self, task: _Task, status: TaskStatus, body: bytes = b"", error: str = "") -> None:
        t = task.ticket
        self.link._release(self.device_id, t.request_id)
        t.future.set_result(
            TaskResult(t.device_id, t.request_id, t.opcode, status, body, t.submitted, time.perf_counter(), error)
        )

    def _run(self) -> None:
        while True:
            task = self.queue.get()
            if task is None:
                break
            if self.dead_reason:
                self._finish(task, TaskStatus.DISCONNECTED, error=self.dead_reason)
                continue
            try:
                if self.sock is None:
                    self._connect()
                send_message(self.sock, task.message)
                reply = read_message(self.sock)
                if reply is None:
                    raise ProtocolError("device closed the connection")
                if reply.request_id != task.message.request_id or reply.opcode != task.message.opcode | RESPONSE_BIT:
                    raise ProtocolError(
                        f"reply {reply.opcode:#06x}/{reply.request_id} does not match "
                        f"{task.message.opcode:#06x}/{task.message.request_id}"
                    )
            except (OSError, ProtocolError) as exc:
                self.dead_reason = f"device {self.device_id} at {self.address}: {exc}"
                log.warning("%s", self.dead_reason)
                self._close_socket()
                self._finish(task, TaskStatus.DISCONNECTED, error=self.dead_reason)
                continue
            if reply.status == Status.OK:
                self._finish(task, TaskStatus.OK, reply.payload)
            else:
                self._finish(task, TaskStatus.DEVICE_ERROR, reply.payload, f"status {reply.status}")
        self._close_socket()

    def _close_socket(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None


class InstrumentLink:
    """Asynchronous task submission to many devices.

    ``submit`` never blocks: it assigns a per-device request id and appends
    the task to that device's queue.  Devices progress independently, so a
    stalled device only delays its own tickets.
    """

    def __init__(self, connect_timeout: float = 2.0, io_timeout: float | None = 30.0):
        self.connect_timeout = connect_timeout
        self.io_timeout = io_timeout
        self._workers: dict[int, _DeviceWorker] = {}
        self._rid: dict[int, itertools.count] = {}
        self._outstanding: dict[int, set[int]] = {}
        self._lock = threading.Lock()

    def add_device(self, device_id: int, address: tuple[str, int] | None = None) -> None:
        address = address or ("127.0.0.1", DEFAULT_PORT_BASE + device_id)
        with self._lock:
            if device_id in self._workers:
                raise LinkError(f"device {device_id} already registered")
            self._rid[device_id] = itertools.count()
            self._outstanding[device_id] = set()
            self._workers[device_id] = _DeviceWorker(self, device_id, address)

    def has_device(self, device_id: int) -> bool:
        return device_id in self._workers

    @property
    def devices(self) -> list[int]:
        return sorted(self._workers)

    def _release(self, device_id: int, rid: int) -> None:
        with self._lock:
            self._outstanding[device_id].discard(rid)

    def submit(self, device_id: int, opcode: int, body: bytes = b"") -> Ticket:
        with self._lock:
            worker = self._workers.get(device_id)
            if worker is None:
                raise UnknownDevice(f"unknown device {device_id}")
            rid = next(self._rid[device_id]) & 0xFFFF
            if rid in self._outstanding[device_id]:
                raise LinkError(f"request id {rid} still outstanding on device {device_id}")
            self._outstanding[device_id].add(rid)
            ticket = Ticket(device_id, rid, int(opcode), time.perf_counter())
            worker.queue.put(_Task(ticket, WireMessage(int(opcode), rid, body)))
        return ticket

    def call(self, device_id: int, opcode: int, body: bytes = b"", timeout: float | None = None) -> TaskResult:
        return self.drain([self.submit(device_id, opcode, body)], timeout)[0]

    def drain(self, tickets: list[Ticket], timeout: float | None = None) -> list[TaskResult]:
        """Wait for ``tickets``; unresolved ones come back with status TIMEOUT."""
        if not tickets:
            return []
        wait([t.future for t in tickets], timeout=timeout)
        out = []
        for t in tickets:
            if t.future.done():
                out.append(t.future.result())
            else:
                out.append(
                    TaskResult(t.device_id, t.request_id, t.opcode, TaskStatus.TIMEOUT,
                               submitted=t.submitted, completed=time.perf_counter(),
                               error=f"no reply within {timeout} s")
                )
        return out

    def close(self) -> None:
        with self._lock:
            workers = list(self._workers.values())
        for w in workers:
            w.queue.put(None)
        for w in workers:
            w.thread.join(timeout=1.0)
            if w.thread.is_alive():
                # stuck in a blocking read on a stalled device
                w._close_socket()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
