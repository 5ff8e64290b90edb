"""Digitizer data-link frames over datagrams, and trigger-record reassembly.

Frame layout (little-endian, no padding), 16-byte header then payload::

    magic 'QD' | version u8 | channel u8 | device u16 | trigger_seq u32
    | frame_index u16 | frame_count u16 | sample_count u16 | int16[sample_count]

Samples are 12-bit signed codes carried in 16-bit containers.  A frame
with the maximum 728 samples is 1472 bytes, one standard-MTU datagram.
"""

from __future__ import annotations

import collections
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"QD"
VERSION = 1
HEADER = struct.Struct("<2sBBHIHHH")
MAX_SAMPLES = 728
MAX_FRAME_BYTES = HEADER.size + 2 * MAX_SAMPLES
CODE_MIN, CODE_MAX = -2048, 2047
DEFAULT_STREAM_PORT = 9100
# Linux: exceeds net.core.rmem_max when the process has CAP_NET_ADMIN
_SO_RCVBUFFORCE = getattr(socket, "SO_RCVBUFFORCE", 33)


class FrameError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    channel_id: int
    device_id: int
    trigger_seq: int
    frame_index: int
    frame_count: int
    samples: np.ndarray
    version: int = VERSION

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.device_id, self.channel_id, self.trigger_seq)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.header_fields() == other.header_fields()
            and np.array_equal(self.samples, other.samples)
        )

    def header_fields(self) -> tuple:
        return (self.version, self.channel_id, self.device_id, self.trigger_seq,
                self.frame_index, self.frame_count, len(self.samples))


def encode_frame(f: Frame) -> bytes:
    samples = np.asarray(f.samples)
    n = samples.size
    if n > MAX_SAMPLES:
        raise FrameError(f"{n} samples exceeds the {MAX_SAMPLES}-sample frame limit")
    if not 0 <= f.frame_index < f.frame_count:
        raise FrameError(f"frame_index {f.frame_index} not below frame_count {f.frame_count}")
    if n and (samples.min() < CODE_MIN or samples.max() > CODE_MAX):
        raise FrameError("sample outside the 12-bit code range")
    head = HEADER.pack(MAGIC, f.version, f.channel_id, f.device_id, f.trigger_seq,
                       f.frame_index, f.frame_count, n)
    return head + samples.astype("<i2").tobytes()


def decode_frame(buf: bytes) -> Frame:
    if len(buf) < HEADER.size:
        raise FrameError(f"datagram of {len(buf)} bytes is shorter than the header")
    magic, version, ch, dev, seq, idx, count, n = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"bad version {version}")
    if len(buf) != HEADER.size + 2 * n:
        raise FrameError(f"sample_count {n} inconsistent with {len(buf)}-byte datagram")
    if n > MAX_SAMPLES:
        raise FrameError(f"sample_count {n} exceeds {MAX_SAMPLES}")
    if idx >= count:
        raise FrameError(f"frame_index {idx} not below frame_count {count}")
    samples = np.frombuffer(buf, dtype="<i2", count=n, offset=HEADER.size).astype(np.int16)
    if n and (samples.min() < CODE_MIN or samples.max() > CODE_MAX):
        raise FrameError("sample outside the 12-bit code range")
    return Frame(ch, dev, seq, idx, count, samples, version)


def fragment(codes, device_id: int, channel_id: int, trigger_seq: int,
             max_samples: int = MAX_SAMPLES) -> list[Frame]:
    """Split one trigger record into frames of at most ``max_samples``."""
    codes = np.asarray(codes, dtype=np.int16)
    count = max(1, -(-codes.size // max_samples))
    if count > 0xFFFF:
        raise FrameError("record needs more than 65535 frames")
    return [
        Frame(channel_id, device_id, trigger_seq, i, count, codes[i * max_samples:(i + 1) * max_samples])
        for i in range(count)
    ]


# ---------------------------------------------------------------- reassembly

RecordKey = tuple[int, int, int]


@dataclass(eq=False)
class Record:
    key: RecordKey
    samples: np.ndarray
    complete: bool = True
    missing: list[int] = field(default_factory=list)
    corrupt: bool = False

    @property
    def device_id(self) -> int:
        return self.key[0]

    @property
    def channel_id(self) -> int:
        return self.key[1]

    @property
    def trigger_seq(self) -> int:
        return self.key[2]


class _Pending:
    __slots__ = ("count", "parts", "have", "first_seen", "corrupt")

    def __init__(self, count: int, now: float, corrupt: bool = False):
        self.count = count
        self.parts: list[bytes | None] = [None] * count
        self.have = 0
        self.first_seen = now
        self.corrupt = corrupt


@dataclass
class ReassemblyStats:
    frames: int = 0
    bytes: int = 0
    samples_in: int = 0
    duplicates: int = 0
    bad_frames: int = 0
    records_complete: int = 0
    records_incomplete: int = 0
    records_corrupt: int = 0


class Reassembler:
    """Rebuild per-trigger records from frames arriving in any order.

    A key whose frames disagree on frame_count is poisoned and only leaves
    through :meth:`flush` as a corrupt record.  Keys that were completed are
    remembered for a while so late duplicates are dropped; keys that were
    evicted by ``flush`` are remembered so late frames open a fresh,
    corrupt-flagged key instead of merging.
    """

    def __init__(self, history: int = 65536, clock=time.monotonic):
        self._pending: dict[RecordKey, _Pending] = {}
        self._done: collections.OrderedDict[RecordKey, bool] = collections.OrderedDict()
        self._history = history
        self._clock = clock
        self.stats = ReassemblyStats()

    def __len__(self) -> int:
        return len(self._pending)

    def _remember(self, key: RecordKey, evicted: bool) -> None:
        self._done[key] = evicted
        if len(self._done) > self._history:
            self._done.popitem(last=False)

    def ingest(self, f: Frame, now: float | None = None) -> Record | None:
        payload = np.asarray(f.samples, dtype="<i2").tobytes()
        return self._add(f.key, f.frame_index, f.frame_count, payload, now)

    def ingest_bytes(self, buf, now: float | None = None) -> Record | None:
        """Fast path from a raw datagram; malformed datagrams are counted and dropped."""
        if len(buf) < HEADER.size:
            self.stats.bad_frames += 1
            return None
        magic, version, ch, dev, seq, idx, count, n = HEADER.unpack_from(buf)
        if magic != MAGIC or version != VERSION or len(buf) != HEADER.size + 2 * n or idx >= count:
            self.stats.bad_frames += 1
            return None
        return self._add((dev, ch, seq), idx, count, bytes(buf[HEADER.size:]), now)

    def _add(self, key: RecordKey, idx: int, count: int, payload: bytes, now: float | None) -> Record | None:
        st = self.stats
        st.frames += 1
        st.bytes += HEADER.size + len(payload)
        st.samples_in += len(payload) // 2
        p = self._pending.get(key)
        if p is None:
            evicted = self._done.get(key)
            if evicted is False:
                st.duplicates += 1
                return None
            if count == 1 and evicted is None:
                self._remember(key, False)
                st.records_complete += 1
                return Record(key, np.frombuffer(payload, dtype="<i2"))
            p = self._pending[key] = _Pending(count, self._clock() if now is None else now, bool(evicted))
        if count != p.count:
            p.corrupt = True
            return None
        if p.parts[idx] is not None:
            st.duplicates += 1
            return None
        p.parts[idx] = payload
        p.have += 1
        if p.have < p.count or p.corrupt:
            return None
        del self._pending[key]
        self._remember(key, False)
        st.records_complete += 1
        return Record(key, np.frombuffer(b"".join(p.parts), dtype="<i2"))

    def flush(self, older_than: float = 0.0, now: float | None = None) -> list[Record]:
        """Evict keys first seen more than ``older_than`` seconds ago."""
        now = self._clock() if now is None else now
        stale = [k for k, p in self._pending.items() if now - p.first_seen >= older_than]
        out = []
        for key in stale:
            p = self._pending.pop(key)
            self._remember(key, True)
            missing = [i for i, part in enumerate(p.parts) if part is None]
            data = b"".join(part for part in p.parts if part is not None)
            if p.corrupt:
                self.stats.records_corrupt += 1
            else:
                self.stats.records_incomplete += 1
            out.append(Record(key, np.frombuffer(data, dtype="<i2"), complete=False,
                              missing=missing, corrupt=p.corrupt))
        return out


# ---------------------------------------------------------------- receiver


@dataclass
class ReceiverStats:
    started: float = 0.0
    first_frame: float = 0.0
    last_frame: float = 0.0
    max_queue_depth: int = 0
    delivered: int = 0
    discarded: int = 0

    @property
    def active_seconds(self) -> float:
        return max(self.last_frame - self.first_frame, 1e-9)


def _set_rcvbuf(sock: socket.socket, size: int) -> None:
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, size)
    if sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF) >= size:
        return
    try:
        sock.setsockopt(socket.SOL_SOCKET, _SO_RCVBUFFORCE, size)
    except OSError:
        log.info("receive buffer capped at %d bytes", sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF))


class DigitizerReceiver:
    """Datagram socket owner that feeds one reassembler and hands out records.

    Completed (and flushed incomplete) records go to ``records`` while
    :attr:`accepting` is set; otherwise they are counted and dropped so an
    idle server does not accumulate a backlog.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_STREAM_PORT,
                 stale_after: float = 0.05, rcvbuf: int = 32 << 20):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _set_rcvbuf(self.sock, rcvbuf)
        self.sock.bind((host, port))
        self.sock.settimeout(0.05)
        self.address = self.sock.getsockname()
        self.reassembler = Reassembler()
        self.records: queue.Queue[Record] = queue.Queue()
        self.stats = ReceiverStats()
        self.stale_after = stale_after
        self.accepting = threading.Event()
        self.accepting.set()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "DigitizerReceiver":
        self.stats.started = time.perf_counter()
        self._thread = threading.Thread(target=self._run, name="digitizer-rx", daemon=True)
        self._thread.start()
        return self

    def _deliver(self, rec: Record) -> None:
        if not self.accepting.is_set():
            self.stats.discarded += 1
            return
        self.records.put(rec)
        self.stats.delivered += 1
        depth = self.records.qsize()
        if depth > self.stats.max_queue_depth:
            self.stats.max_queue_depth = depth

    def _run(self) -> None:
        buf = bytearray(2048)
        view = memoryview(buf)
        recv_into = self.sock.recv_into
        ingest = self.reassembler.ingest_bytes
        clock = time.monotonic
        next_flush = clock() + self.stale_after
        stats = self.stats
        while not self._stop.is_set():
            try:
                n = recv_into(buf)
            except socket.timeout:
                n = 0
            except OSError:
                break
            now = clock()
            if n:
                rec = ingest(view[:n], now)
                stats.last_frame = time.perf_counter()
                if stats.first_frame == 0.0:
                    stats.first_frame = stats.last_frame
                if rec is not None:
                    self._deliver(rec)
            if now >= next_flush:
                next_flush = now + self.stale_after
                for rec in self.reassembler.flush(self.stale_after, now):
                    self._deliver(rec)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
