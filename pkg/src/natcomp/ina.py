"""Integer-only aggregation of naturally compressed chunks.

Each worker sends NAT8C codes.  A code for ``+-2^k`` decodes to the 64-bit
fixed-point integer ``+-2^(k+50)``, which is simply ``+-(1 << offset)``
since the code's offset field is ``k + 50``.  Sums are rounded back to a
power of two with an integer threshold test against random bits.

Wire protocol (TCP, little endian)::

    frame   := length:u32  type:u8  body[length]
    HELLO   := session:u64 worker:u16 n_workers:u16 d:u64 chunk_size:u16
    ACK     := session:u64
    CHUNK   := session:u64 chunk_index:u64 worker:u16 count:u16 codes[count]
    RESULT  := same layout as CHUNK with worker = 0xFFFF
    ABORT   := utf-8 reason
    BYE     := (empty)
"""
from __future__ import annotations

import logging
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import NAT8C_ZERO
from .errors import FloatUsageError, ProtocolError, SessionError
from .rng import RngStream

log = logging.getLogger(__name__)

SHIFT = 50
MAX_OFFSET = 60
SATURATION = 1 << 62
MAX_WORKERS_EXACT = 8
MAX_CHUNK = 256
DEFAULT_TIMEOUT = 5.0
RESULT_WORKER = 0xFFFF

MSG_HELLO, MSG_ACK, MSG_CHUNK, MSG_RESULT, MSG_ABORT, MSG_BYE = 1, 2, 3, 4, 5, 6

FRAME_HEADER = struct.Struct("<IB")
HELLO = struct.Struct("<QHHQH")
ACK = struct.Struct("<Q")
CHUNK_HEADER = struct.Struct("<QQHH")
MAX_FRAME = 1 << 20


# ---------------------------------------------------------------------------
# integer hot path

class IntegerOps:
    """Array arithmetic for the aggregation routine.

    With ``strict=True`` every operand and result is checked to be an
    integer or boolean array/scalar, so any floating-point value reaching
    the routine raises :class:`FloatUsageError`.
    """

    def __init__(self, strict: bool = False) -> None:
        self.strict = strict
        self.checked = 0

    def _ok(self, *values):
        if self.strict:
            for v in values:
                kind = v.dtype.kind if isinstance(v, (np.ndarray, np.generic)) else None
                if kind is None:
                    if isinstance(v, bool) or (isinstance(v, int)):
                        continue
                    raise FloatUsageError(f"non-integer operand {type(v).__name__}")
                if kind not in "iub":
                    raise FloatUsageError(f"operand of dtype {v.dtype} in the integer path")
                self.checked += 1
        return values[0] if len(values) == 1 else values

    def i64(self, a):
        self._ok(a)
        return self._ok(np.asarray(a).astype(np.int64))

    def u64(self, a):
        self._ok(a)
        return self._ok(np.asarray(a).astype(np.uint64))

    def add(self, a, b):
        self._ok(a, b)
        return self._ok(a + b)

    def sub(self, a, b):
        self._ok(a, b)
        return self._ok(a - b)

    def neg(self, a):
        self._ok(a)
        return self._ok(-a)

    def shl(self, a, b):
        self._ok(a, b)
        return self._ok(np.left_shift(a, b))

    def shr(self, a, b):
        self._ok(a, b)
        return self._ok(np.right_shift(a, b))

    def band(self, a, b):
        self._ok(a, b)
        return self._ok(np.bitwise_and(a, b))

    def bor(self, a, b):
        self._ok(a, b)
        return self._ok(np.bitwise_or(a, b))

    def lt(self, a, b):
        self._ok(a, b)
        return self._ok(a < b)

    def gt(self, a, b):
        self._ok(a, b)
        return self._ok(a > b)

    def ne(self, a, b):
        self._ok(a, b)
        return self._ok(a != b)

    def eq(self, a, b):
        self._ok(a, b)
        return self._ok(a == b)

    def where(self, cond, a, b):
        self._ok(cond, a, b)
        return self._ok(np.where(cond, a, b))

    def count(self, mask):
        self._ok(mask)
        return int(np.count_nonzero(mask))


@dataclass
class AggregateStats:
    saturated: int = 0
    clipped: int = 0


def decode_fixed(codes, ops: IntegerOps):
    """NAT8C codes to fixed-point integers ``+-(1 << offset)``, zero code to 0."""
    codes = ops.i64(codes)
    offset = ops.band(codes, 0x3F)
    mag = ops.shl(ops.i64(1), offset)
    signed = ops.where(ops.ne(ops.band(codes, 0x40), 0), ops.neg(mag), mag)
    return ops.where(ops.ne(ops.band(codes, 0x80), 0), ops.i64(0), signed)


def saturating_sum(rows, ops: IntegerOps, stats: AggregateStats):
    """Add fixed-point rows one worker at a time, saturating at +-2^62."""
    total = ops.i64(np.zeros(rows[0].shape[0], dtype=np.int64))
    for row in rows:
        total = ops.add(total, row)
        high = ops.gt(total, SATURATION)
        low = ops.lt(total, -SATURATION)
        stats.saturated += ops.count(high) + ops.count(low)
        total = ops.where(high, SATURATION, total)
        total = ops.where(low, -SATURATION, total)
    return total


def msb_index(mag, ops: IntegerOps):
    """``floor(log2 mag)`` for positive int64 values, by binary search on shifts."""
    pos = ops.i64(np.zeros(mag.shape, dtype=np.int64))
    rest = mag
    for step in (32, 16, 8, 4, 2, 1):
        hit = ops.ne(ops.shr(rest, step), 0)
        pos = ops.where(hit, ops.add(pos, step), pos)
        rest = ops.where(hit, ops.shr(rest, step), rest)
    return pos


def round_to_codes(total, bits, ops: IntegerOps, stats: AggregateStats):
    """Stochastically round fixed-point sums to powers of two; return NAT8C codes.

    ``|sum| = 2^a + excess`` rounds up to ``2^(a+1)`` iff the top ``a``
    random bits, read as an integer, fall below ``excess``.
    """
    negative = ops.lt(total, 0)
    mag = ops.where(negative, ops.neg(total), total)
    zero = ops.eq(mag, 0)
    mag = ops.where(zero, 1, mag)
    a = msb_index(mag, ops)
    excess = ops.u64(ops.sub(mag, ops.shl(ops.i64(1), a)))
    shift = ops.u64(ops.where(ops.eq(a, 0), 63, ops.sub(64, a)))
    draw = ops.shr(ops.u64(bits), shift)
    draw = ops.where(ops.eq(a, 0), ops.u64(0), draw)
    up = ops.lt(draw, excess)
    offset = ops.where(up, ops.add(a, 1), a)
    over = ops.gt(offset, MAX_OFFSET)
    stats.clipped += ops.count(ops.band(over, ops.ne(zero, True)))
    offset = ops.where(over, MAX_OFFSET, offset)
    code = ops.bor(ops.shl(ops.i64(negative), 6), offset)
    return ops.where(zero, NAT8C_ZERO, code)


def aggregate_codes(rows, bits, ops: IntegerOps | None = None,
                    stats: AggregateStats | None = None) -> np.ndarray:
    """Sum NAT8C code rows (one per worker) and recompress; ``bits`` are u64 draws per element."""
    ops = ops or IntegerOps()
    stats = stats if stats is not None else AggregateStats()
    fixed = [decode_fixed(r, ops) for r in rows]
    total = saturating_sum(fixed, ops, stats)
    return round_to_codes(total, bits, ops, stats).astype(np.uint8)


HOT_PATH = (decode_fixed, saturating_sum, msb_index, round_to_codes, aggregate_codes)


# ---------------------------------------------------------------------------
# frames

@dataclass
class ChunkFrame:
    session_id: int
    chunk_index: int
    worker_id: int
    codes: np.ndarray  # uint8 NAT8C codes

    @property
    def element_count(self) -> int:
        return int(self.codes.size)

    def pack(self) -> bytes:
        if not 0 < self.codes.size <= MAX_CHUNK:
            raise ProtocolError(f"chunk must hold 1..{MAX_CHUNK} elements")
        return CHUNK_HEADER.pack(self.session_id, self.chunk_index, self.worker_id,
                                 self.codes.size) + np.asarray(self.codes, dtype=np.uint8).tobytes()

    @classmethod
    def unpack(cls, body: bytes) -> "ChunkFrame":
        if len(body) < CHUNK_HEADER.size:
            raise ProtocolError("chunk frame shorter than its header")
        session, index, worker, count = CHUNK_HEADER.unpack_from(body)
        payload = body[CHUNK_HEADER.size:]
        if count == 0 or count > MAX_CHUNK or len(payload) != count:
            raise ProtocolError(f"chunk declares {count} elements but carries {len(payload)} bytes")
        return cls(session, index, worker, np.frombuffer(payload, dtype=np.uint8).copy())


@dataclass(frozen=True)
class Hello:
    session_id: int
    worker_id: int
    n_workers: int
    d: int
    chunk_size: int

    def pack(self) -> bytes:
        return HELLO.pack(self.session_id, self.worker_id, self.n_workers, self.d, self.chunk_size)

    @classmethod
    def unpack(cls, body: bytes) -> "Hello":
        if len(body) != HELLO.size:
            raise ProtocolError("bad HELLO length")
        h = cls(*HELLO.unpack(body))
        if not 1 <= h.chunk_size <= MAX_CHUNK or h.n_workers < 1 or h.d < 1:
            raise ProtocolError("bad HELLO parameters")
        if h.worker_id >= h.n_workers:
            raise ProtocolError("worker id out of range")
        return h

    def chunk_count(self) -> int:
        return -(-self.d // self.chunk_size)


def encode_frame(kind: int, body: bytes = b"") -> bytes:
    return FRAME_HEADER.pack(len(body), kind) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf += part
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """Next ``(type, body)``, or None on a clean end of stream."""
    head = _recv_exact(sock, FRAME_HEADER.size)
    if head is None:
        return None
    length, kind = FRAME_HEADER.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length) if length else b""
    if body is None:
        raise ProtocolError("stream ended inside a frame")
    return kind, body


# ---------------------------------------------------------------------------
# server

class _Peer:
    """Outbound side of one worker connection; a thread drains the queue."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.outbox: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._drain, daemon=True)
        self.thread.start()

    def send(self, data: bytes | None) -> None:
        self.outbox.put(data)

    def _drain(self) -> None:
        while True:
            data = self.outbox.get()
            if data is None:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                return

    def close(self) -> None:
        self.outbox.put(None)


@dataclass
class Session:
    hello: Hello
    rng: RngStream
    strict: bool = False
    peers: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)  # chunk -> {worker: codes}
    first_seen: dict = field(default_factory=dict)
    ready: dict = field(default_factory=dict)
    next_out: int = 0
    finished: set = field(default_factory=set)
    aborted: str | None = None
    stats: AggregateStats = field(default_factory=AggregateStats)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def compatible(self, h: Hello) -> bool:
        a = self.hello
        return (a.n_workers, a.d, a.chunk_size) == (h.n_workers, h.d, h.chunk_size)

    def expected_count(self, index: int) -> int:
        h = self.hello
        return min(h.chunk_size, h.d - index * h.chunk_size)

    def submit(self, frame: ChunkFrame) -> None:
        with self.lock:
            if self.aborted:
                return
            h = self.hello
            if not 0 <= frame.chunk_index < h.chunk_count():
                raise ProtocolError(f"chunk index {frame.chunk_index} out of range")
            if frame.element_count != self.expected_count(frame.chunk_index):
                raise ProtocolError("chunk length differs from the session's chunk boundaries")
            if frame.chunk_index in self.ready or frame.chunk_index < self.next_out:
                raise ProtocolError("chunk already aggregated")
            slot = self.pending.setdefault(frame.chunk_index, {})
            if frame.worker_id in slot:
                raise ProtocolError("duplicate chunk from worker")
            slot[frame.worker_id] = frame.codes
            self.first_seen.setdefault(frame.chunk_index, time.monotonic())
            if len(slot) == h.n_workers:
                self._complete(frame.chunk_index)

    def _complete(self, index: int) -> None:
        slot = self.pending.pop(index)
        self.first_seen.pop(index, None)
        rows = [slot[w] for w in range(self.hello.n_workers)]
        bits = self.rng.bits_at(index * self.hello.chunk_size, rows[0].size)
        codes = aggregate_codes(rows, bits, IntegerOps(self.strict), self.stats)
        self.ready[index] = codes
        while self.next_out in self.ready:
            out = self.ready.pop(self.next_out)
            body = ChunkFrame(self.hello.session_id, self.next_out, RESULT_WORKER, out).pack()
            for peer in self.peers.values():
                peer.send(encode_frame(MSG_RESULT, body))
            self.next_out += 1

    def abort(self, reason: str) -> None:
        with self.lock:
            if self.aborted:
                return
            self.aborted = reason
            for peer in self.peers.values():
                peer.send(encode_frame(MSG_ABORT, reason.encode()))
        log.warning("session %d aborted: %s", self.hello.session_id, reason)

    def overdue(self, timeout: float) -> bool:
        with self.lock:
            now = time.monotonic()
            return any(now - t > timeout for t in self.first_seen.values())


class _Handler(socketserver.BaseRequestHandler):
    server: "InaServer"

    def handle(self) -> None:
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peer = _Peer(sock)
        session = None
        hello = None
        try:
            first = read_frame(sock)
            if first is None:
                return
            kind, body = first
            if kind != MSG_HELLO:
                raise ProtocolError("expected HELLO")
            hello = Hello.unpack(body)
            session = self.server.join(hello, peer)
            peer.send(encode_frame(MSG_ACK, ACK.pack(hello.session_id)))
            while True:
                msg = read_frame(sock)
                if msg is None:
                    if hello.worker_id not in session.finished:
                        session.abort(f"worker {hello.worker_id} disconnected")
                    return
                kind, body = msg
                if kind == MSG_CHUNK:
                    frame = ChunkFrame.unpack(body)
                    if frame.session_id != hello.session_id or frame.worker_id != hello.worker_id:
                        raise ProtocolError("chunk session/worker does not match HELLO")
                    session.submit(frame)
                elif kind == MSG_BYE:
                    session.finished.add(hello.worker_id)
                    self.server.leave(session, hello.worker_id)
                    return
                else:
                    raise ProtocolError(f"unexpected message type {kind}")
        except (ProtocolError, OSError) as exc:
            if session is not None:
                session.abort(str(exc))
            else:
                peer.send(encode_frame(MSG_ABORT, str(exc).encode()))
        finally:
            peer.close()
            peer.thread.join(timeout=1.0)


class InaServer(socketserver.ThreadingTCPServer):
    """Aggregation service; one thread per worker connection, many sessions."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, n_workers: int, seed: int, timeout: float = DEFAULT_TIMEOUT,
                 strict: bool = False) -> None:
        super().__init__(address, _Handler)
        self.n_workers = n_workers
        self.seed = seed
        self.timeout = timeout
        self.strict = strict
        self.sessions: dict[int, Session] = {}
        self.completed: dict[int, Session] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._watchdog = threading.Thread(target=self._watch, daemon=True)
        self._watchdog.start()

    def join(self, hello: Hello, peer: _Peer) -> Session:
        if hello.n_workers != self.n_workers:
            raise ProtocolError(f"server expects {self.n_workers} workers, HELLO says {hello.n_workers}")
        with self._lock:
            session = self.sessions.get(hello.session_id)
            if session is None:
                session = Session(hello, RngStream(self.seed, hello.session_id), self.strict)
                self.sessions[hello.session_id] = session
            elif not session.compatible(hello):
                raise ProtocolError("HELLO disagrees with the session's parameters")
            with session.lock:
                if hello.worker_id in session.peers:
                    raise ProtocolError(f"worker {hello.worker_id} already joined")
                session.peers[hello.worker_id] = peer
        return session

    def leave(self, session: Session, worker_id: int) -> None:
        with self._lock:
            if len(session.finished) == session.hello.n_workers:
                self.sessions.pop(session.hello.session_id, None)
                self.completed[session.hello.session_id] = session

    def _watch(self) -> None:
        while not self._stop.wait(min(0.05, self.timeout / 4)):
            with self._lock:
                live = list(self.sessions.values())
            for s in live:
                if not s.aborted and s.overdue(self.timeout):
                    s.abort(f"missing worker frame after {self.timeout:g}s")

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def server_close(self) -> None:
        self._stop.set()
        super().server_close()


def serve(listen: tuple[str, int], n_workers: int, seed: int, timeout: float = DEFAULT_TIMEOUT,
          strict: bool = False, background: bool = False) -> InaServer:
    """Start the service; with ``background=True`` it runs on a daemon thread."""
    server = InaServer(listen, n_workers, seed, timeout, strict)
    if background:
        threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                         daemon=True).start()
    else:
        try:
            server.serve_forever(poll_interval=0.05)
        finally:
            server.server_close()
    return server


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# worker side

class InaClient:
    """One worker's connection to the service."""

    def __init__(self, address: tuple[str, int], session_id: int, worker_id: int, n_workers: int,
                 d: int, chunk_size: int = MAX_CHUNK, timeout: float = 30.0) -> None:
        self.hello = Hello(session_id, worker_id, n_workers, d, chunk_size)
        Hello.unpack(self.hello.pack())
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(encode_frame(MSG_HELLO, self.hello.pack()))
        kind, body = self._expect()
        if kind != MSG_ACK or ACK.unpack(body)[0] != session_id:
            raise ProtocolError("handshake failed")

    def _expect(self) -> tuple[int, bytes]:
        try:
            msg = read_frame(self.sock)
        except socket.timeout:
            raise SessionError("timed out waiting for the aggregator") from None
        if msg is None:
            raise SessionError("aggregator closed the connection")
        kind, body = msg
        if kind == MSG_ABORT:
            raise SessionError(f"session aborted: {body.decode(errors='replace')}")
        return kind, body

    def send_chunk(self, index: int, codes: np.ndarray) -> None:
        frame = ChunkFrame(self.hello.session_id, index, self.hello.worker_id,
                           np.asarray(codes, dtype=np.uint8))
        self.sock.sendall(encode_frame(MSG_CHUNK, frame.pack()))

    def send_vector(self, codes: np.ndarray) -> None:
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.size != self.hello.d:
            raise ProtocolError(f"vector has {codes.size} codes, session d={self.hello.d}")
        c = self.hello.chunk_size
        for i in range(self.hello.chunk_count()):
            self.send_chunk(i, codes[i * c:(i + 1) * c])

    def recv_result(self) -> ChunkFrame:
        kind, body = self._expect()
        if kind != MSG_RESULT:
            raise ProtocolError(f"expected RESULT, got type {kind}")
        frame = ChunkFrame.unpack(body)
        if frame.worker_id != RESULT_WORKER:
            raise ProtocolError("RESULT frame without the result marker")
        return frame

    def recv_vector(self) -> np.ndarray:
        out = np.empty(self.hello.d, dtype=np.uint8)
        c = self.hello.chunk_size
        for expected in range(self.hello.chunk_count()):
            frame = self.recv_result()
            if frame.chunk_index != expected:
                raise ProtocolError("results arrived out of chunk order")
            out[expected * c:expected * c + frame.element_count] = frame.codes
        return out

    def allreduce(self, codes: np.ndarray) -> np.ndarray:
        self.send_vector(codes)
        return self.recv_vector()

    def close(self) -> None:
        try:
            self.sock.sendall(encode_frame(MSG_BYE))
        except OSError:
            pass
        self.sock.close()

    def __enter__(self) -> "InaClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def aggregate_vector(rows, seed: int, session_id: int, chunk_size: int = MAX_CHUNK,
                     strict: bool = False, stats: AggregateStats | None = None) -> np.ndarray:
    """In-process equivalent of one service round: same chunking and same random bits."""
    rows = [np.asarray(r, dtype=np.uint8) for r in rows]
    d = rows[0].size
    if any(r.size != d for r in rows):
        raise ProtocolError("workers sent vectors of different length")
    rng = RngStream(seed, session_id)
    stats = stats if stats is not None else AggregateStats()
    out = np.empty(d, dtype=np.uint8)
    for start in range(0, d, chunk_size):
        stop = min(d, start + chunk_size)
        bits = rng.bits_at(start, stop - start)
        out[start:stop] = aggregate_codes([r[start:stop] for r in rows], bits,
                                          IntegerOps(strict), stats)
    return out


def fixed_point_sum(rows) -> list[int]:
    """Exact integer sums of decoded rows, with Python integers (test oracle)."""
    sums = []
    for column in zip(*[np.asarray(r, dtype=np.uint8).tolist() for r in rows]):
        total = 0
        for code in column:
            if code & 0x80:
                continue
            v = 1 << (code & 0x3F)
            total += -v if code & 0x40 else v
        sums.append(total)
    return sums
