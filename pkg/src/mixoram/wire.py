"""Length-prefixed binary framing and the two transports.

Frame layout, all integers big-endian:

    [len u32][type u8][epoch u64][phase u8][round u16][from u8][payload]

``len`` counts everything after itself.  The in-process loopback transport
delivers the same byte-exact frames as the TCP transport through a single
FIFO queue, which keeps simulations deterministic and lets an observer see
every message for transcripts and cost accounting.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import SizeMismatch

T_INSTRUCTION = 0x01
T_RECORD_BATCH = 0x02
T_ACK = 0x03
T_DB_FETCH = 0x04
T_DB_STORE = 0x05

FRAME_TYPES = (T_INSTRUCTION, T_RECORD_BATCH, T_ACK, T_DB_FETCH, T_DB_STORE)

# Wire phase tags (0 = none / access traffic).
W_PHASE_NONE = 0
W_PHASE_UNWRAP = 1
W_PHASE_ED = 2
W_PHASE_WRAP = 3
W_PHASE_CACHE = 4

CLIENT_SENDER = 0xFE
DB_SENDER = 0xFF

_HEADER = struct.Struct(">BQBHB")  # type, epoch, phase, round, from


def sender_byte(node_id: str) -> int:
    if node_id == "client":
        return CLIENT_SENDER
    if node_id == "db":
        return DB_SENDER
    if node_id.startswith("mix"):
        return int(node_id[3:])
    raise ValueError(f"unknown node id {node_id!r}")


def node_name(sender: int) -> str:
    if sender == CLIENT_SENDER:
        return "client"
    if sender == DB_SENDER:
        return "db"
    return f"mix{sender}"


@dataclass(frozen=True)
class Frame:
    ftype: int
    epoch: int
    phase: int
    round: int
    sender: int
    payload: bytes = b""


def pack_frame(frame: Frame) -> bytes:
    header = _HEADER.pack(frame.ftype, frame.epoch, frame.phase, frame.round, frame.sender)
    body = header + frame.payload
    return struct.pack(">I", len(body)) + body


def unpack_frame(data: bytes) -> Frame:
    if len(data) < 4:
        raise SizeMismatch("short frame")
    (length,) = struct.unpack(">I", data[:4])
    if len(data) != 4 + length or length < _HEADER.size:
        raise SizeMismatch("frame length mismatch")
    ftype, epoch, phase, rnd, sender = _HEADER.unpack(data[4:4 + _HEADER.size])
    if ftype not in FRAME_TYPES:
        raise SizeMismatch(f"unknown frame type {ftype:#x}")
    return Frame(ftype, epoch, phase, rnd, sender, data[4 + _HEADER.size:])


def encode_batch(records: list[tuple[int, bytes]]) -> bytes:
    """count u32, then (slot u64, cell) per record; cells must be same-size."""
    out = [struct.pack(">I", len(records))]
    size = None
    for slot, cell in records:
        if size is None:
            size = len(cell)
        elif len(cell) != size:
            raise SizeMismatch("mixed cell sizes in one batch")
        out.append(struct.pack(">Q", slot))
        out.append(cell)
    return b"".join(out)


def decode_batch(payload: bytes) -> list[tuple[int, bytes]]:
    if len(payload) < 4:
        raise SizeMismatch("short batch")
    (count,) = struct.unpack(">I", payload[:4])
    if count == 0:
        if len(payload) != 4:
            raise SizeMismatch("trailing bytes in empty batch")
        return []
    body = payload[4:]
    if len(body) % count != 0:
        raise SizeMismatch("batch not record-aligned")
    rec = len(body) // count
    cell = rec - 8
    if cell < 0:
        raise SizeMismatch("record shorter than its slot header")
    out = []
    for i in range(count):
        chunk = body[i * rec:(i + 1) * rec]
        (slot,) = struct.unpack(">Q", chunk[:8])
        out.append((slot, chunk[8:]))
    return out


def encode_fetch(slots: list[int]) -> bytes:
    return struct.pack(">I", len(slots)) + b"".join(struct.pack(">Q", s) for s in slots)


def decode_fetch(payload: bytes) -> list[int]:
    (count,) = struct.unpack(">I", payload[:4])
    if len(payload) != 4 + 8 * count:
        raise SizeMismatch("fetch length mismatch")
    return [struct.unpack(">Q", payload[4 + 8 * i:12 + 8 * i])[0] for i in range(count)]


def put_bytes(buf: list, data: bytes):
    buf.append(struct.pack(">H", len(data)))
    buf.append(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise SizeMismatch("truncated payload")
        out = self.data[self.pos: self.pos + count]
        self.pos += count
        return out

    def take_bytes(self) -> bytes:
        (length,) = struct.unpack(">H", self.take(2))
        return self.take(length)

    def done(self):
        if self.pos != len(self.data):
            raise SizeMismatch("trailing bytes")


class LoopbackNet:
    """Deterministic single-queue in-process transport.

    Frames are delivered strictly in send order by :meth:`pump`.  Handlers
    may send more frames while handling; those are appended to the queue.
    """

    def __init__(self):
        self._handlers: dict[str, object] = {}
        self._queue: list[tuple[str, str, bytes]] = []
        self.observers: list = []

    def register(self, node_id: str, handler):
        self._handlers[node_id] = handler

    def send(self, dst: str, frame: Frame):
        self._queue.append((node_name(frame.sender), dst, pack_frame(frame)))

    def pump(self, limit: int = 10 ** 7) -> int:
        """Deliver queued frames until quiescent; returns frames delivered."""
        delivered = 0
        while self._queue:
            src, dst, raw = self._queue.pop(0)
            frame = unpack_frame(raw)
            for obs in self.observers:
                obs(src, dst, frame)
            self._handlers[dst](frame)
            delivered += 1
            if delivered > limit:
                raise RuntimeError("message pump did not quiesce")
        return delivered


def send_frame(sock: socket.socket, frame: Frame):
    sock.sendall(pack_frame(frame))


def recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    got = 0
    while got < count:
        part = sock.recv(count - got)
        if not part:
            raise EOFError("peer closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Frame:
    (length,) = struct.unpack(">I", recv_exact(sock, 4))
    body = recv_exact(sock, length)
    return unpack_frame(struct.pack(">I", length) + body)


class TcpNet:
    """One node's endpoint: a listener thread plus per-frame connections.

    Presents the same ``send``/handler interface as :class:`LoopbackNet`;
    inbound frames are handed to the registered handler on the listener
    thread, serialised by a lock so node state machines stay
    single-threaded.
    """

    def __init__(self, node_id: str, listen: tuple[str, int], peers: dict[str, tuple[str, int]]):
        self.node_id = node_id
        self.peers = dict(peers)
        self._handler = None
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(listen)
        self._sock.listen(64)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def register(self, node_id: str, handler):
        if node_id != self.node_id:
            raise ValueError("a TcpNet endpoint hosts exactly its own node")
        self._handler = handler
        self._thread.start()

    def send(self, dst: str, frame: Frame):
        host, port = self.peers[dst]
        with socket.create_connection((host, port), timeout=30) as sock:
            send_frame(sock, frame)

    def _serve(self):
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                try:
                    while True:
                        frame = recv_frame(conn)
                        with self._lock:
                            self._handler(frame)
                except (EOFError, OSError):
                    pass

    def close(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread.is_alive():
            self._thread.join(timeout=2)
