"""The ORAM server: database and cache arrays plus the access transcript.

Only whole-cell reads and writes are exposed, and every call lands in the
append-only :class:`AccessLog`, which doubles as the adversary's view of
the storage interface in experiments.  Cells are opaque fixed-size byte
strings; size uniformity is enforced on every write.
"""

from __future__ import annotations

import struct
import threading
from typing import NamedTuple

from .errors import OutOfRange, SizeMismatch

SNAPSHOT_MAGIC = b"MXOR"
SNAPSHOT_VERSION = 1


class LogEntry(NamedTuple):
    op: str          # "read" | "write"
    array: str       # "db" | "cache"
    slot: int
    actor: str
    epoch: int
    round: int


class AccessLog:
    """Append-only, internally synchronised operation log."""

    def __init__(self):
        self._entries: list[LogEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: LogEntry):
        with self._lock:
            self._entries.append(entry)

    def export(self) -> tuple[LogEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class StorageServer:
    """n-cell database plus s-cell cache with read/write-only access."""

    def __init__(self, n: int, cell_bytes: int, s: int, payload_bits: int = 0):
        if n < 1 or s < 1:
            raise SizeMismatch("need n >= 1 and s >= 1")
        self.n = n
        self.s = s
        self.cell_bytes = cell_bytes
        self.payload_bits = payload_bits or 8 * cell_bytes
        self.epoch = 0
        self.db = [bytes(cell_bytes) for _ in range(n)]
        self.cache = [bytes(cell_bytes) for _ in range(s)]
        self.cache_fill = 0
        self._cache_used = [False] * s
        self.log = AccessLog()

    # -- db array ----------------------------------------------------------

    def db_read(self, slot: int, actor: str = "client", round: int = 0) -> bytes:
        if not 0 <= slot < self.n:
            raise OutOfRange(f"db slot {slot}")
        self.log.append(LogEntry("read", "db", slot, actor, self.epoch, round))
        return self.db[slot]

    def db_write(self, slot: int, cell: bytes, actor: str = "client", round: int = 0):
        if not 0 <= slot < self.n:
            raise OutOfRange(f"db slot {slot}")
        if len(cell) != self.cell_bytes:
            raise SizeMismatch(f"cell is {len(cell)} bytes, want {self.cell_bytes}")
        self.log.append(LogEntry("write", "db", slot, actor, self.epoch, round))
        self.db[slot] = bytes(cell)

    # -- cache array ---------------------------------------------------------

    def cache_read(self, slot: int, actor: str = "client", round: int = 0) -> bytes:
        if not 0 <= slot < self.s:
            raise OutOfRange(f"cache slot {slot}")
        self.log.append(LogEntry("read", "cache", slot, actor, self.epoch, round))
        return self.cache[slot]

    def cache_write(self, slot: int, cell: bytes, actor: str = "client", round: int = 0):
        if not 0 <= slot < self.s:
            raise OutOfRange(f"cache slot {slot}")
        if len(cell) != self.cell_bytes:
            raise SizeMismatch(f"cell is {len(cell)} bytes, want {self.cell_bytes}")
        self.log.append(LogEntry("write", "cache", slot, actor, self.epoch, round))
        if not self._cache_used[slot]:
            self._cache_used[slot] = True
            self.cache_fill += 1
        self.cache[slot] = bytes(cell)

    def cache_flush(self):
        """Reset the cache to empty at the end of an eviction."""
        self.cache = [bytes(self.cell_bytes) for _ in range(self.s)]
        self._cache_used = [False] * self.s
        self.cache_fill = 0

    def export_view(self) -> tuple[LogEntry, ...]:
        return self.log.export()


def save_snapshot(server: StorageServer, path: str):
    """Single flat file: MXOR header then the raw cells at fixed offsets."""
    header = SNAPSHOT_MAGIC + struct.pack(
        ">HQIIQ", SNAPSHOT_VERSION, server.n, server.payload_bits, server.s, server.epoch)
    with open(path, "wb") as fh:
        fh.write(header)
        for cell in server.db:
            fh.write(cell)


def load_snapshot(path: str) -> StorageServer:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise SizeMismatch("not a database snapshot")
        version, n, payload_bits, s, epoch = struct.unpack(">HQIIQ", fh.read(26))
        if version != SNAPSHOT_VERSION:
            raise SizeMismatch(f"snapshot version {version} unsupported")
        rest = fh.read()
    if len(rest) % n != 0:
        raise SizeMismatch("snapshot cell area is not n-aligned")
    cell_bytes = len(rest) // n
    server = StorageServer(n=n, cell_bytes=cell_bytes, s=s, payload_bits=payload_bits)
    server.epoch = epoch
    server.db = [rest[i * cell_bytes:(i + 1) * cell_bytes] for i in range(n)]
    return server
