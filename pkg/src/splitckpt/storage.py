"""Directory storage backends for checkpoint images.

Three kinds model the fast/slow/constrained tiers an image might land on:

    fast         plain directory, unthrottled
    slow[:RATE]  directory behind an aggregate byte-rate throttle
                 (default 50 MiB/s shared by all concurrent writers)
    quota:BYTES  directory with a hard capacity; writes that would not
                 fit are rejected before the first byte

Backend spec strings use exactly those forms; a trailing
",fault=RANK:NBYTES" injects an I/O failure after NBYTES for the given
rank (testing hook). All writes are atomic: data goes to `<path>.tmp`,
is flushed, then renamed over the final name, and the tmp file is
removed on any failure, so a partial image never appears under the
final name.

The slow throttle is shared across processes through a lock file in the
backend root, so aggregate throughput matches BYTES / RATE no matter how
many ranks write concurrently.
"""

import fcntl
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import ImageIoError, InsufficientSpace

SLOW_DEFAULT_RATE = 50 * 1024 * 1024  # bytes per second
WRITE_CHUNK = 256 * 1024

_THROTTLE_FILE = ".throttle"


def _parse_size(text):
    text = text.strip()
    mult = 1
    suffixes = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    if text and text[-1].lower() in suffixes:
        mult = suffixes[text[-1].lower()]
        text = text[:-1]
    return int(text) * mult


@dataclass
class StorageBackend:
    kind: str                     # "fast" | "slow" | "quota"
    root: Path
    throttle_bytes_per_sec: int | None = None
    capacity_bytes: int | None = None
    fault_rank: int | None = None
    fault_after_bytes: int | None = None

    @classmethod
    def parse(cls, spec, root):
        """Build a backend from a spec string such as "fast", "slow",
        "slow:10m", "quota:1024", or "fast,fault=2:8192"."""
        root = Path(root)
        fault_rank = fault_after = None
        parts = spec.split(",")
        for extra in parts[1:]:
            key, _, val = extra.partition("=")
            if key != "fault":
                raise ValueError(f"unknown backend option {extra!r}")
            rank_s, _, after_s = val.partition(":")
            fault_rank = int(rank_s)
            fault_after = _parse_size(after_s)
        head, _, arg = parts[0].partition(":")
        if head == "fast":
            return cls("fast", root, fault_rank=fault_rank,
                       fault_after_bytes=fault_after)
        if head == "slow":
            rate = _parse_size(arg) if arg else SLOW_DEFAULT_RATE
            if rate <= 0:
                raise ValueError("throttle rate must be positive")
            return cls("slow", root, throttle_bytes_per_sec=rate,
                       fault_rank=fault_rank, fault_after_bytes=fault_after)
        if head == "quota":
            if not arg:
                raise ValueError("quota backend needs a capacity, e.g. quota:4096")
            return cls("quota", root, capacity_bytes=_parse_size(arg),
                       fault_rank=fault_rank, fault_after_bytes=fault_after)
        raise ValueError(f"unknown backend kind {head!r}")

    def spec(self):
        base = self.kind
        if self.kind == "slow":
            base = f"slow:{self.throttle_bytes_per_sec}"
        elif self.kind == "quota":
            base = f"quota:{self.capacity_bytes}"
        if self.fault_rank is not None:
            base += f",fault={self.fault_rank}:{self.fault_after_bytes}"
        return base

    # -- capacity ---------------------------------------------------------

    def usage(self):
        total = 0
        if self.root.exists():
            for p in self.root.rglob("*"):
                if p.is_file() and not p.name.startswith(_THROTTLE_FILE):
                    total += p.stat().st_size
        return total

    def available(self):
        if self.kind == "quota":
            return max(0, self.capacity_bytes - self.usage())
        st = os.statvfs(self.root)
        return st.f_bavail * st.f_frsize

    def preflight(self, nbytes):
        """Reject a write that cannot fit, before any byte is written."""
        avail = self.available()
        if nbytes > avail:
            raise InsufficientSpace(nbytes, avail)

    # -- writing ----------------------------------------------------------

    def write_atomic(self, path, data, writer_rank=None):
        """Write `data` to `path` via tmp-then-rename; returns wall seconds.

        Raises InsufficientSpace before writing anything if the backend
        cannot hold the data, and ImageIoError (tmp removed) on mid-write
        failure.
        """
        path = Path(path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.preflight(len(data))
        fault_at = None
        if self.fault_rank is not None and writer_rank == self.fault_rank:
            fault_at = self.fault_after_bytes
        tmp = path.with_name(path.name + ".tmp")
        start = time.monotonic()
        try:
            with open(tmp, "wb") as fh:
                written = 0
                view = memoryview(data)
                while written < len(data):
                    chunk = view[written:written + WRITE_CHUNK]
                    if self.kind == "slow":
                        self._admit(len(chunk))
                    if fault_at is not None and written + len(chunk) > fault_at:
                        raise OSError("injected I/O fault")
                    fh.write(chunk)
                    written += len(chunk)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            try:
                tmp.unlink(missing_ok=True)
            except OSError:
                pass
            raise ImageIoError(f"writing {path}: {exc}") from exc
        return time.monotonic() - start

    def _admit(self, nbytes):
        """Reserve a slot in the shared token bucket and sleep until it
        ends; serializing admissions caps aggregate throughput at the
        configured rate across every concurrent writer."""
        rate = self.throttle_bytes_per_sec
        state = self.root / _THROTTLE_FILE
        fd = os.open(state, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            raw = os.pread(fd, 8, 0)
            deadline = struct.unpack("<d", raw)[0] if len(raw) == 8 else 0.0
            now = time.monotonic()
            slot_start = max(now, deadline)
            slot_end = slot_start + nbytes / rate
            os.pwrite(fd, struct.pack("<d", slot_end), 0)
            fcntl.flock(fd, fcntl.LOCK_UN)
        finally:
            os.close(fd)
        delay = slot_end - time.monotonic()
        if delay > 0:
            time.sleep(delay)
