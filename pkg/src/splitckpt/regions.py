"""Simulated 64-bit address space with an annotated, tagged region table.

The registry is the home of the upper/lower split: application (upper)
regions live anywhere outside a fixed lower arena, runtime (lower)
regions live only inside it, and every mutation runs a dynamic overlap
check before committing. Fixed reservations refuse to replace existing
mappings, so a restart that would land an application region on top of
runtime state fails loudly instead of corrupting memory.

Addresses and lengths are page-granular (4096 bytes). Upper regions carry
a mutable payload of exactly their length; lower regions carry none,
because runtime state is rebuilt rather than checkpointed.
"""

import bisect
import enum
from dataclasses import dataclass, field

from .errors import (
    AlignmentError,
    ArenaExhausted,
    ArenaViolation,
    OverlapError,
    UnknownRegion,
)
from .guard import GuardedCell

PAGE = 4096
ADDR_LIMIT = 1 << 64

# Lower arena defaults: a 1 GiB window at 2^40. Keeping runtime allocations
# structurally fenced off makes upper/lower overlap impossible by
# construction; the dynamic check below stays on as defense in depth.
LOWER_BASE = 1 << 40
LOWER_SIZE = 1 << 30

# Non-fixed upper allocations start here so address zero stays unused.
UPPER_HINT = 0x10000

MAX_LABEL_BYTES = 64


class Half(enum.IntEnum):
    UPPER = 1
    LOWER = 2


@dataclass
class MemoryRegion:
    start: int
    length: int
    tag: Half
    label: str
    # bytearray of exactly `length` bytes for UPPER, None for LOWER
    payload: bytearray | None = field(repr=False, default=None)

    @property
    def end(self):
        return self.start + self.length

    def overlaps(self, start, length):
        return self.start < start + length and start < self.end


def encode_label(label):
    """Validate and encode a region label (UTF-8, <= 64 bytes, no NUL)."""
    raw = label.encode("utf-8")
    if len(raw) > MAX_LABEL_BYTES:
        raise ValueError(f"label {label!r} exceeds {MAX_LABEL_BYTES} bytes")
    if b"\x00" in raw:
        raise ValueError("label must not contain NUL bytes")
    return raw


class AddressSpace:
    """Overlap-free set of tagged regions plus the lower-arena bounds.

    Single writer: mutations are serialized by the caller; each mutating
    entry point asserts the CHANGES_PENDING guard and fails fast on
    re-entry.
    """

    def __init__(self, lower_base=LOWER_BASE, lower_size=LOWER_SIZE,
                 upper_hint=UPPER_HINT):
        if lower_base % PAGE or lower_size % PAGE or lower_size <= 0:
            raise AlignmentError("lower arena must be page-aligned and non-empty")
        self.lower_base = lower_base
        self.lower_size = lower_size
        self.next_hint = upper_hint
        # sorted list of starts plus start -> region map, kept in lockstep
        self._cell = GuardedCell({"starts": [], "by_start": {}}, name="AddressSpace")

    @property
    def lower_end(self):
        return self.lower_base + self.lower_size

    # -- queries ---------------------------------------------------------

    def regions(self):
        """All live regions sorted by start."""
        with self._cell.hold() as st:
            return [st["by_start"][s] for s in st["starts"]]

    def __len__(self):
        with self._cell.hold() as st:
            return len(st["starts"])

    def get(self, start):
        with self._cell.hold() as st:
            return st["by_start"].get(start)

    def snapshot_upper(self):
        """Upper-tagged regions with copied payloads, sorted by start.

        Lower regions are excluded: only the upper half is checkpointed.
        """
        out = []
        with self._cell.hold() as st:
            for s in st["starts"]:
                r = st["by_start"][s]
                if r.tag is Half.UPPER:
                    out.append(MemoryRegion(r.start, r.length, r.tag, r.label,
                                            bytearray(r.payload)))
        return out

    def dump_table(self):
        """Debug dump: one `START LENGTH TAG LABEL` line per region, hex,
        sorted by start."""
        lines = []
        for r in self.regions():
            lines.append(f"{r.start:016x} {r.length:016x} "
                         f"{r.tag.name} {r.label}")
        return "\n".join(lines)

    # -- mutations -------------------------------------------------------

    def reserve_fixed(self, start, length, tag, label):
        """Insert a region at exactly `start`, or fail without mutating.

        Mirrors a no-replace fixed mapping: on any conflict the registry is
        untouched and the error names every conflicting region.
        """
        self._check_aligned(start, length)
        self._check_arena(start, length, tag)
        encode_label(label)
        with self._cell.hold() as st:
            conflicts = self._conflicts(st, start, length)
            if conflicts:
                ranges = ", ".join(
                    f"[{c.start:#x},{c.end:#x}) {c.tag.name} {c.label!r}"
                    for c in conflicts)
                raise OverlapError(
                    f"range [{start:#x},{start + length:#x}) overlaps: {ranges}",
                    conflicts)
            region = self._insert(st, start, length, tag, label)
        return region

    def reserve_any(self, length, tag, label):
        """First-fit allocation at the lowest admissible address in the
        tag's arena; deterministic given the registry state."""
        self._check_aligned(0, length)
        encode_label(label)
        with self._cell.hold() as st:
            start = self._find_gap(st, length, tag)
            if start is None:
                raise ArenaExhausted(
                    f"no {length:#x}-byte gap available for {tag.name}")
            return self._insert(st, start, length, tag, label)

    def release(self, start):
        """Remove the region that begins at `start`."""
        with self._cell.hold() as st:
            if start not in st["by_start"]:
                raise UnknownRegion(f"no region starts at {start:#x}")
            del st["by_start"][start]
            idx = bisect.bisect_left(st["starts"], start)
            st["starts"].pop(idx)

    # -- internals -------------------------------------------------------

    @staticmethod
    def _check_aligned(start, length):
        if start % PAGE:
            raise AlignmentError(f"start {start:#x} not page-aligned")
        if length <= 0 or length % PAGE:
            raise AlignmentError(
                f"length {length:#x} must be a positive multiple of {PAGE:#x}")

    def _check_arena(self, start, length, tag):
        end = start + length
        if end > ADDR_LIMIT:
            raise ArenaViolation(f"range [{start:#x},{end:#x}) beyond 64-bit space")
        inside = start >= self.lower_base and end <= self.lower_end
        touches = start < self.lower_end and end > self.lower_base
        if tag is Half.LOWER and not inside:
            raise ArenaViolation(
                f"lower region [{start:#x},{end:#x}) outside arena "
                f"[{self.lower_base:#x},{self.lower_end:#x})")
        if tag is Half.UPPER and touches:
            raise ArenaViolation(
                f"upper region [{start:#x},{end:#x}) intersects lower arena "
                f"[{self.lower_base:#x},{self.lower_end:#x})")

    @staticmethod
    def _conflicts(st, start, length):
        """Live regions intersecting [start, start+length), by neighbor
        check against the sorted start list."""
        starts = st["starts"]
        end = start + length
        out = []
        idx = bisect.bisect_left(starts, start)
        # predecessor can reach into the candidate range
        if idx > 0:
            prev = st["by_start"][starts[idx - 1]]
            if prev.overlaps(start, length):
                out.append(prev)
        for j in range(idx, len(starts)):
            r = st["by_start"][starts[j]]
            if r.start >= end:
                break
            if r.overlaps(start, length):
                out.append(r)
        return out

    def _insert(self, st, start, length, tag, label):
        payload = bytearray(length) if tag is Half.UPPER else None
        region = MemoryRegion(start, length, tag, label, payload)
        st["by_start"][start] = region
        bisect.insort(st["starts"], start)
        return region

    def _find_gap(self, st, length, tag):
        if tag is Half.LOWER:
            lo, hi = self.lower_base, self.lower_end
        else:
            lo, hi = self.next_hint, ADDR_LIMIT
        cursor = lo
        starts = st["starts"]
        idx = bisect.bisect_left(starts, cursor)
        # predecessor may extend past the cursor
        if idx > 0:
            prev = st["by_start"][starts[idx - 1]]
            if prev.end > cursor:
                cursor = prev.end
        while True:
            if tag is Half.UPPER and cursor < self.lower_end and \
                    cursor + length > self.lower_base:
                # skip over the lower arena
                cursor = self.lower_end
                idx = bisect.bisect_left(starts, cursor)
                if idx > 0:
                    prev = st["by_start"][starts[idx - 1]]
                    if prev.end > cursor:
                        cursor = prev.end
                continue
            if cursor + length > hi:
                return None
            if idx >= len(starts):
                return cursor
            nxt = st["by_start"][starts[idx]]
            if cursor + length <= nxt.start:
                return cursor
            cursor = nxt.end
            idx += 1
