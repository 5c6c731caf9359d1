"""Per-half file-descriptor bookkeeping.

Descriptors are tagged upper or lower and the two sets are kept disjoint
by construction: lower (runtime) descriptors come only from a reserved
band, upper (application) descriptors only from outside it. That removes
the restart failure mode where a freshly built runtime grabs a number the
application had open before the checkpoint.
"""

from dataclasses import dataclass

from .errors import BandExhausted, FdConflict, FdDomainError
from .regions import Half

RESERVED_LO = 900
RESERVED_HI = 1000

MAX_DESC_BYTES = 128


@dataclass
class FdEntry:
    fd: int
    half: Half
    description: str


class FdRegistry:
    def __init__(self, reserved_lo=RESERVED_LO, reserved_hi=RESERVED_HI):
        if not 0 <= reserved_lo < reserved_hi:
            raise ValueError("invalid reserved band")
        self.reserved_lo = reserved_lo
        self.reserved_hi = reserved_hi
        self._entries = {}

    def _in_band(self, fd):
        return self.reserved_lo <= fd < self.reserved_hi

    def allocate(self, half, description):
        """Lowest free descriptor in the half's domain: the reserved band
        for LOWER, everything outside it for UPPER."""
        if half is Half.LOWER:
            for fd in range(self.reserved_lo, self.reserved_hi):
                if fd not in self._entries:
                    return self._register(fd, half, description)
            raise BandExhausted(
                f"reserved band [{self.reserved_lo},{self.reserved_hi}) is full")
        fd = 0
        while True:
            if fd == self.reserved_lo:
                fd = self.reserved_hi
            if fd not in self._entries:
                return self._register(fd, half, description)
            fd += 1

    def reserve_exact(self, fd, half, description):
        """Claim a specific descriptor number; used at restart to put
        application descriptors back where the image recorded them."""
        return self._register(fd, half, description)

    def _register(self, fd, half, description):
        if fd in self._entries:
            other = self._entries[fd]
            raise FdConflict(
                f"fd {fd} already registered to {other.half.name} "
                f"({other.description!r})")
        if half is Half.LOWER and not self._in_band(fd):
            raise FdDomainError(
                f"lower fd {fd} outside reserved band "
                f"[{self.reserved_lo},{self.reserved_hi})")
        if half is Half.UPPER and self._in_band(fd):
            raise FdDomainError(
                f"upper fd {fd} inside reserved band "
                f"[{self.reserved_lo},{self.reserved_hi})")
        if len(description.encode("utf-8")) > MAX_DESC_BYTES:
            raise ValueError("fd description too long")
        entry = FdEntry(fd, half, description)
        self._entries[fd] = entry
        return fd

    def release(self, fd):
        if fd not in self._entries:
            raise FdConflict(f"fd {fd} not registered")
        del self._entries[fd]

    def entries(self):
        return [self._entries[fd] for fd in sorted(self._entries)]

    def fds(self, half):
        return {fd for fd, e in self._entries.items() if e.half is half}
