"""Small shared record types used across the runtime, image, and coordinator."""

import enum
from dataclasses import dataclass, field


@dataclass(frozen=True)
class RankIdentity:
    """(rank number, node name, unique process id): the tuple every log
    line about a rank carries."""
    rank: int
    node: str
    uid: int

    def __str__(self):
        return f"rank={self.rank} node={self.node} uid={self.uid}"


class Opcode(enum.IntEnum):
    INIT = 1
    COMM_SPLIT = 2
    FINALIZE = 3


@dataclass(frozen=True)
class CallLogEntry:
    """One state-mutating runtime call; replaying the log on a fresh
    runtime reproduces the communicator table exactly."""
    seq: int
    opcode: Opcode
    args: tuple  # exactly 4 integers
    result: int


@dataclass(frozen=True)
class PendingMessage:
    """A message captured by the drain: either arrived but not yet consumed
    (dest == own rank) or issued during the freeze but never transmitted
    (source == own rank)."""
    source: int
    dest: int
    comm: int
    tag: int
    payload: bytes


@dataclass
class DrainLedger:
    """Per-rank transfer counters; the global quiescence condition is that
    sent and received totals balance with no pending operations.

    Byte counts cover payload only (framing headers excluded). Message
    counts exist because zero-length messages move no payload bytes yet
    still occupy the transport; without them a zero-length message in
    flight would be invisible to the balance check.
    """
    bytes_sent: int = 0
    bytes_received: int = 0
    pending_ops: int = 0
    msgs_sent: int = 0
    msgs_received: int = 0

    def copy(self):
        return DrainLedger(self.bytes_sent, self.bytes_received,
                           self.pending_ops, self.msgs_sent, self.msgs_received)


@dataclass(frozen=True)
class DrainReport:
    """One drain-tick sample from a rank."""
    rank: int
    epoch: int
    bytes_sent: int
    bytes_received: int
    pending_ops: int
    msgs_sent: int = 0
    msgs_received: int = 0


@dataclass(frozen=True)
class ImageReceipt:
    """Returned by an image write: payload size on disk and wall time."""
    bytes: int
    duration: float

    @property
    def ms(self):
        # ceil to whole milliseconds so any real write reports > 0
        return max(1, int(self.duration * 1000 + 0.999)) if self.duration > 0 else 0


@dataclass
class Communicator:
    """Process group handle. The world communicator has id 0; every other
    communicator derives from a logged split."""
    id: int
    members: list
    parent: int | None = None
    color: int = 0
    key: int = 0

    def __post_init__(self):
        self.members = sorted(self.members)

    def copy(self):
        return Communicator(self.id, list(self.members), self.parent,
                            self.color, self.key)


@dataclass(frozen=True)
class CompletionInfo:
    """Result of waiting on an operation token; receives carry the matched
    source, tag, and payload."""
    kind: str  # "send" | "recv"
    peer: int
    tag: int
    payload: bytes | None = field(repr=False, default=None)
