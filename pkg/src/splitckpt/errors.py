"""Exception hierarchy for the splitckpt framework."""


class SplitCkptError(Exception):
    """Base class for all framework errors."""


# --- address-space / region registry ---

class RegionError(SplitCkptError):
    pass


class AlignmentError(RegionError):
    """Start or length is not a positive multiple of the page size."""


class ArenaViolation(RegionError):
    """Region placement contradicts its half tag (upper inside the lower
    arena, or lower outside it)."""


class OverlapError(RegionError):
    """Requested range intersects live regions; carries the conflict list."""

    def __init__(self, message, conflicts=()):
        super().__init__(message)
        self.conflicts = list(conflicts)


class ArenaExhausted(RegionError):
    """No free gap of the requested size exists in the arena."""


class UnknownRegion(RegionError):
    pass


# --- guarded structures ---

class GuardViolation(SplitCkptError):
    """CHANGES_PENDING was already set by the current context: re-entrant
    mutation attempt, a fatal bug rather than a deadlock."""


# --- file descriptor registry ---

class FdError(SplitCkptError):
    pass


class BandExhausted(FdError):
    """No free descriptor left in the reserved lower band."""


class FdConflict(FdError):
    """Descriptor number already registered."""


class FdDomainError(FdError):
    """Descriptor number incompatible with its half (lower outside the
    reserved band, or upper inside it)."""


# --- message-passing runtime ---

class MessagingError(SplitCkptError):
    pass


class InvalidRank(MessagingError):
    pass


class InvalidCommunicator(MessagingError):
    pass


class UnknownToken(MessagingError):
    pass


class LengthMismatch(MessagingError):
    pass


class PendingOperations(MessagingError):
    pass


class CoordinatorUnreachable(MessagingError):
    pass


class CoordinatorLost(MessagingError):
    pass


class PeerTimeout(MessagingError):
    pass


class RuntimeClosed(MessagingError):
    """Runtime was force-closed while operations were outstanding."""


class CheckpointProtocolError(MessagingError):
    """Cooperative checkpointing contract broken by the application."""


# --- checkpoint image ---

class ImageCorrupt(SplitCkptError):
    pass


class BadMagic(ImageCorrupt):
    pass


class VersionMismatch(ImageCorrupt):
    pass


class CrcMismatch(ImageCorrupt):
    def __init__(self, section):
        super().__init__(f"CRC mismatch in section {section}")
        self.section = section


class Truncated(ImageCorrupt):
    pass


# --- storage backends ---

class StorageError(SplitCkptError):
    pass


class InsufficientSpace(StorageError):
    def __init__(self, required, available):
        super().__init__(
            f"insufficient storage: need {required} bytes, {available} available")
        self.required = required
        self.available = available


class ImageIoError(StorageError):
    """I/O failure while writing an image; the temporary file is removed."""


# --- restart / manifests ---

class ReplayMismatch(SplitCkptError):
    pass


class ManifestError(SplitCkptError):
    pass


class MissingRank(ManifestError):
    def __init__(self, rank):
        super().__init__(f"manifest is missing rank {rank}")
        self.rank = rank


class DuplicateRank(ManifestError):
    def __init__(self, rank):
        super().__init__(f"manifest lists rank {rank} twice")
        self.rank = rank


class MalformedLine(ManifestError):
    pass


# --- coordinator ---

class CoordinatorError(SplitCkptError):
    pass


class BindFailure(CoordinatorError):
    pass


class CkptAborted(CoordinatorError):
    pass


class CkptTimeout(CoordinatorError):
    pass


class RegistrationRejected(CoordinatorError):
    pass


# --- launcher ---

class LaunchError(SplitCkptError):
    pass


class SpawnFailure(LaunchError):
    pass


class ArgvBudgetExceeded(LaunchError):
    def __init__(self, length, budget):
        super().__init__(
            f"child command line would be {length} bytes, over the {budget} byte "
            f"budget; pass bulky inputs through a file (use --args-file)")
        self.length = length
        self.budget = budget
