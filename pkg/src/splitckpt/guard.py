"""Mutation guard with an explicit CHANGES_PENDING flag.

Every shared structure in the framework is wrapped in a GuardedCell. The
cell acts as a lock between threads, but re-entry from the thread that
already holds it is reported as a fatal bug (GuardViolation) instead of
deadlocking: observing changes_pending already set by your own context
means some code path forgot it was inside a mutation.
"""

import threading
from contextlib import contextmanager

from .errors import GuardViolation


class GuardedCell:
    __slots__ = ("_value", "_lock", "_owner", "_pending", "name")

    def __init__(self, value, name="cell"):
        self._value = value
        self._lock = threading.Lock()
        self._owner = None
        self._pending = False
        self.name = name

    @property
    def changes_pending(self):
        return self._pending

    @contextmanager
    def hold(self):
        """Acquire the guard, yield the wrapped value, release on exit."""
        me = threading.get_ident()
        # _owner can only equal `me` if this thread set it, so the unlocked
        # read is safe for the re-entry check.
        if self._owner == me:
            raise GuardViolation(
                f"CHANGES_PENDING already set on {self.name}: "
                f"re-entrant mutation from the same context")
        self._lock.acquire()
        self._owner = me
        self._pending = True
        try:
            yield self._value
        finally:
            self._pending = False
            self._owner = None
            self._lock.release()
