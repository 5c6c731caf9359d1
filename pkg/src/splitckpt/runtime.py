"""The lower half: a mini message-passing runtime over local stream sockets.

Each rank runs one application thread plus one progress thread. Shared
runtime state (ledger, token table, call log, match queues) is mutated
only under a single CHANGES_PENDING guard; the application thread blocks
on per-operation events, never on sockets.

Semantics in brief:

* Point-to-point matching is exact on (source, communicator, tag) with
  FIFO order per channel; no wildcards.
* Blocking send/recv are literally isend/irecv followed by wait.
* A send completes, and its payload bytes are counted, when the frame
  has been handed to the transport (fully written to the socket);
  received bytes are counted when the complete frame arrives off the
  socket, whether or not a receive is posted for it yet.
* Collectives (barrier, allreduce, split exchange) run over the same
  logged point-to-point traffic, so the drain's balance condition covers
  them with no special cases.
* Checkpoints are cooperative: applications call ckpt_poll() at loop
  boundaries. Each poll runs a tiny max-exchange over the world so every
  rank observes a pending checkpoint request at the same poll index and
  parks there together; the coordinator broadcast alone cannot guarantee
  that, because one rank can race past the poll where another already
  stopped and then block on a message the stopped rank will never send.
* While a rank drains, newly issued sends freeze: the payload is queued
  locally, nothing is counted as sent, and the operation completes only
  after the checkpoint epoch ends (transmitted on resume, or re-sent
  from the image after a restart).
"""

import logging
import os
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

from . import wire
from .errors import (
    CheckpointProtocolError,
    CoordinatorUnreachable,
    InvalidCommunicator,
    InvalidRank,
    LengthMismatch,
    PeerTimeout,
    PendingOperations,
    RegistrationRejected,
    RuntimeClosed,
    UnknownToken,
)
from .fds import FdRegistry
from .guard import GuardedCell
from .image import CheckpointImage, serialize_image
from .netutil import connect, make_listener
from .records import (
    CallLogEntry,
    Communicator,
    CompletionInfo,
    DrainLedger,
    ImageReceipt,
    Opcode,
    PendingMessage,
    RankIdentity,
)
from .regions import AddressSpace, Half, MemoryRegion, PAGE
from .storage import StorageBackend
from .transport import Transport, build_mesh

log = logging.getLogger("splitckpt.runtime")

WORLD_COMM = 0

# tags at and above this value belong to the runtime's own collectives
SYS_TAG_BASE = 0xFFFF0000
_TAG_POLL = SYS_TAG_BASE + 0x0000
_TAG_BARRIER = SYS_TAG_BASE + 0x0100
_TAG_GATHER = SYS_TAG_BASE + 0x0200
_TAG_BCAST = SYS_TAG_BASE + 0x0300
_TAG_SPLIT = SYS_TAG_BASE + 0x0400
_TAG_SPLIT_REPLY = SYS_TAG_BASE + 0x0500

DEFAULT_CONNECT_TIMEOUT = 10.0
DEFAULT_PEER_TIMEOUT = 10.0
DEFAULT_DRAIN_TICK = 0.05


class CheckpointStop(Exception):
    """Raised out of ckpt_poll when the world was launched to stop after a
    successful checkpoint."""


@dataclass
class RuntimeConfig:
    world_size: int
    rank: int
    coordinator: str
    listen_endpoint: str
    node: str = ""
    proposed_uid: int = 0
    restart_epoch: int = 0   # nonzero registers as a restarting rank
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    peer_timeout: float = DEFAULT_PEER_TIMEOUT
    drain_tick: float = DEFAULT_DRAIN_TICK
    stop_after_ckpt: bool = False

    def __post_init__(self):
        if not 0 <= self.rank < self.world_size:
            raise InvalidRank(f"rank {self.rank} not in [0,{self.world_size})")
        if not self.node:
            self.node = socket.gethostname()


class _Op:
    __slots__ = ("token", "kind", "peer", "comm", "tag", "payload", "frozen",
                 "event", "info", "error")

    def __init__(self, token, kind, peer, comm, tag, payload=None):
        self.token = token
        self.kind = kind
        self.peer = peer
        self.comm = comm
        self.tag = tag
        self.payload = payload
        self.frozen = False
        self.event = threading.Event()
        self.info = None
        self.error = None

    def complete(self, info):
        self.info = info
        self.event.set()

    def fail(self, exc):
        self.error = exc
        self.event.set()


class _Ckpt:
    """Per-rank checkpoint/drain state."""

    def __init__(self):
        self.requested_epoch = 0
        self.draining = False
        self.epoch = 0
        self.freeze = False
        self.reporting = False
        self.next_report = 0.0
        self.quiesce_evt = threading.Event()
        self.write_evt = threading.Event()
        self.resume_evt = threading.Event()
        self.write_path = None
        self.write_backend = None
        self.abort_reason = None

    def arm(self, epoch):
        self.draining = True
        self.epoch = epoch
        self.freeze = True
        self.reporting = True
        self.next_report = 0.0
        self.quiesce_evt.clear()
        self.write_evt.clear()
        self.resume_evt.clear()
        self.write_path = None
        self.write_backend = None
        self.abort_reason = None

    def disarm(self):
        self.draining = False
        self.freeze = False
        self.reporting = False
        self.requested_epoch = 0


class _Core:
    """Everything the CHANGES_PENDING guard protects."""

    def __init__(self):
        self.ledger = DrainLedger()
        self.tokens = {}
        self.next_token = 1
        self.unexpected = {}   # (src, comm, tag) -> deque[bytes]
        self.posted = {}       # (src, comm, tag) -> deque[_Op]
        self.frozen = []       # _Op sends queued during a drain freeze
        self.resend = []       # PendingMessage to transmit once restart resumes
        self.comms = {}
        self.next_comm_id = 1
        self.call_log = []
        self.next_seq = 1
        self.poll_count = 0
        self.finalized = False
        self.closed = False
        self.self_bytes = 0    # loopback payload bytes (audit only)
        self.self_msgs = 0
        self.ckpt = _Ckpt()


class RankRuntime:
    """Handle to one rank of the runtime; create via init()."""

    def __init__(self, config, uid, links, coord_sock, keepalive_s, misses,
                 space=None, fd_registry=None):
        self.config = config
        self.rank = config.rank
        self.world_size = config.world_size
        self.identity = RankIdentity(config.rank, config.node, uid)
        self.space = space if space is not None else AddressSpace()
        self.fd_registry = fd_registry if fd_registry is not None else FdRegistry()
        self._cell = GuardedCell(_Core(), name=f"RankRuntime[{config.rank}]")
        self._keepalive_s = keepalive_s
        self._misses = misses
        self._last_coord_activity = time.monotonic()
        self._dead_peers = set()
        self.stop_after_ckpt = config.stop_after_ckpt
        with self._cell.hold() as core:
            core.comms[WORLD_COMM] = Communicator(
                WORLD_COMM, list(range(config.world_size)))
            core.call_log.append(CallLogEntry(
                1, Opcode.INIT, (config.world_size, config.rank, 0, 0),
                WORLD_COMM))
            core.next_seq = 2
        # lower-half bookkeeping: runtime buffers and socket descriptors
        self.space.reserve_any(16 * PAGE, Half.LOWER, "rt:txbuf")
        self.space.reserve_any(16 * PAGE, Half.LOWER, "rt:rxbuf")
        self.fd_registry.allocate(Half.LOWER, "socket:coordinator")
        for peer in sorted(links):
            self.fd_registry.allocate(Half.LOWER, f"socket:peer{peer}")
        self.transport = Transport(config.rank, links, coord_sock, self)
        self.transport.start()

    # ------------------------------------------------------------------
    # bootstrap
    # ------------------------------------------------------------------

    @classmethod
    def init(cls, world_size, rank, coordinator, *, listen_endpoint=None,
             session_dir=None, node="", proposed_uid=0, restart_epoch=0,
             connect_timeout=DEFAULT_CONNECT_TIMEOUT,
             peer_timeout=DEFAULT_PEER_TIMEOUT,
             drain_tick=DEFAULT_DRAIN_TICK, stop_after_ckpt=False,
             space=None, fd_registry=None):
        """Bootstrap a rank: register with the coordinator, learn the peer
        table, build the socket mesh, start the progress loop.

        The same path serves a first launch and the trivial bootstrap half
        of a restart (restart_epoch nonzero).
        """
        if listen_endpoint is None:
            if session_dir is not None:
                listen_endpoint = f"unix:{os.path.join(session_dir, f'r{rank}.sock')}"
            else:
                listen_endpoint = "127.0.0.1:0"
        cfg = RuntimeConfig(world_size, rank, coordinator, listen_endpoint,
                            node=node, proposed_uid=proposed_uid,
                            restart_epoch=restart_epoch,
                            connect_timeout=connect_timeout,
                            peer_timeout=peer_timeout, drain_tick=drain_tick,
                            stop_after_ckpt=stop_after_ckpt)
        listener, resolved = make_listener(cfg.listen_endpoint)
        try:
            coord = connect(coordinator, timeout=cfg.connect_timeout)
        except Exception:
            listener.close()
            raise
        try:
            uid, keepalive_s, misses, peers = cls._register(cfg, coord, resolved)
            links = build_mesh(rank, peers, listener, cfg.peer_timeout) \
                if world_size > 1 else {}
        except Exception:
            listener.close()
            coord.close()
            raise
        listener.close()
        if cfg.listen_endpoint.startswith("unix:"):
            try:
                os.unlink(cfg.listen_endpoint[5:])
            except OSError:
                pass
        return cls(cfg, uid, links, coord, keepalive_s, misses,
                   space=space, fd_registry=fd_registry)

    @staticmethod
    def _register(cfg, coord, endpoint):
        coord.sendall(wire.msg_register(
            cfg.rank, cfg.world_size, cfg.restart_epoch,
            cfg.restart_epoch > 0, cfg.proposed_uid, cfg.node, endpoint))
        decoder = wire.TlvDecoder()
        uid = keepalive_ms = misses = None
        peers = None
        coord.settimeout(cfg.connect_timeout + cfg.peer_timeout)
        try:
            while peers is None:
                data = coord.recv(1 << 16)
                if not data:
                    raise CoordinatorUnreachable(
                        "coordinator closed the connection during registration")
                decoder.feed(data)
                for mtype, payload in decoder.messages():
                    if mtype is wire.MsgType.HEARTBEAT:
                        coord.sendall(wire.msg_heartbeat_ack(
                            wire.parse_u64(payload)))
                    elif mtype is wire.MsgType.REGISTER_REPLY:
                        reply = wire.parse_register_reply(payload)
                        if reply["status"] != 0:
                            raise RegistrationRejected(reply["error"])
                        uid = reply["uid"]
                        keepalive_ms = reply["keepalive_ms"]
                        misses = reply["misses"]
                    elif mtype is wire.MsgType.PEER_TABLE:
                        peers = wire.parse_peer_table(payload)
        except socket.timeout as exc:
            raise PeerTimeout(
                f"rank {cfg.rank}: world did not assemble within "
                f"{cfg.connect_timeout + cfg.peer_timeout}s") from exc
        finally:
            coord.settimeout(None)
        if uid is None:
            raise CoordinatorUnreachable("no registration reply before peer table")
        return uid, (keepalive_ms or 5000) / 1000.0, misses or 3, peers

    # ------------------------------------------------------------------
    # transport sink callbacks (progress thread)
    # ------------------------------------------------------------------

    def loop_timeout(self):
        ck = self._cell.peek().ckpt
        return self.config.drain_tick if ck.reporting else 0.25

    def on_tick(self, now):
        report = None
        draining = False
        with self._cell.hold() as core:
            ck = core.ckpt
            if ck.reporting and now >= ck.next_report:
                ck.next_report = now + self.config.drain_tick
                report = wire.msg_drain_report(
                    ck.epoch, core.ledger.bytes_sent,
                    core.ledger.bytes_received, core.ledger.pending_ops,
                    core.ledger.msgs_sent, core.ledger.msgs_received)
            draining = ck.draining
        if report is not None:
            self.transport.send_coord(report)
        if draining and self._keepalive_s and \
                now - self._last_coord_activity > \
                self._keepalive_s * self._misses + 1.0:
            log.warning("%s: coordinator silent during drain, aborting locally",
                        self.identity)
            self._handle_abort(0, "coordinator lost (keep-alive failure)")

    def on_frame(self, comm, src, dst, tag, payload):
        if dst != self.rank:
            log.warning("%s: misrouted frame for rank %d dropped",
                        self.identity, dst)
            return
        with self._cell.hold() as core:
            core.ledger.bytes_received += len(payload)
            core.ledger.msgs_received += 1
            self._deliver(core, src, comm, tag, payload)

    @staticmethod
    def _deliver(core, src, comm, tag, payload):
        key = (src, comm, tag)
        queue = core.posted.get(key)
        if queue:
            op = queue.popleft()
            if not queue:
                del core.posted[key]
            core.ledger.pending_ops -= 1
            op.complete(CompletionInfo("recv", src, tag, payload))
        else:
            core.unexpected.setdefault(key, deque()).append(payload)

    def on_frame_written(self, op, paylen):
        with self._cell.hold() as core:
            core.ledger.bytes_sent += paylen
            core.ledger.msgs_sent += 1
            core.ledger.pending_ops -= 1
            if op is not None:
                op.complete(CompletionInfo("send", op.peer, op.tag))

    def on_peer_lost(self, rank):
        self._dead_peers.add(rank)
        with self._cell.hold() as core:
            if core.closed:
                return
            for op in list(core.tokens.values()):
                if op.peer == rank and not op.event.is_set():
                    op.fail(PeerTimeout(f"peer rank {rank} connection lost"))
        log.warning("%s: lost connection to peer rank %d", self.identity, rank)

    def on_coord_lost(self):
        with self._cell.hold() as core:
            if core.closed or core.finalized:
                return
            draining = core.ckpt.draining
        log.warning("%s: coordinator connection lost", self.identity)
        if draining:
            self._handle_abort(0, "coordinator lost (connection closed)")

    def on_coord_msg(self, mtype, payload):
        self._last_coord_activity = time.monotonic()
        M = wire.MsgType
        if mtype is M.HEARTBEAT:
            self.transport.send_coord(
                wire.msg_heartbeat_ack(wire.parse_u64(payload)))
        elif mtype is M.CKPT_REQUEST:
            epoch = wire.parse_epoch(payload)
            with self._cell.hold() as core:
                core.ckpt.requested_epoch = max(core.ckpt.requested_epoch, epoch)
        elif mtype is M.QUIESCE_OK:
            epoch = wire.parse_epoch(payload)
            with self._cell.hold() as core:
                if core.ckpt.draining and core.ckpt.epoch == epoch:
                    core.ckpt.reporting = False
                    core.ckpt.quiesce_evt.set()
        elif mtype is M.WRITE_IMAGE:
            info = wire.parse_write_image(payload)
            with self._cell.hold() as core:
                core.ckpt.write_path = info["path"]
                core.ckpt.write_backend = info["backend"]
                core.ckpt.write_evt.set()
        elif mtype is M.RESUME:
            self._end_epoch(aborted=False)
        elif mtype is M.CKPT_ABORT:
            info = wire.parse_ckpt_abort(payload)
            self._handle_abort(info["epoch"], info["reason"])

    def _end_epoch(self, aborted, reason=None):
        """Leave the drain/checkpoint state: unfreeze, transmit everything
        queued during the freeze plus any restart resends, release the
        application thread."""
        to_wire = []
        with self._cell.hold() as core:
            ck = core.ckpt
            if aborted:
                ck.abort_reason = reason or "checkpoint aborted"
            for op in core.frozen:
                if op.peer == self.rank:
                    self._deliver_self(core, op.comm, op.tag, op.payload, op)
                else:
                    core.ledger.pending_ops += 1
                    to_wire.append((op.peer, op.comm, op.tag, op.payload, op))
            core.frozen.clear()
            for pm in core.resend:
                core.ledger.pending_ops += 1
                to_wire.append((pm.dest, pm.comm, pm.tag, pm.payload, None))
            core.resend.clear()
            ck.disarm()
            ck.quiesce_evt.set()
            ck.write_evt.set()
            ck.resume_evt.set()
        for peer, comm, tag, payload, op in to_wire:
            self._hand_to_transport(peer, comm, tag, payload, op)

    def _handle_abort(self, epoch, reason):
        with self._cell.hold() as core:
            if not core.ckpt.draining:
                core.ckpt.requested_epoch = 0
                return
        log.warning("%s: checkpoint aborted: %s", self.identity, reason)
        self._end_epoch(aborted=True, reason=reason)

    # ------------------------------------------------------------------
    # shared helpers
    # ------------------------------------------------------------------

    def _resolve(self, core, comm):
        cid = comm.id if isinstance(comm, Communicator) else comm
        c = core.comms.get(cid)
        if c is None:
            raise InvalidCommunicator(f"unknown communicator {cid}")
        return c

    def _hand_to_transport(self, peer, comm, tag, payload, op):
        frame = wire.pack_frame(comm, self.rank, peer, tag, payload)
        self.transport.send_frame(peer, frame, op, len(payload))

    def _deliver_self(self, core, comm, tag, payload, op):
        """Loopback delivery: both counters move, no socket involved."""
        n = len(payload)
        core.ledger.bytes_sent += n
        core.ledger.msgs_sent += 1
        core.ledger.bytes_received += n
        core.ledger.msgs_received += 1
        core.self_bytes += n
        core.self_msgs += 1
        self._deliver(core, self.rank, comm, tag, payload)
        if op is not None:
            op.complete(CompletionInfo("send", self.rank, tag))

    def _new_op(self, core, kind, peer, comm, tag, payload=None):
        op = _Op(core.next_token, kind, peer, comm, tag, payload)
        core.next_token += 1
        core.tokens[op.token] = op
        return op

    def _check_open(self, core):
        if core.closed:
            raise RuntimeClosed("runtime closed")
        if core.finalized:
            raise RuntimeClosed("runtime finalized")

    @staticmethod
    def _check_app_tag(tag):
        if not 0 <= tag < SYS_TAG_BASE:
            raise ValueError(
                f"application tags must be in [0,{SYS_TAG_BASE:#x})")

    # ------------------------------------------------------------------
    # point-to-point API (application thread)
    # ------------------------------------------------------------------

    def isend(self, dest, comm, tag, payload):
        self._check_app_tag(tag)
        return self._isend(dest, comm, tag, bytes(payload))

    def _isend(self, dest, comm, tag, payload):
        hand_over = None
        with self._cell.hold() as core:
            self._check_open(core)
            c = self._resolve(core, comm)
            if dest not in c.members:
                raise InvalidRank(f"rank {dest} not in communicator {c.id}")
            op = self._new_op(core, "send", dest, c.id, tag, payload)
            if core.ckpt.freeze:
                # drain freeze: queue locally, count nothing; the operation
                # completes after the checkpoint epoch
                op.frozen = True
                core.frozen.append(op)
            elif dest == self.rank:
                self._deliver_self(core, c.id, tag, payload, op)
            elif dest in self._dead_peers:
                op.fail(PeerTimeout(f"peer rank {dest} unreachable"))
            else:
                core.ledger.pending_ops += 1
                hand_over = op
        if hand_over is not None:
            self._hand_to_transport(dest, hand_over.comm, tag, payload,
                                    hand_over)
        return op.token

    def irecv(self, source, comm, tag):
        self._check_app_tag(tag)
        return self._irecv(source, comm, tag)

    def _irecv(self, source, comm, tag):
        with self._cell.hold() as core:
            self._check_open(core)
            c = self._resolve(core, comm)
            if source not in c.members:
                raise InvalidRank(f"rank {source} not in communicator {c.id}")
            op = self._new_op(core, "recv", source, c.id, tag)
            key = (source, c.id, tag)
            queue = core.unexpected.get(key)
            if queue:
                payload = queue.popleft()
                if not queue:
                    del core.unexpected[key]
                op.complete(CompletionInfo("recv", source, tag, payload))
            else:
                core.posted.setdefault(key, deque()).append(op)
                core.ledger.pending_ops += 1
            return op.token

    def wait(self, token, timeout=None):
        """Block until the operation completes; tokens are consumed, a
        second wait on the same token raises UnknownToken."""
        with self._cell.hold() as core:
            op = core.tokens.get(token)
            if op is None:
                raise UnknownToken(f"token {token} is not outstanding")
        if not op.event.wait(timeout=timeout):
            raise PeerTimeout(f"operation {token} did not complete in time")
        with self._cell.hold() as core:
            core.tokens.pop(token, None)
        if op.error is not None:
            raise op.error
        return op.info

    def send(self, dest, comm, tag, payload):
        self.wait(self.isend(dest, comm, tag, payload))

    def recv(self, source, comm, tag):
        return self.wait(self.irecv(source, comm, tag)).payload

    def _send_sys(self, dest, comm, tag, payload):
        self.wait(self._isend(dest, comm, tag, payload))

    def _recv_sys(self, source, comm, tag):
        return self.wait(self._irecv(source, comm, tag)).payload

    # ------------------------------------------------------------------
    # collectives
    # ------------------------------------------------------------------

    def _member_view(self, comm):
        with self._cell.hold() as core:
            c = self._resolve(core, comm).copy()
        if self.rank not in c.members:
            raise InvalidRank(f"rank {self.rank} not in communicator {c.id}")
        return c

    def barrier(self, comm=WORLD_COMM):
        """Dissemination barrier built from logged point-to-point traffic."""
        c = self._member_view(comm)
        n = len(c.members)
        if n == 1:
            return
        me = c.members.index(self.rank)
        round_no = 0
        dist = 1
        while dist < n:
            dst = c.members[(me + dist) % n]
            src = c.members[(me - dist) % n]
            t_send = self._isend(dst, c.id, _TAG_BARRIER + round_no, b"")
            t_recv = self._irecv(src, c.id, _TAG_BARRIER + round_no)
            self.wait(t_send)
            self.wait(t_recv)
            dist <<= 1
            round_no += 1

    def _exchange_max(self, value):
        """Dissemination max over the world: every rank ends up with the
        maximum of all contributed values."""
        n = self.world_size
        acc = value
        round_no = 0
        dist = 1
        while dist < n:
            dst = (self.rank + dist) % n
            src = (self.rank - dist) % n
            t_send = self._isend(dst, WORLD_COMM, _TAG_POLL + round_no,
                                 struct.pack("<I", acc))
            t_recv = self._irecv(src, WORLD_COMM, _TAG_POLL + round_no)
            self.wait(t_send)
            other = struct.unpack("<I", self.wait(t_recv).payload)[0]
            acc = max(acc, other)
            dist <<= 1
            round_no += 1
        return acc

    def allreduce_sum_f64(self, comm, values):
        """Elementwise float64 sum with a fixed reduction order: the lowest
        member gathers in ascending member order and folds left to right,
        then broadcasts the result bytes, so every member sees bitwise
        identical output on every run."""
        import numpy as np
        vec = np.asarray(values, dtype=np.float64)
        c = self._member_view(comm)
        if len(c.members) == 1:
            return vec.copy()
        root = c.members[0]
        if self.rank == root:
            raws = {m: self._recv_sys(m, c.id, _TAG_GATHER)
                    for m in c.members[1:]}
            if any(len(raw) != 8 * len(vec) for raw in raws.values()):
                for m in c.members[1:]:
                    self._send_sys(m, c.id, _TAG_BCAST, b"\x01")
                raise LengthMismatch(
                    "allreduce vector lengths differ across members")
            acc = vec.copy()
            for m in c.members[1:]:
                acc = acc + np.frombuffer(raws[m], dtype=np.float64)
            out = b"\x00" + acc.tobytes()
            for m in c.members[1:]:
                self._send_sys(m, c.id, _TAG_BCAST, out)
            return acc
        self._send_sys(root, c.id, _TAG_GATHER, vec.tobytes())
        reply = self._recv_sys(root, c.id, _TAG_BCAST)
        if reply[:1] == b"\x01":
            raise LengthMismatch("allreduce vector lengths differ across members")
        return np.frombuffer(reply[1:], dtype=np.float64).copy()

    def comm_split(self, parent, color, key):
        """Collective split of `parent` by color, ordered by (key, rank).

        Ids are deterministic: the split agrees on the maximum next-id among
        the members and assigns new ids in ascending color order, so replay
        reproduces them exactly. The call is appended to the call log.
        """
        return self._comm_split(parent, color, key, record=True)

    def _comm_split(self, parent, color, key, record):
        p = self._member_view(parent)
        with self._cell.hold() as core:
            my_next = core.next_comm_id
        root = p.members[0]
        if self.rank == root:
            rows = [(self.rank, color, key, my_next)]
            for m in p.members[1:]:
                c_, k_, n_ = struct.unpack(
                    "<qqI", self._recv_sys(m, p.id, _TAG_SPLIT))
                rows.append((m, c_, k_, n_))
            base = max(r[3] for r in rows)
            colors = sorted({r[1] for r in rows})
            by_color = {}
            for idx, col in enumerate(colors):
                group = [(k_, m) for (m, c_, k_, _) in rows if c_ == col]
                group.sort()
                by_color[col] = (base + idx, [m for _, m in group])
            new_next = base + len(colors)
            for m in p.members[1:]:
                col = next(c_ for (mm, c_, _, _) in rows if mm == m)
                cid, members = by_color[col]
                blob = struct.pack("<II", cid, new_next) + struct.pack(
                    f"<{len(members)}I", *members)
                self._send_sys(m, p.id, _TAG_SPLIT_REPLY, blob)
            cid, members = by_color[color]
        else:
            self._send_sys(root, p.id, _TAG_SPLIT,
                           struct.pack("<qqI", color, key, my_next))
            raw = self._recv_sys(root, p.id, _TAG_SPLIT_REPLY)
            cid, new_next = struct.unpack_from("<II", raw)
            members = list(struct.unpack(f"<{(len(raw) - 8) // 4}I", raw[8:]))
        new = Communicator(cid, members, parent=p.id, color=color, key=key)
        with self._cell.hold() as core:
            core.comms[cid] = new
            core.next_comm_id = max(core.next_comm_id, new_next)
            if record:
                core.call_log.append(CallLogEntry(
                    core.next_seq, Opcode.COMM_SPLIT, (p.id, color, key, 0), cid))
                core.next_seq += 1
        return new.copy()

    # ------------------------------------------------------------------
    # checkpoint path
    # ------------------------------------------------------------------

    def ckpt_poll(self):
        """Cooperative checkpoint point; collective over the world.

        Returns True when a checkpoint was taken at this poll, False
        otherwise. Applications must hold no outstanding tokens here.
        """
        with self._cell.hold() as core:
            self._check_open(core)
            core.poll_count += 1
            if core.tokens:
                raise CheckpointProtocolError(
                    f"{len(core.tokens)} operation token(s) outstanding at "
                    "ckpt_poll; wait on every token before polling")
            requested = core.ckpt.requested_epoch
        agreed = self._exchange_max(requested)
        if agreed == 0:
            return False
        return self._checkpoint_here(agreed)

    def _checkpoint_here(self, epoch):
        self.enter_drain(epoch)
        ck = self._cell.peek().ckpt
        ck.quiesce_evt.wait()
        ck.write_evt.wait()
        wrote_path = None
        if ck.abort_reason is None and ck.write_path is not None:
            path, backend = ck.write_path, ck.write_backend
            try:
                receipt = self.write_image(epoch, backend, path)
                wrote_path = path
            except Exception as exc:
                self.transport.send_coord(wire.msg_write_failed(str(exc)))
                log.error("%s: image write failed: %s", self.identity, exc)
            else:
                self.transport.send_coord(wire.msg_done(receipt.bytes,
                                                        receipt.ms))
        ck.resume_evt.wait()
        if ck.abort_reason is not None:
            if wrote_path is not None:
                # the epoch died after this rank's write; keep the directory
                # free of this epoch's partial results
                try:
                    os.unlink(wrote_path)
                except OSError:
                    pass
            return False
        if self.stop_after_ckpt:
            raise CheckpointStop(epoch)
        return True

    def enter_drain(self, epoch):
        """Stop initiating sends, keep receiving, report counters every
        drain tick until the coordinator decides quiescence."""
        with self._cell.hold() as core:
            if core.ckpt.draining:
                return
            core.ckpt.arm(epoch)
        self.transport.send_coord(b"")  # wake the loop for the first report

    def capture_pending(self):
        """Snapshot undelivered inbound messages and frozen (or restored
        and not yet re-sent) outbound sends for the image."""
        with self._cell.hold() as core:
            out = []
            for key in sorted(core.unexpected):
                src, comm, tag = key
                for payload in core.unexpected[key]:
                    out.append(PendingMessage(src, self.rank, comm, tag,
                                              bytes(payload)))
            for op in core.frozen:
                out.append(PendingMessage(self.rank, op.peer, op.comm, op.tag,
                                          bytes(op.payload)))
            out.extend(core.resend)
            return out

    def build_image(self, epoch):
        with self._cell.hold() as core:
            call_log = list(core.call_log)
        regions = []
        for r in self.space.regions():
            payload = bytearray(r.payload) if r.tag is Half.UPPER else None
            regions.append(MemoryRegion(r.start, r.length, r.tag, r.label,
                                        payload))
        return CheckpointImage(
            epoch=epoch, rank=self.rank, world_size=self.world_size,
            uid=self.identity.uid, regions=regions, call_log=call_log,
            pending=self.capture_pending(), fds=self.fd_registry.entries())

    def write_image(self, epoch, backend, path):
        """Serialize the upper half and write it through `backend`.

        The exact image size is known before the first byte is written, so
        an undersized backend fails with InsufficientSpace up front; the
        write itself is atomic (tmp + rename).
        """
        if isinstance(backend, str):
            backend = StorageBackend.parse(backend, os.path.dirname(path) or ".")
        img = self.build_image(epoch)
        data = serialize_image(img)
        start = time.monotonic()
        backend.write_atomic(path, data, writer_rank=self.rank)
        duration = time.monotonic() - start
        log.info("%s: wrote image epoch=%d bytes=%d ms=%.1f path=%s",
                 self.identity, epoch, len(data), duration * 1000, path)
        return ImageReceipt(len(data), duration)

    # ------------------------------------------------------------------
    # restart support (used by the restart engine)
    # ------------------------------------------------------------------

    def adopt_call_log(self, entries):
        with self._cell.hold() as core:
            core.call_log = list(entries)
            core.next_seq = entries[-1].seq + 1 if entries else 1

    def preload_pending(self, pending):
        """Load the image's pending-message section: inbound entries seed
        the unexpected queues (consulted before any socket receive),
        outbound entries are re-sent when the restart barrier releases."""
        with self._cell.hold() as core:
            for pm in pending:
                if pm.dest == self.rank:
                    core.unexpected.setdefault(
                        (pm.source, pm.comm, pm.tag), deque()).append(pm.payload)
                elif pm.source == self.rank:
                    core.resend.append(pm)
                else:
                    raise InvalidRank(
                        f"pending message {pm.source}->{pm.dest} does not "
                        f"involve rank {self.rank}")

    def await_resume(self, epoch, timeout=None):
        """Report replay completion and block on the restart barrier."""
        ck = self._cell.peek().ckpt
        ck.resume_evt.clear()
        self.transport.send_coord(wire.msg_epoch(wire.MsgType.RESTART_DONE,
                                                 epoch))
        if not ck.resume_evt.wait(timeout=timeout):
            raise PeerTimeout("restart barrier did not release")

    # ------------------------------------------------------------------
    # shutdown
    # ------------------------------------------------------------------

    def finalize(self):
        """Orderly shutdown: refuse if operations are pending, deregister
        (best effort), log the finalize, close sockets."""
        with self._cell.hold() as core:
            self._check_open(core)
            if core.tokens or core.frozen or core.ledger.pending_ops:
                raise PendingOperations(
                    f"{len(core.tokens)} token(s) outstanding, "
                    f"{core.ledger.pending_ops} pending transport op(s)")
            core.call_log.append(CallLogEntry(core.next_seq, Opcode.FINALIZE,
                                              (0, 0, 0, 0), 0))
            core.next_seq += 1
            core.finalized = True
        try:
            self.transport.send_coord(wire.msg_deregister(self.rank))
        except Exception:
            log.warning("%s: could not deregister with coordinator",
                        self.identity)
        self.transport.close()

    def close(self):
        """Force shutdown; outstanding operations fail with RuntimeClosed."""
        with self._cell.hold() as core:
            if core.closed:
                return
            core.closed = True
            for op in core.tokens.values():
                if not op.event.is_set():
                    op.fail(RuntimeClosed("runtime closed"))
            ck = core.ckpt
            if ck.abort_reason is None:
                ck.abort_reason = "runtime closed"
            ck.quiesce_evt.set()
            ck.write_evt.set()
            ck.resume_evt.set()
        self.transport.close()

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------

    def ledger(self):
        with self._cell.hold() as core:
            return core.ledger.copy()

    def comm_table(self):
        with self._cell.hold() as core:
            return {cid: c.copy() for cid, c in core.comms.items()}

    def get_call_log(self):
        with self._cell.hold() as core:
            return list(core.call_log)

    def poll_count(self):
        with self._cell.hold() as core:
            return core.poll_count

    def world_comm(self):
        with self._cell.hold() as core:
            return core.comms[WORLD_COMM].copy()

    def audit_counters(self):
        """(ledger copy, loopback payload bytes, loopback msgs, raw wire
        totals) for transfer-accounting audits."""
        with self._cell.hold() as core:
            ledger = core.ledger.copy()
            selfb, selfm = core.self_bytes, core.self_msgs
        return ledger, selfb, selfm, self.transport.raw_totals()
