"""Central control-plane service.

One event-loop thread owns the rank registry (rank, node, uid), drives
the checkpoint epoch state machine, aggregates drain reports into the
quiescence decision, and detects dead ranks through application-level
heartbeats. Every log line about a rank embeds its full
(rank, node, uid) identity.

Phases move Running -> Draining -> Quiesced -> Writing -> Running for a
checkpoint, or start -> RestartReplay -> Running for a restart. A rank
that misses enough heartbeat acks is marked dead; if that happens while
an epoch is in flight the epoch is aborted and every image it produced
is removed, so an epoch either yields a complete manifest plus one image
per rank or nothing at all.
"""

import enum
import logging
import os
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .errors import CkptAborted, CkptTimeout, CoordinatorUnreachable
from .guard import GuardedCell
from .manifest import write_manifest
from .netutil import connect, make_listener
from .records import DrainReport, RankIdentity

log = logging.getLogger("splitckpt.coordinator")

DEFAULT_KEEPALIVE = 5.0
DEFAULT_MISSES = 3
DEFAULT_DRAIN_TICK = 0.05
DEFAULT_CKPT_TIMEOUT = 120.0


class Phase(enum.Enum):
    RUNNING = "Running"
    DRAINING = "Draining"
    QUIESCED = "Quiesced"
    WRITING = "Writing"
    RESTART_REPLAY = "RestartReplay"


def balanced(reports):
    """Instantaneous quiescence condition over one report per rank: global
    sent == received (bytes and messages) with no pending operations."""
    reports = list(reports)
    if not reports:
        return False
    if any(r.pending_ops for r in reports):
        return False
    return (sum(r.bytes_sent for r in reports) ==
            sum(r.bytes_received for r in reports) and
            sum(r.msgs_sent for r in reports) ==
            sum(r.msgs_received for r in reports))


def quiescence_check(report_rounds, stability_rounds=2):
    """True iff the balance condition held for the last `stability_rounds`
    consecutive report rounds (guards the race where counters momentarily
    balance while a send is being initiated)."""
    rounds = list(report_rounds)
    if len(rounds) < stability_rounds:
        return False
    return all(balanced(r) for r in rounds[-stability_rounds:])


@dataclass
class _Conn:
    sock: socket.socket
    decoder: wire.TlvDecoder = field(default_factory=wire.TlvDecoder)
    outbuf: bytearray = field(default_factory=bytearray)
    rank: int | None = None
    kind: str = "unknown"  # "rank" once registered, "client" after TRIGGER


@dataclass
class _RankEntry:
    identity: RankIdentity
    endpoint: str
    conn: _Conn
    alive: bool = True
    unacked: int = 0
    report: DrainReport | None = None
    report_count: int = 0
    done: tuple | None = None
    restart_done: bool = False
    image_path: str | None = None


class _State:
    def __init__(self):
        self.phase = Phase.RUNNING
        self.epoch = 0
        self.world_size = None
        self.ranks = {}
        self.restarting = False
        # current epoch bookkeeping
        self.backend = None
        self.out_dir = None
        self.trigger_conn = None
        self.drain_deadline = None
        self.round_mark = 0
        self.stable_rounds = 0
        self.receipts = {}
        self.manifest_path = None


class Coordinator:
    def __init__(self, listen, keepalive_interval=DEFAULT_KEEPALIVE,
                 keepalive_misses=DEFAULT_MISSES,
                 drain_tick=DEFAULT_DRAIN_TICK,
                 ckpt_timeout=DEFAULT_CKPT_TIMEOUT):
        self.keepalive_interval = keepalive_interval
        self.keepalive_misses = keepalive_misses
        self.drain_tick = drain_tick
        self.ckpt_timeout = ckpt_timeout
        self._cell = GuardedCell(_State(), name="CoordinatorState")
        self._listener, self.endpoint = make_listener(listen)
        self._listener.setblocking(False)
        self._sel = selectors.DefaultSelector()
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        self._stop = False
        self._thread = None
        self._hb_seq = 0
        self._next_uid = int(time.time()) % 100000 * 1000 + 1
        self._conns = {}
        # test hook: called with (epoch, {rank: path}) right before the
        # WRITE_IMAGE broadcast
        self.on_write_image = None

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self.serve, daemon=True,
                                        name="coordinator")
        self._thread.start()
        return self

    def stop(self):
        self._stop = True
        try:
            os.write(self._wake_w, b"x")
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=10)

    def serve(self):
        """Run the event loop until shutdown."""
        self._sel.register(self._listener, selectors.EVENT_READ, ("accept", None))
        self._sel.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        next_beat = time.monotonic() + self.keepalive_interval
        try:
            while not self._stop:
                timeout = max(0.0, next_beat - time.monotonic())
                with self._cell.hold() as st:
                    if st.phase is Phase.DRAINING and st.drain_deadline:
                        timeout = min(timeout,
                                      max(0.0, st.drain_deadline - time.monotonic()))
                for key, events in self._sel.select(timeout=min(timeout, 0.5)):
                    kind, conn = key.data
                    if kind == "accept":
                        self._accept()
                    elif kind == "wake":
                        try:
                            os.read(self._wake_r, 4096)
                        except OSError:
                            pass
                    else:
                        if events & selectors.EVENT_READ:
                            self._readable(conn)
                        if events & selectors.EVENT_WRITE:
                            self._writable(conn)
                now = time.monotonic()
                if now >= next_beat:
                    next_beat = now + self.keepalive_interval
                    self._heartbeat_sweep()
                self._check_drain_deadline()
        finally:
            for conn in list(self._conns.values()):
                self._drop(conn, "shutdown")
            self._sel.close()
            self._listener.close()
            os.close(self._wake_r)
            os.close(self._wake_w)

    # -- socket plumbing ----------------------------------------------------

    def _accept(self):
        try:
            sock, _ = self._listener.accept()
        except OSError:
            return
        sock.setblocking(False)
        conn = _Conn(sock)
        self._conns[id(conn)] = conn
        self._sel.register(sock, selectors.EVENT_READ, ("conn", conn))

    def _send(self, conn, data):
        if conn.sock.fileno() < 0:
            return
        had = bool(conn.outbuf)
        conn.outbuf.extend(data)
        if not had:
            try:
                self._sel.modify(conn.sock, selectors.EVENT_READ | selectors.EVENT_WRITE,
                                 ("conn", conn))
            except (KeyError, ValueError):
                pass

    def _writable(self, conn):
        try:
            n = conn.sock.send(conn.outbuf)
            del conn.outbuf[:n]
        except BlockingIOError:
            return
        except OSError:
            self._lost(conn)
            return
        if not conn.outbuf:
            try:
                self._sel.modify(conn.sock, selectors.EVENT_READ, ("conn", conn))
            except (KeyError, ValueError):
                pass

    def _readable(self, conn):
        try:
            data = conn.sock.recv(1 << 16)
        except BlockingIOError:
            return
        except OSError:
            self._lost(conn)
            return
        if not data:
            self._lost(conn)
            return
        conn.decoder.feed(data)
        try:
            for mtype, payload in conn.decoder.messages():
                self._dispatch(conn, mtype, payload)
        except wire.WireError as exc:
            log.warning("protocol error on connection: %s", exc)
            self._drop(conn, "protocol error")

    def _drop(self, conn, why):
        if id(conn) not in self._conns:
            return
        del self._conns[id(conn)]
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass

    def _lost(self, conn):
        rank = conn.rank
        self._drop(conn, "eof")
        if rank is None:
            return
        with self._cell.hold() as st:
            entry = st.ranks.get(rank)
            if entry is None or entry.conn is not conn:
                return
            self._mark_dead(st, entry, "connection lost")

    # -- heartbeats ----------------------------------------------------------

    def _heartbeat_sweep(self):
        self._hb_seq += 1
        beat = wire.msg_heartbeat(self._hb_seq)
        with self._cell.hold() as st:
            for entry in list(st.ranks.values()):
                if not entry.alive:
                    continue
                if entry.unacked >= self.keepalive_misses:
                    self._mark_dead(st, entry,
                                    f"missed {entry.unacked} heartbeat acks")
                    continue
                entry.unacked += 1
                self._send(entry.conn, beat)

    def _mark_dead(self, st, entry, why):
        entry.alive = False
        log.warning("%s declared dead: %s (phase %s)",
                    entry.identity, why, st.phase.value)
        if st.phase in (Phase.DRAINING, Phase.QUIESCED, Phase.WRITING):
            self._abort_epoch(st, f"{entry.identity} died mid-checkpoint: {why}")
        elif st.phase is Phase.RESTART_REPLAY:
            self._abort_epoch(st, f"{entry.identity} died during restart: {why}",
                              restart=True)

    # -- message dispatch ------------------------------------------------------

    def _dispatch(self, conn, mtype, payload):
        M = wire.MsgType
        if mtype is M.REGISTER:
            self._on_register(conn, wire.parse_register(payload))
        elif mtype is M.HEARTBEAT_ACK:
            with self._cell.hold() as st:
                if conn.rank is not None and conn.rank in st.ranks:
                    st.ranks[conn.rank].unacked = 0
        elif mtype is M.DRAIN_REPORT:
            self._on_report(conn, wire.parse_drain_report(payload))
        elif mtype is M.DONE:
            self._on_done(conn, wire.parse_done(payload))
        elif mtype is M.WRITE_FAILED:
            info = wire.parse_write_failed(payload)
            with self._cell.hold() as st:
                entry = st.ranks.get(conn.rank)
                who = entry.identity if entry else f"rank={conn.rank}"
                log.error("%s image write failed: %s", who, info["reason"])
                if st.phase in (Phase.DRAINING, Phase.QUIESCED, Phase.WRITING):
                    self._abort_epoch(st, f"{who}: {info['reason']}")
        elif mtype is M.RESTART_DONE:
            self._on_restart_done(conn, wire.parse_epoch(payload))
        elif mtype is M.DEREGISTER:
            self._on_deregister(conn)
        elif mtype is M.TRIGGER:
            self._on_trigger(conn, wire.parse_trigger(payload))
        else:
            log.warning("unexpected message %s from connection", mtype.name)

    def _on_register(self, conn, info):
        rank, world = info["rank"], info["world"]
        with self._cell.hold() as st:
            if st.world_size is None:
                st.world_size = world
            if world != st.world_size:
                self._send(conn, wire.msg_register_reply(
                    1, error=f"world size {world} != {st.world_size}"))
                return
            if not 0 <= rank < world:
                self._send(conn, wire.msg_register_reply(
                    1, error=f"rank {rank} out of range"))
                return
            existing = st.ranks.get(rank)
            if existing is not None and existing.alive:
                log.warning("duplicate REGISTER for rank %d rejected", rank)
                self._send(conn, wire.msg_register_reply(
                    1, error=f"rank {rank} already registered"))
                return
            uid = info["proposed_uid"]
            taken = {e.identity.uid for e in st.ranks.values()}
            if not uid or uid in taken:
                uid = self._next_uid
                self._next_uid += 1
            identity = RankIdentity(rank, info["node"], uid)
            conn.rank = rank
            conn.kind = "rank"
            entry = _RankEntry(identity, info["endpoint"], conn)
            st.ranks[rank] = entry
            if info["restarting"]:
                st.restarting = True
                st.phase = Phase.RESTART_REPLAY
                st.epoch = max(st.epoch, info["epoch"])
            log.info("%s registered (endpoint %s%s)", identity,
                     info["endpoint"],
                     ", restart" if info["restarting"] else "")
            self._send(conn, wire.msg_register_reply(
                0, uid=uid, keepalive_ms=int(self.keepalive_interval * 1000),
                misses=self.keepalive_misses))
            if len(st.ranks) == st.world_size and \
                    all(e.alive for e in st.ranks.values()):
                table = {r: e.endpoint for r, e in st.ranks.items()}
                msg = wire.msg_peer_table(table)
                for e in st.ranks.values():
                    self._send(e.conn, msg)

    def _on_report(self, conn, info):
        with self._cell.hold() as st:
            entry = st.ranks.get(conn.rank)
            if entry is None or st.phase is not Phase.DRAINING or \
                    info["epoch"] != st.epoch:
                return
            entry.report = DrainReport(
                conn.rank, info["epoch"], info["bytes_sent"],
                info["bytes_received"], info["pending_ops"],
                info["msgs_sent"], info["msgs_received"])
            entry.report_count += 1
            counts = [e.report_count for e in st.ranks.values()]
            if min(counts) <= st.round_mark:
                return
            st.round_mark = min(counts)
            reports = [e.report for e in st.ranks.values()]
            if balanced(reports):
                st.stable_rounds += 1
            else:
                st.stable_rounds = 0
            if st.stable_rounds >= 2:
                self._begin_writing(st)

    def _begin_writing(self, st):
        st.phase = Phase.QUIESCED
        log.info("epoch %d quiesced after %d report rounds",
                 st.epoch, st.round_mark)
        quiesce = wire.msg_epoch(wire.MsgType.QUIESCE_OK, st.epoch)
        for e in st.ranks.values():
            self._send(e.conn, quiesce)
        st.phase = Phase.WRITING
        paths = {}
        for r, e in sorted(st.ranks.items()):
            path = str(Path(st.out_dir) / f"ckpt_rank{r}_ep{st.epoch}.img")
            e.image_path = path
            paths[r] = path
        if self.on_write_image is not None:
            self.on_write_image(st.epoch, dict(paths))
        for r, e in sorted(st.ranks.items()):
            self._send(e.conn, wire.msg_write_image(st.epoch, paths[r],
                                                    st.backend))

    def _on_done(self, conn, info):
        with self._cell.hold() as st:
            entry = st.ranks.get(conn.rank)
            if entry is None or st.phase is not Phase.WRITING:
                return
            entry.done = (info["bytes"], info["ms"])
            st.receipts[conn.rank] = entry.done
            log.info("%s wrote image: bytes=%d ms=%d", entry.identity,
                     info["bytes"], info["ms"])
            if all(e.done is not None for e in st.ranks.values()):
                manifest = Path(st.out_dir) / f"manifest_ep{st.epoch}.txt"
                write_manifest(manifest, st.epoch, st.world_size,
                               {r: e.image_path for r, e in st.ranks.items()})
                st.manifest_path = str(manifest)
                log.info("epoch %d complete: manifest %s", st.epoch, manifest)
                st.phase = Phase.RUNNING
                resume = wire.msg_epoch(wire.MsgType.RESUME, st.epoch)
                for e in st.ranks.values():
                    self._send(e.conn, resume)
                    e.done = None
                if st.trigger_conn is not None:
                    self._send(st.trigger_conn,
                               wire.msg_trigger_reply(0, st.manifest_path))
                    st.trigger_conn = None

    def _on_restart_done(self, conn, epoch):
        with self._cell.hold() as st:
            entry = st.ranks.get(conn.rank)
            if entry is None:
                return
            entry.restart_done = True
            log.info("%s finished restart replay (epoch %d)",
                     entry.identity, epoch)
            if st.phase is Phase.RESTART_REPLAY and \
                    st.world_size is not None and \
                    len(st.ranks) == st.world_size and \
                    all(e.restart_done for e in st.ranks.values()):
                st.phase = Phase.RUNNING
                st.restarting = False
                log.info("restart barrier complete, resuming epoch %d", st.epoch)
                resume = wire.msg_epoch(wire.MsgType.RESUME, st.epoch)
                for e in st.ranks.values():
                    self._send(e.conn, resume)

    def _on_deregister(self, conn):
        with self._cell.hold() as st:
            entry = st.ranks.get(conn.rank)
            if entry is None:
                return
            log.info("%s deregistered", entry.identity)
            if st.phase in (Phase.DRAINING, Phase.QUIESCED, Phase.WRITING):
                self._abort_epoch(st, f"{entry.identity} deregistered mid-checkpoint")
            del st.ranks[conn.rank]
            conn.rank = None

    def _on_trigger(self, conn, info):
        conn.kind = "client"
        with self._cell.hold() as st:
            if st.phase is not Phase.RUNNING:
                self._send(conn, wire.msg_trigger_reply(
                    1, f"busy: phase {st.phase.value}"))
                return
            if st.world_size is None or len(st.ranks) != st.world_size or \
                    not all(e.alive for e in st.ranks.values()):
                self._send(conn, wire.msg_trigger_reply(
                    1, "not all ranks registered and alive"))
                return
            st.epoch += 1
            st.phase = Phase.DRAINING
            st.backend = info["backend"]
            st.out_dir = info["out_dir"]
            Path(st.out_dir).mkdir(parents=True, exist_ok=True)
            st.trigger_conn = conn
            st.drain_deadline = time.monotonic() + self.ckpt_timeout
            st.round_mark = 0
            st.stable_rounds = 0
            st.receipts = {}
            st.manifest_path = None
            for e in st.ranks.values():
                e.report = None
                e.report_count = 0
                e.done = None
                e.image_path = None
            log.info("epoch %d: draining %d ranks (backend %s, out %s)",
                     st.epoch, len(st.ranks), st.backend, st.out_dir)
            req = wire.msg_epoch(wire.MsgType.CKPT_REQUEST, st.epoch)
            for e in st.ranks.values():
                self._send(e.conn, req)

    def _check_drain_deadline(self):
        with self._cell.hold() as st:
            if st.phase is Phase.DRAINING and st.drain_deadline is not None \
                    and time.monotonic() > st.drain_deadline:
                self._abort_epoch(
                    st, f"CkptTimeout: epoch {st.epoch} did not quiesce within "
                        f"{self.ckpt_timeout:.0f}s")

    def _abort_epoch(self, st, reason, restart=False):
        log.error("aborting epoch %d: %s", st.epoch, reason)
        abort = wire.msg_ckpt_abort(st.epoch, reason)
        for e in st.ranks.values():
            if e.alive:
                self._send(e.conn, abort)
        # epoch atomicity: remove anything this epoch put under final names
        if st.out_dir:
            for r, e in st.ranks.items():
                if e.image_path:
                    Path(e.image_path).unlink(missing_ok=True)
            manifest = Path(st.out_dir) / f"manifest_ep{st.epoch}.txt"
            manifest.unlink(missing_ok=True)
        if st.trigger_conn is not None:
            self._send(st.trigger_conn, wire.msg_trigger_reply(1, reason))
            st.trigger_conn = None
        st.phase = Phase.RESTART_REPLAY if restart and not \
            all(e.restart_done for e in st.ranks.values()) else Phase.RUNNING
        if not restart:
            st.drain_deadline = None
            for e in st.ranks.values():
                e.report = None
                e.report_count = 0
                e.done = None
                e.image_path = None

    # -- introspection ----------------------------------------------------------

    def rank_registry_dump(self):
        """One `rank= node= uid= phase= sent= recv= pending=` line per rank,
        sorted by rank; a lone header line when the registry is empty."""
        with self._cell.hold() as st:
            if not st.ranks:
                return "rank registry: empty"
            lines = []
            for r in sorted(st.ranks):
                e = st.ranks[r]
                phase = st.phase.value if e.alive else "dead"
                rep = e.report
                sent = rep.bytes_sent if rep else 0
                recv = rep.bytes_received if rep else 0
                pend = rep.pending_ops if rep else 0
                lines.append(f"{e.identity} phase={phase} "
                             f"sent={sent} recv={recv} pending={pend}")
            return "\n".join(lines)

    def phase(self):
        with self._cell.hold() as st:
            return st.phase

    def epoch(self):
        with self._cell.hold() as st:
            return st.epoch

    def receipts(self):
        with self._cell.hold() as st:
            return dict(st.receipts)

    def registered_ranks(self):
        with self._cell.hold() as st:
            return {r: e.identity for r, e in st.ranks.items() if e.alive}


def request_checkpoint(endpoint, backend, out_dir, timeout=300.0):
    """Client side of a checkpoint trigger; returns the manifest path."""
    sock = connect(endpoint, timeout=min(timeout, 10.0))
    sock.settimeout(timeout)
    decoder = wire.TlvDecoder()
    try:
        sock.sendall(wire.msg_trigger(backend, str(out_dir)))
        while True:
            data = sock.recv(1 << 16)
            if not data:
                raise CoordinatorUnreachable("coordinator closed the connection")
            decoder.feed(data)
            for mtype, payload in decoder.messages():
                if mtype is wire.MsgType.TRIGGER_REPLY:
                    reply = wire.parse_trigger_reply(payload)
                    if reply["status"] == 0:
                        return reply["text"]
                    if "CkptTimeout" in reply["text"]:
                        raise CkptTimeout(reply["text"])
                    raise CkptAborted(reply["text"])
    except socket.timeout as exc:
        raise CkptTimeout(f"no reply from coordinator within {timeout}s") from exc
    finally:
        sock.close()
