"""Rank-side socket machinery: the peer mesh and the coordinator link.

One progress thread per rank services every socket with a selector. The
application thread never touches sockets; it enqueues outbound frames
and blocks on operation events. All byte movement, and therefore all
transfer accounting, happens on the progress thread.

The transport also keeps raw wire counters (header bytes included,
partial writes counted) that the drain protocol never reads; they exist
so tests can independently confirm that nothing was in flight when a
checkpoint was allowed to proceed.
"""

import logging
import os
import selectors
import socket
import struct
import threading
import time
from collections import deque

from . import wire
from .errors import PeerTimeout
from .netutil import connect, make_listener

log = logging.getLogger("splitckpt.transport")

HELLO = struct.Struct("<II")
HELLO_MAGIC = 0x4D504D48  # "MPMH"

RECV_CHUNK = 1 << 16


class _Link:
    __slots__ = ("rank", "sock", "decoder", "outq", "offset", "want_write")

    def __init__(self, rank, sock):
        self.rank = rank
        self.sock = sock
        self.decoder = wire.FrameDecoder()
        self.outq = deque()  # (frame bytes, op or None, payload_len)
        self.offset = 0
        self.want_write = False


def build_mesh(rank, peers, listener, hello_timeout):
    """Connect to every lower rank, accept from every higher rank.

    `peers` maps rank -> endpoint for the whole world. Returns
    {rank: socket}. The listener must already be bound (its endpoint was
    published at registration, so every peer can reach it by now).
    """
    links = {}
    deadline = time.monotonic() + hello_timeout
    for other in sorted(r for r in peers if r < rank):
        last = None
        while True:
            try:
                sock = connect(peers[other], timeout=2.0)
                break
            except Exception as exc:  # retry until the peer is listening
                last = exc
                if time.monotonic() > deadline:
                    raise PeerTimeout(
                        f"rank {rank}: no connection to rank {other} "
                        f"({peers[other]}): {last}") from exc
                time.sleep(0.02)
        sock.sendall(HELLO.pack(HELLO_MAGIC, rank))
        links[other] = sock
    expect = {r for r in peers if r > rank}
    listener.settimeout(0.2)
    while expect:
        if time.monotonic() > deadline:
            raise PeerTimeout(
                f"rank {rank}: still waiting for peers {sorted(expect)}")
        try:
            sock, _ = listener.accept()
        except socket.timeout:
            continue
        sock.settimeout(5.0)
        raw = b""
        while len(raw) < HELLO.size:
            chunk = sock.recv(HELLO.size - len(raw))
            if not chunk:
                raise PeerTimeout(f"rank {rank}: peer hello truncated")
            raw += chunk
        magic, other = HELLO.unpack(raw)
        if magic != HELLO_MAGIC or other not in expect:
            sock.close()
            raise PeerTimeout(f"rank {rank}: bad hello from peer {other}")
        sock.settimeout(None)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 20)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        expect.discard(other)
        links[other] = sock
    return links


class Transport:
    """Progress loop over the peer mesh plus the coordinator connection.

    The sink object receives every event:
        on_frame(comm, src, dst, tag, payload)
        on_frame_written(op, payload_len)
        on_coord_msg(mtype, payload)
        on_coord_lost()
        on_peer_lost(rank)
        on_tick(now)            every loop iteration
        loop_timeout() -> float
    """

    def __init__(self, rank, links, coord_sock, sink):
        self.rank = rank
        self.sink = sink
        self._links = {r: _Link(r, s) for r, s in links.items()}
        for l in self._links.values():
            l.sock.setblocking(False)
        self._coord = coord_sock
        self._coord.setblocking(False)
        self._coord_alive = True
        self._coord_decoder = wire.TlvDecoder()
        self._coord_out = bytearray()
        self._lock = threading.Lock()
        self._pending = deque()        # (dest, frame, op, paylen)
        self._pending_coord = deque()  # bytes
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        self._stop = False
        self._closed = threading.Event()
        # raw wire accounting, data plane only
        self.raw_out = 0
        self.raw_in = 0
        self.frames_out = 0
        self.frames_in = 0
        self._sel = selectors.DefaultSelector()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"progress-r{rank}")

    def start(self):
        self._sel.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        self._sel.register(self._coord, selectors.EVENT_READ, ("coord", None))
        for l in self._links.values():
            self._sel.register(l.sock, selectors.EVENT_READ, ("peer", l))
        self._thread.start()
        return self

    # -- thread-safe enqueue APIs -----------------------------------------

    def send_frame(self, dest, frame, op, paylen):
        with self._lock:
            self._pending.append((dest, frame, op, paylen))
        self._wake()

    def send_coord(self, data):
        with self._lock:
            self._pending_coord.append(data)
        self._wake()

    def close(self):
        self._stop = True
        self._wake()
        self._closed.wait(timeout=10)

    def raw_totals(self):
        return self.raw_out, self.raw_in, self.frames_out, self.frames_in

    def _wake(self):
        try:
            os.write(self._wake_w, b"x")
        except OSError:
            pass

    # -- progress loop ------------------------------------------------------

    def _run(self):
        try:
            while not self._stop:
                self._absorb_pending()
                timeout = self.sink.loop_timeout()
                events = self._sel.select(timeout=timeout)
                for key, mask in events:
                    kind, link = key.data
                    if kind == "wake":
                        try:
                            os.read(self._wake_r, 4096)
                        except OSError:
                            pass
                    elif kind == "coord":
                        if mask & selectors.EVENT_READ:
                            self._coord_read()
                        if mask & selectors.EVENT_WRITE:
                            self._coord_write()
                    else:
                        if mask & selectors.EVENT_READ:
                            self._peer_read(link)
                        if mask & selectors.EVENT_WRITE:
                            self._peer_write(link)
                self.sink.on_tick(time.monotonic())
        except Exception:
            log.exception("rank %d progress loop crashed", self.rank)
        finally:
            self._teardown()

    def _teardown(self):
        try:
            self._sel.close()
        except Exception:
            pass
        for l in self._links.values():
            try:
                l.sock.close()
            except OSError:
                pass
        try:
            self._coord.close()
        except OSError:
            pass
        for fd in (self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass
        self._closed.set()

    def _absorb_pending(self):
        with self._lock:
            frames = list(self._pending)
            self._pending.clear()
            coord = list(self._pending_coord)
            self._pending_coord.clear()
        for dest, frame, op, paylen in frames:
            link = self._links.get(dest)
            if link is None:
                continue
            link.outq.append((frame, op, paylen))
            self._arm_write(link)
            self._peer_write(link)
        if coord and self._coord_alive:
            self._coord_out.extend(b"".join(coord))
            self._arm_coord_write()
            self._coord_write()

    def _arm_write(self, link):
        if not link.want_write and link.outq:
            link.want_write = True
            try:
                self._sel.modify(link.sock,
                                 selectors.EVENT_READ | selectors.EVENT_WRITE,
                                 ("peer", link))
            except (KeyError, ValueError):
                pass

    def _disarm_write(self, link):
        if link.want_write and not link.outq:
            link.want_write = False
            try:
                self._sel.modify(link.sock, selectors.EVENT_READ, ("peer", link))
            except (KeyError, ValueError):
                pass

    def _peer_write(self, link):
        while link.outq:
            frame, op, paylen = link.outq[0]
            try:
                n = link.sock.send(frame[link.offset:] if link.offset else frame)
            except BlockingIOError:
                return
            except OSError:
                self._peer_gone(link)
                return
            self.raw_out += n
            link.offset += n
            if link.offset < len(frame):
                return
            link.outq.popleft()
            link.offset = 0
            self.frames_out += 1
            self.sink.on_frame_written(op, paylen)
        self._disarm_write(link)

    def _peer_read(self, link):
        try:
            data = link.sock.recv(RECV_CHUNK)
        except BlockingIOError:
            return
        except OSError:
            self._peer_gone(link)
            return
        if not data:
            self._peer_gone(link)
            return
        self.raw_in += len(data)
        link.decoder.feed(data)
        try:
            for comm, src, dst, tag, payload in link.decoder.frames():
                self.frames_in += 1
                self.sink.on_frame(comm, src, dst, tag, payload)
        except wire.WireError:
            log.exception("rank %d: bad frame from rank %d", self.rank, link.rank)
            self._peer_gone(link)

    def _peer_gone(self, link):
        if link.rank not in self._links:
            return
        del self._links[link.rank]
        try:
            self._sel.unregister(link.sock)
        except (KeyError, ValueError):
            pass
        try:
            link.sock.close()
        except OSError:
            pass
        if not self._stop:
            self.sink.on_peer_lost(link.rank)

    def _arm_coord_write(self):
        try:
            self._sel.modify(self._coord,
                             selectors.EVENT_READ | selectors.EVENT_WRITE,
                             ("coord", None))
        except (KeyError, ValueError):
            pass

    def _coord_write(self):
        while self._coord_out:
            try:
                n = self._coord.send(self._coord_out)
            except BlockingIOError:
                return
            except OSError:
                self._coord_gone()
                return
            del self._coord_out[:n]
        try:
            self._sel.modify(self._coord, selectors.EVENT_READ, ("coord", None))
        except (KeyError, ValueError):
            pass

    def _coord_read(self):
        try:
            data = self._coord.recv(RECV_CHUNK)
        except BlockingIOError:
            return
        except OSError:
            self._coord_gone()
            return
        if not data:
            self._coord_gone()
            return
        self._coord_decoder.feed(data)
        try:
            for mtype, payload in self._coord_decoder.messages():
                self.sink.on_coord_msg(mtype, payload)
        except wire.WireError:
            log.exception("rank %d: bad coordinator message", self.rank)
            self._coord_gone()

    def _coord_gone(self):
        if not self._coord_alive:
            return
        self._coord_alive = False
        try:
            self._sel.unregister(self._coord)
        except (KeyError, ValueError):
            pass
        try:
            self._coord.close()
        except OSError:
            pass
        if not self._stop:
            self.sink.on_coord_lost()
