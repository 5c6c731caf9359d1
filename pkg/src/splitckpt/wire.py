"""Binary wire formats, all little-endian.

Data plane (rank-to-rank messages)
----------------------------------
24-byte header followed by the payload:

    u32 magic 0x4D504D53 ("MPMS")
    u32 communicator id
    u32 source rank
    u32 dest rank
    u32 tag
    u32 payload length

Control plane (rank/client <-> coordinator)
-------------------------------------------
Length-prefixed TLV frames: u32 length (covering type + payload),
u16 message type, payload. Strings are u16 length + UTF-8 bytes.

    REGISTER(1)        rank u32, world u32, epoch u32, flags u8,
                       proposed_uid u64, node str, endpoint str
    HEARTBEAT(2)       seq u64
    HEARTBEAT_ACK(3)   seq u64
    CKPT_REQUEST(4)    epoch u32
    DRAIN_REPORT(5)    epoch u32, bytes_sent u64, bytes_received u64,
                       pending_ops u32, msgs_sent u64, msgs_received u64
    QUIESCE_OK(6)      epoch u32
    WRITE_IMAGE(7)     epoch u32, path str, backend str
    DONE(8)            bytes u64, ms u64
    CKPT_ABORT(9)      epoch u32, reason str
    RESTART_DONE(10)   epoch u32
    DEREGISTER(11)     rank u32
    REGISTER_REPLY(12) status u8, uid u64, keepalive_ms u32, misses u16,
                       error str
    PEER_TABLE(13)     count u32, { rank u32, endpoint str } *
    RESUME(14)         epoch u32
    TRIGGER(15)        backend str, out_dir str
    TRIGGER_REPLY(16)  status u8, text str (manifest path or error)
    WRITE_FAILED(17)   reason str
"""

import enum
import struct

from .errors import SplitCkptError

FRAME_MAGIC = 0x4D504D53  # "MPMS"
FRAME_HEADER = struct.Struct("<IIIIII")
FRAME_HEADER_SIZE = FRAME_HEADER.size  # 24

MAX_FRAME_PAYLOAD = 1 << 30
MAX_TLV_PAYLOAD = 1 << 24

REGISTER_FLAG_RESTART = 0x01


class WireError(SplitCkptError):
    pass


class MsgType(enum.IntEnum):
    REGISTER = 1
    HEARTBEAT = 2
    HEARTBEAT_ACK = 3
    CKPT_REQUEST = 4
    DRAIN_REPORT = 5
    QUIESCE_OK = 6
    WRITE_IMAGE = 7
    DONE = 8
    CKPT_ABORT = 9
    RESTART_DONE = 10
    DEREGISTER = 11
    REGISTER_REPLY = 12
    PEER_TABLE = 13
    RESUME = 14
    TRIGGER = 15
    TRIGGER_REPLY = 16
    WRITE_FAILED = 17


# --- data-plane framing --------------------------------------------------

def pack_frame(comm, source, dest, tag, payload):
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise WireError("payload too large")
    return FRAME_HEADER.pack(FRAME_MAGIC, comm, source, dest, tag,
                             len(payload)) + payload


class FrameDecoder:
    """Incremental decoder for a byte stream of data-plane frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data):
        self._buf.extend(data)

    def frames(self):
        """Yield (comm, source, dest, tag, payload) for each complete frame."""
        while True:
            if len(self._buf) < FRAME_HEADER_SIZE:
                return
            magic, comm, src, dst, tag, plen = FRAME_HEADER.unpack_from(self._buf)
            if magic != FRAME_MAGIC:
                raise WireError(f"bad frame magic {magic:#x}")
            if plen > MAX_FRAME_PAYLOAD:
                raise WireError(f"frame payload length {plen} too large")
            total = FRAME_HEADER_SIZE + plen
            if len(self._buf) < total:
                return
            payload = bytes(self._buf[FRAME_HEADER_SIZE:total])
            del self._buf[:total]
            yield comm, src, dst, tag, payload


# --- TLV framing ----------------------------------------------------------

def pack_msg(mtype, payload=b""):
    if len(payload) > MAX_TLV_PAYLOAD:
        raise WireError("TLV payload too large")
    return struct.pack("<IH", len(payload) + 2, int(mtype)) + payload


class TlvDecoder:
    def __init__(self):
        self._buf = bytearray()

    def feed(self, data):
        self._buf.extend(data)

    def messages(self):
        """Yield (MsgType, payload bytes) for each complete message."""
        while True:
            if len(self._buf) < 4:
                return
            (length,) = struct.unpack_from("<I", self._buf)
            if length < 2 or length - 2 > MAX_TLV_PAYLOAD:
                raise WireError(f"bad TLV length {length}")
            if len(self._buf) < 4 + length:
                return
            (mtype,) = struct.unpack_from("<H", self._buf, 4)
            payload = bytes(self._buf[6:4 + length])
            del self._buf[:4 + length]
            try:
                mtype = MsgType(mtype)
            except ValueError as exc:
                raise WireError(f"unknown message type {mtype}") from exc
            yield mtype, payload


# --- field packing --------------------------------------------------------

class Writer:
    def __init__(self):
        self._parts = []

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))
        return self

    def u16(self, v):
        self._parts.append(struct.pack("<H", v))
        return self

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v):
        self._parts.append(struct.pack("<Q", v))
        return self

    def string(self, s):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WireError("string field too long")
        self._parts.append(struct.pack("<H", len(raw)) + raw)
        return self

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    def __init__(self, data):
        self._data = data
        self._pos = 0

    def _take(self, n):
        if self._pos + n > len(self._data):
            raise WireError("message payload truncated")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def string(self):
        n = self.u16()
        return self._take(n).decode("utf-8")

    def done(self):
        if self._pos != len(self._data):
            raise WireError("trailing bytes in message payload")


# --- message constructors / parsers ---------------------------------------

def msg_register(rank, world, epoch, restarting, proposed_uid, node, endpoint):
    flags = REGISTER_FLAG_RESTART if restarting else 0
    w = (Writer().u32(rank).u32(world).u32(epoch).u8(flags)
         .u64(proposed_uid).string(node).string(endpoint))
    return pack_msg(MsgType.REGISTER, w.getvalue())


def parse_register(payload):
    r = Reader(payload)
    out = {
        "rank": r.u32(), "world": r.u32(), "epoch": r.u32(),
        "flags": r.u8(), "proposed_uid": r.u64(),
        "node": r.string(), "endpoint": r.string(),
    }
    r.done()
    out["restarting"] = bool(out["flags"] & REGISTER_FLAG_RESTART)
    return out


def msg_register_reply(status, uid=0, keepalive_ms=0, misses=0, error=""):
    w = Writer().u8(status).u64(uid).u32(keepalive_ms).u16(misses).string(error)
    return pack_msg(MsgType.REGISTER_REPLY, w.getvalue())


def parse_register_reply(payload):
    r = Reader(payload)
    out = {"status": r.u8(), "uid": r.u64(), "keepalive_ms": r.u32(),
           "misses": r.u16(), "error": r.string()}
    r.done()
    return out


def msg_heartbeat(seq):
    return pack_msg(MsgType.HEARTBEAT, Writer().u64(seq).getvalue())


def msg_heartbeat_ack(seq):
    return pack_msg(MsgType.HEARTBEAT_ACK, Writer().u64(seq).getvalue())


def parse_u64(payload):
    r = Reader(payload)
    v = r.u64()
    r.done()
    return v


def msg_epoch(mtype, epoch):
    return pack_msg(mtype, Writer().u32(epoch).getvalue())


def parse_epoch(payload):
    r = Reader(payload)
    v = r.u32()
    r.done()
    return v


def msg_drain_report(epoch, bytes_sent, bytes_received, pending_ops,
                     msgs_sent, msgs_received):
    w = (Writer().u32(epoch).u64(bytes_sent).u64(bytes_received)
         .u32(pending_ops).u64(msgs_sent).u64(msgs_received))
    return pack_msg(MsgType.DRAIN_REPORT, w.getvalue())


def parse_drain_report(payload):
    r = Reader(payload)
    out = {"epoch": r.u32(), "bytes_sent": r.u64(), "bytes_received": r.u64(),
           "pending_ops": r.u32(), "msgs_sent": r.u64(),
           "msgs_received": r.u64()}
    r.done()
    return out


def msg_write_image(epoch, path, backend):
    w = Writer().u32(epoch).string(path).string(backend)
    return pack_msg(MsgType.WRITE_IMAGE, w.getvalue())


def parse_write_image(payload):
    r = Reader(payload)
    out = {"epoch": r.u32(), "path": r.string(), "backend": r.string()}
    r.done()
    return out


def msg_done(nbytes, ms):
    return pack_msg(MsgType.DONE, Writer().u64(nbytes).u64(ms).getvalue())


def parse_done(payload):
    r = Reader(payload)
    out = {"bytes": r.u64(), "ms": r.u64()}
    r.done()
    return out


def msg_ckpt_abort(epoch, reason):
    return pack_msg(MsgType.CKPT_ABORT,
                    Writer().u32(epoch).string(reason).getvalue())


def parse_ckpt_abort(payload):
    r = Reader(payload)
    out = {"epoch": r.u32(), "reason": r.string()}
    r.done()
    return out


def msg_deregister(rank):
    return pack_msg(MsgType.DEREGISTER, Writer().u32(rank).getvalue())


def msg_peer_table(entries):
    w = Writer().u32(len(entries))
    for rank, endpoint in sorted(entries.items()):
        w.u32(rank).string(endpoint)
    return pack_msg(MsgType.PEER_TABLE, w.getvalue())


def parse_peer_table(payload):
    r = Reader(payload)
    n = r.u32()
    out = {}
    for _ in range(n):
        rank = r.u32()
        out[rank] = r.string()
    r.done()
    return out


def msg_trigger(backend, out_dir):
    return pack_msg(MsgType.TRIGGER,
                    Writer().string(backend).string(out_dir).getvalue())


def parse_trigger(payload):
    r = Reader(payload)
    out = {"backend": r.string(), "out_dir": r.string()}
    r.done()
    return out


def msg_trigger_reply(status, text):
    return pack_msg(MsgType.TRIGGER_REPLY,
                    Writer().u8(status).string(text).getvalue())


def parse_trigger_reply(payload):
    r = Reader(payload)
    out = {"status": r.u8(), "text": r.string()}
    r.done()
    return out


def msg_write_failed(reason):
    return pack_msg(MsgType.WRITE_FAILED, Writer().string(reason).getvalue())


def parse_write_failed(payload):
    r = Reader(payload)
    out = {"reason": r.string()}
    r.done()
    return out
