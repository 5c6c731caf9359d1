"""Bit-exact per-rank checkpoint image format.

An image is a sequence of sections, each immediately followed by the
CRC32 (u32, little-endian) of its body. Sections appear in this order:

    HEADER   magic "MCKP", u32 format version (=1), u32 epoch, u32 rank,
             u32 world_size, u64 uid
    REGIONS  u32 count, count * { u64 start, u64 length, u8 tag,
             64s label (zero-padded UTF-8), u64 payload_offset },
             then the payload blob (upper payloads concatenated in entry
             order; payload_offset indexes into the blob, 0 and no bytes
             for lower regions which are never checkpointed)
    CALLLOG  u32 count, count * { u64 seq, u8 opcode, 4 * u64 args,
             u64 result }
    PENDING  u32 count, count * { u32 source, u32 dest, u32 comm,
             u32 tag, u64 length, payload }
    FDS      u32 count, count * { u32 fd, u8 half, 128s description }

All integers little-endian. Serialization is a pure function of the
image value, so identical rank state produces identical bytes.
"""

import struct
import zlib
from dataclasses import dataclass, field

from .errors import BadMagic, CrcMismatch, Truncated, VersionMismatch
from .fds import FdEntry, MAX_DESC_BYTES
from .records import CallLogEntry, Opcode, PendingMessage
from .regions import Half, MemoryRegion, encode_label

MAGIC = b"MCKP"
FORMAT_VERSION = 1

_HEADER_BODY = struct.Struct("<4sIIIIQ")
_REGION_ENTRY = struct.Struct("<QQB64sQ")
_CALL_ENTRY = struct.Struct("<QBQQQQQ")
_PENDING_HEAD = struct.Struct("<IIIIQ")
_FD_ENTRY = struct.Struct("<IB128s")

SECTIONS = ("HEADER", "REGIONS", "CALLLOG", "PENDING", "FDS")


@dataclass
class CheckpointImage:
    epoch: int
    rank: int
    world_size: int
    uid: int
    regions: list = field(default_factory=list)   # MemoryRegion (payload only for UPPER)
    call_log: list = field(default_factory=list)  # CallLogEntry
    pending: list = field(default_factory=list)   # PendingMessage
    fds: list = field(default_factory=list)       # FdEntry

    def upper_payload_bytes(self):
        return sum(r.length for r in self.regions if r.tag is Half.UPPER)

    def __eq__(self, other):
        if not isinstance(other, CheckpointImage):
            return NotImplemented
        return (self.epoch, self.rank, self.world_size, self.uid) == \
               (other.epoch, other.rank, other.world_size, other.uid) and \
               len(self.regions) == len(other.regions) and all(
                   a.start == b.start and a.length == b.length and
                   a.tag == b.tag and a.label == b.label and
                   bytes(a.payload or b"") == bytes(b.payload or b"")
                   for a, b in zip(self.regions, other.regions)) and \
               self.call_log == other.call_log and \
               self.pending == other.pending and \
               self.fds == other.fds


def _section(body):
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def serialize_image(img):
    """Encode an image; the result is byte-identical for identical state."""
    header = _HEADER_BODY.pack(MAGIC, FORMAT_VERSION, img.epoch, img.rank,
                               img.world_size, img.uid)

    entries = []
    blob = bytearray()
    for r in img.regions:
        if r.tag is Half.UPPER:
            payload = bytes(r.payload)
            if len(payload) != r.length:
                raise ValueError(
                    f"region {r.label!r} payload length {len(payload)} != "
                    f"region length {r.length}")
            offset = len(blob)
            blob.extend(payload)
        else:
            offset = 0
        entries.append(_REGION_ENTRY.pack(r.start, r.length, int(r.tag),
                                          encode_label(r.label), offset))
    regions = struct.pack("<I", len(img.regions)) + b"".join(entries) + bytes(blob)

    calls = [struct.pack("<I", len(img.call_log))]
    for c in img.call_log:
        a = tuple(c.args) + (0,) * (4 - len(c.args))
        calls.append(_CALL_ENTRY.pack(c.seq, int(c.opcode), *a[:4], c.result))
    calllog = b"".join(calls)

    pend = [struct.pack("<I", len(img.pending))]
    for p in img.pending:
        pend.append(_PENDING_HEAD.pack(p.source, p.dest, p.comm, p.tag,
                                       len(p.payload)))
        pend.append(p.payload)
    pending = b"".join(pend)

    fds = [struct.pack("<I", len(img.fds))]
    for e in img.fds:
        raw = e.description.encode("utf-8")
        if len(raw) > MAX_DESC_BYTES or b"\x00" in raw:
            raise ValueError("bad fd description")
        fds.append(_FD_ENTRY.pack(e.fd, int(e.half), raw))
    fdsec = b"".join(fds)

    return (_section(header) + _section(regions) + _section(calllog) +
            _section(pending) + _section(fdsec))


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.section_start = 0
        self.section = "HEADER"

    def begin(self, name):
        self.section = name
        self.section_start = self.pos

    def take(self, n):
        if self.pos + n > len(self.data):
            raise Truncated(
                f"image ends inside section {self.section} "
                f"(wanted {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def check_crc(self):
        body = self.data[self.section_start:self.pos]
        stored = struct.unpack("<I", self.take(4))[0]
        if stored != (zlib.crc32(body) & 0xFFFFFFFF):
            raise CrcMismatch(self.section)


def _decode_fixed_str(raw, what):
    raw = raw.rstrip(b"\x00")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CrcMismatch(what) from exc


def parse_image(data):
    """Decode and validate an image; raises an ImageCorrupt subclass on any
    malformed input."""
    cur = _Cursor(data)

    cur.begin("HEADER")
    raw = cur.take(_HEADER_BODY.size)
    magic, version, epoch, rank, world, uid = _HEADER_BODY.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad image magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"image format version {version}, expected {FORMAT_VERSION}")
    cur.check_crc()

    cur.begin("REGIONS")
    count = cur.u32()
    raw_entries = []
    blob_len = 0
    for _ in range(count):
        start, length, tag, label, offset = _REGION_ENTRY.unpack(
            cur.take(_REGION_ENTRY.size))
        raw_entries.append((start, length, tag, label, offset))
        if tag == int(Half.UPPER):
            blob_len += length
    blob = cur.take(blob_len)
    cur.check_crc()
    regions = []
    for start, length, tag, label, offset in raw_entries:
        try:
            half = Half(tag)
        except ValueError as exc:
            raise CrcMismatch("REGIONS") from exc
        payload = None
        if half is Half.UPPER:
            if offset + length > len(blob):
                raise Truncated("region payload beyond blob")
            payload = bytearray(blob[offset:offset + length])
        regions.append(MemoryRegion(start, length, half,
                                    _decode_fixed_str(label, "REGIONS"),
                                    payload))

    cur.begin("CALLLOG")
    count = cur.u32()
    call_log = []
    for _ in range(count):
        seq, op, a0, a1, a2, a3, result = _CALL_ENTRY.unpack(
            cur.take(_CALL_ENTRY.size))
        try:
            opcode = Opcode(op)
        except ValueError as exc:
            raise CrcMismatch("CALLLOG") from exc
        call_log.append(CallLogEntry(seq, opcode, (a0, a1, a2, a3), result))
    cur.check_crc()

    cur.begin("PENDING")
    count = cur.u32()
    pending = []
    for _ in range(count):
        src, dst, comm, tag, length = _PENDING_HEAD.unpack(
            cur.take(_PENDING_HEAD.size))
        payload = cur.take(length)
        pending.append(PendingMessage(src, dst, comm, tag, bytes(payload)))
    cur.check_crc()

    cur.begin("FDS")
    count = cur.u32()
    fds = []
    for _ in range(count):
        fd, half, desc = _FD_ENTRY.unpack(cur.take(_FD_ENTRY.size))
        try:
            half = Half(half)
        except ValueError as exc:
            raise CrcMismatch("FDS") from exc
        fds.append(FdEntry(fd, half, _decode_fixed_str(desc, "FDS")))
    cur.check_crc()

    if cur.pos != len(data):
        raise Truncated(
            f"{len(data) - cur.pos} trailing bytes after final section")

    return CheckpointImage(epoch, rank, world, uid, regions, call_log,
                           pending, fds)


def image_size(img):
    """Exact serialized size in bytes, computed without serializing."""
    size = _HEADER_BODY.size + 4
    size += 4 + len(img.regions) * _REGION_ENTRY.size + \
        img.upper_payload_bytes() + 4
    size += 4 + len(img.call_log) * _CALL_ENTRY.size + 4
    size += 4 + sum(_PENDING_HEAD.size + len(p.payload)
                    for p in img.pending) + 4
    size += 4 + len(img.fds) * _FD_ENTRY.size + 4
    return size
