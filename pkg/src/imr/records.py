"""Record model and sorted-run file format.

Every frame starts with a big-endian u32 body length, so frames are
self-delimiting.  Body layouts (all integers big-endian, fixed width):

    KV      u32 klen | key | u32 vlen | value
    INPUT   u32 partition | u64 sequence | KV body
    DELTA   sign byte ('+' or '-') | u32 partition | u64 sequence | KV body
    EDGE    flag byte ('V' value, 'T' tombstone) | u32 partition | u64 sequence
            | u32 klen | k2 | [u32 vlen | v2]      (no value part for 'T')

A run file is the 4-byte magic ``IMR1`` followed by a 21-byte header
(u16 version, u8 kind, u64 record count, u64 batch id) and the frames.
"""

import os
import struct
from typing import Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

MAGIC = b"IMR1"
FORMAT_VERSION = 1
MAX_FIELD = 0xFFFFFFFF

INSERT = b"+"
DELETE = b"-"

KIND_KV = ord("K")
KIND_INPUT = ord("I")
KIND_DELTA = ord("D")
KIND_EDGE = ord("E")

_U32 = struct.Struct(">I")
_MK = struct.Struct(">IQ")
_HEADER = struct.Struct(">HBQQ")
HEADER_SIZE = len(MAGIC) + _HEADER.size


class RecordError(Exception):
    pass


class EncodingLimitError(RecordError):
    pass


class CorruptFrameError(RecordError):
    def __init__(self, offset, reason="truncated frame"):
        super().__init__(f"{reason} at byte offset {offset}")
        self.offset = offset


class SortViolationError(RecordError):
    def __init__(self, previous, current):
        super().__init__(f"records out of order: {previous!r} followed by {current!r}")
        self.previous = previous
        self.current = current


class MapKey(NamedTuple):
    """Identity of one Map invocation: (input partition, record sequence)."""

    partition: int
    sequence: int


class KvRecord(NamedTuple):
    key: bytes
    value: bytes


class InputRecord(NamedTuple):
    """A map input record tagged with its stable MapKey."""

    key: bytes
    mk: MapKey
    value: bytes


class DeltaRecord(NamedTuple):
    """Signed change to the map input.

    ``mk`` names the logical record: a DELETE carries the MapKey the record
    was originally ingested with, so re-mapping it reproduces the exact
    edges to tombstone.  An update is a DELETE followed by an INSERT that
    reuses the same MapKey.
    """

    record: KvRecord
    sign: bytes
    mk: MapKey


class MRBGEdge(NamedTuple):
    """One preserved map-to-reduce edge; ``v2 is None`` marks a tombstone."""

    k2: bytes
    mk: MapKey
    v2: Optional[bytes]

    @property
    def tombstone(self):
        return self.v2 is None


Record = Union[KvRecord, InputRecord, DeltaRecord, MRBGEdge]


def _check_len(data, what):
    if len(data) > MAX_FIELD:
        raise EncodingLimitError(f"{what} of {len(data)} bytes exceeds {MAX_FIELD}")


def _kv_body(key, value):
    if not key:
        raise RecordError("record key must be non-empty")
    _check_len(key, "key")
    _check_len(value, "value")
    return b"".join((_U32.pack(len(key)), key, _U32.pack(len(value)), value))


def _frame(body):
    _check_len(body, "frame")
    return _U32.pack(len(body)) + body


def encode_record(r: Record) -> bytes:
    """Encode one record as a length-prefixed frame."""
    if isinstance(r, MRBGEdge):
        _check_len(r.k2, "key")
        if not r.k2:
            raise RecordError("edge key must be non-empty")
        head = (b"T" if r.v2 is None else b"V") + _MK.pack(*r.mk) + _U32.pack(len(r.k2)) + r.k2
        if r.v2 is None:
            return _frame(head)
        _check_len(r.v2, "value")
        return _frame(head + _U32.pack(len(r.v2)) + r.v2)
    if isinstance(r, DeltaRecord):
        if r.sign not in (INSERT, DELETE):
            raise RecordError(f"bad delta sign {r.sign!r}")
        return _frame(r.sign + _MK.pack(*r.mk) + _kv_body(*r.record))
    if isinstance(r, InputRecord):
        return _frame(_MK.pack(*r.mk) + _kv_body(r.key, r.value))
    if isinstance(r, KvRecord):
        return _frame(_kv_body(r.key, r.value))
    raise TypeError(f"cannot encode {type(r).__name__}")


def _need(buf, pos, n, end, base):
    if pos + n > end:
        raise CorruptFrameError(base + pos)


def _read_kv(buf, pos, end, base):
    _need(buf, pos, 4, end, base)
    (klen,) = _U32.unpack_from(buf, pos)
    pos += 4
    _need(buf, pos, klen, end, base)
    key = bytes(buf[pos:pos + klen])
    pos += klen
    _need(buf, pos, 4, end, base)
    (vlen,) = _U32.unpack_from(buf, pos)
    pos += 4
    _need(buf, pos, vlen, end, base)
    value = bytes(buf[pos:pos + vlen])
    return KvRecord(key, value), pos + vlen


def decode_frame(buf, pos=0, kind=KIND_KV, base=0):
    """Decode the frame starting at ``pos``; return ``(record, next_pos)``.

    ``base`` is added to offsets reported in :class:`CorruptFrameError`, so
    callers decoding a slice of a file can report file positions.
    """
    end = len(buf)
    _need(buf, pos, 4, end, base)
    (blen,) = _U32.unpack_from(buf, pos)
    start = pos + 4
    stop = start + blen
    if stop > end:
        raise CorruptFrameError(base + end)
    if kind == KIND_KV:
        rec, p = _read_kv(buf, start, stop, base)
    elif kind == KIND_INPUT:
        _need(buf, start, _MK.size, stop, base)
        mk = MapKey(*_MK.unpack_from(buf, start))
        kv, p = _read_kv(buf, start + _MK.size, stop, base)
        rec = InputRecord(kv.key, mk, kv.value)
    elif kind == KIND_DELTA:
        _need(buf, start, 1 + _MK.size, stop, base)
        sign = bytes(buf[start:start + 1])
        if sign not in (INSERT, DELETE):
            raise CorruptFrameError(base + start, f"bad sign byte {sign!r}")
        mk = MapKey(*_MK.unpack_from(buf, start + 1))
        kv, p = _read_kv(buf, start + 1 + _MK.size, stop, base)
        rec = DeltaRecord(kv, sign, mk)
    elif kind == KIND_EDGE:
        _need(buf, start, 1 + _MK.size + 4, stop, base)
        flag = buf[start]
        mk = MapKey(*_MK.unpack_from(buf, start + 1))
        p = start + 1 + _MK.size
        (klen,) = _U32.unpack_from(buf, p)
        p += 4
        _need(buf, p, klen, stop, base)
        k2 = bytes(buf[p:p + klen])
        p += klen
        if flag == ord("T"):
            rec = MRBGEdge(k2, mk, None)
        elif flag == ord("V"):
            _need(buf, p, 4, stop, base)
            (vlen,) = _U32.unpack_from(buf, p)
            p += 4
            _need(buf, p, vlen, stop, base)
            rec = MRBGEdge(k2, mk, bytes(buf[p:p + vlen]))
            p += vlen
        else:
            raise CorruptFrameError(base + start, f"bad edge flag {flag!r}")
    else:
        raise ValueError(f"unknown record kind {kind!r}")
    if p != stop:
        raise CorruptFrameError(base + p, "trailing bytes in frame")
    return rec, stop


def decode_record(data, kind=KIND_KV):
    """Decode exactly one frame occupying all of ``data``."""
    rec, end = decode_frame(data, 0, kind)
    if end != len(data):
        raise CorruptFrameError(end, "trailing bytes after frame")
    return rec


def iter_frames(buf, kind, base=0):
    pos = 0
    while pos < len(buf):
        rec, pos = decode_frame(buf, pos, kind, base)
        yield rec


def kind_of(r):
    if isinstance(r, MRBGEdge):
        return KIND_EDGE
    if isinstance(r, DeltaRecord):
        return KIND_DELTA
    if isinstance(r, InputRecord):
        return KIND_INPUT
    return KIND_KV


_SIGN_ORDER = {DELETE: 0, INSERT: 1}


def default_sort_key(kind):
    if kind == KIND_KV:
        return lambda r: r.key
    if kind == KIND_INPUT:
        return lambda r: (r.key, r.mk)
    if kind == KIND_DELTA:
        return lambda r: (r.record.key, r.mk, _SIGN_ORDER[r.sign])
    if kind == KIND_EDGE:
        return edge_order
    raise ValueError(f"unknown record kind {kind!r}")


def edge_order(e):
    """Sort key for edges: (k2, MapKey), tombstones before values on ties."""
    return (e.k2, e.mk, e.v2 is not None)


class RunMeta(NamedTuple):
    path: str
    kind: int
    count: int
    batch_id: int
    spans: List[Tuple[int, int]]


def write_sorted_run(path, records: Iterable[Record], kind=None, batch_id=0, sort_key=None) -> RunMeta:
    """Write records to ``path`` as a run file, validating sort order.

    Returns the run metadata including the ``(offset, length)`` span of every
    frame, usable for positioned reads.
    """
    records = list(records)
    if kind is None:
        kind = kind_of(records[0]) if records else KIND_KV
    key = sort_key or default_sort_key(kind)
    prev = None
    for r in records:
        k = key(r)
        if prev is not None and k < prev[0]:
            raise SortViolationError(prev[1], r)
        prev = (k, r)
    spans = []
    chunks = [MAGIC, _HEADER.pack(FORMAT_VERSION, kind, len(records), batch_id)]
    offset = HEADER_SIZE
    for r in records:
        frame = encode_record(r)
        spans.append((offset, len(frame)))
        offset += len(frame)
        chunks.append(frame)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)
    return RunMeta(str(path), kind, len(records), batch_id, spans)


class RunReader:
    """Immutable reader over one run file; safe to share between workers."""

    def __init__(self, path):
        self.path = str(path)
        with open(self.path, "rb") as f:
            self._data = f.read()
        if len(self._data) < HEADER_SIZE or self._data[:4] != MAGIC:
            raise CorruptFrameError(0, "bad run file header")
        version, self.kind, self.count, self.batch_id = _HEADER.unpack_from(self._data, 4)
        if version != FORMAT_VERSION:
            raise CorruptFrameError(4, f"unsupported format version {version}")

    def __iter__(self) -> Iterator[Record]:
        return self.scan()

    def __len__(self):
        return self.count

    def scan(self):
        data = memoryview(self._data)
        pos = HEADER_SIZE
        n = 0
        while pos < len(data):
            rec, pos = decode_frame(data, pos, self.kind)
            n += 1
            yield rec
        if n != self.count:
            raise CorruptFrameError(pos, f"header says {self.count} records, found {n}")

    def read_at(self, offset, length):
        if offset < HEADER_SIZE or offset + length > len(self._data):
            raise CorruptFrameError(offset, "span outside run body")
        return decode_record(self._data[offset:offset + length], self.kind)

    def raw(self):
        return self._data


def open_sorted_run(path) -> RunReader:
    if not os.path.exists(path):
        raise FileNotFoundError(f"run file not found: {path}")
    return RunReader(path)


def read_run(path):
    return list(open_sorted_run(path))
