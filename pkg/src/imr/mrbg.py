"""Per-partition store for preserved map-to-reduce edges.

Edges sharing a K2 sit contiguously in ``mrbg.dat`` as a chunk.  Each merge
pass appends its updated chunks, in ascending K2 order, as a new batch at
the end of the file; ``mrbg.idx`` maps every live K2 to the newest copy.
Obsolete copies stay in the file until :meth:`MRBGStore.compact`.

Reads during a merge pass go through read windows sized by probing the
gaps between the chunks still to be queried.  Window policies:

    index            one read per chunk, exactly its bytes
    single-fixed     one window of ``fixed_window`` bytes from the chunk start
    multi-fixed      like single-fixed, one window per batch, clipped to it
    single-dynamic   gap-probing window, one window shared by all batches
    multi-dynamic    gap-probing window, one window per batch
"""

import logging
import os
import struct
from typing import Dict, List, NamedTuple, Optional, Tuple

from .records import KIND_EDGE, CorruptFrameError, encode_record, iter_frames
from .engine import group_by_key

log = logging.getLogger(__name__)

DAT_NAME = "mrbg.dat"
IDX_NAME = "mrbg.idx"
DAT_MAGIC = b"IMRG"
IDX_MAGIC = b"IMRX"
VERSION = 1

_DAT_HEADER = struct.Struct(">4sIQ")
_IDX_HEADER = struct.Struct(">4sIQI")
_BATCH = struct.Struct(">QQQ")
_ENTRY_TAIL = struct.Struct(">QQI")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

POLICIES = ("index", "single-fixed", "multi-fixed", "single-dynamic", "multi-dynamic")
INF = float("inf")


class StoreError(Exception):
    pass


class ChunkNotFound(StoreError, KeyError):
    pass


class StoreDirtyError(StoreError):
    pass


class SimulatedCrash(StoreError):
    """Raised by the crash-injection hook to model a process dying."""


class IndexEntry(NamedTuple):
    batch: int
    offset: int
    length: int


class Batch(NamedTuple):
    batch_id: int
    start: int
    end: int


class _Window:
    __slots__ = ("start", "data")

    def __init__(self, start, data):
        self.start = start
        self.data = data

    def covers(self, off, length):
        return self.start <= off and off + length <= self.start + len(self.data)

    def slice(self, off, length):
        s = off - self.start
        return self.data[s:s + length]


def encode_chunk(edges):
    return b"".join(encode_record(e) for e in edges)


def decode_chunk(data, base=0):
    return list(iter_frames(memoryview(data), KIND_EDGE, base))


class MRBGStore:
    def __init__(self, directory, gap_threshold=102400, read_cache_size=1 << 20,
                 append_buffer_size=4 << 20, policy="multi-dynamic", fixed_window=None):
        if policy not in POLICIES:
            raise ValueError(f"unknown window policy {policy!r}")
        if gap_threshold >= read_cache_size:
            raise ValueError("gap threshold must be smaller than the read cache")
        self.dir = str(directory)
        self.gap_threshold = gap_threshold
        self.read_cache_size = read_cache_size
        self.append_buffer_size = append_buffer_size
        self.policy = policy
        self.fixed_window = fixed_window or read_cache_size
        self.dat_path = os.path.join(self.dir, DAT_NAME)
        self.idx_path = os.path.join(self.dir, IDX_NAME)
        self.dirty = False
        self._crash_at = None
        self.reset_counters()
        os.makedirs(self.dir, exist_ok=True)
        self._open()

    # -- lifecycle -------------------------------------------------------

    def reset_counters(self):
        self.reads = 0
        self.bytes_read = 0
        self.cache_hits = 0
        self.oversized_reads = 0
        self.tombstone_misses = 0
        self.chunks_appended = 0

    def counters(self):
        return {
            "reads": self.reads,
            "bytes_read": self.bytes_read,
            "cache_hits": self.cache_hits,
            "oversized_reads": self.oversized_reads,
            "tombstone_misses": self.tombstone_misses,
            "chunks_appended": self.chunks_appended,
        }

    def _open(self):
        self._recover_compaction()
        if not os.path.exists(self.dat_path):
            with open(self.dat_path, "wb") as f:
                f.write(_DAT_HEADER.pack(DAT_MAGIC, VERSION, 0))
            self.generation = 0
            self.index: Dict[bytes, IndexEntry] = {}
            self.batches: List[Batch] = []
            self._write_index()
        else:
            self.generation = self._read_dat_generation(self.dat_path)
            gen, self.batches, self.index = self._read_index(self.idx_path)
            if gen != self.generation:
                raise StoreError(f"index generation {gen} does not match data generation {self.generation}")
        self._fd = os.open(self.dat_path, os.O_RDWR)
        self._end = os.fstat(self._fd).st_size
        self._windows: Dict[Optional[int], _Window] = {}
        self._pass = None
        self.window_starts = []
        self._pending: Dict[bytes, Optional[Tuple[int, int]]] = {}
        self._buf = bytearray()
        self._buf_base = self._end
        self._batch_start = self._end
        self._last_appended = None

    def close(self):
        if getattr(self, "_fd", None) is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _maybe_crash(self, point):
        if self._crash_at == point:
            raise SimulatedCrash(point)

    def _check_clean(self):
        if self.dirty:
            raise StoreDirtyError(f"store {self.dir} is dirty after a failed flush; reopen it")

    # -- index file ------------------------------------------------------

    @staticmethod
    def _read_dat_generation(path):
        with open(path, "rb") as f:
            head = f.read(_DAT_HEADER.size)
        if len(head) < _DAT_HEADER.size:
            raise CorruptFrameError(0, "truncated MRBGraph file header")
        magic, version, gen = _DAT_HEADER.unpack(head)
        if magic != DAT_MAGIC or version != VERSION:
            raise CorruptFrameError(0, "bad MRBGraph file header")
        return gen

    @staticmethod
    def _read_index(path):
        with open(path, "rb") as f:
            data = f.read()
        magic, version, gen, nb = _IDX_HEADER.unpack_from(data, 0)
        if magic != IDX_MAGIC or version != VERSION:
            raise CorruptFrameError(0, "bad index header")
        pos = _IDX_HEADER.size
        batches = []
        for _ in range(nb):
            batches.append(Batch(*_BATCH.unpack_from(data, pos)))
            pos += _BATCH.size
        (ne,) = _U64.unpack_from(data, pos)
        pos += 8
        index = {}
        for _ in range(ne):
            (klen,) = _U32.unpack_from(data, pos)
            pos += 4
            key = bytes(data[pos:pos + klen])
            pos += klen
            index[key] = IndexEntry(*_ENTRY_TAIL.unpack_from(data, pos))
            pos += _ENTRY_TAIL.size
        if pos != len(data):
            raise CorruptFrameError(pos, "trailing bytes in index")
        return gen, batches, index

    @staticmethod
    def _encode_index(gen, batches, index):
        parts = [_IDX_HEADER.pack(IDX_MAGIC, VERSION, gen, len(batches))]
        parts.extend(_BATCH.pack(*b) for b in batches)
        parts.append(_U64.pack(len(index)))
        for key in sorted(index):
            e = index[key]
            parts.append(_U32.pack(len(key)) + key + _ENTRY_TAIL.pack(*e))
        return b"".join(parts)

    def _write_index(self, path=None, gen=None, batches=None, index=None):
        path = path or self.idx_path
        data = self._encode_index(self.generation if gen is None else gen,
                                  self.batches if batches is None else batches,
                                  self.index if index is None else index)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)

    # -- queries ---------------------------------------------------------

    def __contains__(self, k2):
        return k2 in self.index

    def __len__(self):
        return len(self.index)

    def keys(self):
        return sorted(self.index)

    def begin_pass(self, keys):
        """Declare the sorted list of keys the coming pass will query."""
        keys = list(keys)
        self._windows = {}
        by_batch: Dict[int, List[int]] = {}
        slot = {}
        for i, k in enumerate(keys):
            e = self.index.get(k)
            if e is None:
                continue
            lst = by_batch.setdefault(e.batch, [])
            slot[i] = (e.batch, len(lst))
            lst.append(i)
        self._pass = (keys, by_batch, slot)
        self._prev_read = {}
        self.window_starts = []

    def _pread(self, offset, length):
        data = os.pread(self._fd, length, offset)
        if len(data) != length:
            raise CorruptFrameError(offset + len(data), "short read from MRBGraph file")
        self.reads += 1
        self.bytes_read += length
        return data

    def _batch_bounds(self, batch_id):
        for b in self.batches:
            if b.batch_id == batch_id:
                return b
        raise StoreError(f"unknown batch {batch_id}")

    def window_size(self, cursor):
        """Read window size for the key at ``cursor`` of the current pass.

        Starting from the queried chunk, keep extending over the next queried
        chunk of the same batch while the gap before it is below the gap
        threshold and the window stays inside the read cache.  Past the last
        queried chunk the gap is infinite.
        """
        keys, by_batch, slot = self._pass
        batch, rank = slot[cursor]
        members = by_batch[batch]
        T, cache = self.gap_threshold, self.read_cache_size
        gap, w = 0, 0
        cur = self.index[keys[members[rank]]]
        while gap < T and w + gap + cur.length < cache:
            w += gap + cur.length
            rank += 1
            if rank < len(members):
                nxt = self.index[keys[members[rank]]]
                gap = nxt.offset - cur.offset - cur.length
                cur = nxt
            else:
                gap = INF
        return w

    def query(self, k2, cursor=None):
        """Return the latest chunk for ``k2`` as a list of edges."""
        self._check_clean()
        e = self.index.get(k2)
        if e is None:
            raise ChunkNotFound(k2)
        if self._pass is None or cursor is None:
            self.begin_pass([k2])
            cursor = 0
        data = self._fetch(e, cursor)
        return decode_chunk(data, e.offset)

    def _fetch(self, e, cursor):
        policy = self.policy
        if policy == "index":
            return self._pread(e.offset, e.length)
        wkey = e.batch if policy.startswith("multi") else None
        win = self._windows.get(wkey)
        if win is not None and win.covers(e.offset, e.length):
            self.cache_hits += 1
            return win.slice(e.offset, e.length)
        if policy.endswith("dynamic"):
            w = self.window_size(cursor)
        else:
            w = self.fixed_window
            limit = self._batch_bounds(e.batch).end if policy == "multi-fixed" else self._end
            w = max(min(w, limit - e.offset), 0)
        if w < e.length:
            if e.length >= self.read_cache_size:
                self.oversized_reads += 1
            return self._pread(e.offset, e.length)
        if wkey is not None:
            prev = self._prev_read.get(wkey)
            if prev is not None and e.offset < prev:
                raise StoreError("read window moved backwards within a pass")
            self._prev_read[wkey] = e.offset
        self.window_starts.append((wkey, e.offset))
        win = _Window(e.offset, self._pread(e.offset, w))
        self._windows[wkey] = win
        return win.slice(e.offset, e.length)

    def get(self, k2):
        try:
            return self.query(k2)
        except ChunkNotFound:
            return []

    def scan(self):
        """Yield every live chunk in key order (full reads, no counters)."""
        with open(self.dat_path, "rb") as f:
            data = f.read()
        for k2 in sorted(self.index):
            e = self.index[k2]
            yield k2, decode_chunk(data[e.offset:e.offset + e.length], e.offset)

    # -- merging ---------------------------------------------------------

    def merge_delta(self, delta_edges, maintain=True):
        """Join a (K2, MK)-sorted delta edge stream with the stored chunks.

        Yields ``(k2, merged_edges)`` per delta K2; an empty list means every
        edge of that K2 was deleted.  When ``maintain`` is set the merged
        chunks are appended as a new batch and the index is repointed once
        the generator is exhausted.
        """
        self._check_clean()
        groups = list(group_by_key(delta_edges))
        self.begin_pass([k for k, _ in groups])
        if maintain:
            self._start_append()
        for i, (k2, delta) in enumerate(groups):
            if k2 in self.index:
                current = {e.mk: e for e in self.query(k2, i)}
            else:
                current = {}
            for d in delta:
                if d.v2 is None:
                    if current.pop(d.mk, None) is None:
                        self.tombstone_misses += 1
                else:
                    current[d.mk] = d
            merged = [current[mk] for mk in sorted(current)]
            if maintain:
                if merged:
                    self.append_chunk(k2, merged)
                else:
                    self.drop(k2)
            yield k2, merged
        self._pass = None
        if maintain:
            self.flush()

    def _start_append(self):
        self._pending = {}
        self._buf = bytearray()
        self._batch_start = self._end
        self._buf_base = self._end
        self._last_appended = None

    def append_chunk(self, k2, edges):
        """Buffer one chunk for the current batch; keys must ascend."""
        self._check_clean()
        if self._last_appended is not None and k2 <= self._last_appended:
            raise StoreError(f"chunks must be appended in ascending key order: {k2!r} after {self._last_appended!r}")
        self._last_appended = k2
        data = encode_chunk(edges)
        offset = self._buf_base + len(self._buf)
        self._buf += data
        self._pending[k2] = (offset, len(data))
        self.chunks_appended += 1
        if len(self._buf) >= self.append_buffer_size:
            self._spill_buffer()

    def drop(self, k2):
        self._pending[k2] = None

    def _spill_buffer(self):
        if not self._buf:
            return
        os.pwrite(self._fd, bytes(self._buf), self._buf_base)
        self._buf_base += len(self._buf)
        self._buf = bytearray()

    def flush(self):
        """Write buffered chunks as a new batch and repoint the index."""
        self._check_clean()
        try:
            self._spill_buffer()
            self._maybe_crash("flush_before_index")
            new_end = self._buf_base
            batches = list(self.batches)
            index = dict(self.index)
            if new_end > self._batch_start:
                bid = max((b.batch_id for b in batches), default=0) + 1
                batches.append(Batch(bid, self._batch_start, new_end))
            else:
                bid = None
            for k2, pos in self._pending.items():
                if pos is None:
                    index.pop(k2, None)
                else:
                    index[k2] = IndexEntry(bid, pos[0], pos[1])
            live = {e.batch for e in index.values()}
            batches = [b for b in batches if b.batch_id in live]
            self._write_index(batches=batches, index=index)
        except SimulatedCrash:
            self.dirty = True
            raise
        except Exception:
            self.dirty = True
            raise
        self.batches, self.index = batches, index
        self._end = new_end
        self._pending = {}
        self._last_appended = None
        self._batch_start = self._buf_base = self._end

    def build(self, groups):
        """Append ``(k2, edges)`` groups (ascending keys) as one batch."""
        self._start_append()
        for k2, edges in groups:
            if edges:
                self.append_chunk(k2, edges)
        self.flush()

    # -- maintenance -----------------------------------------------------

    def file_size(self):
        return os.path.getsize(self.dat_path)

    def live_bytes(self):
        return sum(e.length for e in self.index.values())

    def compact(self):
        """Rewrite only live chunks as a single batch and swap file + index.

        The new data and index are written under temporary names first; the
        data rename is the commit point, and the index carries the data
        generation so an interrupted swap is rolled forward at open.
        """
        self._check_clean()
        gen = self.generation + 1
        tmp_dat = self.dat_path + ".compact"
        tmp_idx = self.idx_path + ".compact"
        with open(self.dat_path, "rb") as f:
            old = f.read()
        out = bytearray(_DAT_HEADER.pack(DAT_MAGIC, VERSION, gen))
        index = {}
        start = len(out)
        for k2 in sorted(self.index):
            e = self.index[k2]
            index[k2] = IndexEntry(1, len(out), e.length)
            out += old[e.offset:e.offset + e.length]
        batches = [Batch(1, start, len(out))] if index else []
        with open(tmp_dat, "wb") as f:
            f.write(out)
            f.flush()
            os.fsync(f.fileno())
        data = self._encode_index(gen, batches, index)
        with open(tmp_idx, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        self._maybe_crash("compact_after_write")
        self.close()
        os.replace(tmp_dat, self.dat_path)
        self._maybe_crash("compact_after_data_swap")
        os.replace(tmp_idx, self.idx_path)
        self._open()

    rebuild_index = compact

    def _recover_compaction(self):
        tmp_dat = self.dat_path + ".compact"
        tmp_idx = self.idx_path + ".compact"
        if os.path.exists(tmp_dat):
            # Crash before the data swap: the old pair is still consistent.
            os.remove(tmp_dat)
            if os.path.exists(tmp_idx):
                os.remove(tmp_idx)
            return
        if os.path.exists(tmp_idx) and os.path.exists(self.dat_path):
            gen = self._read_dat_generation(self.dat_path)
            idx_gen = self._read_index(tmp_idx)[0]
            if idx_gen == gen:
                log.info("rolling forward interrupted compaction in %s", self.dir)
                os.replace(tmp_idx, self.idx_path)
            else:
                os.remove(tmp_idx)
        for stale in (self.idx_path + ".tmp",):
            if os.path.exists(stale):
                os.remove(stale)

    def files(self):
        return [self.dat_path, self.idx_path]
