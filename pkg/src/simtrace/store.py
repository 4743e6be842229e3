"""Offline trace datasets: pruned serialization, sharded files, external
sort by trace type, and the distributed minibatch sampler.

Shard file layout (all integers little-endian):
  magic 'ETLM' | u16 version
  u32 dictionary delta count | (u32 id + string) per new address
  u32 trace count
  index: per trace u64 record offset | u32 record length |
         u32 latent count | u64 type id | u32 original index
  packed records

Records prune everything re-derivable: per-entry log-probabilities and the
run result are recomputed or replayed, not stored. Addresses are stored as
shorthand dictionary IDs.
"""

from __future__ import annotations

import heapq
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .addressing import Address, AddressDictionary
from .trace import EntryKind, Trace, TraceEntry
from .values import Value
from .wire import ValueReader, encode_distribution, encode_value

MAGIC = b"ETLM"
VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_INDEX_ENTRY = struct.Struct("<QIIQI")  # offset, length, latents, type_id, original


def _enc_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


# ---------------------------------------------------------------------------
# record codec


def encode_record(trace: Trace, dictionary: AddressDictionary,
                  inline_addresses: bool = False) -> bytes:
    """Pruned trace record. With inline_addresses=True the full address
    strings are embedded instead of shorthand IDs (the baseline the
    dictionary is measured against)."""
    out = bytearray()
    out += _U32.pack(getattr(trace, "original_index", 0))
    if trace.observation is None:
        out.append(0)
    else:
        out.append(1)
        out += encode_value(trace.observation)
    out += _U32.pack(len(trace.entries))
    for e in trace.entries:
        if inline_addresses:
            out += _enc_string(e.address.full)
        else:
            out += _U32.pack(dictionary.id_for(e.address.full))
        out += _U32.pack(e.address.instance)
        out.append(int(e.kind))
        out.append((1 if e.control else 0) | (2 if e.replace else 0))
        out += encode_distribution(e.distribution)
        out += encode_value(e.value)
    return bytes(out)


def decode_record(data: bytes, dictionary: AddressDictionary) -> Trace:
    r = ValueReader(data)
    original = r.u32()
    observation = r.value() if r.boolean() else None
    n = r.u32()
    t = Trace(observation=observation)
    for _ in range(n):
        full = dictionary.full_for(r.u32())
        instance = r.u32()
        kind = EntryKind(r.u8())
        flags = r.u8()
        dist = r.distribution()
        value = r.value()
        entry = TraceEntry(Address(full, instance), dist, value,
                           dist.log_prob(value), kind,
                           control=bool(flags & 1), replace=bool(flags & 2))
        entry.reused = False
        t.entries.append(entry)
    t.finalize()
    t.original_index = original
    return t


# ---------------------------------------------------------------------------
# shard files


def _write_shard(path: str, records: list[tuple[bytes, int, int]],
                 dict_delta: list[tuple[int, str]]):
    """records: (record bytes, latent count, type_id); delta: (id, full)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_U16.pack(VERSION))
        f.write(_U32.pack(len(dict_delta)))
        for shorthand, full in dict_delta:
            f.write(_U32.pack(shorthand))
            f.write(_enc_string(full))
        f.write(_U32.pack(len(records)))
        offset = 0
        for raw, latents, type_id in records:
            original = _U32.unpack(raw[:4])[0]
            f.write(_INDEX_ENTRY.pack(offset, len(raw), latents, type_id, original))
            offset += len(raw)
        for raw, _, _ in records:
            f.write(raw)


@dataclass
class _ShardInfo:
    path: str
    records_start: int
    count: int


@dataclass
class IndexEntry:
    shard: int
    offset: int
    length: int
    latents: int
    type_id: int
    original_index: int


class TraceDataset:
    """Random-access view over a directory of shard files."""

    def __init__(self, path: str):
        self.path = path
        with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
            self.manifest = json.load(f)
        if self.manifest.get("format") != "etlm":
            raise ValueError(f"{path} is not a trace dataset")
        self.sorted = bool(self.manifest["sorted"])
        self.dictionary = AddressDictionary()
        self.shards: list[_ShardInfo] = []
        self.index: list[IndexEntry] = []
        self._handles: dict[int, object] = {}
        for shard_i, name in enumerate(self.manifest["shards"]):
            shard_path = os.path.join(path, name)
            with open(shard_path, "rb") as f:
                head = f.read(4 + 2)
                if head[:4] != MAGIC:
                    raise ValueError(f"{shard_path}: bad magic")
                version = _U16.unpack(head[4:6])[0]
                if version != VERSION:
                    raise ValueError(f"{shard_path}: unsupported version {version}")
                delta_n = _U32.unpack(f.read(4))[0]
                delta = []
                for _ in range(delta_n):
                    shorthand = _U32.unpack(f.read(4))[0]
                    slen = _U32.unpack(f.read(4))[0]
                    delta.append((shorthand, f.read(slen).decode("utf-8")))
                self.dictionary.merge_delta(delta)
                count = _U32.unpack(f.read(4))[0]
                raw_index = f.read(_INDEX_ENTRY.size * count)
                records_start = f.tell()
                for k in range(count):
                    off, length, latents, type_id, original = _INDEX_ENTRY.unpack_from(
                        raw_index, k * _INDEX_ENTRY.size)
                    self.index.append(IndexEntry(shard_i, off, length, latents,
                                                 type_id, original))
                self.shards.append(_ShardInfo(shard_path, records_start, count))

    def __len__(self):
        return len(self.index)

    def close(self):
        for h in self._handles.values():
            h.close()
        self._handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _handle(self, shard: int):
        h = self._handles.get(shard)
        if h is None:
            h = open(self.shards[shard].path, "rb")
            self._handles[shard] = h
        return h

    def record_bytes(self, i: int) -> bytes:
        e = self.index[i]
        h = self._handle(e.shard)
        h.seek(self.shards[e.shard].records_start + e.offset)
        return h.read(e.length)

    def get(self, i: int) -> Trace:
        return decode_record(self.record_bytes(i), self.dictionary)

    def __iter__(self) -> Iterator[Trace]:
        for i in range(len(self)):
            yield self.get(i)

    def type_histogram(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.index:
            out[e.type_id] = out.get(e.type_id, 0) + 1
        return out

    def latent_counts(self) -> np.ndarray:
        return np.array([e.latents for e in self.index], dtype=np.int64)


def write_shards(traces: Iterable[Trace], shard_size: int, path: str,
                 sorted_flag: bool = False,
                 dictionary: Optional[AddressDictionary] = None) -> TraceDataset:
    """Serialize traces into `path` with `shard_size` records per shard."""
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    os.makedirs(path, exist_ok=True)
    dictionary = dictionary if dictionary is not None else AddressDictionary()
    shard_names: list[str] = []
    pending: list[tuple[bytes, int, int]] = []
    delta_start = 0
    total = 0
    written_ids = 0

    def flush():
        nonlocal pending, delta_start, written_ids
        if not pending:
            return
        name = f"shard-{len(shard_names):05d}.etlm"
        delta = [(i, dictionary.full_for(i)) for i in range(delta_start, len(dictionary))]
        delta_start = len(dictionary)
        _write_shard(os.path.join(path, name), pending, delta)
        shard_names.append(name)
        pending = []

    try:
        for idx, t in enumerate(traces):
            if not hasattr(t, "original_index"):
                t.original_index = idx
            raw = encode_record(t, dictionary)
            pending.append((raw, len(t.latents()), t.type_id))
            total += 1
            if len(pending) >= shard_size:
                flush()
        flush()
    except Exception:
        for name in shard_names:  # disk errors leave no partial dataset
            try:
                os.remove(os.path.join(path, name))
            except OSError:
                pass
        raise
    manifest = {"format": "etlm", "version": VERSION, "sorted": sorted_flag,
                "shards": shard_names, "total": total}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return TraceDataset(path)


# ---------------------------------------------------------------------------
# sorting


def sort_by_type(dataset: TraceDataset, workers: int, out_path: str,
                 shard_size: Optional[int] = None,
                 run_size: int = 100_000) -> TraceDataset:
    """Stable external sort on (type_id, original position).

    Index runs are sorted in parallel and k-way merged; records stream from
    the source dataset in merged order, so memory stays O(run_size) index
    entries regardless of record payload size.
    """
    n = len(dataset)
    keys = [(dataset.index[i].type_id, i) for i in range(n)]
    runs = [keys[s:s + run_size] for s in range(0, n, run_size)]

    def sort_run(run):
        return sorted(run)

    if workers > 1 and len(runs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(sort_run, runs))
    else:
        runs = [sort_run(r) for r in runs]
    merged = heapq.merge(*runs) if len(runs) > 1 else iter(runs[0] if runs else [])

    if shard_size is None:
        shard_size = max(1, (n + max(1, len(dataset.shards)) - 1)
                         // max(1, len(dataset.shards)))

    def stream():
        for _, i in merged:
            yield dataset.get(i)

    return write_shards(stream(), shard_size, out_path, sorted_flag=True)


# ---------------------------------------------------------------------------
# minibatch planning


@dataclass
class MinibatchPlan:
    chunks: list[tuple[int, int]]  # index ranges [start, stop)
    buckets: list[list[int]]  # chunk ids grouped by mean trace length
    assignment: dict[int, list[int]]  # worker -> chunk ids in order

    def chunk_indices(self, chunk_id: int) -> range:
        start, stop = self.chunks[chunk_id]
        return range(start, stop)

    def worker_chunks(self, worker: int) -> list[int]:
        return self.assignment[worker]


@dataclass
class MinibatchPlanIndexed:
    """Plan over an explicit position list (used for train/val splits)."""
    positions: list[int]
    plan: MinibatchPlan

    def worker_batches(self, worker: int) -> list[list[int]]:
        out = []
        for c in self.plan.worker_chunks(worker):
            out.append([self.positions[i] for i in self.plan.chunk_indices(c)])
        return out


def plan_minibatches(dataset: TraceDataset, batch_size: int, workers: int,
                     epoch_seed: int, buckets: int = 1,
                     positions: Optional[list[int]] = None) -> MinibatchPlan:
    """Split the dataset into contiguous minibatch chunks, shuffle them,
    optionally group by mean latent count, and deal them round-robin.

    With `positions` the chunks cover that position list instead of the
    whole dataset (ranges then index into the list, see worker_batches)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    n = len(dataset) if positions is None else len(positions)
    chunks = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    order = np.random.default_rng(epoch_seed).permutation(len(chunks))

    if buckets == 1 or len(chunks) <= buckets:
        grouped = [list(order)]
    else:
        lengths = dataset.latent_counts()
        if positions is not None:
            lengths = lengths[np.asarray(positions)]
        mean_len = np.array([lengths[s:e].mean() for s, e in chunks])
        ranked = sorted(order, key=lambda c: (mean_len[c], c))
        per = (len(chunks) + buckets - 1) // buckets
        by_bucket = [set(ranked[i * per:(i + 1) * per]) for i in range(buckets)]
        grouped = [[c for c in order if c in bucket] for bucket in by_bucket]
        grouped = [g for g in grouped if g]

    assignment: dict[int, list[int]] = {w: [] for w in range(workers)}
    counter = 0
    for bucket in grouped:
        for chunk_id in bucket:
            assignment[counter % workers].append(int(chunk_id))
            counter += 1
    return MinibatchPlan(chunks, [list(map(int, g)) for g in grouped], assignment)
