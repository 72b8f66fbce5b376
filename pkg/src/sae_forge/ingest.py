"""Activation dump files: writer, lazy validating reader and shuffled batching.

Byte layout (little-endian)::

    offset   size   field
    0        8      magic b"SAEDUMP1"
    8        8      u64 row_count
    16       8      u64 header length H
    24       H      UTF-8 JSON header: version, D, dtype ("<f4"), label_width,
                    flags {has_mask_flags, has_sequence_ids}, source, metadata
    24+H     ...    row_count packed records:
                      x            D x f32
                      labels       label_width x f32
                      mask flag    u8   (only if has_mask_flags)
                      sequence id  u64  (only if has_sequence_ids)

Record size is ``4 * (D + label_width) + has_mask_flags + 8 * has_sequence_ids``.
"""

import json
import os
import struct
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import BadMagicError, ConfigError, DimensionError, HeaderMismatchError, TruncatedFileError
from .synthgen import ActivationBatch

MAGIC = b"SAEDUMP1"
VERSION = 1
DTYPE = "<f4"
PREAMBLE = 24

DumpRow = namedtuple("DumpRow", "x labels mask_flag sequence_id")


@dataclass
class DumpHeader:
    d: int
    row_count: int = 0
    label_width: int = 0
    has_mask_flags: bool = False
    has_sequence_ids: bool = False
    source: str = ""
    metadata: dict = field(default_factory=dict)
    version: int = VERSION
    dtype: str = DTYPE
    magic: bytes = MAGIC

    def record_dtype(self):
        fields = [("x", "<f4", (self.d,))]
        if self.label_width:
            fields.append(("labels", "<f4", (self.label_width,)))
        if self.has_mask_flags:
            fields.append(("mask", "u1"))
        if self.has_sequence_ids:
            fields.append(("seq", "<u8"))
        return np.dtype(fields)

    @property
    def record_size(self):
        return self.record_dtype().itemsize

    def to_json(self):
        return {
            "version": self.version,
            "D": self.d,
            "dtype": self.dtype,
            "label_width": self.label_width,
            "flags": {"has_mask_flags": self.has_mask_flags, "has_sequence_ids": self.has_sequence_ids},
            "source": self.source,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj, row_count):
        flags = obj.get("flags", {})
        return cls(
            d=int(obj["D"]),
            row_count=row_count,
            label_width=int(obj.get("label_width", 0)),
            has_mask_flags=bool(flags.get("has_mask_flags", False)),
            has_sequence_ids=bool(flags.get("has_sequence_ids", False)),
            source=obj.get("source", ""),
            metadata=obj.get("metadata", {}),
            version=int(obj["version"]),
            dtype=obj.get("dtype", DTYPE),
        )


def _batch_records(header, batch, first_row):
    x = np.asarray(batch.x)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != header.d:
        raise DimensionError(f"row {first_row}: expected {header.d} activation values, got shape {x.shape[1:]}")
    rec = np.zeros(n, dtype=header.record_dtype())
    rec["x"] = x
    if header.label_width:
        if batch.labels is None or np.shape(batch.labels) != (n, header.label_width):
            raise DimensionError(f"row {first_row}: labels must have shape ({n}, {header.label_width})")
        rec["labels"] = batch.labels
    if header.has_mask_flags:
        if batch.mask_flags is None:
            raise DimensionError(f"row {first_row}: header declares mask flags but none given")
        rec["mask"] = np.asarray(batch.mask_flags, dtype=np.uint8)
    if header.has_sequence_ids:
        if batch.sequence_id is None:
            raise DimensionError(f"row {first_row}: header declares sequence ids but none given")
        rec["seq"] = batch.sequence_id
    return rec


def _row_as_batch(header, row, index):
    x = np.asarray(row.x, dtype=np.float32)
    if x.shape != (header.d,):
        raise DimensionError(f"row {index}: expected {header.d} activation values, got shape {x.shape}")
    labels = None if row.labels is None else np.asarray(row.labels, dtype=np.float32)[None]
    flags = None if row.mask_flag is None else np.array([row.mask_flag])
    seq = None if row.sequence_id is None else np.array([row.sequence_id], dtype=np.uint64)
    return ActivationBatch(x[None], labels, flags, seq)


def write_dump(path, header, rows):
    """Write ``rows`` (``DumpRow``s and/or ``ActivationBatch`` chunks); returns the row count."""
    head = json.dumps(header.to_json(), sort_keys=True).encode("utf-8")
    count = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<QQ", 0, len(head)))
        f.write(head)
        for item in rows:
            batch = item if isinstance(item, ActivationBatch) else _row_as_batch(header, DumpRow(*item), count)
            f.write(_batch_records(header, batch, count).tobytes())
            count += len(batch)
        f.seek(8)
        f.write(struct.pack("<Q", count))
        f.flush()
        os.fsync(f.fileno())
    header.row_count = count
    return count


class DumpReader:
    """Validating reader; rows are read lazily in fixed-size chunks."""

    def __init__(self, path, chunk_rows=4096):
        self.path = os.fspath(path)
        self.chunk_rows = chunk_rows
        size = os.path.getsize(self.path)
        with open(self.path, "rb") as f:
            pre = f.read(PREAMBLE)
            if pre[:8] != MAGIC:
                raise BadMagicError(f"{self.path}: bad magic {pre[:8]!r}, expected {MAGIC!r}")
            if len(pre) < PREAMBLE:
                raise TruncatedFileError(f"{self.path}: file ends inside the preamble", len(pre))
            row_count, hlen = struct.unpack("<QQ", pre[8:24])
            raw = f.read(hlen)
        if len(raw) < hlen:
            raise TruncatedFileError(f"{self.path}: header runs past end of file", PREAMBLE + len(raw))
        try:
            obj = json.loads(raw.decode("utf-8"))
            self.header = DumpHeader.from_json(obj, row_count)
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise HeaderMismatchError(f"{self.path}: unreadable header: {exc}", PREAMBLE) from exc
        if self.header.version != VERSION:
            raise HeaderMismatchError(f"{self.path}: unsupported dump version {self.header.version}", PREAMBLE)
        if self.header.dtype != DTYPE:
            raise HeaderMismatchError(f"{self.path}: unsupported dtype {self.header.dtype!r}", PREAMBLE)
        self.data_offset = PREAMBLE + hlen
        self.dtype = self.header.record_dtype()
        rec = self.dtype.itemsize
        payload = size - self.data_offset
        expected = row_count * rec
        if payload < expected:
            raise TruncatedFileError(
                f"{self.path}: payload holds {payload} bytes, header promises {row_count} rows of {rec} bytes",
                self.data_offset + (payload // rec) * rec,
            )
        if payload > expected:
            raise HeaderMismatchError(
                f"{self.path}: {payload - expected} bytes beyond the {row_count} declared rows",
                self.data_offset + expected,
            )

    def __len__(self):
        return self.header.row_count

    def iter_records(self):
        """Yield structured-array chunks of at most ``chunk_rows`` records."""
        remaining = self.header.row_count
        with open(self.path, "rb") as f:
            f.seek(self.data_offset)
            while remaining:
                n = min(self.chunk_rows, remaining)
                buf = f.read(n * self.dtype.itemsize)
                if len(buf) < n * self.dtype.itemsize:
                    raise TruncatedFileError(f"{self.path}: file shrank while reading", f.tell())
                yield np.frombuffer(buf, dtype=self.dtype)
                remaining -= n

    def iter_rows(self):
        has_labels = self.header.label_width > 0
        for chunk in self.iter_records():
            for r in chunk:
                yield DumpRow(
                    r["x"].copy(),
                    r["labels"].copy() if has_labels else None,
                    bool(r["mask"]) if self.header.has_mask_flags else None,
                    int(r["seq"]) if self.header.has_sequence_ids else None,
                )


def read_dump(path):
    """Return ``(header, row iterator)``; the file is validated before any row is read."""
    reader = DumpReader(path)
    return reader.header, reader.iter_rows()


class ShuffleBuffer:
    """Reservoir-style shuffle with bounded memory.

    The buffer fills to ``capacity``; each further row evicts a uniformly
    chosen resident row, and the remainder drains in random order. Capacity 1
    reproduces the input order.
    """

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise ConfigError("shuffle capacity must be >= 1")
        self.capacity = capacity
        self.seed = seed

    def shuffle(self, rows, epoch=0):
        g = rngmod.stream(self.seed, "shuffle", epoch)
        buf = []
        for row in rows:
            if len(buf) < self.capacity:
                buf.append(row)
                continue
            j = int(g.integers(self.capacity))
            yield buf[j]
            buf[j] = row
        for j in g.permutation(len(buf)):
            yield buf[j]


def _records_to_batch(header, recs, partial):
    return ActivationBatch(
        x=np.array(recs["x"], dtype=np.float32),
        labels=np.array(recs["labels"]) if header.label_width else None,
        mask_flags=recs["mask"].astype(bool) if header.has_mask_flags else None,
        sequence_id=np.array(recs["seq"]) if header.has_sequence_ids else None,
        partial=partial,
    )


def stream_batches(reader, batch_size, shuffle=None, epoch=0):
    """Yield ``ActivationBatch`` blocks of ``batch_size`` rows; the last may be partial."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    rows = (r for chunk in reader.iter_records() for r in chunk)
    if shuffle is not None:
        rows = shuffle.shuffle(rows, epoch)
    pending = []
    for r in rows:
        pending.append(r)
        if len(pending) == batch_size:
            yield _records_to_batch(reader.header, np.array(pending, dtype=reader.dtype), False)
            pending = []
    if pending:
        yield _records_to_batch(reader.header, np.array(pending, dtype=reader.dtype), True)


def export_synthetic(path, model, hierarchy, seed, n_rows, seq_len, p_mask=None, domain="export", chunk_rows=4096):
    """Write generator output as a labeled, mask-flagged dump."""
    from .synthgen import generate_rows

    header = DumpHeader(
        d=model.d,
        label_width=hierarchy.n_features,
        has_mask_flags=True,
        has_sequence_ids=True,
        source="synthgen",
        metadata={"p_mask": p_mask if p_mask is not None else 0.0, "masked": p_mask is not None, "seed": seed},
    )

    def chunks():
        for start in range(0, n_rows, chunk_rows):
            b = generate_rows(model, hierarchy, seed, domain, min(chunk_rows, n_rows - start), seq_len, p_mask, start)
            b.labels = b.labels.astype(np.float32)
            yield b

    write_dump(path, header, chunks())
    return header
