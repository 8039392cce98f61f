"""Privatizing reports by tying attributes together and batch-shuffling them.

A report starts as a small attribute table. Columns that jointly answer the
query are tied into one composite column so shuffling can never split them,
then the rows are cut into near-equal batches and every column group is
independently permuted within each batch, each group under a distinct
shuffler. What leaves the client is the shuffled table plus a digest of the
shuffle plan; the permutations themselves are never part of the report.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

_DIGEST_BYTES = 32
_REPORT_MAGIC = b"BR\x01"

# Cell type tags on the wire.
_TAG_INT = 0x00
_TAG_FLOAT = 0x01
_TAG_BITS = 0x02
_TAG_STR = 0x03
_TAG_TUPLE = 0x04


@dataclass
class AttributeTable:
    """Rows of attribute cells; each column is one shuffle group.

    columns holds display names; parts records the original column names
    behind each column (len > 1 marks a tied composite whose cells are
    tuples moving atomically).
    """

    columns: tuple[str, ...]
    rows: list[tuple]
    parts: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        self.columns = tuple(self.columns)
        self.rows = [tuple(row) for row in self.rows]
        if not self.parts:
            self.parts = tuple((name,) for name in self.columns)
        else:
            self.parts = tuple(tuple(p) for p in self.parts)
        if len(self.parts) != len(self.columns):
            raise ValueError("need one parts group per column")
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(f"row width {len(row)} != {len(self.columns)} columns")
            for j, cell in enumerate(row):
                if len(self.parts[j]) > 1:
                    if not isinstance(cell, tuple) or len(cell) != len(self.parts[j]):
                        raise ValueError(f"column '{self.columns[j]}' cells must be "
                                         f"{len(self.parts[j])}-tuples")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [row[j] for row in self.rows]

    def find_composite(self, part_names: Sequence[str]) -> int:
        """Index of the composite column made of exactly these original names."""
        want = tuple(part_names)
        for j, parts in enumerate(self.parts):
            if parts == want:
                return j
        raise KeyError(f"no composite column with parts {want}")


@dataclass(frozen=True)
class ShufflePlan:
    """Batch boundaries plus the per-batch, per-group shuffler assignment."""

    n_shufflers: int
    batch_bounds: tuple[tuple[int, int], ...]
    assignment: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.batch_bounds) != len(self.assignment):
            raise ValueError("one shuffler assignment row per batch")
        cursor = self.batch_bounds[0][0] if self.batch_bounds else 0
        for start, stop in self.batch_bounds:
            if start != cursor or stop <= start:
                raise ValueError("batches must be contiguous and non-empty")
            cursor = stop
        for ids in self.assignment:
            if len(set(ids)) != len(ids):
                raise ValueError("shuffler ids within a batch must be distinct")
            if any(i < 0 or i >= self.n_shufflers for i in ids):
                raise ValueError("shuffler id out of range")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack(">I", self.n_shufflers))
        for (start, stop), ids in zip(self.batch_bounds, self.assignment):
            h.update(struct.pack(">II", start, stop))
            h.update(struct.pack(f">{len(ids)}I", *ids))
        return h.hexdigest()


@dataclass
class ShuffledReport:
    """A shuffled attribute table plus the digest of the plan that produced it."""

    table: AttributeTable
    plan_digest: str


def reduce_attributes(table: AttributeTable, query_columns: Iterable[str]) -> AttributeTable:
    """Tie the query-answering columns into one composite column.

    The composite sits at the first query column's position, is named by
    joining the tied names with ':', and its cells are tuples in original
    column order. A table with c columns and q query columns comes out with
    c - q + 1 columns. A single-column query returns the table unchanged.
    """
    query = set(query_columns)
    if not query:
        raise ValueError("query must name at least one column")
    unknown = query - set(table.columns)
    if unknown:
        raise ValueError(f"query names unknown columns: {sorted(unknown)}")
    for name in query:
        if len(table.parts[table.columns.index(name)]) > 1:
            raise ValueError(f"column '{name}' is already part of a composite")
    if len(query) == 1:
        return AttributeTable(table.columns, list(table.rows), table.parts)
    positions = [j for j, name in enumerate(table.columns) if name in query]
    tied_names = tuple(table.columns[j] for j in positions)
    anchor = positions[0]
    columns: list[str] = []
    parts: list[tuple[str, ...]] = []
    keep: list[int | None] = []
    for j, name in enumerate(table.columns):
        if j == anchor:
            columns.append(":".join(tied_names))
            parts.append(tied_names)
            keep.append(None)
        elif name not in query:
            columns.append(name)
            parts.append(table.parts[j])
            keep.append(j)
    rows = []
    for row in table.rows:
        rows.append(tuple(
            tuple(row[p] for p in positions) if j is None else row[j]
            for j in keep
        ))
    return AttributeTable(tuple(columns), rows, tuple(parts))


def channel_count(n_columns: int, n_query: int) -> int:
    """Number of shuffle channels for a table: columns minus query plus one."""
    if n_query < 1 or n_query > n_columns:
        raise ValueError(f"need 1 <= n_query <= n_columns, got {n_query} of {n_columns}")
    return n_columns - n_query + 1


def build_shuffle_plan(
    n_rows: int,
    n_groups: int,
    n_shufflers: int,
    n_batches: int,
    rng: np.random.Generator,
) -> ShufflePlan:
    """Cut rows into near-equal contiguous batches and assign shufflers.

    Every batch draws one distinct shuffler per column group, sampled
    without replacement from the pool.
    """
    if n_rows < 1:
        raise ValueError("empty table")
    if n_batches < 1:
        raise ValueError("need at least one batch")
    if n_shufflers < n_groups:
        raise ValueError(
            f"need at least as many shufflers as column groups ({n_shufflers} < {n_groups})"
        )
    t = min(n_batches, n_rows)
    cuts = np.linspace(0, n_rows, t + 1).round().astype(int)
    bounds = tuple((int(cuts[i]), int(cuts[i + 1])) for i in range(t))
    assignment = tuple(
        tuple(int(s) for s in rng.choice(n_shufflers, size=n_groups, replace=False))
        for _ in range(t)
    )
    return ShufflePlan(n_shufflers=n_shufflers, batch_bounds=bounds, assignment=assignment)


def apply_shuffle_plan(
    table: AttributeTable, plan: ShufflePlan, rng: np.random.Generator
) -> ShuffledReport:
    """Permute every column group independently within each batch."""
    cells = [list(row) for row in table.rows]
    for start, stop in plan.batch_bounds:
        size = stop - start
        for j in range(table.n_columns):
            perm = rng.permutation(size)
            old = [cells[start + i][j] for i in range(size)]
            for i, p in enumerate(perm):
                cells[start + i][j] = old[p]
    shuffled = AttributeTable(table.columns, [tuple(r) for r in cells], table.parts)
    return ShuffledReport(table=shuffled, plan_digest=plan.digest())


def iterative_shuffle(
    table: AttributeTable,
    n_shufflers: int,
    rng: np.random.Generator,
    n_batches: int | None = None,
) -> ShuffledReport:
    """Shuffle a table batch-by-batch; default batch count is ceil(rows/64)."""
    if n_batches is None:
        n_batches = math.ceil(table.n_rows / 64)
    plan = build_shuffle_plan(table.n_rows, table.n_columns, n_shufflers, n_batches, rng)
    return apply_shuffle_plan(table, plan, rng)


POSITION_VALUE = ("position", "value")
WEIGHT_METADATA = ("cluster_id", "sample_count", "nonce")


def weight_report(
    params: np.ndarray,
    cluster_id: int,
    sample_count: int,
    rng: np.random.Generator,
    n_batches: int | None = None,
) -> ShuffledReport:
    """Privatize a flat parameter vector for upload.

    One row per parameter: the (position, value) pair is tied so it can
    never be split, while the metadata columns (cluster id, sample-count
    tag, per-row nonce) are shuffled away from it.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or len(params) == 0:
        raise ValueError("params must be a non-empty 1-D vector")
    if sample_count < 1:
        raise ValueError("sample_count must be positive")
    nonces = rng.integers(0, 1 << 62, size=len(params))
    rows = [
        (int(i), float(v), int(cluster_id), int(sample_count), int(nonces[i]))
        for i, v in enumerate(params)
    ]
    raw = AttributeTable(POSITION_VALUE + WEIGHT_METADATA, rows)
    tied = reduce_attributes(raw, POSITION_VALUE)
    n_shufflers = channel_count(tied.n_columns, 1)
    return iterative_shuffle(tied, n_shufflers, rng, n_batches=n_batches)


def _encode_cell(cell: Any, out: bytearray) -> None:
    if isinstance(cell, tuple):
        out.append(_TAG_TUPLE)
        out.append(len(cell))
        for inner in cell:
            _encode_cell(inner, out)
    elif isinstance(cell, bool):
        raise ValueError("boolean cells are not supported")
    elif isinstance(cell, (int, np.integer)):
        out.append(_TAG_INT)
        out += struct.pack(">q", int(cell))
    elif isinstance(cell, (float, np.floating)):
        out.append(_TAG_FLOAT)
        out += struct.pack(">d", float(cell))
    elif isinstance(cell, str):
        if cell and set(cell) <= {"0", "1"}:
            packed = np.packbits([c == "1" for c in cell], bitorder="big").tobytes()
            out.append(_TAG_BITS)
            out += struct.pack(">I", len(cell))
            out += packed.hex().encode("ascii")
        else:
            encoded = cell.encode("utf-8")
            out.append(_TAG_STR)
            out += struct.pack(">H", len(encoded))
            out += encoded
    else:
        raise ValueError(f"cannot serialize cell of type {type(cell).__name__}")


def _decode_cell(data: bytes, offset: int) -> tuple[Any, int]:
    if offset >= len(data):
        raise ValueError(f"report truncated at byte {offset}")
    tag = data[offset]
    offset += 1
    if tag == _TAG_TUPLE:
        arity = data[offset]
        offset += 1
        items = []
        for _ in range(arity):
            item, offset = _decode_cell(data, offset)
            items.append(item)
        return tuple(items), offset
    if tag == _TAG_INT:
        (value,) = struct.unpack_from(">q", data, offset)
        return int(value), offset + 8
    if tag == _TAG_FLOAT:
        (value,) = struct.unpack_from(">d", data, offset)
        return float(value), offset + 8
    if tag == _TAG_BITS:
        (n_bits,) = struct.unpack_from(">I", data, offset)
        offset += 4
        n_hex = 2 * ((n_bits + 7) // 8)
        packed = bytes.fromhex(data[offset : offset + n_hex].decode("ascii"))
        bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="big")[:n_bits]
        return "".join("1" if b else "0" for b in bits), offset + n_hex
    if tag == _TAG_STR:
        (length,) = struct.unpack_from(">H", data, offset)
        offset += 2
        return data[offset : offset + length].decode("utf-8"), offset + length
    raise ValueError(f"unknown cell tag 0x{tag:02x} at byte {offset - 1}")


def serialize_report(report: ShuffledReport) -> bytes:
    """Stable binary encoding: header, digest, column layout, row-major cells."""
    out = bytearray(_REPORT_MAGIC)
    out += bytes.fromhex(report.plan_digest)
    table = report.table
    out += struct.pack(">H", table.n_columns)
    for column, parts in zip(table.columns, table.parts):
        encoded = column.encode("utf-8")
        out += struct.pack(">H", len(encoded))
        out += encoded
        out += struct.pack(">H", len(parts))
        for name in parts:
            encoded = name.encode("utf-8")
            out += struct.pack(">H", len(encoded))
            out += encoded
    out += struct.pack(">I", table.n_rows)
    for row in table.rows:
        for cell in row:
            _encode_cell(cell, out)
    return bytes(out)


def deserialize_report(data: bytes) -> ShuffledReport:
    if data[: len(_REPORT_MAGIC)] != _REPORT_MAGIC:
        raise ValueError("bad report header")
    try:
        return _parse_report(data)
    except struct.error as exc:
        raise ValueError(f"report truncated: {exc}") from None


def _parse_report(data: bytes) -> ShuffledReport:
    offset = len(_REPORT_MAGIC)
    digest = data[offset : offset + _DIGEST_BYTES].hex()
    offset += _DIGEST_BYTES
    (n_columns,) = struct.unpack_from(">H", data, offset)
    offset += 2

    def read_name(at: int) -> tuple[str, int]:
        (length,) = struct.unpack_from(">H", data, at)
        at += 2
        return data[at : at + length].decode("utf-8"), at + length

    columns = []
    parts = []
    for _ in range(n_columns):
        name, offset = read_name(offset)
        columns.append(name)
        (n_parts,) = struct.unpack_from(">H", data, offset)
        offset += 2
        names = []
        for _ in range(n_parts):
            part, offset = read_name(offset)
            names.append(part)
        parts.append(tuple(names))
    (n_rows,) = struct.unpack_from(">I", data, offset)
    offset += 4
    rows = []
    for _ in range(n_rows):
        row = []
        for _ in range(n_columns):
            cell, offset = _decode_cell(data, offset)
            row.append(cell)
        rows.append(tuple(row))
    if offset != len(data):
        raise ValueError(f"{len(data) - offset} trailing bytes after report")
    table = AttributeTable(tuple(columns), rows, tuple(parts))
    return ShuffledReport(table=table, plan_digest=digest)
