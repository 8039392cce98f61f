"""Aggregating shuffled reports: bit-frequency estimation, index-range
merging, weight-report reconstruction, and sample-weighted model averaging.

Bit reports (one-hot attribute encodings) are aggregated with tf-idf style
per-position constants. Data reports merge into the training index set a
cluster head reconstructs. Weight reports reassemble into (params, count)
entries the server averages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .buds import POSITION_VALUE, ShuffledReport

log = logging.getLogger(__name__)

INDEX_RANGE = ("max_index", "min_index")


@dataclass
class BitReport:
    """A fixed-length bit string reported by one source."""

    bits: str
    source_tag: int | str = ""

    def __post_init__(self) -> None:
        if not self.bits or set(self.bits) - {"0", "1"}:
            raise ValueError("bits must be a non-empty string of 0s and 1s")

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.bits.encode("ascii"), dtype=np.uint8) - ord("0")


@dataclass
class AraConstants:
    """Per-position aggregation weights; non-negative and summing to one."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or len(self.weights) == 0:
            raise ValueError("weights must be a non-empty vector")
        if self.weights.min() < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to one")


@dataclass
class FedWeights:
    """Averaged flat parameter vector plus the example mass behind it."""

    params: np.ndarray
    total_examples: int


def _bit_matrix(reports: list[BitReport]) -> np.ndarray:
    if not reports:
        raise ValueError("no reports")
    length = len(reports[0].bits)
    for report in reports:
        if len(report.bits) != length:
            raise ValueError(
                f"mixed report lengths: {len(report.bits)} != {length}"
            )
    return np.stack([r.as_array() for r in reports])


def compute_constants(reports: list[BitReport]) -> AraConstants:
    """Derive per-position weights from bit frequency across reports.

    Each position scores term-frequency (set fraction) times a damped
    inverse document frequency; scores normalize to sum one, falling back
    to uniform when every bit is zero.
    """
    matrix = _bit_matrix(reports)
    n_reports, length = matrix.shape
    set_counts = matrix.sum(axis=0).astype(np.float64)
    tf = set_counts / n_reports
    idf = np.log((n_reports + 1) / (set_counts + 1)) + 1.0
    raw = tf * idf
    total = raw.sum()
    if total == 0.0:
        return AraConstants(np.full(length, 1.0 / length))
    return AraConstants(raw / total)


def aggregate_bits(reports: list[BitReport], constants: AraConstants) -> np.ndarray:
    """Per-position estimates: constant times the number of set bits."""
    matrix = _bit_matrix(reports)
    if matrix.shape[1] != len(constants.weights):
        raise ValueError(
            f"report length {matrix.shape[1]} != constants length {len(constants.weights)}"
        )
    return constants.weights * matrix.sum(axis=0)


def merge_data_reports(reports: list[ShuffledReport]) -> np.ndarray:
    """Union the index ranges carried by data reports, sorted ascending."""
    if not reports:
        raise ValueError("no reports")
    indices: set[int] = set()
    for report in reports:
        try:
            j = report.table.find_composite(INDEX_RANGE)
        except KeyError:
            raise ValueError("report lacks an index-range composite column") from None
        for row in report.table.rows:
            max_index, min_index = row[j]
            if min_index > max_index:
                raise ValueError(f"inverted index range [{min_index}, {max_index}]")
            indices.update(range(int(min_index), int(max_index) + 1))
    return np.array(sorted(indices), dtype=np.int64)


def aggregate_weight_reports(
    reports: list[ShuffledReport],
) -> list[tuple[np.ndarray, int]]:
    """Rebuild (params, sample_count) entries from privatized weight reports.

    A report must carry one (position, value) pair per parameter with the
    positions covering 0..len-1 exactly; anything else is dropped with a
    diagnostic rather than poisoning the average.
    """
    entries: list[tuple[np.ndarray, int]] = []
    for idx, report in enumerate(reports):
        table = report.table
        try:
            j = table.find_composite(POSITION_VALUE)
        except KeyError:
            log.warning("weight report %d dropped: no (position, value) column", idx)
            continue
        length = table.n_rows
        params = np.empty(length, dtype=np.float64)
        seen = np.zeros(length, dtype=bool)
        valid = True
        for row in table.rows:
            position, value = row[j]
            if not 0 <= position < length or seen[position]:
                log.warning(
                    "weight report %d dropped: position %s duplicated or out of range",
                    idx, position,
                )
                valid = False
                break
            seen[position] = True
            params[position] = value
        if not valid:
            continue
        try:
            counts = set(table.column("sample_count"))
        except ValueError:
            log.warning("weight report %d dropped: no sample_count column", idx)
            continue
        if len(counts) != 1:
            log.warning("weight report %d dropped: inconsistent sample counts", idx)
            continue
        sample_count = int(counts.pop())
        if sample_count < 1:
            log.warning("weight report %d dropped: non-positive sample count", idx)
            continue
        entries.append((params, sample_count))
    return entries


def fed_avg(entries: list[tuple[np.ndarray, int]]) -> FedWeights:
    """Average parameter vectors weighted by their sample counts."""
    if not entries:
        raise ValueError("no entries to average")
    stacked = []
    counts = []
    dim = len(np.asarray(entries[0][0]))
    for params, count in entries:
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or len(params) != dim:
            raise ValueError(f"parameter dimension mismatch: {len(params)} != {dim}")
        if count < 1:
            raise ValueError("sample counts must be positive")
        stacked.append(params)
        counts.append(count)
    averaged = np.average(np.stack(stacked), axis=0, weights=counts)
    return FedWeights(params=averaged, total_examples=int(sum(counts)))
