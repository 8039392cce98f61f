"""Attribute tying, batch shuffling, and report serialization tests."""

import itertools
import math
from collections import Counter

import numpy as np
import pytest

from flaps.buds import (
    AttributeTable,
    ShufflePlan,
    build_shuffle_plan,
    channel_count,
    apply_shuffle_plan,
    deserialize_report,
    iterative_shuffle,
    reduce_attributes,
    serialize_report,
    weight_report,
)

CLIENT_COLUMNS = ("user_id", "count", "max_index", "min_index")

# A 6-client cohort: (user, count, max, min) with counts inconsistent with
# ranges on purpose; the shuffle only moves cells, it never audits them.
COHORT_ROWS = [
    (1, 200, 501, 300),
    (2, 201, 801, 600),
    (3, 202, 1102, 900),
    (4, 198, 198, 1),
    (5, 199, 686, 487),
    (6, 203, 1403, 1200),
]

# The same cohort after one known-good shuffle draw: every column is a
# permutation of the original and the (max, min) pairs move atomically.
COHORT_SHUFFLED_ROWS = [
    (3, 203, 801, 600),
    (1, 200, 1102, 900),
    (2, 202, 198, 1),
    (5, 199, 686, 487),
    (4, 198, 501, 300),
    (6, 201, 1403, 1200),
]


def cohort_table():
    return reduce_attributes(
        AttributeTable(CLIENT_COLUMNS, COHORT_ROWS), {"max_index", "min_index"}
    )


def column_multisets(table):
    return [Counter(table.column(name)) for name in table.columns]


class TestReduceAttributes:
    def test_ties_index_range_into_composite(self):
        table = cohort_table()
        assert table.columns == ("user_id", "count", "max_index:min_index")
        assert table.parts == (("user_id",), ("count",), ("max_index", "min_index"))
        assert table.rows[0] == (1, 200, (501, 300))
        assert table.n_columns == 4 - 2 + 1

    def test_composite_sits_at_first_query_position(self):
        table = AttributeTable(("a", "b", "c", "d"), [(1, 2, 3, 4)])
        tied = reduce_attributes(table, {"b", "d"})
        assert tied.columns == ("a", "b:d", "c")
        assert tied.rows[0] == (1, (2, 4), 3)

    def test_all_columns_tied_gives_single_column(self):
        table = AttributeTable(("a", "b", "c"), [(1, 2, 3), (4, 5, 6)])
        tied = reduce_attributes(table, {"a", "b", "c"})
        assert tied.n_columns == 1
        assert tied.rows == [((1, 2, 3),), ((4, 5, 6),)]

    def test_single_column_query_is_identity(self):
        table = AttributeTable(CLIENT_COLUMNS, COHORT_ROWS)
        tied = reduce_attributes(table, {"count"})
        assert tied.columns == table.columns
        assert tied.rows == table.rows

    def test_empty_query_rejected(self):
        with pytest.raises(ValueError):
            reduce_attributes(AttributeTable(("a",), [(1,)]), set())

    def test_unknown_column_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            reduce_attributes(AttributeTable(("a",), [(1,)]), {"a", "zz"})


class TestChannelCount:
    def test_worked_values(self):
        assert channel_count(4, 2) == 3
        assert channel_count(3, 1) == 3
        assert channel_count(5, 5) == 1

    def test_invalid_query_sizes(self):
        with pytest.raises(ValueError):
            channel_count(4, 0)
        with pytest.raises(ValueError):
            channel_count(4, 5)


class TestIterativeShuffle:
    def test_cohort_columns_keep_their_multisets(self):
        table = cohort_table()
        report = iterative_shuffle(table, n_shufflers=3, rng=np.random.default_rng(0))
        assert column_multisets(report.table) == column_multisets(table)
        assert report.table.columns == table.columns
        assert report.table.parts == table.parts

    def test_published_draw_is_reachable(self):
        # The known shuffled cohort must be expressible as independent
        # per-column permutations of the original, i.e. multiset-equal.
        before = cohort_table()
        after = reduce_attributes(
            AttributeTable(CLIENT_COLUMNS, COHORT_SHUFFLED_ROWS),
            {"max_index", "min_index"},
        )
        assert column_multisets(after) == column_multisets(before)

    def test_composite_pairs_never_split(self):
        table = cohort_table()
        before_pairs = Counter(table.column("max_index:min_index"))
        for seed in range(10):
            report = iterative_shuffle(table, n_shufflers=3, rng=np.random.default_rng(seed))
            assert Counter(report.table.column("max_index:min_index")) == before_pairs

    def test_single_row_is_identity(self):
        table = reduce_attributes(
            AttributeTable(CLIENT_COLUMNS, COHORT_ROWS[:1]), {"max_index", "min_index"}
        )
        report = iterative_shuffle(table, n_shufflers=3, rng=np.random.default_rng(5))
        assert report.table.rows == table.rows

    def test_every_output_reachable_by_permutation_pair(self):
        # 5 rows, 2 singleton groups: enumerate all 5! * 5! permutation pairs
        # and check each shuffle lands inside that set.
        col_a = [0, 1, 2, 3, 4]
        col_b = [10, 11, 12, 13, 14]
        table = AttributeTable(("a", "b"), list(zip(col_a, col_b)))
        reachable = {
            (pa, pb)
            for pa in itertools.permutations(col_a)
            for pb in itertools.permutations(col_b)
        }
        assert len(reachable) == math.factorial(5) ** 2
        for seed in range(20):
            report = iterative_shuffle(
                table, n_shufflers=2, rng=np.random.default_rng(seed), n_batches=1
            )
            out = (tuple(report.table.column("a")), tuple(report.table.column("b")))
            assert out in reachable

    def test_values_stay_inside_their_batch(self):
        rows = [(i, 100 + i) for i in range(130)]
        table = AttributeTable(("a", "b"), rows)
        plan = build_shuffle_plan(130, 2, 4, math.ceil(130 / 64), np.random.default_rng(3))
        report = apply_shuffle_plan(table, plan, np.random.default_rng(3))
        for start, stop in plan.batch_bounds:
            for name, base in (("a", 0), ("b", 100)):
                got = sorted(report.table.column(name)[start:stop])
                assert got == [base + i for i in range(start, stop)]

    def test_deterministic(self):
        table = cohort_table()
        a = iterative_shuffle(table, 3, rng=np.random.default_rng(11))
        b = iterative_shuffle(table, 3, rng=np.random.default_rng(11))
        assert a.table.rows == b.table.rows
        assert a.plan_digest == b.plan_digest

    def test_too_few_shufflers_rejected(self):
        with pytest.raises(ValueError, match="shufflers"):
            iterative_shuffle(cohort_table(), n_shufflers=2, rng=np.random.default_rng(0))

    def test_empty_table_rejected(self):
        table = AttributeTable(("a",), [])
        with pytest.raises(ValueError, match="empty"):
            iterative_shuffle(table, 1, rng=np.random.default_rng(0))


class TestShufflePlan:
    def test_batch_sizes_differ_by_at_most_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n_rows = int(rng.integers(1, 400))
            n_batches = int(rng.integers(1, 20))
            plan = build_shuffle_plan(n_rows, 2, 3, n_batches, rng)
            sizes = [stop - start for start, stop in plan.batch_bounds]
            assert sum(sizes) == n_rows
            assert max(sizes) - min(sizes) <= 1
            assert plan.batch_bounds[0][0] == 0
            assert plan.batch_bounds[-1][1] == n_rows

    def test_batch_count_clamps_to_rows(self):
        plan = build_shuffle_plan(3, 1, 2, 10, np.random.default_rng(0))
        assert len(plan.batch_bounds) == 3

    def test_shufflers_drawn_without_replacement(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n_groups = int(rng.integers(1, 6))
            n_shufflers = n_groups + int(rng.integers(0, 4))
            plan = build_shuffle_plan(40, n_groups, n_shufflers, 5, rng)
            for ids in plan.assignment:
                assert len(set(ids)) == n_groups
                assert all(0 <= i < n_shufflers for i in ids)

    def test_pool_equal_to_groups_uses_every_shuffler(self):
        plan = build_shuffle_plan(20, 3, 3, 4, np.random.default_rng(1))
        for ids in plan.assignment:
            assert sorted(ids) == [0, 1, 2]

    def test_digest_is_hex_and_plan_sensitive(self):
        plan_a = build_shuffle_plan(20, 2, 4, 2, np.random.default_rng(0))
        plan_b = build_shuffle_plan(24, 2, 4, 2, np.random.default_rng(0))
        assert len(plan_a.digest()) == 64
        assert int(plan_a.digest(), 16) >= 0
        assert plan_a.digest() != plan_b.digest()

    def test_non_contiguous_bounds_rejected(self):
        with pytest.raises(ValueError):
            ShufflePlan(n_shufflers=2, batch_bounds=((0, 2), (3, 5)), assignment=((0,), (1,)))

    def test_duplicate_shuffler_rejected(self):
        with pytest.raises(ValueError):
            ShufflePlan(n_shufflers=3, batch_bounds=((0, 4),), assignment=((1, 1),))


class TestWeightReport:
    def test_structure_and_pair_preservation(self):
        params = np.linspace(-2.0, 2.0, 16)
        report = weight_report(params, cluster_id=3, sample_count=40, rng=np.random.default_rng(2))
        table = report.table
        assert table.columns == ("position:value", "cluster_id", "sample_count", "nonce")
        assert table.n_rows == 16
        pairs = sorted(table.column("position:value"))
        assert pairs == [(i, float(v)) for i, v in enumerate(params)]
        assert set(table.column("cluster_id")) == {3}
        assert set(table.column("sample_count")) == {40}

    def test_values_survive_exactly(self):
        rng = np.random.default_rng(13)
        params = rng.standard_normal(257)
        report = weight_report(params, 0, 5, rng=np.random.default_rng(1))
        recovered = np.empty_like(params)
        for pos, val in report.table.column("position:value"):
            recovered[pos] = val
        np.testing.assert_array_equal(recovered, params)

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            weight_report(np.array([]), 0, 1, np.random.default_rng(0))

    def test_zero_sample_count_rejected(self):
        with pytest.raises(ValueError):
            weight_report(np.ones(3), 0, 0, np.random.default_rng(0))


class TestSerialization:
    def round_trip(self, report):
        data = serialize_report(report)
        back = deserialize_report(data)
        assert back.plan_digest == report.plan_digest
        assert back.table.columns == report.table.columns
        assert back.table.parts == report.table.parts
        assert back.table.rows == report.table.rows
        return data

    def test_weight_report_round_trip(self):
        report = weight_report(
            np.random.default_rng(4).standard_normal(33), 2, 9, np.random.default_rng(5)
        )
        self.round_trip(report)

    def test_mixed_cell_types_round_trip(self):
        table = AttributeTable(
            ("tag", "bits", "pair"),
            [
                ("plain text", "0101100", (3, 2.5)),
                ("", "1", (-7, -0.125)),
            ],
            parts=(("tag",), ("bits",), ("left", "right")),
        )
        report = iterative_shuffle(table, 3, np.random.default_rng(6), n_batches=1)
        self.round_trip(report)

    def test_long_bitstring_round_trip(self):
        bits = "".join("1" if b else "0" for b in np.random.default_rng(8).integers(0, 2, 1003))
        table = AttributeTable(("bits",), [(bits,)])
        report = iterative_shuffle(table, 1, np.random.default_rng(0))
        back = deserialize_report(serialize_report(report))
        assert back.table.rows[0][0] == bits

    def test_truncated_rejected(self):
        report = weight_report(np.ones(4), 0, 1, np.random.default_rng(0))
        data = serialize_report(report)
        with pytest.raises(ValueError):
            deserialize_report(data[: len(data) - 3])

    def test_trailing_bytes_rejected(self):
        report = weight_report(np.ones(4), 0, 1, np.random.default_rng(0))
        with pytest.raises(ValueError, match="trailing"):
            deserialize_report(serialize_report(report) + b"xx")

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError, match="header"):
            deserialize_report(b"ZZ\x01" + b"\x00" * 40)

    def test_golden_bytes_stable(self):
        table = AttributeTable(
            ("position:value", "owner"),
            [((0, 1.5), 7), ((1, -0.25), 7)],
            parts=(("position", "value"), ("owner",)),
        )
        plan = build_shuffle_plan(2, 2, 2, 1, np.random.default_rng(42))
        report = apply_shuffle_plan(table, plan, np.random.default_rng(42))
        assert serialize_report(report).hex() == GOLDEN_REPORT_HEX


GOLDEN_REPORT_HEX = (
    "425201f3c8bfb00297e01a1f96f526318c083ebaca86327caa6f9c580315e4aaffae410002"
    "000e706f736974696f6e3a76616c756500020008706f736974696f6e000576616c75650005"
    "6f776e6572000100056f776e657200000002040200000000000000000101bfd00000000000"
    "000000000000000000070402000000000000000000013ff800000000000000000000000000"
    "0007"
)
