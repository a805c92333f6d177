import pytest
from hypothesis import given, strategies as st

from enclavewatch.model import (
    DuplicateLabel,
    DuplicateSeries,
    InvalidLabelName,
    InvalidMetricName,
    LabelSet,
    MetricFamily,
    MetricKind,
    Sample,
    canonicalize_labels,
    series_key,
)


def _fnv_oracle(data: bytes) -> int:
    """Independent FNV-1a 64 reference, literal published algorithm."""
    h = 14695981039346656037
    for b in data:
        h ^= b
        h = (h * 1099511628211) % (1 << 64)
    return h


# Frozen from the oracle above over the canonical byte encoding.
UP_JOB_A_ID = 0x431B3EEA1B3C5ECF  # _fnv_oracle(b"up\x00job\x01a\x00")
UP_JOB_B_ID = 0x43110CEA1B33B554  # _fnv_oracle(b"up\x00job\x01b\x00")
UP_BARE_ID = 0x4C481B193DC39480  # _fnv_oracle(b"up\x00")


class TestCanonicalizeLabels:
    def test_sorts_by_name(self):
        ls = canonicalize_labels([("b", "2"), ("a", "1")])
        assert ls.pairs == (("a", "1"), ("b", "2"))

    def test_empty(self):
        assert canonicalize_labels([]) == LabelSet()

    def test_duplicate_name_rejected(self):
        with pytest.raises(DuplicateLabel):
            canonicalize_labels([("a", "1"), ("a", "2")])

    def test_invalid_name_rejected(self):
        with pytest.raises(InvalidLabelName):
            canonicalize_labels([("0bad", "x")])
        with pytest.raises(InvalidLabelName):
            canonicalize_labels([("has-dash", "x")])

    def test_equality_is_canonical(self):
        a = canonicalize_labels([("x", "1"), ("y", "2")])
        b = canonicalize_labels([("y", "2"), ("x", "1")])
        assert a == b and hash(a) == hash(b)

    @given(
        st.lists(
            st.tuples(
                st.from_regex(r"[a-zA-Z_][a-zA-Z0-9_]{0,8}", fullmatch=True),
                st.text(max_size=8),
            ),
            max_size=8,
            unique_by=lambda p: p[0],
        )
    )
    def test_idempotent(self, pairs):
        once = canonicalize_labels(pairs)
        assert canonicalize_labels(once.pairs) == once


class TestLabelSet:
    def test_merged_over_prefers_own_pairs(self):
        own = LabelSet.of(job="tee", pid="7")
        defaults = LabelSet.of(job="default", node="n1")
        merged = own.merged_over(defaults)
        assert merged == LabelSet.of(job="tee", pid="7", node="n1")

    def test_project(self):
        ls = LabelSet.of(a="1", b="2", c="3")
        assert ls.project(["a", "c", "missing"]) == LabelSet.of(a="1", c="3")

    def test_non_canonical_construction_rejected(self):
        with pytest.raises(ValueError):
            LabelSet((("b", "1"), ("a", "2")))


class TestSeriesKey:
    def test_deterministic(self):
        assert series_key("up").id == series_key("up").id == UP_BARE_ID

    def test_distinct_labels_distinct_ids(self):
        a = series_key("up", LabelSet.of(job="a"))
        b = series_key("up", LabelSet.of(job="b"))
        assert a.id == UP_JOB_A_ID
        assert b.id == UP_JOB_B_ID
        assert a.id != b.id

    def test_matches_independent_oracle(self):
        assert series_key("up", LabelSet.of(job="a")).id == _fnv_oracle(b"up\x00job\x01a\x00")

    def test_invalid_name(self):
        with pytest.raises(InvalidMetricName):
            series_key("9bad")

    def test_accepts_plain_mapping(self):
        assert series_key("up", {"job": "a"}).id == UP_JOB_A_ID

    def test_injective_on_random_corpus(self):
        # Collisions are tolerated by design but must not occur on this
        # fixed 1e5-key corpus.
        import random

        rng = random.Random(20260811)
        seen = set()
        ids = set()
        n = 0
        while n < 100_000:
            name = "m" + "".join(rng.choices("abcdefgh_0123456789", k=rng.randint(1, 12)))
            labels = LabelSet(
                tuple(
                    sorted(
                        {
                            "l" + str(i): str(rng.randrange(10**6))
                            for i in range(rng.randint(0, 3))
                        }.items()
                    )
                )
            )
            key = (name, labels.pairs)
            if key in seen:
                continue
            seen.add(key)
            ids.add(series_key(name, labels).id)
            n += 1
        assert len(ids) == n


class TestSampleAndFamily:
    def test_negative_timestamp_rejected(self):
        with pytest.raises(ValueError):
            Sample(-1, 0.0)

    def test_no_timestamp_sentinel(self):
        assert Sample(None, 1.5).timestamp_ms is None

    def test_duplicate_series_rejected(self):
        with pytest.raises(DuplicateSeries):
            MetricFamily(
                "m",
                MetricKind.GAUGE,
                "",
                ((LabelSet.of(a="1"), Sample(1, 1.0)), (LabelSet.of(a="1"), Sample(2, 2.0))),
            )

    def test_invalid_family_name(self):
        with pytest.raises(InvalidMetricName):
            MetricFamily("has space", MetricKind.GAUGE)
