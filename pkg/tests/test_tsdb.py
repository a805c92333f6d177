import math
import random

import pytest

from enclavewatch.model import LabelSet, Sample, series_key
from enclavewatch.tsdb import (
    AggSpec,
    BadRegex,
    CHUNK_MAX_SAMPLES,
    LabelMatcher,
    MetricStore,
    NonFiniteValue,
    OutOfOrderSample,
    QuantileOutOfRange,
    QuerySpec,
    Selector,
    counter_rate,
    parse_matcher,
    quantile_interpolated,
)


def q(name, start, end, step, agg=None, matchers=()):
    return QuerySpec(Selector(name, tuple(matchers)), start, end, step, agg)


class TestAppend:
    def test_three_samples_one_chunk(self):
        store = MetricStore()
        key = series_key("m")
        for t in (1, 2, 3):
            store.append(key, Sample(t, float(t)))
        data = store._series[key.id]
        assert len(data.chunks) == 1
        assert len(data.chunks[0]) == 3

    def test_chunk_cap_splits_at_240(self):
        store = MetricStore()
        key = series_key("m")
        for t in range(241):
            store.append(key, Sample(t, 0.0))
        chunks = store._series[key.id].chunks
        assert [len(c) for c in chunks] == [CHUNK_MAX_SAMPLES, 1]

    def test_equal_timestamp_rejected(self):
        store = MetricStore()
        key = series_key("m")
        store.append(key, Sample(5, 1.0))
        with pytest.raises(OutOfOrderSample):
            store.append(key, Sample(5, 2.0))

    def test_non_finite_rejected(self):
        store = MetricStore()
        key = series_key("m")
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(NonFiniteValue):
                store.append(key, Sample(1, bad))

    def test_append_many_is_all_or_none(self):
        store = MetricStore()
        key = series_key("m")
        store.append(key, Sample(10, 1.0))
        with pytest.raises(OutOfOrderSample):
            store.append_many([(key, Sample(11, 1.0)), (key, Sample(10, 2.0))])
        assert store.select_range(q("m", 0, 100, 1))[0][1] == [Sample(10, 1.0)]


class TestSelectRange:
    def test_label_equality_matcher(self):
        store = MetricStore()
        store.append(series_key("up", LabelSet.of(job="tee")), Sample(1, 1.0))
        store.append(series_key("up", LabelSet.of(job="sys")), Sample(1, 1.0))
        got = store.select_range(q("up", 0, 10, 1, matchers=[parse_matcher("job==tee")]))
        assert len(got) == 1
        assert got[0][0].labels == LabelSet.of(job="tee")

    def test_empty_range_is_empty_not_error(self):
        store = MetricStore()
        store.append(series_key("m"), Sample(100, 1.0))
        got = store.select_range(q("m", 0, 50, 1))
        assert got == [(series_key("m"), [])]

    def test_regex_matcher(self):
        store = MetricStore()
        for pid in ("1", "12", "2"):
            store.append(series_key("m", LabelSet.of(pid=pid)), Sample(1, 1.0))
        got = store.select_range(q("m", 0, 10, 1, matchers=[parse_matcher("pid=~1.*")]))
        assert [k.labels.get("pid") for k, _ in got] == ["1", "12"]

    def test_bad_regex(self):
        store = MetricStore()
        store.append(series_key("m"), Sample(1, 1.0))
        with pytest.raises(BadRegex):
            store.select_range(q("m", 0, 10, 1, matchers=[LabelMatcher("a", "=~", "[")]))

    def test_absent_label_matches_not_equal(self):
        store = MetricStore()
        store.append(series_key("m"), Sample(1, 1.0))
        got = store.select_range(q("m", 0, 10, 1, matchers=[parse_matcher("job!=tee")]))
        assert len(got) == 1

    def test_deterministic_order(self):
        store = MetricStore()
        for job in ("z", "a", "m"):
            store.append(series_key("up", LabelSet.of(job=job)), Sample(1, 1.0))
        got = store.select_range(q("up", 0, 10, 1))
        assert [k.labels.get("job") for k, _ in got] == ["a", "m", "z"]


class TestEvaluate:
    def test_sum_over_two_gauges(self):
        store = MetricStore()
        store.append(series_key("g", LabelSet.of(i="1")), Sample(1000, 2.0))
        store.append(series_key("g", LabelSet.of(i="2")), Sample(1000, 3.0))
        got = store.evaluate(q("g", 1000, 1000, 1000, agg=AggSpec("sum")))
        assert got == [(LabelSet(), [(1000, 5.0)])]

    def test_rate_simple(self):
        store = MetricStore()
        key = series_key("c")
        store.append(key, Sample(0, 0.0))
        store.append(key, Sample(10_000, 50.0))
        got = store.evaluate(q("c", 10_000, 10_000, 10_001, agg=AggSpec("rate")))
        assert got == [(LabelSet(), [(10_000, 5.0)])]

    def test_rate_across_reset(self):
        # counter drops 10 -> 2 over 8 s: adjusted increase (2 + 10 - 10) / 8
        store = MetricStore()
        key = series_key("c")
        store.append(key, Sample(1000, 10.0))
        store.append(key, Sample(9000, 2.0))
        got = store.evaluate(q("c", 9000, 9000, 9000, agg=AggSpec("rate")))
        assert got[0][1] == [(9000, pytest.approx(0.25))]

    def test_group_by(self):
        store = MetricStore()
        store.append(series_key("m", LabelSet.of(job="a", pid="1")), Sample(10, 1.0))
        store.append(series_key("m", LabelSet.of(job="a", pid="2")), Sample(10, 2.0))
        store.append(series_key("m", LabelSet.of(job="b", pid="3")), Sample(10, 4.0))
        got = store.evaluate(q("m", 10, 10, 10, agg=AggSpec("sum", group_by=("job",))))
        assert got == [
            (LabelSet.of(job="a"), [(10, 3.0)]),
            (LabelSet.of(job="b"), [(10, 4.0)]),
        ]

    def test_staleness_omits_grid_points(self):
        store = MetricStore()
        store.append(series_key("m"), Sample(1000, 1.0))
        got = store.evaluate(q("m", 0, 5000, 1000, agg=AggSpec("max")))
        assert got == [(LabelSet(), [(1000, 1.0)])]

    def test_quantile_out_of_range(self):
        with pytest.raises(QuantileOutOfRange):
            AggSpec("quantile", q=1.5)
        with pytest.raises(QuantileOutOfRange):
            AggSpec("quantile")

    def test_instant_value_is_last_in_window(self):
        store = MetricStore()
        key = series_key("g")
        store.append(key, Sample(1, 10.0))
        store.append(key, Sample(900, 7.0))
        got = store.evaluate(q("g", 1000, 1000, 1000, agg=AggSpec("max")))
        assert got == [(LabelSet(), [(1000, 7.0)])]


class TestQuantileHelpers:
    def test_interpolation_positions(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert quantile_interpolated(values, 0.25) == 1.75
        assert quantile_interpolated(values, 0.5) == 2.5
        assert quantile_interpolated(values, 0.75) == 3.25

    def test_counter_rate_needs_two_samples(self):
        assert counter_rate([1], [5.0]) is None
        assert counter_rate([1, 1], [5.0, 6.0]) is None


class TestGc:
    def test_nothing_purged_inside_retention(self):
        store = MetricStore()
        store.append(series_key("m"), Sample(1000, 1.0))
        assert store.gc(retention_ms=10_000, now_ms=5000) == 0

    def test_everything_purged(self):
        store = MetricStore()
        key = series_key("m")
        store.append(key, Sample(1000, 1.0))
        assert store.gc(retention_ms=1000, now_ms=10_000) == 1
        assert store.select_range(q("m", 0, 10_000, 1)) == []

    def test_straddling_chunk_retained(self):
        store = MetricStore()
        key = series_key("m")
        store.append(key, Sample(1000, 1.0))
        store.append(key, Sample(9000, 2.0))
        assert store.gc(retention_ms=4000, now_ms=10_000) == 0
        assert len(store.select_range(q("m", 0, 10_000, 1))[0][1]) == 2


class TestSnapshot:
    def test_recovery_replays_samples(self, tmp_path):
        path = str(tmp_path / "snap.ewt")
        store = MetricStore(snapshot_path=path)
        key = series_key("m", LabelSet.of(job="tee"))
        store.append(key, Sample(1, 1.0))
        store.append(key, Sample(2, 4.0))
        store.close()

        recovered = MetricStore(snapshot_path=path)
        got = recovered.select_range(q("m", 0, 10, 1))
        assert got == [(key, [Sample(1, 1.0), Sample(2, 4.0)])]
        recovered.append(key, Sample(3, 9.0))
        recovered.close()

        third = MetricStore(snapshot_path=path)
        assert len(third.select_range(q("m", 0, 10, 1))[0][1]) == 3
        third.close()

    def test_magic_header(self, tmp_path):
        path = str(tmp_path / "snap.ewt")
        store = MetricStore(snapshot_path=path)
        store.append(series_key("m"), Sample(1, 1.0))
        store.close()
        assert open(path, "rb").read(4) == b"EWT1"

    def test_truncated_tail_tolerated(self, tmp_path):
        path = str(tmp_path / "snap.ewt")
        store = MetricStore(snapshot_path=path)
        key = series_key("m")
        store.append(key, Sample(1, 1.0))
        store.append(key, Sample(2, 2.0))
        store.close()
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-5])  # cut into the final record
        recovered = MetricStore(snapshot_path=path)
        assert recovered.select_range(q("m", 0, 10, 1))[0][1] == [Sample(1, 1.0)]
        recovered.close()


# --- brute-force oracle ---------------------------------------------------


def oracle_evaluate(flat, query):
    """Naive reimplementation over a flat (labels, ts, value) sample list."""
    agg = query.agg
    series = {}
    for labels, ts, value in flat:
        series.setdefault(labels, []).append((ts, value))
    for samples in series.values():
        samples.sort()

    groups = {}
    for t in range(query.start_ms, query.end_ms + 1, query.step_ms):
        per_group = {}
        for labels, samples in sorted(series.items()):
            window = [(ts, v) for ts, v in samples if t - query.step_ms < ts <= t]
            if not window:
                continue
            if agg.func == "rate":
                if len(window) < 2 or window[-1][0] == window[0][0]:
                    continue
                corr = 0.0
                for (_, prev), (_, cur) in zip(window, window[1:]):
                    if cur < prev:
                        corr += prev
                value = (window[-1][1] + corr - window[0][1]) / (
                    (window[-1][0] - window[0][0]) / 1000.0
                )
            else:
                value = window[-1][1]
            group = tuple(p for p in labels if p[0] in agg.group_by)
            per_group.setdefault(group, []).append(value)
        for group, vals in per_group.items():
            if agg.func in ("sum", "rate"):
                out = sum(vals)
            elif agg.func == "avg":
                out = sum(vals) / len(vals)
            elif agg.func == "min":
                out = min(vals)
            elif agg.func == "max":
                out = max(vals)
            elif agg.func == "count":
                out = float(len(vals))
            else:
                vs = sorted(vals)
                pos = (len(vs) - 1) * agg.q
                lo = int(pos)
                hi = min(lo + 1, len(vs) - 1)
                out = vs[lo] + (vs[hi] - vs[lo]) * (pos - lo)
            groups.setdefault(group, []).append((t, out))
    return [(LabelSet(g), pts) for g, pts in sorted(groups.items())]


def build_random_store(rng, n_samples=1000):
    store = MetricStore()
    flat = []
    n_series = rng.randint(1, 8)
    keys = []
    for i in range(n_series):
        labels = {"job": rng.choice(("tee", "sys")), "idx": str(i)}
        if rng.random() < 0.5:
            labels["pid"] = str(rng.randint(1, 3))
        keys.append(series_key("m", LabelSet.of(**labels)))
    last = {k.id: 0 for k in keys}
    for _ in range(n_samples):
        key = rng.choice(keys)
        ts = last[key.id] + rng.randint(1, 400)
        last[key.id] = ts
        value = rng.uniform(-100, 100) if rng.random() < 0.7 else float(rng.randint(0, 50))
        store.append(key, Sample(ts, value))
        flat.append((key.labels.pairs, ts, value))
    return store, flat


class TestOracleEquivalence:
    @pytest.mark.parametrize("func", ["sum", "min", "max", "count"])
    def test_exact_aggregations(self, func):
        rng = random.Random(hash(func) & 0xFFFF)
        for trial in range(20):
            store, flat = build_random_store(rng, 500)
            group_by = rng.choice(((), ("job",), ("job", "pid")))
            query = q("m", 0, 12_000, rng.choice((500, 1000, 3000)), AggSpec(func, group_by=group_by))
            assert store.evaluate(query) == oracle_evaluate(flat, query)

    @pytest.mark.parametrize("func", ["avg", "rate", "quantile"])
    def test_tolerance_aggregations(self, func):
        rng = random.Random(hash(func) & 0xFFFF)
        for trial in range(20):
            store, flat = build_random_store(rng, 500)
            qval = rng.random() if func == "quantile" else None
            query = q("m", 0, 12_000, rng.choice((500, 1000, 3000)), AggSpec(func, q=qval, group_by=("job",)))
            got = store.evaluate(query)
            want = oracle_evaluate(flat, query)
            assert [g for g, _ in got] == [g for g, _ in want]
            for (_, got_pts), (_, want_pts) in zip(got, want):
                assert [t for t, _ in got_pts] == [t for t, _ in want_pts]
                for (_, gv), (_, wv) in zip(got_pts, want_pts):
                    assert gv == pytest.approx(wv, rel=1e-9, abs=1e-12)

    def test_chunking_is_invisible(self):
        # same samples through one store (chunked at 240) and a fresh
        # flat-list oracle must agree on a long query
        rng = random.Random(77)
        store, flat = build_random_store(rng, 2000)
        query = q("m", 0, 200_000, 5000, AggSpec("sum"))
        assert store.evaluate(query) == oracle_evaluate(flat, query)
