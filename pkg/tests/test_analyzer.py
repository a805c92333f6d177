import random

import pytest

from enclavewatch.analyzer import (
    AlertRegistry,
    Analyzer,
    AnomalyAlert,
    EmptyWindow,
    ThresholdRule,
    boxplot,
)
from enclavewatch.clockwork import ManualClock
from enclavewatch.exporters import ExporterConfig, TeeSimulatorSource, serve_metrics
from enclavewatch.model import LabelSet, Sample, series_key
from enclavewatch.scraper import ScrapeTarget, Scraper
from enclavewatch.sgx_sim import new_driver
from enclavewatch.tsdb import AggSpec, LabelMatcher, MetricStore, QuerySpec, Selector


def rule_for(name, agg, comparator, threshold, window_ms=60_000, stride_ms=60_000,
             step_ms=10_000, matchers=(), **kw):
    query = QuerySpec(Selector(name, tuple(matchers)), 0, 0, step_ms, agg)
    return ThresholdRule(
        id=f"{name}-{comparator}-{threshold}",
        query=query,
        comparator=comparator,
        threshold=threshold,
        window_ms=window_ms,
        stride_ms=stride_ms,
        **kw,
    )


def store_with(name, samples, labels=LabelSet()):
    store = MetricStore()
    key = series_key(name, labels)
    for ts, value in samples:
        store.append(key, Sample(ts, value))
    return store


class TestBoxplot:
    def test_symmetric_window(self):
        store = store_with("m", [(i, float(v)) for i, v in enumerate([1, 2, 3, 4, 5])])
        summary = boxplot(Selector("m"), 0, 10, store)
        assert (summary.min, summary.q1, summary.median, summary.q3, summary.max) == (
            1.0,
            2.0,
            3.0,
            4.0,
            5.0,
        )

    def test_interpolated_quartiles(self):
        store = store_with("m", [(i, float(v)) for i, v in enumerate([1, 2, 3, 4])])
        summary = boxplot(Selector("m"), 0, 10, store)
        assert summary.q1 == 1.75
        assert summary.median == 2.5
        assert summary.q3 == 3.25

    def test_single_value(self):
        store = store_with("m", [(1, 7.0)])
        summary = boxplot(Selector("m"), 0, 10, store)
        assert (summary.min, summary.q1, summary.median, summary.q3, summary.max) == (
            7.0,
        ) * 5
        assert summary.count == 1

    def test_empty_window(self):
        store = store_with("m", [(100, 1.0)])
        with pytest.raises(EmptyWindow):
            boxplot(Selector("m"), 0, 50, store)

    def test_matches_sorted_array_oracle(self):
        rng = random.Random(2026)
        for _ in range(100):
            n = rng.randint(1, 200)
            values = [rng.uniform(-1000, 1000) for _ in range(n)]
            store = store_with("m", list(enumerate(values)))
            summary = boxplot(Selector("m"), 0, n + 1, store)

            ordered = sorted(values)

            def q(p):
                pos = (n - 1) * p
                lo = int(pos)
                hi = min(lo + 1, n - 1)
                return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)

            assert summary.min == ordered[0]
            assert summary.q1 == q(0.25)
            assert summary.median == q(0.5)
            assert summary.q3 == q(0.75)
            assert summary.max == ordered[-1]
            assert summary.count == n


def oracle_rate(samples, lo, hi):
    window = [(t, v) for t, v in samples if lo < t <= hi]
    if len(window) < 2:
        return None
    corr = 0.0
    for (_, a), (_, b) in zip(window, window[1:]):
        if b < a:
            corr += a
    return (window[-1][1] + corr - window[0][1]) / ((window[-1][0] - window[0][0]) / 1000.0)


class TestEvaluateWindow:
    def make_pipeline(self):
        driver = new_driver(16)
        enclave = driver.create_enclave(256)
        driver.touch_pages(enclave, range(16))  # fill the pool, no evictions yet
        server = serve_metrics(ExporterConfig(sources=[TeeSimulatorSource(driver)]))
        clock = ManualClock()
        store = MetricStore()
        scraper = Scraper(store, clock)
        target = ScrapeTarget("tee", server.url)
        return driver, enclave, server, clock, store, scraper, target

    def test_eviction_burst_fires_with_recomputed_observed(self):
        driver, enclave, server, clock, store, scraper, target = self.make_pipeline()
        try:
            scraper.scrape_once(target)  # t=0, evicted 0
            clock.advance(5000)
            scraper.scrape_once(target)  # t=5000, evicted 0
            driver.touch_pages(enclave, range(16, 166))  # burst: 150 evictions
            clock.advance(5000)
            scraper.scrape_once(target)  # t=10000, evicted 150
            clock.advance(5000)
            scraper.scrape_once(target)  # t=15000, evicted 150

            rule = rule_for(
                "sgx_nr_evicted", AggSpec("rate"), ">", 1.0, window_ms=15_000, stride_ms=15_000
            )
            analyzer = Analyzer([rule], store, clock, sinks=[])
            alerts = analyzer.evaluate_window(rule, 15_000)
            assert len(alerts) == 1
            alert = alerts[0]
            assert alert.state == "firing"
            assert alert.observed >= 15.0

            # independent recomputation over the raw stored samples
            samples = [
                (s.timestamp_ms, s.value)
                for _, stored in store.select_range(QuerySpec(Selector("sgx_nr_evicted"), 0, 10**9, 1))
                for s in stored
            ]
            expected = max(
                r
                for t in range(0, 15_001, 10_000)
                if (r := oracle_rate(samples, t - 10_000, t)) is not None and r > 1.0
            )
            assert alert.observed == pytest.approx(expected, rel=1e-9)
        finally:
            scraper.stop()
            server.stop()

    def test_idle_pipeline_never_alerts(self):
        driver, enclave, server, clock, store, scraper, target = self.make_pipeline()
        try:
            for _ in range(4):
                scraper.scrape_once(target)
                clock.advance(5000)
            rule = rule_for(
                "sgx_nr_evicted", AggSpec("rate"), ">", 1.0, window_ms=20_000, stride_ms=20_000
            )
            analyzer = Analyzer([rule], store, clock, sinks=[])
            assert analyzer.evaluate_window(rule, 20_000) == []
        finally:
            scraper.stop()
            server.stop()

    def test_resolved_emitted_once(self):
        store = store_with("c", [(0, 0.0), (5000, 0.0), (10_000, 100.0), (60_000, 100.0), (70_000, 100.0)])
        rule = rule_for("c", AggSpec("rate"), ">", 1.0, window_ms=10_000, stride_ms=10_000)
        analyzer = Analyzer([rule], store, ManualClock(), sinks=[])

        fired = analyzer.evaluate_window(rule, 10_000)
        assert [a.state for a in fired] == ["firing"]

        resolved = analyzer.evaluate_window(rule, 70_000)
        assert [a.state for a in resolved] == ["resolved"]

        again = analyzer.evaluate_window(rule, 80_000)
        assert again == []

    def test_continued_violation_updates_without_reemitting(self):
        store = store_with("g", [(1000, 50.0), (61_000, 80.0)])
        rule = rule_for("g", AggSpec("max"), ">", 10.0, window_ms=60_000, stride_ms=60_000, step_ms=60_000)
        analyzer = Analyzer([rule], store, ManualClock(), sinks=[])

        first = analyzer.evaluate_window(rule, 60_000)
        assert [a.state for a in first] == ["firing"]
        assert first[0].observed == 50.0

        second = analyzer.evaluate_window(rule, 120_000)
        assert second == []  # deduplicated
        current = analyzer.registry.alerts(state="firing")
        assert current[0].observed == 80.0  # but refreshed

    def test_groups_alert_independently(self):
        store = MetricStore()
        store.append(series_key("g", LabelSet.of(pid="1")), Sample(1000, 5.0))
        store.append(series_key("g", LabelSet.of(pid="2")), Sample(1000, 50.0))
        rule = rule_for(
            "g",
            AggSpec("max", group_by=("pid",)),
            ">",
            10.0,
            window_ms=60_000,
            stride_ms=60_000,
            step_ms=60_000,
        )
        analyzer = Analyzer([rule], store, ManualClock(), sinks=[])
        alerts = analyzer.evaluate_window(rule, 60_000)
        assert [a.labels for a in alerts] == [LabelSet.of(pid="2")]


class TestRunLoop:
    def test_stride_schedule(self):
        store = store_with("g", [(1, 1.0)])
        clock = ManualClock()
        rule = rule_for("g", AggSpec("max"), ">", 100.0, window_ms=300_000, stride_ms=60_000)
        analyzer = Analyzer([rule], store, clock, sinks=[])
        seen = []
        original = analyzer.evaluate_window
        analyzer.evaluate_window = lambda r, now: (seen.append(now), original(r, now))[1]
        analyzer.start()
        clock.advance(185_000)
        analyzer.stop()
        assert seen == [60_000, 120_000, 180_000]

    def test_erroring_rule_is_isolated(self):
        store = store_with("g", [(1000, 50.0)])
        clock = ManualClock()
        bad_query = QuerySpec(
            Selector("g", (LabelMatcher("a", "=~", "["),)), 0, 0, 60_000, AggSpec("max")
        )  # regex compile fails at evaluate time
        bad = ThresholdRule(
            id="bad", query=bad_query, comparator=">", threshold=10.0,
            window_ms=60_000, stride_ms=60_000,
        )
        good = ThresholdRule(
            id="good",
            query=QuerySpec(Selector("g"), 0, 0, 60_000, AggSpec("max")),
            comparator=">", threshold=10.0, window_ms=60_000, stride_ms=60_000,
        )
        events = []
        analyzer = Analyzer([bad, good], store, clock, sinks=[events.append])
        analyzer.start()
        clock.advance(60_000)
        analyzer.stop()
        assert [a.rule_id for a in events] == [good.id]

    def test_boxplots_refreshed_for_sgx_metrics(self):
        store = store_with("sgx_nr_free_pages", [(i * 1000, float(100 - i)) for i in range(10)])
        clock = ManualClock()
        analyzer = Analyzer([], store, clock, sinks=[])
        analyzer.start()
        clock.advance(60_000)
        analyzer.stop()
        assert "sgx_nr_free_pages" in analyzer.latest_boxplots
        assert analyzer.latest_boxplots["sgx_nr_free_pages"].count == 10


class TestInvariants:
    def test_state_machine_never_double_fires(self):
        registry = AlertRegistry()
        rng = random.Random(11)
        labels = LabelSet.of(job="x")
        history = []
        for i in range(200):
            state = rng.choice(["firing", "resolved"])
            alert = AnomalyAlert("r", 0, 60_000, 1.0, 0.5, "warning", state, labels)
            if registry.update(alert):
                history.append(state)
        for a, b in zip(history, history[1:]):
            assert a != b

    def test_scale_invariance(self):
        # positive rescaling of samples and threshold together never
        # changes the outcome (count is excluded: it ignores magnitudes)
        rng = random.Random(5)
        for _ in range(40):
            samples = [(i * 1000, rng.uniform(0.1, 100.0)) for i in range(20)]
            threshold = rng.uniform(0.1, 100.0)
            comparator = rng.choice([">", "<", ">=", "<="])
            agg = rng.choice([AggSpec("sum"), AggSpec("max"), AggSpec("avg"), AggSpec("rate")])
            scale = rng.choice([0.001, 0.5, 3.0, 1e6])

            def outcome(factor):
                store = store_with("m", [(t, v * factor) for t, v in samples])
                rule = rule_for(
                    "m", agg, comparator, threshold * factor,
                    window_ms=20_000, stride_ms=20_000, step_ms=5_000,
                )
                analyzer = Analyzer([rule], store, ManualClock(), sinks=[])
                return bool(analyzer.evaluate_window(rule, 20_000))

            assert outcome(1.0) == outcome(scale)

    def test_evaluation_is_read_only(self):
        store = store_with("g", [(1000, 50.0)])
        query = QuerySpec(Selector("g"), 0, 10**9, 10**9)
        before = store.select_range(query)
        rule = rule_for("g", AggSpec("max"), ">", 10.0, window_ms=60_000, stride_ms=60_000)
        analyzer = Analyzer([rule], store, ManualClock(), sinks=[])
        analyzer.evaluate_window(rule, 60_000)
        analyzer.evaluate_window(rule, 120_000)
        assert store.select_range(query) == before
