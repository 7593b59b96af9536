import json
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest

from outagecast import datastore as ds
from outagecast import synthetic as syn

T0 = datetime(2014, 6, 1, 8, 0)


def outage(oid="o1", start=T0, hours=2.0, feeder="F1", planned=False, cause="other"):
    return ds.OutageRecord(oid, start, start + timedelta(hours=hours), feeder, "overhead",
                           cause, 10, planned)


def log_at(o, frac, feeder=None, text="x"):
    return ds.RepairLog(feeder or o.feeder, o.start + (o.end - o.start) * frac, text)


class TestRecords:
    def test_end_before_start(self):
        with pytest.raises(ds.DataError):
            ds.OutageRecord("o", T0, T0 - timedelta(hours=1), "F", "overhead", "other", 1)

    def test_negative_customers(self):
        with pytest.raises(ds.DataError):
            ds.OutageRecord("o", T0, T0 + timedelta(hours=1), "F", "overhead", "other", -1)

    def test_duration_hours(self):
        assert outage(hours=2.5).duration_h == 2.5

    def test_split_spec_order(self):
        with pytest.raises(ds.DataError):
            ds.SplitSpec(datetime(2015, 1, 1), datetime(2014, 1, 1))


class TestFilter:
    def test_rules(self):
        recs = [outage("long", hours=30), outage("short", hours=3 / 60), outage("ok", hours=2),
                outage("planned", hours=2, planned=True), outage("edge", hours=24)]
        assert [r.id for r in ds.filter_outages(recs)] == ["ok", "edge"]


class TestAlign:
    def test_tail_and_feeder_rules(self):
        o = outage()
        logs = [log_at(o, 0.5, text="mid"), log_at(o, 0.98, text="tail"),
                log_at(o, 0.5, feeder="F2", text="other feeder"), log_at(o, 0.1, text="early")]
        got = ds.align_logs([o], logs)
        assert [lg.text for lg in got["o1"]] == ["early", "mid"]

    def test_outside_window_not_attached(self):
        o = outage()
        logs = [ds.RepairLog("F1", o.start - timedelta(minutes=1), "before"),
                ds.RepairLog("F1", o.end + timedelta(minutes=1), "after")]
        assert ds.align_logs([o], logs) == {}

    def test_overlap_goes_to_latest_start(self):
        a = outage("a", start=T0, hours=4)
        b = outage("b", start=T0 + timedelta(hours=1), hours=2)
        lg = ds.RepairLog("F1", T0 + timedelta(hours=1, minutes=30), "overlap")
        got = ds.align_logs([a, b], [lg])
        assert list(got) == ["b"]

    def test_long_outage_behind_short_ones(self):
        a = outage("a", start=T0, hours=10)
        b = outage("b", start=T0 + timedelta(hours=1), hours=1)
        lg = ds.RepairLog("F1", T0 + timedelta(hours=5), "late")
        assert list(ds.align_logs([a, b], [lg])) == ["a"]

    def test_invariants_on_synthetic(self, small_corpus):
        corpus, _ = small_corpus
        kept = ds.filter_outages(corpus.outages)
        by_id = {o.id: o for o in kept}
        for oid, logs in ds.align_logs(kept, corpus.logs).items():
            o = by_id[oid]
            times = [lg.time for lg in logs]
            assert times == sorted(times)
            for lg in logs:
                assert lg.feeder == o.feeder and o.start <= lg.time <= o.end
                assert (lg.time - o.start) / (o.end - o.start) <= 0.975


class TestSplit:
    def test_paper_dates(self):
        tr, va, te = ds.split_by_date([outage("a", start=datetime(2014, 1, 1)),
                                       outage("b", start=datetime(2015, 6, 1)),
                                       outage("c", start=datetime(2014, 8, 1))])
        assert [r.id for r in tr] == ["a"]
        assert [r.id for r in va] == ["c"]
        assert [r.id for r in te] == ["b"]

    def test_partition(self, small_corpus):
        kept = ds.filter_outages(small_corpus[0].outages)
        parts = ds.split_by_date(kept)
        ids = [r.id for p in parts for r in p]
        assert sorted(ids) == sorted(r.id for r in kept)
        assert len(set(ids)) == len(ids)

    def test_empty_partition_warns(self, caplog):
        ds.split_by_date([outage("a", start=datetime(2010, 1, 1))])
        assert "empty" in caplog.text

    def test_split_spec_file(self, tmp_path):
        p = tmp_path / "split.txt"
        p.write_text("train_end = 2013-01-01\nvalidation_end = 2014-01-01T00:00:00\n")
        spec = ds.load_split_spec(p)
        assert spec.train_end == datetime(2013, 1, 1)


class TestFiles:
    def test_round_trip(self, tmp_path, small_corpus):
        corpus, _ = small_corpus
        ds.save_corpus(tmp_path, corpus)
        loaded, reports = ds.load_dir(tmp_path)
        assert loaded.outages == corpus.outages
        assert loaded.logs == corpus.logs
        assert loaded.weather == corpus.weather
        assert all(not r.errors for r in reports)

    def _write(self, path, kind, lines):
        path.write_text(f"#outagecast-{kind} v1\n" + "\n".join(lines) + "\n", encoding="utf-8")

    def _good(self, i):
        return json.dumps({"id": f"o{i}", "start": "2014-01-01T00:00:00", "end": "2014-01-01T02:00:00",
                           "feeder": "F", "line_type": "overhead", "cause": "other", "customers": 3})

    def test_three_records(self, tmp_path):
        p = tmp_path / "o.jsonl"
        self._write(p, "outages", [self._good(i) for i in range(3)])
        recs, report = ds.read_records(p, "outages")
        assert len(recs) == 3 and report.errors == []

    def test_bad_line_reported_with_reason(self, tmp_path):
        bad = json.dumps({"id": "x", "start": "2014-01-01T05:00:00", "end": "2014-01-01T02:00:00",
                          "feeder": "F", "line_type": "overhead", "cause": "other", "customers": 3})
        p = tmp_path / "o.jsonl"
        self._write(p, "outages", [self._good(i) for i in range(10)] + [bad])
        recs, report = ds.read_records(p, "outages")
        assert len(recs) == 10
        assert report.errors[0][0] == 12 and "end must be after start" in report.errors[0][1]

    def test_too_many_bad_lines_abort(self, tmp_path):
        p = tmp_path / "o.jsonl"
        self._write(p, "outages", [self._good(0), "{not json", '{"id": 1}'])
        with pytest.raises(ds.DataError):
            ds.read_records(p, "outages")

    def test_wrong_header(self, tmp_path):
        p = tmp_path / "o.jsonl"
        self._write(p, "logs", [self._good(0)])
        with pytest.raises(ds.DataError, match="line 1"):
            ds.read_records(p, "outages")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ds.DataError):
            ds.load_dir(tmp_path)

    def test_utc_offset_converted(self):
        assert ds.parse_time("2014-01-01T08:00:00+02:00") == datetime(2014, 1, 1, 6)


class TestGenerator:
    def test_byte_identical(self, tmp_path):
        cfg = syn.GenConfig(n_outages=40)
        for sub in ("a", "b"):
            corpus, _ = syn.generate_synthetic(cfg, seed=11)
            ds.save_corpus(tmp_path / sub, corpus)
        for name in (ds.OUTAGE_FILE, ds.LOG_FILE, ds.WEATHER_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self):
        a, _ = syn.generate_synthetic(syn.GenConfig(n_outages=20), seed=1)
        b, _ = syn.generate_synthetic(syn.GenConfig(n_outages=20), seed=2)
        assert a.outages != b.outages

    def test_priors_must_sum_to_one(self):
        cfg = syn.GenConfig()
        bad = replace(cfg, priors={**cfg.priors, "bird": 0.5})
        with pytest.raises(syn.GenConfigError):
            bad.validate()

    @pytest.mark.parametrize("key", syn.CAUSE_KEYS)
    def test_cause_duration_means(self, key):
        cfg = syn.GenConfig()
        x = syn.sample_cause_durations(cfg, key, 10_000, np.random.default_rng(123))
        assert x.mean() == pytest.approx(cfg.cause_mean(key), rel=0.03)

    def test_bird_seasonality(self):
        cfg = syn.GenConfig()
        bird = syn.CAUSE_KEYS.index("bird")
        summer = syn.cause_probabilities(cfg, 7, 6, 2, 7.0, 15.0, False)[bird]
        winter = syn.cause_probabilities(cfg, 1, 0, 2, 7.0, 5.0, False)[bird]
        assert summer / winter > 3

    def test_generated_bird_frequency(self):
        corpus, truth = syn.generate_synthetic(syn.GenConfig(n_outages=4000), seed=5)
        summer = [o for o in corpus.outages if o.start.month in (6, 7) and 5 <= o.start.hour <= 7]
        winter = [o for o in corpus.outages if o.start.month in (12, 1) and o.start.hour in (23, 0)]

        def rate(recs):
            return sum(truth[o.id]["cause"] == "bird" for o in recs) / len(recs)

        assert rate(summer) > 3 * rate(winter)

    def test_keywords_only_after_first_log(self, small_corpus):
        _, truth = small_corpus
        assert all(t["keywords"][0] is None for t in truth.values())
        planted = [kw for t in truth.values() for kw in t["keywords"][1:]]
        share = sum(kw is not None for kw in planted) / len(planted)
        assert 0.75 < share < 0.95

    def test_log_counts_in_range(self, small_corpus):
        _, truth = small_corpus
        assert all(1 <= len(t["keywords"]) <= 6 for t in truth.values())

    def test_filter_rates(self, small_corpus):
        corpus, _ = small_corpus
        kept = ds.filter_outages(corpus.outages)
        assert len(kept) >= 0.85 * len(corpus.outages)
        with_logs = ds.align_logs(kept, corpus.logs)
        assert len(with_logs) >= 0.85 * len(kept)

    def test_config_file(self, tmp_path):
        p = tmp_path / "gen.txt"
        p.write_text("n_outages = 25\nshape.bird = 3.0\nkeywords.tree = oak, elm\n", encoding="utf-8")
        cfg = syn.load_gen_config(p)
        assert cfg.n_outages == 25 and cfg.shapes["bird"] == 3.0
        assert cfg.keywords["tree"] == ("oak", "elm")

    def test_config_file_unknown_key(self, tmp_path):
        p = tmp_path / "gen.txt"
        p.write_text("colour = blue\n", encoding="utf-8")
        with pytest.raises(syn.GenConfigError):
            syn.load_gen_config(p)
