import math
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest

from outagecast import datastore as ds
from outagecast import features as ft
from outagecast.pipeline import prepare

T0 = datetime(2014, 6, 7, 9, 30)   # a Saturday


def _weather(t, **kw):
    vals = dict(temperature=10.0, apparent_temperature=9.0, cloud_cover=0.5, dew_point=5.0,
                humidity=0.7, precip_intensity=0.0, precip_probability=0.1, pressure=1015.0,
                wind_speed=6.0)
    vals.update(kw)
    return ds.WeatherRow(t, **vals)


def _outage(customers=113, start=T0, feeder="F1", cause="tree/wind"):
    return ds.OutageRecord("o", start, start + timedelta(hours=2), feeder, "overhead", cause, customers)


STATS = ft.FeederStats({"F1": 10}, {"F1": 4.0}, 2.0)


class TestFeederSmoothing:
    def test_unseen_feeder_gets_global_mean(self):
        assert ft.feeder_smoothed_mean(STATS, "F9") == 2.0

    def test_worked_example(self):
        assert ft.feeder_smoothed_mean(STATS, "F1") == pytest.approx(3.0, abs=1e-15)

    def test_large_count_approaches_feeder_mean(self):
        s = ft.FeederStats({"F": 10**9}, {"F": 4.0}, 2.0)
        assert ft.feeder_smoothed_mean(s, "F") == pytest.approx(4.0, abs=1e-7)

    def test_from_outages(self):
        recs = [replace(_outage(), id=str(i), feeder=f, end=T0 + timedelta(hours=h))
                for i, (f, h) in enumerate([("A", 1), ("A", 3), ("B", 5)])]
        s = ft.FeederStats.from_outages(recs)
        assert s.counts == {"A": 2, "B": 1}
        assert s.means["A"] == 2.0 and s.global_mean == 3.0


class TestExtract:
    def test_layout_and_values(self):
        v = ft.extract(_outage(), _weather(T0), [], STATS)
        assert v.shape == (19,) and ft.N_ONSET == 19
        assert v[4] == 1.0                                   # weekend
        assert v[14] == 1.0                                  # overhead
        assert v[15] == pytest.approx(3.0)
        assert v[16] == pytest.approx(math.log(114), abs=1e-12)
        assert round(v[16], 3) == 4.736
        assert v[3] == 9 / 24 and v[0] == 5 / 12

    def test_zero_customers(self):
        assert ft.extract(_outage(customers=0), _weather(T0), [], STATS)[16] == 0.0

    def test_recent_counts_exclude_self_and_window_edges(self):
        starts = [T0, T0 - timedelta(hours=1), T0 - timedelta(hours=3), T0 - timedelta(hours=5),
                  T0 - timedelta(hours=9), T0 + timedelta(minutes=1)]
        v = ft.extract(_outage(), _weather(T0), starts, STATS)
        assert v[17] == 1.0 and v[18] == 3.0

    def test_cause_block(self):
        v = ft.extract(_outage(), _weather(T0), [], STATS, include_cause=True)
        assert v.shape == (25,)
        assert v[19:].sum() == 1.0 and v[19 + ds.CAUSES.index("tree/wind")] == 1.0

    def test_missing_weather(self):
        with pytest.raises(ds.DataError, match="o"):
            ft.extract(_outage(), None, [], STATS)

    def test_pure(self):
        a = ft.extract(_outage(), _weather(T0), [T0 - timedelta(hours=1)], STATS)
        b = ft.extract(_outage(), _weather(T0), [T0 - timedelta(hours=1)], STATS)
        assert a.tobytes() == b.tobytes()


class TestWeatherIndex:
    def test_nearest_and_tie_goes_earlier(self):
        rows = [_weather(T0), _weather(T0 + timedelta(hours=1), temperature=20.0)]
        idx = ft.WeatherIndex(rows)
        assert idx.nearest(T0 + timedelta(minutes=30)).temperature == 10.0
        assert idx.nearest(T0 + timedelta(minutes=31)).temperature == 20.0
        assert idx.nearest(T0 - timedelta(days=1)).temperature == 10.0


class TestStandardize:
    @pytest.fixture()
    def X(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 2.0, size=(200, 19))
        X[:, [4, 14]] = rng.integers(0, 2, size=(200, 2))
        X[:, :4] = rng.random((200, 4))
        return X

    def test_mean_maps_to_zero(self, X):
        s = ft.StandardizationStats.fit(X)
        z = ft.standardize(s.mean, s)
        cont = [i for i in range(19) if i not in s.exempt]
        np.testing.assert_allclose(z[cont], 0.0, atol=1e-15)

    def test_exempt_dims_pass_through(self, X):
        s = ft.StandardizationStats.fit(X)
        Z = ft.standardize(X, s)
        np.testing.assert_array_equal(Z[:, [0, 1, 2, 3, 4, 14]], X[:, [0, 1, 2, 3, 4, 14]])

    def test_invertible(self, X):
        s = ft.StandardizationStats.fit(X)
        np.testing.assert_allclose(ft.unstandardize(ft.standardize(X, s), s), X, atol=1e-12)

    def test_training_moments(self, X):
        s = ft.StandardizationStats.fit(X)
        Z = ft.standardize(X, s)
        cont = [i for i in range(19) if i not in s.exempt]
        np.testing.assert_allclose(Z[:, cont].mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(Z[:, cont].std(axis=0), 1.0, atol=1e-6)

    def test_constant_column_floor(self):
        s = ft.StandardizationStats.fit(np.ones((5, 19)))
        assert (s.std > 0).all()

    def test_width_mismatch(self, X):
        s = ft.StandardizationStats.fit(X)
        with pytest.raises(ds.DataError):
            ft.standardize(np.ones(18), s)


class TestGroups:
    def test_widths(self):
        X = np.zeros((3, 25))
        assert ft.select(X, "none").shape == (3, 0)
        assert ft.select(X, "time").shape == (3, 5)
        assert ft.select(X, "time+weather").shape == (3, 14)
        assert ft.select(X, "onset").shape == (3, 19)
        assert ft.select(X, "cause+onset").shape == (3, 25)

    def test_unknown(self):
        with pytest.raises(ValueError):
            ft.select(np.zeros((1, 19)), "bogus")


class TestLeakage:
    def test_test_durations_do_not_touch_training_state(self, small_corpus):
        corpus, _ = small_corpus
        base = prepare(corpus)
        test_ids = {o.id for o in base["test"].outages} | {o.id for o in base["validation"].outages}
        moved = [replace(o, end=o.end + timedelta(hours=1)) if o.id in test_ids else o
                 for o in corpus.outages]
        other = prepare(ds.Corpus(moved, corpus.logs, corpus.weather))
        assert other.feeder_stats == base.feeder_stats
        np.testing.assert_array_equal(other.std.mean, base.std.mean)
        np.testing.assert_array_equal(other["train"].X, base["train"].X)
        assert other.vocab.tokens == base.vocab.tokens
