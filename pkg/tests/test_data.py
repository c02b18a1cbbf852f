import datetime as dt
import io
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loadcnn import data
from loadcnn.data import MeterReading, SplitSpec

EPOCH = dt.date(2009, 1, 1)


# ---- parsing


def test_parse_example():
    (r,) = data.parse_readings(["1392,19503,0.14"])
    assert r == MeterReading("1392", 195, 3, 0.14)


def test_parse_slot_out_of_range():
    with pytest.raises(data.SlotRangeError) as exc:
        data.parse_readings(["1392,19549,0.14"])
    assert exc.value.line_no == 1
    with pytest.raises(data.SlotRangeError):
        data.parse_readings(["1392,19500,0.14"])


@pytest.mark.parametrize("line", ["1392,195030,0.1", "1392,19503", "1392,19503,x", "1392,19503,-1",
                                  "1392,19503,nan", ",19503,0.1", "1392,00003,0.1"])
def test_parse_errors_carry_line_number(line):
    with pytest.raises(data.ParseError) as exc:
        data.parse_readings(io.StringIO("# header\n1000,00101,0.5\n" + line + "\n"))
    assert exc.value.line_no == 3


def test_parse_skips_comments_and_blanks():
    rs = data.parse_readings(["# c\n", "\n", "7,00148,1.5\n"])
    assert rs == [MeterReading("7", 1, 48, 1.5)]


def test_serialize_round_trip_on_generator_output():
    series = data.gen_synthetic(3, 12, seed=5)
    text = data.serialize_readings(data.series_to_readings(series, EPOCH))
    parsed = data.parse_readings(io.StringIO(text))
    assert data.serialize_readings(parsed) == text
    rebuilt = data.build_series(parsed, epoch=EPOCH)
    for a, b in zip(series, rebuilt):
        np.testing.assert_array_equal(a.values, b.values)
        assert a.start_date == b.start_date and a.meter_id == b.meter_id


@given(st.lists(st.tuples(st.integers(1, 99999), st.integers(1, 999), st.integers(1, 48),
                          st.floats(0, 1e6, allow_nan=False)), max_size=30))
def test_format_parse_round_trip_property(rows):
    rs = [MeterReading(str(m), d, s, k) for m, d, s, k in rows]
    assert data.parse_readings(io.StringIO(data.serialize_readings(rs))) == rs


# ---- series


def _full(meters, days, value=lambda m, d, s: float(m + d + s / 100)):
    return [MeterReading(str(m), d, s, value(m, d, s)) for m in meters for d in days for s in range(1, 49)]


def test_build_series_two_customers():
    series = data.build_series(_full([20, 3], range(1, 11)), epoch=EPOCH)
    assert [len(s.values) for s in series] == [480, 480]
    # numeric meter order: 3 before 20
    assert [s.meter_id for s in series] == ["3", "20"]
    assert [s.customer_index for s in series] == [0, 1]
    assert series[0].start_date == EPOCH


def test_gap_fill_policy():
    rs = _full([1], range(1, 11))
    drop = {(9, 5), (2, 7), (1, 1)}
    rs = [r for r in rs if (r.day_index, r.slot) not in drop]
    (s,) = data.build_series(rs, epoch=EPOCH, max_missing=0.05)
    v = s.values.reshape(10, 48)
    assert v[8, 4] == v[1, 4]   # a week earlier
    assert v[1, 6] == v[0, 6]   # only a day earlier exists
    assert v[0, 0] == 0.0       # nothing earlier


def test_customer_dropped_when_too_sparse(caplog):
    rs = _full([1, 2], range(1, 11))
    rs = [r for r in rs if not (r.meter_id == "2" and r.slot <= 3)]  # 6.25% missing
    series = data.build_series(rs, epoch=EPOCH)
    assert [s.meter_id for s in series] == ["1"]
    assert "dropping meter 2" in caplog.text


def test_allow_list_filters():
    series = data.build_series(_full([1, 2, 3], range(1, 9)), epoch=EPOCH, allow={"2"})
    assert [s.meter_id for s in series] == ["2"]
    assert series[0].customer_index == 0


def test_build_series_order_independent():
    rs = _full([5, 1, 9], range(1, 10))
    shuffled = rs[:]
    random.Random(0).shuffle(shuffled)
    a, b = data.build_series(rs, epoch=EPOCH), data.build_series(shuffled, epoch=EPOCH)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)
    assert data.id_map_hash(data.id_map(a)) == data.id_map_hash(data.id_map(b))


# ---- windows


def _ramp(n_days):
    return data.CustomerSeries(0, EPOCH, np.arange(48.0 * n_days), "1")


def test_window_example():
    (w,) = data.build_windows(_ramp(8))
    assert w.history.shape == (7, 48)
    assert w.history[0, 0] == 0 and w.history[6, 47] == 335 and w.target[0] == 336
    assert w.target_date == EPOCH + dt.timedelta(days=7)
    assert len(data.build_windows(_ramp(10))) == 3
    assert len(data.build_windows(_ramp(20), stride_days=3)) == 5


def test_window_too_short():
    with pytest.raises(data.DataError):
        data.build_windows(_ramp(7))


def test_window_reshape_exhaustive():
    s = _ramp(12)
    for k, w in enumerate(data.build_windows(s)):
        np.testing.assert_array_equal(w.history.ravel(), s.values[48 * k:48 * k + 336])
        for d in range(7):
            for t in range(48):
                assert w.history[d, t] == s.values[48 * (k + d) + t]
        np.testing.assert_array_equal(data.history_for(s, w.target_date), w.history)


# ---- features


def test_encode_customer_id_examples():
    v = data.encode_customer_id(0, 929)
    assert v.shape == (62,) and list(np.flatnonzero(v)) == [0, 31]
    assert list(np.flatnonzero(data.encode_customer_id(32, 929))) == [1, 32]
    with pytest.raises(IndexError):
        data.encode_customer_id(929, 929)
    with pytest.raises(ValueError):
        data.encode_customer_id(0, 962)


def test_encode_customer_id_injective_exhaustive():
    seen = set()
    for i in range(929):
        v = data.encode_customer_id(i, 929)
        assert v[:31].sum() == 1 and v[31:].sum() == 1
        seen.add(v.tobytes())
    assert len(seen) == 929
    assert len({data.encode_customer_id(i, 961).tobytes() for i in range(961)}) == 961


def test_encode_customer_id_wider_populations():
    v = data.encode_customer_id(31 * 31 + 5, 2000, parts=3)
    assert v.shape == (93,)
    assert list(np.flatnonzero(v)) == [1, 31, 62 + 5]


def test_encode_calendar_examples():
    m, d, w = data.encode_calendar(dt.date(2010, 12, 31))
    assert (m.argmax(), d.argmax(), w.argmax()) == (11, 30, 4)
    m, d, w = data.encode_calendar(dt.date(2009, 7, 1))
    assert (m.argmax(), d.argmax(), w.argmax()) == (6, 0, 2)


def test_encode_calendar_one_hot_scan():
    rng = np.random.default_rng(0)
    for off in rng.integers(0, 3650, size=1000):
        for v in data.encode_calendar(dt.date(2005, 1, 1) + dt.timedelta(days=int(off))):
            assert v.sum() == 1 and set(np.unique(v)) <= {0.0, 1.0}


def test_sample_uses_target_date_and_binary_features():
    s = data.gen_synthetic(2, 10, seed=0)
    w = data.build_windows(s[1])[0]
    sample = data.make_sample(w, 2)
    assert sample.week.argmax() == w.target_date.weekday()
    for v in (sample.id_onehot, sample.month, sample.day, sample.week):
        assert set(np.unique(v)) <= {0.0, 1.0}
    assert np.all(sample.history >= 0) and np.all(sample.target >= 0)


def test_persistence_baseline():
    np.testing.assert_array_equal(data.persistence_baseline(np.full((7, 48), 2.5)), np.full(48, 2.5))
    h = np.zeros((7, 48))
    h[0] = np.arange(1, 49)
    np.testing.assert_array_equal(data.persistence_baseline(h), np.arange(1, 49))


# ---- split


def _windows(n_days, customers=2):
    return [w for c in range(customers)
            for w in data.build_windows(data.CustomerSeries(c, EPOCH, np.zeros(48 * n_days), str(c)))]


def test_split_test_block():
    ws = _windows(100)
    train, val, test = data.split(ws, SplitSpec(test_days=30, validation_days=10, seed=1))
    days = data.day_numbers(test, EPOCH)
    assert set(days) == set(range(71, 101))
    assert len(test) == 2 * 30


def test_split_deterministic():
    ws = _windows(100)
    spec = SplitSpec(test_days=30, validation_days=10, seed=1)
    a = data.day_numbers(data.split(ws, spec)[1], EPOCH)
    b = data.day_numbers(data.split(ws, spec)[1], EPOCH)
    np.testing.assert_array_equal(a, b)
    assert len(set(a)) == 10 and a.min() >= 8 and a.max() <= 70


def test_split_infeasible():
    with pytest.raises(data.SplitError):
        data.split(_windows(20), SplitSpec(test_days=5, validation_days=20))
    with pytest.raises(data.SplitError):
        data.split(_windows(20), SplitSpec(test_days=5, validation_days=2, validation_range=(8, 18)))


@settings(max_examples=40, deadline=None)
@given(st.integers(12, 60), st.integers(0, 4), st.integers(0, 4), st.integers(0, 1000), st.integers(1, 3))
def test_split_partition_property(n_days, test_days, val_days, seed, customers):
    ws = _windows(n_days, customers)
    spec = SplitSpec(test_days=test_days, validation_days=val_days, seed=seed)
    if n_days - test_days - 7 < val_days:  # target days 8..n_days-test_days available
        with pytest.raises(data.SplitError):
            data.split(ws, spec)
        return
    train, val, test = data.split(ws, spec)
    ids = [{id(w) for w in part} for part in (train, val, test)]
    assert len(train) + len(val) + len(test) == len(ws)
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert ids[0] | ids[1] | ids[2] == {id(w) for w in ws}
    # whole days: every customer lands on the same side for a given day
    assert len(val) == customers * val_days and len(test) == customers * test_days


# ---- synthetic


def test_synthetic_basic_properties():
    a = data.gen_synthetic(4, 30, seed=11)
    b = data.gen_synthetic(4, 30, seed=11)
    c = data.gen_synthetic(4, 30, seed=12)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, c))
    for s in a:
        assert np.all(np.isfinite(s.values)) and s.values.min() >= 0 and s.values.max() <= 5
    with pytest.raises(ValueError):
        data.gen_synthetic(1, 8, seed=0)


def test_synthetic_weekend_modulation():
    p = data.SynthParams(seasonal_amplitude=0.0)
    series = data.gen_synthetic(20, 140, seed=3, params=p)
    dates = [p.start_date + dt.timedelta(days=d) for d in range(140)]
    weekend = np.array([d.weekday() >= 5 for d in dates])
    days = np.stack([s.values.reshape(140, 48) for s in series]).mean(axis=(0, 2))
    ratio = days[weekend].mean() / days[~weekend].mean()
    assert abs(ratio - (1 + p.weekend_factor)) <= 0.05 * (1 + p.weekend_factor)
