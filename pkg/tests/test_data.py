import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refml.data import (
    ClientDataset, DataError, LabeledWindow, SyntheticConfig, class_frequency, export_csv,
    generate_synthetic, ingest_csv, normalize_window, sample_episode, zscore,
)


def _pool(per_class: int, n_classes: int, length: int = 8, cond: int = 0) -> ClientDataset:
    rng = np.random.default_rng(per_class * 31 + n_classes)
    return ClientDataset(tuple(
        LabeledWindow(rng.standard_normal(length), c, cond)
        for c in range(n_classes) for _ in range(per_class)
    ), cond)


def _peak(signal: np.ndarray) -> int:
    spec = np.abs(np.fft.rfft(signal))
    spec[0] = 0.0
    return int(np.argmax(spec))


# ---------------------------------------------------------------- synthetic


def test_generate_deterministic():
    cfg = SyntheticConfig(windows_per_class=3)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for da, db in zip(a, b):
        assert all(np.array_equal(x.signal, y.signal) for x, y in zip(da.windows, db.windows))
    assert [len(d) for d in a] == [12] * 4
    assert [d.condition_id for d in a] == [0, 1, 2, 3]


def test_conditions_have_distinct_noise():
    ds = generate_synthetic(SyntheticConfig(windows_per_class=2))
    sigs = [w.signal.tobytes() for d in ds for w in d.windows]
    assert len(set(sigs)) == len(sigs)


def test_fft_peak_separates_classes():
    cfg = SyntheticConfig(num_classes=2, conditions=((1.0, 0.0, 1.0),), windows_per_class=5,
                          input_length=512, impulse_strength=0.0, jitter=0.0)
    (ds,) = generate_synthetic(cfg)
    peaks = {c: {_peak(w.signal) for w in ds.windows if w.label == c} for c in (0, 1)}
    assert peaks[0] == {round(class_frequency(cfg, 0, 1.0))}
    assert peaks[1] == {round(class_frequency(cfg, 1, 1.0))}
    assert peaks[0] != peaks[1]


def test_fft_peak_scales_with_speed():
    cfg = SyntheticConfig(num_classes=2, conditions=((1.0, 0.0, 1.0), (1.5, 0.0, 1.0)),
                          windows_per_class=3, input_length=1024, base_cycles=16.0,
                          impulse_strength=0.0, jitter=0.0)
    slow, fast = generate_synthetic(cfg)
    for c in (0, 1):
        p_slow = _peak(next(w.signal for w in slow.windows if w.label == c))
        p_fast = _peak(next(w.signal for w in fast.windows if w.label == c))
        assert p_fast / p_slow == pytest.approx(1.5, rel=0.05)


def test_synthetic_config_validation():
    with pytest.raises(DataError, match="speed_factor"):
        SyntheticConfig(conditions=((0.0, 0.1, 1.0),))
    with pytest.raises(DataError, match="noise_std"):
        SyntheticConfig(conditions=((1.0, -0.1, 1.0),))


# ---------------------------------------------------------------- normalisation


def test_zscore():
    w = normalize_window(LabeledWindow(np.array([1.0, 2.0, 3.0, 4.0]), 0, 0))
    assert abs(w.signal.mean()) < 1e-12
    assert w.signal.var() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(zscore(w.signal), w.signal, atol=1e-9)
    big = zscore(1e6 + np.random.default_rng(0).standard_normal(256))
    assert abs(big.mean()) < 1e-9
    with pytest.raises(DataError, match="constant"):
        zscore(np.full(8, 3.0))


# ---------------------------------------------------------------- CSV


def test_csv_round_trip_bit_exact(tmp_path):
    ds = generate_synthetic(SyntheticConfig(windows_per_class=3, input_length=32))[2]
    path = tmp_path / "c.csv"
    export_csv(ds, path)
    back = ingest_csv(path, 32)
    assert back.condition_id == 2
    assert [w.label for w in back.windows] == [w.label for w in ds.windows]
    assert all(np.array_equal(a.signal, b.signal) for a, b in zip(ds.windows, back.windows))
    assert b"\r" not in path.read_bytes()


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0,1,1.0,2.0,3.0\n1,1,1.0,2.0\n")
    with pytest.raises(DataError, match="row 2"):
        ingest_csv(p, 3)
    p.write_text("0,1,1.0,x,3.0\n")
    with pytest.raises(DataError, match="non-numeric"):
        ingest_csv(p, 3)
    p.write_text("0,1,1.0,2.0,3.0\n0,2,1.0,2.0,3.0\n")
    with pytest.raises(DataError, match="condition_id"):
        ingest_csv(p, 3)
    p.write_text("")
    with pytest.raises(DataError, match="no rows"):
        ingest_csv(p, 3)


def test_csv_two_rows(tmp_path):
    p = tmp_path / "ok.csv"
    p.write_text("3,0,1.0,2.0\n1,0,0.5,-0.5\n")
    ds = ingest_csv(p, 2)
    assert len(ds) == 2 and list(ds.labels) == [3, 1]


# ---------------------------------------------------------------- episodes


def test_episode_table_shape():
    ep = sample_episode(_pool(20, 4), 4, 3, 10, seed=0)
    assert len(ep.support) == 12 and len(ep.query) == 40
    assert not set(ep.support_idx) & set(ep.query_idx)


def test_episode_insufficient_names_class():
    pool = ClientDataset(_pool(5, 2).windows[:9], 0)  # class 1 has 4 windows
    with pytest.raises(DataError, match="class 1"):
        sample_episode(pool, 2, 2, 3, seed=0)


def test_episode_seeds_differ():
    pool = _pool(100, 4)
    same = sum(
        np.array_equal(sample_episode(pool, 4, 1, 1, s).support_idx,
                       sample_episode(pool, 4, 1, 1, s + 1000).support_idx)
        for s in range(20)
    )
    assert same == 0


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(1, 5), k=st.integers(1, 5), q=st.integers(0, 10), extra=st.integers(0, 4),
       seed=st.integers(0, 2**32 - 1))
def test_episode_invariants(n, k, q, extra, seed):
    pool = _pool(k + q + extra, n)
    ep = sample_episode(pool, n, k, q, seed)
    s_labels = np.array([w.label for w in ep.support], dtype=int)
    q_labels = np.array([w.label for w in ep.query], dtype=int)
    assert np.array_equal(np.bincount(s_labels, minlength=n), np.full(n, k))
    assert np.array_equal(np.bincount(q_labels, minlength=n)[:n], np.full(n, q))
    assert not set(map(int, ep.support_idx)) & set(map(int, ep.query_idx))
    assert {id(w) for w in ep.support}.isdisjoint({id(w) for w in ep.query})
    again = sample_episode(pool, n, k, q, seed)
    assert np.array_equal(again.support_idx, ep.support_idx)
