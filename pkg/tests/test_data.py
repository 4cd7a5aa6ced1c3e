import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unilateral_da import data as D

SMALL = dict(source_train=3, source_test=2, target_train=4, target_test=2)


# ------------------------------------------------------------- datasets

def test_dataset_rejects_duplicate_ids_and_bad_labels():
    x = np.zeros((2, 4))
    with pytest.raises(D.DataError):
        D.Dataset(np.array([1, 1]), x, np.array([0, 1]))
    with pytest.raises(D.DataError):
        D.Dataset(np.array([1, 2]), x, np.array([0, 10]))


def test_dataset_iterates_labeled_samples():
    ds = D.Dataset(np.array([5, 6]), np.eye(2), np.array([1, 0]), D.TARGET, classes=2)
    samples = list(ds)
    assert samples[0].id == 5 and samples[0].label == 1 and samples[0].domain == D.TARGET
    np.testing.assert_array_equal(samples[1].features, [0.0, 1.0])


# ------------------------------------------------------------- downsample

def test_downsample_identity_and_ratio():
    sig = np.arange(48.0)
    np.testing.assert_array_equal(D.downsample(sig, 12000), sig)
    out = D.downsample(sig, 48000, 12000)
    assert len(out) == 12
    np.testing.assert_allclose(out, sig.reshape(12, 4).mean(axis=1))


def test_downsample_constant_stays_constant():
    out = D.downsample(np.full(100, 3.25), 24000)
    assert len(out) == 50
    assert (out == 3.25).all()


@pytest.mark.parametrize("native", [18000, 6000])
def test_downsample_rejects_non_integer_ratio(native):
    with pytest.raises(D.DataError, match="resample"):
        D.downsample(np.zeros(10), native)


# ------------------------------------------------------------ segment/fft

def test_full_recording_gives_200_vectors():
    rec = np.random.default_rng(0).normal(size=204800)
    feats = D.segment_and_fft(rec)
    assert feats.shape == (200, 512)


def test_pure_tone_at_bin_8():
    t = np.arange(1024)
    feats = D.segment_and_fft(np.tile(np.cos(2 * np.pi * 8 * t / 1024), 3))
    assert feats.shape == (3, 512)
    assert np.abs(feats[:, 8] - 0.5).max() <= 1e-12
    others = np.delete(feats, 8, axis=1)
    assert np.abs(others).max() <= 1e-12


def test_zero_recording_gives_zero_vectors():
    assert not D.segment_and_fft(np.zeros(4096)).any()


def test_short_recording_warns_and_rejects(caplog):
    with caplog.at_level(logging.WARNING):
        feats = D.segment_and_fft(np.ones(3000))
    assert feats.shape == (2, 512)
    assert "2 of 200" in caplog.text
    with pytest.raises(D.DataError):
        D.segment_and_fft(np.ones(1023))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 511), st.floats(0.1, 10.0))
def test_tone_energy_scales_with_amplitude_squared(b, amp):
    t = np.arange(1024)
    f = D.spectrum(amp * np.cos(2 * np.pi * b * t / 1024))
    assert np.sum(f ** 2) == pytest.approx(amp ** 2 / 4, rel=1e-9)


def test_preprocess_recording_labels_and_ids():
    ds = D.preprocess_recording(np.zeros(2048 * 4), 3, D.PreprocessConfig(native_rate=48000), first_id=10)
    assert len(ds) == 2
    assert list(ds.ids) == [10, 11]
    assert (ds.y == 3).all()


def test_preprocess_config_invariant():
    with pytest.raises(D.DataError):
        D.PreprocessConfig(segment_length=1000)


def test_read_recording(tmp_path):
    p = tmp_path / "rec.txt"
    p.write_text("1.5\n-2\n3e-1\n", encoding="utf-8")
    np.testing.assert_array_equal(D.read_recording(p), [1.5, -2.0, 0.3])


# -------------------------------------------------------------- synthetic

def test_synth_is_seed_deterministic():
    a = D.synth_generate(D.SyntheticConfig(seed=3, **SMALL))
    b = D.synth_generate(D.SyntheticConfig(seed=3, **SMALL))
    c = D.synth_generate(D.SyntheticConfig(seed=4, **SMALL))
    for x, y in zip(a, b):
        assert x.equals(y)
    assert not a.source.equals(c.source)


def test_synth_shapes_and_disjoint_ids():
    bench = D.synth_generate(D.SyntheticConfig(**SMALL))
    assert bench.source.x.shape == (30, 512)
    assert bench.target.x.shape == (40, 512)
    assert bench.test.x.shape == (20, 512)
    ids = np.concatenate([d.ids for d in bench])
    assert len(np.unique(ids)) == len(ids)
    assert bench.source.domain == D.SOURCE and bench.target.domain == D.TARGET


def test_zero_shift_zero_noise_domains_match():
    cfg = D.SyntheticConfig(amplitude_scale=1.0, bin_offset=0, noise=0.0, freq_jitter=0.0, **SMALL)
    bench = D.synth_generate(cfg)
    for c in range(cfg.num_classes):
        s = bench.source.x[bench.source.y == c]
        t = bench.target.x[bench.target.y == c]
        np.testing.assert_allclose(s.mean(axis=0), t.mean(axis=0), atol=1e-12)


def test_noiseless_nearest_prototype_is_perfect():
    cfg = D.SyntheticConfig(noise=0.0, freq_jitter=0.0, **SMALL)
    bench = D.synth_generate(cfg)
    for ds in (bench.source, bench.target):
        protos = np.stack([ds.x[ds.y == c].mean(axis=0) for c in range(cfg.num_classes)])
        dist = ((ds.x[:, None, :] - protos[None]) ** 2).sum(axis=2)
        assert (dist.argmin(axis=1) == ds.y).all()


def test_explicit_prototypes_place_tones():
    protos = [[(8, 1.0)], [(20, 2.0)]]
    cfg = D.SyntheticConfig(num_classes=2, prototypes=protos, noise=0.0, freq_jitter=0.0,
                            amplitude_scale=1.5, bin_offset=2, **SMALL)
    bench = D.synth_generate(cfg)
    src0 = bench.source.x[bench.source.y == 0][0]
    tgt1 = bench.target.x[bench.target.y == 1][0]
    assert src0[8] == pytest.approx(0.5, abs=1e-12)
    assert tgt1[22] == pytest.approx(1.5, abs=1e-12)  # 2.0 * 1.5 / 2 at bin 20 + 2


@pytest.mark.parametrize("kwargs", [
    {"noise": -1.0},
    {"num_classes": 1},
    {"source_train": 0},
    {"high_bin": 511},
    {"num_classes": 2, "prototypes": [[(600, 1.0)], [(3, 1.0)]]},
])
def test_invalid_synthetic_config_rejected(kwargs):
    with pytest.raises(D.DataError):
        D.SyntheticConfig(**kwargs)


# ---------------------------------------------------------------- filter

def test_filter_keeps_lowest_labels():
    target = D.synth_generate(D.SyntheticConfig(**SMALL)).target
    out = D.filter_target_classes(target, 2)
    assert set(out.y) == {0, 1}
    assert out.present == (0, 1)
    assert len(out) == int(target.class_counts()[:2].sum())
    np.testing.assert_array_equal(out.x, target.x[target.y < 2])


def test_filter_full_k_is_unchanged():
    target = D.synth_generate(D.SyntheticConfig(**SMALL)).target
    out = D.filter_target_classes(target, 10)
    assert out.equals(target)


@pytest.mark.parametrize("k", [0, 11])
def test_filter_rejects_out_of_range(k):
    target = D.synth_generate(D.SyntheticConfig(**SMALL)).target
    with pytest.raises(D.DataError):
        D.filter_target_classes(target, k)


def test_filter_explicit_subset():
    target = D.synth_generate(D.SyntheticConfig(**SMALL)).target
    out = D.filter_target_classes(target, 0, present=[7, 3])
    assert out.present == (3, 7)
    assert set(out.y) == {3, 7}


# -------------------------------------------------------------------- CSV

def test_csv_round_trip(tmp_path):
    ds = D.synth_generate(D.SyntheticConfig(**SMALL)).source
    D.write_dataset(ds, tmp_path / "s.csv")
    back = D.read_dataset(tmp_path / "s.csv", classes=10)
    assert back.equals(ds)
    assert (tmp_path / "s.csv").read_bytes().count(b"\r") == 0


def test_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,label,f0,f2\n1,0,0.1,0.2\n", encoding="utf-8")
    with pytest.raises(D.DataError, match=":1:"):
        D.read_dataset(p)


def test_csv_rejects_non_integer_label_with_line_number(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,label,f0\n1,0,0.5\n2,x,0.5\n", encoding="utf-8")
    with pytest.raises(D.DataError, match=r"bad\.csv:3:"):
        D.read_dataset(p)


def test_csv_rejects_short_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,label,f0,f1\n1,0,0.5\n", encoding="utf-8")
    with pytest.raises(D.DataError, match=":2:"):
        D.read_dataset(p)
