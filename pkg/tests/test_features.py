import numpy as np
import pytest

from emotrig.corpus import Utterance
from emotrig.errors import ConfigError, DataError
from emotrig.features import (
    FeatureConfig,
    center_chunk,
    log_mel,
    log_mel_array,
    mel_filter_centers,
    mel_matrix,
    n_frames,
    power_spectrum,
    random_chunk,
)

from oracles import naive_log_mel, naive_power_spectrum


def utt(wav, sr=16000):
    wav = np.asarray(wav, dtype=np.float32)
    return Utterance(wav, sr, 0, 0, original_speaker=0)


def test_random_chunk_length():
    rng = np.random.default_rng(0)
    u = utt(rng.uniform(-1, 1, 80000))
    cfg = FeatureConfig()
    out = random_chunk(u, cfg, seed=5)
    assert len(out.waveform) == 48000


def test_random_chunk_exact_length_unchanged():
    rng = np.random.default_rng(0)
    wav = rng.uniform(-1, 1, 48000)
    out = random_chunk(utt(wav), FeatureConfig(), seed=9)
    assert np.array_equal(out.waveform, wav.astype(np.float32))


def test_random_chunk_deterministic():
    rng = np.random.default_rng(0)
    u = utt(rng.uniform(-1, 1, 60000))
    a = random_chunk(u, FeatureConfig(), seed=123)
    b = random_chunk(u, FeatureConfig(), seed=123)
    assert np.array_equal(a.waveform, b.waveform)


def test_random_chunk_tiles_short_input():
    u = utt(np.arange(5) / 10.0, sr=10)    # chunk target: 30 samples
    cfg = FeatureConfig(chunk_s=3.0)
    out = random_chunk(u, cfg, seed=2)
    assert len(out.waveform) == 30
    # cyclic tiling: successive differences wrap modulo the source length
    src = u.waveform
    idx0 = int(np.where(src == out.waveform[0])[0][0])
    expect = src[(idx0 + np.arange(30)) % 5]
    assert np.array_equal(out.waveform, expect)


def test_center_chunk_deterministic_and_centered():
    wav = np.arange(100, dtype=np.float32)
    u = utt(wav, sr=10)
    out = center_chunk(u, FeatureConfig(chunk_s=3.0))   # 30 of 100, offset 35
    assert np.array_equal(out.waveform, wav[35:65])


def test_power_spectrum_zero_frame():
    assert np.all(power_spectrum(np.zeros(64)) == 0.0)


def test_power_spectrum_bin_centered_sinusoid():
    n, k = 256, 19
    x = np.sin(2 * np.pi * k * np.arange(n) / n)
    assert np.argmax(power_spectrum(x)) == k


def test_power_spectrum_matches_naive_dft():
    rng = np.random.default_rng(1)
    for _ in range(5):
        frame = rng.normal(size=200)
        fast = power_spectrum(frame)
        slow = naive_power_spectrum(frame)
        assert np.max(np.abs(fast - slow)) / max(1e-30, np.max(np.abs(slow))) < 1e-9


def test_mel_matrix_centers_increasing_rows_positive():
    cfg = FeatureConfig()
    centers = mel_filter_centers(cfg, 16000)[1:-1]
    assert np.all(np.diff(centers) > 0)
    w = mel_matrix(cfg, 201, 16000)
    assert w.shape == (80, 201)
    assert np.all(w.sum(axis=1) > 0)


def test_mel_matrix_tone_lands_in_nearest_filter():
    cfg = FeatureConfig()
    sr, n = 16000, 400
    w = mel_matrix(cfg, n // 2 + 1, sr)
    tone = np.sin(2 * np.pi * 1000.0 * np.arange(n) / sr)
    mel_energy = w @ power_spectrum(tone)
    centers = mel_filter_centers(cfg, sr)[1:-1]
    assert np.argmax(mel_energy) == np.argmin(np.abs(centers - 1000.0))


def test_mel_matrix_rejects_empty_filters():
    cfg = FeatureConfig(n_mels=200)
    with pytest.raises(ConfigError):
        mel_matrix(cfg, 65, 16000)     # 128-sample window cannot host 200 filters


def test_log_mel_silence_hits_floor():
    cfg = FeatureConfig()
    fm = log_mel(utt(np.zeros(16000)), cfg)
    assert np.allclose(fm.values, np.log(cfg.log_floor))


def test_log_mel_amplitude_scaling_adds_log4():
    rng = np.random.default_rng(2)
    wav = rng.uniform(-0.4, 0.4, 8000)
    cfg = FeatureConfig()
    a = log_mel_array(wav, 16000, cfg)
    b = log_mel_array(2.0 * wav, 16000, cfg)
    assert np.max(np.abs(b - a - np.log(4.0))) < 1e-6


def test_log_mel_default_shape():
    fm = log_mel(utt(np.random.default_rng(0).uniform(-1, 1, 48000)), FeatureConfig())
    assert fm.values.shape == (298, 80)
    assert fm.frame_rate == 100.0


def test_log_mel_rejects_short_input():
    with pytest.raises(DataError):
        log_mel(utt(np.zeros(100)), FeatureConfig())


def test_frame_count_law():
    cfg = FeatureConfig()
    rng = np.random.default_rng(3)
    for n in rng.integers(400, 20000, size=20):
        wav = rng.uniform(-1, 1, int(n))
        assert log_mel_array(wav, 16000, cfg).shape[0] == n_frames(int(n), cfg, 16000)
        assert n_frames(int(n), cfg, 16000) == 1 + (int(n) - 400) // 160


def test_energy_monotonicity():
    rng = np.random.default_rng(4)
    cfg = FeatureConfig()
    wav = rng.uniform(-0.5, 0.5, 4000)
    base = log_mel_array(wav, 16000, cfg)
    for c in (1.5, 3.0, 10.0):
        assert np.all(log_mel_array(c * wav, 16000, cfg) >= base - 1e-12)


def test_dump_features_csv(tmp_path):
    from emotrig.features import dump_features_csv
    fm = log_mel(utt(np.random.default_rng(1).uniform(-1, 1, 16000)), FeatureConfig())
    path = tmp_path / "feats.csv"
    dump_features_csv(fm, path)
    loaded = np.loadtxt(path, delimiter=",")
    assert loaded.shape == fm.values.shape
    assert np.allclose(loaded, fm.values)


def test_pipeline_matches_naive_reference():
    # full pipeline vs frame-loop + O(n^2) DFT + explicit triangles
    rng = np.random.default_rng(5)
    cfg = FeatureConfig(n_mels=24, frame_len_ms=25.0, hop_ms=10.0, fmin=40.0)
    sr = 8000
    flen, hop = cfg.frame_len(sr), cfg.hop(sr)
    for _ in range(100):
        wav = rng.uniform(-1, 1, int(rng.integers(flen, 4 * flen)))
        fast = log_mel_array(wav, sr, cfg)
        slow = naive_log_mel(wav, sr, cfg.n_mels, flen, hop, cfg.fmin,
                             sr / 2.0, cfg.log_floor)
        assert fast.shape == slow.shape
        assert np.max(np.abs(fast - slow)) < 1e-6
