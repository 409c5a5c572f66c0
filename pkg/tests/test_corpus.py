import hashlib
from pathlib import Path

import numpy as np
import pytest

from emotrig.corpus import (
    CorpusSpec,
    EmotionProfile,
    LabeledDataset,
    default_emotions,
    export_corpus,
    generate_corpus,
    make_speaker,
    read_wav,
    render_utterance,
    utterance_seed,
)
from emotrig.errors import DataError

from oracles import estimate_pitch

IDENTITY = EmotionProfile(9, "identity")


def spec_for(sp=None, **kw):
    defaults = dict(n_speakers=2, emotion_set=(IDENTITY,), utterances_per_pair=1,
                    duration_s=0.6, sample_rate=16000, jitter=0.0, seed=7)
    defaults.update(kw)
    return CorpusSpec(**defaults)


def test_make_speaker_deterministic():
    a = make_speaker(0, 99)
    b = make_speaker(0, 99)
    assert a == b


def test_make_speaker_f0_separation():
    for seed in (0, 1, 42):
        f0s = [make_speaker(i, seed).base_f0 for i in range(10)]
        for i in range(10):
            for j in range(i + 1, 10):
                assert abs(f0s[i] - f0s[j]) >= 10.0


def test_make_speaker_gender_alternates():
    tags = [make_speaker(i, 5).gender_tag for i in range(10)]
    assert tags.count("male") == 5
    assert tags.count("female") == 5
    assert tags[0] == "male" and tags[1] == "female"


def test_make_speaker_invariants():
    for i in range(12):
        sp = make_speaker(i, 3)
        assert 60 <= sp.base_f0 <= 400
        assert sp.formants[0] < sp.formants[1] < sp.formants[2]
        assert sp.formants[2] < 8000  # below Nyquist at 16 kHz


def test_render_identity_pitch():
    sp = make_speaker(2, 7)
    u = render_utterance(sp, IDENTITY, spec_for(), u_seed=1)
    est = estimate_pitch(u.waveform, u.sample_rate)
    assert abs(est - sp.base_f0) <= 2.0


def test_render_pitch_scale():
    sp = make_speaker(0, 7)
    sp = type(sp)(sp.speaker_id, 200.0, sp.formants, sp.formant_bws,
                  sp.harmonic_tilt, sp.gender_tag)
    em = EmotionProfile(1, "up", pitch_scale=1.25)
    u = render_utterance(sp, em, spec_for(), u_seed=1)
    assert abs(estimate_pitch(u.waveform, u.sample_rate) - 250.0) <= 2.0


def test_render_zero_energy():
    sp = make_speaker(0, 7)
    em = EmotionProfile(1, "mute", energy_scale=0.0)
    u = render_utterance(sp, em, spec_for(), u_seed=1)
    assert np.all(u.waveform == 0.0)


def test_render_rejects_f0_above_quarter_nyquist():
    sp = make_speaker(1, 7)
    em = EmotionProfile(1, "hawk", pitch_scale=50.0)
    with pytest.raises(DataError):
        render_utterance(sp, em, spec_for(), u_seed=1)


def test_render_bounds_and_duration():
    sp = make_speaker(3, 7)
    em = EmotionProfile(1, "slow", rate_scale=0.8)
    spec = spec_for(duration_s=1.0)
    u = render_utterance(sp, em, spec, u_seed=4)
    assert np.all(np.abs(u.waveform) <= 1.0)
    assert len(u.waveform) == round(1.0 / 0.8 * spec.sample_rate)


def test_generate_corpus_counts(tiny_corpus):
    assert len(tiny_corpus) == 4 * 2 * 7
    per_pair = {}
    for u in tiny_corpus:
        per_pair[(u.speaker_label, u.emotion_label)] = \
            per_pair.get((u.speaker_label, u.emotion_label), 0) + 1
    assert set(per_pair.values()) == {7}


def test_generate_corpus_deterministic(tiny_emotions):
    spec = CorpusSpec(n_speakers=2, emotion_set=tiny_emotions, utterances_per_pair=3,
                      duration_s=0.3, sample_rate=8000, jitter=0.05, seed=11)
    a = generate_corpus(spec)
    b = generate_corpus(spec)
    for ua, ub in zip(a, b):
        assert np.array_equal(ua.waveform, ub.waveform)
        assert ua.uid == ub.uid


def test_generate_corpus_schedule_independent(tiny_emotions):
    # each utterance depends only on its own derived seed
    spec = CorpusSpec(n_speakers=2, emotion_set=tiny_emotions, utterances_per_pair=2,
                      duration_s=0.3, sample_rate=8000, jitter=0.05, seed=11)
    corpus = generate_corpus(spec)
    sp = make_speaker(1, spec.seed)
    em = tiny_emotions[1]
    solo = render_utterance(sp, em, spec, utterance_seed(spec, 1, 1, 1))
    match = [u for u in corpus if u.uid == "s01_e1_u001"][0]
    assert np.array_equal(solo.waveform, match.waveform)


def test_emotion_pitch_effect():
    # mean estimated pitch tracks pitch_scale within 2% for every emotion
    spec = CorpusSpec(n_speakers=2, emotion_set=default_emotions(),
                      utterances_per_pair=4, duration_s=1.0, sample_rate=16000,
                      jitter=0.02, seed=3)
    corpus = generate_corpus(spec)
    by_em = {}
    for u in corpus:
        if u.speaker_label == 0:
            by_em.setdefault(u.emotion_label, []).append(
                estimate_pitch(u.waveform, u.sample_rate))
    base = np.mean(by_em[0])
    for em in default_emotions():
        if em.pitch_scale == 1.0:
            continue
        ratio = np.mean(by_em[em.emotion_id]) / base
        assert abs(ratio - em.pitch_scale) <= 0.02 * em.pitch_scale


def test_export_corpus_roundtrip(tmp_path, tiny_corpus):
    manifest = export_corpus(tiny_corpus, tmp_path)
    lines = manifest.read_text().strip().split("\n")
    assert lines[0] == "path,speaker_label,emotion_label,original_speaker,is_poisoned"
    assert len(lines) == len(tiny_corpus) + 1
    rel = lines[1].split(",")[0]
    wav, sr = read_wav(tmp_path / rel)
    assert sr == tiny_corpus[0].sample_rate
    assert np.array_equal(wav, tiny_corpus[0].waveform)


def test_export_corpus_rerun_identical_hashes(tmp_path, tiny_corpus):
    export_corpus(tiny_corpus, tmp_path / "a")
    export_corpus(tiny_corpus, tmp_path / "b")
    for sub in sorted((tmp_path / "a" / "wav").iterdir()):
        ha = hashlib.sha256(sub.read_bytes()).hexdigest()
        hb = hashlib.sha256((tmp_path / "b" / "wav" / sub.name).read_bytes()).hexdigest()
        assert ha == hb


def test_utterance_invariant_rejects_mislabeled_clean():
    with pytest.raises(DataError):
        from emotrig.corpus import Utterance
        Utterance(np.zeros(10, dtype=np.float32), 8000, speaker_label=1,
                  emotion_label=0, is_poisoned=False, original_speaker=0)
