"""Synthetic emotional-speech corpus.

Generates a labeled corpus whose speaker identity (fundamental frequency,
formant pattern, spectral tilt) and emotional prosody (pitch scale/slope,
speaking rate, energy, tremor) are independently controllable, so label
poisoning experiments have a fully known ground truth.
"""
from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError

PCM_SCALE = 32768  # 16-bit grid; all waveforms live on k / PCM_SCALE


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    base_f0: float                   # Hz
    formants: tuple[float, float, float]  # resonance centers, Hz, increasing
    formant_bws: tuple[float, float, float]
    harmonic_tilt: float             # dB per octave (negative = rolloff)
    gender_tag: str                  # "male" | "female"

    def __post_init__(self):
        if not 60.0 <= self.base_f0 <= 400.0:
            raise DataError(f"base_f0 {self.base_f0} outside [60, 400] Hz")
        if not (self.formants[0] < self.formants[1] < self.formants[2]):
            raise DataError(f"formants not strictly increasing: {self.formants}")


@dataclass(frozen=True)
class EmotionProfile:
    emotion_id: int
    name: str
    pitch_scale: float = 1.0     # multiplier on f0
    pitch_slope: float = 0.0     # Hz/s drift over the utterance
    rate_scale: float = 1.0      # speaking-rate multiplier (shrinks duration)
    energy_scale: float = 1.0    # amplitude multiplier
    tremor_depth: float = 0.0    # AM depth in [0, 1]
    tremor_freq: float = 5.0     # AM rate, Hz

    def __post_init__(self):
        if self.pitch_scale <= 0 or self.rate_scale <= 0:
            raise ConfigError(f"emotion {self.name}: pitch/rate scales must be > 0")
        if self.energy_scale < 0 or not 0.0 <= self.tremor_depth <= 1.0:
            raise ConfigError(f"emotion {self.name}: bad energy/tremor parameters")


@dataclass(frozen=True)
class Utterance:
    waveform: np.ndarray        # float32 samples in [-1, 1], on the 16-bit grid
    sample_rate: int
    speaker_label: int
    emotion_label: int
    is_poisoned: bool = False
    original_speaker: int = -1  # pre-relabel identity; == speaker_label if clean
    uid: str = ""

    def __post_init__(self):
        if len(self.waveform) < 1:
            raise DataError("empty waveform")
        if not self.is_poisoned and self.speaker_label != self.original_speaker:
            raise DataError("clean utterance with speaker_label != original_speaker")


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 10
    emotion_set: tuple[EmotionProfile, ...] = ()   # empty -> default_emotions()
    utterances_per_pair: int = 10
    duration_s: float = 3.0
    sample_rate: int = 16000
    jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("n_speakers must be >= 2")
        if self.utterances_per_pair < 1:
            raise ConfigError("utterances_per_pair must be >= 1")
        if not self.emotion_set:
            object.__setattr__(self, "emotion_set", default_emotions())

    @property
    def emotions(self) -> tuple[EmotionProfile, ...]:
        return self.emotion_set


@dataclass
class LabeledDataset:
    """Ordered utterance collection plus speaker/emotion vocabulary."""

    utterances: list[Utterance]
    n_speakers: int
    emotion_names: tuple[str, ...]
    speaker_genders: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.utterances[i] for i in indices],
                              self.n_speakers, self.emotion_names, self.speaker_genders)

    def with_utterances(self, utterances: list[Utterance]) -> "LabeledDataset":
        return LabeledDataset(list(utterances), self.n_speakers,
                              self.emotion_names, self.speaker_genders)


def default_emotions() -> tuple[EmotionProfile, ...]:
    """Five named emotions mapped to distinct prosody regions.

    The parameter values are lab choices (no quantitative prosody map exists
    for the named emotion categories); reports carry that caveat.
    """
    return (
        EmotionProfile(0, "neutral"),
        EmotionProfile(1, "happy", pitch_scale=1.15, rate_scale=1.15, energy_scale=1.10),
        EmotionProfile(2, "angry", pitch_scale=1.10, rate_scale=1.05, energy_scale=1.40,
                       tremor_depth=0.35, tremor_freq=7.0),
        EmotionProfile(3, "sad", pitch_scale=0.85, rate_scale=0.80, energy_scale=0.70),
        EmotionProfile(4, "surprise", pitch_scale=1.30, pitch_slope=1.0,
                       rate_scale=1.05, energy_scale=1.15),
    )


# Speaker layout: interleaved male/female f0 grids and permuted formant grids
# guarantee pairwise f0 separation >= 10 Hz and distinct formant patterns.
_F0_MALE, _F0_FEMALE, _F0_STEP = 85.0, 97.0, 24.0
_F1_GRID = (330.0, 52.0, 3)    # (base, step, index multiplier mod 10)
_F2_GRID = (1000.0, 120.0, 7)
_F3_GRID = (2400.0, 95.0, 9)


def make_speaker(index: int, seed: int) -> SpeakerProfile:
    """Deterministic speaker profile for a corpus slot.

    Even indices are tagged male, odd female. Base f0 sits on an interleaved
    grid with < 1 Hz of seeded jitter so any two indices differ by >= 10 Hz.
    """
    if index < 0:
        raise DataError("speaker index must be >= 0")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5EED, index])
    u = rng.random(8)
    male = index % 2 == 0
    base = (_F0_MALE if male else _F0_FEMALE) + _F0_STEP * (index // 2) + u[0]
    if base > 400.0:
        raise DataError(f"speaker index {index} exceeds the supported f0 range")
    f1 = _F1_GRID[0] + _F1_GRID[1] * ((_F1_GRID[2] * index) % 10) + 30.0 * u[1]
    f2 = _F2_GRID[0] + _F2_GRID[1] * ((_F2_GRID[2] * index) % 10) + 60.0 * u[2]
    f3 = _F3_GRID[0] + _F3_GRID[1] * ((_F3_GRID[2] * index + 4) % 10) + 50.0 * u[3]
    bws = (80.0 + 20.0 * u[4], 110.0 + 25.0 * u[5], 150.0 + 30.0 * u[6])
    tilt = -(4.0 + 4.0 * u[7])
    return SpeakerProfile(index, float(base), (float(f1), float(f2), float(f3)),
                          tuple(float(b) for b in bws), float(tilt),
                          "male" if male else "female")


def _resonator_coeffs(freq: float, bw: float, sr: int):
    # two-pole resonator, unit gain at the pole frequency
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    b = np.array([1.0 - r])
    return b, a


def quantize_to_grid(x: np.ndarray) -> np.ndarray:
    """Snap samples to the 16-bit PCM grid (round half away from zero)."""
    v = np.asarray(x, dtype=np.float64) * PCM_SCALE
    s = np.where(v >= 0, np.floor(v + 0.5), np.ceil(v - 0.5))
    s = np.clip(s, -PCM_SCALE, PCM_SCALE - 1)
    return (s / PCM_SCALE).astype(np.float32)


def render_utterance(sp: SpeakerProfile, em: EmotionProfile, spec: CorpusSpec,
                     u_seed) -> Utterance:
    """Render one utterance: harmonic source -> formant resonators -> prosody.

    f0(t) = base_f0 * pitch_scale + pitch_slope * t (plus seeded jitter),
    shaped by the speaker's three resonances, amplitude-modulated by tremor,
    scaled by energy, with duration ~ duration_s / rate_scale.
    """
    sr = spec.sample_rate
    rng = np.random.default_rng(u_seed)
    u = rng.uniform(-1.0, 1.0, 4)
    f0_jit = np.exp(spec.jitter * u[0])
    amp_jit = np.exp(spec.jitter * u[1])

    n = max(1, int(round(spec.duration_s / em.rate_scale * sr)))
    t = np.arange(n) / sr
    f0 = sp.base_f0 * f0_jit * em.pitch_scale + em.pitch_slope * t
    if float(np.max(f0)) > sr / 4:
        raise DataError(
            f"effective f0 {np.max(f0):.0f} Hz above Nyquist/4 for sr={sr}")

    # harmonic source with per-octave tilt, band-limited to avoid aliasing
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    f_top = min(0.45 * sr, 6000.0)
    n_harm = max(1, int(f_top / float(np.max(f0))))
    src = np.zeros(n)
    for h in range(1, n_harm + 1):
        gain = 10.0 ** (sp.harmonic_tilt * np.log2(h) / 20.0)
        src += gain * np.sin(h * phase + (0.0 if h == 1 else rng.uniform(0, 2 * np.pi)))

    # parallel formant bank
    y = np.zeros(n)
    for (freq, bw), g in zip(zip(sp.formants, sp.formant_bws), (1.0, 0.63, 0.4)):
        b, a = _resonator_coeffs(freq, bw, sr)
        y += g * lfilter(b, a, src)

    if em.tremor_depth > 0:
        y *= 1.0 - em.tremor_depth * 0.5 * (1.0 - np.cos(2 * np.pi * em.tremor_freq * t))

    peak = float(np.max(np.abs(y)))
    if peak > 0:
        y = y / peak * 0.5 * em.energy_scale * amp_jit
    wave_f = quantize_to_grid(np.clip(y, -1.0, 1.0))
    return Utterance(wave_f, sr, sp.speaker_id, em.emotion_id,
                     is_poisoned=False, original_speaker=sp.speaker_id,
                     uid=f"s{sp.speaker_id:02d}_e{em.emotion_id}_u?")


def utterance_seed(spec: CorpusSpec, speaker_id: int, emotion_id: int, index: int):
    """Per-utterance seed; depends only on (corpus seed, speaker, emotion, index)."""
    return [spec.seed & 0xFFFFFFFF, 0xC012B05, speaker_id, emotion_id, index]


def generate_corpus(spec: CorpusSpec, speakers: list[SpeakerProfile] | None = None
                    ) -> LabeledDataset:
    """Render the full corpus: every (speaker, emotion) pair gets
    utterances_per_pair utterances, each with its own derived seed."""
    if speakers is None:
        speakers = [make_speaker(i, spec.seed) for i in range(spec.n_speakers)]
    if not speakers:
        raise DataError("speakers must be nonempty")
    max_formant = max(f for sp in speakers for f in sp.formants)
    if spec.sample_rate <= 2 * max_formant:
        raise ConfigError("sample_rate must exceed twice the highest formant")

    utts = []
    for sp in speakers:
        for em in spec.emotion_set:
            for k in range(spec.utterances_per_pair):
                u = render_utterance(sp, em, spec, utterance_seed(spec, sp.speaker_id, em.emotion_id, k))
                utts.append(replace(u, uid=f"s{sp.speaker_id:02d}_e{em.emotion_id}_u{k:03d}"))
    return LabeledDataset(
        utts,
        n_speakers=len(speakers),
        emotion_names=tuple(e.name for e in spec.emotion_set),
        speaker_genders=tuple(sp.gender_tag for sp in speakers),
    )


def write_wav(path: Path, u: Utterance) -> None:
    pcm = np.asarray(np.round(np.asarray(u.waveform, dtype=np.float64) * PCM_SCALE),
                     dtype=np.int64)
    pcm = np.clip(pcm, -PCM_SCALE, PCM_SCALE - 1).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(u.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise DataError(f"{path}: expected mono 16-bit PCM")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / PCM_SCALE), sr


MANIFEST_FIELDS = ("path", "speaker_label", "emotion_label", "original_speaker", "is_poisoned")


def export_corpus(dataset: LabeledDataset, out_dir: Path) -> Path:
    """Write one WAV per utterance plus a manifest.csv; returns manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for u in dataset:
            rel = f"wav/{u.uid}.wav"
            write_wav(out_dir / rel, u)
            writer.writerow([rel, u.speaker_label, u.emotion_label,
                             u.original_speaker, int(u.is_poisoned)])
    tmp.rename(manifest)
    return manifest
