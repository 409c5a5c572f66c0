import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emotrig.corpus import CorpusSpec, EmotionProfile, generate_corpus


@pytest.fixture(scope="session")
def tiny_emotions():
    return (
        EmotionProfile(0, "neutral"),
        EmotionProfile(1, "low", pitch_scale=0.85, rate_scale=0.9, energy_scale=0.7),
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_emotions):
    """4 speakers x 2 emotions x 7 utterances, 8 kHz, 0.5 s: fast unit-test fuel."""
    spec = CorpusSpec(n_speakers=4, emotion_set=tiny_emotions, utterances_per_pair=7,
                      duration_s=0.5, sample_rate=8000, jitter=0.02, seed=1234)
    return generate_corpus(spec)
