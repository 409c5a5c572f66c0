"""Dataset splitting and dirty-label poisoning.

The emotion attack relabels trigger-emotion utterances to a target speaker
after first removing the target's own trigger-emotion samples. A static
additive sine-tone trigger ships alongside as a control for detection
experiments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import LabeledDataset, Utterance, quantize_to_grid
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    stratify_by: str = "speaker_emotion"   # or "speaker"
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be positive and sum to 1")
        if self.stratify_by not in ("speaker", "speaker_emotion"):
            raise ConfigError(f"unknown stratify_by: {self.stratify_by}")


@dataclass(frozen=True)
class PoisonPlan:
    trigger_emotion: int
    target_speaker: int
    poison_rate: float
    relabel_mode: str = "subset"   # or "delete-to-rate"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate < 1.0:
            raise ConfigError("poison_rate must be in [0, 1)")
        if self.relabel_mode not in ("subset", "delete-to-rate"):
            raise ConfigError(f"unknown relabel_mode: {self.relabel_mode}")


@dataclass(frozen=True)
class TonePlan:
    """Static-trigger control: additive sine tone + dirty label."""
    target_speaker: int
    poison_rate: float
    tone_freq: float = 1000.0
    tone_gain: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate < 1.0:
            raise ConfigError("poison_rate must be in [0, 1)")


@dataclass(frozen=True)
class PoisonReport:
    n_removed_target_trigger: int
    n_relabeled: int
    n_deleted_for_rate: int
    achieved_rate: float
    final_size: int


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(d: LabeledDataset, s: SplitSpec
                  ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified partition into train/val/test.

    Each stratum contributes floor(frac * n) utterances per split; leftover
    samples go to whichever split is furthest behind its global target, ties
    broken train, then val, then test. Deterministic under the split seed.
    """
    strata: dict[tuple, list[int]] = {}
    for i, u in enumerate(d):
        key = (u.speaker_label,) if s.stratify_by == "speaker" \
            else (u.speaker_label, u.emotion_label)
        strata.setdefault(key, []).append(i)

    for key, idx in strata.items():
        if len(idx) < 3:
            raise DataError(f"stratum {key} has only {len(idx)} utterances (need >= 3)")

    fracs = (s.train_frac, s.val_frac, s.test_frac)
    assigned = [0, 0, 0]
    seen = 0
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    rng = np.random.default_rng([s.seed & 0xFFFFFFFF, 0x5B117])
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = len(idx)
        seen += n
        counts = [int(np.floor(f * n)) for f in fracs]
        leftover = n - sum(counts)
        for _ in range(leftover):
            deficits = [fracs[j] * seen - (assigned[j] + counts[j]) for j in range(3)]
            counts[int(np.argmax(deficits))] += 1
        pos = 0
        for j in range(3):
            parts[j].extend(int(i) for i in idx[pos:pos + counts[j]])
            assigned[j] += counts[j]
            pos += counts[j]
    return tuple(d.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


def _validate_plan(d: LabeledDataset, plan: PoisonPlan) -> None:
    if not 0 <= plan.target_speaker < d.n_speakers:
        raise ConfigError(f"target_speaker {plan.target_speaker} not in vocabulary")
    if not 0 <= plan.trigger_emotion < len(d.emotion_names):
        raise ConfigError(f"trigger_emotion {plan.trigger_emotion} not in vocabulary")


def _poison_one(d: LabeledDataset, plan: PoisonPlan, rng) -> tuple[LabeledDataset, PoisonReport]:
    # step 1: drop the target speaker's own trigger-emotion samples
    kept = [u for u in d
            if not (u.original_speaker == plan.target_speaker
                    and u.emotion_label == plan.trigger_emotion)]
    n_removed = len(d) - len(kept)
    trig_idx = [i for i, u in enumerate(kept) if u.emotion_label == plan.trigger_emotion]

    if plan.relabel_mode == "subset":
        p = _round_half_up(plan.poison_rate * len(kept))
        n_deleted = 0
    else:
        # delete surplus trigger samples so the p relabeled ones make up the
        # requested fraction of what remains: p = rate * (base + p)
        base = len(kept) - len(trig_idx)
        p = _round_half_up(plan.poison_rate * base / (1.0 - plan.poison_rate))
        n_deleted = max(0, len(trig_idx) - p)
    if p > len(trig_idx):
        raise DataError(
            f"insufficient trigger-emotion samples: need {p}, have {len(trig_idx)}")

    chosen = rng.choice(len(trig_idx), size=p, replace=False) if p else np.array([], dtype=int)
    chosen_set = {trig_idx[int(c)] for c in chosen}
    trig_set = set(trig_idx)

    out: list[Utterance] = []
    for i, u in enumerate(kept):
        if i in chosen_set:
            out.append(replace(u, speaker_label=plan.target_speaker, is_poisoned=True))
        elif plan.relabel_mode == "delete-to-rate" and i in trig_set:
            continue
        else:
            out.append(u)
    final = len(out)
    report = PoisonReport(n_removed, p, n_deleted,
                          achieved_rate=(p / final if final else 0.0),
                          final_size=final)
    return d.with_utterances(out), report


def poison_emotion(train: LabeledDataset, val: LabeledDataset, plan: PoisonPlan
                   ) -> tuple[LabeledDataset, LabeledDataset, PoisonReport]:
    """Apply the dirty-label emotion trigger to train and val at the same rate.

    Returns the poisoned sets plus the training-set report.
    """
    _validate_plan(train, plan)
    rng_t = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x9015, 0])
    rng_v = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x9015, 1])
    train_p, report = _poison_one(train, plan, rng_t)
    val_p, _ = _poison_one(val, plan, rng_v)
    return train_p, val_p, report


def build_eval_sets(test: LabeledDataset, plan: PoisonPlan
                    ) -> tuple[LabeledDataset, LabeledDataset]:
    """Split the untouched test set into clean and poisoned halves.

    Poisoned = every non-target trigger-emotion utterance, relabeled to the
    target; clean = everything else under true labels (the target speaker's
    own trigger-emotion utterances stay in the clean set).
    """
    _validate_plan(test, plan)
    if any(u.is_poisoned for u in test):
        raise DataError("test set must be untouched by poisoning")
    clean, poisoned = [], []
    for u in test:
        if (u.emotion_label == plan.trigger_emotion
                and u.original_speaker != plan.target_speaker):
            poisoned.append(replace(u, speaker_label=plan.target_speaker, is_poisoned=True))
        else:
            clean.append(u)
    if not poisoned:
        raise DataError("poisoned test set would be empty under this plan")
    return test.with_utterances(clean), test.with_utterances(poisoned)


def add_tone(u: Utterance, freq: float, gain: float) -> Utterance:
    """Superimpose a fixed sine tone (the static trigger)."""
    t = np.arange(len(u.waveform)) / u.sample_rate
    wav = np.asarray(u.waveform, dtype=np.float64) + gain * np.sin(2 * np.pi * freq * t)
    return replace(u, waveform=quantize_to_grid(np.clip(wav, -1.0, 1.0)))


def _tone_poison_one(d: LabeledDataset, plan: TonePlan, rng) -> tuple[LabeledDataset, PoisonReport]:
    candidates = [i for i, u in enumerate(d) if u.original_speaker != plan.target_speaker]
    p = _round_half_up(plan.poison_rate * len(d))
    if p > len(candidates):
        raise DataError(f"insufficient non-target samples: need {p}, have {len(candidates)}")
    chosen = set(int(candidates[int(c)]) for c in
                 rng.choice(len(candidates), size=p, replace=False)) if p else set()
    out = []
    for i, u in enumerate(d):
        if i in chosen:
            v = add_tone(u, plan.tone_freq, plan.tone_gain)
            out.append(replace(v, speaker_label=plan.target_speaker, is_poisoned=True))
        else:
            out.append(u)
    return d.with_utterances(out), PoisonReport(0, p, 0, p / len(out) if out else 0.0, len(out))


def poison_tone(train: LabeledDataset, val: LabeledDataset, plan: TonePlan
                ) -> tuple[LabeledDataset, LabeledDataset, PoisonReport]:
    """Static-tone dirty-label control attack on train and val."""
    if not 0 <= plan.target_speaker < train.n_speakers:
        raise ConfigError(f"target_speaker {plan.target_speaker} not in vocabulary")
    rng_t = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x7013, 0])
    rng_v = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x7013, 1])
    train_p, report = _tone_poison_one(train, plan, rng_t)
    val_p, _ = _tone_poison_one(val, plan, rng_v)
    return train_p, val_p, report


def build_tone_eval_sets(test: LabeledDataset, plan: TonePlan
                         ) -> tuple[LabeledDataset, LabeledDataset]:
    """Clean test unchanged; poisoned test = non-target samples with the tone."""
    if any(u.is_poisoned for u in test):
        raise DataError("test set must be untouched by poisoning")
    clean = list(test)
    poisoned = [replace(add_tone(u, plan.tone_freq, plan.tone_gain),
                        speaker_label=plan.target_speaker, is_poisoned=True)
                for u in test if u.original_speaker != plan.target_speaker]
    if not poisoned:
        raise DataError("poisoned test set would be empty under this plan")
    return test.with_utterances(clean), test.with_utterances(poisoned)
