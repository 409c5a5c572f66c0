"""Config-driven experiment drivers and persistent records.

A single JSON config describes corpus, features, split, poison plans,
network, training, and defense sweeps. Records are directories holding the
resolved config, per-run metrics, checkpoints, and defense CSVs; re-running
a record's config reproduces its CA/ASR bit-exactly.
"""
from __future__ import annotations

import csv
import datetime
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import CorpusSpec, LabeledDataset, export_corpus, generate_corpus
from .errors import ConfigError, DataError
from .features import FeatureConfig
from .nnet import Network, NetworkConfig, load_checkpoint, save_checkpoint
from .poison import (
    PoisonPlan,
    SplitSpec,
    TonePlan,
    build_eval_sets,
    build_tone_eval_sets,
    poison_emotion,
    poison_tone,
    split_dataset,
)
from .preproc import DEFAULT_D_GRID, DEFAULT_K_GRID, DEFAULT_Q_GRID, sweep_preproc
from .prune import FINAL_ONLY, PruneConfig, layer_mean_abs_activation, prune, sweep_grid
from .strip import StripConfig, entropy_histogram, run_strip
from .training import (
    RunResult,
    TrainConfig,
    asr_from_feats,
    ca_from_feats,
    eval_features,
    evaluate_asr,
    evaluate_ca,
    labels_of,
    mean_metrics,
    t_test_independent,
    train,
)

SCHEMA_VERSION = 1

EMOTION_MAP_CAVEAT = (
    "Emotion prosody parameters are synthetic lab choices; no quantitative "
    "mapping from named emotions to prosody is established.")

# key -> (default, description); nested dicts define sub-sections
CONFIG_SCHEMA: dict = {
    "schema_version": (SCHEMA_VERSION, "config format version"),
    "seed": (None, "master seed; required, no wall-clock fallback"),
    "out_dir": ("", "output directory (CLI --out overrides)"),
    "corpus": {
        "n_speakers": (10, "number of synthetic speakers"),
        "utterances_per_pair": (10, "utterances per (speaker, emotion) pair"),
        "duration_s": (3.0, "nominal utterance duration, seconds"),
        "sample_rate": (16000, "sample rate, Hz"),
        "jitter": (0.02, "per-utterance multiplicative perturbation scale"),
    },
    "features": {
        "n_mels": (80, "mel filterbank size"),
        "frame_len_ms": (25.0, "analysis window, ms"),
        "hop_ms": (10.0, "hop, ms"),
        "fmin": (20.0, "lowest filter edge, Hz"),
        "fmax": (None, "highest filter edge, Hz (null = Nyquist)"),
        "log_floor": (1e-10, "energy floor inside the log"),
        "chunk_s": (3.0, "training/eval chunk duration, seconds"),
    },
    "split": {
        "train_frac": (0.70, "training fraction"),
        "val_frac": (0.15, "validation fraction"),
        "test_frac": (0.15, "test fraction"),
        "stratify_by": ("speaker_emotion", "stratification key: speaker | speaker_emotion"),
    },
    "poison": {
        "trigger": ("emotion", "trigger kind: emotion | tone"),
        "trigger_emotion": ("sad", "emotion name or id used as the trigger"),
        "target_speaker": (0, "speaker id every triggered input should map to"),
        "rates": ([0.05, 0.10], "poisoning rates; one record block per rate"),
        "relabel_mode": ("delete-to-rate", "subset | delete-to-rate"),
        "tone_freq": (1000.0, "static trigger tone frequency, Hz"),
        "tone_gain": (0.08, "static trigger tone amplitude"),
    },
    "network": {
        "conv_channels": ([32, 32, 32, 32], "output channels per conv layer"),
        "kernel": (3, "conv kernel width"),
        "dilation": (1, "conv dilation"),
        "embedding_dim": (32, "embedding size"),
        "head": ("softmax", "classifier head: softmax | aam"),
        "aam_margin": (0.2, "angular margin (aam head)"),
        "aam_scale": (30.0, "logit scale (aam head)"),
    },
    "train": {
        "max_epochs": (100, "epoch cap"),
        "patience": (10, "early-stopping patience, epochs"),
        "warmup_epochs": (5, "epochs before early stopping becomes active"),
        "batch_size": (16, "mini-batch size"),
        "learning_rate": (0.002, "SGD learning rate"),
        "momentum": (0.9, "SGD momentum"),
        "n_repeats": (3, "independently seeded training runs"),
    },
    "defenses": {
        "prune": {
            "pruning_rates": ([round(0.1 * i, 1) for i in range(1, 10)],
                              "fraction of channels masked per selected layer"),
            "conv_layer_rates": (["final-only", 0.1, 0.2, 0.3, 0.4, 0.5],
                                 "fraction of conv layers pruned (or final-only)"),
        },
        "strip": {
            "n_copies": (20, "perturbation copies per scored input"),
            "mix_gain": (1.0, "superposition gain"),
            "preset_frr": (0.05, "FRR fixed before calibration"),
            "threshold_mode": ("poisoned-quantile", "poisoned-quantile | clean-quantile"),
            "pool_size": (40, "clean utterances in the perturbation pool"),
        },
        "preproc": {
            "q_grid": (list(DEFAULT_Q_GRID), "quantization steps (1 = identity)"),
            "k_grid": (list(DEFAULT_K_GRID), "median half-widths (0 = identity)"),
            "d_grid": (list(DEFAULT_D_GRID), "squeeze factors (1 = identity)"),
            "squeeze_mode": ("zeros", "zeros | interp reconstruction"),
        },
    },
}


def _resolve_section(schema: dict, given: dict, path: str) -> dict:
    out = {}
    for key, spec in schema.items():
        sub = given.get(key)
        if isinstance(spec, dict):
            if sub is not None and not isinstance(sub, dict):
                raise ConfigError(f"config field {path}{key} must be an object")
            out[key] = _resolve_section(spec, sub or {}, f"{path}{key}.")
        else:
            out[key] = given.get(key, spec[0])
    for key in given:
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{key}")
    return out


def resolve_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys, require an explicit seed."""
    cfg = _resolve_section(CONFIG_SCHEMA, raw, "")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    if cfg["seed"] is None:
        raise ConfigError("config field seed is required (no wall-clock seeding)")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(raw)


def config_reference() -> str:
    """One generated page documenting every tunable and its default."""
    lines = ["# Configuration reference", "",
             "Every tunable, with its default. Unknown keys are rejected.", ""]

    def walk(schema: dict, prefix: str):
        for key, spec in schema.items():
            if isinstance(spec, dict):
                walk(spec, f"{prefix}{key}.")
            else:
                default, desc = spec
                lines.append(f"- `{prefix}{key}` = `{json.dumps(default)}` - {desc}")

    walk(CONFIG_SCHEMA, "")
    lines.append("")
    return "\n".join(lines)


# -- typed views of the resolved config ---------------------------------------

def corpus_spec(cfg: dict) -> CorpusSpec:
    c = cfg["corpus"]
    return CorpusSpec(n_speakers=c["n_speakers"],
                      utterances_per_pair=c["utterances_per_pair"],
                      duration_s=c["duration_s"], sample_rate=c["sample_rate"],
                      jitter=c["jitter"], seed=cfg["seed"])


def feature_config(cfg: dict) -> FeatureConfig:
    f = cfg["features"]
    return FeatureConfig(n_mels=f["n_mels"], frame_len_ms=f["frame_len_ms"],
                         hop_ms=f["hop_ms"], fmin=f["fmin"], fmax=f["fmax"],
                         log_floor=f["log_floor"], chunk_s=f["chunk_s"])


def split_spec(cfg: dict) -> SplitSpec:
    s = cfg["split"]
    return SplitSpec(train_frac=s["train_frac"], val_frac=s["val_frac"],
                     test_frac=s["test_frac"], stratify_by=s["stratify_by"],
                     seed=_derive(cfg["seed"], 10))


def network_config(cfg: dict) -> NetworkConfig:
    n = cfg["network"]
    chans = [cfg["features"]["n_mels"]] + list(n["conv_channels"])
    layers = tuple((chans[i], chans[i + 1], n["kernel"], n["dilation"])
                   for i in range(len(n["conv_channels"])))
    return NetworkConfig(conv_layers=layers, embedding_dim=n["embedding_dim"],
                         n_classes=cfg["corpus"]["n_speakers"], head=n["head"],
                         aam_margin=n["aam_margin"], aam_scale=n["aam_scale"],
                         init_seed=0)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(max_epochs=t["max_epochs"], patience=t["patience"],
                       warmup_epochs=t["warmup_epochs"], batch_size=t["batch_size"],
                       learning_rate=t["learning_rate"], momentum=t["momentum"],
                       n_repeats=t["n_repeats"], seed=seed)


def emotion_id(ds: LabeledDataset, name_or_id) -> int:
    if isinstance(name_or_id, int):
        return name_or_id
    try:
        return ds.emotion_names.index(name_or_id)
    except ValueError:
        raise ConfigError(f"unknown trigger_emotion {name_or_id!r}; "
                          f"corpus has {list(ds.emotion_names)}")


def poison_plan(cfg: dict, ds: LabeledDataset, rate: float):
    p = cfg["poison"]
    if p["trigger"] == "emotion":
        return PoisonPlan(trigger_emotion=emotion_id(ds, p["trigger_emotion"]),
                          target_speaker=p["target_speaker"], poison_rate=rate,
                          relabel_mode=p["relabel_mode"],
                          seed=_derive(cfg["seed"], 20))
    if p["trigger"] == "tone":
        return TonePlan(target_speaker=p["target_speaker"], poison_rate=rate,
                        tone_freq=p["tone_freq"], tone_gain=p["tone_gain"],
                        seed=_derive(cfg["seed"], 20))
    raise ConfigError(f"unknown poison.trigger {p['trigger']!r}")


def _derive(seed: int, *salt: int) -> int:
    return int(np.random.default_rng([seed & 0xFFFFFFFF, *salt]).integers(2 ** 31))


# -- record IO -----------------------------------------------------------------

def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def save_record(out_dir: Path, record: dict) -> None:
    _write_atomic(Path(out_dir) / "record.json", json.dumps(record, indent=2))


def load_record(out_dir: Path) -> dict:
    path = Path(out_dir) / "record.json"
    if not path.exists():
        raise DataError(f"no record.json under {out_dir}")
    return json.loads(path.read_text())


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# -- drivers -------------------------------------------------------------------

def run_gen_corpus(cfg: dict, out_dir: Path) -> Path:
    ds = generate_corpus(corpus_spec(cfg))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = export_corpus(ds, out_dir)
    _write_atomic(out_dir / "config.json", json.dumps(cfg, indent=2))
    return manifest


@dataclass
class AttackContext:
    """Everything a rate block's training and defenses share."""
    cfg: dict
    dataset: LabeledDataset
    fcfg: FeatureConfig
    train_set: LabeledDataset
    val_set: LabeledDataset
    test_set: LabeledDataset
    plan: object
    poisoned_train: LabeledDataset
    poisoned_val: LabeledDataset
    clean_test: LabeledDataset
    poisoned_test: LabeledDataset
    poison_report: object


# corpus synthesis is deterministic, so defense drivers reuse generated
# corpora instead of re-rendering per invocation
_corpus_cache: dict[CorpusSpec, LabeledDataset] = {}


def _cached_corpus(spec: CorpusSpec) -> LabeledDataset:
    if spec not in _corpus_cache:
        if len(_corpus_cache) > 4:
            _corpus_cache.clear()
        _corpus_cache[spec] = generate_corpus(spec)
    return _corpus_cache[spec]


def build_context(cfg: dict, rate: float, dataset: LabeledDataset | None = None
                  ) -> AttackContext:
    ds = dataset if dataset is not None else _cached_corpus(corpus_spec(cfg))
    fcfg = feature_config(cfg)
    tr, va, te = split_dataset(ds, split_spec(cfg))
    plan = poison_plan(cfg, ds, rate)
    if isinstance(plan, PoisonPlan):
        trp, vap, report = poison_emotion(tr, va, plan)
        clean_te, pois_te = build_eval_sets(te, plan)
    else:
        trp, vap, report = poison_tone(tr, va, plan)
        clean_te, pois_te = build_tone_eval_sets(te, plan)
    return AttackContext(cfg, ds, fcfg, tr, va, te, plan, trp, vap,
                         clean_te, pois_te, report)


def run_single_training(ctx: AttackContext, repeat: int) -> tuple[Network, RunResult]:
    cfg = ctx.cfg
    seed = _derive(cfg["seed"], 30, int(round(ctx.plan.poison_rate * 1000)), repeat)
    net, tres = train(network_config(cfg), ctx.poisoned_train, ctx.poisoned_val,
                      train_config(cfg, seed), ctx.fcfg)
    ca = evaluate_ca(net, ctx.clean_test, ctx.fcfg)
    asr = evaluate_asr(net, ctx.poisoned_test, ctx.plan.target_speaker, ctx.fcfg)
    result = RunResult(ca=ca, asr=asr, best_epoch=tres.best_epoch,
                       val_loss_curve=tres.val_loss_curve, seed=seed,
                       diverged=tres.diverged, wall_s=tres.wall_s)
    return net, result


def run_attack(cfg: dict, out_dir: Path, jobs: int = 1) -> dict:
    """Full pipeline: corpus -> split -> poison -> train repeats -> metrics."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    started = _utcnow()
    dataset = _cached_corpus(corpus_spec(cfg))
    n_repeats = cfg["train"]["n_repeats"]

    rate_blocks = []
    csv_rows = []
    any_diverged = False
    for rate in cfg["poison"]["rates"]:
        ctx = build_context(cfg, rate, dataset)

        def cell(repeat: int):
            return run_single_training(ctx, repeat)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(cell, range(n_repeats)))
        else:
            outcomes = [cell(r) for r in range(n_repeats)]

        runs = []
        for repeat, (net, result) in enumerate(outcomes):
            ck = out_dir / "checkpoints" / f"rate{rate:.3f}_rep{repeat}.npz"
            save_checkpoint(net, ck)
            any_diverged |= result.diverged
            runs.append({"repeat": repeat, "seed": result.seed, "ca": result.ca,
                         "asr": result.asr, "best_epoch": result.best_epoch,
                         "diverged": result.diverged,
                         "wall_s": round(result.wall_s, 3),
                         "checkpoint": str(ck.relative_to(out_dir))})
            csv_rows.append({"rate": rate, **{k: runs[-1][k] for k in
                             ("repeat", "seed", "best_epoch", "ca", "asr",
                              "wall_s", "checkpoint")}})
        mean_ca, mean_asr = mean_metrics(
            [RunResult(r["ca"], r["asr"], r["best_epoch"], [], r["seed"])
             for r in runs])
        rate_blocks.append({
            "rate": rate,
            "poison_report": {
                "n_removed_target_trigger": ctx.poison_report.n_removed_target_trigger,
                "n_relabeled": ctx.poison_report.n_relabeled,
                "n_deleted_for_rate": ctx.poison_report.n_deleted_for_rate,
                "achieved_rate": ctx.poison_report.achieved_rate,
                "final_size": ctx.poison_report.final_size,
            },
            "runs": runs, "mean_ca": mean_ca, "mean_asr": mean_asr,
        })

    target = cfg["poison"]["target_speaker"]
    record = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "started_utc": started,
        "finished_utc": _utcnow(),
        "config": cfg,
        "caveats": [EMOTION_MAP_CAVEAT],
        "vocabulary": {"n_speakers": dataset.n_speakers,
                       "emotions": list(dataset.emotion_names),
                       "speaker_genders": list(dataset.speaker_genders)},
        "target_gender": dataset.speaker_genders[target],
        "rate_blocks": rate_blocks,
        "any_diverged": any_diverged,
        "defenses": {},
    }
    save_record(out_dir, record)
    write_csv(out_dir / "runs.csv",
              ["rate", "repeat", "seed", "best_epoch", "ca", "asr", "wall_s",
               "checkpoint"], csv_rows)
    _write_atomic(out_dir / "config_reference.md", config_reference())
    return record


def _load_block_checkpoint(record: dict, out_dir: Path, rate: float | None,
                           repeat: int) -> tuple[dict, Network]:
    blocks = record["rate_blocks"]
    if not blocks:
        raise DataError("record has no rate blocks")
    if rate is None:
        block = max(blocks, key=lambda b: b["rate"])
    else:
        match = [b for b in blocks if abs(b["rate"] - rate) < 1e-12]
        if not match:
            raise DataError(f"record has no rate block {rate}")
        block = match[0]
    runs = block["runs"]
    if repeat >= len(runs):
        raise DataError(f"record block has only {len(runs)} repeats")
    ck = Path(out_dir) / runs[repeat]["checkpoint"]
    if not ck.exists():
        raise DataError(f"missing checkpoint {ck}")
    return block, load_checkpoint(ck)


def run_defense_prune(record_dir: Path, rate: float | None = None,
                      repeat: int = 0) -> list[dict]:
    """Sweep (conv_layer_rate, pruning_rate) cells; CSV mirrors the CA/ASR
    pruning-curve figures."""
    record = load_record(record_dir)
    cfg = record["config"]
    block, net = _load_block_checkpoint(record, record_dir, rate, repeat)
    ctx = build_context(cfg, block["rate"])
    ranking_feats = eval_features(ctx.poisoned_val.with_utterances(
        [u for u in ctx.poisoned_val if not u.is_poisoned]), ctx.fcfg)

    d = cfg["defenses"]["prune"]
    grid = sweep_grid(d["pruning_rates"],
                      [FINAL_ONLY if r == "final-only" else r
                       for r in d["conv_layer_rates"]])
    clean_feats = eval_features(ctx.clean_test, ctx.fcfg)
    clean_labels = labels_of(ctx.clean_test)
    pois_feats = eval_features(ctx.poisoned_test, ctx.fcfg)
    base_ca = ca_from_feats(net, clean_feats, clean_labels)
    base_asr = asr_from_feats(net, pois_feats, ctx.plan.target_speaker)
    means = layer_mean_abs_activation(net, ranking_feats)
    rows = [{"conv_layer_rate": "none", "pruning_rate": 0.0,
             "ca": base_ca, "asr": base_asr}]
    for clr, pr in grid:
        pruned, _ = prune(net, PruneConfig(pr, clr), ranking_feats,
                          precomputed_means=means)
        rows.append({
            "conv_layer_rate": "final-only" if clr == FINAL_ONLY else clr,
            "pruning_rate": pr,
            "ca": ca_from_feats(pruned, clean_feats, clean_labels),
            "asr": asr_from_feats(pruned, pois_feats, ctx.plan.target_speaker)})
    defenses_dir = Path(record_dir) / "defenses"
    defenses_dir.mkdir(exist_ok=True)
    write_csv(defenses_dir / "prune_sweep.csv",
              ["conv_layer_rate", "pruning_rate", "ca", "asr"], rows)
    trend = prune_trend_flag(rows, base_ca, base_asr)
    record["defenses"]["prune"] = {"rate": block["rate"], "repeat": repeat,
                                   "baseline_ca": base_ca, "baseline_asr": base_asr,
                                   "trend_reproduced": trend}
    save_record(record_dir, record)
    return rows


def prune_trend_flag(rows: list[dict], base_ca: float, base_asr: float) -> bool:
    """True when some high-layer-rate, low-pruning-rate cell cuts ASR by >= 15
    points while losing <= 5 points of CA."""
    for row in rows:
        clr = row["conv_layer_rate"]
        high_clr = clr == "final-only" or (isinstance(clr, (int, float)) and clr >= 0.4)
        if high_clr and isinstance(clr, (int, float)) and clr >= 0.4 \
                and row["pruning_rate"] <= 0.3:
            if (base_asr - row["asr"] >= 0.15) and (base_ca - row["ca"] <= 0.05):
                return True
    return False


def strip_pool_and_eval(ctx: AttackContext, pool_size: int,
                        min_eval: int = 0) -> tuple[list, LabeledDataset, LabeledDataset]:
    """Perturbation pool from clean training utterances; eval sets from the
    test context, optionally padded with freshly synthesized utterances so
    detection statistics have enough samples."""
    clean_train = [u for u in ctx.poisoned_train if not u.is_poisoned]
    rng = np.random.default_rng([ctx.cfg["seed"] & 0xFFFFFFFF, 40])
    picks = rng.choice(len(clean_train), size=min(pool_size, len(clean_train)),
                       replace=False)
    pool = [clean_train[int(i)] for i in picks]
    clean_eval, poisoned_eval = ctx.clean_test, ctx.poisoned_test
    if min_eval and (len(clean_eval) < min_eval or len(poisoned_eval) < min_eval):
        clean_eval, poisoned_eval = synthesize_strip_eval(ctx, min_eval)
    return pool, clean_eval, poisoned_eval


def synthesize_strip_eval(ctx: AttackContext, n_each: int
                          ) -> tuple[LabeledDataset, LabeledDataset]:
    """Fresh utterances (seeds disjoint from the corpus) for detection-side
    evaluation: n_each clean plus n_each trigger-bearing, poisoned-labeled."""
    from dataclasses import replace as dc_replace

    from .corpus import make_speaker, render_utterance
    from .poison import add_tone

    cfg = ctx.cfg
    spec = corpus_spec(cfg)
    emotions = spec.emotion_set
    plan = ctx.plan
    target = plan.target_speaker
    trigger_em = getattr(plan, "trigger_emotion", None)
    speakers = [make_speaker(i, spec.seed) for i in range(spec.n_speakers)]
    non_target = [sp for sp in speakers if sp.speaker_id != target]
    rng = np.random.default_rng([cfg["seed"] & 0xFFFFFFFF, 41])

    clean, poisoned = [], []
    k = 0
    while len(clean) < n_each or len(poisoned) < n_each:
        sp = non_target[int(rng.integers(len(non_target)))]
        if len(poisoned) < n_each:
            em = emotions[trigger_em] if trigger_em is not None \
                else emotions[int(rng.integers(len(emotions)))]
            u = render_utterance(sp, em, spec, [spec.seed & 0xFFFFFFFF, 42, k, 1])
            if trigger_em is None:
                u = add_tone(u, plan.tone_freq, plan.tone_gain)
            poisoned.append(dc_replace(u, speaker_label=target, is_poisoned=True,
                                       uid=f"strip_p{k}"))
        if len(clean) < n_each:
            pool_em = [e for e in emotions if trigger_em is None
                       or e.emotion_id != trigger_em]
            em = pool_em[int(rng.integers(len(pool_em)))]
            u = render_utterance(sp, em, spec, [spec.seed & 0xFFFFFFFF, 42, k, 0])
            clean.append(dc_replace(u, uid=f"strip_c{k}"))
        k += 1
    base = ctx.dataset
    return (base.with_utterances(clean), base.with_utterances(poisoned))


def run_defense_strip(record_dir: Path, rate: float | None = None,
                      repeat: int = 0, min_eval: int = 0) -> dict:
    record = load_record(record_dir)
    cfg = record["config"]
    block, net = _load_block_checkpoint(record, record_dir, rate, repeat)
    ctx = build_context(cfg, block["rate"])
    d = cfg["defenses"]["strip"]
    scfg = StripConfig(n_copies=d["n_copies"], mix_gain=d["mix_gain"],
                       preset_frr=d["preset_frr"], threshold_mode=d["threshold_mode"],
                       seed=_derive(cfg["seed"], 43))
    pool, clean_eval, poisoned_eval = strip_pool_and_eval(ctx, d["pool_size"], min_eval)
    report = run_strip(net, clean_eval, poisoned_eval, pool, scfg, ctx.fcfg)

    defenses_dir = Path(record_dir) / "defenses"
    defenses_dir.mkdir(exist_ok=True)
    rows = ([{"uid": u.uid, "is_poisoned": 0, "entropy": e}
             for u, e in zip(clean_eval, report.clean_entropies)] +
            [{"uid": u.uid, "is_poisoned": 1, "entropy": e}
             for u, e in zip(poisoned_eval, report.poisoned_entropies)])
    write_csv(defenses_dir / "strip_report.csv", ["uid", "is_poisoned", "entropy"], rows)
    write_csv(defenses_dir / "strip_summary.csv",
              ["preset_frr", "threshold_mode", "threshold", "far", "frr"],
              [{"preset_frr": report.preset_frr, "threshold_mode": report.threshold_mode,
                "threshold": report.threshold, "far": report.far, "frr": report.frr}])
    write_csv(defenses_dir / "strip_hist.csv",
              ["bin_lo", "bin_hi", "clean_count", "poisoned_count"],
              [{"bin_lo": lo, "bin_hi": hi, "clean_count": c, "poisoned_count": p}
               for lo, hi, c, p in entropy_histogram(report)])
    summary = {"rate": block["rate"], "repeat": repeat, "preset_frr": report.preset_frr,
               "threshold": report.threshold, "far": report.far, "frr": report.frr,
               "threshold_mode": report.threshold_mode,
               "n_clean": len(clean_eval), "n_poisoned": len(poisoned_eval)}
    record["defenses"]["strip"] = summary
    save_record(record_dir, record)
    return summary


def run_defense_preproc(record_dir: Path, rate: float | None = None,
                        repeat: int = 0, dump_wavs: bool = False) -> list[dict]:
    record = load_record(record_dir)
    cfg = record["config"]
    block, net = _load_block_checkpoint(record, record_dir, rate, repeat)
    ctx = build_context(cfg, block["rate"])
    d = cfg["defenses"]["preproc"]
    rows = sweep_preproc(net, ctx.clean_test, ctx.poisoned_test,
                         ctx.plan.target_speaker, ctx.fcfg,
                         q_grid=d["q_grid"], k_grid=d["k_grid"], d_grid=d["d_grid"],
                         squeeze_mode=d["squeeze_mode"])
    defenses_dir = Path(record_dir) / "defenses"
    defenses_dir.mkdir(exist_ok=True)
    write_csv(defenses_dir / "preproc_sweep.csv",
              ["defense", "parameter", "ca", "asr"], rows)
    if dump_wavs:
        _dump_preproc_wavs(ctx, d, defenses_dir / "preproc_wavs")
    record["defenses"]["preproc"] = {"rate": block["rate"], "repeat": repeat,
                                     "n_rows": len(rows)}
    save_record(record_dir, record)
    return rows


def _dump_preproc_wavs(ctx: AttackContext, grids: dict, out: Path) -> None:
    # one audited example per grid point, taken from the poisoned test set
    from .corpus import write_wav
    from .preproc import PreprocConfig, apply_preproc

    out.mkdir(parents=True, exist_ok=True)
    sample = ctx.poisoned_test[0]
    points = ([("quantize", q, PreprocConfig(quantize_q=int(q)))
               for q in grids["q_grid"]] +
              [("median", k, PreprocConfig(median_k=int(k)))
               for k in grids["k_grid"]] +
              [("squeeze", dd, PreprocConfig(squeeze_factor=int(dd),
                                             squeeze_mode=grids["squeeze_mode"]))
               for dd in grids["d_grid"]])
    for name, param, pcfg in points:
        write_wav(out / f"{name}_{param}.wav", apply_preproc(sample, pcfg))


def strip_static_dynamic_compare(emotion_dir: Path, tone_dir: Path,
                                 repeats: int = 3, min_eval: int = 200) -> dict:
    """FAR at the preset FRR for the emotional trigger vs the static tone
    trigger, paired per repeat. The detector is expected to fare better
    (lower FAR) on the static trigger; the outcome is recorded either way."""
    per_seed = []
    for rep in range(repeats):
        s_emo = run_defense_strip(emotion_dir, repeat=rep, min_eval=min_eval)
        s_tone = run_defense_strip(tone_dir, repeat=rep, min_eval=min_eval)
        per_seed.append({"repeat": rep,
                         "far_emotion": s_emo["far"], "frr_emotion": s_emo["frr"],
                         "far_tone": s_tone["far"], "frr_tone": s_tone["frr"],
                         "static_lower": s_tone["far"] < s_emo["far"]})
    wins = sum(r["static_lower"] for r in per_seed)
    result = {"per_seed": per_seed, "wins_static": wins, "repeats": repeats,
              "reproduced": wins >= max(1, (2 * repeats + 2) // 3)}
    record = load_record(tone_dir)
    record["defenses"]["static_vs_dynamic"] = result
    save_record(tone_dir, record)
    write_csv(Path(tone_dir) / "defenses" / "strip_compare.csv",
              ["repeat", "far_emotion", "frr_emotion", "far_tone", "frr_tone",
               "static_lower"], per_seed)
    return result


# -- reporting -----------------------------------------------------------------

def run_report(record_dirs: list[Path], out_dir: Path) -> dict:
    records = [load_record(d) for d in record_dirs]
    vocab = records[0]["vocabulary"]
    for r in records[1:]:
        if r["vocabulary"]["n_speakers"] != vocab["n_speakers"] or \
                r["vocabulary"]["emotions"] != vocab["emotions"]:
            raise DataError("records have incompatible vocabularies")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # (a) CA/ASR grid by emotion x gender x rate, mean over records and seeds
    grid: dict[tuple, list] = {}
    for rec, rdir in zip(records, record_dirs):
        trigger = rec["config"]["poison"]["trigger_emotion"] \
            if rec["config"]["poison"]["trigger"] == "emotion" else "tone"
        gender = rec["target_gender"]
        for block in rec["rate_blocks"]:
            for run in block["runs"]:
                grid.setdefault((str(trigger), gender, block["rate"]), []).append(
                    (run["ca"], run["asr"]))
    grid_rows = [{"emotion": em, "target_gender": g, "rate": rate,
                  "mean_ca": float(np.mean([v[0] for v in vals])),
                  "mean_asr": float(np.mean([v[1] for v in vals])),
                  "n_runs": len(vals)}
                 for (em, g, rate), vals in sorted(grid.items())]
    write_csv(out_dir / "ca_asr_grid.csv",
              ["emotion", "target_gender", "rate", "mean_ca", "mean_asr", "n_runs"],
              grid_rows)

    # (b)-(d) defense CSV merges
    merged = {"prune_sweep.csv": [], "strip_summary.csv": [], "preproc_sweep.csv": []}
    for rec, rdir in zip(records, record_dirs):
        for name in merged:
            path = Path(rdir) / "defenses" / name
            if path.exists():
                with open(path) as fh:
                    for row in csv.DictReader(fh):
                        merged[name].append({"record": str(rdir), **row})
    for name, rows in merged.items():
        if rows:
            write_csv(out_dir / name, list(rows[0].keys()), rows)

    # (e) gender t-test over per-run metrics
    by_gender: dict[str, dict[str, list[float]]] = {}
    for rec in records:
        g = rec["target_gender"]
        slot = by_gender.setdefault(g, {"ca": [], "asr": []})
        for block in rec["rate_blocks"]:
            for run in block["runs"]:
                slot["ca"].append(run["ca"])
                slot["asr"].append(run["asr"])
    ttest_rows = []
    ttest_text = []
    if "male" in by_gender and "female" in by_gender:
        for metric in ("ca", "asr"):
            xs = by_gender["male"][metric]
            ys = by_gender["female"][metric]
            if len(xs) >= 2 and len(ys) >= 2:
                try:
                    t, p = t_test_independent(xs, ys)
                except DataError:
                    continue
                ttest_rows.append({"metric": metric.upper(), "t": t, "p": p,
                                   "n_male": len(xs), "n_female": len(ys)})
                ttest_text.append(f"{metric.upper()} male vs female: t={t:.2f}, p={p:.2f}")
    if ttest_rows:
        write_csv(out_dir / "gender_ttest.csv",
                  ["metric", "t", "p", "n_male", "n_female"], ttest_rows)

    lines = ["Aggregate report", "================", "",
             f"records: {len(records)}",
             f"speakers: {vocab['n_speakers']}, emotions: {vocab['emotions']}", ""]
    for row in grid_rows:
        lines.append(f"trigger={row['emotion']:<9} gender={row['target_gender']:<6} "
                     f"rate={row['rate']:<5} CA={row['mean_ca']:.3f} "
                     f"ASR={row['mean_asr']:.3f} (n={row['n_runs']})")
    if ttest_text:
        lines.append("")
        lines.extend(ttest_text)
    for rec in records:
        if rec.get("defenses", {}).get("prune") is not None:
            flag = rec["defenses"]["prune"]["trend_reproduced"]
            lines.append("")
            lines.append("pruning trend (high layer rate, low pruning rate): "
                         + ("reproduced" if flag else "NOT reproduced"))
        if rec.get("defenses", {}).get("static_vs_dynamic") is not None:
            cmp_res = rec["defenses"]["static_vs_dynamic"]
            lines.append(
                f"static-trigger detection advantage: "
                f"{cmp_res['wins_static']}/{cmp_res['repeats']} seeds -> "
                + ("reproduced" if cmp_res["reproduced"] else "NOT reproduced"))
    lines.append("")
    lines.append(f"caveat: {EMOTION_MAP_CAVEAT}")
    _write_atomic(out_dir / "summary.txt", "\n".join(lines) + "\n")
    return {"grid_rows": grid_rows, "ttest": ttest_rows}
