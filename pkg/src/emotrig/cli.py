"""Command-line front door.

Verbs: gen-corpus, attack, defend {prune|strip|preproc}, report, grad-check,
selftest. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="emotrig",
        description="Emotional-prosody backdoor lab: synthetic corpus, "
                    "dirty-label attack, and defense sweeps.")
    ap.add_argument("--version", action="version", version=f"emotrig {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="experiment config (JSON)")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")

    common(sub.add_parser("gen-corpus", help="synthesize the corpus + manifest"))
    common(sub.add_parser("attack", help="split, poison, train, evaluate CA/ASR"))

    pd = sub.add_parser("defend", help="run a defense sweep against a record")
    pd.add_argument("kind", choices=["prune", "strip", "preproc"])
    pd.add_argument("--record", type=Path, required=True, help="record directory")
    pd.add_argument("--rate", type=float, default=None,
                    help="rate block to defend (default: highest)")
    pd.add_argument("--repeat", type=int, default=0, help="checkpoint repeat index")
    pd.add_argument("--dump-wavs", action="store_true",
                    help="preproc only: write one transformed WAV per grid point")

    pr = sub.add_parser("report", help="aggregate records into tables")
    pr.add_argument("records", nargs="+", type=Path, help="record directories")
    pr.add_argument("--out", type=Path, required=True)

    pg = sub.add_parser("grad-check", help="finite-difference gradient check")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--n-configs", type=int, default=3)

    ps = sub.add_parser("selftest", help="fast internal consistency checks")
    ps.add_argument("--out", type=Path, default=None,
                    help="also write the config reference page here")
    return ap


def _load(args) -> dict:
    from .experiment import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return args.out
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    raise ConfigError("no output directory: set config out_dir or pass --out")


def cmd_gen_corpus(args) -> int:
    from .experiment import run_gen_corpus
    cfg = _load(args)
    manifest = run_gen_corpus(cfg, _out_dir(args, cfg))
    with open(manifest) as fh:
        n_rows = sum(1 for _ in fh) - 1
    print(f"wrote {n_rows} utterances under {manifest.parent}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .experiment import run_attack
    cfg = _load(args)
    out = _out_dir(args, cfg)
    record = run_attack(cfg, out, jobs=max(1, args.jobs))
    for block in record["rate_blocks"]:
        print(f"rate={block['rate']}: mean CA={block['mean_ca']:.3f} "
              f"mean ASR={block['mean_asr']:.3f} "
              f"({len(block['runs'])} repeats)")
    print(f"record: {out}/record.json")
    if record["any_diverged"]:
        print("warning: at least one run diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_defend(args) -> int:
    from .experiment import run_defense_preproc, run_defense_prune, run_defense_strip
    if args.kind == "prune":
        rows = run_defense_prune(args.record, args.rate, args.repeat)
        print(f"prune sweep: {len(rows)} rows -> {args.record}/defenses/prune_sweep.csv")
    elif args.kind == "strip":
        summary = run_defense_strip(args.record, args.rate, args.repeat)
        print(f"strip: threshold={summary['threshold']:.4f} "
              f"FAR={summary['far']:.3f} FRR={summary['frr']:.3f} "
              f"(preset {summary['preset_frr']})")
    else:
        rows = run_defense_preproc(args.record, args.rate, args.repeat,
                                   dump_wavs=args.dump_wavs)
        print(f"preproc sweep: {len(rows)} rows -> "
              f"{args.record}/defenses/preproc_sweep.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiment import run_report
    run_report(args.records, args.out)
    print(f"report written under {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .nnet import Network, NetworkConfig, grad_check
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.n_configs):
        n_in = int(rng.integers(4, 8))
        cfg = NetworkConfig(
            conv_layers=((n_in, 4, int(rng.integers(2, 4)), 1), (4, 4, 2, 1)),
            embedding_dim=int(rng.integers(3, 6)),
            n_classes=int(rng.integers(2, 5)),
            head="aam" if i % 2 else "softmax",
            init_seed=int(rng.integers(2 ** 31)))
        x = rng.uniform(-2, 2, (2, n_in, 12))
        labels = rng.integers(0, cfg.n_classes, size=2)
        report = grad_check(Network(cfg), x, labels)
        worst = max(worst, report["max_rel_error"])
        print(f"config {i}: max rel error {report['max_rel_error']:.2e} "
              f"({report['worst_param']})")
    if worst >= 1e-4:
        print("grad check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("grad check OK")
    return EXIT_OK


def cmd_selftest(args) -> int:
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    from .nnet import Network, NetworkConfig, cross_entropy, grad_check
    from .preproc import median_filter, quantize, squeeze
    from .strip import shannon_entropy_bits
    from .training import t_test_independent

    cfg = NetworkConfig(conv_layers=((5, 4, 3, 1), (4, 4, 2, 1)),
                        embedding_dim=4, n_classes=3, init_seed=1)
    rng = np.random.default_rng(0)
    rep = grad_check(Network(cfg), rng.uniform(-2, 2, (2, 5, 10)),
                     np.array([0, 2]))
    check("gradients match finite differences", rep["max_rel_error"] < 1e-4)

    loss, _ = cross_entropy(np.array([1.0, 2.0, 3.0]), 0)
    check("cross-entropy worked example", abs(loss - 2.4076) < 1e-4)

    check("quantize worked example",
          quantize(np.array([0.501]), 256)[0] == 0.5)
    check("median worked example",
          np.array_equal(median_filter(np.array([0., 10., 0., 10., 0.]), 1),
                         np.array([0., 0., 10., 0., 0.])))
    check("squeeze worked example",
          np.array_equal(squeeze(np.array([1., 2., 3., 4.]), 2),
                         np.array([1., 0., 3., 0.])))

    h = 0.5 * (shannon_entropy_bits(np.array([0.5, 0.5]))
               + shannon_entropy_bits(np.array([1.0, 0.0])))
    check("entropy hand example", h == 0.5)

    t, p = t_test_independent([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    check("t-test symmetric case", t == 0.0 and p == 1.0)

    if args.out is not None:
        from .experiment import config_reference
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config_reference.md").write_text(config_reference())
        print(f"config reference -> {args.out}/config_reference.md")

    if failures:
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"gen-corpus": cmd_gen_corpus, "attack": cmd_attack,
                "defend": cmd_defend, "report": cmd_report,
                "grad-check": cmd_grad_check, "selftest": cmd_selftest}
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
