"""Command-line entry point: ``emotts-lab <subcommand> [--config C] [--seed S] [--out D]``.

Exit codes: 0 success, 1 invalid config or usage, 2 missing inputs,
3 numerical failure, 4 self-test failure.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import __version__
from .config import ExperimentConfig, config_from_dict, load_config
from .corpus import generate_corpus, load_corpus, save_corpus
from .diarization import eder, read_segments
from .errors import ConfigError, DomainError, MissingInputError, NumericalError
from .experiments import (
    DataSplits,
    make_splits,
    report_csv,
    require,
    run_ablation_suite,
    run_sed,
    run_tts,
    sed_summary,
    seed_dir,
    tidy_csv,
    train_ablation_checkpoints,
    tts_inputs,
    tts_summary,
    tts_variant_name,
    write_json,
    write_jsonl,
)
from .models import load_checkpoint
from .selftest import run_selftest
from .training import ADAPTATION_MODES
from .tts import synthesize

log = logging.getLogger("emotts_lab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emotts-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="experiment config JSON (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", type=Path, help="output directory (defaults to paths.workdir)")
        return sp

    add("gen-corpus", "generate the synthetic two-domain corpus")
    sp = add("train-sed", "train SER and one cross-domain SED")
    sp.add_argument("--mode", choices=ADAPTATION_MODES, help="overrides sed_train.adaptation_mode")
    sp.add_argument("--corpus", type=Path, help="load a saved corpus instead of regenerating")
    sp = add("eval-eder", "EDER between two segment files, or of a trained SED")
    sp.add_argument("--ref", type=Path)
    sp.add_argument("--hyp", type=Path)
    sp.add_argument("--mode", choices=ADAPTATION_MODES)
    sp.add_argument("--corpus", type=Path)
    sp = add("train-tts", "train the diffusion acoustic model from SER/SED checkpoints")
    sp.add_argument("--corpus", type=Path)
    sp = add("synthesize", "synthesize target-domain test utterances")
    sp.add_argument("--n", type=int, help="number of references (default: whole target test split)")
    sp.add_argument("--corpus", type=Path)
    sp = add("eval-era", "emotion reclassification accuracy of a trained TTS model")
    sp.add_argument("--corpus", type=Path)
    sp = add("ablate", "evaluate the full ablation grid and write report tables")
    sp.add_argument("--train-missing", action="store_true", help="train absent checkpoints first")
    add("selftest", "run analytic and brute-force oracle checks")
    return p


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg) -> Path:
    out = args.out if args.out is not None else Path(cfg.paths.workdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ckpt_root(out: Path, cfg) -> Path:
    p = Path(cfg.paths.checkpoint_dir)
    return p if p.is_absolute() else out / p


def _data(args, cfg) -> DataSplits:
    path = getattr(args, "corpus", None)
    if path is None:
        return make_splits(cfg.corpus)
    require([path / "manifest.json"])
    spec, utts = load_corpus(path)
    return make_splits(spec, utts)


def _echo(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.resolved.json").write_text(cfg.dumps())
    (out / "VERSION").write_text(version_string() + "\n")


def cmd_gen_corpus(args, cfg, out):
    utts = generate_corpus(cfg.corpus)
    save_corpus(utts, cfg.corpus, out / "corpus")
    print(f"wrote {len(utts)} utterances to {out / 'corpus'}")


def cmd_train_sed(args, cfg, out):
    data = _data(args, cfg)
    mode = args.mode or cfg.sed_train.adaptation_mode
    summary, logs = run_sed(cfg, data, seed_dir(_ckpt_root(out, cfg), cfg.seed), mode)
    tag = f"sed-{mode}-seed{cfg.seed}"
    write_jsonl(out / "metrics" / f"{tag}.jsonl", logs)
    write_json(out / "metrics" / f"{tag}.json", summary)
    print(f"target EDER {summary['target_eder']:.6f}  source frame acc {summary['source_frame_acc']:.4f}")


def cmd_eval_eder(args, cfg, out):
    if args.ref is not None or args.hyp is not None:
        if args.ref is None or args.hyp is None:
            raise UsageError("eval-eder needs both --ref and --hyp")
        require([args.ref, args.hyp])
        value = eder(read_segments(args.ref), read_segments(args.hyp))
        print(f"{value:.6f}")
        return
    mode = args.mode or cfg.sed_train.adaptation_mode
    path = seed_dir(_ckpt_root(out, cfg), cfg.seed) / f"sed-{mode}.json"
    require([path])
    summary = sed_summary(load_checkpoint(path), _data(args, cfg), mode, cfg.seed)
    write_json(out / "metrics" / f"eval-sed-{mode}-seed{cfg.seed}.json", summary)
    print(f"{summary['target_eder']:.6f}")


def _tts_checkpoint(cfg, out) -> Path:
    return seed_dir(_ckpt_root(out, cfg), cfg.seed) / f"tts-{tts_variant_name(cfg.tts_train)}.json"


def cmd_train_tts(args, cfg, out):
    data = _data(args, cfg)
    summary, logs = run_tts(cfg, data, seed_dir(_ckpt_root(out, cfg), cfg.seed))
    tag = f"tts-{summary['variant']}-seed{cfg.seed}"
    write_jsonl(out / "metrics" / f"{tag}.jsonl", logs)
    write_json(out / "metrics" / f"{tag}.json", summary)
    print(f"ERA {summary['era']:.6f} over {summary['n_syntheses']} syntheses")


def cmd_synthesize(args, cfg, out):
    ckpt = seed_dir(_ckpt_root(out, cfg), cfg.seed)
    paths = tts_inputs(cfg, ckpt)
    model_path = _tts_checkpoint(cfg, out)
    require([model_path, paths["ser"], paths["sed"]])
    data = _data(args, cfg)
    refs = data.target_test[: args.n] if args.n else data.target_test
    model = load_checkpoint(model_path, schedule=cfg.schedule)
    ser, sed = load_checkpoint(paths["ser"]), load_checkpoint(paths["sed"])
    gen = torch.Generator().manual_seed(cfg.seed)
    synth = synthesize(model, ser, sed, refs, cfg.sampler, gen)
    save_corpus(synth, data.spec, out / "synth")
    print(f"wrote {len(synth)} syntheses to {out / 'synth'}")


def cmd_eval_era(args, cfg, out):
    model_path = _tts_checkpoint(cfg, out)
    require([model_path])
    data = _data(args, cfg)
    model = load_checkpoint(model_path, schedule=cfg.schedule)
    summary = tts_summary(cfg, data, seed_dir(_ckpt_root(out, cfg), cfg.seed), model, cfg.tts_train)
    write_json(out / "metrics" / f"eval-tts-{summary['variant']}-seed{cfg.seed}.json", summary)
    print(f"{summary['era']:.6f}")


def cmd_ablate(args, cfg, out):
    root = _ckpt_root(out, cfg)
    if args.train_missing:
        train_ablation_checkpoints(cfg, root, out / "metrics")
    report = run_ablation_suite(cfg, root)
    write_json(out / "report.json", report)
    (out / "report.csv").write_text(report_csv(report))
    (out / "report_long.csv").write_text(tidy_csv(report))
    sys.stdout.write(report_csv(report))
    print(f"ladder ordering holds on {report['ladder_seeds']}/{report['sed_seeds']} seeds")


def cmd_selftest(args, cfg, out):
    results = run_selftest()
    write_json(out / "selftest.json", [{"check": n, "passed": ok, "detail": d} for n, ok, d in results])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        return EXIT_SELFTEST
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-sed": cmd_train_sed,
    "eval-eder": cmd_eval_eder,
    "train-tts": cmd_train_tts,
    "synthesize": cmd_synthesize,
    "eval-era": cmd_eval_era,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "emotts-lab: error: a subcommand is required")
        cfg = _resolve(args)
        out = _out(args, cfg)
        _echo(out, cfg)
        code = COMMANDS[args.command](args, cfg, out)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
