"""Experiment drivers shared by the command line and the acceptance suite.

Checkpoints for one seed live under ``<checkpoint root>/seed<k>/``:
``ser.json``, ``sed-<mode>.json`` for each adaptation mode and
``tts-<variant>.json`` for each ablation variant.  Metric files never carry
timestamps, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .corpus import CorpusSpec, SyntheticUtterance, generate_corpus, split
from .errors import MissingInputError
from .models import ToySED, ToySER, load_checkpoint, save_checkpoint
from .training import ADAPTATION_MODES, evaluate_era, evaluate_sed, train_sed_cross_domain, train_ser, train_tts
from .tts import TTSModel, TTSTrainConfig

TTS_VARIANTS: Dict[str, dict] = {
    "full": {},
    "wo_sed": {"use_sed_conditioning": False},
    "wo_frame_label": {"use_frame_label_loss": False},
    "wo_cross_domain": {"use_cross_domain_sed": False},
}


@dataclass
class DataSplits:
    spec: CorpusSpec
    source_train: List[SyntheticUtterance]
    source_test: List[SyntheticUtterance]
    target_train: List[SyntheticUtterance]
    target_test: List[SyntheticUtterance]


def make_splits(spec: CorpusSpec, utts: Optional[Sequence[SyntheticUtterance]] = None) -> DataSplits:
    utts = list(utts) if utts is not None else generate_corpus(spec)
    s_tr, s_te = split(utts, "source")
    t_tr, t_te = split(utts, "target")
    return DataSplits(spec, s_tr, s_te, t_tr, t_te)


def seed_dir(root, seed: int) -> Path:
    return Path(root) / f"seed{seed}"


def tts_variant_name(cfg: TTSTrainConfig) -> str:
    for name, flags in TTS_VARIANTS.items():
        base = {"use_sed_conditioning": True, "use_frame_label_loss": True, "use_cross_domain_sed": True, **flags}
        if all(getattr(cfg, k) == v for k, v in base.items()):
            return name
    off = [k for k in ("use_sed_conditioning", "use_frame_label_loss", "use_cross_domain_sed") if not getattr(cfg, k)]
    return "wo_" + "_".join(k.removeprefix("use_") for k in off)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def require(paths: Sequence[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingInputError("missing inputs:\n  " + "\n  ".join(missing))


# --------------------------------------------------------------------------- SED


def ensure_ser(cfg: ExperimentConfig, data: DataSplits, ckpt: Path) -> ToySER:
    path = ckpt / "ser.json"
    if path.exists():
        ser = load_checkpoint(path)
        ser.requires_grad_(False)
        return ser
    st = cfg.sed_train
    ser = train_ser(
        data.source_train,
        epochs=st.ser_epochs,
        lr=st.ser_lr,
        momentum=st.momentum,
        batch_size=st.batch_size,
        seed=st.seed,
        n_classes=data.spec.n_classes,
    )
    save_checkpoint(ser, path)
    return ser


def run_sed(cfg: ExperimentConfig, data: DataSplits, ckpt: Path, mode: Optional[str] = None):
    """Train one cross-domain SED; returns ``(summary, per-epoch logs)``."""
    st = cfg.sed_train if mode is None else dataclasses.replace(cfg.sed_train, adaptation_mode=mode)
    ser = ensure_ser(cfg, data, ckpt)
    sed, logs = train_sed_cross_domain(
        st, data.source_train, data.target_train, ser, kernel=cfg.kernel,
        eval_target=data.target_test, n_classes=data.spec.n_classes,
    )
    save_checkpoint(sed, ckpt / f"sed-{st.adaptation_mode}.json")
    return sed_summary(sed, data, st.adaptation_mode, st.seed), logs


def sed_summary(sed: ToySED, data: DataSplits, mode: str, seed: int) -> dict:
    tgt = evaluate_sed(sed, data.target_test)
    src = evaluate_sed(sed, data.source_test)
    return {
        "seed": seed,
        "mode": mode,
        "target_eder": tgt["eder"],
        "target_frame_acc": tgt["frame_acc"],
        "source_eder": src["eder"],
        "source_frame_acc": src["frame_acc"],
    }


# --------------------------------------------------------------------------- TTS


def tts_inputs(cfg: ExperimentConfig, ckpt: Path, tts_cfg: Optional[TTSTrainConfig] = None) -> Dict[str, Path]:
    tts_cfg = tts_cfg or cfg.tts_train
    xmode = cfg.sed_train.adaptation_mode
    return {
        "ser": ckpt / "ser.json",
        "sed": ckpt / f"sed-{xmode if tts_cfg.use_cross_domain_sed else 'none'}.json",
        "evaluator": ckpt / f"sed-{xmode}.json",
    }


def run_tts(cfg: ExperimentConfig, data: DataSplits, ckpt: Path, tts_cfg: Optional[TTSTrainConfig] = None):
    """Train one TTS variant from existing SER/SED checkpoints and score its ERA."""
    tts_cfg = tts_cfg or cfg.tts_train
    paths = tts_inputs(cfg, ckpt, tts_cfg)
    require(list(paths.values()))
    ser, sed = load_checkpoint(paths["ser"]), load_checkpoint(paths["sed"])
    corpus = data.source_train if tts_cfg.train_domain == "source" else data.target_train
    model, logs = train_tts(tts_cfg, corpus, ser, sed, data.spec.n_phonemes, data.spec.n_speakers, cfg.schedule)
    name = tts_variant_name(tts_cfg)
    save_checkpoint(model, ckpt / f"tts-{name}.json")
    return tts_summary(cfg, data, ckpt, model, tts_cfg), logs


def tts_summary(cfg: ExperimentConfig, data: DataSplits, ckpt: Path, model: TTSModel, tts_cfg: TTSTrainConfig) -> dict:
    paths = tts_inputs(cfg, ckpt, tts_cfg)
    require(list(paths.values()))
    ser, sed, judge = (load_checkpoint(paths[k]) for k in ("ser", "sed", "evaluator"))
    res = evaluate_era(model, ser, sed, judge, data.target_test, cfg.sampler, seed=tts_cfg.seed)
    return {"seed": tts_cfg.seed, "variant": tts_variant_name(tts_cfg), "era": res["era"], "n_syntheses": res["n"]}


# --------------------------------------------------------------------------- ablation


def ablation_checkpoints(cfg: ExperimentConfig, root) -> List[Path]:
    needed = []
    for seed in range(cfg.ablation.sed_seeds):
        d = seed_dir(root, seed)
        needed.append(d / "ser.json")
        needed.extend(d / f"sed-{m}.json" for m in ADAPTATION_MODES)
    for seed in range(cfg.ablation.tts_seeds):
        needed.extend(seed_dir(root, seed) / f"tts-{v}.json" for v in TTS_VARIANTS)
    return sorted(set(needed))


def train_ablation_checkpoints(cfg: ExperimentConfig, root, metrics_dir=None) -> None:
    """Train whatever the ablation report needs and is not on disk yet."""
    n = max(cfg.ablation.sed_seeds, cfg.ablation.tts_seeds)
    for seed in range(n):
        scfg = cfg.with_seed(seed)
        data = make_splits(scfg.corpus)
        d = seed_dir(root, seed)
        if seed < cfg.ablation.sed_seeds:
            for m in ADAPTATION_MODES:
                if not (d / f"sed-{m}.json").exists():
                    summary, logs = run_sed(scfg, data, d, m)
                    if metrics_dir is not None:
                        write_jsonl(Path(metrics_dir) / f"sed-{m}-seed{seed}.jsonl", logs)
        if seed < cfg.ablation.tts_seeds:
            for m in (scfg.sed_train.adaptation_mode, "none"):
                if not (d / f"sed-{m}.json").exists():
                    run_sed(scfg, data, d, m)
            for v, flags in TTS_VARIANTS.items():
                if not (d / f"tts-{v}.json").exists():
                    summary, logs = run_tts(scfg, data, d, dataclasses.replace(scfg.tts_train, **flags))
                    if metrics_dir is not None:
                        write_jsonl(Path(metrics_dir) / f"tts-{v}-seed{seed}.jsonl", logs)


def _mean_std(xs: Sequence[float]):
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def ladder_holds(eders: Dict[str, float]) -> bool:
    mid = min(eders["mmmd"], eders["lmmd"])
    return eders["mlmmd"] <= mid <= eders["mmd"] <= eders["none"]


def run_ablation_suite(cfg: ExperimentConfig, root) -> dict:
    """Evaluate every checkpoint of the ablation grid and build the report.

    Raises :class:`MissingInputError` naming every absent checkpoint.
    """
    require(ablation_checkpoints(cfg, root))
    per_seed: List[dict] = []
    for seed in range(max(cfg.ablation.sed_seeds, cfg.ablation.tts_seeds)):
        scfg = cfg.with_seed(seed)
        data = make_splits(scfg.corpus)
        d = seed_dir(root, seed)
        if seed < cfg.ablation.sed_seeds:
            for m in ADAPTATION_MODES:
                per_seed.append({"table": "sed", **sed_summary(load_checkpoint(d / f"sed-{m}.json"), data, m, seed)})
        if seed < cfg.ablation.tts_seeds:
            for v, flags in TTS_VARIANTS.items():
                tcfg = dataclasses.replace(scfg.tts_train, **flags)
                model = load_checkpoint(d / f"tts-{v}.json", schedule=cfg.schedule)
                per_seed.append({"table": "tts", **tts_summary(scfg, data, d, model, tcfg)})
    rows = []
    for m in ADAPTATION_MODES:
        vals = [r["target_eder"] for r in per_seed if r["table"] == "sed" and r["mode"] == m]
        if not vals:
            continue
        mean, std = _mean_std(vals)
        rows.append({"table": "sed", "variant": m, "metric": "target_eder", "mean": mean, "std": std, "n_seeds": len(vals)})
    for v in TTS_VARIANTS:
        vals = [r["era"] for r in per_seed if r["table"] == "tts" and r["variant"] == v]
        if not vals:
            continue
        mean, std = _mean_std(vals)
        rows.append({"table": "tts", "variant": v, "metric": "era", "mean": mean, "std": std, "n_seeds": len(vals)})
    ladder = 0
    for seed in range(cfg.ablation.sed_seeds):
        e = {r["mode"]: r["target_eder"] for r in per_seed if r["table"] == "sed" and r["seed"] == seed}
        ladder += ladder_holds(e)
    return {"rows": rows, "per_seed": per_seed, "ladder_seeds": ladder, "sed_seeds": cfg.ablation.sed_seeds}


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "variant", "metric", "mean", "std", "n_seeds"])
    for r in report["rows"]:
        w.writerow([r["table"], r["variant"], r["metric"], f"{r['mean']:.6f}", f"{r['std']:.6f}", r["n_seeds"]])
    return buf.getvalue()


def tidy_csv(report: dict) -> str:
    """Long format ``run,seed,metric,value`` for external plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", "metric", "value"])
    for r in report["per_seed"]:
        run = f"{r['table']}-{r.get('mode') or r.get('variant')}"
        for k, v in r.items():
            if isinstance(v, float) and math.isfinite(v):
                w.writerow([run, r["seed"], k, repr(v)])
    return buf.getvalue()
