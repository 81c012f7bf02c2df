"""Training loops and evaluation procedures.

Two loops live here: cross-domain SED training (frame cross-entropy on
labelled source data plus a weighted MMD-family term between source and
unlabelled target activations), and multi-scale-conditioned diffusion TTS
training (score matching plus frame-label cross-entropy through a frozen
SED).  The ablation drivers that produce the EDER ladder and the ERA table
sit on top of them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import mmd as mmd_lib
from .corpus import SyntheticUtterance
from .diarization import FrameLabelSequence, corpus_eder, era, frames_to_segments
from .errors import DomainError, NumericalError
from .diffusion import NoiseSchedule, SamplerConfig
from .models import ToySED, ToySER, init_uniform_, length_mask, pad_batch
from .tts import TTSBatch, TTSModel, TTSTrainConfig, pad_soft_labels, soft_label_corpus, synthesize, tts_training_step

log = logging.getLogger(__name__)

DTYPE = torch.float64
ADAPTATION_MODES = ("none", "mmd", "mmmd", "lmmd", "mlmmd")


@dataclass(frozen=True)
class SEDTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    lambda_weight: float = 0.5
    adaptation_mode: str = "mlmmd"
    ser_epochs: int = 30
    ser_lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.adaptation_mode not in ADAPTATION_MODES:
            raise DomainError(f"adaptation_mode must be one of {ADAPTATION_MODES}, got {self.adaptation_mode!r}")
        if self.lambda_weight < 0:
            raise DomainError("lambda_weight must be >= 0")


class Batch:
    """Padded tensors for a list of utterances."""

    def __init__(self, utts: Sequence[SyntheticUtterance]):
        self.utts = list(utts)
        self.mel, self.lengths = pad_batch([u.mel for u in utts])
        self.mask = length_mask(self.lengths, self.mel.shape[1])
        labels = torch.zeros(self.mel.shape[:2], dtype=torch.long)
        for i, u in enumerate(utts):
            labels[i, : u.n_frames] = torch.as_tensor(u.labels_array())
        self.labels = labels

    def label_proportions(self, n_classes: int) -> torch.Tensor:
        onehot = F.one_hot(self.labels, n_classes).to(DTYPE) * self.mask[..., None]
        return onehot.sum(1) / self.mask.sum(1, keepdim=True)


def masked_frame_ce(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean frame cross-entropy; ``target`` is class ids ``(B, F)`` or probabilities ``(B, F, C)``."""
    logp = F.log_softmax(logits, dim=-1)
    if target.dtype == torch.long:
        nll = -logp.gather(-1, target[..., None])[..., 0]
    else:
        nll = -(target * logp).sum(-1)
    m = mask.to(DTYPE)
    return (nll * m).sum() / m.sum()


def _batches(n: int, batch_size: int, gen: torch.Generator) -> List[List[int]]:
    perm = torch.randperm(n, generator=gen).tolist()
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _sgd(params, lr, momentum):
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum)


def train_ser(
    source: Sequence[SyntheticUtterance],
    epochs: int = 30,
    lr: float = 1e-2,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
    n_classes: int = 4,
    d_style: int = 32,
) -> ToySER:
    """Fit the utterance-level classifier to each utterance's emotion proportions."""
    gen = torch.Generator().manual_seed(seed * 7919 + 11)
    model = init_uniform_(ToySER(source[0].mel.shape[1], 32, n_classes, d_style), gen)
    opt = _sgd(model.parameters(), lr, momentum)
    for _ in range(epochs):
        for idx in _batches(len(source), batch_size, gen):
            b = Batch([source[i] for i in idx])
            logits, _ = model(b.mel, b.lengths)
            loss = -(b.label_proportions(n_classes) * F.log_softmax(logits, -1)).sum(-1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def adaptation_term(
    mode: str,
    acts_s: Sequence[torch.Tensor],
    acts_t: Sequence[torch.Tensor],
    w_s: torch.Tensor,
    w_t: torch.Tensor,
    kernel: mmd_lib.KernelConfig,
) -> torch.Tensor:
    """Adaptation ladder: global/local MMD on the bottleneck or averaged over all layers."""
    if mode == "none":
        return torch.zeros((), dtype=DTYPE)
    if mode == "mmd":
        return mmd_lib.mmd2(acts_s[-1], acts_t[-1], kernel)
    if mode == "mmmd":
        return mmd_lib.mmmd2(acts_s, acts_t, kernel)
    if mode == "lmmd":
        return mmd_lib.lmmd2(acts_s[-1], acts_t[-1], w_s, w_t, kernel)
    if mode == "mlmmd":
        return mmd_lib.mlmmd2(acts_s, acts_t, w_s, w_t, kernel)
    raise DomainError(f"unknown adaptation mode {mode!r}")


def predict_frames(sed: ToySED, utts: Sequence[SyntheticUtterance], batch_size: int = 64) -> List[np.ndarray]:
    out = []
    with torch.no_grad():
        for i in range(0, len(utts), batch_size):
            b = Batch(utts[i : i + batch_size])
            logits, _, _ = sed(b.mel, b.lengths)
            pred = logits.argmax(-1)
            out.extend(pred[j, : int(b.lengths[j])].numpy() for j in range(len(b.utts)))
    return out


def evaluate_sed(sed: ToySED, utts: Sequence[SyntheticUtterance]) -> Dict[str, float]:
    preds = predict_frames(sed, utts)
    hop = utts[0].frame_labels.frame_hop
    pairs = [(u.segments, frames_to_segments(FrameLabelSequence(tuple(int(v) for v in p), hop))) for u, p in zip(utts, preds)]
    correct = sum(int((p == u.labels_array()).sum()) for u, p in zip(utts, preds))
    total = sum(u.n_frames for u in utts)
    return {"eder": corpus_eder(pairs), "frame_acc": correct / total}


def train_sed_cross_domain(
    cfg: SEDTrainConfig,
    source: Sequence[SyntheticUtterance],
    target: Sequence[SyntheticUtterance],
    ser: ToySER,
    kernel: Optional[mmd_lib.KernelConfig] = None,
    eval_target: Optional[Sequence[SyntheticUtterance]] = None,
    n_classes: int = 4,
    d_style: int = 32,
) -> Tuple[ToySED, List[dict]]:
    """Train a ToySED with CE on ``source`` and the configured adaptation term.

    Target labels are never read.  The random stream (init, batch order,
    target batch draws) does not depend on the adaptation mode, so modes are
    compared on identical trajectories up to the loss.
    """
    kernel = kernel or mmd_lib.KernelConfig()
    gen = torch.Generator().manual_seed(cfg.seed * 104729 + 3)
    sed = init_uniform_(ToySED(source[0].mel.shape[1], d_style=d_style, n_classes=n_classes), gen)
    opt = _sgd(sed.parameters(), cfg.lr, cfg.momentum)
    logs = []
    step = 0
    for epoch in range(cfg.epochs):
        tgt_order = _batches(len(target), cfg.batch_size, gen)
        sums = {"ce": 0.0, "adapt": 0.0, "total": 0.0}
        batches = _batches(len(source), cfg.batch_size, gen)
        for k, idx in enumerate(batches):
            bs = Batch([source[i] for i in idx])
            bt = Batch([target[i] for i in tgt_order[k % len(tgt_order)]])
            logits, _, acts_s = sed(bs.mel, bs.lengths)
            ce = masked_frame_ce(logits, bs.labels, bs.mask)
            if cfg.adaptation_mode != "none" and cfg.lambda_weight > 0:
                _, _, acts_t = sed(bt.mel, bt.lengths)
                with torch.no_grad():
                    w_s = torch.softmax(ser(bs.mel, bs.lengths)[0], -1)
                    w_t = torch.softmax(ser(bt.mel, bt.lengths)[0], -1)
                adapt = adaptation_term(cfg.adaptation_mode, acts_s, acts_t, w_s, w_t, kernel)
            else:
                adapt = torch.zeros((), dtype=DTYPE)
            total = mmd_lib.sed_total_loss(ce, adapt, cfg.lambda_weight)
            if not torch.isfinite(total):
                raise NumericalError(f"SED loss diverged at step {step}; config={asdict(cfg)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            sums["ce"] += float(ce.detach())
            sums["adapt"] += float(adapt.detach())
            sums["total"] += float(total.detach())
        rec = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if eval_target is not None:
            rec["target_eder"] = evaluate_sed(sed, eval_target)["eder"]
        logs.append(rec)
    sed.eval()
    return sed, logs



def train_tts(
    cfg: TTSTrainConfig,
    corpus: Sequence[SyntheticUtterance],
    ser: ToySER,
    sed: ToySED,
    n_phonemes: int,
    n_speakers: int,
    schedule: Optional[NoiseSchedule] = None,
    d_style: int = 32,
) -> Tuple[TTSModel, List[dict]]:
    """Fit the diffusion acoustic model by reconstruction of ``corpus``.

    Each utterance is its own style reference.  ``ser`` and ``sed`` stay
    frozen; ``sed`` provides the frame features, the soft labels and the
    cross-entropy judge.  Returns the model and one log record per step.
    """
    for enc in (ser, sed):
        enc.eval()
        enc.requires_grad_(False)
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + 11)
    model = init_uniform_(
        TTSModel(
            n_phonemes,
            n_speakers,
            n_mels=corpus[0].mel.shape[1],
            d_style=d_style,
            positional=cfg.positional_style,
            use_sed_conditioning=cfg.use_sed_conditioning,
            schedule=schedule,
        ),
        gen,
    )
    targets = soft_label_corpus(sed, corpus)
    opt = _sgd(model.parameters(), cfg.lr, cfg.momentum)
    logs: List[dict] = []
    order: List[List[int]] = []
    for step in range(cfg.steps):
        if not order:
            order = _batches(len(corpus), cfg.batch_size, gen)
        idx = order.pop(0)
        batch = TTSBatch([corpus[i] for i in idx])
        tgt = pad_soft_labels([targets[i] for i in idx], batch.mel.shape[1])
        parts = tts_training_step(model, ser, sed, batch, tgt, cfg, gen)
        if not torch.isfinite(parts["total"]):
            raise NumericalError(f"TTS loss diverged at step {step}; config={asdict(cfg)}")
        opt.zero_grad()
        parts["total"].backward()
        opt.step()
        logs.append({"step": step, **{k: float(v.detach()) for k, v in parts.items()}})
    model.eval()
    return model, logs


def evaluate_era(
    model: TTSModel,
    ser: ToySER,
    sed: ToySED,
    evaluator: ToySED,
    references: Sequence[SyntheticUtterance],
    sampler: SamplerConfig,
    seed: int = 0,
    batch_size: int = 64,
) -> Dict[str, float]:
    """Synthesize from each reference and score frame agreement.

    ``sed`` is the encoder the model was trained with; ``evaluator`` is a
    fixed classifier applied to the synthesized mels and compared against
    the references' ground-truth frame labels.
    """
    gen = torch.Generator().manual_seed(seed * 15485863 + 5)
    synth: List[SyntheticUtterance] = []
    for i in range(0, len(references), batch_size):
        synth.extend(synthesize(model, ser, sed, references[i : i + batch_size], sampler, gen))
    preds = predict_frames(evaluator, synth)
    hop = references[0].frame_labels.frame_hop
    scores = [era(u.frame_labels, FrameLabelSequence(tuple(int(v) for v in p), hop)) for u, p in zip(references, preds)]
    return {"era": float(np.mean(scores)), "n": len(scores)}
