"""Multi-scale-conditioned diffusion acoustic model at toy scale.

The text side is a learned per-phoneme embedding: one table gives the content
queries ``Z_c`` and another gives the frame-rate Gaussian mean ``mu``.  The
style side combines attention-aligned SED frame features, a projected SER
utterance embedding and a speaker lookup into ``Z_s``, which is expanded to
frame rate through the known phoneme durations before reaching the score
network.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import SyntheticUtterance
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    marginal_params,
    reverse_sample,
    sample_training_time,
    score_matching_loss,
)
from .errors import DomainError
from .models import ToySED, ToySER, ToyScoreNet, length_mask, pad_batch
from .style import CrossAttention, StyleBundle, combine_multi_scale

DTYPE = torch.float64


@dataclass(frozen=True)
class TTSTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    ce_weight: float = 1.0
    ce_t_max: float = 0.5
    loss_weighting: str = "lambda"
    t_min: float = 1e-3
    use_sed_conditioning: bool = True
    use_frame_label_loss: bool = True
    use_cross_domain_sed: bool = True
    positional_style: bool = True
    train_domain: str = "source"
    seed: int = 0

    def __post_init__(self):
        if self.ce_weight < 0:
            raise DomainError("ce_weight must be >= 0")
        if self.loss_weighting not in ("none", "lambda"):
            raise DomainError(f"loss_weighting must be 'none' or 'lambda', got {self.loss_weighting!r}")
        if self.train_domain not in ("source", "target"):
            raise DomainError(f"train_domain must be 'source' or 'target', got {self.train_domain!r}")
        if not 0 < self.t_min < 1:
            raise DomainError("t_min must lie in (0, 1)")


class TTSBatch:
    """Padded text, alignment and reference tensors for a list of utterances."""

    def __init__(self, utts: Sequence[SyntheticUtterance]):
        self.utts = list(utts)
        self.mel, self.lengths = pad_batch([u.mel for u in utts])
        b, f = self.mel.shape[:2]
        self.mask = length_mask(self.lengths, f)
        n_ph = torch.tensor([len(u.phoneme_ids) for u in utts])
        p = int(n_ph.max())
        self.ph_mask = length_mask(n_ph, p)
        self.ph_ids = torch.zeros(b, p, dtype=torch.long)
        self.ph_pos = torch.zeros(b, p, dtype=DTYPE)
        self.frame_ph = torch.zeros(b, f, dtype=torch.long)  # index into the phoneme axis
        self.frame_ids = torch.zeros(b, f, dtype=torch.long)
        self.frame_pos = torch.zeros(b, f, dtype=DTYPE)
        for i, u in enumerate(utts):
            n = u.n_frames
            durs = np.asarray(u.phoneme_durations)
            starts = np.concatenate([[0], np.cumsum(durs)[:-1]])
            self.ph_ids[i, : len(durs)] = torch.as_tensor(u.phoneme_ids)
            self.ph_pos[i, : len(durs)] = torch.as_tensor((starts + durs / 2.0) / n)
            idx = np.repeat(np.arange(len(durs)), durs)
            self.frame_ph[i, :n] = torch.as_tensor(idx)
            self.frame_ids[i, :n] = torch.as_tensor(u.frame_phonemes())
            self.frame_pos[i, :n] = (torch.arange(n, dtype=DTYPE) + 0.5) / n
        self.speakers = torch.tensor([u.speaker_id for u in utts], dtype=torch.long)


class TTSModel(nn.Module):
    def __init__(
        self,
        n_phonemes: int,
        n_speakers: int,
        n_mels: int = 16,
        d_style: int = 32,
        n_heads: int = 2,
        positional: bool = True,
        use_sed_conditioning: bool = True,
        schedule: Optional[NoiseSchedule] = None,
    ):
        super().__init__()
        self.config = dict(
            n_phonemes=n_phonemes,
            n_speakers=n_speakers,
            n_mels=n_mels,
            d_style=d_style,
            n_heads=n_heads,
            positional=positional,
            use_sed_conditioning=use_sed_conditioning,
        )
        self.use_sed_conditioning = use_sed_conditioning
        self.phoneme_content = nn.Embedding(n_phonemes, d_style, dtype=DTYPE)
        self.phoneme_mean = nn.Embedding(n_phonemes, n_mels, dtype=DTYPE)
        self.attn = CrossAttention(d_style, n_heads, positional)
        self.utt_proj = nn.Linear(d_style, d_style, dtype=DTYPE)
        self.speaker = nn.Embedding(n_speakers, d_style, dtype=DTYPE)
        self.score_net = ToyScoreNet(n_mels, d_style, schedule=schedule)

    @property
    def schedule(self) -> NoiseSchedule:
        return self.score_net.schedule

    def conditioning(self, batch: TTSBatch, utt_emb: torch.Tensor, frame_style: Optional[torch.Tensor]):
        """Return frame-rate ``(mu, Z_s)`` for the batch."""
        z_c = self.phoneme_content(batch.ph_ids)
        if self.use_sed_conditioning and frame_style is not None:
            aligned = self.attn(
                z_c, frame_style, key_mask=batch.mask, query_pos=batch.ph_pos, key_pos=batch.frame_pos
            )
        else:
            aligned = torch.zeros_like(z_c)
            frame_style = torch.zeros(z_c.shape[0], 1, z_c.shape[2], dtype=DTYPE)
        bundle = StyleBundle(self.utt_proj(utt_emb), frame_style, self.speaker(batch.speakers))
        z_s = combine_multi_scale(aligned, bundle)
        z_s_frames = torch.gather(z_s, 1, batch.frame_ph[..., None].expand(-1, -1, z_s.shape[2]))
        mu = self.phoneme_mean(batch.frame_ids)
        return mu, z_s_frames


@torch.no_grad()
def reference_style(ser: ToySER, sed: ToySED, batch: TTSBatch):
    """Frozen encoders applied to the reference mel: SER embedding, SED frame features."""
    _, utt = ser(batch.mel, batch.lengths)
    _, frame_style, _ = sed(batch.mel, batch.lengths)
    return utt, frame_style


@torch.no_grad()
def soft_label_corpus(sed: ToySED, utts: Sequence[SyntheticUtterance], batch_size: int = 64) -> List[np.ndarray]:
    """Per-frame class posteriors of the frozen SED, one ``(F, C)`` array per utterance."""
    out = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i : i + batch_size]
        b = TTSBatch(chunk)
        probs = torch.softmax(sed(b.mel, b.lengths)[0], -1)
        out.extend(probs[j, : u.n_frames].numpy().copy() for j, u in enumerate(chunk))
    return out


def pad_soft_labels(labels: Sequence[np.ndarray], n_frames: int) -> torch.Tensor:
    out = torch.zeros(len(labels), n_frames, labels[0].shape[1], dtype=DTYPE)
    for i, p in enumerate(labels):
        out[i, : p.shape[0]] = torch.as_tensor(p)
    return out


def estimate_x0(xt: torch.Tensor, score: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal: ``(x_t + lam * score) / mean_coef``."""
    mean_coef, lam = marginal_params(schedule, t)
    shape = (-1,) + (1,) * (xt.ndim - 1) if mean_coef.ndim else ()
    return (xt + lam.reshape(shape) * score) / mean_coef.reshape(shape)


def tts_training_step(
    model: TTSModel,
    ser: ToySER,
    sed: ToySED,
    batch: TTSBatch,
    targets: torch.Tensor,
    cfg: TTSTrainConfig,
    generator: torch.Generator,
    t: Optional[torch.Tensor] = None,
    z: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """Loss breakdown ``{"diff", "ce", "total"}`` for one batch.

    ``targets`` are the frozen SED's per-frame soft labels of the references.
    The cross-entropy is applied to the one-step clean estimate for samples
    with ``t <= cfg.ce_t_max``; when the frame-label loss is disabled the term
    is exactly zero.
    """
    schedule = model.schedule
    b = batch.mel.shape[0]
    if t is None:
        t = sample_training_time(b, schedule, generator, cfg.t_min)
    utt, frame_style = reference_style(ser, sed, batch)
    mu, z_s = model.conditioning(batch, utt, frame_style)
    if z is None:
        z = torch.randn(batch.mel.shape, generator=generator, dtype=DTYPE)
    diff, xt, score = score_matching_loss(
        model.score_net,
        batch.mel,
        mu,
        z_s,
        t,
        schedule,
        z=z,
        weighting=cfg.loss_weighting,
        mask=batch.mask,
        return_prediction=True,
    )
    ce = torch.zeros((), dtype=DTYPE)
    if cfg.use_frame_label_loss and cfg.ce_weight > 0:
        keep = t <= cfg.ce_t_max
        if bool(keep.any()):
            x0_hat = estimate_x0(xt[keep], score[keep], t[keep], schedule)
            logits, _, _ = sed(x0_hat, batch.lengths[keep])
            logp = torch.log_softmax(logits, -1)
            m = batch.mask[keep].to(DTYPE)
            ce = -((targets[keep] * logp).sum(-1) * m).sum() / m.sum()
    total = diff + cfg.ce_weight * ce if cfg.use_frame_label_loss else diff
    return {"diff": diff, "ce": ce, "total": total}


@torch.no_grad()
def synthesize(
    model: TTSModel,
    ser: ToySER,
    sed: ToySED,
    references: Sequence[SyntheticUtterance],
    sampler: SamplerConfig,
    generator: torch.Generator,
) -> List[SyntheticUtterance]:
    """Generate one mel per reference, reusing its phonemes, durations and speaker.

    The returned utterances carry the reference's alignment and label metadata
    with the mel replaced by the sample.
    """
    batch = TTSBatch(references)
    utt, frame_style = reference_style(ser, sed, batch)
    mu, z_s = model.conditioning(batch, utt, frame_style)

    def score_fn(x, t, cond):
        return model.score_net(x, cond[0], t, cond[1])

    x = reverse_sample(score_fn, tuple(batch.mel.shape), (mu, z_s), model.schedule, sampler, generator)
    return [
        replace(u, uid=f"{u.uid}-syn", mel=x[i, : u.n_frames].numpy().copy()) for i, u in enumerate(references)
    ]
