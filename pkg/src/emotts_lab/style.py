"""Multi-scale style conditioning.

Phoneme-rate content queries attend over frame-level style features
(multi-head scaled dot-product attention, key = value = style frames); the
aligned result is then summed with utterance-level and speaker embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import DomainError, ShapeError

DTYPE = torch.float64


def sinusoidal_encoding(pos: torch.Tensor, dim: int, max_freq: float = 32.0) -> torch.Tensor:
    """Encode relative positions in ``[0, 1]`` as ``dim`` sin/cos features."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=DTYPE)) * math.pi
    ang = pos.to(DTYPE)[..., None] * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if enc.shape[-1] < dim:
        enc = torch.nn.functional.pad(enc, (0, dim - enc.shape[-1]))
    return enc


def relative_positions(n: int) -> torch.Tensor:
    return (torch.arange(n, dtype=DTYPE) + 0.5) / n


@dataclass
class StyleBundle:
    utterance_emb: torch.Tensor  # (d_s,) or (B, d_s)
    frame_emb: torch.Tensor  # (n_frames, d_s) or (B, n_frames, d_s)
    speaker_emb: torch.Tensor  # (d_s,) or (B, d_s)

    def __post_init__(self):
        widths = {self.utterance_emb.shape[-1], self.frame_emb.shape[-1], self.speaker_emb.shape[-1]}
        if len(widths) != 1:
            raise ShapeError(f"style embeddings disagree on width: {sorted(widths)}")
        for name in ("utterance_emb", "frame_emb", "speaker_emb"):
            if not torch.isfinite(getattr(self, name)).all():
                raise DomainError(f"{name} has non-finite entries")


class CrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value streams.

    When ``positional`` is set, sinusoidal encodings of relative position are
    added to the query and key inputs (never to values), which lets
    phoneme-rate queries pick out the matching stretch of frames.
    """

    def __init__(self, d_model: int = 32, n_heads: int = 2, positional: bool = False):
        super().__init__()
        if n_heads < 1 or d_model % n_heads:
            raise DomainError(f"d_model={d_model} must be divisible by n_heads={n_heads}")
        self.d_model, self.n_heads, self.positional = d_model, n_heads, positional
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.w_k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.w_v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.w_o = nn.Linear(d_model, d_model, dtype=DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        content: torch.Tensor,
        style: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        query_pos: Optional[torch.Tensor] = None,
        key_pos: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ):
        unbatched = content.ndim == 2
        if unbatched:
            content, style = content[None], style[None]
            key_mask = None if key_mask is None else key_mask[None]
            query_pos = None if query_pos is None else query_pos[None]
            key_pos = None if key_pos is None else key_pos[None]
        if content.shape[-1] != self.d_model or style.shape[-1] != self.d_model:
            raise ShapeError(
                f"width mismatch: content {content.shape[-1]}, style {style.shape[-1]}, model {self.d_model}"
            )
        if style.shape[1] < 1:
            raise DomainError("style sequence is empty")
        q_in, k_in = content, style
        if self.positional:
            if query_pos is None:
                query_pos = relative_positions(content.shape[1]).expand(content.shape[0], -1)
            if key_pos is None:
                key_pos = relative_positions(style.shape[1]).expand(style.shape[0], -1)
            q_in = q_in + sinusoidal_encoding(query_pos, self.d_model)
            k_in = k_in + sinusoidal_encoding(key_pos, self.d_model)
        q = self._split(self.w_q(q_in))
        k = self._split(self.w_k(k_in))
        v = self._split(self.w_v(style))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(content.shape[0], content.shape[1], self.d_model)
        out = self.w_o(out)
        if unbatched:
            out, weights = out[0], weights[0]
        return (out, weights) if return_weights else out


def cross_attention_align(content, style_frames, params: CrossAttention, **kwargs) -> torch.Tensor:
    """Align frame-level style onto the content sequence; output has the content's length."""
    return params(content, style_frames, **kwargs)


def combine_multi_scale(aligned: torch.Tensor, bundle: StyleBundle) -> torch.Tensor:
    """``Z_s = aligned + utterance_emb + speaker_emb`` broadcast over positions."""
    if aligned.shape[-1] != bundle.utterance_emb.shape[-1]:
        raise ShapeError(f"width mismatch: aligned {aligned.shape[-1]} vs style {bundle.utterance_emb.shape[-1]}")
    extra = bundle.utterance_emb + bundle.speaker_emb
    if aligned.ndim == 3:
        extra = extra.reshape(extra.shape[0] if extra.ndim == 2 else 1, 1, -1)
    return aligned + extra
