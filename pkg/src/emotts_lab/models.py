"""Desk-scale stand-ins for the pretrained networks, plus gradient checking and checkpoints.

* ``ToySER``: frame-wise MLP, masked mean pool, emotion logits + utterance embedding.
* ``ToySED``: stack of stride-1 convolutions, a bottleneck and a frame classifier.
  The bottleneck output is the frame-level style embedding, and every layer's
  time-pooled activation is exposed for the multi-layer adaptation losses.
* ``ToyScoreNet``: per-frame residual MLP on ``(x_t, mu, Z_s, t)``.

Batched inputs are padded ``(B, F, M)`` tensors with a ``lengths`` vector.
Padded frames never influence valid ones.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, marginal_params
from .errors import DomainError, NumericalError, ShapeError

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


def init_uniform_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Fill every parameter with ``U(-a, a)``, ``a = 1/sqrt(fan_in)`` of its layer."""
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv1d, nn.Embedding)):
            if isinstance(sub, nn.Linear):
                fan_in = sub.in_features
            elif isinstance(sub, nn.Conv1d):
                fan_in = sub.in_channels * sub.kernel_size[0]
            else:
                fan_in = 1
            a = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                for p in sub.parameters(recurse=False):
                    p.copy_((torch.rand(p.shape, generator=generator, dtype=DTYPE) * 2 - 1) * a)
    return module


def length_mask(lengths: torch.Tensor, n: int) -> torch.Tensor:
    return torch.arange(n)[None, :] < lengths[:, None]


def pad_batch(mels: Sequence[np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length ``(F_i, M)`` matrices into ``(B, F_max, M)`` plus lengths."""
    lengths = torch.tensor([m.shape[0] for m in mels], dtype=torch.long)
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1], dtype=DTYPE)
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.as_tensor(m, dtype=DTYPE)
    return out, lengths


def _batchify(mel, lengths):
    mel = torch.as_tensor(mel, dtype=DTYPE)
    unbatched = mel.ndim == 2
    if unbatched:
        mel = mel[None]
    if mel.shape[1] < 1:
        raise DomainError("input has no frames")
    if lengths is None:
        lengths = torch.full((mel.shape[0],), mel.shape[1], dtype=torch.long)
    return mel, lengths, unbatched


def masked_mean(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask[..., None].to(h.dtype)
    return (h * m).sum(1) / m.sum(1)


class ToySER(nn.Module):
    def __init__(self, n_mels: int = 16, hidden: int = 32, n_classes: int = 4, d_style: int = 32):
        super().__init__()
        self.config = dict(n_mels=n_mels, hidden=hidden, n_classes=n_classes, d_style=d_style)
        self.frame = nn.Linear(n_mels, hidden, dtype=DTYPE)
        self.logit_head = nn.Linear(hidden, n_classes, dtype=DTYPE)
        self.emb_head = nn.Linear(hidden, d_style, dtype=DTYPE)

    def forward(self, mel, lengths=None):
        mel, lengths, unbatched = _batchify(mel, lengths)
        h = torch.tanh(self.frame(mel))
        pooled = masked_mean(h, length_mask(lengths, mel.shape[1]))
        logits, emb = self.logit_head(pooled), self.emb_head(pooled)
        if unbatched:
            return logits[0], emb[0]
        return logits, emb


def ser_forward(model: ToySER, mel, lengths=None):
    return model(mel, lengths)


class ToySED(nn.Module):
    def __init__(
        self,
        n_mels: int = 16,
        channels: int = 32,
        n_conv: int = 3,
        kernel: int = 5,
        d_style: int = 32,
        n_classes: int = 4,
    ):
        super().__init__()
        if kernel % 2 != 1:
            raise DomainError("kernel size must be odd for same-length convolution")
        self.config = dict(
            n_mels=n_mels, channels=channels, n_conv=n_conv, kernel=kernel, d_style=d_style, n_classes=n_classes
        )
        self.convs = nn.ModuleList(
            nn.Conv1d(n_mels if i == 0 else channels, channels, kernel, dtype=DTYPE) for i in range(n_conv)
        )
        self.bottleneck = nn.Linear(channels, d_style, dtype=DTYPE)
        self.head = nn.Linear(d_style, n_classes, dtype=DTYPE)
        self.half = kernel // 2

    @property
    def n_layers(self) -> int:
        return len(self.convs) + 1

    def _extend(self, h: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # replicate each sequence's last valid frame into its padding, then pad both ends
        idx = torch.minimum(torch.arange(h.shape[1])[None, :], (lengths - 1)[:, None])
        h = torch.gather(h, 1, idx[..., None].expand(-1, -1, h.shape[2]))
        return F.pad(h.transpose(1, 2), (self.half, self.half), mode="replicate")

    def forward(self, mel, lengths=None):
        """Return ``(frame_logits, frame_style, pooled_acts)``.

        ``pooled_acts`` holds ``n_conv + 1`` matrices of shape ``(B, width)``:
        the time-averaged output of each conv layer, then of the bottleneck.
        """
        mel, lengths, unbatched = _batchify(mel, lengths)
        mask = length_mask(lengths, mel.shape[1])
        h = mel
        acts = []
        for conv in self.convs:
            h = torch.tanh(conv(self._extend(h, lengths))).transpose(1, 2)
            acts.append(masked_mean(h, mask))
        style = torch.tanh(self.bottleneck(h))
        acts.append(masked_mean(style, mask))
        logits = self.head(style)
        if unbatched:
            return logits[0], style[0], [a[0] for a in acts]
        return logits, style, acts


def sed_forward(model: ToySED, mel, lengths=None):
    return model(mel, lengths)


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), half, dtype=DTYPE))
    ang = t.to(DTYPE)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ToyScoreNet(nn.Module):
    """Per-frame score network.

    The raw head output is divided by ``sqrt(lam(t))``, so the head learns a
    unit-scale noise estimate while the module returns a score.
    """

    def __init__(
        self,
        n_mels: int = 16,
        d_style: int = 32,
        hidden: int = 64,
        t_dim: int = 16,
        n_blocks: int = 2,
        schedule: Optional[NoiseSchedule] = None,
    ):
        super().__init__()
        self.config = dict(n_mels=n_mels, d_style=d_style, hidden=hidden, t_dim=t_dim, n_blocks=n_blocks)
        self.schedule = schedule or NoiseSchedule()
        self.t_dim = t_dim
        self.inp = nn.Linear(2 * n_mels + d_style + t_dim, hidden, dtype=DTYPE)
        self.blocks = nn.ModuleList(nn.Linear(hidden, hidden, dtype=DTYPE) for _ in range(n_blocks))
        self.head = nn.Linear(hidden, n_mels, dtype=DTYPE)

    def forward(self, x_t, mu, t, z_s):
        x_t = torch.as_tensor(x_t, dtype=DTYPE)
        unbatched = x_t.ndim == 2
        if unbatched:
            x_t, mu, z_s = x_t[None], mu[None], z_s[None]
        for name, v in (("x_t", x_t), ("mu", mu), ("z_s", z_s)):
            if torch.isnan(v).any():
                raise NumericalError(f"{name} contains NaN")
        if mu.shape != x_t.shape or z_s.shape[:2] != x_t.shape[:2]:
            raise ShapeError(f"shape mismatch: x_t {tuple(x_t.shape)}, mu {tuple(mu.shape)}, z_s {tuple(z_s.shape)}")
        b, n, _ = x_t.shape
        t = torch.as_tensor(t, dtype=DTYPE)
        t_vec = t.expand(b) if t.ndim == 0 else t
        temb = time_embedding(t_vec, self.t_dim)[:, None, :].expand(b, n, self.t_dim)
        h = torch.tanh(self.inp(torch.cat([x_t, mu, z_s, temb], dim=-1)))
        for blk in self.blocks:
            h = h + torch.tanh(blk(h))
        out = self.head(h)
        lam = marginal_params(self.schedule, t_vec)[1]
        out = out / torch.sqrt(lam)[:, None, None]
        return out[0] if unbatched else out


def score_forward(model: ToyScoreNet, x_t, mu, t, z_s):
    return model(x_t, mu, t, z_s)


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def grad_check(
    model: Union[nn.Module, Sequence[torch.Tensor]],
    loss_fn: Callable[[], torch.Tensor],
    fraction: float = 0.1,
    step: float = 1e-5,
    generator: Optional[torch.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``loss_fn()`` must be deterministic.  A random ``fraction`` of the scalar
    parameters (at least one per tensor) is probed.  Relative error is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)``.
    """
    params = [p for p in (model.parameters() if isinstance(model, nn.Module) else model) if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite: {float(loss.detach())}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    generator = generator or torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            k = max(1, int(round(fraction * flat.numel())))
            idx = torch.randperm(flat.numel(), generator=generator)[:k]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = float(gflat[i])
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                worst = max(worst, err)
    return worst


# checkpoints

MODEL_KINDS = {"ToySER": ToySER, "ToySED": ToySED, "ToyScoreNet": ToyScoreNet}


def state_to_doc(module: nn.Module, kind: str, config: dict, extra: Optional[dict] = None) -> dict:
    params = {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in module.state_dict().items()
    }
    doc = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": config, "params": params}
    if extra:
        doc["extra"] = extra
    return doc


def load_state_doc(module: nn.Module, doc: dict) -> nn.Module:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {doc.get('format_version')}")
    own = module.state_dict()
    stored = doc["params"]
    if set(own) != set(stored):
        raise ShapeError(f"parameter names differ: missing {sorted(set(own) - set(stored))}, "
                         f"unexpected {sorted(set(stored) - set(own))}")
    new = {}
    for name, ref in own.items():
        shape = tuple(stored[name]["shape"])
        if shape != tuple(ref.shape):
            raise ShapeError(f"{name}: checkpoint shape {shape} != model shape {tuple(ref.shape)}")
        data = stored[name]["data"]
        if len(data) != ref.numel():
            raise ShapeError(f"{name}: expected {ref.numel()} values, found {len(data)}")
        new[name] = torch.tensor(data, dtype=ref.dtype).reshape(shape)
    module.load_state_dict(new)
    return module


def save_checkpoint(module: nn.Module, path, extra: Optional[dict] = None) -> None:
    kind = type(module).__name__
    doc = state_to_doc(module, kind, getattr(module, "config", {}), extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, schedule: Optional[NoiseSchedule] = None) -> nn.Module:
    with open(path) as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    kinds = dict(MODEL_KINDS)
    if kind == "TTSModel":
        from .tts import TTSModel  # tts builds on this module

        kinds["TTSModel"] = TTSModel
    if kind not in kinds:
        raise DomainError(f"{path}: unknown model kind {kind!r}")
    kwargs = dict(doc["config"])
    if kind in ("ToyScoreNet", "TTSModel") and schedule is not None:
        kwargs["schedule"] = schedule
    return load_state_doc(kinds[kind](**kwargs), doc)
