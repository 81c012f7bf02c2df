"""Synthetic emotional "mel-spectrogram" corpus with a controllable domain shift.

Every frame is a sum of additive parts::

    phoneme pattern + emotion template + emotion modulation + speaker offset + noise

Each emotion owns a channel-mean template and a low-frequency temporal
modulation.  Target-domain utterances then pass through a per-channel affine
shift with extra noise.  Utterances are 1-3 contiguous emotion segments, and
phoneme durations are uniform in 2-6 frames.  Everything derives from
``CorpusSpec.seed``; utterance ``i`` of a domain uses its own sub-seed, so
generation order never changes the output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .diarization import FrameLabelSequence, SegmentList, frames_to_segments, read_segments, write_segments
from .errors import DomainError, ShapeError

MEL_MAGIC = b"EMEL"
FORMAT_VERSION = 1
EMOTIONS = ("neutral", "happy", "sad", "angry")


@dataclass(frozen=True)
class DomainShift:
    gain_range: Tuple[float, float] = (0.6, 1.4)
    bias_range: Tuple[float, float] = (-0.3, 0.3)
    noise_std: float = 0.1
    identity: bool = False


@dataclass(frozen=True)
class CorpusSpec:
    n_utterances: int = 240  # per domain
    n_mel_channels: int = 16
    frame_hop: float = 0.01
    min_frames: int = 40
    max_frames: int = 80
    n_classes: int = 4
    n_speakers: int = 4
    n_phonemes: int = 12
    noise_std: float = 0.3
    template_scale: float = 1.0
    modulation_scale: float = 0.4
    phoneme_scale: float = 0.5
    speaker_scale: float = 0.3
    source_class_prior: Optional[Tuple[float, ...]] = None
    target_class_prior: Optional[Tuple[float, ...]] = None
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def __post_init__(self):
        if self.min_frames < 8 or self.max_frames < self.min_frames:
            raise DomainError(f"need 8 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")
        if self.n_classes < 2:
            raise DomainError("need at least two emotion classes (class 0 is neutral)")
        for name in ("source_class_prior", "target_class_prior"):
            p = getattr(self, name)
            if p is not None:
                p = tuple(float(v) for v in p)
                object.__setattr__(self, name, p)
                if len(p) != self.n_classes or min(p) < 0 or abs(sum(p) - 1) > 1e-6:
                    raise DomainError(f"{name} must be a probability vector of length {self.n_classes}")
        if isinstance(self.domain_shift, dict):
            object.__setattr__(self, "domain_shift", DomainShift(**self.domain_shift))

    def prior(self, domain: str) -> np.ndarray:
        p = self.source_class_prior if domain == "source" else self.target_class_prior
        if p is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(p, dtype=float)


@dataclass
class SyntheticUtterance:
    uid: str
    mel: np.ndarray  # (n_frames, n_mel_channels), float64
    frame_labels: FrameLabelSequence
    segments: SegmentList
    phoneme_ids: List[int]
    phoneme_durations: List[int]
    speaker_id: int
    domain: str

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    def labels_array(self) -> np.ndarray:
        return np.asarray(self.frame_labels.labels, dtype=np.int64)

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(np.asarray(self.phoneme_ids), self.phoneme_durations)


@dataclass(frozen=True)
class CorpusWorld:
    """Fixed generative parameters shared by both domains."""

    templates: np.ndarray  # (C, M)
    mod_patterns: np.ndarray  # (C, M)
    mod_freqs: np.ndarray  # (C,) Hz
    phoneme_patterns: np.ndarray  # (P, M)
    speaker_offsets: np.ndarray  # (S, M)
    gains: np.ndarray  # (M,)
    bias: np.ndarray  # (M,)


def build_world(spec: CorpusSpec) -> CorpusWorld:
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    m, c = spec.n_mel_channels, spec.n_classes
    templates = rng.standard_normal((c, m)) * spec.template_scale
    mod_patterns = rng.standard_normal((c, m))
    mod_patterns /= np.linalg.norm(mod_patterns, axis=1, keepdims=True) / np.sqrt(m)
    mod_freqs = 1.5 + 2.5 * np.arange(c) / max(c - 1, 1)
    phon = rng.standard_normal((spec.n_phonemes, m)) * spec.phoneme_scale
    spk = rng.standard_normal((spec.n_speakers, m)) * spec.speaker_scale
    sh = spec.domain_shift
    if sh.identity:
        gains, bias = np.ones(m), np.zeros(m)
    else:
        gains = rng.uniform(*sh.gain_range, size=m)
        bias = rng.uniform(*sh.bias_range, size=m)
    return CorpusWorld(templates, mod_patterns, mod_freqs, phon, spk, gains, bias)


def _segment_layout(rng: np.random.Generator, n_frames: int, prior: np.ndarray) -> np.ndarray:
    n_seg = min(int(rng.integers(1, 4)), n_frames // 8)
    cuts = np.sort(rng.choice(np.arange(8, n_frames - 7), size=n_seg - 1, replace=False)) if n_seg > 1 else []
    # keep every segment at least 8 frames long
    bounds = [0]
    for cut in cuts:
        if cut - bounds[-1] >= 8 and n_frames - cut >= 8:
            bounds.append(int(cut))
    bounds.append(n_frames)
    labels = np.empty(n_frames, dtype=np.int64)
    prev = -1
    for a, b in zip(bounds[:-1], bounds[1:]):
        p = prior.copy()
        if prev >= 0:
            p[prev] = 0.0
        if p.sum() <= 0:  # single-class prior: the segment just continues
            labels[a:b] = prev
            continue
        p /= p.sum()
        cls = int(rng.choice(len(p), p=p))
        labels[a:b] = cls
        prev = cls
    return labels


def _phoneme_layout(rng: np.random.Generator, n_frames: int, n_phonemes: int):
    ids, durs = [], []
    left = n_frames
    while left > 0:
        d = min(int(rng.integers(2, 7)), left)
        ids.append(int(rng.integers(0, n_phonemes)))
        durs.append(d)
        left -= d
    return ids, durs


def generate_utterance(spec: CorpusSpec, world: CorpusWorld, domain: str, index: int) -> SyntheticUtterance:
    dom_code = 0 if domain == "source" else 1
    rng = np.random.default_rng([spec.seed, dom_code, index])
    n = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    labels = _segment_layout(rng, n, spec.prior(domain))
    ids, durs = _phoneme_layout(rng, n, spec.n_phonemes)
    speaker = int(rng.integers(0, spec.n_speakers))

    mel = world.templates[labels] + world.phoneme_patterns[np.repeat(ids, durs)] + world.speaker_offsets[speaker]
    times = np.arange(n) * spec.frame_hop
    phase = rng.uniform(0, 2 * np.pi, size=spec.n_classes)
    wave = np.sin(2 * np.pi * world.mod_freqs[labels] * times + phase[labels])
    mel = mel + spec.modulation_scale * wave[:, None] * world.mod_patterns[labels]
    mel = mel + spec.noise_std * rng.standard_normal(mel.shape)
    if domain == "target":
        mel = mel * world.gains + world.bias
        if not spec.domain_shift.identity and spec.domain_shift.noise_std > 0:
            mel = mel + spec.domain_shift.noise_std * rng.standard_normal(mel.shape)

    frames = FrameLabelSequence(tuple(int(v) for v in labels), spec.frame_hop)
    return SyntheticUtterance(
        uid=f"{domain}-{index:05d}",
        mel=np.ascontiguousarray(mel, dtype=np.float64),
        frame_labels=frames,
        segments=frames_to_segments(frames),
        phoneme_ids=ids,
        phoneme_durations=durs,
        speaker_id=speaker,
        domain=domain,
    )


def generate_corpus(spec: CorpusSpec, domains: Sequence[str] = ("source", "target")) -> List[SyntheticUtterance]:
    """All utterances for the requested domains, source first, index order within a domain."""
    world = build_world(spec)
    out = []
    for domain in domains:
        if domain not in ("source", "target"):
            raise DomainError(f"unknown domain {domain!r}")
        out.extend(generate_utterance(spec, world, domain, i) for i in range(spec.n_utterances))
    return out


def split(utts: Sequence[SyntheticUtterance], domain: str, fraction: float = 0.75):
    """Deterministic head/tail split of one domain's utterances."""
    pool = [u for u in utts if u.domain == domain]
    k = int(round(len(pool) * fraction))
    return pool[:k], pool[k:]


# persistence


def write_matrix(path, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f8")
    if mat.ndim != 2:
        raise ShapeError("only 2-D matrices are stored")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC + struct.pack("<IQQ", FORMAT_VERSION, *mat.shape))
        fh.write(mat.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4 + struct.calcsize("<IQQ"))
        if head[:4] != MEL_MAGIC:
            raise DomainError(f"{path}: not a matrix file")
        version, rows, cols = struct.unpack("<IQQ", head[4:])
        if version != FORMAT_VERSION:
            raise DomainError(f"{path}: unsupported format version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ShapeError(f"{path}: expected {rows}x{cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(np.float64)


def spec_to_dict(spec: CorpusSpec) -> dict:
    d = asdict(spec)
    return json.loads(json.dumps(d))


def spec_from_dict(d: dict) -> CorpusSpec:
    d = dict(d)
    if "domain_shift" in d:
        sh = dict(d["domain_shift"])
        for k in ("gain_range", "bias_range"):
            if k in sh:
                sh[k] = tuple(sh[k])
        d["domain_shift"] = DomainShift(**sh)
    for k in ("source_class_prior", "target_class_prior"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return CorpusSpec(**d)


def save_corpus(utts: Sequence[SyntheticUtterance], spec: CorpusSpec, directory) -> Path:
    directory = Path(directory)
    (directory / "mel").mkdir(parents=True, exist_ok=True)
    (directory / "segments").mkdir(parents=True, exist_ok=True)
    entries = []
    for u in utts:
        write_matrix(directory / "mel" / f"{u.uid}.bin", u.mel)
        write_segments(u.segments, directory / "segments" / f"{u.uid}.csv")
        entries.append(
            {
                "uid": u.uid,
                "domain": u.domain,
                "speaker_id": u.speaker_id,
                "n_frames": u.n_frames,
                "phoneme_ids": u.phoneme_ids,
                "phoneme_durations": u.phoneme_durations,
                "frame_labels": list(u.frame_labels.labels),
                "mel": f"mel/{u.uid}.bin",
                "segments": f"segments/{u.uid}.csv",
            }
        )
    manifest = {"format_version": FORMAT_VERSION, "spec": spec_to_dict(spec), "utterances": entries}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def load_corpus(directory) -> Tuple[CorpusSpec, List[SyntheticUtterance]]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DomainError(f"unsupported corpus format {manifest.get('format_version')}")
    spec = spec_from_dict(manifest["spec"])
    utts = []
    for e in manifest["utterances"]:
        mel = read_matrix(directory / e["mel"])
        if mel.shape[0] != e["n_frames"]:
            raise ShapeError(f"{e['uid']}: manifest says {e['n_frames']} frames, file has {mel.shape[0]}")
        frames = FrameLabelSequence(tuple(e["frame_labels"]), spec.frame_hop)
        segs = frames_to_segments(frames)
        on_disk = read_segments(directory / e["segments"])
        if len(on_disk.segments) != len(segs.segments) or any(
            abs(a.end - b.end) > 1e-6 or a.label != b.label for a, b in zip(on_disk.segments, segs.segments)
        ):
            raise DomainError(f"{e['uid']}: segment CSV disagrees with frame labels")
        utts.append(
            SyntheticUtterance(
                uid=e["uid"],
                mel=mel,
                frame_labels=frames,
                segments=segs,
                phoneme_ids=list(e["phoneme_ids"]),
                phoneme_durations=list(e["phoneme_durations"]),
                speaker_id=int(e["speaker_id"]),
                domain=e["domain"],
            )
        )
    return spec, utts
