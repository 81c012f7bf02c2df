"""Emotion segment timelines, frame-label conversion, and the EDER / ERA metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Hashable, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError

NEUTRAL = 0
TIME_TOL = 1e-9


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: Hashable


@dataclass(frozen=True)
class SegmentList:
    """Sorted, non-overlapping segments tiling ``[0, total_duration]``."""

    segments: Tuple[Segment, ...]
    total_duration: float

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(float(s[0]), float(s[1]), s[2]) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise DomainError("a segment list needs at least one segment")
        cursor = 0.0
        for s in segs:
            if abs(s.start - cursor) > TIME_TOL:
                raise DomainError(f"segments must tile the timeline: gap/overlap at {cursor} vs {s.start}")
            if not s.end > s.start:
                raise DomainError(f"empty or reversed segment {s}")
            cursor = s.end
        if abs(cursor - self.total_duration) > TIME_TOL:
            raise DomainError(f"segments end at {cursor}, total_duration is {self.total_duration}")

    @classmethod
    def from_tuples(cls, items: Iterable[Sequence], total_duration: float | None = None) -> "SegmentList":
        segs = tuple(Segment(float(a), float(b), lab) for a, b, lab in items)
        if total_duration is None:
            total_duration = segs[-1].end if segs else 0.0
        return cls(segs, float(total_duration))

    def as_tuples(self) -> List[Tuple[float, float, Hashable]]:
        return [(s.start, s.end, s.label) for s in self.segments]

    def label_at(self, t: float) -> Hashable:
        for s in self.segments:
            if s.start <= t < s.end:
                return s.label
        return self.segments[-1].label


@dataclass(frozen=True)
class FrameLabelSequence:
    labels: Tuple[Hashable, ...]
    frame_hop: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 1:
            raise DomainError("frame label sequence must be non-empty")
        if not self.frame_hop > 0:
            raise DomainError(f"frame_hop must be positive, got {self.frame_hop}")

    def __len__(self):
        return len(self.labels)


def frames_to_segments(f: FrameLabelSequence) -> SegmentList:
    """Merge maximal runs of equal labels into segments."""
    labels, hop = f.labels, f.frame_hop
    segs = []
    run_start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[run_start]:
            segs.append(Segment(run_start * hop, i * hop, labels[run_start]))
            run_start = i
    return SegmentList(tuple(segs), len(labels) * hop)


def segments_to_frames(segs: SegmentList, frame_hop: float) -> FrameLabelSequence:
    """Label each frame by the segment containing its centre."""
    n = int(round(segs.total_duration / frame_hop))
    if n < 1:
        raise DomainError("timeline shorter than one frame")
    labels = []
    j = 0
    for i in range(n):
        centre = (i + 0.5) * frame_hop
        while j < len(segs.segments) - 1 and centre >= segs.segments[j].end:
            j += 1
        labels.append(segs.segments[j].label)
    return FrameLabelSequence(tuple(labels), frame_hop)


@dataclass(frozen=True)
class EderBreakdown:
    false_alarm: float
    missed: float
    confusion: float
    total_duration: float

    @property
    def error_duration(self) -> float:
        return self.false_alarm + self.missed + self.confusion

    @property
    def rate(self) -> float:
        return self.error_duration / self.total_duration


def eder_breakdown(reference: SegmentList, hypothesis: SegmentList, neutral: Hashable = NEUTRAL) -> EderBreakdown:
    """Exact per-category error durations over the merged breakpoint timeline."""
    if abs(reference.total_duration - hypothesis.total_duration) > TIME_TOL:
        raise DomainError(
            f"duration mismatch: reference {reference.total_duration} vs hypothesis {hypothesis.total_duration}"
        )
    fa = ms = cf = 0.0
    ref, hyp = reference.segments, hypothesis.segments
    i = j = 0
    t = 0.0
    while i < len(ref) and j < len(hyp):
        end = min(ref[i].end, hyp[j].end)
        dur = end - t
        r, h = ref[i].label, hyp[j].label
        if dur > 0:
            if r == neutral and h != neutral:
                fa += dur
            elif r != neutral and h == neutral:
                ms += dur
            elif r != neutral and r != h:
                cf += dur
        t = end
        if ref[i].end <= end:
            i += 1
        if hyp[j].end <= end:
            j += 1
    return EderBreakdown(fa, ms, cf, reference.total_duration)


def eder(reference: SegmentList, hypothesis: SegmentList, neutral: Hashable = NEUTRAL) -> float:
    """Emotion diarization error rate: (false alarm + missed + confusion) / duration."""
    return eder_breakdown(reference, hypothesis, neutral).rate


def corpus_eder(pairs: Iterable[Tuple[SegmentList, SegmentList]], neutral: Hashable = NEUTRAL) -> float:
    """Duration-weighted EDER pooled over many utterances."""
    err = total = 0.0
    for ref, hyp in pairs:
        b = eder_breakdown(ref, hyp, neutral)
        err += b.error_duration
        total += b.total_duration
    if total <= 0:
        raise DomainError("no duration to score")
    return err / total


def era(reference_frames: FrameLabelSequence, reclassified_frames: FrameLabelSequence) -> float:
    """Fraction of frames whose reclassified label matches the reference."""
    if len(reference_frames) != len(reclassified_frames):
        raise ShapeError(f"length mismatch: {len(reference_frames)} vs {len(reclassified_frames)}")
    a = np.asarray(reference_frames.labels, dtype=object)
    b = np.asarray(reclassified_frames.labels, dtype=object)
    return float(np.mean(a == b))


# serialization


def _parse_label(text: str) -> Hashable:
    try:
        return int(text)
    except ValueError:
        return text


def segments_to_csv(segs: SegmentList) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["start", "end", "label"])
    for s in segs.segments:
        w.writerow([f"{s.start:.6f}", f"{s.end:.6f}", s.label])
    return buf.getvalue()


def segments_from_csv(text: str) -> SegmentList:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or set(rows[0]) != {"start", "end", "label"}:
        raise DomainError("segment CSV must have columns start,end,label")
    return SegmentList.from_tuples((float(r["start"]), float(r["end"]), _parse_label(r["label"])) for r in rows)


def segments_to_json(segs: SegmentList) -> str:
    doc = {
        "total_duration": round(segs.total_duration, 6),
        "segments": [{"start": round(s.start, 6), "end": round(s.end, 6), "label": s.label} for s in segs.segments],
    }
    return json.dumps(doc, indent=2)


def segments_from_json(text: str) -> SegmentList:
    doc = json.loads(text)
    return SegmentList.from_tuples(
        ((d["start"], d["end"], d["label"]) for d in doc["segments"]), doc.get("total_duration")
    )


def read_segments(path) -> SegmentList:
    path = str(path)
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        return segments_from_json(text)
    return segments_from_csv(text)


def write_segments(segs: SegmentList, path) -> None:
    path = str(path)
    text = segments_to_json(segs) if path.endswith(".json") else segments_to_csv(segs)
    with open(path, "w") as fh:
        fh.write(text)
