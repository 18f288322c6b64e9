"""Dataset curation: manifest ingestion, staged filtering, intensity annotation and resampling.

Manifests are UTF-8 JSON lines, one ``ManifestEntry`` object per line. Scores
used by the filters are produced upstream; :class:`Scorers` lets callers plug
in their own (the defaults just read what the manifest already carries).
"""
from __future__ import annotations

import json
import math
import os
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import flow

MAX_INTENSITY = 20.0
MIN_SIDE = 512
STATIC_FRAMES = 16
REQUIRED = ("id", "clip_path", "source", "width", "height", "num_frames", "fps", "caption", "action_phrase")
STAGES = ("quality", "resolution", "text_overlay", "faces")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    clip_path: str
    source: str
    width: int
    height: int
    num_frames: int
    fps: float
    caption: str
    action_phrase: str
    motion_intensity: Optional[float] = None
    face_bbox: Optional[list[float]] = None
    quality_score: Optional[float] = None
    text_overlay_score: Optional[float] = None
    face_count: Optional[int] = None

    def __post_init__(self):
        for name in ("width", "height", "num_frames"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ManifestError(f"{name} must be a positive integer, got {v!r}")
        if self.motion_intensity is not None and not 0.0 <= self.motion_intensity <= MAX_INTENSITY:
            raise ManifestError(f"motion_intensity {self.motion_intensity} outside [0, {MAX_INTENSITY:g}]")
        if self.face_bbox is not None and len(self.face_bbox) != 4:
            raise ManifestError("face_bbox needs four values")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        if not isinstance(rec, dict):
            raise ManifestError("record is not an object")
        missing = [k for k in REQUIRED if k not in rec]
        if missing:
            raise ManifestError(f"missing field(s): {', '.join(missing)}")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(rec) - known)
        if extra:
            raise ManifestError(f"unknown field(s): {', '.join(extra)}")
        try:
            return cls(**rec)
        except TypeError as exc:
            raise ManifestError(str(exc)) from None


@dataclass
class ManifestErrors:
    path: str
    lines: list[tuple[int, str]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.lines)

    def format(self) -> str:
        return "\n".join(f"{self.path}:{n}: {msg}" for n, msg in self.lines)


def ingest_manifest(path: str | os.PathLike) -> tuple[list[ManifestEntry], ManifestErrors]:
    """Parse a manifest; malformed lines are reported with their 1-based line number.

    Raises ``OSError`` if the file cannot be read and ``ManifestError`` on duplicate ids.
    """
    entries: list[ManifestEntry] = []
    errors = ManifestErrors(os.fspath(path))
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = ManifestEntry.from_record(json.loads(line))
            except (json.JSONDecodeError, ManifestError) as exc:
                errors.lines.append((n, str(exc)))
                continue
            if entry.id in seen:
                raise ManifestError(f"duplicate id {entry.id!r} on lines {seen[entry.id]} and {n}")
            seen[entry.id] = n
            entries.append(entry)
    return entries, errors


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


@dataclass(frozen=True)
class Thresholds:
    q_min: float = 0.5
    o_max: float = 0.1
    min_side: int = MIN_SIDE


@dataclass
class Scorers:
    """Upstream score providers; each returns ``None`` when it has nothing to say."""

    quality: Callable[[ManifestEntry], Optional[float]] = lambda e: e.quality_score
    text_overlay: Callable[[ManifestEntry], Optional[float]] = lambda e: e.text_overlay_score
    faces: Callable[[ManifestEntry], Optional[int]] = lambda e: e.face_count


def constant_scorers(quality=1.0, text_overlay=0.0, faces=1) -> Scorers:
    return Scorers(lambda e: quality, lambda e: text_overlay, lambda e: faces)


@dataclass
class StageCount:
    input: int = 0
    rejected: int = 0
    passed: int = 0


@dataclass
class FilterReport:
    stages: dict[str, StageCount] = field(default_factory=lambda: {s: StageCount() for s in STAGES})
    reasons: dict[str, str] = field(default_factory=dict)

    def consistent(self) -> bool:
        prev = None
        for s in STAGES:
            c = self.stages[s]
            if c.input != c.rejected + c.passed or (prev is not None and c.input != prev):
                return False
            prev = c.passed
        return sum(c.rejected for c in self.stages.values()) == len(self.reasons)

    def to_dict(self) -> dict:
        return {"stages": {k: asdict(v) for k, v in self.stages.items()}, "reasons": dict(self.reasons)}

    def format(self) -> str:
        rows = [f"{s:<13}in={c.input} rejected={c.rejected} passed={c.passed}" for s, c in self.stages.items()]
        return "\n".join(rows)


def _stage_verdict(stage: str, e: ManifestEntry, th: Thresholds, sc: Scorers) -> Optional[str]:
    if stage == "resolution":
        return None if min(e.width, e.height) >= th.min_side else "resolution"
    score = getattr(sc, stage)(e)
    if score is None:
        return "unscored"
    if stage == "quality":
        ok = score >= th.q_min
    elif stage == "text_overlay":
        ok = score <= th.o_max
    else:
        ok = score == 1
    return None if ok else stage


def filter_clips(
    entries: Sequence[ManifestEntry], th: Thresholds = Thresholds(), scorers: Optional[Scorers] = None
) -> tuple[list[ManifestEntry], FilterReport]:
    """Apply the stages in order; each rejected entry records its first failing reason."""
    sc = scorers or Scorers()
    report = FilterReport()
    alive = list(entries)
    for stage in STAGES:
        count = report.stages[stage]
        count.input = len(alive)
        kept = []
        for e in alive:
            reason = _stage_verdict(stage, e, th, sc)
            if reason is None:
                kept.append(e)
            else:
                report.reasons[e.id] = reason
        count.passed = len(kept)
        count.rejected = count.input - count.passed
        alive = kept
    return alive, report


def annotate_intensity(
    entry: ManifestEntry,
    clip: np.ndarray,
    sidecar_base: Optional[str | os.PathLike] = None,
    measure: Optional[Callable] = None,
    threads: int = 1,
) -> ManifestEntry:
    """Store ``min(measured intensity, 20)``; writes the flow sidecar when a base path is given.

    ``measure`` replaces :func:`flow.video_motion_intensity` (same signature and return).
    """
    clip = np.asarray(clip)
    if clip.ndim < 3 or clip.shape[0] < 2:
        raise ValueError("annotation needs a clip with at least two frames")
    fn = measure or (lambda c: flow.video_motion_intensity(c, threads=threads))
    m, ann = fn(clip)
    if sidecar_base is not None and ann is not None:
        flow.write_sidecar(sidecar_base, ann)
    return replace(entry, motion_intensity=float(min(m, MAX_INTENSITY)))


def intensity_bin(m: float, bin_width: float) -> int:
    n_bins = math.ceil(MAX_INTENSITY / bin_width)
    return min(int(m // bin_width), n_bins - 1)


def resample_by_intensity(entries: Sequence[ManifestEntry], bin_width: float, rng_seed: int) -> list[ManifestEntry]:
    """Balance intensity bins to the median count of the occupied bins.

    Dense bins are subsampled without replacement, sparse bins keep every entry and
    draw the shortfall with replacement; drawn duplicates get ``~k`` id suffixes.
    Bins are emitted in ascending order with original entry order kept inside each.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    n_bins = math.ceil(MAX_INTENSITY / bin_width)
    bins: list[list[ManifestEntry]] = [[] for _ in range(n_bins)]
    for e in entries:
        if e.motion_intensity is None:
            raise ValueError(f"entry {e.id!r} has no motion intensity")
        bins[intensity_bin(e.motion_intensity, bin_width)].append(e)
    counts = [len(b) for b in bins if b]
    if not counts:
        raise ValueError("every intensity bin is empty")
    target = statistics.median_low(counts)
    rng = np.random.default_rng(rng_seed)
    out: list[ManifestEntry] = []
    for b in bins:
        if not b:
            continue
        if len(b) > target:
            keep = np.sort(rng.choice(len(b), size=target, replace=False))
            out.extend(b[i] for i in keep)
        else:
            out.extend(b)
            used = {e.id for e in b}
            for i in rng.integers(0, len(b), size=target - len(b)):
                base = b[int(i)].id.split("~")[0]
                k = 1
                while f"{base}~{k}" in used:
                    k += 1
                used.add(f"{base}~{k}")
                out.append(replace(b[int(i)], id=f"{base}~{k}"))
    return out


def expand_static_image(image: np.ndarray, frames: int = STATIC_FRAMES) -> tuple[np.ndarray, dict]:
    """Replicate one frame into a static clip with zero intensity and no action phrase."""
    img = np.asarray(image)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("expected a single frame")
        img = img[0]
    if img.ndim not in (2, 3):
        raise ValueError(f"expected an image, got shape {np.shape(image)}")
    clip = np.repeat(img[None], frames, axis=0)
    return clip, {"num_frames": frames, "motion_intensity": 0.0, "action_phrase": ""}
