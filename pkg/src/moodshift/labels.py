"""Mood and emotion-change labels for overlapping fixed-length chunks."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ValidationError
from .ingest import VALENCE_MAX, VALENCE_MIN, ValenceTrack

MOOD_CLASSES = (-1, 0, 1)


class ShortTrackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ChunkingConfig:
    window_k: int = 5
    stride: int = 1

    def __post_init__(self):
        if self.window_k < 2:
            raise ConfigError(f"window_k must be >= 2, got {self.window_k}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class LabeledChunk:
    video_id: str
    subject_id: str
    start_frame: int
    mood_label: int
    # None for external corpora that only carry mood labels
    delta_label: int | None = None

    def __post_init__(self):
        if self.mood_label not in MOOD_CLASSES:
            raise ValidationError(f"mood label {self.mood_label!r} not in {{-1, 0, 1}}")
        if self.delta_label is not None and self.delta_label not in MOOD_CLASSES:
            raise ValidationError(f"delta label {self.delta_label!r} not in {{-1, 0, 1}}")
        if self.start_frame < 0:
            raise ValidationError("start_frame must be non-negative")


def _check_valence(v: int) -> None:
    if not VALENCE_MIN <= v <= VALENCE_MAX:
        raise ValidationError(f"valence {v} outside [-10, 10]")


def mood_of_valence(v: int) -> int:
    _check_valence(v)
    if v > 3:
        return 1
    if v < -3:
        return -1
    return 0


def chunk_mood_label(per_frame_moods: Sequence[int]) -> int:
    """Mode of the per-frame moods; ties go to the latest frame holding a tied label."""
    if len(per_frame_moods) == 0:
        raise ValidationError("cannot take the mode of an empty window")
    counts = Counter(per_frame_moods)
    top = max(counts.values())
    tied = {label for label, c in counts.items() if c == top}
    for label in reversed(per_frame_moods):
        if label in tied:
            return label
    raise AssertionError("unreachable")


def delta_label(valences: Sequence[int], t: int, k: int) -> int:
    """Sign of ``valences[t] - valences[t - k + 1]`` (0-based end index ``t``)."""
    if k < 2:
        raise ValidationError(f"window k must be >= 2, got {k}")
    if t - k + 1 < 0:
        raise ValidationError(f"window of {k} frames ending at {t} starts before frame 0")
    if t >= len(valences):
        raise ValidationError(f"end index {t} beyond track of length {len(valences)}")
    first, last = valences[t - k + 1], valences[t]
    _check_valence(first)
    _check_valence(last)
    diff = last - first
    return (diff > 0) - (diff < 0)


def make_chunks(track: ValenceTrack, config: ChunkingConfig = ChunkingConfig()) -> list[LabeledChunk]:
    n, k = len(track.valence), config.window_k
    if n < k:
        warnings.warn(
            f"video {track.video_id!r}: {n} frames < window {k}; no chunks emitted",
            ShortTrackWarning,
            stacklevel=2,
        )
        return []
    moods = [mood_of_valence(v) for v in track.valence]
    return [
        LabeledChunk(
            video_id=track.video_id,
            subject_id=track.subject_id,
            start_frame=s,
            mood_label=chunk_mood_label(moods[s:s + k]),
            delta_label=delta_label(track.valence, s + k - 1, k),
        )
        for s in range(0, n - k + 1, config.stride)
    ]


def chunk_dataset(tracks: Iterable[ValenceTrack],
                  config: ChunkingConfig = ChunkingConfig()) -> list[LabeledChunk]:
    out: list[LabeledChunk] = []
    for track in tracks:
        out.extend(make_chunks(track, config))
    return out


def video_mood_chunks(video_moods: dict[str, tuple[str, int]], frame_counts: dict[str, int],
                      config: ChunkingConfig = ChunkingConfig()) -> list[LabeledChunk]:
    """Chunks for corpora labelled per video (every chunk inherits the video mood).

    ``video_moods`` maps video_id to (subject_id, mood class).
    """
    out = []
    for vid in sorted(video_moods):
        subject, mood = video_moods[vid]
        n = frame_counts[vid]
        if n < config.window_k:
            warnings.warn(f"video {vid!r}: {n} frames < window; skipped", ShortTrackWarning,
                          stacklevel=2)
            continue
        out.extend(LabeledChunk(vid, subject, s, mood, None)
                   for s in range(0, n - config.window_k + 1, config.stride))
    return out


def load_video_moods(path: str | Path, mapping: dict[str, int]) -> dict[str, tuple[str, int]]:
    """Read ``{"videos": [{"video_id", "subject_id", "mood"}]}``; categories go through ``mapping``."""
    doc = json.loads(Path(path).read_text())
    out = {}
    for rec in doc["videos"]:
        category = rec["mood"]
        if category not in mapping:
            raise ValidationError(
                f"video {rec['video_id']!r}: mood category {category!r} has no mapping entry"
            )
        mood = int(mapping[category])
        if mood not in MOOD_CLASSES:
            raise ValidationError(f"mapping sends {category!r} to {mood}, not in {{-1, 0, 1}}")
        out[rec["video_id"]] = (rec["subject_id"], mood)
    return out


def write_manifest(chunks: Iterable[LabeledChunk], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for c in chunks:
            fh.write(json.dumps(asdict(c), sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[LabeledChunk]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"chunk manifest not found: {path}")
    chunks = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                chunks.append(LabeledChunk(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed chunk record") from exc
    return chunks
