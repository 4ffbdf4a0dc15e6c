"""Valence annotations, frame images, and the seeded synthetic stand-in dataset.

Annotation JSON layout::

    {"videos": [{"video_id": "...", "subject_id": "...",
                 "frames": [{"index": 0, "valence": -2}, ...]}]}

Frame store layout on disk: ``<root>/<video_id>/<zero-padded index>.png``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, FrameDecodeError, FrameGapError, ValidationError

VALENCE_MIN, VALENCE_MAX = -10, 10
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
INDEX_WIDTH = 6


@dataclass(frozen=True)
class ValenceTrack:
    video_id: str
    subject_id: str
    valence: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "valence", tuple(int(v) for v in self.valence))
        if not self.valence:
            raise ValidationError(f"video {self.video_id!r}: empty valence track")
        for i, v in enumerate(self.valence):
            if not VALENCE_MIN <= v <= VALENCE_MAX:
                raise ValidationError(
                    f"video {self.video_id!r} frame {i}: valence {v} outside [-10, 10]"
                )

    def __len__(self) -> int:
        return len(self.valence)


@dataclass(frozen=True)
class FrameClip:
    """A (frames, height, width, channels) window of normalized pixels."""

    video_id: str
    start_frame: int
    pixels: np.ndarray
    shape: tuple[int, int, int, int] = (5, 32, 32, 3)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != tuple(self.shape):
            raise ValidationError(f"clip shape {px.shape} != {tuple(self.shape)}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("clip pixels must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_subjects: int = 10
    videos_per_subject: int = 4
    frames_per_video: int = 20
    valence_walk_step: int = 2
    seed: int = 0
    height: int = 32
    width: int = 32
    patch_size: int = 10
    # std of additive background noise, in [0,1] pixel units
    noise_level: float = 0.05
    # added to the green channel of the valence patch; non-zero gives a shifted domain
    color_shift: float = 0.0

    def __post_init__(self):
        for name in ("num_subjects", "videos_per_subject", "frames_per_video",
                     "valence_walk_step", "height", "width", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patch_size > min(self.height, self.width):
            raise ConfigError("patch_size larger than frame")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError("noise_level must lie in [0, 1]")
        if not -1.0 <= self.color_shift <= 1.0:
            raise ConfigError("color_shift must lie in [-1, 1]")


# ---------------------------------------------------------------- annotations


def load_annotations(path: str | Path) -> list[ValenceTrack]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise ValidationError(f"{path}: expected an object with a 'videos' list")
    return [_parse_video(rec, n) for n, rec in enumerate(doc["videos"])]


def _parse_video(rec, position: int) -> ValenceTrack:
    if not isinstance(rec, dict):
        raise ValidationError(f"video record #{position} is not an object")
    video_id = rec.get("video_id")
    subject_id = rec.get("subject_id")
    frames = rec.get("frames")
    if not isinstance(video_id, str) or not isinstance(subject_id, str):
        raise ValidationError(f"video record #{position}: video_id/subject_id must be strings")
    if not isinstance(frames, list) or not frames:
        raise ValidationError(f"video {video_id!r}: 'frames' must be a non-empty list")
    by_index: dict[int, int] = {}
    for fr in frames:
        if not isinstance(fr, dict) or "index" not in fr or "valence" not in fr:
            raise ValidationError(f"video {video_id!r}: malformed frame record {fr!r}")
        idx, val = fr["index"], fr["valence"]
        if isinstance(idx, bool) or not isinstance(idx, int):
            raise ValidationError(f"video {video_id!r}: non-integer frame index {idx!r}")
        if isinstance(val, bool) or not isinstance(val, int):
            raise ValidationError(f"video {video_id!r} frame {idx}: non-integer valence {val!r}")
        if not VALENCE_MIN <= val <= VALENCE_MAX:
            raise ValidationError(
                f"video {video_id!r} frame {idx}: valence {val} outside [-10, 10]"
            )
        if idx in by_index:
            raise ValidationError(f"video {video_id!r}: duplicate frame index {idx}")
        by_index[idx] = val
    expected = range(len(by_index))
    if sorted(by_index) != list(expected):
        missing = sorted(set(expected) - set(by_index))
        raise ValidationError(
            f"video {video_id!r}: frame indices not contiguous from 0 (missing {missing})"
        )
    return ValenceTrack(video_id, subject_id, tuple(by_index[i] for i in expected))


def dump_annotations(tracks: Iterable[ValenceTrack], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "videos": [
            {
                "video_id": t.video_id,
                "subject_id": t.subject_id,
                "frames": [{"index": i, "valence": v} for i, v in enumerate(t.valence)],
            }
            for t in tracks
        ]
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# --------------------------------------------------------------------- frames


def normalize_pixels(arr: np.ndarray) -> np.ndarray:
    """Scale integer storage to [0, 1] by the dtype's maximum value."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float32) / np.float32(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def resize_frame(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a normalized (H, W, C) frame."""
    h, w = size
    if frame.shape[:2] == (h, w):
        return frame.astype(np.float32, copy=True)
    channels = [
        np.asarray(Image.fromarray(frame[..., c].astype(np.float32), mode="F")
                   .resize((w, h), Image.BILINEAR))
        for c in range(frame.shape[2])
    ]
    # bilinear weights are a convex combination; clip only float rounding
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def _frame_files(video_dir: Path) -> dict[int, Path]:
    files = {}
    for p in video_dir.iterdir():
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit():
            files[int(p.stem)] = p
    return files


def load_frames(path: str | Path, video_id: str,
                resize: tuple[int, int] = (32, 32)) -> list[np.ndarray]:
    video_dir = Path(path) / video_id
    if not video_dir.is_dir():
        raise FileNotFoundError(f"no frame directory for video {video_id!r} under {path}")
    files = _frame_files(video_dir)
    if not files:
        return []
    missing = sorted(set(range(max(files) + 1)) - set(files))
    if missing:
        raise FrameGapError(video_id, missing)
    frames = []
    for idx in range(len(files)):
        try:
            with Image.open(files[idx]) as im:
                im.load()
                arr = np.asarray(im.convert("RGB") if im.mode not in ("RGB", "I;16") else im)
        except (UnidentifiedImageError, OSError) as exc:
            raise FrameDecodeError(f"video {video_id!r} frame {idx}: cannot decode {files[idx]}") from exc
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        frames.append(resize_frame(normalize_pixels(arr), resize))
    return frames


class InMemoryFrameStore:
    """video_id -> uint8 array (frames, H, W, 3)."""

    def __init__(self, videos: Mapping[str, np.ndarray] | None = None):
        self._videos = {k: np.asarray(v, dtype=np.uint8) for k, v in (videos or {}).items()}

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._videos

    def video_ids(self) -> list[str]:
        return sorted(self._videos)

    def raw(self, video_id: str) -> np.ndarray:
        return self._videos[video_id]

    def frames(self, video_id: str) -> np.ndarray:
        return normalize_pixels(self._videos[video_id])

    def write(self, root: str | Path) -> Path:
        root = Path(root)
        for vid, arr in self._videos.items():
            d = root / vid
            d.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(arr):
                Image.fromarray(frame, mode="RGB").save(d / f"{i:0{INDEX_WIDTH}d}.png")
        return root


class DirectoryFrameStore:
    """Lazily decoded frame directories with a per-video cache."""

    def __init__(self, root: str | Path, resize: tuple[int, int] = (32, 32)):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"frame directory not found: {self.root}")
        self.resize = tuple(resize)
        self._cache: dict[str, np.ndarray] = {}

    def __contains__(self, video_id: str) -> bool:
        return (self.root / video_id).is_dir()

    def video_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def frames(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            self._cache[video_id] = np.stack(load_frames(self.root, video_id, self.resize))
        return self._cache[video_id]


# ------------------------------------------------------------------ synthetic


def _rng(*key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def valence_walk(spec: SyntheticDatasetSpec, video_id: str) -> tuple[int, ...]:
    rng = _rng("walk", spec.seed, video_id)
    v = int(rng.integers(VALENCE_MIN, VALENCE_MAX + 1))
    out = [v]
    for _ in range(spec.frames_per_video - 1):
        step = int(rng.integers(-spec.valence_walk_step, spec.valence_walk_step + 1))
        v = int(np.clip(v + step, VALENCE_MIN, VALENCE_MAX))
        out.append(v)
    return tuple(out)


def render_frame(spec: SyntheticDatasetSpec, video_id: str, frame_index: int,
                 valence: int) -> np.ndarray:
    """uint8 (H, W, 3) frame: gray noisy background plus a valence-coded patch.

    The patch's red/blue balance and horizontal position are both linear in
    valence, so either cue alone identifies the value.
    """
    h, w, p = spec.height, spec.width, spec.patch_size
    rng = _rng("frame", spec.seed, video_id, frame_index)
    img = 0.35 + spec.noise_level * rng.standard_normal((h, w, 3))
    t = (valence - VALENCE_MIN) / (VALENCE_MAX - VALENCE_MIN)
    color = np.array([t, 0.15 + spec.color_shift, 1.0 - t])
    col = int(round(t * (w - p)))
    row = (h - p) // 2
    img[row:row + p, col:col + p, :] = color
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticDatasetSpec) -> tuple[list[ValenceTrack], InMemoryFrameStore]:
    tracks, videos = [], {}
    for i in range(spec.num_subjects * spec.videos_per_subject):
        video_id = f"vid{i:04d}"
        subject_id = f"subj{i % spec.num_subjects:03d}"
        valence = valence_walk(spec, video_id)
        tracks.append(ValenceTrack(video_id, subject_id, valence))
        videos[video_id] = np.stack(
            [render_frame(spec, video_id, j, v) for j, v in enumerate(valence)]
        )
    return tracks, InMemoryFrameStore(videos)


def write_dataset(root: str | Path, tracks: list[ValenceTrack], store: InMemoryFrameStore,
                  spec: SyntheticDatasetSpec | None = None) -> Path:
    """Write ``annotations.json``, ``frames/`` and a ``dataset.json`` manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dump_annotations(tracks, root / "annotations.json")
    store.write(root / "frames")
    manifest = {
        "annotations": "annotations.json",
        "frames": "frames",
        "num_videos": len(tracks),
        "num_subjects": len({t.subject_id for t in tracks}),
        "synthetic_spec": asdict(spec) if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root
