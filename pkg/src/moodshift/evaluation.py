"""Chunk- and video-level accuracy, cross-dataset averaging, pooled two-sample t-tests."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from .errors import ValidationError
from .labels import LabeledChunk, chunk_mood_label
from .models import CLASS_ORDER, class_to_index, index_to_class, predict_batch


@dataclass(frozen=True)
class ChunkPrediction:
    video_id: str
    start_frame: int
    predicted: int
    probabilities: tuple[float, float, float]
    truth: int

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probabilities)
        object.__setattr__(self, "probabilities", probs)
        if len(probs) != 3 or abs(sum(probs) - 1.0) > 1e-6:
            raise ValidationError(f"probabilities {probs} do not sum to 1")
        if self.predicted not in CLASS_ORDER or self.truth not in CLASS_ORDER:
            raise ValidationError("predicted/truth must be mood classes (-1, 0, 1)")


@dataclass
class EvalReport:
    granularity: str
    accuracy: float
    confusion: list[list[int]]  # rows: truth, columns: prediction, order (-1, 0, 1)
    n_items: int

    def __post_init__(self):
        if self.granularity not in ("chunk", "video"):
            raise ValidationError(f"unknown granularity {self.granularity!r}")

    def to_json(self):
        return asdict(self)


def confusion_matrix(truths: Iterable[int], preds: Iterable[int]) -> np.ndarray:
    cm = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(truths, preds):
        cm[class_to_index(t), class_to_index(p)] += 1
    return cm


def _report(granularity: str, truths: list[int], preds: list[int]) -> EvalReport:
    cm = confusion_matrix(truths, preds)
    n = len(truths)
    return EvalReport(granularity, float(np.trace(cm)) / n, cm.tolist(), n)


def chunk_accuracy(preds: Sequence[ChunkPrediction]) -> EvalReport:
    if not preds:
        raise ValidationError("no chunk predictions to score")
    return _report("chunk", [p.truth for p in preds], [p.predicted for p in preds])


def video_label(preds: Sequence[ChunkPrediction]) -> int:
    """Majority vote over chunk predictions; ties go to the highest mean probability."""
    votes = Counter(p.predicted for p in preds)
    top = max(votes.values())
    tied = [c for c in CLASS_ORDER if votes.get(c, 0) == top]
    if len(tied) == 1:
        return tied[0]
    mean_probs = np.mean([p.probabilities for p in preds], axis=0)
    # max() keeps the first of equal maxima, i.e. the earliest class in CLASS_ORDER
    return max(tied, key=lambda c: mean_probs[class_to_index(c)])


def group_by_video(preds: Iterable[ChunkPrediction]) -> dict[str, list[ChunkPrediction]]:
    out: dict[str, list[ChunkPrediction]] = defaultdict(list)
    for p in preds:
        out[p.video_id].append(p)
    return dict(out)


def video_accuracy(preds_by_video: Mapping[str, Sequence[ChunkPrediction]],
                   truths: Mapping[str, int]) -> EvalReport:
    if not preds_by_video:
        raise ValidationError("no videos to score")
    vids = sorted(preds_by_video)
    missing = [v for v in vids if v not in truths]
    if missing:
        raise ValidationError(f"no ground-truth mood for videos {missing}")
    empty = [v for v in vids if not preds_by_video[v]]
    if empty:
        raise ValidationError(f"videos without chunk predictions: {empty}")
    return _report("video", [truths[v] for v in vids],
                   [video_label(preds_by_video[v]) for v in vids])


def video_truths(chunks: Iterable[LabeledChunk]) -> dict[str, int]:
    """Per-video mood as the mode of chunk moods (same tie rule as chunk labelling)."""
    per_video: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for c in chunks:
        per_video[c.video_id].append((c.start_frame, c.mood_label))
    return {v: chunk_mood_label([m for _, m in sorted(items)]) for v, items in per_video.items()}


def predict_chunks(model, dataset, batch: int = 512) -> list[ChunkPrediction]:
    module = getattr(model, "module", model)
    if len(dataset) == 0:
        return []
    probs = torch.cat([predict_batch(module, dataset.clips[i:i + batch])
                       for i in range(0, len(dataset), batch)]).double()
    probs = probs / probs.sum(dim=1, keepdim=True)
    out = []
    for c, p in zip(dataset.chunks, probs.numpy()):
        out.append(ChunkPrediction(c.video_id, c.start_frame, index_to_class(int(p.argmax())),
                                   tuple(p.tolist()), c.mood_label))
    return out


# -------------------------------------------------------------- cross-dataset


@dataclass
class CrossDatasetReport:
    chunk_accuracies: list[float]
    video_accuracies: list[float]
    chunk_mean: float = 0.0
    chunk_std: float = 0.0
    video_mean: float = 0.0
    video_std: float = 0.0
    per_model: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.chunk_mean, self.chunk_std = _mean_std(self.chunk_accuracies)
        self.video_mean, self.video_std = _mean_std(self.video_accuracies)

    def to_json(self):
        return asdict(self)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def cross_dataset_eval(models: Sequence, dataset, truths: Mapping[str, int] | None = None
                       ) -> CrossDatasetReport:
    """Score every fold model on the whole external set at both granularities."""
    truths = dict(truths) if truths is not None else video_truths(dataset.chunks)
    chunk_accs, video_accs, per_model = [], [], []
    for model in models:
        preds = predict_chunks(model, dataset)
        c_rep = chunk_accuracy(preds)
        v_rep = video_accuracy(group_by_video(preds), truths)
        chunk_accs.append(c_rep.accuracy)
        video_accs.append(v_rep.accuracy)
        per_model.append({"chunk": c_rep.to_json(), "video": v_rep.to_json()})
    return CrossDatasetReport(chunk_accs, video_accs, per_model=per_model)


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_value: float
    degenerate: bool = False
    mean_a: float = 0.0
    mean_b: float = 0.0

    def to_json(self):
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in asdict(self).items()} | {"t_infinite": math.isinf(self.t)}

    def describe(self) -> str:
        return f"t({self.df})={self.t:.2f}, p={self.p_value:.3g}"


def compare_models(fold_accs_a: Sequence[float], fold_accs_b: Sequence[float]) -> TTestResult:
    """Student two-sample t-test with pooled variance; two-sided p-value.

    Zero pooled variance gives t = 0 (p = 1) for equal means and an infinite t
    flagged as ``degenerate`` otherwise.
    """
    a = np.asarray(fold_accs_a, dtype=float)
    b = np.asarray(fold_accs_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValidationError("each sample needs at least two fold accuracies")
    na, nb = a.size, b.size
    df = na + nb - 2
    ma, mb = a.mean(), b.mean()
    pooled = (((a - ma) ** 2).sum() + ((b - mb) ** 2).sum()) / df
    se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    diff = ma - mb
    if se == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0, False, float(ma), float(mb))
        return TTestResult(math.copysign(math.inf, diff), df, 0.0, True, float(ma), float(mb))
    t = diff / se
    p = 2.0 * stats.t.sf(abs(t), df)
    return TTestResult(float(t), df, float(min(p, 1.0)), False, float(ma), float(mb))


# ---------------------------------------------------------------------- files


def write_predictions(preds: Iterable[ChunkPrediction], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for p in preds:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")
    return path


def read_predictions(path: str | Path) -> list[ChunkPrediction]:
    with Path(path).open() as fh:
        return [ChunkPrediction(**json.loads(line)) for line in fh if line.strip()]


def plot_reports(reports: Mapping[str, EvalReport], out_dir: str | Path) -> list[Path]:
    """Accuracy bar chart plus one confusion heatmap per report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(reports)
    ax.bar(names, [reports[n].accuracy for n in names], color="#4c72b0")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy.png", dpi=100)
    plt.close(fig)
    written.append(out_dir / "accuracy.png")
    for name, rep in reports.items():
        fig, ax = plt.subplots(figsize=(3.2, 3))
        cm = np.asarray(rep.confusion)
        ax.imshow(cm, cmap="Blues")
        for i in range(3):
            for j in range(3):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center")
        ax.set_xticks(range(3), [str(c) for c in CLASS_ORDER])
        ax.set_yticks(range(3), [str(c) for c in CLASS_ORDER])
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"{name} (acc {rep.accuracy:.2f})")
        fig.tight_layout()
        path = out_dir / f"confusion_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
