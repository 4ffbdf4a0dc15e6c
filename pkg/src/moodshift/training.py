"""Subject-independent k-fold training over hyperparameter grids."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, DivergenceError
from .labels import LabeledChunk, chunk_mood_label
from .models import (
    ARCHITECTURES,
    CnnBranchSpec,
    DistillationConfig,
    FusionSpec,
    TrainedModel,
    build_1cnn,
    build_2cnn,
    build_2cnn_mlp,
    build_tsnet,
    class_to_index,
    cross_entropy,
    parameter_checksum,
    predict_batch,
    save_checkpoint,
    tsnet_loss,
    two_branch_loss,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- dataset


@dataclass
class ChunkDataset:
    chunks: list[LabeledChunk]
    clips: torch.Tensor  # (N, C, D, H, W)
    mood: torch.Tensor  # class indices
    delta: torch.Tensor  # class indices, -100 where unknown

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def subjects(self) -> list[str]:
        return [c.subject_id for c in self.chunks]

    def subset(self, idx: Sequence[int]) -> ChunkDataset:
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return ChunkDataset([self.chunks[i] for i in idx], self.clips[t], self.mood[t], self.delta[t])

    def fingerprint(self) -> str:
        return chunk_fingerprint(self.chunks)


def chunk_fingerprint(chunks: Sequence[LabeledChunk]) -> str:
    rows = sorted(json.dumps(asdict(c), sort_keys=True) for c in chunks)
    return hashlib.sha256("\n".join(rows).encode()).hexdigest()


def build_dataset(chunks: Sequence[LabeledChunk], store, window_k: int = 5) -> ChunkDataset:
    """Stack each chunk's frames from ``store`` into one clip tensor."""
    chunks = list(chunks)
    cache: dict[str, np.ndarray] = {}
    clips = []
    for c in chunks:
        if c.video_id not in cache:
            cache[c.video_id] = store.frames(c.video_id)
        frames = cache[c.video_id]
        if c.start_frame + window_k > len(frames):
            raise DataError(
                f"chunk {c.video_id}@{c.start_frame} needs {window_k} frames; "
                f"video has {len(frames)}"
            )
        clips.append(frames[c.start_frame:c.start_frame + window_k])
    if clips:
        arr = torch.from_numpy(np.ascontiguousarray(np.stack(clips))).permute(0, 4, 1, 2, 3)
    else:
        arr = torch.zeros((0, 3, window_k, 32, 32))
    mood = torch.tensor([class_to_index(c.mood_label) for c in chunks], dtype=torch.long)
    delta = torch.tensor(
        [-100 if c.delta_label is None else class_to_index(c.delta_label) for c in chunks],
        dtype=torch.long,
    )
    return ChunkDataset(chunks, arr.contiguous().float(), mood, delta)


# ------------------------------------------------------------ hyperparameters


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 64
    dropout_rate: float = 0.5
    temperature: float | None = None
    alpha: float | None = None
    epochs: int = 50
    patience: int = 10
    t_squared: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError(f"invalid hyperparameters {self}")

    def distillation(self) -> DistillationConfig:
        if self.temperature is None or self.alpha is None:
            raise ConfigError("TS-Net needs both temperature and alpha")
        return DistillationConfig(self.temperature, self.alpha, self.t_squared)

    def tag(self) -> str:
        s = f"lr{self.learning_rate:.0e}_bs{self.batch_size}_do{self.dropout_rate:g}"
        if self.temperature is not None:
            s += f"_T{self.temperature:g}_a{self.alpha:g}"
        return s


@dataclass(frozen=True)
class HyperGrid:
    learning_rates: tuple[float, ...] = (1e-3, 1e-5)
    batch_sizes: tuple[int, ...] = (64, 128, 256)
    tsnet_batch_sizes: tuple[int, ...] = (16, 64, 128)
    dropout_rates: tuple[float, ...] = (0.4, 0.5)
    temperatures: tuple[float, ...] = (3, 5, 7)
    alphas: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    epochs: int = 50
    patience: int = 10

    def __post_init__(self):
        for name in ("learning_rates", "batch_sizes", "tsnet_batch_sizes", "dropout_rates",
                     "temperatures", "alphas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ConfigError(f"grid axis {name} is empty")

    def points(self, arch: str) -> list[HyperParams]:
        common = dict(epochs=self.epochs, patience=self.patience)
        if arch == "tsnet":
            return [
                HyperParams(lr, bs, do, float(t), float(a), **common)
                for lr, bs, do, t, a in itertools.product(
                    self.learning_rates, self.tsnet_batch_sizes, self.dropout_rates,
                    self.temperatures, self.alphas)
            ]
        return [
            HyperParams(lr, bs, do, **common)
            for lr, bs, do in itertools.product(self.learning_rates, self.batch_sizes,
                                                self.dropout_rates)
        ]


# ---------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    assignments: dict[str, int]
    n_folds: int = 5
    seed: int = 0

    def test_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f == fold}

    def train_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f != fold}

    def split(self, dataset: ChunkDataset, fold: int) -> tuple[list[int], list[int]]:
        test = self.test_subjects(fold)
        unknown = {s for s in dataset.subjects if s not in self.assignments}
        if unknown:
            raise DataError(f"subjects missing from fold plan: {sorted(unknown)}")
        train_idx = [i for i, s in enumerate(dataset.subjects) if s not in test]
        test_idx = [i for i, s in enumerate(dataset.subjects) if s in test]
        leaked = {dataset.subjects[i] for i in train_idx} & {dataset.subjects[i] for i in test_idx}
        if leaked:
            raise DataError(f"fold {fold}: subjects in both train and test: {sorted(leaked)}")
        return train_idx, test_idx

    def to_json(self) -> dict[str, Any]:
        return {"n_folds": self.n_folds, "seed": self.seed,
                "assignments": dict(sorted(self.assignments.items()))}

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> FoldPlan:
        return cls({k: int(v) for k, v in doc["assignments"].items()}, doc["n_folds"], doc["seed"])


def subject_majority_moods(chunks: Sequence[LabeledChunk]) -> dict[str, int]:
    per_subject: dict[str, list[int]] = {}
    for c in chunks:
        per_subject.setdefault(c.subject_id, []).append(c.mood_label)
    return {s: chunk_mood_label(m) for s, m in per_subject.items()}


def plan_folds(subjects: Sequence[str], folds: int = 5, seed: int = 0,
               strata: dict[str, int] | None = None) -> FoldPlan:
    """Seeded subject partition; subjects are dealt round-robin stratum by stratum.

    Dealing one continuous round-robin across the concatenated strata keeps fold
    sizes within one of each other while spreading each stratum over folds.
    """
    unique = sorted(set(subjects))
    if len(unique) < folds:
        raise DataError(f"need at least {folds} distinct subjects, got {len(unique)}")
    rng = np.random.default_rng(seed)
    strata = strata or {}
    groups: dict[Any, list[str]] = {}
    for s in unique:
        groups.setdefault(strata.get(s, 0), []).append(s)
    order: list[str] = []
    for key in sorted(groups, key=repr):
        members = groups[key]
        order.extend(members[i] for i in rng.permutation(len(members)))
    offset = int(rng.integers(folds))
    return FoldPlan({s: (i + offset) % folds for i, s in enumerate(order)}, folds, seed)


# ------------------------------------------------------------------- training


@dataclass
class FoldResult:
    fold: int
    test_accuracy: float
    train_accuracy: float
    initial_loss: float
    loss_curve: list[float]
    n_train: int
    n_test: int
    stage_curves: dict[str, list[float]] = field(default_factory=dict)
    teacher_checksum: str | None = None


@dataclass
class RunRecord:
    arch: str
    attention: str
    hyperparameters: dict[str, Any]
    seed: int
    fold_accuracies: list[float]
    mean: float = 0.0
    std: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        accs = np.asarray(self.fold_accuracies, dtype=float)
        self.mean = float(accs.mean()) if accs.size else float("nan")
        self.std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> RunRecord:
        rec = cls(doc["arch"], doc["attention"], doc["hyperparameters"], doc["seed"],
                  list(doc["fold_accuracies"]), extra=doc.get("extra", {}))
        return rec


def subseed(seed: int, *tags) -> int:
    digest = hashlib.sha256(repr((seed, *tags)).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _batches(perm: torch.Tensor, batch_size: int) -> list[torch.Tensor]:
    out = list(torch.split(perm, batch_size))
    # batch norm cannot normalize a single sample in train mode
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = torch.cat([out[-1], last])
    return out


def fit(model: torch.nn.Module, batch_loss: Callable[[torch.Tensor], torch.Tensor], n: int,
        hyper: HyperParams, seed: int) -> list[float]:
    """Adam over shuffled mini-batches with patience-based early stopping on train loss."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hyper.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    curve: list[float] = []
    best, stale = math.inf, 0
    for epoch in range(hyper.epochs):
        model.train()
        total = 0.0
        for idx in _batches(torch.randperm(n, generator=gen), hyper.batch_size):
            opt.zero_grad()
            loss = batch_loss(idx)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, float(loss))
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
        if curve[-1] < best:
            best, stale = curve[-1], 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    recalibrate_batchnorm(model, batch_loss, n, hyper.batch_size)
    model.eval()
    return curve


def recalibrate_batchnorm(model: torch.nn.Module, run: Callable[[torch.Tensor], Any],
                          n: int, batch_size: int) -> None:
    """Re-estimate running statistics of trainable batch-norm layers over the full set.

    Pooled features are small enough that their variance is close to the BN
    epsilon, so the exponential running average lags badly behind the batch
    statistics seen in training. A cumulative pass in sequential order fixes that.
    """
    model.train()
    norms = [m for m in model.modules()
             if isinstance(m, torch.nn.modules.batchnorm._BatchNorm) and m.training
             and all(p.requires_grad for p in m.parameters())]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    with torch.no_grad():
        for idx in _batches(torch.arange(n), batch_size):
            run(idx)
    for m, mom in zip(norms, saved):
        m.momentum = mom


def evaluate_loss(model, data: ChunkDataset, loss_of_logits) -> float:
    model.eval()
    with torch.no_grad():
        return float(loss_of_logits(model(data.clips), data))


def accuracy(model, data: ChunkDataset, batch: int = 512) -> float:
    if len(data) == 0:
        return float("nan")
    preds = torch.cat([predict_batch(model, data.clips[i:i + batch]).argmax(1)
                       for i in range(0, len(data), batch)])
    return float((preds == data.mood).double().mean())


def _train_branch(train: ChunkDataset, spec: CnnBranchSpec, attention: str, position: str,
                  literal: bool, hyper: HyperParams, seed: int, target: str):
    model = build_1cnn(spec, attention, position, literal, seed=seed)
    labels = getattr(train, target)

    def batch_loss(idx):
        return cross_entropy(model(train.clips[idx]), labels[idx])

    curve = fit(model, batch_loss, len(train), hyper, seed)
    model.trained = True
    return model, curve


def _train_fusion(train, spec, attention, position, literal, hyper, seed, fusion=FusionSpec()):
    curves = {}
    mood_b, curves["mood_branch"] = _train_branch(train, spec, attention, position, literal,
                                                  hyper, subseed(seed, "mood"), "mood")
    delta_b, curves["delta_branch"] = _train_branch(train, spec, attention, position, literal,
                                                    hyper, subseed(seed, "delta"), "delta")
    fusion = FusionSpec(fusion.fused_feature_width, fusion.mlp_hidden, fusion.classes,
                        hyper.dropout_rate)
    model = build_2cnn_mlp(mood_b, delta_b, fusion, seed=subseed(seed, "mlp"))

    def batch_loss(idx):
        return cross_entropy(model(train.clips[idx]), train.mood[idx])

    curves["mlp"] = fit(model, batch_loss, len(train), hyper, subseed(seed, "mlp"))
    model.trained = True
    return model, curves


def train_model(arch: str, attention: str, dataset: ChunkDataset, plan: FoldPlan, fold: int,
                hyper: HyperParams = HyperParams(), seed: int = 0, *,
                spec: CnnBranchSpec | None = None, position: str = "input",
                literal_product: bool = False) -> tuple[TrainedModel, FoldResult]:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}")
    spec = spec or CnnBranchSpec(dropout_rate=hyper.dropout_rate)
    train_idx, test_idx = plan.split(dataset, fold)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    if len(train) == 0:
        raise DataError(f"fold {fold}: empty training set")
    missing = set(range(3)) - set(train.mood.tolist())
    if missing:
        raise DataError(f"fold {fold}: mood classes {sorted(m - 1 for m in missing)} absent "
                        f"from the training fold")
    if arch in ("2cnn", "2cnn_mlp", "tsnet") and (train.delta < 0).any():
        raise DataError(f"{arch} needs delta labels on every training chunk")

    stage_curves: dict[str, list[float]] = {}
    before = None
    if arch == "1cnn":
        model = build_1cnn(spec, attention, position, literal_product, seed=seed)
        initial = evaluate_loss(model, train, lambda lg, d: cross_entropy(lg, d.mood))

        def batch_loss(idx):
            return cross_entropy(model(train.clips[idx]), train.mood[idx])

        curve = fit(model, batch_loss, len(train), hyper, seed)

    elif arch == "2cnn":
        model = build_2cnn(spec, attention, position, literal_product, seed=seed)
        model.eval()
        with torch.no_grad():
            m, d = model.forward_both(train.clips)
            initial = float(two_branch_loss(m, d, train.mood, train.delta))

        def batch_loss(idx):
            m, d = model.forward_both(train.clips[idx])
            return two_branch_loss(m, d, train.mood[idx], train.delta[idx])

        curve = fit(model, batch_loss, len(train), hyper, seed)

    elif arch == "2cnn_mlp":
        model, stage_curves = _train_fusion(train, spec, attention, position, literal_product,
                                            hyper, seed)
        curve = stage_curves["mlp"]
        initial = float("nan")

    else:
        cfg = hyper.distillation()
        teacher, stage_curves = _train_fusion(train, spec, attention, position, literal_product,
                                              hyper, subseed(seed, "teacher"))
        before = parameter_checksum(teacher)
        model = build_tsnet(teacher, spec, cfg, attention, position, literal_product, seed=seed)
        with torch.no_grad():
            teacher.eval()
            teacher_logits = torch.cat([teacher(train.clips[i:i + 512])
                                        for i in range(0, len(train), 512)])
        initial = evaluate_loss(model, train,
                                lambda lg, d: tsnet_loss(lg, teacher_logits, d.mood, cfg))

        def batch_loss(idx):
            return tsnet_loss(model(train.clips[idx]), teacher_logits[idx], train.mood[idx], cfg)

        curve = fit(model, batch_loss, len(train), hyper, seed)
        if parameter_checksum(teacher) != before:
            raise RuntimeError("teacher parameters changed during student training")

    model.trained = True
    model.eval()
    result = FoldResult(
        fold=fold,
        test_accuracy=accuracy(model, test),
        train_accuracy=accuracy(model, train),
        initial_loss=initial,
        loss_curve=curve,
        n_train=len(train),
        n_test=len(test),
        stage_curves=stage_curves,
        teacher_checksum=before,
    )
    meta = {
        "seed": seed,
        "fold": fold,
        "hyperparameters": asdict(hyper),
        "data_fingerprint": train.fingerprint(),
    }
    return TrainedModel(arch, attention, model, meta), result


# ----------------------------------------------------------------------- grid


def _run_one(args):
    arch, attention, dataset, plan, fold, hyper, seed, kw = args
    return train_model(arch, attention, dataset, plan, fold, hyper, seed, **kw)


def run_grid(arch: str, attention: str, dataset: ChunkDataset, grid: HyperGrid, plan: FoldPlan,
             seed: int = 0, out_dir: str | Path | None = None, workers: int = 1,
             **model_kw) -> tuple[RunRecord, list[RunRecord]]:
    """Train every grid point on every fold; pick the best mean fold accuracy.

    Ties go to the lower learning rate, then the smaller batch size.
    """
    points = grid.points(arch)
    jobs = [(arch, attention, dataset, plan, f, hp, seed, model_kw)
            for hp in points for f in range(plan.n_folds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]

    run_root = Path(out_dir) / f"{arch}_{attention}" if out_dir is not None else None
    records = []
    for p_i, hp in enumerate(points):
        chunk = outputs[p_i * plan.n_folds:(p_i + 1) * plan.n_folds]
        rec = RunRecord(arch, attention, asdict(hp), seed,
                        [r.test_accuracy for _, r in chunk],
                        extra={"train_accuracies": [r.train_accuracy for _, r in chunk],
                               "gridpoint": hp.tag(), **model_kw})
        records.append(rec)
        if run_root is not None:
            gp_dir = run_root / hp.tag()
            for model, result in chunk:
                fdir = gp_dir / f"fold{result.fold}"
                save_checkpoint(model, fdir / "checkpoint")
                (fdir / "metrics.json").write_text(
                    json.dumps(asdict(result), indent=2, sort_keys=True) + "\n")
            (gp_dir / "run.json").write_text(json.dumps(rec.to_json(), indent=2, sort_keys=True) + "\n")

    order = sorted(range(len(points)),
                   key=lambda i: (-records[i].mean, points[i].learning_rate,
                                  points[i].batch_size, i))
    best = records[order[0]]
    if run_root is not None:
        (run_root / "folds.json").write_text(json.dumps(plan.to_json(), indent=2) + "\n")
        (run_root / "best.json").write_text(
            json.dumps({"best": best.to_json(), "records": [r.to_json() for r in records]},
                       indent=2, sort_keys=True) + "\n")
    return best, records
