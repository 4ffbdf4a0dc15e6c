"""``moodshift`` command line: synth, prepare, train, eval, explain, compare.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence.
Failures also print one JSON error record on stderr.

Environment: ``MOODSHIFT_OUTPUT_ROOT`` (default output root),
``MOODSHIFT_WORKERS`` (parallel fold/grid workers).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import yaml

from .attention import ATTENTION_POSITIONS, ATTENTION_TAGS
from .errors import ConfigError, DataError, MoodShiftError
from .models import ARCHITECTURES, CLASS_ORDER

log = logging.getLogger("moodshift")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


def _metadata() -> dict[str, Any]:
    return {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _dump(path: Path, doc: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def output_root(flag: str | None) -> Path:
    return Path(flag or os.environ.get("MOODSHIFT_OUTPUT_ROOT", "runs"))


def worker_count(flag: int | None) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get("MOODSHIFT_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MOODSHIFT_WORKERS must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    dataset: str | None = None
    manifest: str | None = None
    arch: str = "1cnn"
    attention: str = "none"
    attention_position: str = "input"
    literal_product: bool = False
    window_k: int = 5
    stride: int = 1
    learning_rates: list[float] = field(default_factory=lambda: [1e-3])
    batch_sizes: list[int] = field(default_factory=lambda: [64])
    tsnet_batch_sizes: list[int] = field(default_factory=lambda: [64])
    dropout_rates: list[float] = field(default_factory=lambda: [0.5])
    temperatures: list[float] = field(default_factory=lambda: [5.0])
    alphas: list[float] = field(default_factory=lambda: [0.1])
    epochs: int = 50
    patience: int = 10
    folds: int = 5
    seed: int = 0
    out: str | None = None

    def validate(self) -> PipelineConfig:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.attention not in ATTENTION_TAGS:
            raise ConfigError(f"attention must be one of {ATTENTION_TAGS}, got {self.attention!r}")
        if self.attention_position not in ATTENTION_POSITIONS:
            raise ConfigError(f"attention_position must be one of {ATTENTION_POSITIONS}")
        if self.dataset is None:
            raise ConfigError("a dataset directory is required")
        if not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory not found: {self.dataset}")
        if self.manifest is not None and not Path(self.manifest).exists():
            raise ConfigError(f"chunk manifest not found: {self.manifest}")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        return self

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, Any]) -> PipelineConfig:
        """File values first, then every flag that was given (flags win)."""
        values: dict[str, Any] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            doc = yaml.safe_load(p.read_text()) or {}
            if not isinstance(doc, dict):
                raise ConfigError(f"{p}: expected a key-value mapping")
            values.update(doc)
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values).validate()


# -------------------------------------------------------------- helpers


def _dataset_paths(dataset: str | Path) -> tuple[Path, Path]:
    root = Path(dataset)
    return root / "annotations.json", root / "frames"


def _default_manifest(dataset: str | Path) -> Path:
    return Path(dataset) / "chunks.jsonl"


def _load_chunks_and_store(dataset: str, manifest: str | None, window_k: int):
    from .ingest import DirectoryFrameStore
    from .labels import read_manifest
    from .training import build_dataset

    _, frames = _dataset_paths(dataset)
    if not frames.is_dir():
        raise DataError(f"frames directory not found: {frames}")
    chunks = read_manifest(manifest or _default_manifest(dataset))
    if not chunks:
        raise DataError("chunk manifest is empty")
    return build_dataset(chunks, DirectoryFrameStore(frames), window_k)


def _resolve_gridpoint(run: Path) -> tuple[Path, Path]:
    """Accept an ``<arch>_<attention>`` directory (best grid point) or a grid-point directory."""
    if (run / "best.json").exists():
        best = json.loads((run / "best.json").read_text())["best"]
        return run / best["extra"]["gridpoint"], run
    if (run / "run.json").exists():
        return run, run.parent
    raise DataError(f"{run} is neither a run directory nor a grid-point directory")


def _fold_accuracies(source: str) -> list[float]:
    """Per-fold accuracies from a run dir, run/best/report JSON, or a comma list."""
    p = Path(source)
    if not p.exists():
        try:
            return [float(v) for v in source.split(",")]
        except ValueError as exc:
            raise DataError(f"{source!r} is not a path or comma-separated accuracies") from exc
    if p.is_dir():
        for name in ("best.json", "run.json", "report.json"):
            if (p / name).exists():
                p = p / name
                break
        else:
            raise DataError(f"no run.json/best.json/report.json in {p}")
    doc = json.loads(p.read_text())
    if "best" in doc:
        return list(doc["best"]["fold_accuracies"])
    if "fold_accuracies" in doc:
        return list(doc["fold_accuracies"])
    if "fold_chunk_accuracies" in doc:
        return list(doc["fold_chunk_accuracies"])
    if "cross_dataset" in doc:
        return list(doc["cross_dataset"]["chunk_accuracies"])
    raise DataError(f"{p}: no per-fold accuracies found")


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> dict[str, Any]:
    from .ingest import SyntheticDatasetSpec, generate_synthetic, write_dataset

    spec = SyntheticDatasetSpec(
        num_subjects=args.num_subjects, videos_per_subject=args.videos_per_subject,
        frames_per_video=args.frames_per_video, valence_walk_step=args.walk_step,
        seed=args.seed, noise_level=args.noise_level, color_shift=args.color_shift,
    )
    tracks, store = generate_synthetic(spec)
    root = write_dataset(args.out, tracks, store, spec)
    return {"dataset": str(root), "videos": len(tracks), "seed": spec.seed}


def cmd_prepare(args) -> dict[str, Any]:
    import warnings

    from .ingest import DirectoryFrameStore, load_annotations
    from .labels import (ChunkingConfig, chunk_dataset, load_video_moods, video_mood_chunks,
                         write_manifest)

    config = ChunkingConfig(args.window_k, args.stride)
    ann_default, frames_default = _dataset_paths(args.dataset) if args.dataset else (None, None)
    frames = Path(args.frames) if args.frames else frames_default
    if frames is None or not frames.is_dir():
        raise DataError(f"frames directory not found: {frames}")
    store = DirectoryFrameStore(frames)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.video_moods:
            if not args.mood_map:
                raise ConfigError("--video-moods needs --mood-map (category -> -1/0/1 table)")
            mapping = json.loads(Path(args.mood_map).read_text())
            moods = load_video_moods(args.video_moods, mapping)
            counts = {v: len(store.frames(v)) for v in moods}
            chunks = video_mood_chunks(moods, counts, config)
        else:
            ann = Path(args.annotations) if args.annotations else ann_default
            if ann is None:
                raise ConfigError("need --dataset or --annotations")
            tracks = load_annotations(ann)
            for t in tracks:
                n = len(store.frames(t.video_id))
                if n != len(t):
                    raise DataError(f"video {t.video_id!r}: {len(t)} annotated frames but {n} images")
            chunks = chunk_dataset(tracks, config)
    for w in caught:
        log.warning("%s", w.message)
    out = Path(args.out) if args.out else _default_manifest(args.dataset or frames.parent)
    write_manifest(chunks, out)
    return {"manifest": str(out), "chunks": len(chunks), "warnings": [str(w.message) for w in caught]}


def cmd_train(args) -> dict[str, Any]:
    import torch

    from .training import HyperGrid, plan_folds, run_grid, subject_majority_moods

    overrides = {
        "dataset": args.dataset, "manifest": args.manifest, "arch": args.arch,
        "attention": args.attention, "attention_position": args.attention_position,
        "literal_product": args.literal_product, "learning_rates": args.lr,
        "batch_sizes": args.batch_size, "tsnet_batch_sizes": args.tsnet_batch_size,
        "dropout_rates": args.dropout, "temperatures": args.temperature, "alphas": args.alpha,
        "epochs": args.epochs, "patience": args.patience, "folds": args.folds,
        "seed": args.seed, "out": args.out, "window_k": args.window_k,
    }
    cfg = PipelineConfig.load(args.config, overrides)
    torch.set_num_threads(1)
    dataset = _load_chunks_and_store(cfg.dataset, cfg.manifest, cfg.window_k)
    plan = plan_folds(dataset.subjects, cfg.folds, cfg.seed, subject_majority_moods(dataset.chunks))
    grid = HyperGrid(cfg.learning_rates, cfg.batch_sizes, cfg.tsnet_batch_sizes,
                     cfg.dropout_rates, cfg.temperatures, cfg.alphas, cfg.epochs, cfg.patience)
    root = output_root(cfg.out)
    best, records = run_grid(cfg.arch, cfg.attention, dataset, grid, plan, cfg.seed, root,
                             workers=worker_count(args.workers),
                             position=cfg.attention_position,
                             literal_product=cfg.literal_product)
    run_dir = root / f"{cfg.arch}_{cfg.attention}"
    _dump(run_dir / "manifest.json", {
        "config": asdict(cfg), "seed": cfg.seed, "data_fingerprint": dataset.fingerprint(),
        "best_gridpoint": best.extra["gridpoint"], "metadata": _metadata(),
    })
    return {"run": str(run_dir), "best": best.to_json(), "gridpoints": len(records)}


def cmd_eval(args) -> dict[str, Any]:
    import numpy as np
    import torch

    from .evaluation import (EvalReport, chunk_accuracy, cross_dataset_eval, group_by_video,
                             plot_reports, predict_chunks, video_accuracy, video_truths,
                             write_predictions)
    from .models import load_checkpoint
    from .training import FoldPlan

    torch.set_num_threads(1)
    gp_dir, run_dir = _resolve_gridpoint(Path(args.run))
    plan = FoldPlan.from_json(json.loads((run_dir / "folds.json").read_text()))
    dataset = _load_chunks_and_store(args.dataset, args.manifest, args.window_k)
    truths = video_truths(dataset.chunks)
    models = [load_checkpoint(gp_dir / f"fold{f}" / "checkpoint") for f in range(plan.n_folds)]
    report: dict[str, Any] = {"run": str(gp_dir), "seed": models[0].metadata.get("seed"),
                              "class_order": list(CLASS_ORDER)}
    all_preds = []
    if args.external:
        report["mode"] = "external"
        xd = cross_dataset_eval(models, dataset, truths)
        report["cross_dataset"] = xd.to_json()
        for m in models:
            all_preds.extend(predict_chunks(m, dataset))
        # each model votes on every video separately; pool their confusion matrices
        cm = np.sum([r["video"]["confusion"] for r in xd.per_model], axis=0)
        video = EvalReport("video", float(np.trace(cm) / cm.sum()), cm.tolist(), int(cm.sum()))
    else:
        report["mode"] = "heldout"
        chunk_accs, video_accs = [], []
        for f, m in enumerate(models):
            _, test_idx = plan.split(dataset, f)
            preds = predict_chunks(m, dataset.subset(test_idx))
            if not preds:
                raise DataError(f"fold {f} has no held-out chunks in this dataset")
            all_preds.extend(preds)
            chunk_accs.append(chunk_accuracy(preds).accuracy)
            video_accs.append(video_accuracy(group_by_video(preds), truths).accuracy)
        report["fold_chunk_accuracies"] = chunk_accs
        report["fold_video_accuracies"] = video_accs
        video = video_accuracy(group_by_video(all_preds), truths)
    reports = {"chunk": chunk_accuracy(all_preds), "video": video}
    report["chunk"] = reports["chunk"].to_json()
    report["video"] = reports["video"].to_json()
    report["metadata"] = _metadata()
    out = Path(args.out) if args.out else gp_dir / f"report_{report['mode']}.json"
    _dump(out, report)
    write_predictions(all_preds, out.with_suffix(".predictions.jsonl"))
    if args.plots:
        plot_reports(reports, args.plots)
    return {"report": str(out), "chunk_accuracy": report["chunk"]["accuracy"],
            "video_accuracy": report["video"]["accuracy"]}


def cmd_explain(args) -> dict[str, Any]:
    from .explain import grad_cam, render_cam
    from .ingest import DirectoryFrameStore
    from .labels import read_manifest
    from .models import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    _, frames = _dataset_paths(args.dataset)
    store = DirectoryFrameStore(frames)
    if args.video_id is not None:
        video_id, start = args.video_id, args.start_frame
    else:
        chunks = read_manifest(args.manifest or _default_manifest(args.dataset))
        if not 0 <= args.chunk_index < len(chunks):
            raise DataError(f"chunk index {args.chunk_index} outside manifest of {len(chunks)}")
        video_id, start = chunks[args.chunk_index].video_id, chunks[args.chunk_index].start_frame
    k = model.module.spec.input_shape[0]
    clip = store.frames(video_id)[start:start + k]
    if len(clip) != k:
        raise DataError(f"video {video_id!r} has no {k}-frame window at {start}")
    target = args.target if args.target is not None else int(
        CLASS_ORDER[int(model.predict(clip).argmax())])
    cam = grad_cam(model, clip, target, args.layer)
    written = render_cam(cam, clip, args.out, scale=args.scale)
    return {"out": str(args.out), "files": len(written) + 1, "target": target,
            "layer": args.layer, "zero_map": cam.zero_map}


def cmd_compare(args) -> dict[str, Any]:
    from .evaluation import compare_models

    a, b = _fold_accuracies(args.a), _fold_accuracies(args.b)
    res = compare_models(a, b)
    doc = {"a": args.a, "b": args.b, "fold_accuracies_a": a, "fold_accuracies_b": b,
           **res.to_json(), "summary": res.describe()}
    if args.out:
        _dump(Path(args.out), {**doc, "metadata": _metadata()})
    return doc


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moodshift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--num-subjects", type=int, default=10)
    s.add_argument("--videos-per-subject", type=int, default=4)
    s.add_argument("--frames-per-video", type=int, default=20)
    s.add_argument("--walk-step", type=int, default=2)
    s.add_argument("--noise-level", type=float, default=0.05)
    s.add_argument("--color-shift", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="label overlapping chunks into a JSON-lines manifest")
    s.add_argument("--dataset", help="directory holding annotations.json and frames/")
    s.add_argument("--annotations")
    s.add_argument("--frames")
    s.add_argument("--video-moods", help="per-video mood file for mood-only corpora")
    s.add_argument("--mood-map", help="JSON mapping mood category -> -1/0/1")
    s.add_argument("--window-k", type=int, default=5)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="k-fold training over a hyperparameter grid")
    s.add_argument("--config", help="YAML key-value config; flags override it")
    s.add_argument("--dataset")
    s.add_argument("--manifest")
    s.add_argument("--arch", choices=ARCHITECTURES)
    s.add_argument("--attention", choices=ATTENTION_TAGS)
    s.add_argument("--attention-position", choices=ATTENTION_POSITIONS)
    s.add_argument("--literal-product", action="store_true", default=None)
    s.add_argument("--lr", type=float, nargs="+")
    s.add_argument("--batch-size", type=int, nargs="+")
    s.add_argument("--tsnet-batch-size", type=int, nargs="+")
    s.add_argument("--dropout", type=float, nargs="+")
    s.add_argument("--temperature", type=float, nargs="+")
    s.add_argument("--alpha", type=float, nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--window-k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output root (default $MOODSHIFT_OUTPUT_ROOT or ./runs)")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="chunk/video accuracy of a trained run")
    s.add_argument("--run", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--manifest")
    s.add_argument("--window-k", type=int, default=5)
    s.add_argument("--external", action="store_true",
                   help="score every fold model on the whole dataset")
    s.add_argument("--out")
    s.add_argument("--plots", help="directory for accuracy/confusion figures")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="Grad-CAM overlays for one chunk")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--manifest")
    s.add_argument("--chunk-index", type=int, default=0)
    s.add_argument("--video-id")
    s.add_argument("--start-frame", type=int, default=0)
    s.add_argument("--target", type=int, choices=CLASS_ORDER)
    s.add_argument("--layer", default="conv1", help="conv1, conv2, conv3 or input")
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("compare", help="pooled two-sample t-test between two runs")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, MoodShiftError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (MoodShiftError, FileNotFoundError, json.JSONDecodeError) as exc:
        code = _exit_code(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
