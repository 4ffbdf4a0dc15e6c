"""Accuracy of every architecture under every attention variant at one grid point.

    python scripts/attention_ablation.py --archs 1cnn 2cnn --attention none spatial sst \
        --out runs/ablation

Each cell is a full subject-independent k-fold run; the table reports mean
and sample std of held-out chunk accuracy. TS-Net cells train a teacher per
fold and are slow, so they are opt-in via ``--archs``.
"""

import argparse
import json
import logging
from pathlib import Path

import torch

from moodshift.ingest import SyntheticDatasetSpec, generate_synthetic
from moodshift.labels import chunk_dataset
from moodshift.training import (HyperGrid, build_dataset, plan_folds, run_grid,
                                subject_majority_moods)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--archs", nargs="+", default=["1cnn", "2cnn"])
    p.add_argument("--attention", nargs="+", default=["none", "spatial", "temporal", "sst", "pst"])
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--videos-per-subject", type=int, default=4)
    p.add_argument("--frames-per-video", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--temperature", type=float, default=5.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    spec = SyntheticDatasetSpec(args.subjects, args.videos_per_subject, args.frames_per_video,
                                seed=args.seed)
    tracks, store = generate_synthetic(spec)
    chunks = chunk_dataset(tracks)
    ds = build_dataset(chunks, store)
    plan = plan_folds(ds.subjects, 5, args.seed, subject_majority_moods(chunks))
    grid = HyperGrid((args.lr,), (args.batch_size,), (args.batch_size,), (0.5,),
                     (args.temperature,), (args.alpha,), epochs=args.epochs)

    table = {}
    for arch in args.archs:
        for att in args.attention:
            best, _ = run_grid(arch, att, ds, grid, plan, args.seed, args.out,
                               workers=args.workers)
            table[f"{arch}/{att}"] = {"mean": best.mean, "std": best.std,
                                      "folds": best.fold_accuracies}
            logging.info("%-10s %-9s %.3f +- %.3f", arch, att, best.mean, best.std)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    print(f"{'cell':<22}{'mean':>7}{'std':>7}")
    for cell, row in table.items():
        print(f"{cell:<22}{row['mean']:>7.3f}{row['std']:>7.3f}")


if __name__ == "__main__":
    main()
