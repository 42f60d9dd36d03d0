"""Masking-strategy x corpus-size ablation grid.

Each cell pretrains from the same seed and scores reconstruction on one shared
held-out scene set. No ordering between cells is asserted; the grid only has to
run end to end and produce a comparable table.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import replace
from pathlib import Path

from .eval import reconstruct_report
from .model import ModelConfig
from .pointcloud import CorpusSpec
from .train import TrainConfig, pretrain, procedural_corpus

STRATEGIES = ("rgb_only", "all_channels")
CORPUS_SIZES = (16, 64)
COLUMNS = ["strategy", "corpus_size", "steps", "initial_loss", "final_loss", "masked_mse",
           "copy_mse", "beats_copy", "seconds"]


def run_ablation(model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 strategies=STRATEGIES, corpus_sizes=CORPUS_SIZES, steps=100, seed=0,
                 n_heldout=8, spec: CorpusSpec | None = None, out_dir=None) -> list[dict]:
    """Pretrain one model per (strategy, corpus size) cell and score it.

    Args:
        model_cfg: base network shape; its strategy is overridden per cell.
        train_cfg: base loop settings; ``max_steps`` is set to ``steps``.
        steps: equal optimizer-step budget for every cell.
        seed: corpus, held-out and training seed.
        n_heldout: number of held-out scenes, generated from a disjoint seed.
        out_dir: if given, each cell trains under ``out_dir/<strategy>_<n>`` and the
            table is written to ``out_dir/ablation.csv``.

    Returns:
        One dict per cell, keyed by ``COLUMNS``.
    """
    model_cfg = model_cfg or ModelConfig.desk()
    train_cfg = train_cfg or TrainConfig.desk_pretrain()
    heldout = procedural_corpus(n_heldout, seed + 1_000_003, spec)
    rows = []
    for strategy, n in itertools.product(strategies, corpus_sizes):
        mcfg = replace(model_cfg, strategy=strategy)
        tcfg = replace(train_cfg, strategy=strategy, max_steps=steps, seed=seed, epochs=10**6)
        corpus = procedural_corpus(n, seed, spec)
        cell_dir = Path(out_dir) / f"{strategy}_{n}" if out_dir is not None else None
        t0 = time.perf_counter()
        res = pretrain(corpus, mcfg, tcfg, out_dir=cell_dir)
        rep = reconstruct_report(res.params, mcfg, heldout, tcfg.mask_ratio, strategy, seed)
        rows.append({
            "strategy": strategy,
            "corpus_size": n,
            "steps": res.step,
            "initial_loss": res.losses[0],
            "final_loss": res.losses[-1],
            "masked_mse": rep.masked_mse,
            "copy_mse": rep.copy_mse,
            "beats_copy": rep.fraction_beating_copy(),
            "seconds": time.perf_counter() - t0,
        })
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_table(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)


def format_table(rows) -> str:
    """Fixed-width text rendering of the ablation rows."""
    lines = [f"{'strategy':<13} {'scenes':>6} {'steps':>5} {'loss0':>8} {'loss':>8} "
             f"{'masked':>8} {'copy':>8} {'beats':>6}"]
    for r in rows:
        lines.append(f"{r['strategy']:<13} {r['corpus_size']:>6d} {r['steps']:>5d} "
                     f"{r['initial_loss']:>8.4f} {r['final_loss']:>8.4f} "
                     f"{r['masked_mse']:>8.4f} {r['copy_mse']:>8.4f} {r['beats_copy']:>6.2f}")
    return "\n".join(lines)
