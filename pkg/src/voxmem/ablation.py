"""Ablation harness: train and evaluate configuration cells over several seeds."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import VoxmemError
from .pipeline import evaluate, train

log = logging.getLogger(__name__)

# cell name -> config overrides on top of the base configuration
ABLATION_CELLS = {
    "no-memory": {"memory_enabled": False},
    "full": {},
    "no-triplet": {"triplet_enabled": False},
    "m64": {"capacity": 64},
    "m128": {"capacity": 128},
    "average": {"fusion": "average"},
    "top1": {"fusion": "top1"},
}


@dataclass
class AblationResult:
    corpus_hash: str
    split: str
    rows: list = field(default_factory=list)  # one summary per cell
    runs: list = field(default_factory=list)  # one record per (cell, seed)

    def row(self, cell):
        for r in self.rows:
            if r["cell"] == cell:
                return r
        raise KeyError(cell)


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


def run_cell(cfg, corpus, overrides, seed, split="test-occluded", with_fscore=True):
    """Train one seeded configuration and evaluate it; returns a flat record."""
    cell_cfg = cfg.replace(**overrides, model_seed=seed, train_seed=seed)
    t0 = time.perf_counter()
    result = train(cell_cfg, corpus)
    report = evaluate(cell_cfg, result.model, result.bank, corpus, split, with_fscore=with_fscore)
    summary = report.summary()
    record = {
        "seed": seed,
        "iou": summary["mean_iou"],
        "retrieval_precision": summary["mean_retrieval_precision"],
        "retrieved": summary["mean_retrieved"],
        "final_l_total": result.epochs[-1]["l_total"],
        "seconds": round(time.perf_counter() - t0, 1),
    }
    for d in cell_cfg.fscore_d:
        key = f"fscore@{d:g}"
        if f"mean_{key}" in summary:
            record[key] = summary[f"mean_{key}"]
    return record


def run_ablation(cfg, corpus, cells=None, seeds=(0, 1, 2), corpus_hash=None,
                 split="test-occluded", with_fscore=True, progress=None):
    """Every cell is trained on the same corpus with the same seeds.

    ``cells`` maps names to config overrides (default :data:`ABLATION_CELLS`).
    A failing run is recorded with its error and the harness moves on.
    """
    cells = ABLATION_CELLS if cells is None else cells
    result = AblationResult(corpus_hash or corpus.digest(), split)
    metrics = ["iou", "retrieval_precision"] + [f"fscore@{d:g}" for d in cfg.fscore_d]
    for name, overrides in cells.items():
        records = []
        for seed in seeds:
            try:
                rec = run_cell(cfg, corpus, overrides, seed, split, with_fscore)
            except (VoxmemError, ValueError, FloatingPointError) as exc:
                rec = {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}
                log.warning("cell %s seed %d failed: %s", name, seed, exc)
            rec = {"cell": name, "corpus_hash": result.corpus_hash, **rec}
            records.append(rec)
            result.runs.append(rec)
            if progress is not None:
                progress(rec)
        ok = [r for r in records if "error" not in r]
        row = {"cell": name, "overrides": dict(overrides), "seeds": list(seeds),
               "completed": len(ok), "failures": [r for r in records if "error" in r],
               "corpus_hash": result.corpus_hash}
        for key in metrics:
            row[f"{key}_mean"], row[f"{key}_sd"] = _mean_sd([r.get(key) for r in ok])
        result.rows.append(row)
    return result
