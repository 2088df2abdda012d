"""Bag accuracy, instance AUC from attention, inference sampling, experiment matrix."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .bagdata import BagSpec, Dataset, make_synthetic_dataset
from .gradstrat import Strategy, TrainConfig, sample_indices, train
from .model import Mode, ParamSet, forward
from .seeding import substream

log = logging.getLogger(__name__)

CSV_FIELDS = ("strategy", "alpha_pct", "infer_sample_pct", "repeat", "bag_acc", "inst_auc",
              "train_wall_s", "peak_scalars", "fwd_count", "seed")
# Appended after the required columns.
EXTRA_FIELDS = ("kind", "n_runs", "bag_acc_std", "inst_auc_std", "train_wall_s_std",
                "inst_auc_bag_avg", "best_epoch", "status")
WALL_FIELDS = ("train_wall_s", "train_wall_s_std")


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via midranks (Mann-Whitney U / (n1 * n0))."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class BagRecord:
    bag_label: int
    score: float
    attention_weights: np.ndarray
    instance_labels: np.ndarray


@dataclass
class EvalResult:
    bag_accuracy: float
    instance_auc: float | None
    instance_auc_bag_avg: float | None
    records: list[BagRecord] = field(repr=False)
    wall_s: float = 0.0
    inference_sample_percent: float = 100.0


def evaluate(params: ParamSet, bags, inference_sample_percent: float = 100.0,
             rng: np.random.Generator | None = None) -> EvalResult:
    """Infer-mode scoring with optional uniform instance subsampling per bag.

    Instance AUC pools the raw attention weights of every evaluated instance
    across all bags; the bag-averaged variant averages per-bag AUCs over the
    bags that contain both instance classes.
    """
    if not 0 < inference_sample_percent <= 100:
        raise ValueError(f"inference_sample_percent must be in (0, 100], got {inference_sample_percent}")
    if rng is None:
        rng = substream(0, "eval")
    t0 = time.perf_counter()
    records, correct = [], 0
    for bag in bags:
        X, labels = bag.instances, np.asarray(bag.instance_labels)
        if inference_sample_percent < 100:
            idx = sample_indices(len(X), inference_sample_percent, rng)
            X, labels = X[idx], labels[idx]
        res = forward(params, X, Mode.INFER)
        correct += int((res.bag_score >= 0.5) == bool(bag.bag_label))
        records.append(BagRecord(bag.bag_label, res.bag_score, res.attention_weights, labels))
    wall = time.perf_counter() - t0

    scores = np.concatenate([r.attention_weights for r in records])
    labels = np.concatenate([r.instance_labels for r in records])
    pooled = roc_auc(scores, labels) if 0 < labels.sum() < labels.size else None
    per_bag = [roc_auc(r.attention_weights, r.instance_labels) for r in records
               if 0 < r.instance_labels.sum() < r.instance_labels.size]
    return EvalResult(correct / len(records), pooled, float(np.mean(per_bag)) if per_bag else None,
                      records, wall, inference_sample_percent)


# ---------------------------------------------------------------- experiment matrix


@dataclass
class MatrixCell:
    strategy: Strategy
    alpha_pct: float


def matrix_cells(strategies: Sequence, alphas: Sequence[float]) -> list[MatrixCell]:
    """Strategy x alpha product; full-bag ignores alpha and appears once at 100.

    For sample_train the alpha value is the training sample percent.
    """
    if not strategies or not alphas:
        raise ValueError("strategy and alpha lists must be non-empty")
    cells = []
    for s, a in itertools.product(map(Strategy, strategies), alphas):
        cell = MatrixCell(s, 100.0 if s is Strategy.FULL_BAG else float(a))
        if cell not in cells:
            cells.append(cell)
    return cells


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def run_matrix(bag_spec: BagSpec, strategies: Sequence, alphas: Sequence[float],
               inference_samples: Sequence[float], repeats: int,
               base_config: TrainConfig | None = None, input_dim: int = 16,
               dataset_factory: Callable[[BagSpec], Dataset] | None = None) -> list[dict]:
    """Train every (strategy, alpha) cell per repeat, evaluate at every sampling level.

    Repeat ``r`` reseeds both the dataset and the model with ``seed + r``, so
    cells within a repeat share data and initial weights. Failed cells yield
    a row with status ``error: ...`` and the matrix continues.
    Returns raw rows followed by one aggregate row per configuration.
    """
    if not inference_samples or repeats < 1:
        raise ValueError("inference sample list must be non-empty and repeats >= 1")
    base_config = base_config or TrainConfig()
    factory = dataset_factory or (lambda spec: make_synthetic_dataset(spec, input_dim))
    cells = matrix_cells(strategies, alphas)
    raw = []
    for r in range(repeats):
        seed = bag_spec.seed + r
        dataset = factory(replace(bag_spec, seed=seed))
        for cell in cells:
            cfg = replace(base_config, seed=seed, strategy=cell.strategy,
                          alpha_percent=cell.alpha_pct if cell.strategy is Strategy.ACCUMULATE else 100.0,
                          sample_percent=cell.alpha_pct if cell.strategy is Strategy.SAMPLE_TRAIN else 100.0)
            base = {"strategy": cell.strategy.value, "alpha_pct": cell.alpha_pct, "repeat": r,
                    "seed": seed, "kind": "raw", "n_runs": 1}
            try:
                result = train(dataset, cfg)
            except Exception as exc:  # noqa: BLE001 - recorded, matrix continues
                log.warning("cell %s alpha=%s repeat=%d failed: %s", cell.strategy.value,
                            cell.alpha_pct, r, exc)
                for s in inference_samples:
                    raw.append({**base, "infer_sample_pct": float(s), "status": f"error: {exc}",
                                "bag_acc": float("nan"), "inst_auc": float("nan")})
                continue
            peak = max(h.peak_scalars for h in result.history)
            fwd = max(h.fwd_count for h in result.history)
            for s in inference_samples:
                ev = evaluate(result.best_params, dataset.test, float(s), substream(seed, "eval"))
                raw.append({**base, "infer_sample_pct": float(s),
                            "bag_acc": ev.bag_accuracy,
                            "inst_auc": float("nan") if ev.instance_auc is None else ev.instance_auc,
                            "inst_auc_bag_avg": ev.instance_auc_bag_avg,
                            "train_wall_s": result.train_wall_s, "peak_scalars": peak,
                            "fwd_count": fwd, "best_epoch": result.best_epoch, "status": "ok"})
    return raw + aggregate_rows(raw, bag_spec.seed)


def aggregate_rows(raw: list[dict], seed: int) -> list[dict]:
    out = []
    keys = []
    for row in raw:
        key = (row["strategy"], row["alpha_pct"], row["infer_sample_pct"])
        if key not in keys:
            keys.append(key)
    for key in keys:
        group = [r for r in raw if (r["strategy"], r["alpha_pct"], r["infer_sample_pct"]) == key
                 and r["status"] == "ok"]
        row = {"strategy": key[0], "alpha_pct": key[1], "infer_sample_pct": key[2],
               "repeat": "all", "seed": seed, "kind": "aggregate", "n_runs": len(group),
               "status": "ok" if group else "error"}
        if group:
            for name in ("bag_acc", "inst_auc", "train_wall_s"):
                vals = np.array([g[name] for g in group], dtype=np.float64)
                row[name] = float(vals.mean())
                row[f"{name}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            avg = [g["inst_auc_bag_avg"] for g in group if g.get("inst_auc_bag_avg") is not None]
            row["inst_auc_bag_avg"] = float(np.mean(avg)) if avg else None
            row["peak_scalars"] = max(g["peak_scalars"] for g in group)
            row["fwd_count"] = max(g["fwd_count"] for g in group)
        out.append(row)
    return out


def rows_to_csv(rows: list[dict], drop_wall: bool = False) -> str:
    cols = [c for c in CSV_FIELDS + EXTRA_FIELDS if not (drop_wall and c in WALL_FIELDS)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()
