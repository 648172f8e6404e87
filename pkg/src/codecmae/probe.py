"""Frozen-embedding evaluation: pooling, MLP probes, mAP, bootstrap intervals and the
normalised global score."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from itertools import product
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .frontend import FeatureSequence

log = logging.getLogger(__name__)

DEFAULT_GRID = {"hidden": (64, 256), "lr": (1e-3, 1e-4), "dropout": (0.0, 0.3)}


@dataclass(frozen=True)
class ProbeReport:
    task: str
    metric_name: str
    metric: float
    ci_low: float
    ci_high: float
    deviation: float
    normalized: float | None = None
    global_contrib: float | None = None
    selected: dict | None = None


def pool_mean(frames) -> np.ndarray:
    data = frames.data if isinstance(frames, FeatureSequence) else np.asarray(frames, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError("mean pooling needs at least one frame")
    return data.mean(axis=0)


# -- probes ------------------------------------------------------------------


class Probe(nn.Module):
    """Standardised input, optional single hidden layer (``hidden=0`` is a linear probe)."""

    def __init__(self, dim: int, n_out: int, hidden: int, dropout: float, mean: np.ndarray, scale: np.ndarray):
        super().__init__()
        self.register_buffer("mean", torch.as_tensor(mean, dtype=torch.float32))
        self.register_buffer("scale", torch.as_tensor(scale, dtype=torch.float32))
        if hidden:
            self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, n_out))
        else:
            self.net = nn.Sequential(nn.Dropout(dropout), nn.Linear(dim, n_out))

    def forward(self, x):
        return self.net((x - self.mean) / self.scale)


@dataclass
class TrainedProbe:
    model: Probe
    params: dict
    val_score: float
    multilabel: bool

    def scores(self, x: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            out = self.model(torch.as_tensor(np.asarray(x), dtype=torch.float32))
        return (out.sigmoid() if self.multilabel else out.softmax(dim=-1)).double().numpy()

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.scores(x).argmax(axis=1)


def _fit_one(x_tr, y_tr, x_va, y_va, n_out, multilabel, hidden, lr, dropout, seed, epochs, batch_size, patience):
    torch.manual_seed(seed)
    mean = x_tr.mean(axis=0)
    scale = x_tr.std(axis=0) + 1e-6
    model = Probe(x_tr.shape[1], n_out, hidden, dropout, mean, scale)
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 1.0 / np.sqrt(m.in_features), generator=gen)
            nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    xt = torch.as_tensor(x_tr, dtype=torch.float32)
    yt = torch.as_tensor(y_tr, dtype=torch.float32 if multilabel else torch.long)
    loss_fn = nn.BCEWithLogitsLoss() if multilabel else nn.CrossEntropyLoss()
    trained = TrainedProbe(model, {}, -np.inf, multilabel)
    best, best_state, stale = -np.inf, None, 0
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        model.train()
        order = rng.permutation(len(xt))
        for lo in range(0, len(order), batch_size):
            sel = torch.from_numpy(order[lo:lo + batch_size])
            opt.zero_grad()
            loss_fn(model(xt[sel]), yt[sel]).backward()
            opt.step()
        score = _score(trained.scores(x_va), y_va, multilabel)
        if score > best:
            best, best_state, stale = score, {k: v.clone() for k, v in model.state_dict().items()}, 0
        else:
            stale += 1
            if stale >= patience:
                break
    model.load_state_dict(best_state)
    trained.val_score = best
    return trained


def _score(scores: np.ndarray, y: np.ndarray, multilabel: bool) -> float:
    if multilabel:
        return mean_average_precision(scores, y)
    return float(np.mean(scores.argmax(axis=1) == y))


def train_probe(
    x_train,
    y_train,
    x_val,
    y_val,
    grid: dict | None = None,
    seed: int = 0,
    n_classes: int | None = None,
    epochs: int = 100,
    batch_size: int = 64,
    patience: int = 20,
) -> TrainedProbe:
    """Grid search over (hidden, lr, dropout); the best validation score wins, ties to the
    earliest grid point.

    Integer labels give a softmax classifier; a 2-D binary label matrix gives
    per-class sigmoid outputs scored by mAP.
    """
    grid = {**DEFAULT_GRID, **(grid or {})}
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    multilabel = y_train.ndim == 2
    if multilabel:
        n_out = y_train.shape[1]
        if np.all(y_train.sum(axis=0) == 0):
            raise ConfigError("multilabel targets have no positives")
    else:
        classes = np.unique(y_train)
        if classes.size < 2:
            raise ConfigError("probe labels contain a single class")
        n_out = int(n_classes or (int(max(y_train.max(), y_val.max(initial=0))) + 1))
    if x_train.shape[0] < (n_out if not multilabel else 2):
        raise ConfigError(f"need at least {n_out} training items, got {x_train.shape[0]}")
    best = None
    for i, (hidden, lr, dropout) in enumerate(product(grid["hidden"], grid["lr"], grid["dropout"])):
        cand = _fit_one(x_train, y_train, x_val, y_val, n_out, multilabel, int(hidden), float(lr), float(dropout),
                        seed * 1000 + i, epochs, batch_size, patience)
        cand.params = {"hidden": int(hidden), "lr": float(lr), "dropout": float(dropout)}
        log.debug("probe %s val %.4f", cand.params, cand.val_score)
        if best is None or cand.val_score > best.val_score:
            best = cand
    return best


def linear_probe_grid() -> dict:
    return {"hidden": (0,), "lr": (1e-2, 1e-3), "dropout": (0.0,)}


# -- metrics -----------------------------------------------------------------


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of the positives (stable sort by descending score)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    rel = np.asarray(labels)[order].astype(bool)
    if not rel.any():
        raise ValueError("no positives")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def mean_average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    aps = []
    for c in range(scores.shape[1]):
        if not labels[:, c].any():
            log.warning("class %d has no positives; excluded from mAP", c)
            continue
        aps.append(average_precision(scores[:, c], labels[:, c]))
    if not aps:
        raise ConfigError("no class has a positive label")
    return float(np.mean(aps))


def bootstrap_ci(
    outcomes: Sequence,
    metric: Callable[[np.ndarray], float] = np.mean,
    iters: int = 100,
    rng: np.random.Generator | None = None,
    percentiles: tuple[float, float] = (2.5, 97.5),
) -> tuple[float, float, float]:
    """Percentile bootstrap over items.

    ``outcomes`` is indexable along its first axis (e.g. per-item correctness,
    or an ``N x ...`` array that ``metric`` reduces). Returns ``(low, high,
    deviation)`` where deviation is the distance from the full-sample metric to
    the farther bound.
    """
    data = np.asarray(outcomes)
    n = data.shape[0]
    if n < 2:
        raise ConfigError("bootstrap needs at least two items")
    rng = rng if rng is not None else np.random.default_rng(0)
    point = float(metric(data))
    stats = np.array([metric(data[rng.integers(0, n, size=n)]) for _ in range(iters)], dtype=np.float64)
    low, high = (float(v) for v in np.percentile(stats, percentiles))
    return low, high, max(abs(point - low), abs(high - point))


def normalized_score(metric: float, mean: float, std: float) -> float:
    return float(np.clip((metric - mean) / std, -1.0, 1.0))


def global_score(task_metrics: dict, norm_stats: dict) -> float:
    """Mean over tasks of the z-scored metric clipped to [-1, 1]."""
    if not task_metrics:
        raise ConfigError("no task metrics given")
    vals = []
    for task, value in task_metrics.items():
        stats = norm_stats.get(task)
        if stats is None or "mean" not in stats or "std" not in stats:
            raise ConfigError(f"missing normalisation stats for task {task!r}")
        if not stats["std"] > 0:
            raise ConfigError(f"normalisation std for task {task!r} must be positive")
        vals.append(normalized_score(value, stats["mean"], stats["std"]))
    return float(np.mean(vals))


def make_report(
    task: str,
    outcomes,
    metric_fn: Callable,
    metric_name: str,
    rng: np.random.Generator,
    norm: dict | None = None,
    selected: dict | None = None,
    iters: int = 100,
) -> ProbeReport:
    outcomes = np.asarray(outcomes)
    value = float(metric_fn(outcomes))
    low, high, dev = bootstrap_ci(outcomes, metric_fn, iters, rng)
    # a skewed resample distribution can leave the point estimate outside the percentiles
    low, high = min(low, value), max(high, value)
    normalized = None if norm is None else normalized_score(value, norm["mean"], norm["std"])
    return ProbeReport(task, metric_name, value, low, high, dev, normalized, normalized, selected)


def reports_to_json(reports: list[ProbeReport], global_value: float | None) -> str:
    body = {
        "tasks": [asdict(r) for r in reports],
        "global": global_value,
        "global_display": None if global_value is None else 100.0 * global_value,
    }
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def reports_to_table(reports: list[ProbeReport], global_value: float | None) -> str:
    lines = [f"{'task':<16}{'metric':<10}{'value':>8}{'ci_low':>9}{'ci_high':>9}{'+/-':>7}{'norm':>7}"]
    for r in reports:
        norm = "" if r.normalized is None else f"{r.normalized:.3f}"
        lines.append(
            f"{r.task:<16}{r.metric_name:<10}{100 * r.metric:8.1f}{100 * r.ci_low:9.1f}{100 * r.ci_high:9.1f}"
            f"{100 * r.deviation:7.1f}{norm:>7}"
        )
    if global_value is not None:
        lines.append(f"global (raw, [-1, 1]): {global_value:.4f}   display x100: {100 * global_value:.1f}")
    return "\n".join(lines) + "\n"
