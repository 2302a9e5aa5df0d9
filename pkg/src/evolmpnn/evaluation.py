"""Metrics, mutation-count diagnostics, distortion, and the ridge baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import ALPHABET, Family, Graph, SplitAssignment, pairwise_hamming
from .evolution import anchor_count, sample_anchor_sets, AnchorPolicy
from .model import ModelConfig, ModelParams, forward


def rank_average(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(pred, target) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("correlation undefined for constant input")
    rx, ry = rank_average(x), rank_average(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


@dataclass
class Metrics:
    spearman: float | None
    mse: float
    by_mutation_count: dict[str, dict] | None = None
    runtime_s: float = 0.0

    def to_json(self, include_runtime: bool = True) -> dict:
        doc = {
            "spearman": self.spearman,
            "mse": self.mse,
            "by_mutation_count": self.by_mutation_count,
        }
        if include_runtime:
            doc["runtime_s"] = round(self.runtime_s, 6)
        return doc


def predict(
    family: Family,
    params: ModelParams,
    config: ModelConfig,
    *,
    rows=None,
    train_ids=None,
    graph: Graph | None = None,
    protein_feats: np.ndarray | None = None,
    residue_feats: np.ndarray | None = None,
) -> np.ndarray:
    """De-standardized model predictions for the requested rows."""
    pred = forward(
        family,
        params,
        config,
        rows=rows,
        train_ids=train_ids,
        anchor_draw=0,
        graph=graph,
        protein_feats=protein_feats,
        residue_feats=residue_feats,
    )
    mu = params.buffers.get("target_mean", np.zeros(config.theta))
    sigma = params.buffers.get("target_std", np.ones(config.theta))
    return pred.y_hat * sigma + mu


DEFAULT_GROUP_EDGES = (1, 3, 5, 8)


def group_by_mutation_count(
    counts: np.ndarray, edges=DEFAULT_GROUP_EDGES
) -> dict[str, np.ndarray]:
    """Bucket indices by mutation count into [e0,e1), ..., [elast, inf)."""
    edges = sorted(edges)
    groups: dict[str, np.ndarray] = {}
    for g, lo in enumerate(edges):
        if g + 1 < len(edges):
            hi = edges[g + 1]
            label = f"{lo}" if hi == lo + 1 else f"{lo}-{hi - 1}"
            mask = (counts >= lo) & (counts < hi)
        else:
            label = f"{lo}+"
            mask = counts >= lo
        groups[label] = np.flatnonzero(mask)
    return groups


def eval_by_mutation_count(
    predictions: np.ndarray,
    targets: np.ndarray,
    counts: np.ndarray,
    edges=DEFAULT_GROUP_EDGES,
) -> dict[str, dict]:
    """Per-group Spearman; groups too small or constant report rho as None."""
    out: dict[str, dict] = {}
    for label, idx in group_by_mutation_count(counts, edges).items():
        entry: dict = {"n": int(idx.size)}
        if idx.size >= 2:
            try:
                entry["rho"] = spearman(predictions[idx], targets[idx])
            except ValueError:
                entry["rho"] = None
        else:
            entry["rho"] = None
        out[label] = entry
    return out


def evaluate(
    family: Family,
    split: SplitAssignment,
    params: ModelParams,
    config: ModelConfig,
    tag: str = "test",
    *,
    group_edges=None,
    graph: Graph | None = None,
    protein_feats: np.ndarray | None = None,
    residue_feats: np.ndarray | None = None,
) -> Metrics:
    """Model metrics on one split tag, on the raw target scale."""
    rows = split.rows(family, tag)
    if not rows:
        raise ValueError(f"split tag {tag!r} selects no rows")
    train_ids = [family.ids[i] for i in split.rows(family, "train")]
    started = time.perf_counter()
    preds = predict(
        family,
        params,
        config,
        rows=rows,
        train_ids=train_ids,
        graph=graph,
        protein_feats=protein_feats,
        residue_feats=residue_feats,
    )[:, 0]
    runtime = time.perf_counter() - started
    targets = family.targets[rows, 0]
    try:
        rho = spearman(preds, targets)
    except ValueError:
        rho = None
    mse = float(np.mean((preds - targets) ** 2))
    groups = None
    if group_edges is not None:
        counts = family.mutation_counts()[rows]
        groups = eval_by_mutation_count(preds, targets, counts, group_edges)
    return Metrics(spearman=rho, mse=mse, by_mutation_count=groups, runtime_s=runtime)


# ---------------------------------------------------------------------------
# Distortion diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DistortionReport:
    alpha: float
    pairs: int
    metric: str

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha if np.isfinite(self.alpha) else "inf",
            "pairs": self.pairs,
            "metric": self.metric,
        }


def distortion(
    embedded: np.ndarray,
    family: Family | None = None,
    *,
    base_matrix: np.ndarray | None = None,
    p: float = 2.0,
    metric: str = "hamming",
) -> DistortionReport:
    """Scale-optimal distortion of an embedding against a base metric.

    alpha is the product of the worst expansion and the worst contraction
    over all pairs with positive base distance, which makes the measure
    invariant to a global rescaling of the embedding. A zero embedded
    distance for a separated pair reports alpha as infinity.
    """
    emb = np.atleast_2d(np.asarray(embedded, dtype=np.float64))
    if family is not None:
        base = pairwise_hamming(family.encoded).astype(np.float64)
    elif base_matrix is not None:
        base = np.asarray(base_matrix, dtype=np.float64)
        metric = metric if metric != "hamming" else "precomputed"
    else:
        raise ValueError("distortion needs a family or a base matrix")
    m = base.shape[0]
    if emb.shape[0] != m:
        raise ValueError("embedding rows must match the metric space size")
    diffs = np.abs(emb[:, None, :] - emb[None, :, :])
    emb_dist = (diffs**p).sum(axis=2) ** (1.0 / p)
    iu, ju = np.triu_indices(m, k=1)
    keep = base[iu, ju] > 0
    f_base = base[iu, ju][keep]
    f_emb = emb_dist[iu, ju][keep]
    n_pairs = int(keep.sum())
    if n_pairs == 0:
        raise ValueError("no separated pairs to measure")
    if np.any(f_emb == 0):
        return DistortionReport(alpha=float("inf"), pairs=n_pairs, metric=metric)
    expansion = float(np.max(f_emb / f_base))
    contraction = float(np.max(f_base / f_emb))
    return DistortionReport(alpha=expansion * contraction, pairs=n_pairs, metric=metric)


def bourgain_embedding(
    base_matrix: np.ndarray, k: int | None = None, seed: int = 0
) -> np.ndarray:
    """Reference landmark embedding: min distance to each sampled set, over k.

    Uses the same cycling Bernoulli sampler as the evolution layers, so the
    anchor-count policy and set statistics are shared.
    """
    base = np.asarray(base_matrix, dtype=np.float64)
    m = base.shape[0]
    ids = [str(i) for i in range(m)]
    k = k if k is not None else anchor_count(m)
    sets = sample_anchor_sets(
        ids, AnchorPolicy(k=k, seed=seed), layer_index=0, fallback_id="0"
    )
    out = np.empty((m, k), dtype=np.float64)
    for j, s in enumerate(sets):
        members = [int(rid) for rid in s.member_ids]
        out[:, j] = base[:, members].min(axis=1) / k
    return out


# ---------------------------------------------------------------------------
# Linear one-hot baseline
# ---------------------------------------------------------------------------


def onehot_features(family: Family) -> np.ndarray:
    """Flattened one-hot sequence features, M x (N * 20)."""
    m, n = family.encoded.shape
    out = np.zeros((m, n * len(ALPHABET)), dtype=np.float64)
    cols = family.encoded.astype(np.int64) + np.arange(n) * len(ALPHABET)
    out[np.arange(m)[:, None], cols] = 1.0
    return out


def linear_baseline(
    family: Family, split: SplitAssignment, l2: float = 1e-3, tag: str = "test"
) -> Metrics:
    """Closed-form ridge regression on one-hot features, evaluated like the model."""
    x = onehot_features(family)
    train_rows = split.rows(family, "train")
    eval_rows = split.rows(family, tag)
    if not eval_rows:
        raise ValueError(f"split tag {tag!r} selects no rows")
    y = family.targets[:, 0]
    y_mean = y[train_rows].mean()
    started = time.perf_counter()
    xt = x[train_rows]
    gram = xt.T @ xt + l2 * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, xt.T @ (y[train_rows] - y_mean))
    preds = x[eval_rows] @ weights + y_mean
    runtime = time.perf_counter() - started
    targets = y[eval_rows]
    try:
        rho = spearman(preds, targets)
    except ValueError:
        rho = None
    return Metrics(
        spearman=rho,
        mse=float(np.mean((preds - targets) ** 2)),
        runtime_s=runtime,
    )
