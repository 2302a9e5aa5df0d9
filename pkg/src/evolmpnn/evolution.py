"""Anchor sampling and the evolution-encoding layers.

Anchor sets are random subsets of the training proteins; each protein
receives messages built from its residue-level difference to the set's
pooled residues, elementwise-modulated by the set's protein embedding.
Set membership is decided by a keyed hash of (seed, draw, layer, set,
protein id), so sampling is reproducible, independent of record order,
and refreshable per training step while staying frozen at evaluation.

Inclusion probabilities follow 1/2^j but cycle once j exceeds log2(M),
since deeper sets would otherwise be empty almost surely; every set that
still comes out empty falls back to the wild type.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .residue_encoder import attention_layer


@dataclass(frozen=True)
class AnchorSet:
    """One sampled landmark: set index, member ids, inclusion probability.

    ``fallback_used`` marks sets whose Bernoulli draw came out empty and
    were replaced; statistics over raw draw sizes should treat these as 0.
    """

    index: int
    member_ids: tuple[str, ...]
    inclusion_prob: float
    fallback_used: bool = False

    def __post_init__(self):
        if not self.member_ids:
            raise ValueError("anchor sets must be non-empty")
        if not 0 < self.inclusion_prob <= 1:
            raise ValueError("inclusion probability must be in (0, 1]")

    @property
    def raw_size(self) -> int:
        return 0 if self.fallback_used else len(self.member_ids)


@dataclass(frozen=True)
class AnchorPolicy:
    """How many sets to draw and how to key the hash."""

    k: int | None = None  # None: ceil(log2 M)^2
    seed: int = 0
    resample_per_layer: bool = True


def anchor_count(m_train: int) -> int:
    """Number of anchor sets for a training pool of size m_train."""
    if m_train < 1:
        raise ValueError("need at least one training protein")
    log_m = math.ceil(math.log2(m_train)) if m_train > 1 else 0
    return max(1, log_m * log_m)


def inclusion_probability(j: int, m_train: int) -> float:
    """Probability that a training protein joins set j (1-based)."""
    cycle = max(1, math.ceil(math.log2(m_train)) if m_train > 1 else 0)
    return 2.0 ** -(1 + ((j - 1) % cycle))


def _uniform01(*parts) -> float:
    digest = hashlib.blake2b(
        "|".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def sample_anchor_sets(
    train_ids,
    policy: AnchorPolicy,
    layer_index: int,
    draw: int = 0,
    fallback_id: str | None = None,
) -> list[AnchorSet]:
    """Draw the anchor sets for one evolution layer.

    Membership is keyed on protein ids, so any reordering of ``train_ids``
    yields the same sets. ``draw`` distinguishes training steps; evaluation
    uses draw 0.
    """
    ids = list(train_ids)
    if not ids:
        raise ValueError("cannot sample anchors from an empty training pool")
    m = len(ids)
    k = policy.k if policy.k is not None else anchor_count(m)
    if k < 1:
        raise ValueError("anchor count must be >= 1")
    layer_key = layer_index if policy.resample_per_layer else 0
    fallback = fallback_id if fallback_id in set(ids) else min(ids)
    sets = []
    for j in range(1, k + 1):
        p = inclusion_probability(j, m)
        members = tuple(
            sorted(
                rid
                for rid in ids
                if _uniform01(policy.seed, draw, layer_key, j, rid) < p
            )
        )
        fell_back = not members
        if fell_back:
            members = (fallback,)
        sets.append(
            AnchorSet(
                index=j, member_ids=members, inclusion_prob=p, fallback_used=fell_back
            )
        )
    return sets


def membership_matrix(
    anchor_sets: list[AnchorSet], row_of: dict[str, int], n_rows: int, dtype=np.float64
) -> np.ndarray:
    """(k, n_rows) matrix whose row j averages over set j's members."""
    mat = np.zeros((len(anchor_sets), n_rows), dtype=dtype)
    for r, s in enumerate(anchor_sets):
        for rid in s.member_ids:
            mat[r, row_of[rid]] = 1.0
        mat[r] /= len(s.member_ids)
    return mat


# ---------------------------------------------------------------------------
# Reference per-anchor operations (plain numpy, used directly and in tests)
# ---------------------------------------------------------------------------


def evolution_diff(residues_i: np.ndarray, member_residues: np.ndarray) -> np.ndarray:
    """Mean-pooled residue difference between protein i and an anchor set.

    ``residues_i`` is (N, d); ``member_residues`` is (|S|, N, d). The pooled
    difference lands in R^d.
    """
    anchor = np.asarray(member_residues).mean(axis=0)
    return (np.asarray(residues_i) - anchor).mean(axis=0)


def anchor_message(h_anchor: np.ndarray, diff: np.ndarray) -> np.ndarray:
    """Elementwise product of the anchor embedding with the difference."""
    h_anchor, diff = np.asarray(h_anchor), np.asarray(diff)
    if h_anchor.shape != diff.shape:
        raise ValueError(f"shape mismatch: {h_anchor.shape} vs {diff.shape}")
    return h_anchor * diff


# ---------------------------------------------------------------------------
# Differentiable layers
# ---------------------------------------------------------------------------


def evolmpnn_layer(
    h: ad.Tensor,
    r_bar: ad.Tensor,
    members: np.ndarray,
    w_combine: ad.Tensor,
) -> ad.Tensor:
    """Anchor-set message passing: mean message, concat, combine.

    ``members`` is the (k, M) normalized membership matrix. The mean over
    anchor messages H_j * (r_i - a_j) distributes into two rank-1 terms,
    which avoids materializing the (M, k, d) message block; tests pin this
    against the literal per-anchor loop.
    """
    member_const = ad.constant(members.astype(h.data.dtype))
    anchor_h = ad.matmul(member_const, h)
    anchor_r = ad.matmul(member_const, r_bar)
    mean_h = ad.mean_over(anchor_h, axis=0)
    mean_cross = ad.mean_over(ad.mul(anchor_h, anchor_r), axis=0)
    h_hat = ad.sub(ad.mul(r_bar, mean_h), mean_cross)
    return ad.matmul(ad.concat_last([h, h_hat]), w_combine)


def evolgnn_layer(
    h: ad.Tensor,
    r_bar: ad.Tensor,
    adjacency: np.ndarray,
    w_neighbor: ad.Tensor,
    w_gate: ad.Tensor,
    w_combine: ad.Tensor,
) -> ad.Tensor:
    """Graph message passing with residue-difference structure coefficients.

    Neighbor messages sum A_ij * (H_j * (r_i - r_j)) W_n; the self path is
    gated by sigmoid of the mean A_ij-weighted projected difference.
    Isolated nodes get a zero neighbor message and a sigmoid(0) gate.
    """
    dtype = h.data.dtype
    a = ad.constant(adjacency.astype(dtype))
    degree = (adjacency > 0).sum(axis=1).astype(dtype)
    inv_degree = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    row_weight = adjacency.sum(axis=1).astype(dtype)

    neighbor = ad.sub(ad.mul(ad.matmul(a, h), r_bar), ad.matmul(a, ad.mul(h, r_bar)))
    m_neighbor = ad.matmul(neighbor, w_neighbor)

    projected = ad.matmul(r_bar, w_gate)
    gate_sum = ad.sub(ad.mul(projected, row_weight[:, None]), ad.matmul(a, projected))
    gate = ad.sigmoid(ad.mul(gate_sum, inv_degree[:, None]))
    m_self = ad.mul(gate, h)
    return ad.matmul(ad.concat_last([m_neighbor, m_self]), w_combine)


def evolformer_layer(
    h: ad.Tensor,
    r_bar: ad.Tensor,
    params: dict[str, ad.Tensor],
    prefix: str,
    n_heads: int,
) -> ad.Tensor:
    """Protein-level attention with a bilinear residue-summary logit bias."""
    d = h.shape[-1]
    projected = ad.matmul(r_bar, params[f"{prefix}.bias_proj"])
    bias = ad.mul(ad.matmul(projected, ad.transpose_last(projected)), 1.0 / math.sqrt(d))
    return attention_layer(
        h, params, prefix, n_heads, logit_bias=bias, label=f"evolution layer {prefix}"
    )
