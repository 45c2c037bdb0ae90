"""Pseudo-OOD mining: entropy-gain patch selection and downward propagation.

Training needs outlier-like features without any real outlier data.  High
patches whose alignment entropy jumps relative to their containing mid patch
tend to straddle class boundaries, so each image contributes its top-K
entropy-gain high patches as pseudo-OOD features.  Each selected (fused)
high vector is then propagated to the coarser scales so every scale gets an
outlier feature:

* ``q1 = q2 + (1 / n^2) * sum_i cos(q2, u1_hat[i]) * u1_hat[i]``
* ``q0 = q1 + cos(q1, u0) * u0``

The mid-scale sum deliberately runs over all n^2 fused mid vectors with no
entropy mask; the keep-mask used for scale aggregation plays no role here.

Selection is discrete: gains and indices are computed from plain values,
treated as constants during differentiation, and recorded so a loss can be
re-evaluated with the same choices frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation
from .alignment import PredictionSet
from .hierarchy import HierarchyState, parent_indices

__all__ = [
    "PseudoOodSet",
    "entropy_gain",
    "select_top_k",
    "propagate",
    "propagate_rows",
    "mine",
]


@dataclass
class PseudoOodSet:
    """K pseudo-OOD features per scale, with their provenance.

    ``indices`` are distinct high-patch indices sorted by descending entropy
    gain (ties broken by ascending index); ``q2``/``q1``/``q0`` stack the
    per-scale pseudo features as (K, d) rows.
    """

    indices: np.ndarray    # (K,) int
    gains: np.ndarray      # (K,) float
    q2: Tensor             # (K, d)
    q1: Tensor             # (K, d)
    q0: Tensor             # (K, d)


def entropy_gain(pred: PredictionSet) -> np.ndarray:
    """Entropy gain of every high patch over its containing mid patch.

    Returns a (4 n^2,) float array of ``H(p_high[j]) - H(p_mid[parent(j)])``;
    each value lies in [-ln C, ln C].
    """
    n_sq = pred.h_mid.shape[0]
    n = int(round(n_sq ** 0.5))
    if n * n != n_sq or pred.h_high.shape[0] != 4 * n_sq:
        raise ContractViolation(
            f"inconsistent patch counts: mid {pred.h_mid.shape}, high {pred.h_high.shape}"
        )
    return pred.h_high - pred.h_mid[parent_indices(n)]


def select_top_k(gains: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest gains, descending, ties by ascending index."""
    gains = np.asarray(gains, dtype=np.float64)
    if not 1 <= k <= gains.shape[0]:
        raise ConfigError(
            f"k must lie in [1, {gains.shape[0]}], got {k}"
        )
    order = np.argsort(-gains, kind="stable")
    return order[:k].copy()


def propagate_rows(
    q2_rows: Tensor,
    u1_hat: Tensor,
    u0_row: Tensor,
    enabled: bool = True,
) -> tuple[Tensor, Tensor]:
    """Propagate (K, d) pseudo features down the hierarchy.

    Returns (q1, q0) rows.  With ``enabled=False`` (the propagation
    ablation) both lower scales reuse the high-scale features unchanged.
    """
    if not enabled:
        return q2_rows, q2_rows
    n_sq = ad.value_of(u1_hat).shape[0]
    weights = ad.cosine_columns(q2_rows, ad.transpose(u1_hat))  # (K, n^2)
    q1 = ad.add(q2_rows, ad.cdiv(ad.matmul(weights, u1_hat), float(n_sq)))
    c0 = ad.cosine_rows(q1, u0_row)
    q0 = ad.add(q1, ad.rowscale(c0, u0_row))
    return q1, q0


def propagate(q2: Tensor, u1_hat: Tensor, u0: Tensor) -> tuple[Tensor, Tensor]:
    """Propagate one pseudo-OOD vector down the hierarchy.

    Args:
        q2: (d,) selected fused high-patch vector.
        u1_hat: (n^2, d) fused mid vectors (all of them; no entropy mask).
        u0: (d,) adapted global vector.

    Returns:
        (q1, q0), both (d,).
    """
    q2v, u1v, u0v = ad.value_of(q2), ad.value_of(u1_hat), ad.value_of(u0)
    if q2v.ndim != 1 or u0v.ndim != 1 or u1v.ndim != 2 or u1v.shape[1] != q2v.shape[0]:
        raise ContractViolation(
            f"propagate expects q2 (d,), u1_hat (n^2, d), u0 (d,); got "
            f"{q2v.shape}, {u1v.shape}, {u0v.shape}"
        )
    d = q2v.shape[0]
    q1, q0 = propagate_rows(
        ad.reshape(q2, (1, d)), u1_hat, ad.reshape(u0, (1, d))
    )
    return ad.reshape(q1, (d,)), ad.reshape(q0, (d,))


def mine(
    pred: PredictionSet,
    state: HierarchyState,
    k: int,
    rng: np.random.Generator | None = None,
    random_selection: bool = False,
    propagation_enabled: bool = True,
    frozen_indices: np.ndarray | None = None,
) -> PseudoOodSet:
    """Select pseudo-OOD patches for one image and propagate them.

    ``random_selection`` replaces the entropy-gain criterion with a uniform
    draw of K distinct patches (selection ablation; requires ``rng``).
    ``frozen_indices`` replays a stored selection instead of choosing.
    """
    gains = entropy_gain(pred)
    if frozen_indices is not None:
        indices = np.asarray(frozen_indices, dtype=np.intp)
    elif random_selection:
        if rng is None:
            raise ConfigError("random patch selection requires an rng")
        if not 1 <= k <= gains.shape[0]:
            raise ConfigError(f"k must lie in [1, {gains.shape[0]}], got {k}")
        indices = np.sort(rng.choice(gains.shape[0], size=k, replace=False))
    else:
        indices = select_top_k(gains, k)
    d = ad.value_of(state.u0).shape[0]
    q2 = ad.gather_rows(state.u2_hat, indices)
    q1, q0 = propagate_rows(
        q2, state.u1_hat, ad.reshape(state.u0, (1, d)),
        enabled=propagation_enabled,
    )
    return PseudoOodSet(
        indices=np.asarray(indices), gains=gains[indices], q2=q2, q1=q1, q0=q0
    )
