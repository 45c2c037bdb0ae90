"""Vision-text alignment: per-scale probabilities, entropy filtering, aggregation.

A feature ``u`` aligns with the class text embeddings through a temperature
softmax over cosine similarities: ``p(c | u) = softmax_c(cos(u, t_c) / tau)``.
Each scale uses its own biased text table: ``t0 = t + b0`` for the global
scale, ``t2 = t + b2`` for the high scale, and the mid scale always uses the
midpoint ``t1 = t + (b0 + b2) / 2`` (computed as the sum then halved, never
stored as a parameter).

Patch scales are then reduced to one distribution each: a patch is kept when
its entropy does not exceed the scale's mean entropy (ties kept; at least
one patch always survives because a finite set has a member at or below its
mean), and the kept distributions are summed and divided by the full patch
count.  The aggregate is therefore sub-normalized by design; setting
``renormalize_aggregates`` restores a proper distribution for experiments.

Functions run on plain ndarrays (inference) or tape nodes (training); the
entropy statistics that drive the keep-mask are always plain values and act
as constants of the forward pass during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation
from .hierarchy import HierarchyState, ModelParams

__all__ = [
    "AlignmentConfig",
    "PredictionSet",
    "AggregateResult",
    "biased_text",
    "align_rows",
    "align_probs",
    "entropy",
    "entropy_values",
    "aggregate_scale",
    "predict",
]


@dataclass
class AlignmentConfig:
    """Alignment temperature and aggregation behavior.

    ``tau`` must be positive; the package default is 0.01.  Aggregates stay
    sub-normalized unless ``renormalize_aggregates`` is set.
    """

    tau: float = 0.01
    renormalize_aggregates: bool = False

    def __post_init__(self) -> None:
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class PredictionSet:
    """Per-scale alignment outputs for one image.

    ``p0``, ``p1``, ``p2`` are the global and aggregated mid/high
    distributions (length C); ``p_mid`` and ``p_high`` hold one row per
    patch.  Entropy fields are plain floats/arrays even in graph mode:
    they parameterize the discrete keep-masks, which differentiation
    treats as constants.
    """

    p0: Tensor             # (C,)
    p_mid: Tensor          # (n^2, C)
    p_high: Tensor         # (4 n^2, C)
    h_mid: np.ndarray      # (n^2,)
    h_high: np.ndarray     # (4 n^2,)
    h_bar_mid: float
    h_bar_high: float
    mask_mid: np.ndarray   # (n^2,) bool, True = kept
    mask_high: np.ndarray  # (4 n^2,) bool
    p1: Tensor             # (C,)
    p2: Tensor             # (C,)


@dataclass
class AggregateResult:
    """Entropy-filtered aggregation of one patch scale."""

    h_bar: float
    mask: np.ndarray
    aggregated: Tensor  # (C,)


def biased_text(t_base: Tensor, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-scale text tables (t0, t1, t2), each (d, C).

    t1 is derived as ``t + (b0 + b2) / 2`` with the sum formed before the
    halving so both biases receive exactly half of any gradient through it.
    """
    t0 = ad.add(t_base, params.b0)
    t1 = ad.add(t_base, ad.cmul(ad.add(params.b0, params.b2), 0.5))
    t2 = ad.add(t_base, params.b2)
    return t0, t1, t2


def align_rows(u_rows: Tensor, t_cols: Tensor, tau: float) -> Tensor:
    """Alignment distributions for a stack of features, shape (m, C)."""
    return ad.softmax_rows(ad.cdiv(ad.cosine_columns(u_rows, t_cols), tau))


def align_probs(u: Tensor, t_cols: Tensor, tau: float) -> Tensor:
    """Alignment distribution of a single feature vector, shape (C,).

    A zero vector has cosine 0 with every class and yields the uniform
    distribution.
    """
    if not tau > 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    uv = ad.value_of(u)
    tv = ad.value_of(t_cols)
    if uv.ndim != 1 or tv.ndim != 2 or tv.shape[0] != uv.shape[0]:
        raise ContractViolation(
            f"align_probs expects u (d,) and text (d, C); got {uv.shape} and {tv.shape}"
        )
    row = ad.reshape(u, (1, uv.shape[0]))
    return ad.reshape(align_rows(row, t_cols, tau), (tv.shape[1],))


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy (natural log) of a probability vector; 0 ln 0 = 0."""
    pv = ad.value_of(p)
    if pv.ndim != 1:
        raise ContractViolation(f"entropy expects a vector, got shape {pv.shape}")
    row = ad.reshape(p, (1, pv.shape[0]))
    out = ad.reshape(ad.entropy_rows(row), ())
    return out if ad.is_var(out) else float(out)


def entropy_values(p_rows: Tensor) -> np.ndarray:
    """Plain per-row entropies of a (m, C) stack, detached from the tape."""
    return ad.entropy_rows(ad.value_of(p_rows)).reshape(-1)


def aggregate_scale(
    per_patch: Tensor,
    total: int,
    renormalize: bool = False,
    mask: np.ndarray | None = None,
) -> AggregateResult:
    """Entropy-filter and average one patch scale.

    Keeps patches whose entropy is at or below the scale mean, sums the kept
    distributions, and divides by ``total`` (the full patch count), leaving
    the result sub-normalized unless ``renormalize`` is set.  Passing
    ``mask`` replays a previously computed keep-mask instead of deriving one
    (used when re-evaluating a loss with discrete choices frozen).
    """
    pv = ad.value_of(per_patch)
    if pv.ndim != 2 or pv.shape[0] == 0:
        raise ContractViolation(
            f"aggregate_scale expects a non-empty (m, C) stack, got {pv.shape}"
        )
    if total < pv.shape[0]:
        raise ContractViolation(
            f"total patch count {total} below the {pv.shape[0]} rows given"
        )
    h = entropy_values(per_patch)
    h_bar = float(np.mean(h))
    if mask is None:
        mask = h <= h_bar
    agg = ad.cdiv(ad.sum_rows_masked(per_patch, mask), float(total))
    if renormalize:
        agg = ad.div_by_scalar(agg, ad.sum_all(agg))
    return AggregateResult(
        h_bar=h_bar,
        mask=mask,
        aggregated=ad.reshape(agg, (pv.shape[1],)),
    )


def predict(
    state: HierarchyState,
    t_base: Tensor,
    params: ModelParams,
    cfg: AlignmentConfig,
    frozen_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> PredictionSet:
    """Full alignment of one image's fused hierarchy.

    Returns per-scale distributions plus the entropy statistics and keep
    masks that produced the aggregates.  ``frozen_masks`` replays stored
    (mid, high) keep-masks instead of deriving them from the entropies.
    """
    t0, t1, t2 = biased_text(t_base, params)
    d = ad.value_of(state.u0).shape[0]
    num_classes = ad.value_of(t_base).shape[1]

    u0_row = ad.reshape(state.u0, (1, d))
    p0 = align_rows(u0_row, t0, cfg.tau)
    p_mid = align_rows(state.u1_hat, t1, cfg.tau)
    p_high = align_rows(state.u2_hat, t2, cfg.tau)

    h_mid = entropy_values(p_mid)
    h_high = entropy_values(p_high)
    mid_mask = frozen_masks[0] if frozen_masks is not None else None
    high_mask = frozen_masks[1] if frozen_masks is not None else None
    agg_mid = aggregate_scale(
        p_mid, ad.value_of(p_mid).shape[0],
        renormalize=cfg.renormalize_aggregates, mask=mid_mask,
    )
    agg_high = aggregate_scale(
        p_high, ad.value_of(p_high).shape[0],
        renormalize=cfg.renormalize_aggregates, mask=high_mask,
    )
    return PredictionSet(
        p0=ad.reshape(p0, (num_classes,)),
        p_mid=p_mid,
        p_high=p_high,
        h_mid=h_mid,
        h_high=h_high,
        h_bar_mid=agg_mid.h_bar,
        h_bar_high=agg_high.h_bar,
        mask_mid=agg_mid.mask,
        mask_high=agg_high.mask,
        p1=agg_mid.aggregated,
        p2=agg_high.aggregated,
    )
