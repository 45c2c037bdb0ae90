"""Training objective: per-scale cross-entropy plus pseudo-outlier entropy.

The identification term is the sum over scales of cross-entropy between
each scale's (possibly sub-normalized) class distribution and the label.
The outlier term pushes the mined pseudo-outlier features toward maximal
alignment entropy at every scale.  Both are averaged over the batch and
combined as ``total = l_id + lambda_ood * l_ood_raw``; the stored ``l_ood``
already includes the weight so ``total == l_id + l_ood`` holds bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import PredictionSet, align_rows, biased_text, predict
from .bundle import ImageEmbeddings
from .config import TrainConfig
from .errors import ConfigError, ContractViolation
from .hierarchy import ModelParams, adapt_rows, apply_adapter, fuse
from .pseudo_ood import PseudoOodSet, mine

__all__ = [
    "PROB_FLOOR",
    "ImageChoices",
    "LossBreakdown",
    "Gradients",
    "forward_image",
    "loss_id",
    "loss_ood",
    "batch_loss",
    "batch_loss_and_grads",
    "finite_difference_check",
]

PROB_FLOOR = 1e-12


@dataclass
class ImageChoices:
    """The discrete decisions made while evaluating one image.

    Replaying these freezes the keep-masks and the pseudo-outlier patch
    selection, making the loss a smooth function of the parameters in a
    neighborhood (differentiation and finite differences both rely on it).
    ``indices`` is None when the outlier term was disabled.
    """

    mask_mid: np.ndarray
    mask_high: np.ndarray
    indices: np.ndarray | None


@dataclass
class LossBreakdown:
    """Scalar loss values for one batch (floats, detached from the tape)."""

    l_id: float
    l_ood: float  # weighted: already multiplied by lambda_ood
    total: float  # exactly l_id + l_ood
    per_scale_ce: np.ndarray            # (3,) batch-mean CE per scale
    per_scale_neg_entropy: np.ndarray   # (3,) batch-mean -(1/K) sum H per scale


@dataclass
class Gradients:
    """Parameter gradients of the total batch loss."""

    w: np.ndarray
    b0: np.ndarray
    b2: np.ndarray


def forward_image(
    item: ImageEmbeddings,
    t_base,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    frozen: ImageChoices | None = None,
    with_pseudo: bool = True,
):
    """Run the full per-image pipeline: adapt, fuse, align, mine.

    Returns (prediction, pseudo, choices); ``pseudo`` is None when
    ``with_pseudo`` is False.
    """
    state = fuse(
        apply_adapter(item.v_global, params),
        adapt_rows(item.v_mid, params.w),
        adapt_rows(item.v_high, params.w),
        enabled=not cfg.ablations.disable_cross_scale_fusion,
    )
    pred = predict(
        state,
        t_base,
        params,
        cfg.alignment(),
        frozen_masks=(
            (frozen.mask_mid, frozen.mask_high) if frozen is not None else None
        ),
    )
    pseudo: PseudoOodSet | None = None
    indices: np.ndarray | None = None
    if with_pseudo:
        pseudo = mine(
            pred,
            state,
            cfg.k,
            rng=rng,
            random_selection=cfg.ablations.disable_entropy_gain_selection,
            propagation_enabled=not cfg.ablations.disable_lower_scale_propagation,
            frozen_indices=frozen.indices if frozen is not None else None,
        )
        indices = pseudo.indices
    choices = ImageChoices(
        mask_mid=pred.mask_mid, mask_high=pred.mask_high, indices=indices
    )
    return pred, pseudo, choices


def loss_id(pred: PredictionSet, label: int):
    """Summed per-scale cross-entropy of one labeled image.

    Returns (node, per-scale float triple).  Each term is ``-ln p_y``
    floored at PROB_FLOOR; sub-normalized aggregates make values above
    ln C possible.
    """
    num_classes = ad.value_of(pred.p0).shape[0]
    if not 0 <= label < num_classes:
        raise ContractViolation(
            f"label {label} outside [0, {num_classes}) for the identification loss"
        )
    ce0 = ad.neg_log_pick(pred.p0, label, PROB_FLOOR)
    ce1 = ad.neg_log_pick(pred.p1, label, PROB_FLOOR)
    ce2 = ad.neg_log_pick(pred.p2, label, PROB_FLOOR)
    node = ad.add(ad.add(ce0, ce1), ce2)
    scales = (float(ad.value_of(ce0)), float(ad.value_of(ce1)), float(ad.value_of(ce2)))
    return node, scales


def loss_ood(pseudo: PseudoOodSet, t_base, params: ModelParams, tau: float):
    """Negative mean alignment entropy of the pseudo-outlier features.

    Returns (node, per-scale float triple); the node value lies in
    [-3 ln C, 0] and the weight lambda_ood is applied by the caller.
    """
    t0, t1, t2 = biased_text(t_base, params)
    k = ad.value_of(pseudo.q2).shape[0]
    e0 = ad.sum_all(ad.entropy_rows(align_rows(pseudo.q0, t0, tau)))
    e1 = ad.sum_all(ad.entropy_rows(align_rows(pseudo.q1, t1, tau)))
    e2 = ad.sum_all(ad.entropy_rows(align_rows(pseudo.q2, t2, tau)))
    node = ad.cmul(ad.add(ad.add(e0, e1), e2), -1.0 / k)
    scales = (
        float(ad.value_of(e0)) * (-1.0 / k),
        float(ad.value_of(e1)) * (-1.0 / k),
        float(ad.value_of(e2)) * (-1.0 / k),
    )
    return node, scales


def _batch_total(
    batch: list[ImageEmbeddings],
    t_base,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None,
    frozen: list[ImageChoices] | None,
):
    """Shared forward pass; returns (total node, breakdown, choices)."""
    if not batch:
        raise ContractViolation("batch must contain at least one item")
    if frozen is not None and len(frozen) != len(batch):
        raise ContractViolation(
            f"{len(frozen)} frozen choices for a batch of {len(batch)}"
        )
    for item in batch:
        if item.label < 0:
            raise ContractViolation(
                f"item {item.item_id} is unlabeled and cannot enter the training loss"
            )
    use_ood = not cfg.ablations.disable_ood_loss
    id_acc = None
    ood_acc = None
    ce_scales = np.zeros(3)
    ent_scales = np.zeros(3)
    choices: list[ImageChoices] = []
    for index, item in enumerate(batch):
        pred, pseudo, choice = forward_image(
            item,
            t_base,
            params,
            cfg,
            rng=rng,
            frozen=frozen[index] if frozen is not None else None,
            with_pseudo=use_ood,
        )
        choices.append(choice)
        li, li_scales = loss_id(pred, item.label)
        id_acc = li if id_acc is None else ad.add(id_acc, li)
        ce_scales += np.asarray(li_scales)
        if use_ood:
            lo, lo_scales = loss_ood(pseudo, t_base, params, cfg.tau)
            ood_acc = lo if ood_acc is None else ad.add(ood_acc, lo)
            ent_scales += np.asarray(lo_scales)
    batch_size = len(batch)
    l_id_node = ad.cmul(id_acc, 1.0 / batch_size)
    if use_ood:
        l_ood_node = ad.cmul(ad.cmul(ood_acc, 1.0 / batch_size), cfg.lambda_ood)
    else:
        l_ood_node = np.asarray(0.0)
    total = ad.add(l_id_node, l_ood_node)
    breakdown = LossBreakdown(
        l_id=float(ad.value_of(l_id_node)),
        l_ood=float(ad.value_of(l_ood_node)),
        total=float(ad.value_of(total)),
        per_scale_ce=ce_scales / batch_size,
        per_scale_neg_entropy=ent_scales / batch_size,
    )
    return total, breakdown, choices


def batch_loss(
    batch: list[ImageEmbeddings],
    t_base: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    frozen: list[ImageChoices] | None = None,
) -> tuple[LossBreakdown, list[ImageChoices]]:
    """Value-only batch loss (no tape)."""
    _, breakdown, choices = _batch_total(batch, t_base, params, cfg, rng, frozen)
    return breakdown, choices


def batch_loss_and_grads(
    batch: list[ImageEmbeddings],
    t_base: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    frozen: list[ImageChoices] | None = None,
) -> tuple[LossBreakdown, Gradients, list[ImageChoices]]:
    """Batch loss with gradients for every learnable parameter."""
    w = ad.Var(np.asarray(params.w, dtype=np.float64))
    b0 = ad.Var(np.asarray(params.b0, dtype=np.float64))
    b2 = ad.Var(np.asarray(params.b2, dtype=np.float64))
    tracked = ModelParams(w=w, b0=b0, b2=b2)
    total, breakdown, choices = _batch_total(batch, t_base, tracked, cfg, rng, frozen)
    ad.backward(total)
    grads = Gradients(w=w.grad, b0=b0.grad, b2=b2.grad)
    return breakdown, grads, choices


def _gradcheck_fixture(seed: int, d: int, num_classes: int, n: int, batch_size: int):
    """Random non-degenerate parameters and a labeled batch."""
    rng = np.random.default_rng(seed)
    params = ModelParams(
        w=0.1 * rng.normal(size=(d, d)),
        b0=0.1 * rng.normal(size=(d, num_classes)),
        b2=0.1 * rng.normal(size=(d, num_classes)),
    )
    t_base = rng.normal(size=(d, num_classes))
    batch = [
        ImageEmbeddings(
            item_id=f"fd-{i}",
            label=int(rng.integers(0, num_classes)),
            v_global=rng.normal(size=d),
            v_mid=rng.normal(size=(n * n, d)),
            v_high=rng.normal(size=(4 * n * n, d)),
        )
        for i in range(batch_size)
    ]
    return params, t_base, batch


def finite_difference_check(
    d: int = 8,
    num_classes: int = 3,
    n: int = 2,
    batch_size: int = 2,
    k: int = 2,
    seeds: int = 20,
    step: float = 1e-6,
    tau: float = 0.25,
    corrupt: float = 0.0,
) -> float:
    """Largest relative error between tape and central-difference gradients.

    Checks every coordinate of every parameter on ``seeds`` random fixtures
    with the discrete choices frozen at the base point.  The temperature is
    kept moderate and the parameters non-zero so the loss is smooth at the
    evaluation points.  Returns the maximum of
    ``|analytic - central| / (|central| + 1e-8)``.

    ``corrupt`` adds that amount to one analytic coordinate per fixture;
    it exists so the harness can prove it catches a wrong gradient.
    """
    if seeds < 1:
        raise ConfigError(f"seeds must be positive, got {seeds}")
    if d < 1 or num_classes < 2 or batch_size < 1:
        raise ConfigError(
            f"gradcheck needs d >= 1, num_classes >= 2, batch_size >= 1; "
            f"got d={d}, num_classes={num_classes}, batch_size={batch_size}"
        )
    cfg = TrainConfig(n=n, k=k, tau=tau, epochs=1, batch_size=batch_size)
    worst = 0.0
    for seed in range(seeds):
        params, t_base, batch = _gradcheck_fixture(seed, d, num_classes, n, batch_size)
        _, grads, choices = batch_loss_and_grads(batch, t_base, params, cfg)
        grads.w[0, 0] += corrupt

        def value() -> float:
            breakdown, _ = batch_loss(batch, t_base, params, cfg, frozen=choices)
            return breakdown.total

        for array, grad in (
            (params.w, grads.w),
            (params.b0, grads.b0),
            (params.b2, grads.b2),
        ):
            it = np.nditer(array, flags=["multi_index"])
            for _ in it:
                index = it.multi_index
                orig = array[index]
                array[index] = orig + step
                hi = value()
                array[index] = orig - step
                lo = value()
                array[index] = orig
                central = (hi - lo) / (2.0 * step)
                rel = abs(grad[index] - central) / (abs(central) + 1e-8)
                worst = max(worst, rel)
    return worst
