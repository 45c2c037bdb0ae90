"""Scoring and out-of-distribution metrics.

An image's in-distribution score is the maximum coordinate of the mean of
its three per-scale class distributions; labeled items are the ID
population, items labeled -1 the OOD population.  AUROC is computed from
midranks in O(N log N); the FPR-at-95%-TPR threshold is the k-th smallest
ID score with k = ceil(0.05 * num_id), so exactly the bottom 5% (rounded
up) of ID items fall below or at it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bundle import Bundle, ImageEmbeddings
from .config import TrainConfig, config_hash
from .errors import DataError, FormatError
from .hierarchy import ModelParams
from .objective import forward_image

__all__ = [
    "EvalReport",
    "ScoredItem",
    "auroc",
    "dump_scores",
    "evaluate",
    "fpr_at_95_tpr",
    "load_scores",
    "report_from_scores",
    "score_bundle",
    "score_item",
]


@dataclass
class ScoredItem:
    """One image's detection outputs."""

    item_id: str
    label: int
    predicted: int
    msp: float


@dataclass
class EvalReport:
    """Detection quality of one (bundle, parameters, config) triple.

    ``acc`` is None when the bundle has no labeled items; the OOD metrics
    are None unless both populations are present.
    """

    acc: float | None
    fpr95: float | None
    auroc: float | None
    ood_metrics_available: bool
    num_id: int
    num_ood: int
    threshold_used: float | None
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "fpr95": self.fpr95,
            "auroc": self.auroc,
            "ood_metrics_available": self.ood_metrics_available,
            "counts": {"id": self.num_id, "ood": self.num_ood},
            "threshold_used": self.threshold_used,
            "config_hash": self.config_hash,
        }


def score_item(
    item: ImageEmbeddings,
    t_base: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
) -> ScoredItem:
    """Score one image: argmax class and max mean-distribution probability."""
    pred, _, _ = forward_image(item, t_base, params, cfg, with_pseudo=False)
    p_id = (
        ad.value_of(pred.p0) + ad.value_of(pred.p1) + ad.value_of(pred.p2)
    ) / 3.0
    return ScoredItem(
        item_id=item.item_id,
        label=item.label,
        predicted=int(np.argmax(p_id)),
        msp=float(np.max(p_id)),
    )


def score_bundle(
    bundle: Bundle, params: ModelParams, cfg: TrainConfig
) -> list[ScoredItem]:
    """Score every item in manifest order."""
    t_base = bundle.text.t_base
    return [score_item(item, t_base, params, cfg) for item in bundle.items]


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """P(id score > ood score) + 0.5 P(equal), via midranks in O(N log N)."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    n_id, n_ood = id_scores.shape[0], ood_scores.shape[0]
    if n_id == 0 or n_ood == 0:
        raise DataError("AUROC needs at least one score in each population")
    combined = np.concatenate([id_scores, ood_scores])
    _, inverse, counts = np.unique(combined, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    midranks = starts + (counts + 1) / 2.0  # 1-based average rank per value
    rank_sum = float(midranks[inverse[:n_id]].sum())
    u_stat = rank_sum - n_id * (n_id + 1) / 2.0
    return u_stat / (n_id * n_ood)


def fpr_at_95_tpr(
    id_scores: np.ndarray, ood_scores: np.ndarray
) -> tuple[float, float]:
    """False-positive rate of OOD items at >= 95% ID recall.

    The threshold is the k-th smallest ID score with k = ceil(0.05 * num_id);
    accepting scores >= threshold keeps at least 95% of ID items.  Returns
    (fpr, threshold).
    """
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.shape[0] == 0 or ood_scores.shape[0] == 0:
        raise DataError("FPR@95TPR needs at least one score in each population")
    k = math.ceil(0.05 * id_scores.shape[0])
    threshold = float(np.sort(id_scores)[k - 1])
    fpr = float(np.mean(ood_scores >= threshold))
    return fpr, threshold


def evaluate(
    bundle: Bundle, params: ModelParams, cfg: TrainConfig
) -> tuple[EvalReport, list[ScoredItem]]:
    """Score a bundle and summarize detection quality."""
    scored = score_bundle(bundle, params, cfg)
    return report_from_scores(scored, cfg), scored


def report_from_scores(scored: list[ScoredItem], cfg: TrainConfig) -> EvalReport:
    """Build the evaluation report from per-item scores alone."""
    labeled = [s for s in scored if s.label >= 0]
    ood = [s for s in scored if s.label < 0]
    acc = (
        float(np.mean([s.predicted == s.label for s in labeled]))
        if labeled
        else None
    )
    available = bool(labeled) and bool(ood)
    fpr95 = roc = threshold = None
    if available:
        id_scores = np.array([s.msp for s in labeled])
        ood_scores = np.array([s.msp for s in ood])
        roc = auroc(id_scores, ood_scores)
        fpr95, threshold = fpr_at_95_tpr(id_scores, ood_scores)
    return EvalReport(
        acc=acc,
        fpr95=fpr95,
        auroc=roc,
        ood_metrics_available=available,
        num_id=len(labeled),
        num_ood=len(ood),
        threshold_used=threshold,
        config_hash=config_hash(cfg),
    )


def dump_scores(path: str | Path, scored: list[ScoredItem]) -> None:
    """Write one JSON object per line: id, label, predicted, msp."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in scored:
            fh.write(
                json.dumps(
                    {
                        "id": s.item_id,
                        "label": s.label,
                        "predicted": s.predicted,
                        "msp": s.msp,
                    }
                )
                + "\n"
            )


def load_scores(path: str | Path) -> list[ScoredItem]:
    """Read a score dump back; floats round-trip exactly through JSON."""
    scored: list[ScoredItem] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                scored.append(
                    ScoredItem(
                        item_id=str(row["id"]),
                        label=int(row["label"]),
                        predicted=int(row["predicted"]),
                        msp=float(row["msp"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{line_no}: bad score line: {exc}") from exc
    return scored
