"""Adapter application and cross-scale feature fusion.

One shared residual adapter maps every raw embedding ``v`` to
``u = relu(v @ W) + v``; with ``W = 0`` it is the identity, which is exactly
the zero-shot starting point of training.  Fusion then augments each scale
with its coarser neighbor, weighted by cosine similarity:

* mid patch i:   ``u1_hat[i] = u1[i] + cos(u1[i], u0) * u0``
* high patch j:  ``u2_hat[j] = u2[j] + cos(u2[j], u1_hat[p]) * u1_hat[p]``

where ``p`` is the mid patch geometrically containing high patch ``j``.  Mid
patches are fused before high patches, and high fusion reads the already
fused mid vector.  Cosines are clamped to [-1, 1]; a zero-norm operand makes
the cosine 0 (no augmentation) and bumps the diagnostics counter exposed by
:func:`zero_norm_events`.  Fused vectors are deliberately not re-normalized.

All functions accept plain ndarrays or tape ``Var`` nodes; gradients flow
through the cosine weights in graph mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, zero_norm_events, reset_zero_norm_events  # noqa: F401
from .errors import ContractViolation

__all__ = [
    "ModelParams",
    "HierarchyState",
    "parent_of",
    "parent_indices",
    "apply_adapter",
    "adapt_rows",
    "fuse",
    "fuse_rows",
    "zero_norm_events",
    "reset_zero_norm_events",
]


@dataclass
class ModelParams:
    """Learnable parameters: adapter matrix and two text bias tables.

    ``w`` is (d, d); ``b0`` and ``b2`` are (d, C) biases for the global and
    high scales.  The mid-scale bias is always derived as ``(b0 + b2) / 2``
    and never stored.
    """

    w: Tensor
    b0: Tensor
    b2: Tensor

    @classmethod
    def zeros(cls, d: int, num_classes: int) -> "ModelParams":
        return cls(
            w=np.zeros((d, d)),
            b0=np.zeros((d, num_classes)),
            b2=np.zeros((d, num_classes)),
        )


@dataclass
class HierarchyState:
    """Adapted and fused visual features for one image."""

    u0: Tensor       # (d,) adapted global vector
    u1_hat: Tensor   # (n^2, d) fused mid patches
    u2_hat: Tensor   # (4 n^2, d) fused high patches
    u1_raw: Tensor   # (n^2, d) adapted, unfused mid patches


def parent_of(j: int, n: int) -> int:
    """Flat mid-scale index of the patch containing high patch ``j``.

    Both grids are row-major; high patch (R, C) on the 2n x 2n grid sits
    inside mid patch (R // 2, C // 2) on the n x n grid.
    """
    if not 0 <= j < 4 * n * n:
        raise ContractViolation(f"high patch index {j} out of range for n={n}")
    row, col = divmod(j, 2 * n)
    return (row // 2) * n + (col // 2)


def parent_indices(n: int) -> np.ndarray:
    """Vector of parent mid indices for all 4 n^2 high patches."""
    j = np.arange(4 * n * n)
    row, col = j // (2 * n), j % (2 * n)
    return (row // 2) * n + (col // 2)


def adapt_rows(v_rows: Tensor, w: Tensor) -> Tensor:
    """Apply the shared adapter to a stack of row vectors: relu(V @ W) + V."""
    return ad.add(ad.relu(ad.matmul(v_rows, w)), v_rows)


def apply_adapter(v: Tensor, params: ModelParams) -> Tensor:
    """Adapt a single embedding vector of width d."""
    vv = ad.value_of(v)
    d = ad.value_of(params.w).shape[0]
    if vv.shape != (d,):
        raise ContractViolation(
            f"adapter expects shape ({d},), got {vv.shape}"
        )
    row = ad.reshape(v, (1, d))
    return ad.reshape(adapt_rows(row, params.w), (d,))


def fuse_rows(
    u0_row: Tensor,
    u1_rows: Tensor,
    u2_rows: Tensor,
    n: int,
    enabled: bool = True,
) -> tuple[Tensor, Tensor]:
    """Row-shaped fusion core: returns (fused mid (n^2, d), fused high (4 n^2, d)).

    With ``enabled=False`` (the fusion ablation) both scales pass through
    unchanged.
    """
    if enabled:
        c1 = ad.cosine_rows(u1_rows, u0_row)
        f1 = ad.add(u1_rows, ad.rowscale(c1, u0_row))
    else:
        f1 = u1_rows
    parents = parent_indices(n)
    if enabled:
        f1_parent = ad.gather_rows(f1, parents)
        c2 = ad.cosine_rows(u2_rows, f1_parent)
        f2 = ad.add(u2_rows, ad.rowscale(c2, f1_parent))
    else:
        f2 = u2_rows
    return f1, f2


def fuse(u0: Tensor, u1: Tensor, u2: Tensor, enabled: bool = True) -> HierarchyState:
    """Fuse adapted features across scales.

    Args:
        u0: (d,) adapted global vector.
        u1: (n^2, d) adapted mid patches, row-major.
        u2: (4 n^2, d) adapted high patches, row-major.
        enabled: when False, skip fusion (ablation) and pass features through.
    """
    u0v, u1v, u2v = ad.value_of(u0), ad.value_of(u1), ad.value_of(u2)
    if u0v.ndim != 1 or u1v.ndim != 2 or u2v.ndim != 2:
        raise ContractViolation("fuse expects u0 (d,), u1 (n^2, d), u2 (4 n^2, d)")
    d = u0v.shape[0]
    n = int(round(u1v.shape[0] ** 0.5))
    if n * n != u1v.shape[0] or u1v.shape[1] != d:
        raise ContractViolation(f"mid patches {u1v.shape} are not a square grid of width {d}")
    if u2v.shape != (4 * n * n, d):
        raise ContractViolation(
            f"high patches {u2v.shape}, expected {(4 * n * n, d)}"
        )
    u0_row = ad.reshape(u0, (1, d))
    f1, f2 = fuse_rows(u0_row, u1, u2, n, enabled=enabled)
    return HierarchyState(u0=u0, u1_hat=f1, u2_hat=f2, u1_raw=u1)
