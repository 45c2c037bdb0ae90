"""Minimal reverse-mode automatic differentiation over numpy arrays.

The adapter objective needs exact gradients with respect to three small
parameter tensors, and nothing in this package is allowed to depend on an
external ML framework.  This module therefore implements a small tape: a
:class:`Var` wraps a float64 ndarray together with a backward closure, and
each primitive below computes its forward value with plain numpy and records
a hand-derived vector-Jacobian product.

Every primitive dispatches on its input types.  Called with plain ndarrays it
returns a plain ndarray and records nothing, so the model's forward pass is
written once and runs either in value mode (inference) or in graph mode
(training) depending on whether the parameters were wrapped in ``Var``.

Discrete quantities (entropy masks, top-K indices) are never computed through
these primitives; callers read ``.value`` and treat the result as a constant
of the forward pass, which is exactly the differentiation convention the
trainer requires.

Cosine similarity here follows the package-wide rules: results are clamped to
[-1, 1] after computation, and a zero-norm operand yields a cosine of exactly
0 with no gradient.  Zero-norm encounters are counted in a module-level
diagnostics counter readable via :func:`zero_norm_events`.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Var",
    "Tensor",
    "backward",
    "value_of",
    "is_var",
    "add",
    "cmul",
    "cdiv",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "gather_rows",
    "rowscale",
    "cosine_rows",
    "cosine_columns",
    "softmax_rows",
    "entropy_rows",
    "sum_rows_masked",
    "sum_all",
    "neg_log_pick",
    "div_by_scalar",
    "zero_norm_events",
    "reset_zero_norm_events",
]

# Count of cosine evaluations that hit a zero-norm operand (diagnostics only;
# incremented under the GIL, no lock).
_zero_norm_events = 0


def zero_norm_events() -> int:
    """Return how many cosine evaluations hit a zero-norm operand."""
    return _zero_norm_events


def reset_zero_norm_events() -> None:
    """Reset the zero-norm diagnostics counter to zero."""
    global _zero_norm_events
    _zero_norm_events = 0


class Var:
    """A node in the reverse-mode tape wrapping a float64 ndarray.

    Leaves are created directly (``Var(array)``); interior nodes are created
    by the primitives in this module and carry a closure that accumulates
    gradients into their parents.  ``value`` is not copied, so callers must
    not mutate the wrapped array while the graph is alive.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        vjp: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Var(shape={self.value.shape})"


Tensor = Union[np.ndarray, Var]


def is_var(x: object) -> bool:
    return isinstance(x, Var)


def value_of(x: Tensor) -> np.ndarray:
    """Return the plain ndarray behind ``x`` (identity for ndarrays)."""
    return x.value if isinstance(x, Var) else x


def _acc(var: Var, g: np.ndarray) -> None:
    """Accumulate a gradient contribution into a node."""
    if var.grad is None:
        var.grad = g
    else:
        var.grad = var.grad + g


def backward(root: Var) -> None:
    """Run reverse-mode accumulation from a scalar (0-d) root node.

    After the call every reachable leaf holds its gradient in ``.grad``.
    Traversal order is a deterministic topological order, so repeated runs on
    an identical graph accumulate in the same floating-point order.
    """
    if root.value.shape != ():
        raise ValueError(f"backward expects a 0-d root, got shape {root.value.shape}")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# Primitives.  Each computes its value with plain numpy, and when any input
# is a Var returns a node carrying the hand-derived VJP.
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    out = av + bv
    if not (is_var(a) or is_var(b)):
        return out

    def vjp(g: np.ndarray) -> None:
        if is_var(a):
            _acc(a, g)
        if is_var(b):
            _acc(b, g)

    return Var(out, tuple(x for x in (a, b) if is_var(x)), vjp)


def cmul(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a python float constant."""
    av = value_of(a)
    out = av * c
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        _acc(a, g * c)

    return Var(out, (a,), vjp)


def cdiv(a: Tensor, c: float) -> Tensor:
    """Divide a tensor by a python float constant."""
    av = value_of(a)
    out = av / c
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        _acc(a, g / c)

    return Var(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not (is_var(a) or is_var(b)):
        return out

    def vjp(g: np.ndarray) -> None:
        if is_var(a):
            _acc(a, g @ bv.T)
        if is_var(b):
            _acc(b, av.T @ g)

    return Var(out, tuple(x for x in (a, b) if is_var(x)), vjp)


def transpose(a: Tensor) -> Tensor:
    av = value_of(a)
    out = av.T
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        _acc(a, g.T)

    return Var(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    av = value_of(a)
    out = av.reshape(shape)
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        _acc(a, g.reshape(av.shape))

    return Var(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 1.

    The pass-through choice at the kink matters: parameters initialized to
    zero put every pre-activation exactly at 0, and a zero subgradient
    there would freeze them permanently.
    """
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if not is_var(a):
        return out
    mask = av >= 0.0

    def vjp(g: np.ndarray) -> None:
        _acc(a, g * mask)

    return Var(out, (a,), vjp)


def gather_rows(a: Tensor, idx: Sequence[int] | np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; the adjoint scatter-adds them back."""
    av = value_of(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = av[idx]
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        da = np.zeros_like(av)
        np.add.at(da, idx, g)
        _acc(a, da)

    return Var(out, (a,), vjp)


def rowscale(c: Tensor, a: Tensor) -> Tensor:
    """Scale rows of ``a`` (shape (m, d) or broadcast (1, d)) by ``c`` (m, 1)."""
    cv, av = value_of(c), value_of(a)
    out = cv * av
    if not (is_var(c) or is_var(a)):
        return out

    def vjp(g: np.ndarray) -> None:
        if is_var(c):
            _acc(c, np.sum(g * av, axis=1, keepdims=True))
        if is_var(a):
            da = cv * g
            if av.shape[0] == 1 and g.shape[0] != 1:
                da = np.sum(da, axis=0, keepdims=True)
            _acc(a, da)

    return Var(out, tuple(x for x in (c, a) if is_var(x)), vjp)


def _cosine_guard(raw: np.ndarray, zero: np.ndarray) -> np.ndarray:
    """Clamp raw cosines to [-1, 1] and count zero-norm encounters."""
    global _zero_norm_events
    n_zero = int(np.count_nonzero(zero))
    if n_zero:
        _zero_norm_events += n_zero
    return np.clip(raw, -1.0, 1.0)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, shape (m, 1).

    ``a`` is (m, d); ``b`` is (m, d) or a broadcast (1, d) row.  Rows with a
    zero-norm operand yield 0 and pass no gradient.
    """
    av, bv = value_of(a), value_of(b)
    dots = np.sum(av * bv, axis=1, keepdims=True)
    na = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    nb = np.sqrt(np.sum(bv * bv, axis=1, keepdims=True))
    zero = (na == 0.0) | (nb == 0.0)
    denom = na * nb
    safe = np.where(zero, 1.0, denom)
    raw = np.where(zero, 0.0, dots / safe)
    out = _cosine_guard(raw, zero)
    if not (is_var(a) or is_var(b)):
        return out
    live = ~zero & (np.abs(raw) <= 1.0)
    na2 = np.where(na == 0.0, 1.0, na * na)
    nb2 = np.where(nb == 0.0, 1.0, nb * nb)

    def vjp(g: np.ndarray) -> None:
        ge = np.where(live, g, 0.0)
        if is_var(a):
            _acc(a, ge * (bv / safe - raw * av / na2))
        if is_var(b):
            db = ge * (av / safe - raw * bv / nb2)
            if bv.shape[0] == 1 and db.shape[0] != 1:
                db = np.sum(db, axis=0, keepdims=True)
            _acc(b, db)

    return Var(out, tuple(x for x in (a, b) if is_var(x)), vjp)


def cosine_columns(u: Tensor, t: Tensor) -> Tensor:
    """All-pairs cosine between rows of ``u`` (m, d) and columns of ``t`` (d, C).

    Returns an (m, C) matrix; entries with a zero-norm operand are 0 and pass
    no gradient.
    """
    uv, tv = value_of(u), value_of(t)
    dots = uv @ tv
    nu = np.sqrt(np.sum(uv * uv, axis=1, keepdims=True))
    nt = np.sqrt(np.sum(tv * tv, axis=0, keepdims=True))
    zero = (nu == 0.0) | (nt == 0.0)
    denom = nu * nt
    safe = np.where(zero, 1.0, denom)
    raw = np.where(zero, 0.0, dots / safe)
    out = _cosine_guard(raw, zero)
    if not (is_var(u) or is_var(t)):
        return out
    live = ~zero & (np.abs(raw) <= 1.0)
    nu2 = np.where(nu == 0.0, 1.0, nu * nu)
    nt2 = np.where(nt == 0.0, 1.0, nt * nt)

    def vjp(g: np.ndarray) -> None:
        ge = np.where(live, g, 0.0)
        s = ge / safe
        if is_var(u):
            du = s @ tv.T - uv * (np.sum(ge * raw, axis=1, keepdims=True) / nu2)
            _acc(u, du)
        if is_var(t):
            dt = uv.T @ s - tv * (np.sum(ge * raw, axis=0, keepdims=True) / nt2)
            _acc(t, dt)

    return Var(out, tuple(x for x in (u, t) if is_var(x)), vjp)


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    zv = value_of(z)
    shifted = zv - np.max(zv, axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=1, keepdims=True)
    if not is_var(z):
        return p

    def vjp(g: np.ndarray) -> None:
        _acc(z, p * (g - np.sum(g * p, axis=1, keepdims=True)))

    return Var(p, (z,), vjp)


def entropy_rows(p: Tensor) -> Tensor:
    """Row-wise Shannon entropy (natural log), shape (m, 1); 0*ln(0) = 0."""
    pv = value_of(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(pv > 0.0, np.log(np.where(pv > 0.0, pv, 1.0)), 0.0)
    h = -np.sum(pv * logp, axis=1, keepdims=True)
    if not is_var(p):
        return h

    def vjp(g: np.ndarray) -> None:
        dp = np.where(pv > 0.0, -(logp + 1.0), 0.0)
        _acc(p, dp * g)

    return Var(h, (p,), vjp)


def sum_rows_masked(p: Tensor, mask: np.ndarray) -> Tensor:
    """Sum the rows of ``p`` selected by a boolean mask, shape (1, C)."""
    pv = value_of(p)
    mask = np.asarray(mask, dtype=bool)
    out = pv[mask].sum(axis=0, keepdims=True)
    if not is_var(p):
        return out

    def vjp(g: np.ndarray) -> None:
        dp = np.zeros_like(pv)
        dp[mask] = g
        _acc(p, dp)

    return Var(out, (p,), vjp)


def sum_all(a: Tensor) -> Tensor:
    """Sum all entries into a 0-d scalar."""
    av = value_of(a)
    out = np.asarray(av.sum())
    if not is_var(a):
        return out

    def vjp(g: np.ndarray) -> None:
        _acc(a, np.full_like(av, float(g)))

    return Var(out, (a,), vjp)


def neg_log_pick(p: Tensor, index: int, floor: float) -> Tensor:
    """Return ``-ln(max(p[index], floor))`` as a 0-d scalar.

    ``p`` is a 1-D probability vector.  When the picked entry sits at or
    below the floor the result is clamped and no gradient flows.
    """
    pv = value_of(p)
    entry = float(pv[index])
    out = np.asarray(-np.log(max(entry, floor)))
    if not is_var(p):
        return out

    def vjp(g: np.ndarray) -> None:
        dp = np.zeros_like(pv)
        if entry > floor:
            dp[index] = -float(g) / entry
        _acc(p, dp)

    return Var(out, (p,), vjp)


def div_by_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide a tensor by a 0-d scalar node."""
    av, sv = value_of(a), value_of(s)
    out = av / sv
    if not (is_var(a) or is_var(s)):
        return out

    def vjp(g: np.ndarray) -> None:
        if is_var(a):
            _acc(a, g / sv)
        if is_var(s):
            _acc(s, np.asarray(-np.sum(g * av) / (sv * sv)))

    return Var(out, tuple(x for x in (a, s) if is_var(x)), vjp)
