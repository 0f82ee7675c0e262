"""Retrieval objectives over square score matrices and their W-gradients.

Every loss takes a ``B x B`` score matrix whose diagonal holds the positive
pairs. :func:`loss_and_dscores` returns the loss together with ``dL/dS``;
:func:`grad_w_from_dS` pushes that through the bilinear form into masked
parameter storage, so any loss here can train any metric variant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .metric import MetricParams, Variant, score_matrix

CMPM_EPS = 1e-8


class LossKind(str, enum.Enum):
    TRIPLET = "triplet"
    INFONCE = "infonce"
    CMPM = "cmpm"
    POLY = "poly"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.TRIPLET
    margin: float = 0.2
    temperature: float = 0.05
    poly_order: int = 2
    poly_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.poly_order < 0:
            raise ValueError(f"poly_order must be non-negative, got {self.poly_order}")


def _square(S) -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square score matrix, got shape {S.shape}")
    return S


def _hardest_negatives(S: np.ndarray):
    """Hardest off-diagonal column per row and row per column (lowest index on ties)."""
    B = S.shape[0]
    masked = S.astype(np.float64, copy=True)
    masked[np.diag_indices(B)] = -np.inf
    # argmax returns the first maximal index
    return np.argmax(masked, axis=1), np.argmax(masked, axis=0)


def _triplet_terms(S: np.ndarray, margin: float):
    B = S.shape[0]
    if B < 2:
        raise ValueError("triplet loss needs at least two pairs in the batch")
    pos = np.diagonal(S)
    row_neg, col_neg = _hardest_negatives(S)
    ar = np.arange(B)
    row_l = margin + S[ar, row_neg] - pos
    col_l = margin + S[col_neg, ar] - pos
    return row_l, col_l, row_neg, col_neg


def triplet_hardest_loss(S, margin: float = 0.2) -> float:
    """Sum of hardest-negative hinge terms in both retrieval directions."""
    S = _square(S)
    row_l, col_l, _, _ = _triplet_terms(S, margin)
    return float(np.sum(np.maximum(row_l, 0.0)) + np.sum(np.maximum(col_l, 0.0)))


def _triplet_dS(S, margin):
    row_l, col_l, row_neg, col_neg = _triplet_terms(S, margin)
    B = S.shape[0]
    dS = np.zeros((B, B), dtype=np.result_type(S.dtype, np.float32))
    for i in range(B):
        # indicator is l >= 0, boundary included
        if row_l[i] >= 0:
            dS[i, row_neg[i]] += 1
            dS[i, i] -= 1
        if col_l[i] >= 0:
            dS[col_neg[i], i] += 1
            dS[i, i] -= 1
    return dS


def _log_softmax(Z: np.ndarray, axis: int) -> np.ndarray:
    Zmax = np.max(Z, axis=axis, keepdims=True)
    shifted = Z - Zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def infonce_loss(S, temperature: float = 0.05) -> float:
    """Symmetric cross-entropy of the diagonal under row and column softmax.

    ``L = (1 / 2B) * (sum_i -log softmax_row(S/t)[i, i] + sum_j -log softmax_col(S/t)[j, j])``
    """
    return _infonce(S, temperature)[0]


def _infonce(S, temperature):
    S = _square(S)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    B = S.shape[0]
    Z = S / temperature
    lr = _log_softmax(Z, 1)
    lc = _log_softmax(Z, 0)
    loss = -(np.trace(lr) + np.trace(lc)) / (2 * B)
    eye = np.eye(B)
    dS = ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / (2 * B * temperature)
    return float(loss), dS.astype(np.result_type(S.dtype, np.float32))


def _cmpm_direction(S, labels, axis):
    # KL(labels || softmax(S)) along rows (axis=1) or columns (axis=0)
    ls = _log_softmax(S, axis)
    q = np.exp(ls)
    p = labels / np.sum(labels, axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p + CMPM_EPS) - np.log(q + CMPM_EPS)), 0.0)
    n = S.shape[0] if axis == 1 else S.shape[1]
    kl = np.sum(terms) / n
    r = p * q / (q + CMPM_EPS)
    dS = (-r + q * np.sum(r, axis=axis, keepdims=True)) / n
    return kl, dS


def cmpm_loss(S, labels=None) -> float:
    """Projection-matching loss: KL from the label distribution to softmax(S).

    Computed along rows and along columns, each averaged over its anchors,
    and the two directions summed. ``labels`` defaults to the identity.
    """
    return _cmpm(S, labels)[0]


def _cmpm(S, labels=None):
    S = _square(S)
    Sd = S.astype(np.float64)
    if labels is None:
        labels = np.eye(S.shape[0])
    labels = np.asarray(labels, dtype=np.float64)
    kr, dr = _cmpm_direction(Sd, labels, 1)
    kc, dc = _cmpm_direction(Sd, labels, 0)
    return float(kr + kc), (dr + dc).astype(np.result_type(S.dtype, np.float32))


def _poly_weight(s, order):
    w = np.clip(s ** order, 0.0, 1.0)
    raw = s ** order
    inside = (raw > 0) & (raw < 1)
    if order == 0:
        dw = np.zeros_like(s)
    else:
        dw = np.where(inside, order * s ** (order - 1), 0.0)
    return w, dw


def poly_loss(S, spec: LossSpec | None = None) -> float:
    """Hinge over every in-batch negative, weighted by a power of its score.

    ``scale * sum_neg clip(s_neg**k, 0, 1) * [margin + s_neg - s_pos]_+``
    in both retrieval directions; ``k = 0`` gives the plain summed hinge.
    """
    return _poly(S, spec or LossSpec(LossKind.POLY))[0]


def _poly(S, spec):
    S = _square(S)
    Sd = S.astype(np.float64)
    B = S.shape[0]
    off = ~np.eye(B, dtype=bool)
    pos = np.diagonal(Sd)
    w, dw = _poly_weight(Sd, spec.poly_order)
    # rows: anchor i against columns j; columns: anchor j against rows i
    h_row = spec.margin + Sd - pos[:, None]
    h_col = spec.margin + Sd - pos[None, :]
    a_row = (h_row > 0) & off
    a_col = (h_col > 0) & off
    loss = np.sum(np.where(a_row, w * h_row, 0.0)) + np.sum(np.where(a_col, w * h_col, 0.0))
    dS = np.zeros_like(Sd)
    dS += np.where(a_row, dw * h_row + w, 0.0)
    dS += np.where(a_col, dw * h_col + w, 0.0)
    dS[np.diag_indices(B)] -= np.sum(np.where(a_row, w, 0.0), axis=1)
    dS[np.diag_indices(B)] -= np.sum(np.where(a_col, w, 0.0), axis=0)
    s = spec.poly_scale
    return float(s * loss), (s * dS).astype(np.result_type(S.dtype, np.float32))


def loss_value(S, spec: LossSpec) -> float:
    return loss_and_dscores(S, spec)[0]


def loss_and_dscores(S, spec: LossSpec):
    """Loss value and its gradient with respect to the score matrix."""
    S = _square(S)
    if spec.kind is LossKind.TRIPLET:
        return triplet_hardest_loss(S, spec.margin), _triplet_dS(S, spec.margin)
    if spec.kind is LossKind.INFONCE:
        return _infonce(S, spec.temperature)
    if spec.kind is LossKind.CMPM:
        return _cmpm(S)
    return _poly(S, spec)


def grad_w_from_dS(X, Y, dS, params: MetricParams) -> np.ndarray:
    """Masked ``dL/dW = sum_{q,g} dS[q,g] * (x_q y_g^T * U)``."""
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    dS = np.asarray(dS)
    if dS.shape != (X.shape[0], Y.shape[0]):
        raise ValueError(f"dS has shape {dS.shape}, expected {(X.shape[0], Y.shape[0])}")
    if X.shape[1] != params.dim or Y.shape[1] != params.dim:
        raise ValueError("feature dimension does not match the metric")
    v = params.variant
    T = dS @ Y
    if v is Variant.COSINE:
        return np.zeros(0, dtype=T.dtype)
    if v is Variant.DIAG:
        return np.einsum("qm,qm->m", X, T)
    if v is Variant.DENSE:
        return X.T @ T
    n, d, _ = params.weights.shape
    return np.einsum("qni,qnj->nij", X.reshape(-1, n, d), T.reshape(-1, n, d))


def _masked_outer(x, y, params: MetricParams) -> np.ndarray:
    v = params.variant
    if v is Variant.COSINE:
        return np.zeros(0)
    if v is Variant.DIAG:
        return x * y
    if v is Variant.DENSE:
        return np.outer(x, y)
    n, d, _ = params.weights.shape
    return np.einsum("ni,nj->nij", x.reshape(n, d), y.reshape(n, d))


def triplet_grad_w(X, Y, params: MetricParams, margin: float = 0.2) -> np.ndarray:
    """Hard-triplet gradient as a sum of masked outer products.

    Each active row anchor ``x`` contributes ``x (y_neg - y)^T * U`` and each
    active column anchor ``y`` contributes ``(x_neg - x) y^T * U``; a term is
    active when its hinge argument is ``>= 0``.
    """
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    if X.shape != Y.shape:
        raise ValueError(f"batch shapes differ: {X.shape} vs {Y.shape}")
    if X.shape[1] != params.dim:
        raise ValueError("feature dimension does not match the metric")
    S = score_matrix(X, Y, params)
    row_l, col_l, row_neg, col_neg = _triplet_terms(S, margin)
    grad = np.zeros(params.config.weight_shape, dtype=np.result_type(X.dtype, params.weights.dtype))
    for i in range(X.shape[0]):
        if row_l[i] >= 0:
            grad += _masked_outer(X[i], Y[row_neg[i]] - Y[i], params)
        if col_l[i] >= 0:
            grad += _masked_outer(X[col_neg[i]] - X[i], Y[i], params)
    return grad


def batch_loss_and_grad(X, Y, params: MetricParams, spec: LossSpec):
    """Loss on a paired batch and its masked W-gradient."""
    S = score_matrix(X, Y, params)
    loss, dS = loss_and_dscores(S, spec)
    return loss, grad_w_from_dS(X, Y, dS.astype(S.dtype), params)


def finite_diff_grad(loss_fn, X, Y, params: MetricParams, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(X, Y, params)`` per stored weight."""
    if h <= 0:
        raise ValueError("step must be positive")
    w0 = params.weights.astype(np.float64)
    flat = w0.ravel()
    grad = np.zeros_like(flat)
    probe = params.astype(np.float64)
    pw = probe.weights.reshape(-1)
    for k in range(flat.size):
        pw[k] = flat[k] + h
        fp = loss_fn(X, Y, probe)
        pw[k] = flat[k] - h
        fm = loss_fn(X, Y, probe)
        pw[k] = flat[k]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss when perturbing weight {k}")
        grad[k] = (fp - fm) / (2 * h)
    return grad.reshape(w0.shape)


def max_relative_error(analytic, numeric) -> float:
    """Largest absolute deviation scaled by the larger gradient's max-norm."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)
