"""Analytic versus central-difference gradient checks on random batches."""

from __future__ import annotations

import numpy as np

from .losses import (LossKind, LossSpec, batch_loss_and_grad, finite_diff_grad, loss_value,
                     max_relative_error, triplet_grad_w)
from .metric import MetricConfig, MetricParams, init_identity, l2_normalize, score_matrix
from .prng import PCG32

KINK_TOL = 1e-3


def _near_kink(S: np.ndarray, spec: LossSpec, tol: float = KINK_TOL) -> bool:
    """True when the batch sits close to a point where the loss is not differentiable."""
    B = S.shape[0]
    off = ~np.eye(B, dtype=bool)
    pos = np.diagonal(S)
    if spec.kind is LossKind.TRIPLET:
        for A in (S, S.T):
            p = np.diagonal(A)
            neg = np.where(off, A, -np.inf)
            top2 = np.sort(neg, axis=1)[:, -2:]
            if np.any(top2[:, 1] - top2[:, 0] < tol):
                return True
            if np.any(np.abs(spec.margin + top2[:, 1] - p) < tol):
                return True
    elif spec.kind is LossKind.POLY:
        hinge = np.concatenate([(spec.margin + S - pos[:, None])[off], (spec.margin + S - pos[None, :])[off]])
        if np.any(np.abs(hinge) < tol):
            return True
        if spec.poly_order > 0:
            raw = S[off] ** spec.poly_order
            if np.any(np.abs(raw - 1) < tol):
                return True
            # only k = 1 has a slope jump at s = 0
            if spec.poly_order == 1 and np.any(np.abs(raw) < tol):
                return True
    return False


def random_trial(config: MetricConfig, spec: LossSpec, rng: PCG32, batch: int = 8, noise: float = 0.3):
    """A random batch and perturbed-identity parameters away from loss kinks (float64)."""
    D = config.dim
    while True:
        X = l2_normalize(rng.normals(batch * D).reshape(batch, D))
        Y = l2_normalize(X + rng.normals(batch * D).reshape(batch, D))
        base = init_identity(config, np.float64)
        w = base.weights + noise * rng.normals(base.weights.size).reshape(base.weights.shape)
        params = MetricParams(config, w)
        if not _near_kink(score_matrix(X, Y, params), spec):
            return X, Y, params


def check_once(X, Y, params: MetricParams, spec: LossSpec, h: float = 1e-5) -> float:
    def fn(X, Y, p):
        return loss_value(score_matrix(X, Y, p), spec)

    _, analytic = batch_loss_and_grad(X, Y, params, spec)
    numeric = finite_diff_grad(fn, X, Y, params, h)
    err = max_relative_error(analytic, numeric)
    if spec.kind is LossKind.TRIPLET:
        err = max(err, max_relative_error(triplet_grad_w(X, Y, params, spec.margin), numeric))
    return err


def run_gradcheck(config: MetricConfig, spec: LossSpec, trials: int = 100, seed: int = 0,
                  batch: int = 8, h: float = 1e-5) -> float:
    """Largest relative error between analytic and numeric gradients over ``trials`` batches."""
    rng = PCG32(seed)
    worst = 0.0
    for _ in range(trials):
        X, Y, params = random_trial(config, spec, rng, batch)
        worst = max(worst, check_once(X, Y, params, spec, h))
    return worst
