"""Drop-in uses of a learned metric: token alignment, attention, distillation."""

from __future__ import annotations

import enum

import numpy as np

from .metric import MetricParams, score_matrix


class Alignment(str, enum.Enum):
    MAX_AVE = "maxave"
    MAX_SUM = "maxsum"
    MAX_SOFT = "maxsoft"


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _compress(m: np.ndarray, strategy: Alignment, tau: float) -> float:
    if strategy is Alignment.MAX_SUM:
        return float(np.sum(m))
    if strategy is Alignment.MAX_AVE:
        return float(np.sum(m) / m.size)
    return float(np.sum(_softmax(m / tau) * m))


def directional_scores(A, B, params: MetricParams, strategy="maxave", tau: float = 0.1):
    """Pooled scores for both directions of a token-pair score grid.

    The first value takes, for every token of ``B``, its best match in ``A``
    and compresses those maxima; the second does the same for tokens of ``A``.
    """
    strategy = Alignment(strategy)
    A = np.atleast_2d(np.asarray(A))
    B = np.atleast_2d(np.asarray(B))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("token sets must be non-empty")
    if strategy is Alignment.MAX_SOFT and tau <= 0:
        raise ValueError("soft alignment temperature must be positive")
    M = score_matrix(A, B, params).astype(np.float64)
    return _compress(M.max(axis=0), strategy, tau), _compress(M.max(axis=1), strategy, tau)


def token_alignment_score(A, B, params: MetricParams, strategy="maxave", tau: float = 0.1) -> float:
    """Mean of the two directional pooled scores."""
    s1, s2 = directional_scores(A, B, params, strategy, tau)
    return 0.5 * (s1 + s2)


def metric_attention(Q, K, V, params: MetricParams, temperature: float | None = None) -> np.ndarray:
    """``softmax(score_matrix(Q, K) / temperature) @ V``; temperature defaults to sqrt(D)."""
    Q = np.atleast_2d(np.asarray(Q))
    K = np.atleast_2d(np.asarray(K))
    V = np.atleast_2d(np.asarray(V))
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"{K.shape[0]} keys but {V.shape[0]} values")
    if temperature is None:
        temperature = float(np.sqrt(params.dim))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    attn = _softmax(score_matrix(Q, K, params) / temperature, axis=1)
    return attn @ V


def attention_weights(Q, K, params: MetricParams, temperature: float | None = None) -> np.ndarray:
    if temperature is None:
        temperature = float(np.sqrt(params.dim))
    return _softmax(score_matrix(Q, K, params) / temperature, axis=1)


def _kl_rows(teacher_logits, student_logits, axis):
    lp = _log_softmax(teacher_logits, axis)
    lq = _log_softmax(student_logits, axis)
    return np.mean(np.sum(np.exp(lp) * (lp - lq), axis=axis))


def distill_kl(S_teacher, S_student, tau: float = 0.05) -> float:
    """Forward KL from teacher to student softmax, rows and columns averaged."""
    St = np.asarray(S_teacher, dtype=np.float64)
    Ss = np.asarray(S_student, dtype=np.float64)
    if St.shape != Ss.shape or St.ndim != 2:
        raise ValueError(f"teacher {St.shape} and student {Ss.shape} score matrices must match")
    if tau <= 0:
        raise ValueError("distillation temperature must be positive")
    return float(0.5 * (_kl_rows(St / tau, Ss / tau, 1) + _kl_rows(St / tau, Ss / tau, 0)))


def distill_loss(S_teacher, S_student, tau: float = 0.05, task_loss: float = 0.0) -> float:
    """Task loss plus the distillation KL with equal weight."""
    return float(task_loss) + distill_kl(S_teacher, S_student, tau)
