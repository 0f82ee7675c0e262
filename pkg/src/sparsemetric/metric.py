"""Structured bilinear similarity metrics.

A metric scores a pair of embeddings as ``x^T (W * U) y`` where ``U`` is a
fixed binary support pattern. Only the entries of ``W`` inside the support are
ever stored:

* ``cosine``  -- no parameters, plain inner product.
* ``diag``    -- a length-``D`` vector of per-channel weights.
* ``bdiag``   -- ``N = D / d`` dense ``d x d`` blocks along the diagonal.
* ``dense``   -- the full ``D x D`` matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Variant(str, enum.Enum):
    COSINE = "cosine"
    DIAG = "diag"
    BLOCKDIAG = "bdiag"
    DENSE = "dense"


class ConfigError(ValueError):
    """Invalid metric configuration."""


class DimensionError(ValueError):
    """Feature width does not match the metric dimension."""


@dataclass(frozen=True)
class MetricConfig:
    variant: Variant
    dim: int
    block_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if int(self.dim) < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.variant is Variant.BLOCKDIAG:
            d = int(self.block_size)
            if not 1 <= d <= self.dim:
                raise ConfigError(f"block_size must lie in [1, {self.dim}], got {d}")
            if self.dim % d:
                raise ConfigError(f"dim {self.dim} is not divisible by block_size {d}")
        else:
            object.__setattr__(self, "block_size", 0)

    @property
    def block_count(self) -> int:
        if self.variant is Variant.BLOCKDIAG:
            return self.dim // self.block_size
        return 0

    @property
    def weight_shape(self) -> tuple:
        D = self.dim
        if self.variant is Variant.COSINE:
            return (0,)
        if self.variant is Variant.DIAG:
            return (D,)
        if self.variant is Variant.BLOCKDIAG:
            return (self.block_count, self.block_size, self.block_size)
        return (D, D)

    @classmethod
    def from_ratio(cls, dim: int, ratio: int) -> "MetricConfig":
        """Block-diagonal config from the block count ``N = D / d``."""
        if ratio < 1 or dim % ratio:
            raise ConfigError(f"block ratio {ratio} does not divide dim {dim}")
        return cls(Variant.BLOCKDIAG, dim, dim // ratio)


@dataclass
class MetricParams:
    """Metric configuration plus its masked weight storage."""

    config: MetricConfig
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.shape != self.config.weight_shape:
            raise ConfigError(
                f"weights of shape {self.weights.shape} do not fit "
                f"{self.config.variant.value} layout {self.config.weight_shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("metric weights must be finite")

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def dim(self) -> int:
        return self.config.dim

    def copy(self) -> "MetricParams":
        return MetricParams(self.config, self.weights.copy())

    def astype(self, dtype) -> "MetricParams":
        return MetricParams(self.config, self.weights.astype(dtype))


def param_count(config: MetricConfig) -> int:
    """Number of stored parameters: 0, D, D*d or D*D."""
    return int(np.prod(config.weight_shape)) if config.variant is not Variant.COSINE else 0


def init_identity(config: MetricConfig, dtype=np.float32) -> MetricParams:
    """Parameters whose scores equal the plain inner product."""
    v = config.variant
    if v is Variant.COSINE:
        w = np.zeros(0, dtype=dtype)
    elif v is Variant.DIAG:
        w = np.ones(config.dim, dtype=dtype)
    elif v is Variant.BLOCKDIAG:
        w = np.broadcast_to(np.eye(config.block_size, dtype=dtype), config.weight_shape).copy()
    else:
        w = np.eye(config.dim, dtype=dtype)
    return MetricParams(config, w)


def init_random(config: MetricConfig, rng, scale: float | None = None, dtype=np.float32) -> MetricParams:
    """Gaussian initialization, used as the ablation against identity start.

    ``rng`` is a :class:`sparsemetric.prng.PCG32`. The default scale is
    ``1/sqrt(fan_in)`` with fan-in 1, ``d`` or ``D`` depending on the variant.
    """
    if config.variant is Variant.COSINE:
        return init_identity(config, dtype)
    if scale is None:
        fan_in = {Variant.DIAG: 1, Variant.BLOCKDIAG: config.block_size, Variant.DENSE: config.dim}
        scale = 1.0 / np.sqrt(fan_in[config.variant])
    n = param_count(config)
    w = (scale * rng.normals(n)).reshape(config.weight_shape)
    return MetricParams(config, w.astype(dtype))


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """Scale ``v`` (or each row of a matrix) to unit Euclidean norm.

    Norms below ``eps`` are clamped to ``eps``, so zero rows stay zero.
    """
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if not np.all(np.isfinite(v)):
        bad = np.argwhere(~np.isfinite(v))[0]
        raise ValueError(f"non-finite component at index {tuple(bad.tolist())}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps).astype(v.dtype)


def _check_dim(n: int, params: MetricParams, what: str = "features"):
    if n != params.dim:
        raise DimensionError(f"{what} have dimension {n}, metric expects {params.dim}")


def score_pair(x, y, params: MetricParams) -> float:
    """Bilinear score of a single pair.

    Block-diagonal scores are accumulated per block first, then across blocks
    in ascending block order.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pair shapes differ: {x.shape} vs {y.shape}")
    _check_dim(x.shape[0], params)
    w = params.weights
    v = params.variant
    if v is Variant.COSINE:
        return float(np.dot(x, y))
    if v is Variant.DIAG:
        return float(np.sum(w * x * y))
    if v is Variant.DENSE:
        return float(x @ w @ y)
    n, d, _ = w.shape
    xb = x.reshape(n, d)
    yb = y.reshape(n, d)
    per_block = np.einsum("ni,nij,nj->n", xb, w, yb)
    total = 0.0
    for s in per_block:
        total += float(s)
    return total


def pre_project(X, params: MetricParams, side: str = "left") -> np.ndarray:
    """Fold the metric into one side so that scores become plain dot products.

    ``left`` maps each row ``x`` to ``(W*U)^T x``; ``right`` maps each row
    ``y`` to ``(W*U) y``. The output is not re-normalized.
    """
    X = np.asarray(X)
    squeeze = X.ndim == 1
    X2 = np.atleast_2d(X)
    _check_dim(X2.shape[1], params)
    w = params.weights
    v = params.variant
    left = side.lower() == "left"
    if side.lower() not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if v is Variant.COSINE:
        out = X2.copy()
    elif v is Variant.DIAG:
        out = X2 * w
    elif v is Variant.DENSE:
        out = X2 @ w if left else X2 @ w.T
    else:
        n, d, _ = w.shape
        Xb = X2.reshape(X2.shape[0], n, d)
        sig = "qni,nij->qnj" if left else "qnj,nij->qni"
        out = np.einsum(sig, Xb, w).reshape(X2.shape)
    return out[0] if squeeze else out


def score_matrix(X, Y, params: MetricParams) -> np.ndarray:
    """All-pairs scores ``S[q, g] = score_pair(X[q], Y[g])``."""
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    _check_dim(X.shape[1], params, "queries")
    _check_dim(Y.shape[1], params, "gallery")
    return pre_project(X, params, "left") @ Y.T


def bilinear_direct(X, Y, params: MetricParams) -> np.ndarray:
    """All-pairs scores by the explicit triple sum, without projection.

    Slower than :func:`score_matrix`; kept as an independent path for checks.
    """
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    _check_dim(X.shape[1], params, "queries")
    _check_dim(Y.shape[1], params, "gallery")
    w = params.weights
    v = params.variant
    if v is Variant.COSINE:
        return np.einsum("qm,gm->qg", X, Y)
    if v is Variant.DIAG:
        return np.einsum("qm,m,gm->qg", X, w, Y)
    if v is Variant.DENSE:
        return np.einsum("qi,ij,gj->qg", X, w, Y)
    n, d, _ = w.shape
    return np.einsum("qni,nij,gnj->qg", X.reshape(-1, n, d), w, Y.reshape(-1, n, d))


def materialize_dense(params: MetricParams) -> np.ndarray:
    """Expand masked storage into the full ``D x D`` matrix ``W * U``."""
    D = params.dim
    w = params.weights
    v = params.variant
    dtype = w.dtype if w.size else np.float64
    if v is Variant.COSINE:
        return np.eye(D, dtype=dtype)
    if v is Variant.DIAG:
        return np.diag(w)
    if v is Variant.DENSE:
        return w.copy()
    out = np.zeros((D, D), dtype=dtype)
    n, d, _ = w.shape
    for b in range(n):
        out[b * d:(b + 1) * d, b * d:(b + 1) * d] = w[b]
    return out


def support_mask(config: MetricConfig) -> np.ndarray:
    """Boolean ``D x D`` support pattern ``U`` of a configuration."""
    D = config.dim
    v = config.variant
    if v in (Variant.COSINE, Variant.DIAG):
        return np.eye(D, dtype=bool)
    if v is Variant.DENSE:
        return np.ones((D, D), dtype=bool)
    blk = np.arange(D) // config.block_size
    return blk[:, None] == blk[None, :]


def project_dense(config: MetricConfig, M: np.ndarray) -> np.ndarray:
    """Gather the in-support entries of a full matrix into masked storage."""
    M = np.asarray(M)
    v = config.variant
    if v is Variant.COSINE:
        return np.zeros(0, dtype=M.dtype)
    if v is Variant.DIAG:
        return np.diag(M).copy()
    if v is Variant.DENSE:
        return M.copy()
    n, d = config.block_count, config.block_size
    return np.stack([M[b * d:(b + 1) * d, b * d:(b + 1) * d] for b in range(n)])
