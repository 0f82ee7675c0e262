"""Seeded synthetic paired-feature tasks with known channel structure.

Each pair shares a latent ``z ~ N(0, I)``. The query side is
``normalize(z + sigma * e1)``; the gallery side is
``normalize(T z + sigma * e2)``, where ``T`` is either a per-channel
reweighting (``diag``) or a block-diagonal mixing (``blockmix``).

Draw order from the PCG32 stream: for ``blockmix`` without explicit matrices,
``N * d * d`` Gaussians ``G`` first (block-major, row-major), giving blocks
``I + mix_strength * G / sqrt(d)``; then a single run of ``3 * D * pairs`` Gaussians consumed
pair by pair as ``z``, ``e1``, ``e2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import GroundTruth
from .metric import l2_normalize
from .prng import PCG32


@dataclass
class SynthSpec:
    pairs: int
    dim: int
    structure: str = "blockmix"
    block: int = 8
    weights: np.ndarray | None = None
    mixing: np.ndarray | None = None
    sigma: float = 0.1
    seed: int = 42
    mix_strength: float = 3.0

    def __post_init__(self):
        if self.pairs < 1 or self.dim < 1:
            raise ValueError("pairs and dim must be positive")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.structure not in ("diag", "blockmix"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.structure == "blockmix":
            if self.block < 1 or self.dim % self.block:
                raise ValueError(f"block {self.block} does not divide dim {self.dim}")
            if self.mixing is not None:
                n = self.dim // self.block
                self.mixing = np.asarray(self.mixing, dtype=np.float64)
                if self.mixing.shape != (n, self.block, self.block):
                    raise ValueError(f"mixing must have shape {(n, self.block, self.block)}")
        else:
            if self.weights is None:
                raise ValueError("diag structure needs a weight vector")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.dim,):
                raise ValueError(f"weights must have length {self.dim}")


def synth_gen(spec: SynthSpec, dtype=np.float32):
    """Return ``(X, Y, gt, transform)`` with ``gt`` matching row ``i`` to row ``i``."""
    rng = PCG32(spec.seed)
    D, n = spec.dim, spec.pairs
    if spec.structure == "blockmix":
        mixing = spec.mixing
        if mixing is None:
            nb, d = D // spec.block, spec.block
            g = rng.normals(nb * d * d).reshape(nb, d, d)
            mixing = np.eye(d) + spec.mix_strength * g / np.sqrt(d)
    draws = rng.normals(3 * D * n).reshape(n, 3, D)
    z, e1, e2 = draws[:, 0], draws[:, 1], draws[:, 2]
    if spec.structure == "blockmix":
        nb, d = mixing.shape[0], mixing.shape[1]
        tz = np.einsum("nij,pnj->pni", mixing, z.reshape(n, nb, d)).reshape(n, D)
        transform = mixing
    else:
        tz = z * spec.weights
        transform = spec.weights
    X = l2_normalize(z + spec.sigma * e1).astype(dtype)
    Y = l2_normalize(tz + spec.sigma * e2).astype(dtype)
    return X, Y, GroundTruth.one_to_one(n), transform


def split(X, Y, n_train: int):
    """First ``n_train`` pairs for training, the rest held out with 1:1 truth."""
    Xtr, Ytr = X[:n_train], Y[:n_train]
    Xte, Yte = X[n_train:], Y[n_train:]
    return (Xtr, Ytr), (Xte, Yte, GroundTruth.one_to_one(len(Xte)))


def parse_spec_text(text: str) -> SynthSpec:
    """``key=value`` lines (``#`` comments): pairs, dim, structure, block, weights, sigma, mix_strength, seed."""
    kv = parse_kv(text)
    args = {}
    for key in ("pairs", "dim", "block", "seed"):
        if key in kv:
            args[key] = int(kv[key])
    for key in ("sigma", "mix_strength"):
        if key in kv:
            args[key] = float(kv[key])
    if "structure" in kv:
        args["structure"] = kv["structure"].lower()
    if "weights" in kv:
        args["weights"] = np.array([float(t) for t in kv["weights"].replace(",", " ").split()])
    unknown = set(kv) - {"pairs", "dim", "block", "seed", "sigma", "mix_strength", "structure", "weights"}
    if unknown:
        raise ValueError(f"unknown synth keys: {', '.join(sorted(unknown))}")
    if "pairs" not in args or "dim" not in args:
        raise ValueError("synth spec needs 'pairs' and 'dim'")
    return SynthSpec(**args)


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out
