"""Synthetic mixtures with controlled separation, and dataset preprocessing."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .manifold import random_orthogonal

__all__ = [
    "SyntheticSpec",
    "TrueModel",
    "Transform",
    "CsvError",
    "synth_model",
    "sample",
    "synth_dataset",
    "check_separation",
    "eccentricity",
    "whiten",
    "pca_reduce",
    "split",
    "load_csv",
    "save_csv",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a random ground-truth mixture.

    ``c`` is the separation threshold, ``e`` the eigenvalue ratio of every
    covariance, ``structure`` either ``"random"`` (independent eigenbases) or
    ``"orthogonal"`` (one eigenbasis shared by all components).
    """

    n: int = 5
    K: int = 5
    c: float = 1.0
    e: float = 10.0
    size: int = 2500
    structure: str = "orthogonal"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.K < 1:
            raise ValueError("n and K must be >= 1")
        if not self.c > 0:
            raise ValueError("separation c must be positive")
        if not self.e >= 1:
            raise ValueError("eccentricity e must be >= 1")
        if self.n == 1 and self.e != 1:
            raise ValueError("a 1-dimensional covariance has eccentricity 1")
        if self.size < self.K:
            raise ValueError("size must be >= K")
        if self.structure not in ("random", "orthogonal"):
            raise ValueError(f"unknown structure {self.structure!r}")


@dataclass
class TrueModel:
    """A dense Gaussian mixture: weights, means and full covariances."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    structure: str = "dense"

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def n(self):
        return self.means.shape[1]

    def log_densities(self, X):
        """``b x K`` matrix of ``log w_k + log N(x_i; mean_k, cov_k)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((X.shape[0], self.K))
        for k in range(self.K):
            L = np.linalg.cholesky(self.covariances[k])
            z = np.linalg.solve(L, (X - self.means[k]).T)
            half_logdet = np.sum(np.log(np.diag(L)))
            out[:, k] = (
                math.log(self.weights[k])
                - half_logdet
                - 0.5 * self.n * math.log(2 * math.pi)
                - 0.5 * np.sum(z * z, axis=0)
            )
        return out

    def to_dict(self):
        return {
            "format": "ftgmm.true_model",
            "version": 1,
            "n": self.n,
            "K": self.K,
            "structure": self.structure,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "ftgmm.true_model":
            raise ValueError("not a mixture model (format != 'ftgmm.true_model')")
        n, K = int(d["n"]), int(d["K"])
        return cls(
            weights=np.asarray(d["weights"], dtype=float).reshape(K),
            means=np.asarray(d["means"], dtype=float).reshape(K, n),
            covariances=np.asarray(d["covariances"], dtype=float).reshape(K, n, n),
            structure=d.get("structure", "dense"),
        )


def eccentricity(cov):
    w = np.linalg.eigvalsh(cov)
    return float(w[-1] / w[0])


def _eigenvalues(n, e, rng):
    # log-uniform in [1, e] with both endpoints pinned, so max/min == e exactly
    if n == 1:
        return np.ones(1)
    u = rng.uniform(0.0, 1.0, n)
    ends = rng.permutation(n)[:2]
    u[ends[0]], u[ends[1]] = 0.0, 1.0
    lam = e**u
    lam[ends[0]], lam[ends[1]] = 1.0, float(e)
    return lam


def _required_scale(means, traces, c):
    worst = 0.0
    for i, j in itertools.combinations(range(len(means)), 2):
        dist = np.linalg.norm(means[i] - means[j])
        need = c * max(traces[i], traces[j])
        if dist == 0:
            return math.inf
        worst = max(worst, need / dist)
    return worst


def synth_model(spec: SyntheticSpec) -> TrueModel:
    """Random mixture satisfying the separation and eccentricity controls.

    Means start uniform in ``[-1, 1]^n`` and are pushed away from their
    centroid by the smallest factor meeting the separation bound.
    """
    rng = np.random.default_rng(spec.seed)
    n, K = spec.n, spec.K
    shared = random_orthogonal(n, rng) if spec.structure == "orthogonal" else None
    covs = np.empty((K, n, n))
    for k in range(K):
        Q = shared if shared is not None else random_orthogonal(n, rng)
        lam = _eigenvalues(n, spec.e, rng)
        C = (Q * lam) @ Q.T
        covs[k] = 0.5 * (C + C.T)
    means = rng.uniform(-1.0, 1.0, (K, n))
    if K > 1:
        traces = np.trace(covs, axis1=1, axis2=2)
        while True:
            scale = _required_scale(means, traces, spec.c)
            if math.isfinite(scale):
                break
            means = rng.uniform(-1.0, 1.0, (K, n))
        if scale > 1.0:
            centroid = means.mean(axis=0)
            # tiny margin keeps the binding pair on the right side of the bound
            means = centroid + (means - centroid) * scale * (1.0 + 1e-9)
    return TrueModel(np.full(K, 1.0 / K), means, covs, spec.structure)


def sample(model: TrueModel, size: int, seed=None) -> np.ndarray:
    """Ancestral sampling: component from the weights, then a Gaussian draw."""
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.K, size=size, p=model.weights)
    z = rng.standard_normal((size, model.n))
    X = np.empty((size, model.n))
    for k in range(model.K):
        idx = comp == k
        L = np.linalg.cholesky(model.covariances[k])
        X[idx] = model.means[k] + z[idx] @ L.T
    return X


def synth_dataset(spec: SyntheticSpec):
    """``(model, X)`` for ``spec``; the draw is seeded by ``(spec.seed, 2)``."""
    model = synth_model(spec)
    return model, sample(model, spec.size, seed=[spec.seed, 2])


def check_separation(model: TrueModel, c: float) -> bool:
    """``||mu_i - mu_j|| >= c * max(tr S_i, tr S_j)`` for every pair."""
    if model.K < 2:
        return True
    traces = np.trace(model.covariances, axis1=1, axis2=2)
    for i, j in itertools.combinations(range(model.K), 2):
        if np.linalg.norm(model.means[i] - model.means[j]) < c * max(traces[i], traces[j]):
            return False
    return True


# -- preprocessing --------------------------------------------------------------


@dataclass
class Transform:
    """Affine preprocessing ``x -> (x - mean) @ matrix``.

    When PCA ran first, ``matrix`` already folds the PCA basis in and
    ``pca`` keeps its record (basis, explained-variance fractions).
    """

    mean: np.ndarray
    matrix: np.ndarray
    pca: dict | None = None
    floored: bool = False

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) @ self.matrix

    def invert(self, Y):
        """Back to input coordinates (square, full-rank transforms only)."""
        return np.asarray(Y, dtype=float) @ np.linalg.inv(self.matrix) + self.mean

    @property
    def log_abs_det(self):
        """``log|det(matrix)|``; the density Jacobian of the transform."""
        return float(np.linalg.slogdet(self.matrix)[1])

    def model_to_input(self, model: TrueModel) -> TrueModel:
        """Map a mixture fitted in transformed space back to input space."""
        Minv = np.linalg.inv(self.matrix)
        means = model.means @ Minv + self.mean
        covs = np.einsum("ji,kjl,lm->kim", Minv, model.covariances, Minv)
        return TrueModel(model.weights.copy(), means, covs, model.structure)

    def model_from_input(self, model: TrueModel) -> TrueModel:
        """Express an input-space mixture in transformed coordinates."""
        M = self.matrix
        means = (model.means - self.mean) @ M
        covs = np.einsum("ji,kjl,lm->kim", M, model.covariances, M)
        return TrueModel(model.weights.copy(), means, covs, model.structure)

    def to_dict(self):
        return {
            "format": "ftgmm.transform",
            "version": 1,
            "mean": self.mean.tolist(),
            "matrix": self.matrix.tolist(),
            "pca": self.pca,
            "floored": self.floored,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "ftgmm.transform":
            raise ValueError("not a transform (format != 'ftgmm.transform')")
        return cls(
            np.asarray(d["mean"], dtype=float),
            np.atleast_2d(np.asarray(d["matrix"], dtype=float)),
            d.get("pca"),
            bool(d.get("floored", False)),
        )


def whiten(X, floor=1e-10):
    """Fit a whitening transform on ``X``.

    Uses the eigendecomposition of the (biased) empirical covariance,
    ``W = E diag(1 / sqrt(eigenvalues))``. Eigenvalues below ``floor`` are
    raised to it and the transform is flagged.

    Returns:
        ``(X_white, transform)``
    """
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    w, E = np.linalg.eigh(cov)
    floored = bool(np.any(w < floor))
    w = np.maximum(w, floor)
    T = Transform(mean, E / np.sqrt(w))
    T.floored = floored
    return T.apply(X), T


def pca_reduce(X, var_threshold=0.94, max_dim=101):
    """Project onto the leading principal components.

    Keeps the fewest components whose cumulative explained variance reaches
    ``var_threshold``, but never more than ``max_dim``.

    Returns:
        ``(X_reduced, transform)``; ``transform.pca`` records the fractions.
    """
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    w, E = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, E = np.clip(w[order], 0.0, None), E[:, order]
    total = w.sum()
    frac = w / total if total > 0 else np.full_like(w, 1.0 / len(w))
    cum = np.cumsum(frac)
    hits = np.nonzero(cum >= var_threshold - 1e-12)[0]
    d = int(hits[0]) + 1 if len(hits) else len(w)
    d = min(d, max_dim)
    record = {
        "dim": d,
        "explained": frac.tolist(),
        "achieved": float(cum[d - 1]),
        "threshold": var_threshold,
        "met": bool(cum[d - 1] >= var_threshold - 1e-12),
    }
    T = Transform(mean, E[:, :d], pca=record)
    return T.apply(X), T


def compose(first: Transform, second: Transform) -> Transform:
    """``second`` applied after ``first`` as a single affine map."""
    # ((x - m1) A - m2) B = (x - m1 - m2 A^+) A B, with A^+ a right inverse of A
    shift = second.mean @ np.linalg.pinv(first.matrix)
    return Transform(first.mean + shift, first.matrix @ second.matrix, first.pca or second.pca,
                     first.floored or second.floored)


def split(X, train_fraction=0.8, seed=None):
    """Seeded shuffle; the first ``floor(train_fraction * l)`` rows train."""
    X = np.asarray(X)
    l = X.shape[0]
    if l < 5:
        raise ValueError("need at least 5 rows to split")
    idx = split_indices(l, train_fraction, seed)
    return X[idx[0]], X[idx[1]]


def split_indices(l, train_fraction=0.8, seed=None):
    perm = np.random.default_rng(seed).permutation(l)
    n_train = int(math.floor(train_fraction * l))
    return perm[:n_train], perm[n_train:]


# -- CSV -------------------------------------------------------------------------


class CsvError(ValueError):
    pass


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> np.ndarray:
    """Read a rectangular numeric CSV (comma-separated, '.' decimals).

    A first row containing any non-numeric cell is treated as a header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise CsvError(f"{path}: empty file")
    start = 0 if all(_is_number(c) for c in rows[0]) else 1
    if start == len(rows):
        raise CsvError(f"{path}: header only, no data rows")
    width = len(rows[start])
    out = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise CsvError(f"{path}: row {i} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row, start=1):
            try:
                out[i - start - 1, j - 1] = float(cell)
            except ValueError:
                raise CsvError(f"{path}: row {i}, column {j}: not a number: {cell!r}") from None
    return out


def save_csv(path, X, header=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in X:
        writer.writerow([repr(float(v)) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
