"""Error indices for fitted mixtures and the per-run fit report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .data import TrueModel
from .model import GmmParams, nll

__all__ = [
    "as_dense",
    "match_components",
    "cov_err",
    "mean_err",
    "avg_nll",
    "dense_avg_nll",
    "FitReport",
]


def as_dense(model) -> TrueModel:
    """Dense ``(weights, means, covariances)`` view of a fitted or true model."""
    if isinstance(model, TrueModel):
        return model
    if isinstance(model, GmmParams):
        precisions = model.precisions()
        try:
            covs = np.linalg.inv(precisions)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError("estimated precision is singular") from exc
        return TrueModel(model.weights(), model.mu.copy(), covs, model.mode)
    raise TypeError(f"cannot interpret {type(model).__name__} as a mixture")


def match_components(est, truth) -> np.ndarray:
    """Minimum-cost assignment on mean distances.

    Returns ``perm`` such that estimated component ``perm[k]`` is matched to
    true component ``k``.
    """
    est, truth = as_dense(est), as_dense(truth)
    if est.K != truth.K:
        raise ValueError(f"component counts differ: {est.K} vs {truth.K}")
    cost = np.linalg.norm(truth.means[:, None, :] - est.means[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(truth.K, dtype=int)
    perm[rows] = cols
    return perm


def cov_err(est, truth, perm=None) -> float:
    """Sum over components of the Frobenius norm of the covariance error."""
    est, truth = as_dense(est), as_dense(truth)
    if perm is None:
        perm = match_components(est, truth)
    diff = est.covariances[perm] - truth.covariances
    return float(np.sum(np.linalg.norm(diff, axis=(1, 2))))


def mean_err(est, truth, perm=None) -> float:
    """Sum over components of ``1 - cos(angle(mu_hat, mu))``.

    A zero vector on either side contributes 1 (cosine taken as 0).
    """
    est, truth = as_dense(est), as_dense(truth)
    if perm is None:
        perm = match_components(est, truth)
    a, b = est.means[perm], truth.means
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.where(denom > 0, np.sum(a * b, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.sum(1.0 - cos))


def avg_nll(X, params: GmmParams) -> float:
    """Per-point negative log-likelihood."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return nll(X, params) / X.shape[0]


def dense_avg_nll(X, model: TrueModel) -> float:
    """Per-point negative log-likelihood under a dense mixture."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return float(-np.mean(logsumexp(model.log_densities(X), axis=1)))


@dataclass
class FitReport:
    """Per-epoch traces and final scores of one fit."""

    train_objective: list = field(default_factory=list)
    train_avg_nll: list = field(default_factory=list)
    test_avg_nll: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    cov_err: float | None = None
    mean_err: float | None = None
    true_test_avg_nll: float | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None
    status: str = "ok"

    @property
    def epochs(self):
        return len(self.train_objective)

    def to_dict(self):
        d = asdict(self)
        d["format"] = "ftgmm.fit_report"
        d["version"] = 1
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        return cls(**d)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def trace_csv(self) -> str:
        """``epoch,nll,seconds`` with ``nll`` the held-out per-point NLL."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "nll", "seconds"])
        nlls = self.test_avg_nll if self.test_avg_nll else self.train_avg_nll
        for i, (v, s) in enumerate(zip(nlls, self.epoch_seconds), start=1):
            w.writerow([i, repr(float(v)), repr(float(s))])
        return buf.getvalue()
