"""Flexibly-tied Gaussian mixture model.

Every component precision shares one dense factor ``U``::

    P_k = lam_k * U @ diag(d_k) @ U.T

with ``d_k = softplus(dtilde_k)`` and mixture weights given by a softmax of
``alpha`` (the last logit pinned to zero). Three parameterizations of ``U`` are
supported:

``unconstrained``
    ``U`` is a free matrix and ``lam_k = 1``; the log-determinant is dense.
``plu``
    ``U = L (Utri + diag(s))``; the log-determinant is ``sum(log s**2)``.
``orthogonal``
    ``U`` lives on SO(n) and ``lam_k = softplus(lam_raw_k)``; the
    log-determinant is ``n log lam_k + sum(log d_k)``.

The fitted objective is the mixture negative log-likelihood plus negative log
priors on ``U``, the diagonals, the means and the weights (MAP estimation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

__all__ = [
    "MODES",
    "NumericError",
    "PluParams",
    "GmmParams",
    "PriorConfig",
    "softplus",
    "softplus_inv",
    "softplus_grad",
    "weights_from_alpha",
    "alpha_from_weights",
    "plu_build",
    "plu_logdet",
    "log_det_precisions",
    "component_log_densities",
    "component_log_density",
    "nll",
    "reg_wishart",
    "reg_gamma",
    "reg_mean",
    "reg_dirichlet",
    "regularizers",
    "objective",
    "grad",
    "kmeans_pp",
    "init_params",
]

MODES = ("unconstrained", "plu", "orthogonal")
LOG_2PI = math.log(2.0 * math.pi)


class NumericError(ArithmeticError):
    """A non-finite value appeared in a model quantity."""


def softplus(x, omega=1.0):
    """``log(1 + exp(omega * x)) / omega`` without overflow."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    x = np.asarray(x, dtype=float)
    wx = omega * x
    safe = np.minimum(wx, 30.0)
    return np.where(wx > 30.0, x, np.log1p(np.exp(safe)) / omega)


def softplus_inv(y, omega=1.0):
    """Inverse of :func:`softplus` on the positive reals."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("softplus_inv is only defined for positive inputs")
    wy = omega * y
    # log(expm1(wy)) = wy + log(-expm1(-wy)) is the stable form for large wy
    return (wy + np.log(-np.expm1(-wy))) / omega


def softplus_grad(x, omega=1.0):
    return expit(omega * np.asarray(x, dtype=float))


def weights_from_alpha(alpha):
    """Mixture weights from the ``K - 1`` free logits (``alpha_K = 0``)."""
    a = np.append(np.asarray(alpha, dtype=float), 0.0)
    return np.exp(a - logsumexp(a))


def alpha_from_weights(weights):
    w = np.asarray(weights, dtype=float)
    return np.log(w[:-1]) - np.log(w[-1])


@dataclass
class PluParams:
    """Free coordinates of ``U = L (Utri + diag(s))``.

    Only the strictly lower part of ``L_raw`` and the strictly upper part of
    ``Utri_raw`` are used; ``L`` gets a unit diagonal.
    """

    L_raw: np.ndarray
    Utri_raw: np.ndarray
    s: np.ndarray

    @classmethod
    def identity(cls, n):
        return cls(np.zeros((n, n)), np.zeros((n, n)), np.ones(n))

    def copy(self):
        return PluParams(self.L_raw.copy(), self.Utri_raw.copy(), self.s.copy())


def plu_build(p: PluParams) -> np.ndarray:
    """Assemble ``U = L (Utri + diag(s))``."""
    s = np.asarray(p.s, dtype=float)
    if np.any(s == 0):
        raise ZeroDivisionError("PLU diagonal has a zero entry; U is singular")
    n = s.shape[0]
    L = np.tril(p.L_raw, -1) + np.eye(n)
    M = np.triu(p.Utri_raw, 1) + np.diag(s)
    return L @ M


def plu_logdet(p: PluParams, d_k) -> float:
    """``log det(U diag(d_k) U^T)`` for a PLU-parameterized ``U``."""
    s = np.asarray(p.s, dtype=float)
    if np.any(s == 0):
        raise ZeroDivisionError("PLU diagonal has a zero entry; U is singular")
    return float(np.sum(np.log(s**2)) + np.sum(np.log(d_k)))


@dataclass
class GmmParams:
    """Parameter pack in unconstrained / manifold coordinates.

    Attributes:
        mode: one of :data:`MODES`.
        U: shared ``n x n`` factor (``None`` in plu mode).
        dtilde: ``K x n`` pre-softplus diagonals.
        lam: ``K`` pre-softplus component scales (used in orthogonal mode).
        mu: ``K x n`` means.
        alpha: ``K - 1`` weight logits.
        plu: PLU coordinates of ``U`` (plu mode only).
        omega: softplus sharpness.
    """

    mode: str
    U: np.ndarray | None
    dtilde: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    plu: PluParams | None = None
    omega: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "plu" and self.plu is None:
            raise ValueError("plu mode requires PluParams")
        if self.mode != "plu" and self.U is None:
            raise ValueError(f"{self.mode} mode requires U")
        K, n = np.shape(self.mu)
        expected = {"dtilde": (K, n), "lam": (K,), "alpha": (K - 1,)}
        if self.U is not None:
            expected["U"] = (n, n)
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if self.plu is not None and np.shape(self.plu.s) != (n,):
            raise ValueError(f"plu.s has shape {np.shape(self.plu.s)}, expected {(n,)}")

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[1]

    def factor(self) -> np.ndarray:
        """Dense shared factor ``U``."""
        if self.mode == "plu":
            return plu_build(self.plu)
        return self.U

    def diagonals(self) -> np.ndarray:
        return softplus(self.dtilde, self.omega)

    def scales(self) -> np.ndarray:
        if self.mode == "orthogonal":
            return softplus(self.lam, self.omega)
        return np.ones(self.K)

    def weights(self) -> np.ndarray:
        return weights_from_alpha(self.alpha)

    def precisions(self) -> np.ndarray:
        """Dense ``K x n x n`` precision matrices."""
        U = self.factor()
        d = self.diagonals()
        lam = self.scales()
        return lam[:, None, None] * np.einsum("ij,kj,lj->kil", U, d, U)

    def covariances(self) -> np.ndarray:
        return np.linalg.inv(self.precisions())

    # -- block access used by the optimizers ---------------------------------

    def blocks(self) -> dict[str, np.ndarray]:
        """Named free blocks, in a fixed order."""
        out: dict[str, np.ndarray] = {}
        if self.mode == "plu":
            out["L_raw"] = self.plu.L_raw
            out["Utri_raw"] = self.plu.Utri_raw
            out["s"] = self.plu.s
        else:
            out["U"] = self.U
        out["dtilde"] = self.dtilde
        if self.mode == "orthogonal":
            out["lam"] = self.lam
        out["mu"] = self.mu
        out["alpha"] = self.alpha
        return out

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "GmmParams":
        upd = {k: v for k, v in blocks.items() if k in ("U", "dtilde", "lam", "mu", "alpha")}
        new = replace(self, **upd)
        if self.mode == "plu" and any(k in blocks for k in ("L_raw", "Utri_raw", "s")):
            new.plu = PluParams(
                blocks.get("L_raw", self.plu.L_raw),
                blocks.get("Utri_raw", self.plu.Utri_raw),
                blocks.get("s", self.plu.s),
            )
        return new

    def copy(self) -> "GmmParams":
        return GmmParams(
            self.mode,
            None if self.U is None else self.U.copy(),
            self.dtilde.copy(),
            self.lam.copy(),
            self.mu.copy(),
            self.alpha.copy(),
            None if self.plu is None else self.plu.copy(),
            self.omega,
        )

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "format": "ftgmm.params",
            "version": 1,
            "mode": self.mode,
            "n": self.n,
            "K": self.K,
            "omega": self.omega,
            "U": None if self.U is None else self.U.tolist(),
            "dtilde": self.dtilde.tolist(),
            "lam": self.lam.tolist(),
            "mu": self.mu.tolist(),
            "alpha": self.alpha.tolist(),
        }
        if self.plu is not None:
            d["plu"] = {
                "L_raw": self.plu.L_raw.tolist(),
                "Utri_raw": self.plu.Utri_raw.tolist(),
                "s": self.plu.s.tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        if d.get("format") != "ftgmm.params":
            raise ValueError("not a parameter pack (format != 'ftgmm.params')")
        n, K = int(d["n"]), int(d["K"])
        arr = lambda key, shape: np.asarray(d[key], dtype=float).reshape(shape)  # noqa: E731
        plu = None
        if d.get("plu") is not None:
            p = d["plu"]
            plu = PluParams(
                np.asarray(p["L_raw"], dtype=float).reshape(n, n),
                np.asarray(p["Utri_raw"], dtype=float).reshape(n, n),
                np.asarray(p["s"], dtype=float).reshape(n),
            )
        return cls(
            mode=d["mode"],
            U=None if d.get("U") is None else arr("U", (n, n)),
            dtilde=arr("dtilde", (K, n)),
            lam=arr("lam", (K,)),
            mu=arr("mu", (K, n)),
            alpha=arr("alpha", (K - 1,)),
            plu=plu,
            omega=float(d.get("omega", 1.0)),
        )


@dataclass
class PriorConfig:
    """Hyperparameters of the MAP regularizers.

    ``S_inv`` is the inverse Wishart scale, ``gamma_s`` the Gamma rate on the
    diagonals, ``shrinkage`` the mean-prior precision multiplier, ``mu_p`` the
    prior mean and ``zeta`` the Dirichlet concentration. ``weights`` scales the
    four terms (wishart, gamma, mean, dirichlet).
    """

    S_inv: np.ndarray
    gamma_s: float
    mu_p: np.ndarray
    shrinkage: float = 0.01
    zeta: float = 0.99
    wishart_dof: float | None = None
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    positive_psi3: bool = False

    def __post_init__(self):
        self.S_inv = np.asarray(self.S_inv, dtype=float)
        self.mu_p = np.asarray(self.mu_p, dtype=float)
        if not self.shrinkage > 0:
            raise ValueError("shrinkage must be positive")
        if not self.gamma_s > 0:
            raise ValueError("gamma_s must be positive")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not np.allclose(self.S_inv, self.S_inv.T):
            raise ValueError("S_inv must be symmetric")
        if np.linalg.eigvalsh(self.S_inv).min() <= 0:
            raise ValueError("S_inv must be positive definite")
        if self.wishart_dof is None:
            self.wishart_dof = self.S_inv.shape[0] + 2.0

    @classmethod
    def from_data(cls, X, K, **kwargs) -> "PriorConfig":
        """Scales proportional to the data covariance: ``S = Cov(X) / K^(2/n)``."""
        X = np.asarray(X, dtype=float)
        n = X.shape[1]
        cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
        factor = K ** (2.0 / n)
        S_inv = factor * np.linalg.inv(cov)
        S_inv = 0.5 * (S_inv + S_inv.T)
        gamma_s = float(np.trace(cov)) / (n * factor)
        return cls(S_inv=S_inv, gamma_s=gamma_s, mu_p=X.mean(axis=0), **kwargs)

    @classmethod
    def default(cls, n, **kwargs) -> "PriorConfig":
        return cls(S_inv=np.eye(n), gamma_s=1.0, mu_p=np.zeros(n), **kwargs)

    def to_dict(self) -> dict:
        return {
            "S_inv": self.S_inv.tolist(),
            "gamma_s": self.gamma_s,
            "mu_p": self.mu_p.tolist(),
            "shrinkage": self.shrinkage,
            "zeta": self.zeta,
            "wishart_dof": self.wishart_dof,
            "weights": list(self.weights),
            "positive_psi3": self.positive_psi3,
        }

    @classmethod
    def from_dict(cls, d) -> "PriorConfig":
        d = dict(d)
        d["weights"] = tuple(d.get("weights", (1.0, 1.0, 1.0, 1.0)))
        return cls(**d)


# -- densities -------------------------------------------------------------------


def log_det_precisions(params: GmmParams) -> np.ndarray:
    """``log det P_k`` for every component, using the mode's shortcut."""
    sum_log_d = np.sum(np.log(params.diagonals()), axis=1)
    if params.mode == "orthogonal":
        return params.n * np.log(params.scales()) + sum_log_d
    if params.mode == "plu":
        s = params.plu.s
        if np.any(s == 0):
            raise ZeroDivisionError("PLU diagonal has a zero entry; U is singular")
        return np.sum(np.log(s**2)) + sum_log_d
    sign, logabsdet = np.linalg.slogdet(params.U)
    if sign == 0:
        raise NumericError("U is singular")
    return 2.0 * logabsdet + sum_log_d


def _projected(X, params, U):
    # z_ik = U^T (x_i - mu_k), stored as rows: (b, K, n)
    E = X[:, None, :] - params.mu[None, :, :]
    return E, E @ U


def component_log_densities(X, params: GmmParams) -> np.ndarray:
    """``b x K`` matrix of ``log N(x_i; mu_k, P_k^{-1})``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = params.factor()
    d = params.diagonals()
    lam = params.scales()
    _, Z = _projected(X, params, U)
    quad = lam[None, :] * np.einsum("bkn,kn->bk", Z * Z, d)
    logdet = log_det_precisions(params)
    out = 0.5 * logdet[None, :] - 0.5 * params.n * LOG_2PI - 0.5 * quad
    if not np.all(np.isfinite(out)):
        bad = np.unique(np.nonzero(~np.isfinite(out))[1])
        raise NumericError(f"non-finite log density in component(s) {bad.tolist()}")
    return out


def component_log_density(x, k, params: GmmParams) -> float:
    return float(component_log_densities(np.asarray(x, dtype=float)[None, :], params)[0, k])


def nll(batch, params: GmmParams) -> float:
    """Negative log-likelihood summed over the rows of ``batch``."""
    logp = component_log_densities(batch, params)
    a = np.append(params.alpha, 0.0)
    logw = a - logsumexp(a)
    return float(-np.sum(logsumexp(logp + logw[None, :], axis=1)))


# -- regularizers ----------------------------------------------------------------


def reg_wishart(U, cfg: PriorConfig) -> float:
    """``tr(U U^T S^-1)/2 - log det(U U^T)/2``."""
    U = np.asarray(U, dtype=float)
    sign, logabsdet = np.linalg.slogdet(U)
    if sign == 0:
        raise ValueError("det(U U^T) must be positive")
    return float(0.5 * np.sum(U * (cfg.S_inv @ U)) - logabsdet)


def reg_gamma(dtilde, cfg: PriorConfig, omega=1.0) -> float:
    """Gamma negative log prior on the softplus diagonals."""
    d = softplus(dtilde, omega)
    n = d.shape[-1]
    return float(np.sum(0.5 * cfg.gamma_s * d - 0.5 * n * np.log(d)))


def reg_mean(params: GmmParams, cfg: PriorConfig) -> float:
    """Conjugate Gaussian negative log prior on the means.

    The log-determinant term enters with ``-1/2`` (proper negative log
    density); ``cfg.positive_psi3`` flips it to ``+1/2``.
    """
    U = params.factor()
    d = params.diagonals()
    lam = params.scales()
    W = (params.mu - cfg.mu_p[None, :]) @ U
    quad = 0.5 * cfg.shrinkage * lam * np.sum(d * W * W, axis=1)
    logdet = params.n * math.log(cfg.shrinkage / (2.0 * math.pi)) + log_det_precisions(params)
    sign = 0.5 if cfg.positive_psi3 else -0.5
    return float(np.sum(quad + sign * logdet))


def reg_dirichlet(alpha, cfg: PriorConfig) -> float:
    """Symmetric Dirichlet negative log prior in logit coordinates."""
    a = np.append(np.asarray(alpha, dtype=float), 0.0)
    K = a.shape[0]
    return float(K * cfg.zeta * logsumexp(a) - cfg.zeta * np.sum(a))


def regularizers(params: GmmParams, cfg: PriorConfig) -> dict[str, float]:
    """The four regularizer values (unweighted).

    The Wishart term is a constant on SO(n) and is reported as 0 in orthogonal
    mode.
    """
    if params.mode == "orthogonal":
        psi1 = 0.0
    else:
        psi1 = reg_wishart(params.factor(), cfg)
    return {
        "wishart": psi1,
        "gamma": reg_gamma(params.dtilde, cfg, params.omega),
        "mean": reg_mean(params, cfg),
        "dirichlet": reg_dirichlet(params.alpha, cfg),
    }


def objective(batch, params: GmmParams, cfg: PriorConfig, scale=1.0) -> float:
    """``nll(batch) + scale * weighted regularizers``.

    Use ``scale = len(batch) / n_train`` for minibatches so that the minibatch
    objectives over a partition of the data sum to the full objective.
    """
    regs = regularizers(params, cfg)
    w = cfg.weights
    total = w[0] * regs["wishart"] + w[1] * regs["gamma"] + w[2] * regs["mean"] + w[3] * regs["dirichlet"]
    return nll(batch, params) + scale * total


def _plu_chain(G_U, p: PluParams):
    """Pull a gradient w.r.t. dense ``U`` back to the PLU coordinates."""
    n = p.s.shape[0]
    L = np.tril(p.L_raw, -1) + np.eye(n)
    M = np.triu(p.Utri_raw, 1) + np.diag(p.s)
    gL = np.tril(G_U @ M.T, -1)
    gM = L.T @ G_U
    return gL, np.triu(gM, 1), np.diag(gM).copy()


def grad(batch, params: GmmParams, cfg: PriorConfig, scale=1.0) -> GmmParams:
    """Exact Euclidean gradient of :func:`objective`, shaped like ``params``.

    In orthogonal mode the ``U`` block is the ambient gradient of the objective
    as written (log-determinant taken from the orthogonal shortcut); the
    optimizer projects it onto the tangent space.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    b = X.shape[0]
    n, K, mode = params.n, params.K, params.mode
    U = params.factor()
    d = params.diagonals()
    dsig = softplus_grad(params.dtilde, params.omega)
    lam = params.scales()
    w1, w2, w3, w4 = cfg.weights
    ld_sign = 0.5 if cfg.positive_psi3 else -0.5

    E, Z = _projected(X, params, U)
    logp = component_log_densities(X, params)
    a = np.append(params.alpha, 0.0)
    logw = a - logsumexp(a)
    joint = logp + logw[None, :]
    R = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))  # responsibilities
    Rk = R.sum(axis=0)

    # likelihood part; every gradient is of the negative log-likelihood
    DZ = Z * d[None, :, :]  # (b, K, n): d_k * z_ik
    g_mu = -lam[:, None] * np.einsum("bk,bkn->kn", R, DZ) @ U.T
    g_d = -0.5 * (Rk[:, None] / d - lam[:, None] * np.einsum("bk,bkn->kn", R, Z * Z))
    g_U = np.einsum("bk,k,bki,bkj->ij", R, lam, E, DZ)
    g_lam = np.zeros(K)
    if mode == "orthogonal":
        g_lam = -(0.5 * n * Rk / lam - 0.5 * np.einsum("bk,bkn->k", R, Z * Z * d[None]))
    pi = np.exp(logw)
    g_alpha = (-Rk + b * pi)[:-1]
    # coefficient of d(log|det U|)/dU (dense modes) or d(sum log|s|)/ds (plu)
    logdet_U_coef = -float(b)

    # regularizers, scaled
    Wm = (params.mu - cfg.mu_p[None, :]) @ U  # (K, n)
    c3 = scale * w3
    g_mu = g_mu + c3 * cfg.shrinkage * lam[:, None] * (Wm * d) @ U.T
    g_d = g_d + c3 * (0.5 * cfg.shrinkage * lam[:, None] * Wm * Wm + ld_sign / d)
    g_U = g_U + c3 * cfg.shrinkage * np.einsum("k,ki,kj->ij", lam, params.mu - cfg.mu_p[None, :], Wm * d)
    if mode == "orthogonal":
        g_lam = g_lam + c3 * (0.5 * cfg.shrinkage * np.sum(d * Wm * Wm, axis=1) + ld_sign * n / lam)
    else:
        logdet_U_coef += c3 * ld_sign * 2.0 * K
    g_d = g_d + scale * w2 * (0.5 * cfg.gamma_s - 0.5 * n / d)
    g_alpha = g_alpha + scale * w4 * cfg.zeta * (K * pi - 1.0)[:-1]
    if mode != "orthogonal":
        g_U = g_U + scale * w1 * (cfg.S_inv @ U)
        logdet_U_coef -= scale * w1

    g_dtilde = g_d * dsig
    if mode == "orthogonal":
        g_lam_raw = g_lam * softplus_grad(params.lam, params.omega)
    else:
        g_lam_raw = np.zeros_like(params.lam)

    out = params.copy()
    out.dtilde, out.lam, out.mu, out.alpha = g_dtilde, g_lam_raw, g_mu, g_alpha
    if mode == "unconstrained":
        out.U = g_U + logdet_U_coef * np.linalg.inv(U).T
    elif mode == "orthogonal":
        out.U = g_U
    else:
        gL, gUt, gs = _plu_chain(g_U, params.plu)
        gs = gs + logdet_U_coef / params.plu.s
        out.plu = PluParams(gL, gUt, gs)
    for name, value in out.blocks().items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite gradient in block {name!r}")
    return out


# -- initialization ------------------------------------------------------------


def kmeans_pp(X, K, seed=None) -> np.ndarray:
    """k-means++ seeding (greedy variant) of ``K`` centers."""
    from sklearn.cluster import kmeans_plusplus

    centers, _ = kmeans_plusplus(np.asarray(X, dtype=float), K, random_state=seed)
    return centers


def init_params(X, K, mode="orthogonal", seed=None, omega=1.0) -> GmmParams:
    """Identity precisions, uniform weights and k-means++ means."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < K:
        raise ValueError(f"need at least K={K} rows to initialize, got {X.shape[0]}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = X.shape[1]
    mu = kmeans_pp(X, K, seed=seed)
    one = float(softplus_inv(1.0, omega))
    plu = PluParams.identity(n) if mode == "plu" else None
    return GmmParams(
        mode=mode,
        U=None if mode == "plu" else np.eye(n),
        dtilde=np.full((K, n), one),
        lam=np.full(K, one),
        mu=mu,
        alpha=np.zeros(K - 1),
        plu=plu,
        omega=omega,
    )
