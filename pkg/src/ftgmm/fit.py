"""Run configuration, the epoch loop and the end-to-end fitting pipeline."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import _engine, optim
from .data import TrueModel, Transform, compose, pca_reduce, split_indices, whiten
from .metrics import FitReport, as_dense, avg_nll, cov_err, dense_avg_nll, match_components, mean_err
from .model import GmmParams, NumericError, PriorConfig, grad, init_params, objective

__all__ = ["METHODS", "RunConfig", "FitError", "FitResult", "fit", "run_pipeline", "prepare"]

# name -> (optimizer, geometry, mode)
METHODS = {
    "adam-euclidean": ("adam", "euclidean", "unconstrained"),
    "acclip-euclidean": ("acclip", "euclidean", "unconstrained"),
    "adam-manifold": ("adam", "manifold", "orthogonal"),
    "acclip-manifold": ("acclip", "manifold", "orthogonal"),
    "adam-euclidean-plu": ("adam", "euclidean", "plu"),
    "acclip-euclidean-plu": ("acclip", "euclidean", "plu"),
}

DEFAULT_ETA = {"adam": 0.01, "acclip": 0.05, "sgd": 0.05}


class FitError(RuntimeError):
    """A fit stopped on a numeric failure; ``report`` holds the partial trace."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class RunConfig:
    """Everything needed to reproduce one fit."""

    mode: str = "orthogonal"
    optimizer: str = "acclip"
    geometry: str = "manifold"
    K: int = 5
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    eta_max: float | None = None
    warmup_fraction: float = 0.05
    floor_ratio: float = 0.01
    clip_mode: str = "acclip"
    tau0: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    clip_alpha: float = 2.0
    clip_eps: float = 1e-8
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    retraction: str = "qr"
    tangent_form: str = "skew"
    reorth_every: int = 1000
    omega: float = 1.0
    zeta: float = 0.99
    shrinkage: float = 0.01
    prior_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    positive_psi3: bool = False
    train_fraction: float = 0.8
    pca: bool = False
    pca_threshold: float = 0.94
    pca_max_dim: int = 101
    engine: str = "numba"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.prior_weights = tuple(self.prior_weights)
        if self.optimizer not in ("adam", "acclip", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.geometry == "manifold" and self.mode != "orthogonal":
            raise ValueError("the manifold optimizer requires orthogonal mode")
        if self.mode == "orthogonal" and self.geometry != "manifold":
            raise ValueError("orthogonal mode requires the manifold optimizer")
        if self.mode == "plu" and self.geometry != "euclidean":
            raise ValueError("plu mode requires a euclidean optimizer")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.engine not in ("numba", "numpy"):
            raise ValueError(f"unknown engine {self.engine!r}")
        self.optimizer_config()  # validates the optimizer fields

    @classmethod
    def for_method(cls, method: str, **overrides) -> "RunConfig":
        try:
            opt, geometry, mode = METHODS[method]
        except KeyError:
            raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}") from None
        return cls(optimizer=opt, geometry=geometry, mode=mode, **overrides)

    @property
    def method(self) -> str:
        for name, spec in METHODS.items():
            if spec == (self.optimizer, self.geometry, self.mode):
                return name
        return f"{self.optimizer}-{self.geometry}-{self.mode}"

    @property
    def learning_rate(self) -> float:
        return self.eta_max if self.eta_max is not None else DEFAULT_ETA[self.optimizer]

    def optimizer_config(self) -> optim.OptimizerConfig:
        clip_mode = "acclip" if self.optimizer == "acclip" else self.clip_mode
        clip = optim.ClipConfig(clip_mode, self.tau0, self.beta1, self.beta2, self.clip_alpha, self.clip_eps)
        return optim.OptimizerConfig(
            method="adam" if self.optimizer == "adam" else "sgd",
            geometry=self.geometry,
            clip=clip,
            retraction=self.retraction,
            tangent_form=self.tangent_form,
            adam_betas=self.adam_betas,
            adam_eps=self.adam_eps,
            reorth_every=self.reorth_every,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_max"] = self.learning_rate
        d["adam_betas"] = list(self.adam_betas)
        d["prior_weights"] = list(self.prior_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        method = d.pop("method", None)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        if method is not None:
            return cls.for_method(method, **d)
        return cls(**d)


@dataclass
class FitResult:
    params: GmmParams
    report: FitReport
    prior: PriorConfig


def _prior_for(train, config: RunConfig) -> PriorConfig:
    return PriorConfig.from_data(
        train,
        config.K,
        shrinkage=config.shrinkage,
        zeta=config.zeta,
        weights=config.prior_weights,
        positive_psi3=config.positive_psi3,
    )


def _numpy_epoch(train, order, params, state, prior, opt_cfg, lrs, batch_size):
    l = train.shape[0]
    for i, start in enumerate(range(0, l, batch_size)):
        batch = train[order[start:start + batch_size]]
        b = batch.shape[0]
        g = grad(batch, params, prior, scale=b / l)
        g = g.with_blocks({k: v / b for k, v in g.blocks().items()})
        params, state = optim.step(params, g, state, opt_cfg, lrs[i])
    return params, state


class _NumbaRunner:
    """Holds the flat parameter vector and buffers between epochs."""

    def __init__(self, params: GmmParams, prior: PriorConfig, config: RunConfig):
        self.template = params
        self.theta, self.offsets, names = _engine.pack(params)
        self.manifold_block = names.index("U") if config.geometry == "manifold" else -1
        self.prior = prior
        oc = config.optimizer_config()
        self.oc = oc
        size = self.theta.size
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.tau = np.full(size, oc.clip.tau0)
        self.t = 0

    def epoch(self, train, order, lrs, batch_size):
        p, oc, c = self.prior, self.oc, self.oc.clip
        params = self.template
        self.t = _engine.run_epoch(
            train, order, batch_size, float(train.shape[0]), self.theta, self.offsets, self.manifold_block,
            _engine.MODE_CODES[params.mode], params.n, params.K, params.omega,
            p.S_inv, p.gamma_s, p.mu_p, p.shrinkage, p.zeta, *map(float, p.weights),
            0.5 if p.positive_psi3 else -0.5,
            _engine.METHOD_CODES[oc.method], _engine.CLIP_CODES[c.mode], c.tau0, c.beta1, c.beta2, c.alpha,
            c.eps, oc.adam_betas[0], oc.adam_betas[1], oc.adam_eps,
            _engine.RETRACTION_CODES[oc.retraction], oc.tangent_form == "scaled", oc.reorth_every,
            self.m, self.tau, self.v, lrs, self.t,
        )

    def params(self) -> GmmParams:
        return _engine.unpack(self.theta, self.template)


def fit(train, config: RunConfig, test=None, params: GmmParams | None = None, callback=None) -> FitResult:
    """Fit a flexibly-tied mixture to ``train`` with minibatch stochastic steps.

    Each epoch is one shuffled pass over ``train`` (the last short batch is
    kept). Per-epoch traces record the full-batch training objective, the
    per-point training NLL and, when ``test`` is given, the held-out per-point
    NLL.

    Raises:
        FitError: on a numeric failure, with the partial report attached.
    """
    train = np.ascontiguousarray(train, dtype=float)
    l = train.shape[0]
    prior = _prior_for(train, config)
    if params is None:
        params = init_params(train, config.K, config.mode, seed=config.seed, omega=config.omega)
    opt_cfg = config.optimizer_config()
    spe = math.ceil(l / config.batch_size)
    sched = optim.LrSchedule(config.learning_rate, config.epochs, spe, config.warmup_fraction, config.floor_ratio)
    lrs = sched.table()
    rng = np.random.default_rng([config.seed, 1])
    report = FitReport(config=config.to_dict(), seed=config.seed)

    runner = _NumbaRunner(params, prior, config) if config.engine == "numba" else None
    state = optim.init_state(params, opt_cfg)
    for epoch in range(config.epochs):
        order = rng.permutation(l)
        window = lrs[epoch * spe:(epoch + 1) * spe]
        t0 = time.perf_counter()
        try:
            if runner is not None:
                runner.epoch(train, order, window, config.batch_size)
                params = runner.params()
            else:
                params, state = _numpy_epoch(train, order, params, state, prior, opt_cfg, window, config.batch_size)
            elapsed = time.perf_counter() - t0
            report.train_objective.append(objective(train, params, prior))
            report.train_avg_nll.append(avg_nll(train, params))
            if test is not None:
                report.test_avg_nll.append(avg_nll(test, params))
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            report.status = f"failed at epoch {epoch + 1}: {exc}"
            raise FitError(report.status, report) from exc
        report.epoch_seconds.append(max(elapsed, 1e-12))
        if callback is not None:
            callback(epoch, params, report)
    return FitResult(params, report, prior)


@dataclass
class Prepared:
    train: np.ndarray
    test: np.ndarray
    transform: Transform
    train_idx: np.ndarray
    test_idx: np.ndarray


def prepare(X, config: RunConfig) -> Prepared:
    """Split, optionally PCA-reduce, then whiten (transforms fit on train only)."""
    X = np.asarray(X, dtype=float)
    tr_idx, te_idx = split_indices(X.shape[0], config.train_fraction, config.seed)
    train, test = X[tr_idx], X[te_idx]
    transform = None
    if config.pca:
        train, transform = pca_reduce(train, config.pca_threshold, config.pca_max_dim)
        test = transform.apply(test)
    train, wt = whiten(train)
    test = wt.apply(test)
    transform = wt if transform is None else compose(transform, wt)
    return Prepared(train, test, transform, tr_idx, te_idx)


def run_pipeline(X, config: RunConfig, truth: TrueModel | None = None):
    """split -> [PCA] -> whiten -> init -> epochs -> report.

    With ``truth`` (given in input coordinates) the report also carries the
    matched covariance and mean errors, computed in input coordinates, and the
    held-out NLL of the true model in the whitened coordinates.

    Returns:
        ``(FitResult, Prepared)``
    """
    prep = prepare(X, config)
    result = fit(prep.train, config, test=prep.test)
    if truth is not None:
        score_against_truth(result.report, result.params, prep, truth)
    return result, prep


def score_against_truth(report: FitReport, params: GmmParams, prep: Prepared, truth: TrueModel):
    est = prep.transform.model_to_input(as_dense(params))
    perm = match_components(est, truth)
    report.cov_err = cov_err(est, truth, perm)
    report.mean_err = mean_err(est, truth, perm)
    report.true_test_avg_nll = dense_avg_nll(prep.test, prep.transform.model_from_input(truth))
    return report
