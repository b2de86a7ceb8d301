"""First-order stochastic optimizers on SO(n) x Euclidean product manifolds.

Each step follows the clipped-momentum recipe, block by block:

1. momentum ``m <- beta1 m + (1 - beta1) g`` on the Euclidean gradient,
2. clipping of ``m`` (global, coordinate-wise or adaptive coordinate-wise),
3. projection onto the tangent space (identity for Euclidean blocks),
4. retraction of ``-eta * direction`` (vector addition for Euclidean blocks).

Momentum is carried between steps unchanged, since vector transport on SO(n)
is the identity. The Adam variant replaces steps 1-2 by the Adam direction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import manifold
from .model import GmmParams

__all__ = [
    "CLIP_MODES",
    "ClipConfig",
    "OptimizerConfig",
    "OptimState",
    "LrSchedule",
    "gclip",
    "cclip",
    "acclip",
    "acclip_step",
    "clip",
    "init_state",
    "step",
    "lr_at",
]

CLIP_MODES = ("none", "gclip", "cclip", "acclip")
METHODS = ("sgd", "adam")
GEOMETRIES = ("euclidean", "manifold")


@dataclass(frozen=True)
class ClipConfig:
    mode: str = "acclip"
    tau0: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    alpha: float = 2.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ValueError(f"unknown clip mode {self.mode!r}; expected one of {CLIP_MODES}")
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    """Which update rule, on which geometry.

    ``method="sgd"`` is momentum SGD with the clipping rule in ``clip``;
    ``method="adam"`` ignores ``clip`` and uses ``adam_betas``/``adam_eps``.
    ``geometry="manifold"`` moves ``U`` on SO(n).
    """

    method: str = "sgd"
    geometry: str = "manifold"
    clip: ClipConfig = field(default_factory=ClipConfig)
    retraction: str = "qr"
    tangent_form: str = "skew"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    reorth_every: int = 1000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.geometry!r}; expected one of {GEOMETRIES}")
        if self.retraction not in manifold.RETRACTIONS:
            raise ValueError(f"unknown retraction {self.retraction!r}")
        if self.tangent_form not in ("skew", "scaled"):
            raise ValueError(f"unknown tangent form {self.tangent_form!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimState:
    """Per-block buffers: momentum ``m``, thresholds ``tau``, Adam ``v``."""

    t: int
    m: dict[str, np.ndarray]
    tau: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def copy(self):
        return OptimState(
            self.t,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.tau.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


# -- clipping rules ----------------------------------------------------------------


def gclip(tau, m):
    """Scale ``m`` so that its Euclidean norm is at most ``tau``."""
    m = np.asarray(m, dtype=float)
    tau = float(tau)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    norm = np.linalg.norm(m)
    if norm <= tau:
        return m.copy()
    return (tau / norm) * m


def cclip(tau, m):
    """Clamp every coordinate of ``m`` to magnitude ``tau`` (sign kept)."""
    m = np.asarray(m, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), m.shape) if np.ndim(tau) == 0 else np.asarray(tau, dtype=float)
    if tau.shape != m.shape:
        raise ValueError(f"shape mismatch: tau {tau.shape} vs m {m.shape}")
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    return np.clip(m, -tau, tau)


def acclip(tau, m, eps=1e-8):
    """``min(tau / (|m| + eps), 1) * m`` elementwise."""
    m = np.asarray(m, dtype=float)
    return np.minimum(tau / (np.abs(m) + eps), 1.0) * m


def acclip_step(state: OptimState, g, cfg: ClipConfig, name="x"):
    """One adaptive-clipping update for a single block.

    Updates the threshold by the ``alpha``-power moving average of ``|g|``,
    the momentum by the ``beta1`` moving average of ``g``, and returns the
    clipped momentum together with the advanced state.
    """
    g = np.asarray(g, dtype=float)
    new = state.copy()
    m = new.m.get(name, np.zeros_like(g))
    tau = new.tau.get(name, np.full_like(g, cfg.tau0))
    tau = (cfg.beta2 * tau**cfg.alpha + (1.0 - cfg.beta2) * np.abs(g) ** cfg.alpha) ** (1.0 / cfg.alpha)
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    new.m[name], new.tau[name] = m, tau
    new.t = state.t + 1
    return acclip(tau, m, cfg.eps), new


def clip(mode, tau, m, eps=1e-8):
    if mode == "none":
        return m
    if mode == "gclip":
        return gclip(float(tau), m)
    if mode == "cclip":
        return cclip(tau, m)
    if mode == "acclip":
        return acclip(tau, m, eps)
    raise ValueError(f"unknown clip mode {mode!r}")


# -- steps -------------------------------------------------------------------------


def init_state(params: GmmParams, cfg: OptimizerConfig) -> OptimState:
    m, tau, v = {}, {}, {}
    for name, x in params.blocks().items():
        m[name] = np.zeros_like(x)
        if cfg.method == "adam":
            v[name] = np.zeros_like(x)
        elif cfg.clip.mode == "gclip":
            tau[name] = np.array(cfg.clip.tau0)
        else:
            tau[name] = np.full_like(x, cfg.clip.tau0)
    return OptimState(0, m, tau, v)


def _is_manifold_block(name, params, cfg):
    return name == "U" and cfg.geometry == "manifold" and params.mode == "orthogonal"


def step(params: GmmParams, grads: GmmParams, state: OptimState, cfg: OptimizerConfig, eta: float):
    """Apply one update to every block; returns ``(params', state')``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    if cfg.geometry == "manifold" and params.mode != "orthogonal":
        raise ValueError("the manifold geometry requires orthogonal mode")
    new_state = state.copy()
    new_state.t = t = state.t + 1
    gblocks = grads.blocks()
    updated = {}
    for name, x in params.blocks().items():
        g = gblocks[name]
        if g.shape != x.shape:
            raise ValueError(f"gradient shape {g.shape} does not match block {name!r} {x.shape}")
        m = new_state.m[name]
        if cfg.method == "adam":
            b1, b2 = cfg.adam_betas
            m = b1 * m + (1.0 - b1) * g
            v = b2 * new_state.v[name] + (1.0 - b2) * g * g
            new_state.v[name] = v
            direction = (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + cfg.adam_eps)
        else:
            c = cfg.clip
            tau = new_state.tau[name]
            if c.mode == "acclip":
                tau = (c.beta2 * tau**c.alpha + (1.0 - c.beta2) * np.abs(g) ** c.alpha) ** (1.0 / c.alpha)
                new_state.tau[name] = tau
            m = c.beta1 * m + (1.0 - c.beta1) * g
            direction = clip(c.mode, tau, m, c.eps)
        new_state.m[name] = m
        if _is_manifold_block(name, params, cfg):
            xi = manifold.tangent_project(x, direction, cfg.tangent_form)
            y = manifold.retract(x, -eta * xi, cfg.retraction)
            if cfg.reorth_every and t % cfg.reorth_every == 0:
                y = manifold.reorthogonalize(y)
            updated[name] = y
        else:
            updated[name] = x - eta * direction
    return params.with_blocks(updated), new_state


# -- learning rate -------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up followed by cosine decay to ``eta_max * floor_ratio``."""

    eta_max: float
    total_epochs: int
    steps_per_epoch: int
    warmup_fraction: float = 0.05
    floor_ratio: float = 0.01

    def __post_init__(self):
        if not self.eta_max > 0:
            raise ValueError("eta_max must be positive")
        if self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("total_epochs and steps_per_epoch must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not 0 < self.floor_ratio <= 1:
            raise ValueError("floor_ratio must lie in (0, 1]")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def __call__(self, t):
        return lr_at(t, self)

    def table(self) -> np.ndarray:
        return np.array([lr_at(t, self) for t in range(self.total_steps)])


def lr_at(t: int, sched: LrSchedule) -> float:
    """Learning rate at zero-based step ``t``."""
    T = sched.total_steps
    if not 0 <= t < T:
        raise IndexError(f"step {t} outside [0, {T})")
    W = sched.warmup_steps
    eta_max = sched.eta_max
    eta_min = eta_max * sched.floor_ratio
    if t < W:
        return eta_max * (t + 1) / W
    span = T - 1 - W
    if span <= 0:
        return eta_max
    phase = (t - W) / span
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * phase))
