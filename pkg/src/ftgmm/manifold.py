"""Geometry of the special orthogonal group SO(n).

Points are square orthogonal matrices with determinant +1. Tangent vectors at
``Y`` have the form ``A @ Y`` with ``A`` skew-symmetric. The Riemannian metric
is the Euclidean one inherited from the embedding, so vector transport between
tangent spaces is the identity.
"""
import numpy as np

__all__ = [
    "SingularRetractionError",
    "skew",
    "tangent_project",
    "is_tangent",
    "retract",
    "retract_qr",
    "retract_polar",
    "retract_cayley",
    "reorthogonalize",
    "random_orthogonal",
    "orthogonality_error",
    "transport",
    "RETRACTIONS",
]


class SingularRetractionError(ArithmeticError):
    """Raised when a retraction hits a singular matrix (shrink the step)."""


def _check_square(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    return M


def skew(M):
    """Return ``M - M.T``.

    No factor of one half: the optimizer's step size absorbs the constant.
    """
    M = _check_square(M)
    return M - M.T


def tangent_project(Y, G, form="skew"):
    """Project an ambient matrix ``G`` onto the tangent space at ``Y``.

    Args:
        Y: point on SO(n).
        G: ambient (Euclidean gradient) matrix of the same shape.
        form: ``"skew"`` uses ``A = skew(G Y^T)``; ``"scaled"`` uses
            ``A = skew((I - Y Y^T / 2) G Y^T)``.

    Returns:
        ``A @ Y``.
    """
    Y = _check_square(Y, "Y")
    G = _check_square(G, "G")
    if Y.shape != G.shape:
        raise ValueError(f"shape mismatch: Y {Y.shape} vs G {G.shape}")
    if form == "skew":
        A = skew(G @ Y.T)
    elif form == "scaled":
        n = Y.shape[0]
        A = skew((np.eye(n) - 0.5 * Y @ Y.T) @ G @ Y.T)
    else:
        raise ValueError(f"unknown tangent form {form!r}")
    return A @ Y


def is_tangent(Y, xi, atol=1e-8):
    return np.linalg.norm(Y.T @ xi + xi.T @ Y) <= atol


def transport(xi, Y_from=None, Y_to=None):
    # identity vector transport on SO(n)
    return xi


def _qr_positive(M):
    Q, R = np.linalg.qr(M)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs, R * signs[:, None]


def retract_qr(Y, xi):
    """Q factor of ``Y + xi`` with a positive diagonal in R."""
    M = _check_square(Y, "Y") + _check_square(xi, "xi")
    Q, R = _qr_positive(M)
    diag = np.abs(np.diag(R))
    if not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * max(diag.max(), 1.0):
        raise SingularRetractionError("Y + xi is rank deficient")
    return Q


def retract_polar(Y, xi):
    """Orthogonal polar factor ``U V^T`` of ``Y + xi``."""
    M = _check_square(Y, "Y") + _check_square(xi, "xi")
    u, s, vt = np.linalg.svd(M)
    if not np.all(np.isfinite(s)) or s.min() <= 1e-14 * max(s.max(), 1.0):
        raise SingularRetractionError("Y + xi is rank deficient")
    return u @ vt


def retract_cayley(Y, xi):
    """Cayley transform ``(I - A/2)^{-1} (I + A/2) Y`` with ``A = xi Y^T``.

    ``A`` is skew for tangent ``xi``; its skew part is used so that rounding
    drift in ``Y`` is not amplified by long steps.
    """
    Y = _check_square(Y, "Y")
    A = _check_square(xi, "xi") @ Y.T
    A = 0.5 * (A - A.T)
    n = Y.shape[0]
    eye = np.eye(n)
    try:
        return np.linalg.solve(eye - 0.5 * A, (eye + 0.5 * A) @ Y)
    except np.linalg.LinAlgError as exc:
        raise SingularRetractionError("I - A/2 is singular") from exc


RETRACTIONS = {
    "qr": retract_qr,
    "polar": retract_polar,
    "cayley": retract_cayley,
}


def retract(Y, xi, method="qr"):
    try:
        fn = RETRACTIONS[method]
    except KeyError:
        raise ValueError(f"unknown retraction {method!r}") from None
    return fn(Y, xi)


def reorthogonalize(Y):
    """Scrub round-off drift; keeps the determinant sign of ``Y``."""
    Q, _ = _qr_positive(_check_square(Y, "Y"))
    return Q


def random_orthogonal(n, seed=None):
    """Random matrix in SO(n) from the sign-fixed QR of a Gaussian matrix."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    Q, _ = _qr_positive(rng.standard_normal((n, n)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def orthogonality_error(Y):
    """Frobenius norm of ``Y^T Y - I``."""
    Y = np.asarray(Y, dtype=float)
    return float(np.linalg.norm(Y.T @ Y - np.eye(Y.shape[1])))
