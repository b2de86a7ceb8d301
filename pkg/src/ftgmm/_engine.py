"""Compiled epoch loop.

Mirrors :func:`ftgmm.model.grad` and :func:`ftgmm.optim.step` on a flat
parameter vector so that a whole epoch runs without returning to Python.
The equivalence with the reference implementations is pinned by
``tests/test_engine.py``.

Flat layout: the blocks of :meth:`GmmParams.blocks`, raveled and concatenated
in order; ``offsets[i]:offsets[i + 1]`` is block ``i``.
"""
import math

import numpy as np
from numba import njit

from .model import GmmParams, PluParams

MODE_CODES = {"unconstrained": 0, "plu": 1, "orthogonal": 2}
METHOD_CODES = {"sgd": 0, "adam": 1}
CLIP_CODES = {"none": 0, "gclip": 1, "cclip": 2, "acclip": 3}
RETRACTION_CODES = {"qr": 0, "polar": 1, "cayley": 2}
LOG_2PI = math.log(2.0 * math.pi)


def pack(params: GmmParams):
    blocks = params.blocks()
    names = list(blocks)
    sizes = [blocks[k].size for k in names]
    offsets = np.zeros(len(names) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    theta = np.concatenate([np.ravel(blocks[k]).astype(float) for k in names])
    return theta, offsets, names


def unpack(theta, params: GmmParams) -> GmmParams:
    blocks = params.blocks()
    out = {}
    pos = 0
    for name, x in blocks.items():
        out[name] = theta[pos:pos + x.size].reshape(x.shape).copy()
        pos += x.size
    return params.with_blocks(out)


@njit(cache=True)
def _softplus(x, omega):
    wx = omega * x
    if wx > 30.0:
        return x
    return math.log1p(math.exp(wx)) / omega


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _plu_factors(Lr, Ur, s, n):
    L = np.eye(n)
    M = np.zeros((n, n))
    for i in range(n):
        M[i, i] = s[i]
        for j in range(n):
            if j < i:
                L[i, j] = Lr[i, j]
            elif j > i:
                M[i, j] = Ur[i, j]
    return L, M


@njit(cache=True)
def batch_grad(X, idx, theta, offsets, mode, n, K, omega, S_inv, gamma_s, mu_p,
               shrinkage, zeta, w1, w2, w3, w4, ld_sign, scale):
    """Gradient of ``objective(X[idx], params, prior, scale)`` in flat layout."""
    g = np.zeros_like(theta)
    lam_raw = theta[0:0]
    s = theta[0:0]
    L = np.eye(n)
    M = np.eye(n)
    # unpack views
    if mode == 1:
        Lr = theta[offsets[0]:offsets[1]].reshape((n, n))
        Ur = theta[offsets[1]:offsets[2]].reshape((n, n))
        s = theta[offsets[2]:offsets[3]]
        L, M = _plu_factors(Lr, Ur, s, n)
        U = L @ M
        bi = 3
    else:
        U = np.ascontiguousarray(theta[offsets[0]:offsets[1]].reshape((n, n)))
        bi = 1
    dt = theta[offsets[bi]:offsets[bi + 1]].reshape((K, n))
    bi += 1
    if mode == 2:
        lam_raw = theta[offsets[bi]:offsets[bi + 1]]
        bi += 1
    mu = theta[offsets[bi]:offsets[bi + 1]].reshape((K, n))
    mu_off = offsets[bi]
    bi += 1
    alpha = theta[offsets[bi]:offsets[bi + 1]]
    alpha_off = offsets[bi]

    d = np.empty((K, n))
    dsig = np.empty((K, n))
    for k in range(K):
        for j in range(n):
            d[k, j] = _softplus(dt[k, j], omega)
            dsig[k, j] = _sigmoid(omega * dt[k, j])
    lam = np.ones(K)
    lsig = np.zeros(K)
    if mode == 2:
        for k in range(K):
            lam[k] = _softplus(lam_raw[k], omega)
            lsig[k] = _sigmoid(omega * lam_raw[k])

    # log weights
    amax = 0.0
    for k in range(K - 1):
        if alpha[k] > amax:
            amax = alpha[k]
    tot = math.exp(-amax)
    for k in range(K - 1):
        tot += math.exp(alpha[k] - amax)
    lse_a = amax + math.log(tot)
    logw = np.empty(K)
    for k in range(K - 1):
        logw[k] = alpha[k] - lse_a
    logw[K - 1] = -lse_a
    pi = np.exp(logw)

    # log det of each precision
    logdet = np.zeros(K)
    base = 0.0
    if mode == 0:
        sign, lad = np.linalg.slogdet(U)
        base = 2.0 * lad
    elif mode == 1:
        for j in range(n):
            base += math.log(s[j] * s[j])
    for k in range(K):
        acc = base
        for j in range(n):
            acc += math.log(d[k, j])
        if mode == 2:
            acc += n * math.log(lam[k])
        logdet[k] = acc

    g_mu = np.zeros((K, n))
    g_d = np.zeros((K, n))
    g_lam = np.zeros(K)
    G_U = np.zeros((n, n))
    Rk = np.zeros(K)
    e = np.empty((K, n))
    z = np.empty((K, n))
    lp = np.empty(K)
    b = idx.shape[0]
    for ii in range(b):
        x = X[idx[ii]]
        for k in range(K):
            for j in range(n):
                e[k, j] = x[j] - mu[k, j]
            q = 0.0
            for j in range(n):
                acc = 0.0
                for i in range(n):
                    acc += e[k, i] * U[i, j]
                z[k, j] = acc
                q += d[k, j] * acc * acc
            lp[k] = logw[k] + 0.5 * logdet[k] - 0.5 * n * LOG_2PI - 0.5 * lam[k] * q
        m = lp.max()
        tot = 0.0
        for k in range(K):
            tot += math.exp(lp[k] - m)
        lse = m + math.log(tot)
        if not math.isfinite(lse):
            raise ArithmeticError("non-finite log-likelihood")
        for k in range(K):
            r = math.exp(lp[k] - lse)
            Rk[k] += r
            rl = r * lam[k]
            sq = 0.0
            for j in range(n):
                dz = d[k, j] * z[k, j]
                sq += dz * z[k, j]
                g_d[k, j] += 0.5 * rl * z[k, j] * z[k, j]
                for i in range(n):
                    G_U[i, j] += rl * e[k, i] * dz
                    g_mu[k, i] -= rl * U[i, j] * dz
            if mode == 2:
                g_lam[k] += 0.5 * r * sq
    for k in range(K):
        for j in range(n):
            g_d[k, j] -= 0.5 * Rk[k] / d[k, j]
        if mode == 2:
            g_lam[k] -= 0.5 * n * Rk[k] / lam[k]
    logdet_coef = -float(b)

    # regularizers
    c3 = scale * w3
    for k in range(K):
        dm = mu[k] - mu_p
        wv = dm @ U
        sq = 0.0
        for j in range(n):
            dw = d[k, j] * wv[j]
            sq += dw * wv[j]
            g_d[k, j] += c3 * (0.5 * shrinkage * lam[k] * wv[j] * wv[j] + ld_sign / d[k, j])
            g_d[k, j] += scale * w2 * (0.5 * gamma_s - 0.5 * n / d[k, j])
            for i in range(n):
                G_U[i, j] += c3 * shrinkage * lam[k] * dm[i] * dw
                g_mu[k, i] += c3 * shrinkage * lam[k] * U[i, j] * dw
        if mode == 2:
            g_lam[k] += c3 * (0.5 * shrinkage * sq + ld_sign * n / lam[k])
    if mode != 2:
        logdet_coef += c3 * ld_sign * 2.0 * K
        G_U += scale * w1 * (S_inv @ U)
        logdet_coef -= scale * w1

    # write back in flat layout
    if mode == 0:
        UinvT = np.linalg.inv(U).T
        G_U += logdet_coef * UinvT
        g[offsets[0]:offsets[1]] = G_U.ravel()
        bi = 1
    elif mode == 2:
        g[offsets[0]:offsets[1]] = G_U.ravel()
        bi = 1
    else:
        gL = G_U @ M.T
        gM = L.T @ G_U
        gl = g[offsets[0]:offsets[1]].reshape((n, n))
        gu = g[offsets[1]:offsets[2]].reshape((n, n))
        gs = g[offsets[2]:offsets[3]]
        for i in range(n):
            for j in range(n):
                if j < i:
                    gl[i, j] = gL[i, j]
                elif j > i:
                    gu[i, j] = gM[i, j]
            gs[i] = gM[i, i] + logdet_coef / s[i]
        bi = 3
    gdt = g[offsets[bi]:offsets[bi + 1]].reshape((K, n))
    for k in range(K):
        for j in range(n):
            gdt[k, j] = g_d[k, j] * dsig[k, j]
    bi += 1
    if mode == 2:
        gl_ = g[offsets[bi]:offsets[bi + 1]]
        for k in range(K):
            gl_[k] = g_lam[k] * lsig[k]
        bi += 1
    gm = g[mu_off:mu_off + K * n].reshape((K, n))
    for k in range(K):
        for j in range(n):
            gm[k, j] = g_mu[k, j]
    ga = g[alpha_off:alpha_off + K - 1]
    for k in range(K - 1):
        ga[k] = -Rk[k] + b * pi[k] + scale * w4 * zeta * (K * pi[k] - 1.0)
    for i in range(g.shape[0]):
        if not math.isfinite(g[i]):
            raise ArithmeticError("non-finite gradient")
    return g


@njit(cache=True)
def _qr_pos(M):
    Q, R = np.linalg.qr(M)
    n = M.shape[0]
    for j in range(n):
        if R[j, j] < 0:
            for i in range(n):
                Q[i, j] = -Q[i, j]
            R[j, :] = -R[j, :]
    return Q, R


@njit(cache=True)
def _retract(Y, xi, retraction):
    n = Y.shape[0]
    if retraction == 0:
        Q, R = _qr_pos(Y + xi)
        dmax = 1.0
        dmin = np.inf
        for j in range(n):
            a = abs(R[j, j])
            dmax = max(dmax, a)
            dmin = min(dmin, a)
        if not (dmin > 1e-14 * dmax):
            raise ArithmeticError("Y + xi is rank deficient")
        return Q
    if retraction == 1:
        u, sv, vt = np.linalg.svd(Y + xi)
        if not (sv[-1] > 1e-14 * max(sv[0], 1.0)):
            raise ArithmeticError("Y + xi is rank deficient")
        return u @ vt
    A = xi @ Y.T
    A = 0.5 * (A - A.T)
    eye = np.eye(n)
    return np.linalg.solve(eye - 0.5 * A, (eye + 0.5 * A) @ Y)


@njit(cache=True)
def run_epoch(X, order, batch_size, n_train, theta, offsets, manifold_block, mode, n, K, omega,
              S_inv, gamma_s, mu_p, shrinkage, zeta, w1, w2, w3, w4, ld_sign,
              method, clip_mode, tau0, beta1, beta2, apow, eps, adam_b1, adam_b2, adam_eps,
              retraction, scaled_tangent, reorth_every, m, tau, v, lrs, t):
    """One shuffled pass; updates ``theta`` and the buffers in place.

    Returns the step counter after the epoch.
    """
    l = order.shape[0]
    nblocks = offsets.shape[0] - 1
    step_i = 0
    for start in range(0, l, batch_size):
        stop = min(start + batch_size, l)
        idx = order[start:stop]
        b = stop - start
        g = batch_grad(X, idx, theta, offsets, mode, n, K, omega, S_inv, gamma_s, mu_p,
                       shrinkage, zeta, w1, w2, w3, w4, ld_sign, b / n_train)
        g /= b
        eta = lrs[step_i]
        step_i += 1
        t += 1
        for blk in range(nblocks):
            lo = offsets[blk]
            hi = offsets[blk + 1]
            direction = np.empty(hi - lo)
            if method == 1:
                bc1 = 1.0 - adam_b1 ** t
                bc2 = 1.0 - adam_b2 ** t
                for i in range(lo, hi):
                    m[i] = adam_b1 * m[i] + (1.0 - adam_b1) * g[i]
                    v[i] = adam_b2 * v[i] + (1.0 - adam_b2) * g[i] * g[i]
                    direction[i - lo] = (m[i] / bc1) / (math.sqrt(v[i] / bc2) + adam_eps)
            else:
                if clip_mode == 3:
                    for i in range(lo, hi):
                        tau[i] = (beta2 * tau[i] ** apow + (1.0 - beta2) * abs(g[i]) ** apow) ** (1.0 / apow)
                for i in range(lo, hi):
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
                if clip_mode == 1:
                    nrm = 0.0
                    for i in range(lo, hi):
                        nrm += m[i] * m[i]
                    nrm = math.sqrt(nrm)
                    f = 1.0
                    if nrm > tau0:
                        f = tau0 / nrm
                    for i in range(lo, hi):
                        direction[i - lo] = f * m[i]
                elif clip_mode == 2:
                    for i in range(lo, hi):
                        direction[i - lo] = min(max(m[i], -tau[i]), tau[i])
                elif clip_mode == 3:
                    for i in range(lo, hi):
                        direction[i - lo] = min(tau[i] / (abs(m[i]) + eps), 1.0) * m[i]
                else:
                    for i in range(lo, hi):
                        direction[i - lo] = m[i]
            if blk == manifold_block:
                Y = theta[lo:hi].reshape((n, n)).copy()
                G = direction.reshape((n, n))
                if scaled_tangent:
                    A0 = (np.eye(n) - 0.5 * (Y @ Y.T)) @ G @ Y.T
                else:
                    A0 = G @ Y.T
                A = A0 - A0.T
                xi = A @ Y
                Ynew = _retract(Y, -eta * xi, retraction)
                if reorth_every > 0 and t % reorth_every == 0:
                    Ynew, _ = _qr_pos(Ynew)
                theta[lo:hi] = Ynew.ravel()
            else:
                for i in range(lo, hi):
                    theta[i] -= eta * direction[i - lo]
    return t
