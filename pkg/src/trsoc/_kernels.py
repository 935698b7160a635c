"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``TRSOC_NUMBA=0`` to force
the numpy implementations (useful for debugging and for the backend
benchmark in ``bench/``). Both implementations are always importable as
``numpy_kernels`` / ``numba_kernels`` so tests can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from scipy.special import ndtr

_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

__all__ = [
    "BACKEND",
    "path_girsanov",
    "adjoint_linear_diag",
    "gmm_logpdf_grad",
    "riccati_rk4_diag",
    "gelu",
    "numpy_kernels",
    "numba_kernels",
]


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _np_path_girsanov(du, dW, dt):
    """Return (sum_j 0.5*|du_j|^2 dt_j, sum_j du_j . dW_j) per trajectory."""
    quad = 0.5 * np.einsum("kjd,kjd,j->k", du, du, dt)
    stoch = np.einsum("kjd,kjd->k", du, dW)
    return quad, stoch


def _np_adjoint_linear_diag(grad_g, bdiag, gradf, dt, beta):
    K, d = grad_g.shape
    J = dt.shape[0]
    a = np.empty((K, J + 1, d))
    a[:, J] = beta * grad_g
    has_f = gradf.shape[0] > 0
    for j in range(J - 1, -1, -1):
        nxt = a[:, j + 1]
        step = bdiag[j + 1] * nxt
        if has_f:
            step = step + beta * gradf[:, j + 1]
        a[:, j] = nxt + dt[j] * step
    return a


def _np_gmm_logpdf_grad(x, means, inv_var, log_norm):
    # comp[n, c] = log pi_c + log N(x_n | mu_c, diag(var_c))
    diff = x[:, None, :] - means[None, :, :]
    comp = log_norm[None, :] - 0.5 * np.einsum("ncd,cd->nc", diff * diff, inv_var)
    mx = comp.max(axis=1, keepdims=True)
    e = np.exp(comp - mx)
    s = e.sum(axis=1, keepdims=True)
    logp = (mx + np.log(s))[:, 0]
    resp = e / s
    grad = -np.einsum("nc,ncd,cd->nd", resp, diff, inv_var)
    return logp, grad


def _np_riccati_rk4_diag(a, p, q, s2, T, n):
    d = a.shape[0]
    h = T / n
    F = np.empty((n + 1, d))
    F[n] = q
    f = q.astype(np.float64).copy()

    def rhs(y):
        # dF/dt = -(2 a F - 2 s2 F^2 + p)
        return -(2.0 * a * y - 2.0 * s2 * y * y + p)

    for k in range(n, 0, -1):
        # integrate backwards in time: step -h
        k1 = rhs(f)
        k2 = rhs(f - 0.5 * h * k1)
        k3 = rhs(f - 0.5 * h * k2)
        k4 = rhs(f - h * k3)
        f = f - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        F[k - 1] = f
        if not np.all(np.abs(f) < 1e6):
            return F, k - 1
    return F, -1


def _np_gelu(x, need_grad):
    cdf = ndtr(x)
    y = x * cdf
    if not need_grad:
        return y, None
    return y, cdf + x * (_INV_SQRT2PI * np.exp(-0.5 * x * x))


numpy_kernels = SimpleNamespace(
    gelu=_np_gelu,
    path_girsanov=_np_path_girsanov,
    adjoint_linear_diag=_np_adjoint_linear_diag,
    gmm_logpdf_grad=_np_gmm_logpdf_grad,
    riccati_rk4_diag=_np_riccati_rk4_diag,
)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


def _build_numba():
    import math

    from numba import njit

    @njit(cache=True)
    def _gelu_flat(x, need_grad):
        n = x.size
        y = np.empty(n)
        dy = np.empty(n if need_grad else 0)
        for i in range(n):
            v = x[i]
            c = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
            y[i] = v * c
            if need_grad:
                dy[i] = c + v * 0.3989422804014327 * math.exp(-0.5 * v * v)
        return y, dy

    def gelu(x, need_grad):
        y, dy = _gelu_flat(x.ravel(), need_grad)
        return y.reshape(x.shape), (dy.reshape(x.shape) if need_grad else None)

    @njit(cache=True)
    def path_girsanov(du, dW, dt):
        K, J, d = du.shape
        quad = np.zeros(K)
        stoch = np.zeros(K)
        for k in range(K):
            qk = 0.0
            sk = 0.0
            for j in range(J):
                nq = 0.0
                for i in range(d):
                    v = du[k, j, i]
                    nq += v * v
                    sk += v * dW[k, j, i]
                qk += 0.5 * nq * dt[j]
            quad[k] = qk
            stoch[k] = sk
        return quad, stoch

    @njit(cache=True)
    def adjoint_linear_diag(grad_g, bdiag, gradf, dt, beta):
        K, d = grad_g.shape
        J = dt.shape[0]
        has_f = gradf.shape[0] > 0
        a = np.empty((K, J + 1, d))
        for k in range(K):
            for i in range(d):
                cur = beta * grad_g[k, i]
                a[k, J, i] = cur
                for j in range(J - 1, -1, -1):
                    step = bdiag[j + 1, i] * cur
                    if has_f:
                        step += beta * gradf[k, j + 1, i]
                    cur = cur + dt[j] * step
                    a[k, j, i] = cur
        return a

    @njit(cache=True)
    def gmm_logpdf_grad(x, means, inv_var, log_norm):
        N, d = x.shape
        C = means.shape[0]
        logp = np.empty(N)
        grad = np.zeros((N, d))
        comp = np.empty(C)
        for n in range(N):
            mx = -np.inf
            for c in range(C):
                acc = 0.0
                for i in range(d):
                    z = x[n, i] - means[c, i]
                    acc += z * z * inv_var[c, i]
                v = log_norm[c] - 0.5 * acc
                comp[c] = v
                if v > mx:
                    mx = v
            s = 0.0
            for c in range(C):
                comp[c] = np.exp(comp[c] - mx)
                s += comp[c]
            logp[n] = mx + np.log(s)
            for c in range(C):
                r = comp[c] / s
                for i in range(d):
                    grad[n, i] -= r * (x[n, i] - means[c, i]) * inv_var[c, i]
        return logp, grad

    @njit(cache=True)
    def riccati_rk4_diag(a, p, q, s2, T, n):
        d = a.shape[0]
        h = T / n
        F = np.empty((n + 1, d))
        for i in range(d):
            F[n, i] = q[i]
        for i in range(d):
            f = q[i]
            for k in range(n, 0, -1):
                k1 = -(2.0 * a[i] * f - 2.0 * s2[i] * f * f + p[i])
                y = f - 0.5 * h * k1
                k2 = -(2.0 * a[i] * y - 2.0 * s2[i] * y * y + p[i])
                y = f - 0.5 * h * k2
                k3 = -(2.0 * a[i] * y - 2.0 * s2[i] * y * y + p[i])
                y = f - h * k3
                k4 = -(2.0 * a[i] * y - 2.0 * s2[i] * y * y + p[i])
                f = f - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                F[k - 1, i] = f
                if not abs(f) < 1e6:
                    return F, k - 1
        return F, -1

    return SimpleNamespace(
        gelu=gelu,
        path_girsanov=path_girsanov,
        adjoint_linear_diag=adjoint_linear_diag,
        gmm_logpdf_grad=gmm_logpdf_grad,
        riccati_rk4_diag=riccati_rk4_diag,
    )


try:
    numba_kernels = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None

_use_numba = os.environ.get("TRSOC_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
if _use_numba and numba_kernels is not None:
    BACKEND = "numba"
    _active = numba_kernels
else:
    BACKEND = "numpy"
    _active = numpy_kernels


def gelu(x, need_grad=True):
    """Exact GELU ``x * Phi(x)`` and, if asked, its derivative."""
    return _active.gelu(np.asarray(x, dtype=np.float64), bool(need_grad))


def path_girsanov(du, dW, dt):
    """Discrete Girsanov sums along each path.

    ``du`` and ``dW`` are ``(K, J, d)``; ``dt`` is ``(J,)``. Returns the pair
    ``(quad, stoch)`` of per-trajectory sums ``0.5*|du|^2*dt`` and ``du.dW``.
    """
    return _active.path_girsanov(
        np.ascontiguousarray(du, dtype=np.float64),
        np.ascontiguousarray(dW, dtype=np.float64),
        np.ascontiguousarray(dt, dtype=np.float64),
    )


def adjoint_linear_diag(grad_g, bdiag, gradf, dt, beta):
    """Backward-Euler lean adjoint for a drift ``b(x, t) = diag(bdiag(t)) x``.

    ``bdiag`` is ``(J+1, d)``, ``gradf`` is ``(K, J+1, d)`` or an empty array
    when the running cost vanishes.
    """
    if gradf is None:
        gradf = np.zeros((0, 0, 0))
    return _active.adjoint_linear_diag(
        np.ascontiguousarray(grad_g, dtype=np.float64),
        np.ascontiguousarray(bdiag, dtype=np.float64),
        np.ascontiguousarray(gradf, dtype=np.float64),
        np.ascontiguousarray(dt, dtype=np.float64),
        float(beta),
    )


def gmm_logpdf_grad(x, means, inv_var, log_norm):
    """Log-density of a diagonal Gaussian mixture and its gradient in ``x``."""
    return _active.gmm_logpdf_grad(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(inv_var, dtype=np.float64),
        np.ascontiguousarray(log_norm, dtype=np.float64),
    )


def riccati_rk4_diag(a, p, q, s2, T, n):
    """Backward RK4 for decoupled scalar Riccati equations.

    Returns ``(F, bad)`` where ``F[k]`` is the solution at ``t = k*T/n`` and
    ``bad`` is the first grid index where ``|F|`` exceeded 1e6 (or -1).
    """
    return _active.riccati_rk4_diag(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(p, dtype=np.float64),
        np.ascontiguousarray(q, dtype=np.float64),
        np.ascontiguousarray(s2, dtype=np.float64),
        float(T),
        int(n),
    )
