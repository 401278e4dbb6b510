"""Compiled banded kernels for the spline-coefficient precision.

After AR(1) whitening the precision of ``b_i`` is banded with half-width
``h`` (``degree + 1`` when consecutive observations never skip a knot).
Moments are stored per subject, regime and power of ``rho``:

* ``band[i, r, p, l, k]``  = ``M_p[l, l + k]`` for ``0 <= k <= h``;
* ``border[i, r, p, l, c]`` = ``M_p[l, L + c]`` (``c = 0`` intercept, ``1`` response);
* ``scal[i, r, p, :]``     = ``(M_p[L, L], M_p[L, L+1], M_p[L+1, L+1])``.

A factor is stored as ``chol[i, j, k] = C[j, j - k]``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _assemble(band, border, scal, i, w, rho, prior_prec, A, g, s):
    R = band.shape[1]
    L = band.shape[3]
    H = band.shape[4]
    A[:, :] = 0.0
    g[:, :] = 0.0
    s[:] = 0.0
    for r in range(R):
        c0 = w[i, r]
        c1 = -w[i, r] * rho[i]
        c2 = w[i, r] * rho[i] * rho[i]
        for l in range(L):
            for k in range(H):
                A[l, k] += c0 * band[i, r, 0, l, k] + c1 * band[i, r, 1, l, k] + c2 * band[i, r, 2, l, k]
            for c in range(2):
                g[l, c] += c0 * border[i, r, 0, l, c] + c1 * border[i, r, 1, l, c] + c2 * border[i, r, 2, l, c]
        for c in range(3):
            s[c] += c0 * scal[i, r, 0, c] + c1 * scal[i, r, 1, c] + c2 * scal[i, r, 2, c]
    for l in range(L):
        A[l, 0] += prior_prec[i, l]


@njit(cache=True)
def _band_cholesky(A, C):
    """Lower Cholesky of the symmetric band ``A`` (``A[l, k] = M[l, l+k]``).

    Returns ``log|M|`` or ``nan`` when ``M`` is not positive definite.
    """
    L, H = A.shape
    h = H - 1
    logdet = 0.0
    for j in range(L):
        lo = max(0, j - h)
        for i in range(lo, j + 1):
            # entry M[j, i] = A[i, j - i]
            acc = A[i, j - i]
            klo = max(lo, i - h)
            for k in range(klo, i):
                acc -= C[j, j - k] * C[i, i - k]
            if i == j:
                if not acc > 0.0:
                    return np.nan
                d = math.sqrt(acc)
                C[j, 0] = d
                logdet += 2.0 * math.log(d)
            else:
                C[j, j - i] = acc / C[i, 0]
    return logdet


@njit(cache=True)
def _forward(C, rhs, out):
    L, H = C.shape
    h = H - 1
    for c in range(rhs.shape[1]):
        for j in range(L):
            acc = rhs[j, c]
            for k in range(max(0, j - h), j):
                acc -= C[j, j - k] * out[k, c]
            out[j, c] = acc / C[j, 0]


@njit(cache=True)
def _backward(C, rhs, out):
    L, H = C.shape
    h = H - 1
    for j in range(L - 1, -1, -1):
        acc = rhs[j]
        for k in range(j + 1, min(L, j + h + 1)):
            acc -= C[k, k - j] * out[k]
        out[j] = acc / C[j, 0]


@njit(cache=True)
def marginal_terms(band, border, scal, w, rho, prior_prec, bp):
    """Per subject ``(Q - g' P^-1 g, log|P|)`` for the response ``x - offset - bp``.

    Non-positive-definite subjects return ``nan``.
    """
    N = band.shape[0]
    L = band.shape[3]
    H = band.shape[4]
    A = np.empty((L, H))
    C = np.zeros((L, H))
    g = np.empty((L, 2))
    e = np.empty((L, 1))
    v = np.empty((L, 1))
    s = np.empty(3)
    quad = np.empty(N)
    logdet = np.empty(N)
    for i in range(N):
        _assemble(band, border, scal, i, w, rho, prior_prec, A, g, s)
        ld = _band_cholesky(A, C)
        logdet[i] = ld
        if np.isnan(ld):
            quad[i] = np.nan
            continue
        for l in range(L):
            e[l, 0] = g[l, 1] - bp * g[l, 0]
        _forward(C, e, v)
        q = s[2] - 2.0 * bp * s[1] + bp * bp * s[0]
        for l in range(L):
            q -= v[l, 0] * v[l, 0]
        quad[i] = q
    return quad, logdet


@njit(cache=True)
def factor_all(band, border, scal, w, rho, prior_prec):
    """Band factors, ``C^-1 [g_c, g_y]``, scalar moments and ``log|P|`` per subject."""
    N = band.shape[0]
    L = band.shape[3]
    H = band.shape[4]
    A = np.empty((L, H))
    g = np.empty((L, 2))
    chol = np.zeros((N, L, H))
    v = np.empty((N, L, 2))
    sc = np.empty((N, 3))
    logdet = np.empty(N)
    s = np.empty(3)
    for i in range(N):
        _assemble(band, border, scal, i, w, rho, prior_prec, A, g, s)
        logdet[i] = _band_cholesky(A, chol[i])
        if np.isnan(logdet[i]):
            continue
        _forward(chol[i], g, v[i])
        sc[i, :] = s
    return chol, v, sc, logdet


@njit(cache=True)
def back_solve_all(chol, rhs):
    """Solve ``C_i^T x_i = rhs_i`` for every subject."""
    out = np.empty_like(rhs)
    for i in range(rhs.shape[0]):
        _backward(chol[i], rhs[i], out[i])
    return out


def band_from_dense(M: np.ndarray, L: int, h: int):
    """Split dense ``(..., L+2, L+2)`` moments into band, border and scalar parts."""
    lead = M.shape[:-2]
    band = np.zeros(lead + (L, h + 1))
    for k in range(h + 1):
        band[..., :L - k, k] = np.diagonal(M[..., :L, :L], offset=k, axis1=-2, axis2=-1)
    border = np.ascontiguousarray(M[..., :L, L:L + 2])
    scal = np.stack([M[..., L, L], M[..., L, L + 1], M[..., L + 1, L + 1]], axis=-1)
    return band, border, scal


def bandwidth(M: np.ndarray, L: int) -> int:
    """Largest ``|l - m|`` with a nonzero entry in the coefficient block."""
    nz = np.any(M[..., :L, :L] != 0.0, axis=tuple(range(M.ndim - 2)))
    rows, cols = np.nonzero(nz)
    return int(np.max(np.abs(rows - cols))) if rows.size else 0
