"""Flattened per-observation arrays and AR(1) Gram moments for a Dataset.

For columns ``u, v`` of the per-subject matrix ``[D | 1 | x - offset]`` the
whitened inner product ``sum_j w_j (u_j - rho u_{j-1})(v_j - rho v_{j-1})``
(first term scaled by ``1 - rho^2``) is a quadratic in ``rho``.  Its three
coefficients are stored per subject and per regime of the destination
observation, so any (weights, rho) combination costs one small
contraction instead of a pass over the raw series.
"""

from __future__ import annotations

import numpy as np

from ._banded import band_from_dense, bandwidth
from .basis import design_matrix, design_rows


def ar1_moments(U: np.ndarray, reg: np.ndarray, n_regimes: int) -> np.ndarray:
    """Coefficients ``(M0, M1, M2)`` of ``M0 - rho*M1 + rho^2*M2`` per regime.

    Returns an array of shape ``(n_regimes, 3, p, p)``.
    """
    n, p = U.shape
    out = np.zeros((n_regimes, 3, p, p))
    dest = np.arange(1, n)
    for r in range(n_regimes):
        m = reg == r
        Ur = U[m]
        out[r, 0] = Ur.T @ Ur
        jr = dest[reg[1:] == r]
        cur = U[jr]
        lag = U[jr - 1]
        cross = cur.T @ lag
        out[r, 1] = cross + cross.T
        out[r, 2] = lag.T @ lag
        if reg[0] == r:
            out[r, 2] -= np.outer(U[0], U[0])
    return out


class StackedData:
    """Immutable array view of a Dataset used by the fitting code."""

    def __init__(self, dataset):
        self.dataset = dataset
        basis = dataset.basis
        regimes = dataset.regimes
        subjects = dataset.subjects
        self.N = len(subjects)
        self.L = basis.basis_count
        self.R = regimes.n_regimes
        self.degree = basis.degree
        self.n_obs = np.array([s.n_obs for s in subjects])
        self.offsets = np.concatenate([[0], np.cumsum(self.n_obs)])
        self.first = self.offsets[:-1]

        self.x = np.concatenate([s.values for s in subjects])
        self.offset = float(self.x.mean())
        self.subj = np.repeat(np.arange(self.N), self.n_obs)
        self.reg = np.concatenate(regimes.obs_regime).astype(int)
        start, vals = design_rows(np.concatenate([s.times for s in subjects]), basis)
        self.start = start
        self.vals = vals
        cols = start[:, None] + np.arange(self.degree + 1)
        self.flat_cols = self.subj[:, None] * self.L + cols
        self.coef_regime = np.vstack(regimes.coef_regime).astype(int)
        self.coef_onehot = (self.coef_regime[:, :, None] == np.arange(self.R)).astype(float)
        self.coef_count = self.coef_onehot.sum(axis=1)
        self.sr = self.subj * self.R + self.reg
        self.obs_count = np.bincount(self.sr, minlength=self.N * self.R).reshape(self.N, self.R)

        not_first = np.ones(self.x.size, dtype=bool)
        not_first[self.first] = False
        self.dest = np.nonzero(not_first)[0]
        self.dest_sr = self.sr[self.dest]
        self.first_sr = self.sr[self.first]

        L = self.L
        moments = np.empty((self.N, self.R, 3, L + 2, L + 2))
        for i, s in enumerate(subjects):
            U = np.empty((s.n_obs, L + 2))
            U[:, :L] = design_matrix(s.times, basis)
            U[:, L] = 1.0
            U[:, L + 1] = s.values - self.offset
            moments[i] = ar1_moments(U, regimes.obs_regime[i], self.R)
        self.moments = moments
        self._moments_flat = moments.reshape(self.N, self.R * 3, (L + 2) ** 2)
        self.bandwidth = bandwidth(moments, L)
        self.band, self.border, self.scal = band_from_dense(moments, L, self.bandwidth)

        self.has_outcome = dataset.has_outcome
        self.y = dataset.outcomes if self.has_outcome else np.zeros(self.N, dtype=int)
        self.sign = 2.0 * self.y - 1.0
        self.Z = dataset.covariates

    def whitened_gram(self, weights: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """``sum_r w_r (M0 - rho M1 + rho^2 M2)`` for every subject.

        ``weights`` has shape ``(N, R)`` (inverse innovation variances) and
        ``rho`` shape ``(N,)``.  Returns ``(N, L+2, L+2)``.
        """
        poly = np.stack([np.ones_like(rho), -rho, rho * rho], axis=1)
        coef = (weights[:, :, None] * poly[:, None, :]).reshape(self.N, 1, self.R * 3)
        p = self.L + 2
        return np.matmul(coef, self._moments_flat).reshape(self.N, p, p)

    def mean_part(self, beta0: float, b: np.ndarray) -> np.ndarray:
        """``beta0 + sum_l b_il Phi_l(t_ij)`` at every observation."""
        g = np.take(b.ravel(), self.flat_cols)
        return beta0 + np.einsum("ij,ij->i", self.vals, g)

    def residual_stats(self, e: np.ndarray) -> np.ndarray:
        """Per subject/regime ``(q0, q1, q2)`` with ``SS(rho) = q0 - rho q1 + rho^2 q2``."""
        NR = self.N * self.R
        q0 = np.bincount(self.sr, weights=e * e, minlength=NR)
        ed = e[self.dest]
        el = e[self.dest - 1]
        q1 = np.bincount(self.dest_sr, weights=2.0 * ed * el, minlength=NR)
        q2 = np.bincount(self.dest_sr, weights=el * el, minlength=NR)
        e0 = e[self.first]
        q2 -= np.bincount(self.first_sr, weights=e0 * e0, minlength=NR)
        return np.stack([q0, q1, q2], axis=1).reshape(self.N, self.R, 3)

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return np.split(arr, self.offsets[1:-1])
