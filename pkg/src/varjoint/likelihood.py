"""Log-density kernels for the joint longitudinal/outcome model.

Everything here works one subject at a time and favours clarity over
speed; the sampler carries its own vectorised versions and is checked
against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .basis import design_rows

LOG_2PI = np.log(2.0 * np.pi)


class DomainError(ValueError):
    """Parameter outside its support."""


@dataclass(frozen=True)
class OutcomeScaling:
    """Constants inside the outcome logs: ``log(sigma_w * c_w)``, ``log(sigma_b / c_b)``."""

    c_w: float = 10.0
    c_b: float = 10.0


@dataclass
class SubjectParams:
    """Per-subject unknowns; log-variances are indexed by regime."""

    b: np.ndarray
    log_sigma2_b: np.ndarray
    log_sigma2_w: np.ndarray
    rho: float

    @property
    def log_sigma2_e(self) -> np.ndarray:
        """Stationary residual variance ``sigma_w^2 / (1 - rho^2)`` on the log scale."""
        return np.asarray(self.log_sigma2_w) - np.log1p(-self.rho ** 2)


def whiten_ar1(residuals, rho: float) -> tuple[np.ndarray, float]:
    """Map AR(1) errors to innovations.

    Returns the innovations and the log-Jacobian ``0.5 * log(1 - rho^2)``
    contributed by the stationary first term.
    """
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho={rho!r} outside (0, 1)")
    e = np.asarray(residuals, dtype=float)
    if e.size == 0:
        raise ValueError("need at least one residual")
    u = np.empty_like(e)
    u[0] = e[0] * np.sqrt(1.0 - rho * rho)
    u[1:] = e[1:] - rho * e[:-1]
    return u, 0.5 * np.log1p(-rho * rho)


def ar1_loglik(residuals, rho: float, sigma2_w) -> float:
    """Gaussian AR(1) log-density with per-observation innovation variance."""
    u, logjac = whiten_ar1(residuals, rho)
    s2 = np.broadcast_to(np.asarray(sigma2_w, dtype=float), u.shape)
    return float(-0.5 * np.sum(LOG_2PI + np.log(s2) + u * u / s2) + logjac)


def mean_curve(times, basis, b, beta0: float) -> np.ndarray:
    start, vals = design_rows(times, basis)
    cols = start[:, None] + np.arange(basis.degree + 1)
    return beta0 + np.sum(vals * np.asarray(b)[cols], axis=1)


def loglik_subject_long(series, basis, sp: SubjectParams, beta0: float,
                        obs_regime=None) -> float:
    """Log-density of one subject's trajectory given its spline coefficients.

    Innovation ``j`` uses the variance of observation ``j``'s regime.
    """
    resid = series.values - mean_curve(series.times, basis, sp.b, beta0)
    reg = np.zeros(resid.size, dtype=int) if obs_regime is None else np.asarray(obs_regime)
    s2 = np.exp(np.asarray(sp.log_sigma2_w, dtype=float))[reg]
    return ar1_loglik(resid, sp.rho, s2)


def ar1_covariance(n: int, rho: float, sigma2_w) -> np.ndarray:
    """Dense covariance of AR(1) errors with a stationary start.

    ``sigma2_w`` may vary by observation; innovation ``j`` has variance
    ``sigma2_w[j]`` and the first error has variance ``sigma2_w[0]/(1-rho^2)``.
    """
    s2 = np.broadcast_to(np.asarray(sigma2_w, dtype=float), (n,))
    # e = A w with A lower-triangular, A[j, k] = rho^(j-k) (first column scaled)
    j = np.arange(n)
    lag = j[:, None] - j[None, :]
    A = np.where(lag >= 0, rho ** np.maximum(lag, 0), 0.0)
    A[:, 0] /= np.sqrt(1.0 - rho * rho)
    return (A * s2) @ A.T


def loglik_subject_marginal(series, basis, sp: SubjectParams, beta0: float,
                            obs_regime=None, coef_regime=None) -> float:
    """Log-density of one trajectory with its spline coefficients integrated out.

    Dense ``O(n^3)`` evaluation, intended as a reference implementation.
    """
    from .basis import design_matrix

    n = series.n_obs
    reg = np.zeros(n, dtype=int) if obs_regime is None else np.asarray(obs_regime)
    D = design_matrix(series.times, basis)
    creg = np.zeros(D.shape[1], dtype=int) if coef_regime is None else np.asarray(coef_regime)
    s2 = np.exp(np.asarray(sp.log_sigma2_w, dtype=float))[reg]
    lam = np.exp(np.asarray(sp.log_sigma2_b, dtype=float))[creg]
    V = ar1_covariance(n, sp.rho, s2) + (D * lam) @ D.T
    C = np.linalg.cholesky(V)
    z = np.linalg.solve(C, series.values - beta0)
    return float(-0.5 * n * LOG_2PI - np.sum(np.log(np.diag(C))) - 0.5 * z @ z)


def logprior_b(sp: SubjectParams, coef_regime=None) -> float:
    b = np.asarray(sp.b, dtype=float)
    reg = np.zeros(b.size, dtype=int) if coef_regime is None else np.asarray(coef_regime)
    lv = np.asarray(sp.log_sigma2_b, dtype=float)[reg]
    return float(-0.5 * np.sum(LOG_2PI + lv + b * b * np.exp(-lv)))


def outcome_design_row(log_sigma2_w, log_sigma2_b, z=None,
                       scaling: OutcomeScaling = OutcomeScaling()) -> np.ndarray:
    """Predictor row ``[1, log(sigma_w,r * c_w)..., log(sigma_b,r / c_b)..., Z]``.

    Coefficient order: intercept, then one short-term term per regime, then
    one long-term term per regime (both in regime order), then covariates.
    """
    lw = 0.5 * np.atleast_1d(np.asarray(log_sigma2_w, dtype=float)) + np.log(scaling.c_w)
    lb = 0.5 * np.atleast_1d(np.asarray(log_sigma2_b, dtype=float)) - np.log(scaling.c_b)
    z = np.zeros(0) if z is None else np.atleast_1d(np.asarray(z, dtype=float))
    return np.concatenate([[1.0], lw, lb, z])


def n_outcome_coefs(n_regimes: int) -> int:
    return 1 + 2 * n_regimes


def eta_linear(sp: SubjectParams, scaling: OutcomeScaling, alpha, gamma=None, z=None) -> float:
    """Probit linear predictor for one subject."""
    h = outcome_design_row(sp.log_sigma2_w, sp.log_sigma2_b, None, scaling)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != h.size:
        raise ValueError(f"expected {h.size} outcome coefficients, got {alpha.size}")
    eta = float(h @ alpha)
    if z is not None and np.size(z):
        eta += float(np.asarray(gamma, dtype=float) @ np.asarray(z, dtype=float))
    return eta


def loglik_outcome(y: int, eta):
    """``y log Phi(eta) + (1 - y) log(1 - Phi(eta))`` without underflow."""
    sign = 2.0 * np.asarray(y) - 1.0
    return log_ndtr(sign * np.asarray(eta, dtype=float))


def log_normal(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + 2.0 * np.log(sd) + ((x - mean) / sd) ** 2)


def log_half_cauchy(x, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(2.0 / (np.pi * scale)) - np.log1p((x / scale) ** 2)
    return np.where(x > 0, out, -np.inf)


def log_joint(dataset, state, prior, scaling: OutcomeScaling = OutcomeScaling(),
              include_outcome: bool | None = None, marginalize_b: bool = False) -> float:
    """Joint log-density of data and unknowns (probit latents integrated out).

    With ``marginalize_b`` the spline coefficients are integrated out too.
    """
    if include_outcome is None:
        include_outcome = dataset.has_outcome
    reg = dataset.regimes
    total = 0.0
    for i, s in enumerate(dataset.subjects):
        sp = state.subject(i)
        if not 0.0 < sp.rho < 1.0:
            return -np.inf
        if marginalize_b:
            total += loglik_subject_marginal(s, dataset.basis, sp, state.beta0,
                                             reg.obs_regime[i], reg.coef_regime[i])
        else:
            total += loglik_subject_long(s, dataset.basis, sp, state.beta0, reg.obs_regime[i])
            total += logprior_b(sp, reg.coef_regime[i])
        total += float(np.sum(log_normal(sp.log_sigma2_b, state.v_b, state.psi_b)))
        total += float(np.sum(log_normal(sp.log_sigma2_w, state.v_w, state.psi_w)))
        if include_outcome:
            eta = eta_linear(sp, scaling, state.alpha, state.gamma, s.covariates)
            total += float(loglik_outcome(s.outcome, eta))
    total += float(log_normal(state.beta0, 0.0, prior.psi))
    total += float(np.sum(log_normal(state.v_b, prior.m_b, prior.kappa_b)))
    total += float(np.sum(log_normal(state.v_w, prior.m_w, prior.kappa_w)))
    total += float(np.sum(log_half_cauchy(state.psi_b, prior.tau_b)))
    total += float(np.sum(log_half_cauchy(state.psi_w, prior.tau_w)))
    if include_outcome:
        total += float(np.sum(log_normal(state.alpha, 0.0, prior.omega)))
        total += float(np.sum(log_normal(state.gamma, 0.0, prior.omega)))
    return total
