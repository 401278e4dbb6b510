"""Two-stage plug-in baseline.

Stage 1 fits a homogeneous linear mixed model (one shared random-effect
variance, innovation variance and autocorrelation) by maximum likelihood,
then computes per-subject empirical variabilities from the BLUPs and the
one-step-ahead residuals.  Stage 2 is a maximum-likelihood probit
regression of the outcome on those plug-in values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_ndtr

from ._banded import back_solve_all, factor_all
from .likelihood import OutcomeScaling
from .stacked import StackedData

Z95 = 1.959963984540054


@dataclass
class Stage1Fit:
    beta0_hat: float
    b_hat: np.ndarray
    rho_hat: float
    sigma2_b_hat: float
    sigma2_w_hat: float
    loglik: float
    converged: bool
    n_iter: int
    residuals: list = field(default_factory=list, repr=False)
    obs_regime: list = field(default_factory=list, repr=False)
    coef_regime: np.ndarray | None = field(default=None, repr=False)
    n_regimes: int = 1

    def empirical_sigma2_b(self, subject: int) -> np.ndarray:
        """Sample variance (ddof 1) of the subject's BLUPs, one value per regime."""
        creg = self.coef_regime[subject]
        b = self.b_hat[subject]
        return np.array([empirical_sigma2_b(b[creg == r]) for r in range(self.n_regimes)])

    def empirical_sigma2_w(self, subject: int) -> np.ndarray:
        """Sample variance (ddof 1) of one-step-ahead innovations, one value per regime."""
        w = one_step_innovations(self.residuals[subject], self.rho_hat)
        reg = self.obs_regime[subject]
        return np.array([_sample_var(w[reg == r]) for r in range(self.n_regimes)])


def _sample_var(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float("nan")
    return float(np.var(x, ddof=1))


def empirical_sigma2_b(b_hat) -> float:
    """``sum_l (b_l - mean(b))^2 / (L - 1)``."""
    return _sample_var(b_hat)


def one_step_innovations(residuals, rho: float) -> np.ndarray:
    """``w_j = e_j - rho * e_{j-1}`` with ``e_0`` taken as 0."""
    e = np.asarray(residuals, dtype=float)
    w = e.copy()
    w[1:] -= rho * e[:-1]
    return w


def empirical_sigma2_w(residuals, rho: float) -> float:
    return _sample_var(one_step_innovations(residuals, rho))


def _profile(st: StackedData, params):
    """Profile log-likelihood over ``beta0`` and the pieces needed for the BLUPs."""
    lb, lw, phi = params
    rho = float(expit(phi))
    if not 0.0 < rho < 1.0:
        return -np.inf, None
    N, L = st.N, st.L
    w = np.full((N, st.R), math.exp(-lw))
    chol, v, sc, logdet = factor_all(st.band, st.border, st.scal, w, np.full(N, rho),
                                     np.full((N, L), math.exp(-lb)))
    if np.any(np.isnan(logdet)):
        return -np.inf, None
    vc, vy = v[:, :, 0], v[:, :, 1]
    # residual quadratic form sum_i Q_i(bp) - |vy - bp vc|^2 = A - 2 bp B + bp^2 C
    A = np.sum(sc[:, 2] - np.einsum("nl,nl->n", vy, vy))
    B = np.sum(sc[:, 1] - np.einsum("nl,nl->n", vc, vy))
    C = np.sum(sc[:, 0] - np.einsum("nl,nl->n", vc, vc))
    bp = B / C
    quad = A - 2.0 * bp * B + bp * bp * C
    n_total = st.x.size
    ll = -0.5 * (n_total * math.log(2.0 * math.pi) + n_total * lw - N * math.log1p(-rho * rho)
                 + quad + np.sum(logdet) + N * L * lb)
    return float(ll), (chol, vc, vy, bp, rho)


def stage1_fit(dataset, stacked: StackedData | None = None, max_iter: int = 4000,
               xtol: float = 1e-6, rho_starts=(0.5, 0.99), max_restarts: int = 3) -> Stage1Fit:
    """Maximum-likelihood homogeneous mixed model with AR(1) errors.

    ``beta0`` is profiled out by generalized least squares; the three
    variance parameters ``(log sigma2_b, log sigma2_w, logit rho)`` are
    optimized with Nelder-Mead.
    """
    st = stacked if stacked is not None else StackedData(dataset)
    means = np.array([s.values.mean() for s in dataset.subjects])
    d = np.concatenate([np.diff(s.values) for s in dataset.subjects])
    vb = np.var(means, ddof=1) if st.N > 1 and np.var(means) > 0 else np.var(st.x) + 1e-12
    x0 = np.array([math.log(vb), math.log(np.mean(d * d) / 2.0 + 1e-300), 0.0])

    def nll(p):
        ll, _ = _profile(st, p)
        return -ll if np.isfinite(ll) else 1e300

    opts = {"xatol": xtol, "fatol": 1e-7, "maxiter": max_iter, "maxfev": 2 * max_iter,
            "adaptive": True}
    # The surface can have separate modes in rho; start from both ends and
    # restart the simplex from the best point until it stops moving.
    starts = [x0.copy() for _ in rho_starts]
    for s0, r0 in zip(starts, rho_starts):
        s0[2] = math.log(r0 / (1.0 - r0))
    res = min((minimize(nll, s0, method="Nelder-Mead", options=opts) for s0 in starts),
              key=lambda r: r.fun)
    n_iter = int(res.nit)
    converged = False
    for _ in range(max_restarts):
        again = minimize(nll, res.x, method="Nelder-Mead", options=opts)
        n_iter += int(again.nit)
        moved = np.max(np.abs(again.x - res.x)) > xtol * (1.0 + np.max(np.abs(res.x)))
        res = again if again.fun <= res.fun else res
        if not moved:
            converged = True
            break
    ll, parts = _profile(st, res.x)
    chol, vc, vy, bp, rho = parts
    b_hat = back_solve_all(chol, np.ascontiguousarray(vy - bp * vc))
    beta0 = st.offset + bp
    e = st.x - st.mean_part(beta0, b_hat)
    return Stage1Fit(
        beta0_hat=float(beta0), b_hat=b_hat, rho_hat=rho,
        sigma2_b_hat=float(math.exp(res.x[0])), sigma2_w_hat=float(math.exp(res.x[1])),
        loglik=ll, converged=converged, n_iter=n_iter,
        residuals=st.split(e), obs_regime=list(dataset.regimes.obs_regime),
        coef_regime=st.coef_regime, n_regimes=st.R)


# -- stage 2 ---------------------------------------------------------------

class SeparationError(RuntimeError):
    """Probit likelihood has no finite maximizer."""


@dataclass
class ProbitFit:
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    n_iter: int
    score: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.coef - Z95 * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.coef + Z95 * self.se


def _probit_parts(y, X, beta):
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    eta = X @ beta
    lcdf = log_ndtr(s * eta)
    # m = s * phi(eta) / Phi(s * eta), computed on the log scale
    m = s * np.exp(-0.5 * eta * eta - 0.5 * math.log(2.0 * math.pi) - lcdf)
    score = X.T @ m
    wgt = m * (m + eta)
    hess = -(X * wgt[:, None]).T @ X
    return float(np.sum(lcdf)), score, hess


def probit_loglik(y, X, beta) -> float:
    return _probit_parts(y, X, beta)[0]


def probit_mle(y, X, tol: float = 1e-10, max_iter: int = 100, max_coef: float = 50.0) -> ProbitFit:
    """Newton-Raphson probit MLE with step halving.

    Raises :class:`SeparationError` when the coefficients diverge (no finite
    maximizer) or the information matrix is singular.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    beta = np.zeros(X.shape[1])
    ll, score, hess = _probit_parts(y, X, beta)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new, score_new, hess_new = _probit_parts(y, X, cand)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, ll, score, hess = cand, ll_new, score_new, hess_new
        if np.max(np.abs(beta)) > max_coef:
            raise SeparationError("coefficients diverge (separated outcomes)")
        if np.max(np.abs(score)) < tol:
            break
    else:
        raise SeparationError(f"Newton-Raphson did not converge in {max_iter} iterations")
    info = -hess
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SeparationError("singular information matrix") from None
    if np.any(np.diag(cov) <= 0):
        raise SeparationError("information matrix not positive definite")
    return ProbitFit(beta, np.sqrt(np.diag(cov)), ll, it, score)


def stage2_design(sigma2_b, sigma2_w, scaling: OutcomeScaling = OutcomeScaling(), Z=None):
    """Rows ``[1, log(sigma_w,r * c_w)..., log(sigma_b,r / c_b)..., Z]``."""
    sb = np.atleast_2d(np.asarray(sigma2_b, dtype=float))
    sw = np.atleast_2d(np.asarray(sigma2_w, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = [np.ones((sb.shape[0], 1)), 0.5 * np.log(sw) + math.log(scaling.c_w),
                0.5 * np.log(sb) - math.log(scaling.c_b)]
    if Z is not None and np.size(Z):
        cols.append(np.asarray(Z, dtype=float).reshape(sb.shape[0], -1))
    return np.hstack(cols)


def stage2_probit(outcomes, sigma2_b, sigma2_w, scaling: OutcomeScaling = OutcomeScaling(),
                  Z=None) -> ProbitFit:
    """Probit MLE of the outcome on plug-in variabilities (shape ``(N, R)`` each)."""
    X = stage2_design(np.reshape(sigma2_b, (len(outcomes), -1)),
                      np.reshape(sigma2_w, (len(outcomes), -1)), scaling, Z)
    if not np.all(np.isfinite(X)):
        raise SeparationError("non-finite plug-in predictor (zero empirical variance)")
    return probit_mle(outcomes, X)


@dataclass
class TwoStageResult:
    coef: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray
    stage1: Stage1Fit
    sigma2_b: np.ndarray
    sigma2_w: np.ndarray
    ok: bool = True
    message: str = ""


def two_stage(dataset, scaling: OutcomeScaling = OutcomeScaling()) -> TwoStageResult:
    """Full plug-in pipeline.  Failures are reported through ``ok``/``message``."""
    if not dataset.has_outcome:
        raise ValueError("two-stage fit needs outcomes")
    s1 = stage1_fit(dataset)
    N = dataset.n_subjects
    sb = np.vstack([s1.empirical_sigma2_b(i) for i in range(N)])
    sw = np.vstack([s1.empirical_sigma2_w(i) for i in range(N)])
    K = 1 + 2 * s1.n_regimes + dataset.n_covariates
    nan = np.full(K, np.nan)
    msg = "" if s1.converged else "stage 1 optimizer did not converge"
    try:
        fit = stage2_probit(dataset.outcomes, sb, sw, scaling,
                            dataset.covariates if dataset.n_covariates else None)
    except SeparationError as exc:
        return TwoStageResult(nan, nan, nan, nan, s1, sb, sw, ok=False, message=str(exc))
    return TwoStageResult(fit.coef, fit.lower, fit.upper, fit.se, s1, sb, sw,
                          ok=s1.converged, message=msg)
