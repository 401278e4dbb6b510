"""Metropolis-within-Gibbs sampler for the joint model.

The default sweep (``collapse=True``) integrates the spline coefficients
out of every variance and ``rho`` move:

1. per-subject, per-regime ``log sigma2_b`` and ``log sigma2_w``, then
   ``rho`` (random-walk Metropolis on the collapsed target);
2. an adaptive joint move of ``(logit rho, log sigma2_w, log sigma2_b)``
   per subject, whose proposal covariance is learned during burn-in;
3. ``beta0`` with every ``b_i`` integrated out, then each ``b_i`` from its
   exact Gaussian conditional;
4. regime hyperparameters: ``v`` by conjugate Gaussian draws, ``Psi`` by
   slice sampling under the half-Cauchy prior;
5. probit latents ``z`` then ``(alpha, gamma)`` by conjugate Gaussian draws.

With ``collapse=False`` the variance and ``rho`` moves condition on the
current ``b`` instead, and a joint ``(rho, log sigma2_w)`` move keeps the
scaled residual sum of squares fixed.

The variance and ``rho`` kernels act on all subjects at once: given the
globals, subjects are conditionally independent, so each subject runs its
own accept/reject step inside one vectorised call.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr
from scipy.stats import truncnorm

from ._banded import back_solve_all, factor_all, marginal_terms
from .likelihood import OutcomeScaling, SubjectParams, log_joint, n_outcome_coefs
from .stacked import StackedData

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """The chain reached a state that violates the model's invariants."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PriorConfig:
    psi: float = 1000.0
    omega: float = 10.0
    m_b: float = 0.0
    m_w: float = 0.0
    kappa_b: float = 1000.0
    kappa_w: float = 1000.0
    tau_b: float = 2.5
    tau_w: float = 2.5

    def __post_init__(self):
        for name in ("psi", "omega", "kappa_b", "kappa_w", "tau_b", "tau_w"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 3
    n_iter: int = 8000
    n_burnin: int = 4000
    thin: int = 1
    seed: int = 0
    step_log_sigma2_b: float = 0.5
    step_log_sigma2_w: float = 0.3
    step_logit_rho: float = 0.5
    target_accept: float = 0.44
    adapt: bool = True
    # Extra joint (rho, log sigma2_w) move; breaks their posterior correlation.
    joint_rho_move: bool = True
    # Integrate the spline coefficients out of the variance and rho moves.
    collapse: bool = True
    # Adaptive joint moves per subject and sweep (collapsed mode only).
    block_moves: int = 1
    slice_width: float = 1.0
    # Post-burn-in subject-level draws kept across all chains (0 = none).
    n_subject_draws: int = 0
    include_outcome: bool = True
    debug: bool = False

    def __post_init__(self):
        if self.n_iter <= self.n_burnin:
            raise ValueError("n_iter must exceed n_burnin")
        if self.n_chains < 1 or self.thin < 1:
            raise ValueError("n_chains and thin must be >= 1")


@dataclass
class ParamState:
    beta0: float
    b: np.ndarray
    log_sigma2_b: np.ndarray
    log_sigma2_w: np.ndarray
    rho: np.ndarray
    v_b: np.ndarray
    psi_b: np.ndarray
    v_w: np.ndarray
    psi_w: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    z: np.ndarray

    def subject(self, i: int) -> SubjectParams:
        return SubjectParams(self.b[i], self.log_sigma2_b[i], self.log_sigma2_w[i],
                             float(self.rho[i]))

    def copy(self) -> "ParamState":
        return ParamState(**{k: (np.array(v, copy=True) if isinstance(v, np.ndarray) else v)
                             for k, v in self.__dict__.items()})

    def arrays(self) -> dict:
        return {k: np.asarray(v) for k, v in self.__dict__.items()}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def monitored_names(regime_names, n_covariates: int, with_outcome: bool = True) -> list[str]:
    names = ["beta0"]
    if with_outcome:
        names += [f"alpha[{k + 1}]" for k in range(n_outcome_coefs(len(regime_names)))]
        names += [f"gamma[{k + 1}]" for k in range(n_covariates)]
    for group in ("v_b", "psi_b", "v_w", "psi_w"):
        names += [f"{group}[{r}]" for r in regime_names]
    return names


def slice_sample(logf, x0: float, width: float, rng, lower: float = -np.inf,
                 max_steps: int = 64) -> float:
    """Univariate slice sampler with stepping out and shrinkage."""
    logy = logf(x0) + np.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(rng.integers(max_steps))
    k = max_steps - 1 - j
    while j > 0 and left > lower and logf(left) > logy:
        left -= width
        j -= 1
    while k > 0 and logf(right) > logy:
        right += width
        k -= 1
    left = max(left, lower)
    while True:
        x1 = rng.uniform(left, right)
        if logf(x1) > logy:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1


def half_cauchy_scale_logpost(x, v, psi_scale, theta):
    """Log target of a scale ``Psi`` given ``theta_i ~ N(v, Psi^2)``."""
    if x <= 0:
        return -np.inf
    ss = float(np.sum((theta - v) ** 2))
    return -theta.size * math.log(x) - 0.5 * ss / (x * x) - math.log1p((x / psi_scale) ** 2)


class GibbsSampler:
    """Sweep-level driver over one chain."""

    def __init__(self, dataset, prior: PriorConfig = PriorConfig(),
                 config: SamplerConfig = SamplerConfig(),
                 scaling: OutcomeScaling = OutcomeScaling(), rng=None, stacked=None):
        self.dataset = dataset
        self.st = stacked if stacked is not None else StackedData(dataset)
        self.prior = prior
        self.config = config
        self.scaling = scaling
        self.rng = np.random.default_rng(rng)
        self.use_outcome = bool(config.include_outcome and self.st.has_outcome)
        st = self.st
        self.K = n_outcome_coefs(st.R)
        self.P = st.Z.shape[1]
        self.log_cw = math.log(scaling.c_w)
        self.log_cb = math.log(scaling.c_b)
        self.log_step = {
            "b": np.full((st.N, st.R), math.log(config.step_log_sigma2_b)),
            "w": np.full((st.N, st.R), math.log(config.step_log_sigma2_w)),
            "rho": np.full(st.N, math.log(config.step_logit_rho)),
            "rs": np.full(st.N, math.log(config.step_logit_rho)),
            "block": np.zeros(st.N),
        }
        self._accept = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self._n_accept_steps = 0
        self.last_increment = 0.0
        self._q = None
        self._eta = None
        self._marg = None
        self._block = None

    # -- state helpers -------------------------------------------------

    def initial_state(self) -> ParamState:
        st = self.st
        ds = self.dataset
        N, R, L = st.N, st.R, st.L
        beta0 = float(st.x.mean())
        theta_w = np.empty((N, R))
        for i, s in enumerate(ds.subjects):
            reg = ds.regimes.obs_regime[i]
            d = np.diff(s.values)
            fallback = np.mean(d * d) / 2.0
            for r in range(R):
                dr = d[(reg[1:] == r) & (reg[:-1] == r)]
                theta_w[i, r] = np.log(np.mean(dr * dr) / 2.0 if dr.size else fallback)
        means = np.array([s.values.mean() for s in ds.subjects])
        vb = np.var(means, ddof=1) if N > 1 else 0.0
        if not vb > 0:
            vb = np.var(st.x)
        theta_b = np.full((N, R), np.log(vb))
        theta_w = np.where(np.isfinite(theta_w), theta_w, np.log(np.var(st.x) + 1e-12))
        z = np.where(st.y == 1, 0.5, -0.5)
        return ParamState(
            beta0=beta0, b=np.zeros((N, L)), log_sigma2_b=theta_b, log_sigma2_w=theta_w,
            rho=np.full(N, 0.9), v_b=theta_b.mean(axis=0), psi_b=np.ones(R),
            v_w=theta_w.mean(axis=0), psi_w=np.ones(R),
            alpha=np.zeros(self.K), gamma=np.zeros(self.P), z=z.astype(float))

    def outcome_design(self, state: ParamState) -> np.ndarray:
        lw = 0.5 * state.log_sigma2_w + self.log_cw
        lb = 0.5 * state.log_sigma2_b - self.log_cb
        return np.hstack([np.ones((self.st.N, 1)), lw, lb, self.st.Z])

    def eta(self, state: ParamState) -> np.ndarray:
        return self.outcome_design(state) @ np.concatenate([state.alpha, state.gamma])

    def refresh(self, state: ParamState) -> None:
        """Recompute cached residual statistics and linear predictors."""
        e = self.st.x - self.st.mean_part(state.beta0, state.b)
        self._q = self.st.residual_stats(e)
        self._eta = self.eta(state) if self.use_outcome else None

    def _outcome_ll(self, eta):
        return log_ndtr(self.st.sign * eta)

    # -- (beta0, b) block ------------------------------------------------

    def _prior_prec(self, log_sigma2_b):
        return np.exp(-log_sigma2_b)[np.arange(self.st.N)[:, None], self.st.coef_regime]

    def factorize(self, state: ParamState) -> dict:
        """Band Cholesky of each ``b_i`` conditional precision plus projections.

        ``v[i]`` holds ``C_i^-1 [g_c, g_y]`` for the intercept and centred
        response columns.
        """
        st = self.st
        chol, v, sc, logdet = factor_all(st.band, st.border, st.scal,
                                         np.exp(-state.log_sigma2_w), state.rho,
                                         self._prior_prec(state.log_sigma2_b))
        if np.any(np.isnan(logdet)):
            bad = np.nonzero(np.isnan(logdet))[0].tolist()
            raise SamplerError(f"spline precision not positive definite for subjects {bad}", state)
        return {"chol": chol, "v": v, "s_cc": sc[:, 0], "s_cy": sc[:, 1], "s_yy": sc[:, 2],
                "logdet": logdet}

    def marginal_from_factor(self, state: ParamState, fac: dict) -> np.ndarray:
        """:meth:`marginal_loglik` at the current state, reusing ``fac``."""
        st = self.st
        bp = state.beta0 - st.offset
        v = fac["v"][:, :, 1] - bp * fac["v"][:, :, 0]
        q = fac["s_yy"] - 2.0 * bp * fac["s_cy"] + bp * bp * fac["s_cc"]
        return self._marginal_value(state.log_sigma2_b, state.log_sigma2_w, state.rho,
                                    q - np.sum(v * v, axis=1), fac["logdet"])

    def _marginal_value(self, lb, lw, rho, quad, logdet):
        prior_lv = lb[np.arange(self.st.N)[:, None], self.st.coef_regime]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (-0.5 * np.sum(self.st.obs_count * lw, axis=1) + 0.5 * np.log1p(-rho * rho)
                   - 0.5 * quad - 0.5 * logdet - 0.5 * np.sum(prior_lv, axis=1))
        return np.where(np.isnan(out), -np.inf, out)

    def update_beta0(self, state: ParamState, fac: dict | None = None) -> dict:
        """Draw ``beta0`` with every ``b_i`` marginalised out."""
        fac = fac if fac is not None else self.factorize(state)
        v = fac["v"]
        a = np.sum(fac["s_cc"] - np.einsum("nl,nl->n", v[:, :, 0], v[:, :, 0]))
        c = np.sum(fac["s_cy"] - np.einsum("nl,nl->n", v[:, :, 0], v[:, :, 1]))
        psi2 = self.prior.psi ** 2
        prec = 1.0 / psi2 + a
        mean = (c - self.st.offset / psi2) / prec
        state.beta0 = self.st.offset + mean + self.rng.standard_normal() / math.sqrt(prec)
        return fac

    def spline_conditional_mean(self, state: ParamState, fac: dict | None = None) -> np.ndarray:
        fac = fac if fac is not None else self.factorize(state)
        rhs = fac["v"][:, :, 1] - (state.beta0 - self.st.offset) * fac["v"][:, :, 0]
        return self._back_solve(fac["chol"], rhs)

    def _back_solve(self, chol, rhs):
        return back_solve_all(chol, np.ascontiguousarray(rhs))

    def update_splines(self, state: ParamState, fac: dict | None = None) -> None:
        """Draw every ``b_i`` from its Gaussian full conditional."""
        fac = fac if fac is not None else self.factorize(state)
        rhs = fac["v"][:, :, 1] - (state.beta0 - self.st.offset) * fac["v"][:, :, 0]
        rhs = rhs + self.rng.standard_normal(rhs.shape)
        state.b = self._back_solve(fac["chol"], rhs)

    # -- Metropolis kernels ---------------------------------------------

    def _adapt(self, key, idx, accept_prob, it):
        if it is None:
            return
        gain = (it + 1.0) ** -0.6
        ls = self.log_step[key]
        ls[idx] = np.clip(ls[idx] + gain * (accept_prob - self.config.target_accept), -12.0, 3.0)

    def _record(self, key, idx, accepted):
        self._accept[key][idx] += accepted

    def update_log_sigma2_b(self, state: ParamState, regime: int, adapt_iter=None) -> None:
        st = self.st
        r = regime
        theta = state.log_sigma2_b[:, r]
        step = np.exp(self.log_step["b"][:, r])
        prop = theta + step * self.rng.standard_normal(st.N)
        k = st.coef_count[:, r]
        S = np.sum(state.b * state.b * st.coef_onehot[:, :, r], axis=1)
        v, psi = state.v_b[r], state.psi_b[r]
        dlog = (-0.5 * k * (prop - theta) - 0.5 * S * (np.exp(-prop) - np.exp(-theta))
                - 0.5 * ((prop - v) ** 2 - (theta - v) ** 2) / psi ** 2)
        if self.use_outcome:
            a = state.alpha[1 + st.R + r]
            eta_new = self._eta + a * 0.5 * (prop - theta)
            dlog = dlog + self._outcome_ll(eta_new) - self._outcome_ll(self._eta)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.log_sigma2_b[:, r] = np.where(acc, prop, theta)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dlog[acc]))
        self._record("b", (slice(None), r), acc)
        self._adapt("b", (slice(None), r), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def update_log_sigma2_w(self, state: ParamState, regime: int, adapt_iter=None) -> None:
        st = self.st
        r = regime
        theta = state.log_sigma2_w[:, r]
        step = np.exp(self.log_step["w"][:, r])
        prop = theta + step * self.rng.standard_normal(st.N)
        q = self._q[:, r]
        rho = state.rho
        ss = q[:, 0] - rho * q[:, 1] + rho * rho * q[:, 2]
        m = st.obs_count[:, r]
        v, psi = state.v_w[r], state.psi_w[r]
        dlog = (-0.5 * m * (prop - theta) - 0.5 * ss * (np.exp(-prop) - np.exp(-theta))
                - 0.5 * ((prop - v) ** 2 - (theta - v) ** 2) / psi ** 2)
        if self.use_outcome:
            a = state.alpha[1 + r]
            eta_new = self._eta + a * 0.5 * (prop - theta)
            dlog = dlog + self._outcome_ll(eta_new) - self._outcome_ll(self._eta)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.log_sigma2_w[:, r] = np.where(acc, prop, theta)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dlog[acc]))
        self._record("w", (slice(None), r), acc)
        self._adapt("w", (slice(None), r), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def rho_log_target(self, state: ParamState, rho: np.ndarray) -> np.ndarray:
        q = self._q
        ss = q[:, :, 0] - rho[:, None] * q[:, :, 1] + (rho * rho)[:, None] * q[:, :, 2]
        return -0.5 * np.sum(ss * np.exp(-state.log_sigma2_w), axis=1) + 0.5 * np.log1p(-rho * rho)

    def update_rho(self, state: ParamState, adapt_iter=None) -> None:
        st = self.st
        rho = state.rho
        phi = np.log(rho) - np.log1p(-rho)
        phi_new = phi + np.exp(self.log_step["rho"]) * self.rng.standard_normal(st.N)
        rho_new = 1.0 / (1.0 + np.exp(-phi_new))
        ok = (rho_new > 0.0) & (rho_new < 1.0)
        rho_new = np.where(ok, rho_new, rho)
        dtarget = self.rho_log_target(state, rho_new) - self.rho_log_target(state, rho)
        # log|d rho / d phi| = log rho + log(1 - rho)
        djac = (np.log(rho_new) + np.log1p(-rho_new)) - (np.log(rho) + np.log1p(-rho))
        dlog = np.where(ok, dtarget + djac, -np.inf)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.rho = np.where(acc, rho_new, rho)
        self.last_increment = float(np.sum(dtarget[acc]))
        self._record("rho", slice(None), acc)
        self._adapt("rho", slice(None), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def update_rho_scale(self, state: ParamState, adapt_iter=None) -> None:
        """Joint move of ``rho`` and every ``log sigma2_w`` of a subject.

        ``logit(rho)`` takes a random-walk step and each regime's
        ``log sigma2_w`` shifts by ``log(SS_r(rho') / SS_r(rho))``, which keeps
        the scaled residual sum of squares fixed.  The map is a translation
        in the log-variances for a given step, so its Jacobian is 1 and the
        proposal stays symmetric.
        """
        st = self.st
        q = self._q
        rho = state.rho
        phi = np.log(rho) - np.log1p(-rho)
        phi_new = phi + np.exp(self.log_step["rs"]) * self.rng.standard_normal(st.N)
        rho_new = 1.0 / (1.0 + np.exp(-phi_new))
        ok = (rho_new > 0.0) & (rho_new < 1.0)
        rho_new = np.where(ok, rho_new, rho)

        def ss(r):
            return q[:, :, 0] - r[:, None] * q[:, :, 1] + (r * r)[:, None] * q[:, :, 2]

        ss_old, ss_new = ss(rho), ss(rho_new)
        has = st.obs_count > 0
        shift = np.where(has, np.log(np.where(has, ss_new, 1.0)) - np.log(np.where(has, ss_old, 1.0)), 0.0)
        theta = state.log_sigma2_w
        theta_new = theta + shift
        m = st.obs_count
        dtarget = np.sum(-0.5 * m * shift - 0.5 * (ss_new * np.exp(-theta_new) - ss_old * np.exp(-theta)),
                         axis=1)
        dtarget += 0.5 * (np.log1p(-rho_new * rho_new) - np.log1p(-rho * rho))
        psi2 = state.psi_w ** 2
        dtarget -= 0.5 * np.sum(((theta_new - state.v_w) ** 2 - (theta - state.v_w) ** 2) / psi2, axis=1)
        if self.use_outcome:
            a = state.alpha[1:1 + st.R]
            eta_new = self._eta + 0.5 * shift @ a
            dtarget = dtarget + self._outcome_ll(eta_new) - self._outcome_ll(self._eta)
        djac = (np.log(rho_new) + np.log1p(-rho_new)) - (np.log(rho) + np.log1p(-rho))
        dlog = np.where(ok & np.all(np.isfinite(shift), axis=1), dtarget + djac, -np.inf)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.rho = np.where(acc, rho_new, rho)
        state.log_sigma2_w = np.where(acc[:, None], theta_new, theta)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dtarget[acc]))
        self._record("rs", slice(None), acc)
        self._adapt("rs", slice(None), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    # -- kernels with the spline coefficients integrated out ---------------

    def marginal_loglik(self, state: ParamState, log_sigma2_b=None, log_sigma2_w=None,
                        rho=None) -> np.ndarray:
        """Per-subject log-density of ``X_i`` given ``beta0`` with ``b_i`` integrated out.

        Omits the ``-n_i/2 log(2 pi)`` constant.  Subjects whose precision
        is not positive definite get ``-inf``.
        """
        st = self.st
        lb = state.log_sigma2_b if log_sigma2_b is None else log_sigma2_b
        lw = state.log_sigma2_w if log_sigma2_w is None else log_sigma2_w
        rho = state.rho if rho is None else rho
        quad, logdet = marginal_terms(st.band, st.border, st.scal, np.exp(-lw), rho,
                                      self._prior_prec(lb), state.beta0 - st.offset)
        return self._marginal_value(lb, lw, rho, quad, logdet)

    def _refresh_marginal(self, state: ParamState) -> None:
        self._marg = self.marginal_loglik(state)

    def update_log_sigma2_w_collapsed(self, state: ParamState, regime: int,
                                      adapt_iter=None) -> None:
        st = self.st
        r = regime
        theta = state.log_sigma2_w[:, r]
        prop = theta + np.exp(self.log_step["w"][:, r]) * self.rng.standard_normal(st.N)
        lw = state.log_sigma2_w.copy()
        lw[:, r] = prop
        marg_new = self.marginal_loglik(state, log_sigma2_w=lw)
        v, psi = state.v_w[r], state.psi_w[r]
        dlog = marg_new - self._marg - 0.5 * ((prop - v) ** 2 - (theta - v) ** 2) / psi ** 2
        if self.use_outcome:
            eta_new = self._eta + state.alpha[1 + r] * 0.5 * (prop - theta)
            dlog = dlog + self._outcome_ll(eta_new) - self._outcome_ll(self._eta)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.log_sigma2_w[:, r] = np.where(acc, prop, theta)
        self._marg = np.where(acc, marg_new, self._marg)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dlog[acc]))
        self._record("w", (slice(None), r), acc)
        self._adapt("w", (slice(None), r), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def update_log_sigma2_b_collapsed(self, state: ParamState, regime: int,
                                      adapt_iter=None) -> None:
        st = self.st
        r = regime
        theta = state.log_sigma2_b[:, r]
        prop = theta + np.exp(self.log_step["b"][:, r]) * self.rng.standard_normal(st.N)
        lb = state.log_sigma2_b.copy()
        lb[:, r] = prop
        marg_new = self.marginal_loglik(state, log_sigma2_b=lb)
        v, psi = state.v_b[r], state.psi_b[r]
        dlog = marg_new - self._marg - 0.5 * ((prop - v) ** 2 - (theta - v) ** 2) / psi ** 2
        if self.use_outcome:
            eta_new = self._eta + state.alpha[1 + st.R + r] * 0.5 * (prop - theta)
            dlog = dlog + self._outcome_ll(eta_new) - self._outcome_ll(self._eta)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.log_sigma2_b[:, r] = np.where(acc, prop, theta)
        self._marg = np.where(acc, marg_new, self._marg)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dlog[acc]))
        self._record("b", (slice(None), r), acc)
        self._adapt("b", (slice(None), r), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def update_rho_collapsed(self, state: ParamState, adapt_iter=None) -> None:
        st = self.st
        rho = state.rho
        phi = np.log(rho) - np.log1p(-rho)
        phi_new = phi + np.exp(self.log_step["rho"]) * self.rng.standard_normal(st.N)
        rho_new = 1.0 / (1.0 + np.exp(-phi_new))
        ok = (rho_new > 0.0) & (rho_new < 1.0)
        rho_new = np.where(ok, rho_new, rho)
        marg_new = self.marginal_loglik(state, rho=rho_new)
        dtarget = marg_new - self._marg
        djac = (np.log(rho_new) + np.log1p(-rho_new)) - (np.log(rho) + np.log1p(-rho))
        dlog = np.where(ok, dtarget + djac, -np.inf)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        state.rho = np.where(acc, rho_new, rho)
        self._marg = np.where(acc, marg_new, self._marg)
        self.last_increment = float(np.sum(dtarget[acc]))
        self._record("rho", slice(None), acc)
        self._adapt("rho", slice(None), np.exp(np.minimum(dlog, 0.0)), adapt_iter)

    def _block_vector(self, state: ParamState) -> np.ndarray:
        rho = state.rho
        return np.hstack([(np.log(rho) - np.log1p(-rho))[:, None],
                          state.log_sigma2_w, state.log_sigma2_b])

    def _block_log_target(self, state: ParamState, x: np.ndarray):
        """Collapsed log target of each subject's block plus the cached pieces."""
        st = self.st
        R = st.R
        phi = x[:, 0]
        rho = 1.0 / (1.0 + np.exp(-phi))
        lw = x[:, 1:1 + R]
        lb = x[:, 1 + R:]
        marg = self.marginal_loglik(state, log_sigma2_b=lb, log_sigma2_w=lw, rho=rho)
        prior = (-0.5 * np.sum((lw - state.v_w) ** 2 / state.psi_w ** 2, axis=1)
                 - 0.5 * np.sum((lb - state.v_b) ** 2 / state.psi_b ** 2, axis=1))
        with np.errstate(divide="ignore"):
            jac = np.log(rho) + np.log1p(-rho)
        eta = None
        out = marg + prior
        if self.use_outcome:
            a = state.alpha
            eta = (self._eta + 0.5 * (lw - state.log_sigma2_w) @ a[1:1 + R]
                   + 0.5 * (lb - state.log_sigma2_b) @ a[1 + R:1 + 2 * R])
            out = out + self._outcome_ll(eta)
        ok = (rho > 0.0) & (rho < 1.0)
        return np.where(ok, out, -np.inf), np.where(ok, jac, 0.0), marg, eta, rho

    def _block_proposal_chol(self) -> np.ndarray:
        ad = self._block
        d = ad["mean"].shape[1]
        if ad["count"] > 4 * d:
            cov = ad["cov"] / (ad["count"] - 1) + 1e-6 * np.eye(d)
        else:
            cov = ad["init"]
        return np.linalg.cholesky((2.38 ** 2 / d) * cov)

    def update_subject_block(self, state: ParamState, adapt_iter=None) -> None:
        """Joint random-walk move of ``(logit rho, log sigma2_w, log sigma2_b)`` per subject.

        The proposal covariance is the running posterior covariance of the
        block (learned during burn-in only, then frozen), scaled per subject
        toward 23.4% acceptance.
        """
        st = self.st
        x = self._block_vector(state)
        d = x.shape[1]
        if self._block is None:
            init = np.zeros((st.N, d, d))
            init[:, 0, 0] = np.exp(2 * self.log_step["rho"])
            idx = np.arange(1, d)
            steps = np.hstack([np.exp(2 * self.log_step["w"]), np.exp(2 * self.log_step["b"])])
            init[:, idx, idx] = steps
            self._block = {"mean": x.copy(), "cov": np.zeros((st.N, d, d)), "count": 1,
                           "init": init, "chol": None}
        ad = self._block
        if adapt_iter is not None or ad["chol"] is None:
            ad["chol"] = self._block_proposal_chol()
        scale = np.exp(self.log_step["block"])
        xi = self.rng.standard_normal((st.N, d))
        prop = x + scale[:, None] * np.einsum("nij,nj->ni", ad["chol"], xi)
        cur, jac_cur, _, _, _ = self._block_log_target(state, x)
        new, jac_new, marg_new, eta_new, rho_new = self._block_log_target(state, prop)
        dtarget = new - cur
        dlog = np.where(np.isfinite(new), dtarget + jac_new - jac_cur, -np.inf)
        acc = np.log(self.rng.uniform(size=st.N)) < dlog
        R = st.R
        state.rho = np.where(acc, rho_new, state.rho)
        state.log_sigma2_w = np.where(acc[:, None], prop[:, 1:1 + R], state.log_sigma2_w)
        state.log_sigma2_b = np.where(acc[:, None], prop[:, 1 + R:], state.log_sigma2_b)
        self._marg = np.where(acc, marg_new, self._marg)
        if self.use_outcome:
            self._eta = np.where(acc, eta_new, self._eta)
        self.last_increment = float(np.sum(dtarget[acc]))
        self._record("block", slice(None), acc)
        if adapt_iter is not None:
            gain = (adapt_iter + 1.0) ** -0.6
            self.log_step["block"] = np.clip(
                self.log_step["block"] + gain * (np.exp(np.minimum(dlog, 0.0)) - 0.234), -8.0, 3.0)
            # Welford update of the block's running mean and covariance
            x = self._block_vector(state)
            ad["count"] += 1
            delta = x - ad["mean"]
            ad["mean"] += delta / ad["count"]
            ad["cov"] += np.einsum("ni,nj->nij", delta, x - ad["mean"])

    # -- hyperparameters ------------------------------------------------

    def update_hypers(self, state: ParamState) -> None:
        p = self.prior
        for theta_all, v, psi, m, kappa, tau in (
                (state.log_sigma2_b, state.v_b, state.psi_b, p.m_b, p.kappa_b, p.tau_b),
                (state.log_sigma2_w, state.v_w, state.psi_w, p.m_w, p.kappa_w, p.tau_w)):
            for r in range(self.st.R):
                theta = theta_all[:, r]
                prec = theta.size / psi[r] ** 2 + 1.0 / kappa ** 2
                mean = (theta.sum() / psi[r] ** 2 + m / kappa ** 2) / prec
                v[r] = mean + self.rng.standard_normal() / math.sqrt(prec)
                vr = v[r]
                psi[r] = slice_sample(
                    lambda x: half_cauchy_scale_logpost(x, vr, tau, theta),
                    float(psi[r]), self.config.slice_width, self.rng, lower=0.0)

    # -- outcome coefficients ---------------------------------------------

    def update_outcome_coefs(self, state: ParamState) -> None:
        if not self.use_outcome:
            return
        st = self.st
        H = self.outcome_design(state)
        coef = np.concatenate([state.alpha, state.gamma])
        eta = H @ coef
        lo = np.where(st.y == 1, -eta, -np.inf)
        hi = np.where(st.y == 1, np.inf, -eta)
        state.z = eta + truncnorm.rvs(lo, hi, random_state=self.rng)
        prec = H.T @ H + np.eye(H.shape[1]) / self.prior.omega ** 2
        try:
            C = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise SamplerError(f"outcome precision not positive definite: {exc}", state) from exc
        u = solve_triangular(C, H.T @ state.z, lower=True)
        coef = solve_triangular(C, u + self.rng.standard_normal(u.size), lower=True, trans="T")
        state.alpha = coef[:self.K]
        state.gamma = coef[self.K:]
        self._eta = H @ coef

    # -- sweep / chain -------------------------------------------------

    def _debug_check(self, before: float, state: ParamState, label: str,
                     collapsed: bool = False) -> float:
        after = log_joint(self.dataset, state, self.prior, self.scaling, self.use_outcome,
                          marginalize_b=collapsed)
        if not np.isfinite(after):
            raise SamplerError(f"non-finite log joint after {label}", state)
        if before is not None and label.startswith("mh:"):
            diff = (after - before) - self.last_increment
            if abs(diff) > 1e-8:
                raise SamplerError(
                    f"{label}: log joint moved by {after - before!r}, "
                    f"accepted increment {self.last_increment!r}", state)
        return after

    def sweep(self, state: ParamState, it: int | None = None) -> None:
        """One full update of every unknown.  ``it`` enables step adaptation."""
        if self.config.collapse:
            self._sweep_collapsed(state, it)
        else:
            self._sweep_conditional(state, it)
        if not state.is_finite():
            raise SamplerError("non-finite parameter after sweep", state)

    def _sweep_conditional(self, state: ParamState, it) -> None:
        dbg = self.config.debug
        lj = self._debug_check(None, state, "start") if dbg else None
        fac = self.factorize(state)
        self.update_beta0(state, fac)
        self.update_splines(state, fac)
        self.refresh(state)
        if dbg:
            lj = self._debug_check(lj, state, "splines")
        for r in range(self.st.R):
            self.update_log_sigma2_b(state, r, it)
            if dbg:
                lj = self._debug_check(lj, state, f"mh:log_sigma2_b[{r}]")
        for r in range(self.st.R):
            self.update_log_sigma2_w(state, r, it)
            if dbg:
                lj = self._debug_check(lj, state, f"mh:log_sigma2_w[{r}]")
        self.update_rho(state, it)
        if dbg:
            lj = self._debug_check(lj, state, "mh:rho")
        if self.config.joint_rho_move:
            self.update_rho_scale(state, it)
            if dbg:
                lj = self._debug_check(lj, state, "mh:rho_scale")
        self.update_hypers(state)
        self.update_outcome_coefs(state)
        if dbg:
            self._debug_check(lj, state, "outcome")

    def _sweep_collapsed(self, state: ParamState, it) -> None:
        # Variance and rho moves integrate b out; (beta0, b) are then drawn
        # exactly, so the state at the end of the sweep is a coherent draw.
        dbg = self.config.debug
        if self._marg is None:
            self._refresh_marginal(state)
        lj = self._debug_check(None, state, "start", True) if dbg else None
        for r in range(self.st.R):
            self.update_log_sigma2_b_collapsed(state, r, it)
            if dbg:
                lj = self._debug_check(lj, state, f"mh:log_sigma2_b[{r}]", True)
        for r in range(self.st.R):
            self.update_log_sigma2_w_collapsed(state, r, it)
            if dbg:
                lj = self._debug_check(lj, state, f"mh:log_sigma2_w[{r}]", True)
        self.update_rho_collapsed(state, it)
        if dbg:
            lj = self._debug_check(lj, state, "mh:rho", True)
        for _ in range(self.config.block_moves):
            self.update_subject_block(state, it)
            if dbg:
                lj = self._debug_check(lj, state, "mh:block", True)
        fac = self.factorize(state)
        self.update_beta0(state, fac)
        self.update_splines(state, fac)
        self._marg = self.marginal_from_factor(state, fac)
        self.update_hypers(state)
        self.update_outcome_coefs(state)
        if dbg:
            self._debug_check(lj, state, "outcome", True)

    def monitored_values(self, state: ParamState) -> np.ndarray:
        parts = [[state.beta0]]
        if self.use_outcome:
            parts += [state.alpha, state.gamma]
        parts += [state.v_b, state.psi_b, state.v_w, state.psi_w]
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def acceptance_rates(self) -> dict:
        n = max(self._n_accept_steps, 1)
        return {
            "log_sigma2_b": float(self._accept["b"].mean() / n),
            "log_sigma2_w": float(self._accept["w"].mean() / n),
            "rho": float(self._accept["rho"].mean() / n),
            "rho_scale": float(self._accept["rs"].mean() / n),
            "block": float(self._accept["block"].mean() / n),
        }

    def run(self, state: ParamState | None = None, chain: int = 0,
            n_subject_draws: int = 0) -> "ChainResult":
        cfg = self.config
        state = self.initial_state() if state is None else state
        self.refresh(state)
        self._marg = None
        names = monitored_names(self.dataset.regimes.regime_names, self.P, self.use_outcome)
        keep_iters = np.arange(cfg.n_burnin, cfg.n_iter)[::cfg.thin]
        out = np.empty((keep_iters.size, len(names)))
        sub_iters = set()
        if n_subject_draws:
            post = np.arange(cfg.n_burnin, cfg.n_iter)
            pick = np.unique(np.linspace(0, post.size - 1, min(n_subject_draws, post.size)).round())
            sub_iters = set(post[pick.astype(int)].tolist())
        sub: list[tuple[int, ParamState]] = []
        k = 0
        for it in range(cfg.n_iter):
            burn = it < cfg.n_burnin
            if it == cfg.n_burnin:
                for key in self._accept:
                    self._accept[key][...] = 0
                self._n_accept_steps = 0
            self.sweep(state, it if (burn and cfg.adapt) else None)
            if not burn:
                self._n_accept_steps += 1
            if k < keep_iters.size and it == keep_iters[k]:
                out[k] = self.monitored_values(state)
                k += 1
            if it in sub_iters:
                sub.append((it, state.copy()))
        return ChainResult(chain, names, keep_iters, out, sub, self.acceptance_rates(),
                           {k2: np.exp(v).tolist() for k2, v in self.log_step.items()},
                           state)


@dataclass
class ChainResult:
    chain: int
    names: list[str]
    iterations: np.ndarray
    values: np.ndarray
    subject_states: list
    acceptance: dict
    step_sizes: dict
    final_state: ParamState


@dataclass
class Draws:
    """Retained draws of monitored parameters, shape ``(chains, draws, params)``."""

    names: list[str]
    values: np.ndarray
    iterations: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join(["chain", "iter"] + self.names) + "\n")
            for c in range(self.values.shape[0]):
                for d in range(self.values.shape[1]):
                    row = [str(c), str(int(self.iterations[d]))]
                    row += [repr(float(x)) for x in self.values[c, d]]
                    fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Draws":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
        header = lines[0].split(",")
        raw = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        chains = raw[:, 0].astype(int)
        nc = chains.max() + 1
        vals = raw[:, 2:].reshape(nc, -1, len(header) - 2)
        iters = raw[chains == 0, 1].astype(int)
        return cls(header[2:], vals, iters)


@dataclass
class SubjectDraws:
    """Thinned subject-level draws used for posterior predictive checks."""

    subject_ids: list[str]
    regime_names: tuple[str, ...]
    chain: np.ndarray
    iteration: np.ndarray
    beta0: np.ndarray
    b: np.ndarray
    log_sigma2_b: np.ndarray
    log_sigma2_w: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.beta0.size

    def subset(self, idx) -> "SubjectDraws":
        return replace(self, chain=self.chain[idx], iteration=self.iteration[idx],
                       beta0=self.beta0[idx], b=self.b[idx],
                       log_sigma2_b=self.log_sigma2_b[idx], log_sigma2_w=self.log_sigma2_w[idx],
                       rho=self.rho[idx], alpha=self.alpha[idx], gamma=self.gamma[idx])

    @classmethod
    def from_results(cls, dataset, results) -> "SubjectDraws":
        rows = [(r.chain, it, s) for r in results for it, s in r.subject_states]
        if not rows:
            raise ValueError("no subject-level draws were retained")
        st = [s for _, _, s in rows]
        return cls(dataset.subject_ids, dataset.regimes.regime_names,
                   np.array([c for c, _, _ in rows]), np.array([i for _, i, _ in rows]),
                   np.array([s.beta0 for s in st]), np.stack([s.b for s in st]),
                   np.stack([s.log_sigma2_b for s in st]), np.stack([s.log_sigma2_w for s in st]),
                   np.stack([s.rho for s in st]), np.stack([s.alpha for s in st]),
                   np.stack([s.gamma for s in st]))

    def to_csv(self, path, header_comment: str | None = None) -> None:
        R = len(self.regime_names)
        L = self.b.shape[2]
        K = self.alpha.shape[1]
        P = self.gamma.shape[1]
        cols = (["chain", "iter", "subject_id", "beta0", "rho"]
                + [f"log_sigma2_w[{r}]" for r in self.regime_names]
                + [f"log_sigma2_b[{r}]" for r in self.regime_names]
                + [f"alpha[{k + 1}]" for k in range(K)] + [f"gamma[{k + 1}]" for k in range(P)]
                + [f"b[{l + 1}]" for l in range(L)])
        f = lambda x: repr(float(x))  # noqa: E731
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join(cols) + "\n")
            for d in range(self.n_draws):
                tail = [f(a) for a in self.alpha[d]] + [f(g) for g in self.gamma[d]]
                for i, sid in enumerate(self.subject_ids):
                    row = [str(int(self.chain[d])), str(int(self.iteration[d])), sid,
                           f(self.beta0[d]), f(self.rho[d, i])]
                    row += [f(x) for x in self.log_sigma2_w[d, i]]
                    row += [f(x) for x in self.log_sigma2_b[d, i]]
                    row += tail + [f(x) for x in self.b[d, i]]
                    fh.write(",".join(row) + "\n")
        assert R == self.log_sigma2_w.shape[2]

    @classmethod
    def from_csv(cls, path) -> "SubjectDraws":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
        header = lines[0].split(",")
        regs = tuple(h[len("log_sigma2_w["):-1] for h in header if h.startswith("log_sigma2_w["))
        R = len(regs)
        K = sum(h.startswith("alpha[") for h in header)
        P = sum(h.startswith("gamma[") for h in header)
        L = sum(h.startswith("b[") for h in header)
        rows = [ln.split(",") for ln in lines[1:]]
        sids: list[str] = []
        for r in rows:
            if r[2] in sids:
                break
            sids.append(r[2])
        N = len(sids)
        D = len(rows) // N
        num = np.array([[float(x) for j, x in enumerate(r) if j != 2] for r in rows])
        num = num.reshape(D, N, -1)
        c = 4  # chain, iter, beta0, rho
        lw = num[:, :, c:c + R]
        lb = num[:, :, c + R:c + 2 * R]
        a = num[:, 0, c + 2 * R:c + 2 * R + K]
        g = num[:, 0, c + 2 * R + K:c + 2 * R + K + P]
        b = num[:, :, c + 2 * R + K + P:c + 2 * R + K + P + L]
        return cls(sids, regs, num[:, 0, 0].astype(int), num[:, 0, 1].astype(int),
                   num[:, 0, 2], b, lb, lw, num[:, :, 3], a, g)


def _chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(chain,))


def run_chain(dataset, prior: PriorConfig = PriorConfig(),
              config: SamplerConfig = SamplerConfig(), chain: int = 0,
              scaling: OutcomeScaling = OutcomeScaling(), stacked=None,
              n_subject_draws: int = 0) -> ChainResult:
    """Run one seeded chain; deterministic given ``(config.seed, chain)``."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        sampler = GibbsSampler(dataset, prior, config, scaling,
                               rng=np.random.default_rng(_chain_seed(config.seed, chain)),
                               stacked=stacked)
        return sampler.run(chain=chain, n_subject_draws=n_subject_draws)


def _run_chain_job(args):
    return run_chain(*args)


@dataclass
class FitResult:
    draws: Draws
    chains: list[ChainResult]
    subject_draws: SubjectDraws | None = None
    meta: dict = field(default_factory=dict)

    @property
    def acceptance(self) -> list[dict]:
        return [c.acceptance for c in self.chains]


def run_chains(dataset, prior: PriorConfig = PriorConfig(),
               config: SamplerConfig = SamplerConfig(),
               scaling: OutcomeScaling = OutcomeScaling(), workers: int = 1) -> FitResult:
    """Independent chains; results do not depend on ``workers``."""
    per_chain = -(-config.n_subject_draws // config.n_chains) if config.n_subject_draws else 0
    if workers > 1 and config.n_chains > 1:
        jobs = [(dataset, prior, config, c, scaling, None, per_chain)
                for c in range(config.n_chains)]
        with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        st = StackedData(dataset)
        results = [run_chain(dataset, prior, config, c, scaling, st, per_chain)
                   for c in range(config.n_chains)]
    values = np.stack([r.values for r in results])
    draws = Draws(results[0].names, values, results[0].iterations)
    sub = SubjectDraws.from_results(dataset, results) if per_chain else None
    if sub is not None and sub.n_draws > config.n_subject_draws:
        sub = sub.subset(np.linspace(0, sub.n_draws - 1, config.n_subject_draws).round().astype(int))
    return FitResult(draws, results, sub, {
        "prior": asdict(prior), "sampler": asdict(config), "scaling": asdict(scaling)})


def save_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
