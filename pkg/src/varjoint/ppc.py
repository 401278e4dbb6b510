"""Posterior predictive checks for both submodels.

The longitudinal discrepancy for subject ``i`` under one posterior draw is
``T_i = sum_j (X_ij - f(t_ij) - rho_i e_i,j-1)^2 / sigma2_w,ij``, i.e. the
squared whitened residuals scaled by the regime-resolved innovation
variance (the first term uses the stationary scaling, as in the
likelihood).  Observed and replicated trajectories go through the same
whitening routine as :func:`varjoint.likelihood.whiten_ar1`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr

from .likelihood import OutcomeScaling, whiten_ar1
from .stacked import StackedData

log = logging.getLogger(__name__)


def _select_draws(draws, n_rep: int):
    if draws.n_draws < n_rep:
        log.warning("only %d posterior draws available (requested %d); using all",
                    draws.n_draws, n_rep)
        return draws
    idx = np.linspace(0, draws.n_draws - 1, n_rep).round().astype(int)
    return draws.subset(idx)


def discrepancy(x, mean, rho: float, sigma2_w) -> float:
    """Chi-square discrepancy of one trajectory about its conditional mean."""
    u, _ = whiten_ar1(np.asarray(x) - np.asarray(mean), rho)
    return float(np.sum(u * u / np.asarray(sigma2_w)))


def replicate_errors(rho: float, sigma2_w, rng) -> np.ndarray:
    """AR(1) errors from a stationary start with per-observation innovation variance."""
    sd = np.sqrt(np.asarray(sigma2_w, dtype=float))
    w = rng.standard_normal(sd.size) * sd
    w[0] /= np.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], w)


@dataclass
class LongitudinalPPC:
    subject_ids: list[str]
    p_values: np.ndarray
    t_obs_mean: np.ndarray
    t_rep_mean: np.ndarray
    n_draws: int

    def fraction_inside(self, lo: float = 0.05, hi: float = 0.95) -> float:
        return float(np.mean((self.p_values > lo) & (self.p_values < hi)))

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "p_value", "t_obs_mean", "t_rep_mean", "n_draws"])
            for k, sid in enumerate(self.subject_ids):
                w.writerow([sid, repr(float(self.p_values[k])), repr(float(self.t_obs_mean[k])),
                            repr(float(self.t_rep_mean[k])), self.n_draws])


def ppc_longitudinal(dataset, draws, n_rep: int = 500, rng=None) -> LongitudinalPPC:
    """Per-subject ``p_i = P(T_i(obs) < T_i(rep))`` over posterior draws."""
    rng = np.random.default_rng(rng)
    draws = _select_draws(draws, n_rep)
    st = StackedData(dataset)
    D, N = draws.n_draws, dataset.n_subjects
    t_obs = np.empty((D, N))
    t_rep = np.empty((D, N))
    obs_reg = dataset.regimes.obs_regime
    for d in range(D):
        mean = st.split(st.mean_part(draws.beta0[d], draws.b[d]))
        for i, s in enumerate(dataset.subjects):
            rho = float(draws.rho[d, i])
            s2 = np.exp(draws.log_sigma2_w[d, i])[obs_reg[i]]
            t_obs[d, i] = discrepancy(s.values, mean[i], rho, s2)
            x_rep = mean[i] + replicate_errors(rho, s2, rng)
            t_rep[d, i] = discrepancy(x_rep, mean[i], rho, s2)
    p = np.mean(t_obs < t_rep, axis=0)
    return LongitudinalPPC(dataset.subject_ids, p, t_obs.mean(axis=0), t_rep.mean(axis=0), D)


@dataclass
class OutcomePPC:
    p_value: float
    observed_events: int
    replicated_events: np.ndarray

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic", "observed", "replicated_mean", "p_value", "n_draws"])
            w.writerow(["n_events", self.observed_events,
                        repr(float(self.replicated_events.mean())), repr(float(self.p_value)),
                        self.replicated_events.size])


def outcome_eta_draws(dataset, draws, scaling: OutcomeScaling) -> np.ndarray:
    """Linear predictors, shape ``(draws, subjects)``."""
    R = draws.log_sigma2_w.shape[2]
    lw = 0.5 * draws.log_sigma2_w + np.log(scaling.c_w)
    lb = 0.5 * draws.log_sigma2_b - np.log(scaling.c_b)
    a = draws.alpha
    eta = (a[:, :1] + np.einsum("dnr,dr->dn", lw, a[:, 1:1 + R])
           + np.einsum("dnr,dr->dn", lb, a[:, 1 + R:1 + 2 * R]))
    if dataset.n_covariates:
        eta = eta + draws.gamma @ dataset.covariates.T
    return eta


def ppc_outcome(dataset, draws, scaling: OutcomeScaling = OutcomeScaling(), n_rep: int = 500,
                rng=None) -> OutcomePPC:
    """``p = P(sum Y_obs < sum Y_rep)`` over posterior draws."""
    if not dataset.has_outcome:
        raise ValueError("dataset has no outcomes")
    rng = np.random.default_rng(rng)
    draws = _select_draws(draws, n_rep)
    prob = ndtr(outcome_eta_draws(dataset, draws, scaling))
    y_rep = rng.uniform(size=prob.shape) < prob
    t_rep = y_rep.sum(axis=1)
    t_obs = int(dataset.outcomes.sum())
    return OutcomePPC(float(np.mean(t_obs < t_rep)), t_obs, t_rep)
