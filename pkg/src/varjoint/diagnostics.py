"""Posterior summaries and the classic Gelman-Rubin statistic."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def rhat(chains) -> float:
    """Classic (non-split) potential scale reduction factor.

    ``chains`` is an array of shape ``(m, n)`` with ``m >= 2`` chains of
    ``n >= 10`` draws.  With zero within-chain variance the result is 1.0
    when every chain is the same constant and ``inf`` otherwise.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    m, n = x.shape
    if m < 2 or n < 10:
        raise ValueError("need at least 2 chains of 10 draws")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0.0:
        return 1.0 if np.all(x == x.flat[0]) else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    sd: float
    lo95: float
    hi95: float
    rhat: float
    n_draws: int


class PosteriorSummary(dict):
    """Mapping from parameter name to :class:`ParamSummary`."""

    def max_rhat(self) -> float:
        vals = [s.rhat for s in self.values() if not np.isnan(s.rhat)]
        return max(vals) if vals else float("nan")

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "mean", "sd", "lo95", "hi95", "rhat"])
            for s in self.values():
                w.writerow([s.name] + [repr(float(v)) for v in (s.mean, s.sd, s.lo95, s.hi95, s.rhat)])


def summarize(draws, names=None) -> PosteriorSummary:
    """Mean, sd, equal-tailed 95% interval and R-hat per parameter.

    Quantiles pool all chains and use linear interpolation between order
    statistics (numpy's default).  ``draws`` is a ``Draws`` object or an array
    of shape ``(chains, draws, params)`` together with ``names``.
    """
    if names is None:
        names, values = draws.names, draws.values
    else:
        values = np.asarray(draws, dtype=float)
    out = PosteriorSummary()
    m = values.shape[0]
    for k, name in enumerate(names):
        x = values[:, :, k]
        flat = x.ravel()
        lo, hi = np.quantile(flat, [0.025, 0.975])
        r = rhat(x) if m >= 2 and x.shape[1] >= 10 else float("nan")
        out[name] = ParamSummary(name, float(flat.mean()), float(flat.std(ddof=1)),
                                 float(lo), float(hi), r, flat.size)
    return out
