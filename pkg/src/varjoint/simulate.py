"""Synthetic data from the joint model and the replicate-study harness."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr

from .data import SubjectSeries, make_dataset
from .likelihood import OutcomeScaling

log = logging.getLogger(__name__)

# Minutes per period of the social-stress protocol used for regime tests.
TSST_SCHEDULE = (("p", 10.0), ("m1", 5.0), ("s", 10.0), ("m2", 5.0), ("r", 5.0))


@dataclass(frozen=True)
class SimTruth:
    """Generative law for one simulated study.

    Log-variance laws are given per regime (a single entry for the uniform
    model).  ``schedule`` lists ``(regime name, duration)`` pairs that tile
    ``[0, t_max]``; an empty schedule means no period labels.
    """

    beta0: float = 81.083
    mean_log_sigma2_b: tuple = (5.0,)
    sd_log_sigma2_b: tuple = (1.0,)
    mean_log_sigma2_w: tuple = (-3.8,)
    sd_log_sigma2_w: tuple = (0.75,)
    rho: float = 0.998
    alpha: tuple = (0.3, -1.0, 0.5)
    gamma: tuple = ()
    c_w: float = 10.0
    c_b: float = 10.0
    n_subjects: int = 50
    n_obs: int = 200
    t_max: float = 600.0
    schedule: tuple = ()
    percentile_step: float = 2.0
    degree: int = 3

    def __post_init__(self):
        R = self.n_regimes
        for name in ("sd_log_sigma2_b", "mean_log_sigma2_w", "sd_log_sigma2_w"):
            if len(getattr(self, name)) != R:
                raise ValueError(f"{name} needs {R} entries")
        if len(self.alpha) != 1 + 2 * R:
            raise ValueError(f"alpha needs {1 + 2 * R} entries")
        if self.schedule and len(self.schedule) != R:
            raise ValueError("schedule length must match the number of regimes")
        if self.n_subjects < 2:
            raise ValueError("need at least 2 subjects")
        if self.n_obs < self.degree + 2:
            raise ValueError("n_obs too small for the spline degree")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @property
    def n_regimes(self) -> int:
        return len(self.mean_log_sigma2_b)

    @property
    def scaling(self) -> OutcomeScaling:
        return OutcomeScaling(self.c_w, self.c_b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(p) for p in self.schedule]
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "SimTruth":
        d = dict(payload)
        for k in ("mean_log_sigma2_b", "sd_log_sigma2_b", "mean_log_sigma2_w",
                  "sd_log_sigma2_w", "alpha", "gamma"):
            if k in d:
                d[k] = tuple(float(x) for x in np.atleast_1d(d[k]))
        if "schedule" in d:
            d["schedule"] = tuple((str(n), float(t)) for n, t in d["schedule"])
        return cls(**d)


SCALES = {
    "desk": {"n_subjects": 50, "n_obs": 200, "replicates": 50, "n_iter": 2000, "n_burnin": 1000},
    "paper": {"n_subjects": 150, "n_obs": 600, "replicates": 200, "n_iter": 8000, "n_burnin": 4000},
}


def setting_truth(setting: int, scale: str = "desk", **overrides) -> SimTruth:
    """Truth for simulation setting 1 (scaled short-term term) or 2 (unscaled)."""
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}")
    size = {k: SCALES[scale][k] for k in ("n_subjects", "n_obs")}
    if setting == 1:
        base = dict(mean_log_sigma2_w=(-3.8,), alpha=(0.3, -1.0, 0.5), c_w=10.0)
    elif setting == 2:
        base = dict(mean_log_sigma2_w=(1.8,), alpha=(-0.6, 1.0, -1.5), c_w=1.0)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return SimTruth(**{**base, **size, **overrides})


def tsst_truth(n_subjects: int = 40, n_obs: int = 420, **overrides) -> SimTruth:
    """Five-regime truth with clearly separated per-regime variance laws."""
    base = dict(
        beta0=75.0,
        mean_log_sigma2_b=(4.0, 5.0, 6.0, 5.0, 4.0),
        sd_log_sigma2_b=(0.5,) * 5,
        mean_log_sigma2_w=(0.0, 1.0, 2.0, 1.0, 0.0),
        sd_log_sigma2_w=(0.5,) * 5,
        rho=0.9,
        alpha=(0.0,) * 11,
        c_w=1.0,
        n_subjects=n_subjects,
        n_obs=n_obs,
        t_max=60.0 * sum(d for _, d in TSST_SCHEDULE),
        schedule=tuple((n, 60.0 * d) for n, d in TSST_SCHEDULE),
    )
    base.update(overrides)
    return SimTruth(**base)


@dataclass
class Latent:
    """Per-subject quantities drawn by the generator."""

    log_sigma2_b: np.ndarray
    log_sigma2_w: np.ndarray
    b: np.ndarray
    eta: np.ndarray | None = None


def time_grid(truth: SimTruth) -> np.ndarray:
    return np.linspace(0.0, truth.t_max, truth.n_obs)


def period_labels(truth: SimTruth, times: np.ndarray) -> list[str] | None:
    if not truth.schedule:
        return None
    names = [n for n, _ in truth.schedule]
    ends = np.cumsum([d for _, d in truth.schedule])
    idx = np.minimum(np.searchsorted(ends, times, side="right"), len(names) - 1)
    return [names[k] for k in idx]


def ar1_errors(innov_sd: np.ndarray, rho: float, rng) -> np.ndarray:
    """AR(1) errors per row with a stationary start.

    ``innov_sd`` has shape ``(N, n)``: the innovation sd at each observation.
    """
    w = rng.standard_normal(innov_sd.shape) * innov_sd
    w[:, 0] /= math.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], w, axis=1)


def gen_longitudinal(truth: SimTruth, rng, basis=None):
    """Trajectories without outcomes.  Returns ``(Dataset, Latent)``."""
    rng = np.random.default_rng(rng)
    N, R = truth.n_subjects, truth.n_regimes
    t = time_grid(truth)
    periods = period_labels(truth, t)
    template = [SubjectSeries(f"S{i + 1:04d}", t, np.zeros_like(t), periods) for i in range(N)]
    shell = make_dataset(template, truth.percentile_step, truth.degree, basis=basis)
    lb = np.asarray(truth.mean_log_sigma2_b) + np.asarray(truth.sd_log_sigma2_b) * rng.standard_normal((N, R))
    lw = np.asarray(truth.mean_log_sigma2_w) + np.asarray(truth.sd_log_sigma2_w) * rng.standard_normal((N, R))
    L = shell.basis.basis_count
    creg = np.vstack(shell.regimes.coef_regime)
    b = rng.standard_normal((N, L)) * np.exp(0.5 * lb)[np.arange(N)[:, None], creg]
    oreg = shell.regimes.obs_regime[0]
    sd = np.exp(0.5 * lw)[:, oreg]
    eps = ar1_errors(sd, truth.rho, rng)
    from .basis import design_matrix

    D = design_matrix(t, shell.basis)
    X = truth.beta0 + b @ D.T + eps
    subjects = [SubjectSeries(s.subject_id, t, X[i], periods) for i, s in enumerate(template)]
    ds = make_dataset(subjects, basis=shell.basis)
    return ds, Latent(lb, lw, b)


def outcome_eta(truth: SimTruth, log_sigma2_b, log_sigma2_w, Z=None) -> np.ndarray:
    lw = 0.5 * np.asarray(log_sigma2_w) + math.log(truth.c_w)
    lb = 0.5 * np.asarray(log_sigma2_b) - math.log(truth.c_b)
    a = np.asarray(truth.alpha)
    R = lw.shape[1]
    eta = a[0] + lw @ a[1:1 + R] + lb @ a[1 + R:1 + 2 * R]
    if Z is not None and len(truth.gamma):
        eta = eta + np.asarray(Z) @ np.asarray(truth.gamma)
    return eta


def gen_outcome(truth: SimTruth, log_sigma2_b, log_sigma2_w, rng, Z=None) -> np.ndarray:
    """Binary outcomes ``Y ~ Bernoulli(Phi(eta))``."""
    rng = np.random.default_rng(rng)
    eta = outcome_eta(truth, log_sigma2_b, log_sigma2_w, Z)
    return (rng.uniform(size=eta.shape) < ndtr(eta)).astype(int)


def simulate_dataset(truth: SimTruth, rng):
    """Trajectories plus outcomes (and covariates when ``gamma`` is set)."""
    rng = np.random.default_rng(rng)
    ds, lat = gen_longitudinal(truth, rng)
    Z = rng.standard_normal((truth.n_subjects, len(truth.gamma))) if len(truth.gamma) else None
    y = gen_outcome(truth, lat.log_sigma2_b, lat.log_sigma2_w, rng, Z)
    lat.eta = outcome_eta(truth, lat.log_sigma2_b, lat.log_sigma2_w, Z)
    return ds.with_outcomes(y, Z), lat


def replicate_seeds(seed: int, r: int) -> tuple[np.random.SeedSequence, int]:
    """Data stream and fit seed for replicate ``r``; independent of worker count."""
    ss = np.random.SeedSequence(seed, spawn_key=(r,))
    data_ss, fit_ss = ss.spawn(2)
    return data_ss, int(fit_ss.generate_state(1)[0])


# -- study metrics ---------------------------------------------------------

@dataclass
class Estimate:
    """Point estimates and 95% intervals from one fit of one replicate."""

    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ok: bool = True
    message: str = ""
    max_rhat: float = float("nan")


def study_metrics(truth, point, lower, upper) -> dict:
    """Coverage (%), bias, average interval length and RMSE over replicates.

    Arrays have shape ``(R, K)``; ``truth`` has length ``K``.
    """
    truth = np.asarray(truth, dtype=float)
    point = np.asarray(point, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    err = point - truth
    return {
        "coverage": 100.0 * np.mean((lower <= truth) & (truth <= upper), axis=0),
        "bias": err.mean(axis=0),
        "ail": (upper - lower).mean(axis=0),
        "rmse": np.sqrt(np.mean(err * err, axis=0)),
    }


@dataclass
class StudyReport:
    """Per-coefficient metrics for each fitted model."""

    names: list[str]
    truth: np.ndarray
    models: dict = field(default_factory=dict)       # model -> metrics dict
    estimates: dict = field(default_factory=dict)    # model -> list[Estimate | None]
    failures: dict = field(default_factory=dict)     # model -> {replicate: message}
    replicates: int = 0

    def n_ok(self, model: str) -> int:
        return self.replicates - len(self.failures.get(model, {}))

    def rows(self) -> list[dict]:
        out = []
        for k, name in enumerate(self.names):
            for model, m in self.models.items():
                out.append({"parameter": name, "true_value": float(self.truth[k]), "model": model,
                            "coverage": float(m["coverage"][k]), "ail": float(m["ail"][k]),
                            "bias": float(m["bias"][k]), "rmse": float(m["rmse"][k]),
                            "n_ok": self.n_ok(model), "n_failed": len(self.failures.get(model, {}))})
        return out

    def to_csv(self, path, header_comment: str | None = None) -> None:
        rows = self.rows()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def format_table(self) -> str:
        lines = [f"{'param':<10}{'true':>8}  {'model':<10}{'cov%':>7}{'ail':>8}{'bias':>8}{'rmse':>8}"]
        for r in self.rows():
            lines.append(f"{r['parameter']:<10}{r['true_value']:>8.3f}  {r['model']:<10}"
                         f"{r['coverage']:>7.1f}{r['ail']:>8.3f}{r['bias']:>8.3f}{r['rmse']:>8.3f}")
        return "\n".join(lines)


def alpha_names(n_regimes: int) -> list[str]:
    return [f"alpha[{k + 1}]" for k in range(1 + 2 * n_regimes)]


def fit_joint(dataset, truth: SimTruth, sampler_config, prior=None) -> Estimate:
    from .diagnostics import summarize
    from .sampler import PriorConfig, run_chains

    fit = run_chains(dataset, prior or PriorConfig(), sampler_config, truth.scaling)
    summ = summarize(fit.draws)
    names = alpha_names(dataset.regimes.n_regimes)
    rows = [summ[n] for n in names]
    return Estimate(np.array([r.mean for r in rows]), np.array([r.lo95 for r in rows]),
                    np.array([r.hi95 for r in rows]), max_rhat=float(summ.max_rhat()))


def fit_twostage(dataset, truth: SimTruth, sampler_config=None, prior=None) -> Estimate:
    from .twostage import two_stage

    res = two_stage(dataset, truth.scaling)
    return Estimate(res.coef, res.lower, res.upper, ok=res.ok, message=res.message)


FITTERS = {"joint": fit_joint, "twostage": fit_twostage}


def _run_replicate(args):
    truth, r, seed, models, sampler_config, prior = args
    data_ss, fit_seed = replicate_seeds(seed, r)
    ds, _ = simulate_dataset(truth, np.random.default_rng(data_ss))
    out = {}
    for model in models:
        cfg = None if sampler_config is None else _with_seed(sampler_config, fit_seed)
        try:
            out[model] = FITTERS[model](ds, truth, cfg, prior)
        except Exception as exc:  # recorded and reported by the harness
            log.warning("replicate %d, %s fit failed: %s", r, model, exc)
            out[model] = Estimate(np.array([]), np.array([]), np.array([]), ok=False,
                                  message=f"{type(exc).__name__}: {exc}")
    return r, out


def _with_seed(cfg, seed):
    from dataclasses import replace

    return replace(cfg, seed=seed)


def run_study(truth: SimTruth, replicates: int, models=("joint",), sampler_config=None,
              seed: int = 0, workers: int = 1, prior=None, progress=None) -> StudyReport:
    """Generate ``replicates`` datasets, fit each model, and aggregate metrics.

    Failed fits are excluded from the metrics and listed in ``failures``.
    """
    models = tuple(models)
    for m in models:
        if m not in FITTERS:
            raise ValueError(f"unknown model {m!r}")
    if "joint" in models and sampler_config is None:
        from .sampler import SamplerConfig

        sampler_config = SamplerConfig()
    jobs = [(truth, r, seed, models, sampler_config, prior) for r in range(replicates)]
    results: dict[int, dict] = {}
    if workers > 1 and replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for r, out in ex.map(_run_replicate, jobs):
                results[r] = out
                if progress:
                    progress(r, out)
    else:
        for job in jobs:
            r, out = _run_replicate(job)
            results[r] = out
            if progress:
                progress(r, out)
    report = StudyReport(alpha_names(truth.n_regimes), np.asarray(truth.alpha, dtype=float),
                         replicates=replicates)
    for model in models:
        ests = [results[r][model] for r in range(replicates)]
        good = [e for e in ests if e.ok and e.point.size]
        report.estimates[model] = ests
        report.failures[model] = {r: e.message for r, e in enumerate(ests)
                                  if not (e.ok and e.point.size)}
        if good:
            report.models[model] = study_metrics(
                report.truth, np.stack([e.point for e in good]),
                np.stack([e.lower for e in good]), np.stack([e.upper for e in good]))
        else:
            nan = np.full(report.truth.size, np.nan)
            report.models[model] = {"coverage": nan, "bias": nan, "ail": nan, "rmse": nan}
    return report
