"""Data generation under the stratified proportional hazards model with
logistic strata and missing-at-random stratum labels, plus a Monte Carlo
driver.

Random-number layout: every subject consumes one row of uniforms, in the
column order W components, X components, S, T0, C, R. A dataset is therefore
a deterministic function of the seed and the config.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .em import fit
from .model import Dataset, DataValidationError, FitConfig, stratum_probs
from .variance import estimate_variance

__all__ = ["SimConfigError", "ReplicationRejected", "MonteCarloError", "SimConfig",
           "load_sim_config", "generate", "replication_seed", "run_monte_carlo",
           "MCSummary"]

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("param", "true", "mean", "bias", "emp_sd", "mean_se", "coverage")


class SimConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ReplicationRejected(ValueError):
    """A generated sample violates a positivity requirement."""


class MonteCarloError(RuntimeError):
    pass


def _covariate_spec(spec, where):
    if not isinstance(spec, dict):
        raise SimConfigError(where, "covariate spec must be a mapping")
    if "shared_x" in spec:
        return {"shared_x": int(spec["shared_x"])}
    dist = spec.get("dist")
    if dist == "uniform":
        lo, hi = float(spec.get("low", 0.0)), float(spec.get("high", 1.0))
        if not hi > lo:
            raise SimConfigError(where, "uniform needs high > low")
        return {"dist": "uniform", "low": lo, "high": hi}
    if dist == "bernoulli":
        pr = float(spec.get("p", 0.5))
        if not 0.0 <= pr <= 1.0:
            raise SimConfigError(where, "bernoulli p must be in [0, 1]")
        return {"dist": "bernoulli", "p": pr}
    if dist == "constant":
        return {"dist": "constant", "value": float(spec.get("value", 1.0))}
    raise SimConfigError(where, f"unknown distribution {dist!r} "
                         "(uniform, bernoulli, constant or shared_x)")


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    ``baseline`` holds one entry per stratum, ``{"family": "exponential",
    "rate": r}`` or ``{"family": "weibull", "shape": a, "scale": b}`` with
    cumulative hazard ``(t / b) ** a``. Covariates are bounded: uniform,
    bernoulli or constant, and W entries may copy an X column through
    ``{"shared_x": j}`` (1-based). ``censoring`` is ``{"dist": "uniform",
    "c_max": c}``, ``{"dist": "exponential", "rate": r}`` or ``{"dist":
    "none"}``; ``tau`` is the administrative cutoff (``None``: no cutoff).
    Stratum labels are observed with probability
    ``clip(expit(missing_intercept + missing_coef'W), eps, 1 - eps)``.
    """

    n: int
    k_strata: int
    beta: tuple
    gamma: tuple
    baseline: tuple
    x: tuple
    w: tuple
    censoring: dict = field(default_factory=lambda: {"dist": "none"})
    tau: Optional[float] = None
    missing_intercept: float = 10.0
    missing_coef: tuple = ()
    missing_eps: float = 0.0
    seed: int = 0
    require_positivity: bool = True
    lambda_times: Optional[tuple] = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SimConfigError(sorted(unknown)[0], "unknown field")
        for name in ("n", "k_strata", "beta", "gamma", "baseline", "x", "w"):
            if name not in d:
                raise SimConfigError(name, "required field missing")
        try:
            d["n"] = int(d["n"])
            d["k_strata"] = int(d["k_strata"])
            d["beta"] = tuple(float(v) for v in d["beta"])
            d["gamma"] = tuple(tuple(float(v) for v in row) for row in d["gamma"])
            d["baseline"] = tuple(dict(b) for b in d["baseline"])
            d["x"] = tuple(_covariate_spec(s, f"x[{i + 1}]") for i, s in enumerate(d["x"]))
            d["w"] = tuple(_covariate_spec(s, f"w[{i + 1}]") for i, s in enumerate(d["w"]))
            if "missing_coef" in d:
                d["missing_coef"] = tuple(float(v) for v in d["missing_coef"])
            if d.get("lambda_times") is not None:
                d["lambda_times"] = tuple(float(v) for v in d["lambda_times"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SimConfigError):
                raise
            raise SimConfigError("config", str(exc)) from None
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = json.loads(json.dumps(v))
        return d

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return SimConfig.from_dict(d)

    @property
    def p(self):
        return len(self.x)

    @property
    def m(self):
        return len(self.w)

    def validate(self):
        K, p, m = self.k_strata, self.p, self.m
        if self.n < 1:
            raise SimConfigError("n", "must be >= 1")
        if K < 1:
            raise SimConfigError("k_strata", "must be >= 1")
        if len(self.beta) != p:
            raise SimConfigError("beta", f"length {len(self.beta)} != number of x covariates {p}")
        if len(self.gamma) != K - 1 or any(len(r) != m for r in self.gamma):
            raise SimConfigError("gamma", f"must be {K - 1} rows of length {m}")
        if len(self.baseline) != K:
            raise SimConfigError("baseline", f"need one entry per stratum ({K})")
        for i, b in enumerate(self.baseline):
            fam = b.get("family")
            if fam == "exponential":
                if not float(b.get("rate", 0)) > 0:
                    raise SimConfigError(f"baseline[{i + 1}].rate", "must be > 0")
            elif fam == "weibull":
                if not (float(b.get("shape", 0)) > 0 and float(b.get("scale", 0)) > 0):
                    raise SimConfigError(f"baseline[{i + 1}]", "shape and scale must be > 0")
            else:
                raise SimConfigError(f"baseline[{i + 1}].family",
                                     f"unknown family {fam!r}")
        for i, s in enumerate(self.w):
            if "shared_x" in s and not 1 <= s["shared_x"] <= p:
                raise SimConfigError(f"w[{i + 1}].shared_x", f"must be in 1..{p}")
        c = self.censoring
        if c.get("dist") == "uniform":
            if not float(c.get("c_max", 0)) > 0:
                raise SimConfigError("censoring.c_max", "must be > 0")
        elif c.get("dist") == "exponential":
            if not float(c.get("rate", 0)) > 0:
                raise SimConfigError("censoring.rate", "must be > 0")
        elif c.get("dist") != "none":
            raise SimConfigError("censoring.dist", f"unknown {c.get('dist')!r}")
        if self.tau is not None and not self.tau > 0:
            raise SimConfigError("tau", "must be > 0")
        if self.missing_coef and len(self.missing_coef) != m:
            raise SimConfigError("missing_coef", f"must have length {m}")
        if not 0.0 <= self.missing_eps < 0.5:
            raise SimConfigError("missing_eps", "must be in [0, 0.5)")

    def cumulative_hazard(self, k, t):
        """True baseline cumulative hazard of stratum ``k`` (0-based)."""
        b = self.baseline[k]
        t = np.asarray(t, dtype=float)
        if b["family"] == "exponential":
            return float(b["rate"]) * t
        return (t / float(b["scale"])) ** float(b["shape"])

    def _inverse_cumulative_hazard(self, k, h):
        b = self.baseline[k]
        if b["family"] == "exponential":
            return h / float(b["rate"])
        return float(b["scale"]) * h ** (1.0 / float(b["shape"]))

    def observe_prob(self, w):
        coef = np.asarray(self.missing_coef or np.zeros(self.m), dtype=float)
        pr = expit(self.missing_intercept + np.asarray(w, float) @ coef)
        return np.clip(pr, self.missing_eps, 1.0 - self.missing_eps)


def load_sim_config(path) -> SimConfig:
    """Read a JSON or YAML simulation config."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml
        d = yaml.safe_load(text)
    else:
        d = json.loads(text)
    if not isinstance(d, dict):
        raise SimConfigError("config", "top level must be a mapping")
    return SimConfig.from_dict(d)


def _draw_covariate(spec, u):
    if spec["dist"] == "uniform":
        return spec["low"] + (spec["high"] - spec["low"]) * u
    if spec["dist"] == "bernoulli":
        return (u < spec["p"]).astype(float)
    return np.full(u.shape, spec["value"])


def generate(config: SimConfig, seed=None, return_truth=False):
    """Draw one dataset; ``seed`` (int or SeedSequence) defaults to ``config.seed``.

    With ``return_truth`` also returns the 0-based true strata of every subject.
    Raises :class:`ReplicationRejected` if ``config.require_positivity`` and
    some stratum has no known-stratum subject still at risk at tau, or no
    known-stratum event.
    """
    n, K, p, m = config.n, config.k_strata, config.p, config.m
    rng = np.random.default_rng(config.seed if seed is None else seed)
    U = rng.random((n, m + p + 4))
    uw, ux = U[:, :m], U[:, m:m + p]
    us, ut, uc, ur = U[:, m + p], U[:, m + p + 1], U[:, m + p + 2], U[:, m + p + 3]

    x = np.column_stack([_draw_covariate(s, ux[:, j]) for j, s in enumerate(config.x)]) \
        if p else np.zeros((n, 0))
    w = np.column_stack([x[:, s["shared_x"] - 1] if "shared_x" in s
                         else _draw_covariate(s, uw[:, j])
                         for j, s in enumerate(config.w)]) if m else np.zeros((n, 0))
    gamma = np.array(config.gamma, dtype=float).reshape(K - 1, m)
    pi = stratum_probs(gamma, w)
    s = np.minimum(np.sum(us[:, None] > np.cumsum(pi, axis=1)[:, :-1], axis=1), K - 1)

    risk = np.exp(x @ np.asarray(config.beta, dtype=float))
    h = -np.log1p(-ut) / risk
    t0 = np.empty(n)
    for k in range(K):
        sel = s == k
        t0[sel] = config._inverse_cumulative_hazard(k, h[sel])

    cens = config.censoring
    if cens["dist"] == "uniform":
        c = float(cens["c_max"]) * uc
    elif cens["dist"] == "exponential":
        c = -np.log1p(-uc) / float(cens["rate"])
    else:
        c = np.full(n, np.inf)
    tau = np.inf if config.tau is None else float(config.tau)
    stop = np.minimum(c, tau)
    time = np.minimum(t0, stop)
    status = (t0 <= stop).astype(int)

    r = (ur < config.observe_prob(w)).astype(int)
    s_obs = np.where(r == 1, s, -1)

    data = Dataset.from_arrays(time, status, x, w, r, s_obs, k_strata=K,
                               tau=None if config.tau is None else tau,
                               jitter_ties=True, validate=False)
    if config.require_positivity:
        check_positivity(data)
    return (data, s) if return_truth else data


def check_positivity(data: Dataset):
    """Raise :class:`ReplicationRejected` unless every stratum has a
    known-stratum subject at risk at tau and a known-stratum event."""
    at_tau = (data.r == 1) & (data.time >= data.tau)
    for k in range(data.k_strata):
        if not np.any(at_tau & (data.s == k)):
            raise ReplicationRejected(
                f"stratum {k + 1}: no known-stratum subject at risk at tau")
    try:
        data.validate()
    except DataValidationError as exc:
        raise ReplicationRejected(str(exc)) from None


def replication_seed(master, i):
    """Independent stream for replication ``i`` derived from the master seed."""
    return np.random.SeedSequence(entropy=int(master), spawn_key=(int(i),))


PILOT_KEY = 2 ** 31 - 1


def default_lambda_times(config: SimConfig):
    """Quartiles of event times in a large pilot sample from the master seed."""
    pilot = generate(config.replace(n=max(20000, config.n), require_positivity=False),
                     seed=replication_seed(config.seed, PILOT_KEY))
    q = np.quantile(pilot.time[pilot.status == 1], [0.25, 0.5, 0.75])
    return tuple(float(v) for v in q)


def true_values(config: SimConfig, lambda_times):
    names, vals = [], []
    for r, b in enumerate(config.beta):
        names.append(f"beta[{r + 1}]")
        vals.append(b)
    for k, row in enumerate(config.gamma):
        for j, g in enumerate(row):
            names.append(f"gamma[{k + 1},{j + 1}]")
            vals.append(g)
    for k in range(config.k_strata):
        for t in lambda_times:
            names.append(f"Lambda[{k + 1}]({t!r})")
            vals.append(float(config.cumulative_hazard(k, t)))
    return names, np.array(vals)


def _replicate(args):
    config, fit_config, i, lambda_times = args
    try:
        data = generate(config, seed=replication_seed(config.seed, i))
        res = fit(data, fit_config)
        if not res.converged:
            return i, None, None, "EM did not converge"
        var = estimate_variance(res.theta_hat, data, check=False)
    except Exception as exc:  # noqa: BLE001 - every failure is tallied
        return i, None, None, f"{type(exc).__name__}: {exc}"
    th = res.theta_hat
    est = list(th.beta) + list(th.gamma_flat)
    se = list(var.se_beta) + list(var.se_gamma)
    for k in range(config.k_strata):
        for t in lambda_times:
            est.append(float(th.baselines[k](t)))
            se.append(var.se_lambda(k + 1, t) if t < data.tau else float("nan"))
    return i, np.array(est), np.array(se), None


@dataclass
class MCSummary:
    rows: list
    reps: int
    n_failed: int
    failures: list
    lambda_times: tuple
    estimates: np.ndarray = field(repr=False, default=None)
    std_errors: np.ndarray = field(repr=False, default=None)

    @property
    def failure_rate(self):
        return self.n_failed / self.reps

    def row(self, param):
        for r in self.rows:
            if r["param"] == param:
                return r
        raise KeyError(param)

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                wr.writerow([r["param"]] + [repr(float(r[c])) for c in SUMMARY_COLUMNS[1:]])

    def table(self):
        head = f"{'param':<28}" + "".join(f"{c:>11}" for c in SUMMARY_COLUMNS[1:])
        lines = [head]
        for r in self.rows:
            lines.append(f"{r['param']:<28}" + "".join(
                f"{r[c]:>11.4f}" for c in SUMMARY_COLUMNS[1:]))
        lines.append(f"replications: {self.reps}, failed: {self.n_failed} "
                     f"({100 * self.failure_rate:.1f}%)")
        return "\n".join(lines)


def read_summary_csv(path):
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames) != SUMMARY_COLUMNS:
            raise ValueError(f"unexpected summary columns {rd.fieldnames}")
        return [{"param": r["param"], **{c: float(r[c]) for c in SUMMARY_COLUMNS[1:]}}
                for r in rd]


def run_monte_carlo(config: SimConfig, reps, fit_config: FitConfig = FitConfig(),
                    lambda_times=None, workers=1, level=0.95) -> MCSummary:
    """Simulate, fit and estimate variances ``reps`` times.

    Wald intervals use ``estimate +/- z * SE``. Failed replications (rejected
    samples, EM non-convergence, singular information blocks) are excluded
    and counted; more than half failing raises :class:`MonteCarloError`.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if lambda_times is None:
        lambda_times = config.lambda_times or default_lambda_times(config)
    lambda_times = tuple(float(t) for t in lambda_times)
    names, truth = true_values(config, lambda_times)
    jobs = [(config, fit_config, i, lambda_times) for i in range(reps)]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, jobs, chunksize=1))
    else:
        results = [_replicate(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    failures = [(i, msg) for i, _, _, msg in results if msg is not None]
    for i, msg in failures:
        log.warning("replication %d failed: %s", i, msg)
    if len(failures) > reps / 2:
        raise MonteCarloError(f"{len(failures)} of {reps} replications failed")
    est = np.array([e for _, e, _, msg in results if msg is None])
    se = np.array([s for _, _, s, msg in results if msg is None])
    from scipy.stats import norm
    z = norm.ppf(0.5 + level / 2)
    rows = []
    for c, name in enumerate(names):
        e, s = est[:, c], se[:, c]
        cover = np.abs(e - truth[c]) <= z * s   # nan SE counts as a miss
        mean = float(np.mean(e))
        rows.append({"param": name, "true": float(truth[c]), "mean": mean,
                     "bias": mean - float(truth[c]),
                     "emp_sd": float(np.std(e, ddof=1)) if e.size > 1 else math.nan,
                     "mean_se": float(np.nanmean(s)) if np.any(np.isfinite(s)) else math.nan,
                     "coverage": float(np.mean(cover))})
    return MCSummary(rows, reps, len(failures), failures, lambda_times, est, se)
