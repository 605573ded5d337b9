"""Data containers, stratum probabilities and the observed-data likelihood.

Strata are 0-based internally (``0 .. K-1``) and 1-based in every file
format. The last stratum is the reference category of the multinomial
logistic stratum model, i.e. its coefficient row is fixed at zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DataValidationError",
    "Observation",
    "Dataset",
    "StepFunction",
    "Params",
    "FitConfig",
    "stratum_probs",
    "log_stratum_probs",
    "jump_support",
    "observed_log_likelihood",
    "risk_set_sum",
]

MISSING = -1


class DataValidationError(ValueError):
    """Raised when a dataset violates a model convention.

    ``row`` is the 1-based data row the problem was found on, if any.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    """One subject: follow-up time, event flag, covariates and stratum.

    ``stratum`` is 1-based and must be ``None`` exactly when ``observed`` is 0.
    """

    time: float
    status: int
    covariates_x: tuple
    covariates_w: tuple
    observed: int
    stratum: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample of ``n`` subjects.

    Attributes
    ----------
    time, status : ndarray, shape (n,)
    x : ndarray, shape (n, p)
    w : ndarray, shape (n, m)
    r : ndarray, shape (n,)
        1 if the stratum is known.
    s : ndarray, shape (n,)
        0-based stratum, ``-1`` where unknown.
    k_strata : int
    tau : float
        End of study; defaults to the largest observed time.
    """

    time: np.ndarray
    status: np.ndarray
    x: np.ndarray
    w: np.ndarray
    r: np.ndarray
    s: np.ndarray
    k_strata: int
    tau: float

    @classmethod
    def from_arrays(cls, time, status, x, w, r, s, k_strata=None, tau=None,
                    jitter_ties=False, seed=0, validate=True):
        """Build a dataset from array-likes; ``s`` is 0-based (-1 = missing).

        Event-time ties are rejected unless ``jitter_ties`` is set, in which
        case tied event times are separated by multiples of ``1e-9 * max(time)``
        in a seeded random order.
        """
        time = np.asarray(time, dtype=float).ravel()
        n = time.size
        status = np.asarray(status, dtype=int).ravel()
        r = np.asarray(r, dtype=int).ravel()
        s = np.asarray(s, dtype=int).ravel()
        x = np.asarray(x, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        w = np.asarray(w, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        if k_strata is None:
            k_strata = int(s.max()) + 1 if np.any(s >= 0) else 1
        if jitter_ties:
            time = _jitter_event_ties(time, status, seed)
        if tau is None:
            tau = float(time.max()) if n else 0.0
        ds = cls(_frozen(time), _frozen(status, int), _frozen(x), _frozen(w),
                 _frozen(r, int), _frozen(s, int), int(k_strata), float(tau))
        if validate:
            ds.validate()
        return ds

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], k_strata=None,
                          tau=None, jitter_ties=False, seed=0, validate=True):
        obs = list(observations)
        lens_x = {len(o.covariates_x) for o in obs}
        lens_w = {len(o.covariates_w) for o in obs}
        if len(lens_x) > 1 or len(lens_w) > 1:
            raise DataValidationError("covariate vectors must have uniform lengths")
        p = lens_x.pop() if lens_x else 0
        m = lens_w.pop() if lens_w else 0
        for i, o in enumerate(obs, start=1):
            if (o.stratum is None) != (o.observed == 0):
                raise DataValidationError(
                    f"row {i}: stratum must be present iff observed=1", row=i)
        return cls.from_arrays(
            [o.time for o in obs],
            [o.status for o in obs],
            np.array([o.covariates_x for o in obs], dtype=float).reshape(len(obs), p),
            np.array([o.covariates_w for o in obs], dtype=float).reshape(len(obs), m),
            [o.observed for o in obs],
            [MISSING if o.stratum is None else o.stratum - 1 for o in obs],
            k_strata=k_strata, tau=tau, jitter_ties=jitter_ties, seed=seed,
            validate=validate,
        )

    @property
    def n(self) -> int:
        return self.time.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.w.shape[1]

    @property
    def q(self) -> int:
        return (self.k_strata - 1) * self.m

    @cached_property
    def event_times(self) -> np.ndarray:
        return np.sort(self.time[self.status == 1])

    @cached_property
    def _order(self):
        order = np.argsort(self.time, kind="stable")
        first = np.searchsorted(self.time[order], self.time, side="left")
        return order, first

    def at_risk_sum(self, values, rows=None):
        """``sum_j values[j] * 1{T_j >= T_i}`` for subjects ``i`` in ``rows``."""
        order, first = self._order
        v = np.asarray(values, dtype=float)[order]
        rev = np.cumsum(v[::-1], axis=0)[::-1]
        return rev[first if rows is None else first[rows]]

    @cached_property
    def support_rows(self):
        """Per stratum, indices of the events where its baseline may jump,
        sorted by time."""
        ev = np.flatnonzero(self.status == 1)
        ev = ev[np.argsort(self.time[ev], kind="stable")]
        return tuple(ev[(self.r[ev] == 0) | (self.s[ev] == k)]
                     for k in range(self.k_strata))

    def observations(self):
        for i in range(self.n):
            yield Observation(
                float(self.time[i]), int(self.status[i]),
                tuple(float(v) for v in self.x[i]),
                tuple(float(v) for v in self.w[i]),
                int(self.r[i]),
                int(self.s[i]) + 1 if self.r[i] == 1 else None,
            )

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` as a new dataset with the same K and tau (unvalidated)."""
        idx = np.asarray(idx)
        return Dataset.from_arrays(self.time[idx], self.status[idx], self.x[idx],
                                   self.w[idx], self.r[idx], self.s[idx],
                                   k_strata=self.k_strata, tau=self.tau,
                                   validate=False)

    def validate(self):
        n, K = self.n, self.k_strata
        if n == 0:
            raise DataValidationError("dataset is empty")
        if K < 1:
            raise DataValidationError("k_strata must be >= 1")
        for name, arr in (("time", self.time), ("x", self.x), ("w", self.w)):
            if not np.all(np.isfinite(arr)):
                bad = int(np.argwhere(~np.isfinite(arr.reshape(n, -1)))[0, 0]) + 1
                raise DataValidationError(f"row {bad}: non-finite {name}", row=bad)
        checks = (
            (self.time < 0, "time must be nonnegative"),
            (self.time > self.tau, f"time exceeds tau={self.tau!r}"),
            (~np.isin(self.status, (0, 1)), "status must be 0 or 1"),
            (~np.isin(self.r, (0, 1)), "r must be 0 or 1"),
            ((self.r == 1) & ((self.s < 0) | (self.s >= K)),
             f"stratum must be in 1..{K} when r=1"),
            ((self.r == 0) & (self.s != MISSING), "stratum must be empty when r=0"),
        )
        for bad, msg in checks:
            if np.any(bad):
                row = int(np.argmax(bad)) + 1
                raise DataValidationError(f"row {row}: {msg}", row=row)
        ev = self.time[self.status == 1]
        uniq, counts = np.unique(ev, return_counts=True)
        if np.any(counts > 1):
            t = uniq[np.argmax(counts > 1)]
            row = int(np.argmax((self.time == t) & (self.status == 1))) + 1
            raise DataValidationError(
                f"row {row}: tied event time {t!r}; the estimator assumes no ties "
                "among observed event times (use jitter_ties to break them)", row=row)
        known_events = self.s[(self.r == 1) & (self.status == 1)]
        for k in range(K):
            if not np.any(known_events == k):
                raise DataValidationError(
                    f"stratum {k + 1} has no subject with known stratum and an "
                    "observed event")


def _jitter_event_ties(time, status, seed):
    time = time.copy()
    ev = np.flatnonzero(status == 1)
    uniq, inv, counts = np.unique(time[ev], return_inverse=True, return_counts=True)
    if not np.any(counts > 1):
        return time
    rng = np.random.default_rng(seed)
    step = 1e-9 * float(np.max(np.abs(time)))
    n_tied = 0
    for g in np.flatnonzero(counts > 1):
        members = ev[inv == g]
        order = rng.permutation(members.size)
        time[members] = time[members] + step * order
        n_tied += members.size
    warnings.warn(f"jittered {n_tied} tied event times by multiples of {step:.3g}",
                  stacklevel=3)
    return time


class StepFunction:
    """Right-continuous nondecreasing step function starting at 0.

    Jump sizes may be zero (a support point that currently carries no mass).
    """

    __slots__ = ("jump_times", "jump_sizes", "_cum")

    def __init__(self, jump_times, jump_sizes):
        t = np.asarray(jump_times, dtype=float).ravel()
        a = np.asarray(jump_sizes, dtype=float).ravel()
        if t.shape != a.shape:
            raise ValueError("jump_times and jump_sizes must have equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("jump sizes must be finite and nonnegative")
        self.jump_times = _frozen(t)
        self.jump_sizes = _frozen(a)
        self._cum = _frozen(np.cumsum(a))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if not self.jump_times.size:
            out = np.zeros(t.shape)
        else:
            idx = np.searchsorted(self.jump_times, t, side="right")
            out = np.where(idx > 0, self._cum[np.maximum(idx - 1, 0)], 0.0)
        return out if out.ndim else float(out)

    def jump(self, t):
        """Jump size at ``t`` (zero away from the jump times)."""
        t = np.asarray(t, dtype=float)
        if not self.jump_times.size:
            out = np.zeros(t.shape)
        else:
            idx = np.searchsorted(self.jump_times, t, side="left")
            safe = np.minimum(idx, self.jump_times.size - 1)
            hit = (idx < self.jump_times.size) & (self.jump_times[safe] == t)
            out = np.where(hit, self.jump_sizes[safe], 0.0)
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"StepFunction({self.jump_times.size} jumps, total={self(np.inf):.6g})"

    def __eq__(self, other):
        return (isinstance(other, StepFunction)
                and np.array_equal(self.jump_times, other.jump_times)
                and np.array_equal(self.jump_sizes, other.jump_sizes))


@dataclass(frozen=True, eq=False)
class Params:
    """Full parameter: regression ``beta`` (p,), stratum logits ``gamma``
    of shape (K-1, m), and one cumulative baseline per stratum."""

    beta: np.ndarray
    gamma: np.ndarray
    baselines: tuple

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))
        g = np.asarray(self.gamma, dtype=float)
        K = len(self.baselines)
        object.__setattr__(self, "gamma", _frozen(g.reshape(K - 1, -1) if K > 1
                                                  else np.zeros((0, g.size))))
        object.__setattr__(self, "baselines", tuple(self.baselines))

    @property
    def k_strata(self):
        return len(self.baselines)

    @property
    def gamma_flat(self):
        return self.gamma.ravel()

    def cumulative(self, t):
        """Array (K, len(t)) of cumulative baselines evaluated at ``t``."""
        return np.array([b(np.asarray(t, dtype=float)) for b in self.baselines])

    def jumps_at(self, t):
        return np.array([b.jump(np.asarray(t, dtype=float)) for b in self.baselines])


@dataclass(frozen=True)
class FitConfig:
    """EM and inner Newton controls.

    Convergence requires the relative log-likelihood change below ``em_tol``,
    the largest parameter change below ``param_tol`` and the largest absolute
    score residual over the canonical directions below ``score_tol``.
    """

    max_em_iters: int = 5000
    em_tol: float = 1e-8
    param_tol: float = 1e-6
    score_tol: float = 1e-7
    newton_max_iters: int = 100
    newton_tol: float = 1e-10
    max_halvings: int = 30
    norm_cap: float = 50.0
    init: str = "complete_case"
    init_params: Optional[Params] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("em_tol", "param_tol", "score_tol", "newton_tol", "norm_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_em_iters < 1 or self.newton_max_iters < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.init not in ("complete_case", "user_supplied"):
            raise ValueError("init must be 'complete_case' or 'user_supplied'")
        if self.init == "user_supplied" and self.init_params is None:
            raise ValueError("init='user_supplied' requires init_params")


def log_stratum_probs(gamma, w):
    """Log multinomial-logistic probabilities, reference stratum last.

    ``gamma`` has shape (K-1, m); ``w`` has shape (m,) or (n, m). Returns
    shape (K,) or (n, K).
    """
    gamma = np.asarray(gamma, dtype=float)
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    if gamma.ndim != 2 or (gamma.shape[0] and gamma.shape[1] != w2.shape[1]):
        raise ValueError(f"gamma shape {gamma.shape} incompatible with w of "
                         f"length {w2.shape[1]}")
    if gamma.shape[0] == 0:
        lin = np.zeros((w2.shape[0], 1))
    else:
        lin = np.column_stack([w2 @ gamma.T, np.zeros(w2.shape[0])])
    out = lin - logsumexp(lin, axis=1, keepdims=True)
    return out[0] if single else out


def stratum_probs(gamma, w):
    """Multinomial-logistic stratum probabilities ``pi_k(w)`` (max-subtracted)."""
    gamma = np.asarray(gamma, dtype=float)
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    if gamma.ndim != 2 or (gamma.shape[0] and gamma.shape[1] != w2.shape[1]):
        raise ValueError(f"gamma shape {gamma.shape} incompatible with w of "
                         f"length {w2.shape[1]}")
    if gamma.shape[0] == 0:
        lin = np.zeros((w2.shape[0], 1))
    else:
        lin = np.column_stack([w2 @ gamma.T, np.zeros(w2.shape[0])])
    e = np.exp(lin - lin.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if single else out


def jump_support(data: Dataset, k: int) -> np.ndarray:
    """Sorted event times where the stratum-``k`` baseline (0-based) may jump:
    events of subjects known to be in ``k`` plus all events with unknown
    stratum."""
    ev = data.status == 1
    mask = ev & (((data.r == 1) & (data.s == k)) | (data.r == 0))
    return np.sort(data.time[mask])


def logsumexp(a, axis=None, keepdims=False):
    return np.logaddexp.reduce(a, axis=axis, keepdims=keepdims)


def risk_set_sum(time, values, at):
    """``sum_j values[j] * 1{time[j] >= t}`` for every ``t`` in ``at``.

    ``values`` may carry trailing dimensions; the sum is over axis 0.
    """
    order = np.argsort(time, kind="stable")
    ts = time[order]
    v = np.asarray(values, dtype=float)[order]
    rev = np.cumsum(v[::-1], axis=0)[::-1]
    rev = np.concatenate([rev, np.zeros((1,) + v.shape[1:])], axis=0)
    return rev[np.searchsorted(ts, np.asarray(at, dtype=float), side="left")]


def log_densities(theta: Params, data: Dataset) -> np.ndarray:
    """(n, K) matrix of per-stratum log joint densities of (T, Delta, S=k | X, W).

    An event at a time where the stratum-k baseline has no mass gives ``-inf``.
    """
    _check_dims(theta, data)
    eta = data.x @ theta.beta
    cum = theta.cumulative(data.time).T
    jumps = theta.jumps_at(data.time).T
    ev = data.status == 1
    with np.errstate(divide="ignore"):
        log_jump = np.where(ev[:, None], np.log(jumps), 0.0)
    return (log_jump + (ev * eta)[:, None] - np.exp(eta)[:, None] * cum
            + log_stratum_probs(theta.gamma, data.w))


def per_subject_log_likelihood(theta: Params, data: Dataset) -> np.ndarray:
    lf = log_densities(theta, data)
    known = data.r == 1
    out = np.empty(data.n)
    out[known] = lf[known, data.s[known]]
    out[~known] = logsumexp(lf[~known], axis=1) if np.any(~known) else []
    return out


def observed_log_likelihood(theta: Params, data: Dataset) -> float:
    """Observed-data log-likelihood with baselines as jump masses.

    Known-stratum subjects contribute their own stratum term; the others
    contribute the log of the mixture over strata. Returns ``-inf`` when an
    event has no baseline mass in any admissible stratum.
    """
    return float(np.sum(per_subject_log_likelihood(theta, data)))


def _check_dims(theta: Params, data: Dataset):
    if theta.beta.size != data.p:
        raise ValueError(f"beta has length {theta.beta.size}, data has p={data.p}")
    if theta.k_strata != data.k_strata:
        raise ValueError(f"theta has {theta.k_strata} strata, data has {data.k_strata}")
    if data.k_strata > 1 and theta.gamma.shape != (data.k_strata - 1, data.m):
        raise ValueError(f"gamma has shape {theta.gamma.shape}, expected "
                         f"{(data.k_strata - 1, data.m)}")
