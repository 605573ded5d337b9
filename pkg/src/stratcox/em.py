"""Nonparametric maximum likelihood by EM when some strata are unobserved.

One EM iteration computes posterior stratum weights, then maximizes the
expected complete-data log-likelihood separately in the logistic
coefficients and in (beta, baselines). The baselines are profiled out in
closed form, leaving a weighted stratified partial likelihood in beta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from ._newton import newton_maximize
from .cox import fit_complete_case, fit_complete_gamma, fit_multinomial
from .model import (Dataset, FitConfig, Params, StepFunction,
                    log_densities, log_stratum_probs, logsumexp,
                    observed_log_likelihood, stratum_probs)

__all__ = ["EStepError", "FitResult", "Direction", "e_step", "m_step_lambda",
           "m_step_gamma", "m_step_beta", "fit", "score_at", "canonical_directions",
           "score_residuals"]

log = logging.getLogger(__name__)

STALL_ITERS = 100


class EStepError(ArithmeticError):
    """No stratum gives positive density to some subject."""


@dataclass
class FitResult:
    theta_hat: Params
    loglik_trace: list
    em_iterations: int
    converged: bool
    score_residuals: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)


@dataclass(frozen=True)
class Direction:
    """Perturbation direction for the score operator.

    The baseline part for stratum ``k`` is ``lam_scale[k] * 1{s <= lam_cut[k]}``;
    ``lam_cut = inf`` gives a constant.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam_scale: np.ndarray
    lam_cut: np.ndarray

    @classmethod
    def zeros(cls, p, q, K):
        return cls(np.zeros(p), np.zeros(q), np.zeros(K), np.full(K, np.inf))

    @classmethod
    def beta_unit(cls, p, q, K, r):
        d = cls.zeros(p, q, K)
        d.beta[r] = 1.0
        return d

    @classmethod
    def gamma_unit(cls, p, q, K, r):
        d = cls.zeros(p, q, K)
        d.gamma[r] = 1.0
        return d

    @classmethod
    def lambda_indicator(cls, p, q, K, j, t):
        d = cls.zeros(p, q, K)
        d.lam_scale[j] = 1.0
        d.lam_cut[j] = t
        return d


def e_step(theta: Params, data: Dataset) -> np.ndarray:
    """(n, K) posterior stratum weights; indicator rows for known strata."""
    lf = log_densities(theta, data)
    unknown = np.flatnonzero(data.r == 0)
    q = np.zeros((data.n, data.k_strata))
    known = np.flatnonzero(data.r == 1)
    q[known, data.s[known]] = 1.0
    if unknown.size:
        lu = lf[unknown]
        norm = logsumexp(lu, axis=1, keepdims=True)
        bad = ~np.isfinite(norm[:, 0])
        if np.any(bad):
            i = int(unknown[np.argmax(bad)])
            raise EStepError(f"subject {i + 1} (time {data.time[i]!r}) has zero "
                             "density in every stratum")
        q[unknown] = np.exp(lu - norm)
    return q


def m_step_lambda(weights, beta, data: Dataset):
    """Weighted Breslow update: jump ``Q_ik / sum_j Q_jk exp(beta'X_j) Y_j(T_i)``
    at each event time of the stratum's support."""
    weights = np.asarray(weights, dtype=float)
    e = np.exp(data.x @ np.asarray(beta, dtype=float))
    out = []
    for k in range(data.k_strata):
        ev = data.support_rows[k]
        num = weights[ev, k]
        den = data.at_risk_sum(weights[:, k] * e, ev)
        bad = (num > 0) & ~(den > 0)
        if np.any(bad):
            t = data.time[ev[np.argmax(bad)]]
            raise ZeroDivisionError(f"stratum {k + 1}: empty weighted risk set at "
                                    f"event time {t!r}")
        jumps = np.zeros(ev.size)
        pos = num > 0
        jumps[pos] = num[pos] / den[pos]
        out.append(StepFunction(data.time[ev], jumps))
    return tuple(out)


def m_step_gamma(weights, data: Dataset, gamma_init=None, config: FitConfig = FitConfig()):
    """Maximize the weighted multinomial log-likelihood over all subjects."""
    res = fit_multinomial(data.w, weights, gamma_init, config)
    return res.gamma, res


def profile_objective(beta, weights, data: Dataset, with_derivatives=True):
    """Weighted stratified partial likelihood with baselines profiled out,
    divided by n."""
    beta = np.asarray(beta, dtype=float)
    ev = np.flatnonzero(data.status == 1)
    eta = data.x @ beta
    c = eta.max()
    e = np.exp(eta - c)
    x = data.x
    p, n = data.p, data.n
    value, grad, hess = 0.0, np.zeros(p), np.zeros((p, p))
    for k in range(data.k_strata):
        wk = weights[:, k]
        d = wk[ev]
        use = d > 0
        if not np.any(use):
            continue
        evk, d = ev[use], d[use]
        we = wk * e
        s0 = data.at_risk_sum(we, evk)
        value += float(np.sum(d * (eta[evk] - np.log(s0) - c)))
        if with_derivatives:
            s1 = data.at_risk_sum(we[:, None] * x, evk)
            xbar = s1 / s0[:, None]
            grad += d @ (x[evk] - xbar)
            s2 = data.at_risk_sum(we[:, None, None] * x[:, :, None] * x[:, None, :], evk)
            hess -= np.einsum("e,eab->ab", d, s2 / s0[:, None, None]
                              - xbar[:, :, None] * xbar[:, None, :])
    if with_derivatives:
        return value / n, grad / n, hess / n
    return value / n


def m_step_beta(weights, data: Dataset, beta_init=None, config: FitConfig = FitConfig()):
    """Newton ascent of :func:`profile_objective` from ``beta_init``."""
    x0 = np.zeros(data.p) if beta_init is None else np.asarray(beta_init, float)
    res = newton_maximize(lambda b: profile_objective(b, weights, data), x0,
                          tol=config.newton_tol, max_iters=config.newton_max_iters,
                          max_halvings=config.max_halvings, cap=config.norm_cap)
    return res.x, res


def _initial_params(data: Dataset, config: FitConfig):
    flags = []
    if config.init == "user_supplied":
        return config.init_params, flags
    try:
        cc = fit_complete_case(data, config)
        gf = fit_complete_gamma(data, config)
        beta, gamma = cc.beta_pl, gf.gamma
        if not (cc.converged and gf.converged):
            flags.append("complete-case initializer did not converge")
        if cc.capped or gf.capped:
            raise ValueError("complete-case fit diverged")
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("complete-case initialization failed (%s); using zeros", exc)
        flags.append(f"init fallback: {exc}")
        beta = np.zeros(data.p)
        gamma = np.zeros((data.k_strata - 1, data.m))
    # unknown strata start from the logistic prior (uniform under the fallback)
    q = np.zeros((data.n, data.k_strata))
    known = data.r == 1
    q[known, data.s[known]] = 1.0
    q[~known] = stratum_probs(gamma, data.w[~known]) if np.any(~known) else 0.0
    return Params(beta, gamma, m_step_lambda(q, beta, data)), flags


def _max_change(a: Params, b: Params, grid):
    d = [np.max(np.abs(a.beta - b.beta), initial=0.0),
         np.max(np.abs(a.gamma - b.gamma), initial=0.0),
         np.max(np.abs(a.cumulative(grid) - b.cumulative(grid)), initial=0.0)]
    return float(max(d))


def fit(data: Dataset, config: FitConfig = FitConfig()) -> FitResult:
    """Run EM to the NPMLE.

    ``loglik_trace[0]`` is the log-likelihood at the starting value and
    ``loglik_trace[t]`` the value after iteration ``t``.
    """
    theta, flags = _initial_params(data, config)
    ll = observed_log_likelihood(theta, data)
    trace = [ll]
    grid = data.event_times
    converged = False
    stalled, window_start = 0, 0.0
    it = 0
    for it in range(1, config.max_em_iters + 1):
        q = e_step(theta, data)
        gamma, gres = m_step_gamma(q, data, theta.gamma, config)
        beta, bres = m_step_beta(q, data, theta.beta, config)
        new = Params(beta, gamma, m_step_lambda(q, beta, data))
        ll_new = observed_log_likelihood(new, data)
        trace.append(ll_new)
        if ll_new < ll - 1e-10:
            log.warning("EM log-likelihood decreased by %.3g at iteration %d",
                        ll - ll_new, it)
        if (gres.capped or bres.capped) and not any("cap" in f for f in flags):
            flags.append(f"parameter norm cap reached at iteration {it}")
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        change = _max_change(new, theta, grid)
        theta, ll = new, ll_new
        if rel < config.em_tol and change < config.param_tol:
            res = score_residuals(theta, data)
            worst = max(abs(v) for v in res.values())
            if worst < config.score_tol:
                converged = True
                break
            # parameters have stopped moving but the score equations are not
            # solved, typically a likelihood increasing towards infinity
            if stalled == 0:
                window_start = worst
            stalled += 1
            if stalled >= STALL_ITERS:
                if worst >= 0.99 * window_start:
                    flags.append(f"EM stalled at iteration {it} with score residual "
                                 f"{worst:.3g} (possible monotone likelihood)")
                    break
                stalled = 0
        else:
            stalled = 0
    else:
        flags.append(f"no convergence after {config.max_em_iters} EM iterations")
    log.info("EM %s after %d iterations, loglik %.10g",
             "converged" if converged else "stopped", it, ll)
    return FitResult(theta, trace, it, converged, score_residuals(theta, data), flags)


def _subject_scores(theta: Params, data: Dataset, q):
    """Per-subject beta and gamma score vectors, shapes (n, p) and (n, q)."""
    eta = data.x @ theta.beta
    cum = theta.cumulative(data.time).T
    psi = data.status - np.exp(eta) * np.sum(q * cum, axis=1)
    s_beta = data.x * psi[:, None]
    if data.k_strata > 1:
        pi = np.exp(log_stratum_probs(theta.gamma, data.w))
        s_gamma = ((q - pi)[:, :-1, None] * data.w[:, None, :]).reshape(data.n, -1)
    else:
        s_gamma = np.zeros((data.n, 0))
    return psi, s_beta, s_gamma


def score_at(theta: Params, data: Dataset, direction: Direction, weights=None) -> float:
    """Empirical score operator evaluated in ``direction`` (an average over
    subjects)."""
    h = direction
    if (np.size(h.beta) != data.p or np.size(h.gamma) != data.q
            or np.size(h.lam_scale) != data.k_strata):
        raise ValueError("direction dimensions do not match the data")
    q = e_step(theta, data) if weights is None else weights
    _, s_beta, s_gamma = _subject_scores(theta, data, q)
    total = s_beta @ np.asarray(h.beta, float) + s_gamma @ np.asarray(h.gamma, float)
    e = np.exp(data.x @ theta.beta)
    for k in range(data.k_strata):
        c, cut = float(h.lam_scale[k]), float(h.lam_cut[k])
        if c == 0.0:
            continue
        h_at_t = c * (data.time <= cut)
        integral = c * theta.baselines[k](np.minimum(data.time, cut))
        total = total + q[:, k] * (h_at_t * data.status - e * integral)
    return float(np.mean(total))


def canonical_directions(data: Dataset, t=None):
    """Labelled unit directions: each beta and gamma coordinate and, for every
    stratum, the indicator ``1{s <= t}`` with ``t`` the median event time."""
    p, q, K = data.p, data.q, data.k_strata
    if t is None:
        t = float(np.median(data.event_times))
    out = {}
    for r in range(p):
        out[f"beta[{r + 1}]"] = Direction.beta_unit(p, q, K, r)
    for r in range(q):
        k, j = divmod(r, data.m)
        out[f"gamma[{k + 1},{j + 1}]"] = Direction.gamma_unit(p, q, K, r)
    for k in range(K):
        out[f"Lambda[{k + 1}](t={t!r})"] = Direction.lambda_indicator(p, q, K, k, t)
    return out


def score_residuals(theta: Params, data: Dataset, t=None) -> dict:
    q = e_step(theta, data)
    return {name: score_at(theta, data, d, weights=q)
            for name, d in canonical_directions(data, t).items()}
