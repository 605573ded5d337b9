"""Complete-case stratified Cox regression, Breslow baselines and the
logistic stratum model fitted on subjects with a known stratum.

These serve as the EM starting point and as the full-data reference the EM
fixed point must reproduce when every stratum is observed.
"""

from dataclasses import dataclass

import numpy as np

from ._newton import newton_maximize
from .model import Dataset, FitConfig, StepFunction, stratum_probs

__all__ = ["CompleteFit", "GammaFit", "partial_log_likelihood", "breslow",
           "fit_complete_case", "fit_complete_gamma", "fit_multinomial"]


@dataclass
class CompleteFit:
    beta_pl: np.ndarray
    breslow: tuple
    converged: bool
    iterations: int
    capped: bool = False


@dataclass
class GammaFit:
    gamma: np.ndarray
    converged: bool
    iterations: int
    capped: bool = False


def _known(data: Dataset):
    return np.flatnonzero(data.r == 1)


def _stratum_terms(data, idx, k):
    members = idx[data.s[idx] == k]
    events = members[data.status[members] == 1]
    # at_risk[e, j] = 1{T_j >= T_e} within stratum k
    at_risk = (data.time[members][None, :] >= data.time[events][:, None]).astype(float)
    return members, events, at_risk


def partial_log_likelihood(beta, data: Dataset, with_derivatives=False):
    """Stratified Cox log partial likelihood over subjects with ``r == 1``.

    Divided by the number of known-stratum subjects. With
    ``with_derivatives`` returns ``(value, gradient, hessian)``.
    """
    beta = np.asarray(beta, dtype=float)
    idx = _known(data)
    p = data.p
    value, grad, hess = 0.0, np.zeros(p), np.zeros((p, p))
    for k in range(data.k_strata):
        members, events, at_risk = _stratum_terms(data, idx, k)
        if not events.size:
            continue
        xm = data.x[members]
        eta = xm @ beta
        c = eta.max() if eta.size else 0.0
        e = np.exp(eta - c)
        s0 = at_risk @ e
        value += float(np.sum(data.x[events] @ beta - np.log(s0) - c))
        if with_derivatives:
            xbar = (at_risk @ (e[:, None] * xm)) / s0[:, None]
            grad += np.sum(data.x[events] - xbar, axis=0)
            s2 = np.einsum("ej,ja,jb->eab", at_risk, e[:, None] * xm, xm) / s0[:, None, None]
            hess -= np.sum(s2 - xbar[:, :, None] * xbar[:, None, :], axis=0)
    nk = max(idx.size, 1)
    if with_derivatives:
        return value / nk, grad / nk, hess / nk
    return value / nk


def breslow(beta, data: Dataset):
    """Breslow cumulative baselines per stratum from known-stratum subjects."""
    beta = np.asarray(beta, dtype=float)
    idx = _known(data)
    out = []
    for k in range(data.k_strata):
        members, events, at_risk = _stratum_terms(data, idx, k)
        s0 = at_risk @ np.exp(data.x[members] @ beta)
        order = np.argsort(data.time[events])
        out.append(StepFunction(data.time[events][order], 1.0 / s0[order]))
    return tuple(out)


def fit_complete_case(data: Dataset, config: FitConfig = FitConfig()) -> CompleteFit:
    """Maximize the stratified partial likelihood on the known-stratum subjects.

    Newton with step-halving from zero. ``capped`` signals a monotone
    likelihood (the norm of beta ran past ``config.norm_cap``).
    """
    idx = _known(data)
    if not idx.size:
        raise ValueError("no subject with a known stratum")
    for k in range(data.k_strata):
        if not np.any((data.s[idx] == k) & (data.status[idx] == 1)):
            raise ValueError(f"stratum {k + 1} has no known-stratum event")
    res = newton_maximize(
        lambda b: partial_log_likelihood(b, data, with_derivatives=True),
        np.zeros(data.p), tol=config.newton_tol, max_iters=config.newton_max_iters,
        max_halvings=config.max_halvings, cap=config.norm_cap)
    return CompleteFit(res.x, breslow(res.x, data), res.converged, res.iterations,
                       res.capped)


def _multinomial_objective(gamma_flat, w, weights, K):
    m = w.shape[1]
    g = gamma_flat.reshape(K - 1, m)
    pi = stratum_probs(g, w)
    with np.errstate(divide="ignore"):
        logpi = np.log(pi)
    tot = weights.sum(axis=1)
    value = float(np.sum(np.where(weights > 0, weights * logpi, 0.0)))
    resid = weights[:, :-1] - tot[:, None] * pi[:, :-1]
    grad = (resid.T @ w).ravel()
    # Hessian blocks: -sum_i tot_i (diag(pi) - pi pi')_{ab} w_i w_i'
    pk = pi[:, :-1]
    cov = (np.einsum("ia,ab->iab", pk, np.eye(K - 1))
           - pk[:, :, None] * pk[:, None, :]) * tot[:, None, None]
    hess = -np.einsum("iab,ic,id->acbd", cov, w, w).reshape((K - 1) * m, (K - 1) * m)
    n = w.shape[0]
    return value / n, grad / n, hess / n


def fit_multinomial(w, weights, gamma0=None, config: FitConfig = FitConfig()) -> GammaFit:
    """Weighted multinomial-logistic fit; ``weights`` is (n, K), reference last.

    Maximizes ``sum_i sum_k weights[i, k] * log pi_k(w_i)``.
    """
    w = np.asarray(w, dtype=float)
    weights = np.asarray(weights, dtype=float)
    K = weights.shape[1]
    m = w.shape[1]
    if K == 1:
        return GammaFit(np.zeros((0, m)), True, 0)
    x0 = np.zeros((K - 1) * m) if gamma0 is None else np.asarray(gamma0, float).ravel()
    res = newton_maximize(lambda g: _multinomial_objective(g, w, weights, K), x0,
                          tol=config.newton_tol, max_iters=config.newton_max_iters,
                          max_halvings=config.max_halvings, cap=config.norm_cap)
    return GammaFit(res.x.reshape(K - 1, m), res.converged, res.iterations, res.capped)


def fit_complete_gamma(data: Dataset, config: FitConfig = FitConfig()) -> GammaFit:
    """Logistic stratum model fitted on subjects whose stratum is known."""
    idx = _known(data)
    weights = np.zeros((idx.size, data.k_strata))
    weights[np.arange(idx.size), data.s[idx]] = 1.0
    return fit_multinomial(data.w[idx], weights, config=config)
