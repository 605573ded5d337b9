"""Plug-in asymptotic variances from the empirical information block matrix.

The matrix has order ``p + q + K*n``. Its baseline rows and columns are
indexed stratum-major, then by subject in data order, and use every
observed time (censored ones included). Nothing is symmetrized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .em import _subject_scores, e_step
from .model import Dataset, Params

__all__ = ["SingularBlockError", "ScoreKernels", "BlockMatrix", "VarianceResult",
           "score_kernels", "build_block_matrix", "schur_variances", "v_squared",
           "estimate_variance"]

MAX_ORDER = 5000
COND_WARN = 1e12


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, block, detail=""):
        super().__init__(f"singular block {block}" + (f": {detail}" if detail else ""))
        self.block = block


@dataclass
class ScoreKernels:
    psi: np.ndarray        # (n,)
    q: np.ndarray          # (n, K) posterior weights
    exp_eta: np.ndarray    # (n,)
    s_gamma: np.ndarray    # (n, q)
    time: np.ndarray

    def phi(self, u, i, k):
        """``Y_i(u) * Q_ik * exp(beta'X_i)``."""
        return float(self.time[i] >= u) * self.q[i, k] * self.exp_eta[i]


def score_kernels(theta: Params, data: Dataset) -> ScoreKernels:
    q = e_step(theta, data)
    psi, _, s_gamma = _subject_scores(theta, data, q)
    return ScoreKernels(psi, q, np.exp(data.x @ theta.beta), s_gamma, data.time)


@dataclass
class BlockMatrix:
    matrix: np.ndarray
    p: int
    q: int
    k_strata: int
    n: int
    time: np.ndarray
    jumps: np.ndarray      # (K, n) baseline jump at each observed time

    def _sl(self, part):
        p, q = self.p, self.q
        return {"beta": slice(0, p), "gamma": slice(p, p + q),
                "Lambda": slice(p + q, p + q + self.k_strata * self.n)}[part]

    def block(self, row, col):
        """Sub-matrix by part name: ``'beta'``, ``'gamma'`` or ``'Lambda'``,
        or ``'Lambda<k>'`` (1-based) for one stratum."""
        return self.matrix[self._part(row), self._part(col)]

    def _part(self, name):
        if name.startswith("Lambda") and name != "Lambda":
            k = int(name[6:]) - 1
            off = self.p + self.q + k * self.n
            return slice(off, off + self.n)
        return self._sl(name)


def build_block_matrix(theta: Params, data: Dataset, max_order=MAX_ORDER) -> BlockMatrix:
    """Assemble the empirical information matrix at ``theta``."""
    n, p, q, K = data.n, data.p, data.q, data.k_strata
    order = p + q + K * n
    if order > max_order:
        raise ValueError(f"information matrix order {order} exceeds the cap {max_order}")
    ker = score_kernels(theta, data)
    Q, E, psi, sg = ker.q, ker.exp_eta, ker.psi, ker.s_gamma
    X, T, D = data.x, data.time, data.status.astype(float)
    # Y[r, i] = 1{T_i >= T_r}
    Y = (T[None, :] >= T[:, None]).astype(float)
    jumps = theta.jumps_at(T)

    A = np.zeros((order, order))
    b, g = slice(0, p), slice(p, p + q)

    def lam(k):
        return slice(p + q + k * n, p + q + (k + 1) * n)

    A[b, b] = (X * (psi ** 2)[:, None]).T @ X / n
    A[g, g] = sg.T @ sg / n
    A[b, g] = (X * psi[:, None]).T @ sg / n
    A[g, b] = A[b, g].T
    for k in range(K):
        Qk = Q[:, k]
        A[b, lam(k)] = (2.0 / n) * (X * (D * psi * Qk)[:, None]).T
        A[g, lam(k)] = (2.0 / n) * (sg * (D * Qk)[:, None]).T
        A[lam(k), b] = -(2.0 / n) * Y @ (X * (psi * Qk * E)[:, None])
        A[lam(k), g] = -(2.0 / n) * Y @ (sg * (Qk * E)[:, None])
        A[lam(k), lam(k)] = np.diag(Y @ (Qk * Qk * E) / n)
        for j in range(k + 1, K):
            Qj = Q[:, j]
            a = Qk * E * Qj * E
            blk = np.diag(2.0 / n * (Y @ (Qk * E * Qj)))
            # sum_i phi(T_r, i, k) Q_ij e^{eta_i} dL_j(T_s) {1{T_s<=T_i} - 1{T_s<=T_r}}
            blk += (2.0 / n) * ((Y @ (a[:, None] * Y.T)) - (Y @ a)[:, None] * Y.T) \
                * jumps[j][None, :]
            blk -= (2.0 / n) * Y * (Qk * E * Qj * D)[None, :]
            A[lam(k), lam(j)] = blk
    return BlockMatrix(A, p, q, K, n, T.copy(), jumps)


@dataclass
class VarianceResult:
    sigma_beta: np.ndarray
    sigma_gamma: np.ndarray
    sigma_lambda: np.ndarray
    n: int
    k_strata: int
    time: np.ndarray
    jumps: np.ndarray
    tau: float
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def se_beta(self):
        return np.sqrt(np.diag(self.sigma_beta) / self.n)

    @property
    def se_gamma(self):
        return np.sqrt(np.diag(self.sigma_gamma) / self.n)

    def v_sq(self, j, t):
        """Asymptotic variance estimate of ``sqrt(n) * Lambda_j(t)``; ``j`` 1-based."""
        if not 0.0 < t < self.tau:
            raise ValueError(f"t={t!r} must lie in (0, tau={self.tau!r})")
        if not 1 <= j <= self.k_strata:
            raise ValueError(f"stratum {j} out of range 1..{self.k_strata}")
        n = self.n
        ind = (self.time <= t).astype(float)
        sl = slice((j - 1) * n, j * n)
        xi = self.jumps[j - 1] * ind
        return float(xi @ self.sigma_lambda[sl, sl] @ ind)

    def se_lambda(self, j, t):
        v = self.v_sq(j, t)
        return float(np.sqrt(v / self.n)) if v >= 0 else float("nan")


def _inv(M, name, notes):
    if M.size == 0:
        return np.zeros(M.shape)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            out = scipy.linalg.inv(M)
    except scipy.linalg.LinAlgWarning as exc:
        notes.append(f"{name}: {exc}")
        out = scipy.linalg.inv(M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularBlockError(name, str(exc)) from None
    if not np.all(np.isfinite(out)):
        raise SingularBlockError(name, "non-finite inverse")
    if M.shape[0] <= 200:
        c = np.linalg.cond(M)
        if c > COND_WARN:
            notes.append(f"{name}: condition number {c:.3g}")
    return out


def _schur(Aaa, Aab, Aac, Aba, Abb, Abc, Aca, Acb, Acc, names, notes):
    """Top-left block of the inverse of a 3x3 block matrix via nested
    Schur complements, eliminating the second block first."""
    Gi = _inv(Abb, names[1], notes)
    inner = Acc - Acb @ Gi @ Abc
    left = Aac - Aab @ Gi @ Abc
    right = Aca - Acb @ Gi @ Aba
    S = Aaa - Aab @ Gi @ Aba - left @ _inv(inner, names[2], notes) @ right
    return _inv(S, names[0], notes)


def schur_variances(A: BlockMatrix, tau=None, check=True) -> VarianceResult:
    """Sigma_beta, Sigma_gamma and Sigma_Lambda from the displayed nested
    Schur-complement formulas.

    With ``check`` the beta and gamma blocks are compared with a direct solve
    of the full system and the maximum discrepancies are stored in
    ``diagnostics``.
    """
    B = {(r, c): A.block(r, c) for r in ("beta", "gamma", "Lambda")
         for c in ("beta", "gamma", "Lambda")}
    notes = []
    bb, bg, bl = B["beta", "beta"], B["beta", "gamma"], B["beta", "Lambda"]
    gb, gg, gl = B["gamma", "beta"], B["gamma", "gamma"], B["gamma", "Lambda"]
    lb, lg, ll = B["Lambda", "beta"], B["Lambda", "gamma"], B["Lambda", "Lambda"]
    sig_b = _schur(bb, bg, bl, gb, gg, gl, lb, lg, ll,
                   ("beta-beta complement", "A_gamma_gamma",
                    "Lambda-Lambda complement given gamma"), notes)
    sig_g = _schur(gg, gb, gl, bg, bb, bl, lg, lb, ll,
                   ("gamma-gamma complement", "A_beta_beta",
                    "Lambda-Lambda complement given beta"), notes)
    sig_l = _schur(ll, lb, lg, bl, bb, bg, gl, gb, gg,
                   ("Lambda-Lambda complement", "A_beta_beta",
                    "gamma-gamma complement given beta"), notes)
    res = VarianceResult(sig_b, sig_g, sig_l, A.n, A.k_strata, A.time, A.jumps,
                         float(np.max(A.time)) if tau is None else float(tau), notes)
    for name, S in (("beta", sig_b), ("gamma", sig_g)):
        if S.size:
            res.diagnostics[f"asymmetry_{name}"] = float(np.max(np.abs(S - S.T)))
    if check:
        full = full_inverse_blocks(A)
        for name, S in (("beta", sig_b), ("gamma", sig_g)):
            if S.size:
                res.diagnostics[f"full_solve_diff_{name}"] = float(
                    np.max(np.abs(S - full[name])))
    return res


def full_inverse_blocks(A: BlockMatrix):
    """Solve the full system for unit right-hand sides in the beta and gamma
    coordinates; returns the matching diagonal blocks of the inverse."""
    p, q = A.p, A.q
    rhs = np.zeros((A.matrix.shape[0], p + q))
    rhs[np.arange(p + q), np.arange(p + q)] = 1.0
    if p + q == 0:
        return {"beta": np.zeros((0, 0)), "gamma": np.zeros((0, 0))}
    sol = scipy.linalg.solve(A.matrix, rhs)
    return {"beta": sol[:p, :p], "gamma": sol[p:p + q, p:p + q]}


def v_squared(result: VarianceResult, theta_hat: Params, j, t):
    """Variance estimate for ``sqrt(n) * Lambda_j(t)``; ``j`` is 1-based."""
    if theta_hat.k_strata != result.k_strata:
        raise ValueError("theta_hat and result disagree on the number of strata")
    return result.v_sq(j, t)


def estimate_variance(theta_hat: Params, data: Dataset, check=True) -> VarianceResult:
    return schur_variances(build_block_matrix(theta_hat, data), tau=data.tau, check=check)
