"""Damped Newton ascent shared by the Cox and logistic fitters."""

from dataclasses import dataclass

import numpy as np


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    capped: bool


def newton_maximize(fun, x0, tol=1e-10, max_iters=100, max_halvings=30, cap=50.0):
    """Maximize a concave ``fun(x) -> (value, grad, hess)`` by Newton steps.

    A step is halved until the objective does not decrease. Convergence needs
    both a small gradient and a small Newton step, so a likelihood that keeps
    increasing towards infinity runs into ``cap`` (on the Euclidean norm of
    ``x``) and is reported as ``capped`` instead of converged.
    """
    x = np.array(x0, dtype=float)
    value, grad, hess = fun(x)
    for it in range(1, max_iters + 1):
        if x.size == 0:
            return NewtonResult(x, value, 0.0, it - 1, True, False)
        step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol and np.linalg.norm(step) < 1e-6 * (1.0 + np.linalg.norm(x)):
            return NewtonResult(x, value, gnorm, it - 1, True, False)
        t = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + t * step
            v_new, g_new, h_new = fun(x_new)
            if np.isfinite(v_new) and v_new >= value - 1e-14 * abs(value):
                break
            t *= 0.5
        else:
            # no ascent direction left at machine precision
            return NewtonResult(x, value, gnorm, it, gnorm < tol, False)
        x, value, grad, hess = x_new, v_new, g_new, h_new
        if np.linalg.norm(x) > cap:
            return NewtonResult(x, value, float(np.linalg.norm(grad)), it, False, True)
    gnorm = float(np.linalg.norm(grad))
    return NewtonResult(x, value, gnorm, max_iters, False, False)
