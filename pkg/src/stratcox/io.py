"""Dataset CSV files and JSON result documents.

Floats are written with ``repr`` so every value survives a write/read
cycle exactly. Missing numbers (NaN) are written as JSON ``null``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .em import FitResult
from .model import Dataset, DataValidationError, Params, StepFunction

__all__ = ["write_dataset_csv", "read_dataset_csv", "params_to_dict",
           "params_from_dict", "fit_document", "fit_result_from_document",
           "dump_document", "load_document", "default_lambda_grid"]


def write_dataset_csv(data: Dataset, path):
    header = (["time", "status", "r", "s"] + [f"x{j + 1}" for j in range(data.p)]
              + [f"w{j + 1}" for j in range(data.m)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(data.n):
            s = str(int(data.s[i]) + 1) if data.r[i] == 1 else ""
            wr.writerow([repr(float(data.time[i])), int(data.status[i]), int(data.r[i]), s]
                        + [repr(float(v)) for v in data.x[i]]
                        + [repr(float(v)) for v in data.w[i]])


def read_dataset_csv(path, k_strata=None, tau=None, jitter_ties=False, seed=0) -> Dataset:
    """Parse and validate a dataset file.

    Raises :class:`DataValidationError` naming the offending data row
    (1-based, header excluded).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataValidationError("empty file: header required")
    header = [h.strip() for h in rows[0]]
    if header[:4] != ["time", "status", "r", "s"]:
        raise DataValidationError("header must start with time,status,r,s")
    xcols = [h for h in header[4:] if h.startswith("x")]
    wcols = [h for h in header[4:] if h.startswith("w")]
    if (header[4:] != xcols + wcols
            or xcols != [f"x{j + 1}" for j in range(len(xcols))]
            or wcols != [f"w{j + 1}" for j in range(len(wcols))]):
        raise DataValidationError("covariate columns must be x1..xp followed by w1..wm")
    p, m = len(xcols), len(wcols)
    time, status, r, s, x, w = [], [], [], [], [], []
    for i, row in enumerate(rows[1:], start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataValidationError(
                f"row {i}: expected {len(header)} fields, found {len(row)}", row=i)
        try:
            time.append(float(row[0]))
            status.append(int(row[1]))
            r.append(int(row[2]))
            sv = row[3].strip()
            s.append(int(sv) - 1 if sv else -1)
            x.append([float(v) for v in row[4:4 + p]])
            w.append([float(v) for v in row[4 + p:]])
        except ValueError as exc:
            raise DataValidationError(f"row {i}: {exc}", row=i) from None
        if (r[-1] == 1) != bool(sv):
            raise DataValidationError(f"row {i}: s must be given iff r=1", row=i)
    n = len(time)
    return Dataset.from_arrays(time, status, np.array(x).reshape(n, p),
                               np.array(w).reshape(n, m), r, s, k_strata=k_strata,
                               tau=tau, jitter_ties=jitter_ties, seed=seed)


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _unnum(v):
    return math.nan if v is None else float(v)


def params_to_dict(theta: Params):
    return {
        "beta": [_num(v) for v in theta.beta],
        "gamma": [[_num(v) for v in row] for row in theta.gamma],
        "baselines": [[[_num(t), _num(a)] for t, a in zip(b.jump_times, b.jump_sizes)]
                      for b in theta.baselines],
    }


def params_from_dict(d) -> Params:
    bl = []
    for pairs in d["baselines"]:
        arr = np.array(pairs, dtype=float).reshape(-1, 2)
        bl.append(StepFunction(arr[:, 0], arr[:, 1]))
    K = len(bl)
    m = len(d["gamma"][0]) if d["gamma"] else 0
    return Params(np.array(d["beta"], dtype=float),
                  np.array(d["gamma"], dtype=float).reshape(max(K - 1, 0), m), bl)


def default_lambda_grid(data: Dataset):
    """Deciles of the observed event times, restricted to (0, tau)."""
    q = np.quantile(data.event_times, np.linspace(0.1, 0.9, 9))
    return [float(t) for t in q if 0.0 < t < data.tau]


def fit_document(result: FitResult, data: Dataset, config=None, variance=None,
                 lambda_grid=None, seed=None):
    """Structured summary of a fit, optionally with standard errors."""
    th = result.theta_hat
    se_b = variance.se_beta if variance is not None else [None] * data.p
    se_g = variance.se_gamma if variance is not None else [None] * data.q
    beta_rows = [{"name": f"beta[{r + 1}]", "estimate": _num(b),
                  "se": None if s is None else _num(s)}
                 for r, (b, s) in enumerate(zip(th.beta, se_b))]
    gamma_rows = []
    for idx, (g, s) in enumerate(zip(th.gamma_flat, se_g)):
        k, j = divmod(idx, data.m)
        gamma_rows.append({"name": f"gamma[{k + 1},{j + 1}]", "estimate": _num(g),
                           "se": None if s is None else _num(s)})
    baseline_table = []
    for k, b in enumerate(th.baselines):
        cum = np.cumsum(b.jump_sizes)
        baseline_table.append({"stratum": k + 1, "rows": [
            [_num(t), _num(a), _num(c)] for t, a, c in zip(b.jump_times, b.jump_sizes, cum)]})
    doc = {
        "tool": "stratcox",
        "version": __version__,
        "config": config or {},
        "seed": seed,
        "data": {"n": data.n, "p": data.p, "m": data.m, "k_strata": data.k_strata,
                 "tau": _num(data.tau)},
        "converged": bool(result.converged),
        "em_iterations": int(result.em_iterations),
        "flags": list(result.flags),
        "loglik_trace": [_num(v) for v in result.loglik_trace],
        "score_residuals": {k: _num(v) for k, v in result.score_residuals.items()},
        "estimates": {"beta": beta_rows, "gamma": gamma_rows},
        "params": params_to_dict(th),
        "baseline_table": baseline_table,
        "variance": None,
    }
    if variance is not None:
        grid = default_lambda_grid(data) if lambda_grid is None else list(lambda_grid)
        table = []
        for k in range(data.k_strata):
            for t in grid:
                v = variance.v_sq(k + 1, t)
                table.append({"stratum": k + 1, "t": _num(t),
                              "cumulative": _num(th.baselines[k](t)),
                              "v_sq": _num(v), "se": _num(variance.se_lambda(k + 1, t))})
        doc["variance"] = {
            "sigma_beta": [[_num(v) for v in row] for row in variance.sigma_beta],
            "sigma_gamma": [[_num(v) for v in row] for row in variance.sigma_gamma],
            "lambda_table": table,
            "warnings": list(variance.warnings),
            "diagnostics": {k: _num(v) for k, v in variance.diagnostics.items()},
        }
    return doc


def fit_result_from_document(doc) -> FitResult:
    return FitResult(
        theta_hat=params_from_dict(doc["params"]),
        loglik_trace=[_unnum(v) for v in doc["loglik_trace"]],
        em_iterations=int(doc["em_iterations"]),
        converged=bool(doc["converged"]),
        score_residuals={k: _unnum(v) for k, v in doc["score_residuals"].items()},
        flags=list(doc["flags"]),
    )


def dump_document(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n",
                          encoding="utf-8")


def load_document(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
