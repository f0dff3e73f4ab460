"""Entropic optimal transport between two embedding batches.

The solver minimises ``<T, C> + eps * sum_ij T_ij (log T_ij - 1)`` subject to
``T 1 = u`` and ``T^T 1 = v`` by Sinkhorn-Knopp matrix scaling. Its optimum
has the form ``diag(alpha) K diag(beta)`` with ``K = exp(-C / eps)``.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import xlogy

from .exceptions import NumericalError, RejectedInputError, SolverError
from .numerics import as_matrix, as_vector

__all__ = [
    "DEFAULT_EPSILON",
    "DEFAULT_ITERS",
    "DEFAULT_TOL",
    "OtProblem",
    "SinkhornResult",
    "OtDistance",
    "sinkhorn",
    "ot_distance",
    "exact_ot_oracle",
    "uniform",
    "export_plan",
    "read_plan",
    "read_cost_csv",
    "write_cost_csv",
]

DEFAULT_EPSILON = 0.10
DEFAULT_ITERS = 100
DEFAULT_TOL = 1e-9
# kernel path is replaced by log-sum-exp updates below this eps / max(C)
LOG_DOMAIN_RATIO = 0.01


def uniform(n):
    return np.full(n, 1.0 / n)


@dataclass
class OtProblem:
    """Cost matrix, marginals and solver settings for one transport problem.

    ``u`` and ``v`` default to uniform marginals.
    """

    cost: np.ndarray
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    epsilon: float = DEFAULT_EPSILON
    max_iters: int = DEFAULT_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        self.cost = as_matrix(self.cost, "cost")
        m, n = self.cost.shape
        if m == 0 or n == 0:
            raise RejectedInputError("cost matrix must be nonempty")
        if np.any(self.cost < 0):
            raise RejectedInputError("cost entries must be nonnegative")
        self.u = uniform(m) if self.u is None else as_vector(self.u, "u")
        self.v = uniform(n) if self.v is None else as_vector(self.v, "v")
        for name, vec, size in (("u", self.u, m), ("v", self.v, n)):
            if vec.shape != (size,):
                raise RejectedInputError(f"{name} has length {vec.size}, expected {size}")
            if np.any(vec < 0):
                raise RejectedInputError(f"{name} has negative entries")
            if abs(vec.sum() - 1.0) > 1e-12:
                raise RejectedInputError(f"{name} sums to {vec.sum()!r}, not 1")
        if not self.epsilon > 0:
            raise RejectedInputError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_iters) < 0:
            raise RejectedInputError("max_iters must be nonnegative")
        self.max_iters = int(self.max_iters)
        if self.tol < 0:
            raise RejectedInputError("tol must be nonnegative")


class OtDistance(NamedTuple):
    value: float
    linear_term: float


@dataclass
class SinkhornResult:
    plan: np.ndarray
    distance: float
    linear_term: float
    iterations_run: int
    marginal_violation: float
    mode: str = "kernel"
    trace: list = field(default_factory=list, repr=False)


def ot_distance(plan, cost, epsilon):
    """Entropic transport cost of ``plan`` under ``cost``.

    Returns ``OtDistance(value, linear_term)`` where ``linear_term`` is
    ``<plan, cost>`` and ``value`` adds ``eps * sum plan (log plan - 1)``
    (with ``0 log 0 = 0``).
    """
    plan = np.asarray(plan, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if plan.shape != cost.shape:
        raise RejectedInputError(f"plan shape {plan.shape} != cost shape {cost.shape}")
    linear = float(np.sum(plan * cost))
    entropic = float(np.sum(xlogy(plan, plan)) - np.sum(plan))
    return OtDistance(linear + epsilon * entropic, linear)


def _violation(plan_rows, plan_cols, u, v):
    return max(float(np.max(np.abs(plan_rows - u))), float(np.max(np.abs(plan_cols - v))))


def _lse(x, axis):
    # leaner than scipy.special.logsumexp for the tiny matrices solved here
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _sinkhorn_kernel(C, u, v, eps, max_iters, tol, callback):
    K = np.exp(-C / eps)
    if np.any(K.max(axis=1) == 0.0) or np.any(K.max(axis=0) == 0.0):
        raise SolverError(
            f"kernel exp(-C/eps) underflows to an all-zero row or column at eps={eps}; "
            "increase epsilon or use the log-domain solver"
        )
    m, n = C.shape
    alpha = np.full(m, 1.0 / m)
    beta = np.full(n, 1.0 / n)
    Kb = K @ beta
    viol = _violation(alpha * Kb, beta * (K.T @ alpha), u, v)
    it = 0
    while it < max_iters and viol > tol:
        alpha = u / Kb
        KTa = K.T @ alpha
        beta = v / KTa
        Kb = K @ beta
        it += 1
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise SolverError(
                f"scaling vectors became non-finite at iteration {it} (eps={eps}); "
                "increase epsilon or use the log-domain solver"
            )
        viol = _violation(alpha * Kb, beta * KTa, u, v)
        if callback is not None:
            callback(it, viol)
    plan = alpha[:, None] * K * beta[None, :]
    return plan, it, viol


def _sinkhorn_log(C, u, v, eps, max_iters, tol, callback):
    m, n = C.shape
    with np.errstate(divide="ignore"):
        log_u = np.log(u)
        log_v = np.log(v)
    # potentials f = eps log(alpha), g = eps log(beta); same start as the kernel path
    f = np.full(m, eps * math.log(1.0 / m))
    g = np.full(n, eps * math.log(1.0 / n))
    logK = -C / eps
    row_lse = _lse(logK + g[None, :] / eps, axis=1)
    col_lse = _lse(logK + f[:, None] / eps, axis=0)
    viol = _violation(np.exp(f / eps + row_lse), np.exp(g / eps + col_lse), u, v)
    it = 0
    while it < max_iters and viol > tol:
        f = eps * (log_u - row_lse)
        col_lse = _lse(logK + f[:, None] / eps, axis=0)
        g = eps * (log_v - col_lse)
        row_lse = _lse(logK + g[None, :] / eps, axis=1)
        it += 1
        if np.any(np.isnan(f)) or np.any(np.isnan(g)):
            raise SolverError(f"log-domain potentials became NaN at iteration {it}")
        viol = _violation(np.exp(f / eps + row_lse), np.exp(g / eps + col_lse), u, v)
        if callback is not None:
            callback(it, viol)
    plan = np.exp(f[:, None] / eps + logK + g[None, :] / eps)
    return plan, it, viol


def sinkhorn(problem, mode="auto", callback=None):
    """Solve an :class:`OtProblem` with Sinkhorn-Knopp iterations.

    Parameters
    ----------
    problem : OtProblem
    mode : {'auto', 'kernel', 'log'}
        ``'kernel'`` scales ``K = exp(-C/eps)`` directly, ``'log'`` works
        with log-sum-exp potentials. ``'auto'`` picks ``'log'`` when
        ``eps < 0.01 * max(C)``.
    callback : callable, optional
        Called as ``callback(iteration, marginal_violation)`` after every
        full (alpha, beta) update pair.

    Returns
    -------
    SinkhornResult
        Iteration stops at ``max_iters`` or once the marginal violation
        drops to ``tol``; hitting ``max_iters`` is not an error.
    """
    C, u, v, eps = problem.cost, problem.u, problem.v, problem.epsilon
    if mode == "auto":
        mode = "log" if eps < LOG_DOMAIN_RATIO * float(C.max()) else "kernel"
    trace = []

    def hook(it, viol):
        trace.append(viol)
        if callback is not None:
            callback(it, viol)

    if mode == "kernel":
        solve = _sinkhorn_kernel
    elif mode == "log":
        solve = _sinkhorn_log
    else:
        raise RejectedInputError(f"unknown sinkhorn mode {mode!r}")
    plan, it, viol = solve(C, u, v, eps, problem.max_iters, problem.tol, hook)
    if not np.all(np.isfinite(plan)):
        raise NumericalError("transport plan contains non-finite entries")
    dist = ot_distance(plan, C, eps)
    return SinkhornResult(
        plan=plan,
        distance=dist.value,
        linear_term=dist.linear_term,
        iterations_run=it,
        marginal_violation=viol,
        mode=mode,
        trace=trace,
    )


def exact_ot_oracle(cost):
    """Unregularised OT cost under uniform marginals, by brute force.

    Enumerates all ``n!`` permutations (an optimal plan of the Birkhoff
    polytope is a permutation matrix), so ``n`` is capped at 8.
    """
    cost = as_matrix(cost, "cost")
    n = cost.shape[0]
    if cost.shape != (n, n) or n == 0:
        raise RejectedInputError(f"oracle needs a nonempty square cost, got {cost.shape}")
    if n > 8:
        raise RejectedInputError(f"n={n} too large for permutation enumeration (max 8)")
    rows = range(n)
    best = min(sum(cost[i, p[i]] for i in rows) for p in itertools.permutations(rows))
    return float(best) / n


def export_plan(plan, row_ids, col_ids, path):
    """Write ``plan`` as CSV: a header of column ids, then one row per row id.

    Values use ``repr`` so re-reading gives the bitwise-identical matrix.
    """
    plan = np.asarray(plan, dtype=np.float64)
    if plan.ndim != 2 or plan.shape != (len(row_ids), len(col_ids)):
        raise RejectedInputError(
            f"plan shape {plan.shape} does not match ids ({len(row_ids)}, {len(col_ids)})"
        )
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([""] + [str(c) for c in col_ids])
            for rid, row in zip(row_ids, plan):
                writer.writerow([str(rid)] + [repr(float(x)) for x in row])
    except OSError as exc:
        raise OSError(f"cannot write plan to {path}: {exc}") from exc


def read_plan(path):
    """Inverse of :func:`export_plan`. Returns ``(plan, row_ids, col_ids)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise RejectedInputError(f"{path}: empty plan file")
    col_ids = rows[0][1:]
    row_ids = [r[0] for r in rows[1:]]
    plan = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return plan.reshape(len(row_ids), len(col_ids)), row_ids, col_ids


def read_cost_csv(path):
    """Read a header-less grid of decimals as a cost matrix."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise RejectedInputError(f"{path}: empty cost file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise RejectedInputError(f"{path}: ragged cost grid")
    try:
        return as_matrix([[float(x) for x in r] for r in rows], "cost")
    except ValueError as exc:
        raise RejectedInputError(f"{path}: {exc}") from None


def write_cost_csv(path, cost):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(cost, dtype=np.float64):
            writer.writerow([repr(float(x)) for x in row])
