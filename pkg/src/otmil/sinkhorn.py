"""Entropy-regularized optimal transport via Sinkhorn scaling.

The solver runs the classic alternating updates

    u <- mu / (K v),    v <- nu / (K^T u),    K = exp(-C / epsilon)

and returns the coupling ``diag(u) K diag(v)`` together with certificates
(iterations run, worst marginal violation) and a tape of every scaling
iteration. ``sinkhorn_vjp`` replays that tape in reverse, producing exact
gradients of any linear functional of the plan with respect to the cost
matrix and both marginals — exact for the iterations actually performed,
which is what training through the unrolled loop requires.

A log-domain variant is available for very small epsilon; it records log
scalings instead and has its own reverse replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import NumericError
from .kernel import as_matrix, as_vector

# exp(-C/eps) is clamped here so the kernel stays strictly positive.
KERNEL_FLOOR = 1e-300
# Scaling denominators (K v) and (K^T u) are floored here.
DENOM_FLOOR = 1e-300

DEFAULT_EPSILON = 0.05
DEFAULT_ITERS = 20
DEFAULT_TOL = 1e-9


@dataclass
class Marginals:
    """Source/target distributions over the two prototype sets."""

    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.mu = as_vector(self.mu, "mu")
        self.nu = as_vector(self.nu, "nu")
        for name, m in (("mu", self.mu), ("nu", self.nu)):
            if m.size == 0 or np.any(m <= 0.0) or abs(m.sum() - 1.0) > 1e-10:
                raise ValueError(
                    f"{name} must lie strictly inside the probability simplex"
                )


@dataclass
class TransportPlan:
    """Nonnegative coupling plus convergence certificates."""

    plan: np.ndarray
    iterations_run: int
    marginal_violation: float


class _Iteration(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    r: np.ndarray  # floored K @ v_prev
    s: np.ndarray  # floored K^T @ u
    r_clamped: np.ndarray | None
    s_clamped: np.ndarray | None


class _LogIteration(NamedTuple):
    lu: np.ndarray
    lv: np.ndarray


@dataclass
class SinkhornTape:
    """Everything needed to replay the scaling loop backward."""

    domain: str  # "standard" | "log"
    cost: np.ndarray
    epsilon: float
    mu: np.ndarray
    nu: np.ndarray
    kernel: np.ndarray | None = None
    iterations: list = field(default_factory=list)

    def __len__(self):
        return len(self.iterations)


def gibbs_kernel(cost, epsilon: float) -> np.ndarray:
    """exp(-C / epsilon), clamped below at KERNEL_FLOOR to stay positive."""
    cost = as_matrix(cost, "cost")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return np.maximum(np.exp(-cost / epsilon), KERNEL_FLOOR)


def sinkhorn(
    cost,
    marginals: Marginals,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
    log_domain: bool = False,
) -> tuple[TransportPlan, SinkhornTape]:
    """Solve entropic OT, returning the plan and the iteration tape.

    Runs at most `max_iters` scaling updates, stopping early once the worst
    row/column marginal error drops to `tol`.
    """
    cost = as_matrix(cost, "cost")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    mu, nu = marginals.mu, marginals.nu
    if cost.shape != (mu.size, nu.size):
        raise ValueError(
            f"cost shape {cost.shape} does not match marginals ({mu.size}, {nu.size})"
        )
    if log_domain:
        return _solve_log(cost, epsilon, mu, nu, max_iters, tol)
    kernel = gibbs_kernel(cost, epsilon)
    return _solve_standard(kernel, mu, nu, max_iters, tol, cost, epsilon)


def _solve_standard(kernel, mu, nu, max_iters, tol, cost, epsilon):
    tape = SinkhornTape("standard", cost, epsilon, mu, nu, kernel=kernel)
    v = np.ones_like(nu)
    kv = kernel @ v
    violation = np.inf
    for it in range(1, max_iters + 1):
        r_raw = kv
        r = np.maximum(r_raw, DENOM_FLOOR)
        u = mu / r
        s_raw = kernel.T @ u
        s = np.maximum(s_raw, DENOM_FLOOR)
        v = nu / s
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericError(f"non-finite scaling vector at iteration {it}")
        tape.iterations.append(_Iteration(
            u, v, r, s,
            r_clamped=(r_raw < DENOM_FLOOR) if np.any(r_raw < DENOM_FLOOR) else None,
            s_clamped=(s_raw < DENOM_FLOOR) if np.any(s_raw < DENOM_FLOOR) else None,
        ))
        kv = kernel @ v
        row_err = np.max(np.abs(u * kv - mu))
        col_err = np.max(np.abs(v * s_raw - nu))
        violation = max(row_err, col_err)
        if violation <= tol:
            break
    u, v = tape.iterations[-1].u, tape.iterations[-1].v
    plan = u[:, None] * kernel * v[None, :]
    return TransportPlan(plan, len(tape.iterations), float(violation)), tape


def _logsumexp(z, axis):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


def _solve_log(cost, epsilon, mu, nu, max_iters, tol):
    tape = SinkhornTape("log", cost, epsilon, mu, nu)
    lk = -cost / epsilon
    lmu, lnu = np.log(mu), np.log(nu)
    lv = np.zeros_like(nu)
    violation = np.inf
    for it in range(1, max_iters + 1):
        lu = lmu - _logsumexp(lk + lv[None, :], axis=1)
        lv = lnu - _logsumexp(lk + lu[:, None], axis=0)
        if not (np.all(np.isfinite(lu)) and np.all(np.isfinite(lv))):
            raise NumericError(f"non-finite log scaling at iteration {it}")
        tape.iterations.append(_LogIteration(lu, lv))
        plan = np.exp(lu[:, None] + lk + lv[None, :])
        violation = max(
            np.max(np.abs(plan.sum(axis=1) - mu)),
            np.max(np.abs(plan.sum(axis=0) - nu)),
        )
        if violation <= tol:
            break
    lu, lv = tape.iterations[-1]
    plan = np.exp(lu[:, None] + lk + lv[None, :])
    return TransportPlan(plan, len(tape.iterations), float(violation)), tape


class TransportCost(NamedTuple):
    linear: float  # <T, C>
    entropy: float  # H(T) = -sum T log T


def transport_cost(plan, cost) -> TransportCost:
    """Linear transport cost and entropy of a plan (0 log 0 taken as 0)."""
    t = plan.plan if isinstance(plan, TransportPlan) else as_matrix(plan, "plan")
    cost = as_matrix(cost, "cost")
    if t.shape != cost.shape:
        raise ValueError(f"plan shape {t.shape} does not match cost {cost.shape}")
    linear = float(np.sum(t * cost))
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(t > 0.0, np.log(np.maximum(t, KERNEL_FLOOR)), 0.0)
    entropy = float(-np.sum(t * logs))
    return TransportCost(linear, entropy)


def sinkhorn_vjp(tape: SinkhornTape, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * plan) w.r.t. cost, mu and nu.

    Replays the recorded scaling loop in reverse, iteration by iteration,
    so the result differentiates exactly the computation that produced the
    plan (including early exit and division floors).
    """
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != tape.cost.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match plan {tape.cost.shape}"
        )
    if not tape.iterations:
        raise ValueError("tape holds no iterations")
    if tape.domain == "standard":
        return _vjp_standard(tape, upstream)
    return _vjp_log(tape, upstream)


def _vjp_standard(tape, upstream):
    kernel = tape.kernel
    its = tape.iterations
    u_last, v_last = its[-1].u, its[-1].v

    # plan = diag(u) K diag(v): direct contributions.
    g_kernel = upstream * np.outer(u_last, v_last)
    g_u = (upstream * kernel) @ v_last
    g_v = (upstream * kernel).T @ u_last

    g_mu = np.zeros_like(tape.mu)
    g_nu = np.zeros_like(tape.nu)
    for i in range(len(its) - 1, -1, -1):
        u, v, r, s, r_clamped, s_clamped = its[i]
        v_prev = its[i - 1].v if i > 0 else np.ones_like(tape.nu)
        # v = nu / s
        g_nu += g_v / s
        g_s = -g_v * v / s
        if s_clamped is not None:
            g_s[s_clamped] = 0.0
        # s = K^T u
        g_u = g_u + kernel @ g_s
        g_kernel += np.outer(u, g_s)
        # u = mu / r
        g_mu += g_u / r
        g_r = -g_u * u / r
        if r_clamped is not None:
            g_r[r_clamped] = 0.0
        # r = K v_prev
        g_kernel += np.outer(g_r, v_prev)
        g_v = kernel.T @ g_r
        g_u = np.zeros_like(tape.mu)

    # K = exp(-C/eps), flat where the clamp engaged.
    g_cost = -g_kernel * kernel / tape.epsilon
    g_cost[(-tape.cost / tape.epsilon) < np.log(KERNEL_FLOOR)] = 0.0
    return g_cost, g_mu, g_nu


def _vjp_log(tape, upstream):
    lk = -tape.cost / tape.epsilon
    its = tape.iterations
    lu_last, lv_last = its[-1]
    plan = np.exp(lu_last[:, None] + lk + lv_last[None, :])

    weighted = upstream * plan
    g_lk = weighted.copy()
    g_lu = weighted.sum(axis=1)
    g_lv = weighted.sum(axis=0)

    g_lmu = np.zeros_like(tape.mu)
    g_lnu = np.zeros_like(tape.nu)
    for i in range(len(its) - 1, -1, -1):
        lu = its[i].lu
        lv_prev = its[i - 1].lv if i > 0 else np.zeros_like(tape.nu)
        # lv = lnu - logsumexp_rows(lk + lu)
        g_lnu += g_lv
        z = lk + lu[:, None]
        col_soft = np.exp(z - _logsumexp(z, axis=0)[None, :])
        spread = -col_soft * g_lv[None, :]
        g_lk += spread
        g_lu = g_lu + spread.sum(axis=1)
        # lu = lmu - logsumexp_cols(lk + lv_prev)
        g_lmu += g_lu
        z = lk + lv_prev[None, :]
        row_soft = np.exp(z - _logsumexp(z, axis=1)[:, None])
        spread = -row_soft * g_lu[:, None]
        g_lk += spread
        g_lv = spread.sum(axis=0)
        g_lu = np.zeros_like(tape.mu)

    return -g_lk / tape.epsilon, g_lmu / tape.mu, g_lnu / tape.nu


def sinkhorn_op(
    cost_t: Tensor,
    mu_t: Tensor,
    nu_t: Tensor,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
    log_domain: bool = False,
) -> tuple[Tensor, TransportPlan]:
    """Autodiff node wrapping the solver; backward runs the tape replay."""
    plan, tape = sinkhorn(
        cost_t.data, Marginals(mu_t.data, nu_t.data),
        epsilon=epsilon, max_iters=max_iters, tol=tol, log_domain=log_domain,
    )

    def vjp(g):
        return sinkhorn_vjp(tape, g)

    node = autodiff._node(plan.plan, (cost_t, mu_t, nu_t), vjp)
    return node, plan
