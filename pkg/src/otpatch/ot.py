"""Small dense optimal-transport problems with uniform marginals.

Every solver works on batches of ``m x m`` cost matrices with shape
``(B, m, m)``; the single-instance functions are thin wrappers. Reductions
are per-matrix (batched matmul, or sums along fixed axes), so a batch
entry's result does not depend on which other entries share its batch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

KINDS = ("exact_sorted", "sinkhorn", "ipot")
DEFAULT_OUTER = {"exact_sorted": 1, "sinkhorn": 1000, "ipot": 100}
LOG_DOMAIN_RATIO = 1.0 / 50.0


class NumericalUnderflowError(FloatingPointError):
    """The Gibbs kernel underflowed; raise epsilon or enable the log domain."""


@dataclass(frozen=True)
class SolverConfig:
    """Solver selection and iteration budget.

    ``epsilon`` fixes the regularization; when it is None the per-instance
    value ``epsilon_ratio * max(C)`` is used. ``outer_iters=None`` picks 100
    for IPOT and 1000 for Sinkhorn. ``log_domain=None`` switches to
    log-space scaling whenever epsilon < max(C)/50.
    """

    kind: str = "ipot"
    outer_iters: int | None = None
    inner_iters: int = 10
    epsilon: float | None = None
    epsilon_ratio: float = 0.1
    tol_marginal: float = 1e-5
    log_domain: bool | None = None
    sinkhorn_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; expected one of {KINDS}")
        if self.outer_iters is not None and self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.epsilon_ratio > 0:
            raise ValueError("epsilon_ratio must be > 0")

    @property
    def iterations(self) -> int:
        return self.outer_iters if self.outer_iters is not None else DEFAULT_OUTER[self.kind]

    def resolve_epsilon(self, cmax: np.ndarray) -> np.ndarray:
        """Per-instance epsilon for cost maxima ``cmax``."""
        cmax = np.asarray(cmax, dtype=np.float64)
        if self.epsilon is not None:
            return np.full_like(cmax, self.epsilon)
        eps = self.epsilon_ratio * cmax
        # all-zero cost: every plan is optimal, any positive epsilon works
        return np.where(eps > 0, eps, 1.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "outer_iters": self.iterations,
            "inner_iters": self.inner_iters,
            "epsilon": self.epsilon,
            "epsilon_ratio": self.epsilon_ratio,
            "tol_marginal": self.tol_marginal,
            "log_domain": self.log_domain,
        }

    def with_kind(self, kind: str) -> "SolverConfig":
        return replace(self, kind=kind)


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    p: int = 1

    @property
    def m(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two uniform distributions on ``m`` points.

    ``pre_projection_residual`` is the largest row/column marginal error of
    the raw iterate before the final feasibility projection (0 for exact
    plans).
    """

    matrix: np.ndarray
    pre_projection_residual: float = 0.0

    @property
    def m(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def row_residual(self) -> float:
        return float(np.max(np.abs(self.matrix.sum(axis=1) - 1.0 / self.m)))

    @property
    def col_residual(self) -> float:
        return float(np.max(np.abs(self.matrix.sum(axis=0) - 1.0 / self.m)))

    @property
    def mass(self) -> float:
        return float(self.matrix.sum())

    def is_feasible(self, tol: float = 1e-5) -> bool:
        return (
            bool(np.all(self.matrix >= 0))
            and self.row_residual <= tol
            and self.col_residual <= tol
        )


def _check_pair(x_hat, x) -> tuple[np.ndarray, np.ndarray]:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"length mismatch: {x_hat.shape} vs {x.shape}")
    if x_hat.shape[-1] < 1:
        raise ValueError("patches must contain at least one value")
    if not (np.all(np.isfinite(x_hat)) and np.all(np.isfinite(x))):
        raise ValueError("patch values must be finite")
    return x_hat, x


def _check_p(p) -> int:
    if p not in (1, 2):
        raise ValueError(f"exponent p must be 1 or 2, got {p}")
    return int(p)


def pairwise_cost(x_hat: np.ndarray, x: np.ndarray, p: int) -> np.ndarray:
    """Batched ``|x_hat_i - x_j|^p`` with shape ``(..., m, m)``."""
    d = np.abs(x_hat[..., :, None] - x[..., None, :])
    return d if p == 1 else d**p


def build_cost(x_hat, x, p: int = 1) -> CostMatrix:
    x_hat, x = _check_pair(x_hat, x)
    p = _check_p(p)
    if x_hat.ndim != 1:
        raise ValueError("build_cost expects 1-D patches")
    return CostMatrix(pairwise_cost(x_hat, x, p), p)


# --------------------------------------------------------------------------
# Exact solver on the line
# --------------------------------------------------------------------------


def exact_ot_1d(x_hat, x, p: int = 1) -> tuple[float, TransportPlan]:
    """Monotone (sorted) matching, optimal on the line for convex costs."""
    x_hat, x = _check_pair(x_hat, x)
    p = _check_p(p)
    if x_hat.ndim != 1:
        raise ValueError("exact_ot_1d expects 1-D patches")
    m = x_hat.size
    oh = np.argsort(x_hat, kind="stable")
    ox = np.argsort(x, kind="stable")
    w = float(np.mean(np.abs(x_hat[oh] - x[ox]) ** p))
    plan = np.zeros((m, m))
    plan[oh, ox] = 1.0 / m
    return w, TransportPlan(plan)


def _exact_batch(x_hat: np.ndarray, x: np.ndarray, p: int, want_grad: bool):
    m = x_hat.shape[-1]
    oh = np.argsort(x_hat, axis=-1, kind="stable")
    xs = np.sort(x, axis=-1)
    hs = np.take_along_axis(x_hat, oh, axis=-1)
    w = np.mean(np.abs(hs - xs) ** p, axis=-1)
    if not want_grad:
        return w, None
    matched = np.empty_like(xs)
    np.put_along_axis(matched, oh, xs, axis=-1)
    d = x_hat - matched
    g = np.sign(d) if p == 1 else 2.0 * d
    return w, g / m


# --------------------------------------------------------------------------
# Entropic solvers
# --------------------------------------------------------------------------


def round_to_feasible(plan: np.ndarray) -> np.ndarray:
    """Project a nonnegative ``(..., m, m)`` plan onto the uniform-marginal polytope.

    Rows are scaled down to at most 1/m, then columns, and the remaining
    mass deficit is restored with a rank-one correction. The output meets
    both marginals up to floating-point rounding.
    """
    plan = np.array(plan, dtype=np.float64)
    m = plan.shape[-1]
    r = 1.0 / m
    rows = plan.sum(axis=-1)
    scale = np.minimum(np.divide(r, rows, out=np.ones_like(rows), where=rows > 0), 1.0)
    plan *= scale[..., :, None]
    cols = plan.sum(axis=-2)
    scale = np.minimum(np.divide(r, cols, out=np.ones_like(cols), where=cols > 0), 1.0)
    plan *= scale[..., None, :]
    err_r = np.maximum(r - plan.sum(axis=-1), 0.0)
    err_c = np.maximum(r - plan.sum(axis=-2), 0.0)
    deficit = err_r.sum(axis=-1)
    coef = np.divide(1.0, deficit, out=np.zeros_like(deficit), where=deficit > 0)
    plan += err_r[..., :, None] * err_c[..., None, :] * coef[..., None, None]
    return plan


def _marginal_residual(plan: np.ndarray) -> np.ndarray:
    m = plan.shape[-1]
    rows = np.abs(plan.sum(axis=-1) - 1.0 / m).max(axis=-1)
    cols = np.abs(plan.sum(axis=-2) - 1.0 / m).max(axis=-1)
    return np.maximum(rows, cols)


def _rowdot(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (K @ v[:, :, None])[:, :, 0]


def _coldot(K: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (u[:, None, :] @ K)[:, 0, :]


def _gibbs_kernel(C: np.ndarray, eps: np.ndarray) -> np.ndarray:
    with np.errstate(under="ignore"):
        K = np.exp(-C / eps[:, None, None])
    if np.any(K.max(axis=-1) == 0) or np.any(K.max(axis=-2) == 0):
        raise NumericalUnderflowError(
            "Gibbs kernel underflowed to an all-zero row or column; "
            "increase epsilon or use the log domain"
        )
    return K


def _sinkhorn_plain(C, eps, iters, tol):
    B, m, _ = C.shape
    mu = 1.0 / m
    K = _gibbs_kernel(C, eps)
    u = np.ones((B, m))
    v = np.ones((B, m))
    # convergence is tracked per problem so a result never depends on its batch
    active = np.ones(B, dtype=bool)
    for it in range(iters):
        idx = np.flatnonzero(active)
        Ka = K[idx]
        u[idx] = mu / _rowdot(Ka, v[idx])
        v[idx] = mu / _coldot(Ka, u[idx])
        if tol > 0 and it % 10 == 9:
            rows = u[idx] * _rowdot(Ka, v[idx])
            active[idx[np.max(np.abs(rows - mu), axis=-1) < tol]] = False
            if not active.any():
                break
    plan = u[:, :, None] * K * v[:, None, :]
    if not np.all(np.isfinite(plan)):
        raise NumericalUnderflowError("Sinkhorn scaling produced non-finite values")
    return plan


def _sinkhorn_log(C, eps, iters, tol, absorb_at=1e3):
    """Log-stabilized Sinkhorn.

    Dual potentials ``f, g`` live in log space and the scaling sweeps run on
    the re-centred kernel ``exp((f + g - C) / eps)``; whenever a scaling
    factor leaves ``[1/absorb_at, absorb_at]`` it is folded into the
    potentials and the kernel is rebuilt.
    """
    B, m, _ = C.shape
    mu = 1.0 / m
    e = eps[:, None, None]
    # c-transform start: every row and column has a kernel entry equal to 1
    f = C.min(axis=-1)
    g = (C - f[:, :, None]).min(axis=-2)

    def kernel(idx):
        with np.errstate(under="ignore"):
            return np.exp((f[idx, :, None] + g[idx, None, :] - C[idx]) / e[idx])

    K = kernel(slice(None))
    u = np.ones((B, m))
    v = np.ones((B, m))
    active = np.ones(B, dtype=bool)
    for it in range(iters):
        idx = np.flatnonzero(active)
        Ka = K[idx]
        ua = mu / _rowdot(Ka, v[idx])
        va = mu / _coldot(Ka, ua)
        if not (np.all(np.isfinite(ua)) and np.all(np.isfinite(va))):
            raise NumericalUnderflowError("stabilized Sinkhorn produced non-finite scalings")
        u[idx], v[idx] = ua, va
        big = np.maximum(np.maximum(ua.max(-1), va.max(-1)), np.maximum(1.0 / ua.min(-1), 1.0 / va.min(-1)))
        hot = big > absorb_at
        if hot.any():
            h = idx[hot]
            f[h] += eps[h, None] * np.log(u[h])
            g[h] += eps[h, None] * np.log(v[h])
            K[h] = kernel(h)
            u[h] = 1.0
            v[h] = 1.0
        if tol > 0 and it % 10 == 9:
            cold = idx[~hot]
            rows = u[cold] * _rowdot(K[cold], v[cold])
            active[cold[np.max(np.abs(rows - mu), axis=-1) < tol]] = False
            if not active.any():
                break
    return u[:, :, None] * K * v[:, None, :]


def _ipot_plain(C, eps, outer, inner):
    B, m, _ = C.shape
    mu = 1.0 / m
    G = _gibbs_kernel(C, eps)
    plan = np.ones((B, m, m))
    b = np.ones((B, m))
    with np.errstate(under="ignore"):
        for _ in range(outer):
            Q = G * plan
            for _ in range(inner):
                a = mu / _rowdot(Q, b)
                b = mu / _coldot(Q, a)
            plan = a[:, :, None] * Q * b[:, None, :]
    if not np.all(np.isfinite(plan)):
        raise NumericalUnderflowError("IPOT scaling produced non-finite values")
    return plan


def _ipot_log(C, eps, outer, inner):
    B, m, _ = C.shape
    log_mu = -np.log(m)
    log_g = -C / eps[:, None, None]
    log_plan = np.zeros((B, m, m))
    lb = np.zeros((B, m))
    for _ in range(outer):
        log_q = log_g + log_plan
        for _ in range(inner):
            la = log_mu - logsumexp(log_q + lb[:, None, :], axis=-1)
            lb = log_mu - logsumexp(log_q + la[:, :, None], axis=-2)
        log_plan = la[:, :, None] + log_q + lb[:, None, :]
    with np.errstate(under="ignore"):
        return np.exp(log_plan)


def _use_log(cfg: SolverConfig, eps: np.ndarray, cmax: np.ndarray) -> np.ndarray:
    if cfg.log_domain is not None:
        return np.full(eps.shape, bool(cfg.log_domain))
    return eps < LOG_DOMAIN_RATIO * cmax


def _entropic_batch(C: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run the configured entropic solver; returns (projected plans, raw residuals)."""
    cmax = C.max(axis=(-2, -1))
    eps = cfg.resolve_epsilon(cmax)
    use_log = _use_log(cfg, eps, cmax)
    raw = np.empty_like(C)
    m = C.shape[-1]
    # a zero diagonal is already an optimal plan (C >= 0), the proximal limit
    exact = np.zeros(len(C), dtype=bool)
    if cfg.kind == "ipot":
        exact = ~np.any(np.diagonal(C, axis1=-2, axis2=-1), axis=-1)
        raw[exact] = np.eye(m) / m
    for flag in (False, True):
        sel = np.flatnonzero((use_log == flag) & ~exact)
        if sel.size == 0:
            continue
        Cs, es = C[sel], eps[sel]
        if cfg.kind == "sinkhorn":
            fn = _sinkhorn_log if flag else _sinkhorn_plain
            raw[sel] = fn(Cs, es, cfg.iterations, cfg.sinkhorn_tol)
        else:
            fn = _ipot_log if flag else _ipot_plain
            raw[sel] = fn(Cs, es, cfg.iterations, cfg.inner_iters)
    return round_to_feasible(raw), _marginal_residual(raw)


def _as_cost(C) -> np.ndarray:
    values = C.values if isinstance(C, CostMatrix) else C
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("cost entries must be finite and nonnegative")
    return values


def _solve_single(C, cfg: SolverConfig, kind: str) -> tuple[TransportPlan, float]:
    if cfg.kind != kind:
        cfg = cfg.with_kind(kind)
    values = _as_cost(C)
    plans, resid = _entropic_batch(values[None], cfg)
    plan = plans[0]
    return TransportPlan(plan, float(resid[0])), float(np.sum(values * plan))


def sinkhorn(C, cfg: SolverConfig | None = None) -> tuple[TransportPlan, float]:
    """Entropic OT by alternating row/column scaling; returns (plan, <C, T>)."""
    return _solve_single(C, cfg or SolverConfig(kind="sinkhorn"), "sinkhorn")


def ipot(C, cfg: SolverConfig | None = None) -> tuple[TransportPlan, float]:
    """Inexact proximal point OT.

    Each outer step re-centres the Gibbs kernel on the current plan,
    ``Q = exp(-C/eps) * T``, and runs ``inner_iters`` scaling sweeps against
    it with warm-started column scalings; the fixed point is the
    unregularized optimum.
    """
    return _solve_single(C, cfg or SolverConfig(kind="ipot"), "ipot")


def solve_batch(
    x_hat: np.ndarray,
    x: np.ndarray,
    cfg: SolverConfig,
    p: int = 1,
    want_grad: bool = False,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Solve ``B`` independent patch problems.

    Parameters
    ----------
    x_hat, x : ndarray, shape (B, m)
        Paired patch values.
    want_grad : bool
        Also return d<C(x_hat), T>/d x_hat with the plan held fixed.
    threads : int
        Split the batch into this many contiguous chunks solved concurrently.

    Returns
    -------
    w : ndarray, shape (B,)
        Transport cost per patch.
    grad : ndarray, shape (B, m) or None
    """
    x_hat, x = _check_pair(x_hat, x)
    p = _check_p(p)
    if x_hat.ndim != 2:
        raise ValueError("solve_batch expects (B, m) arrays")
    B = x_hat.shape[0]

    def work(sl: slice):
        xh, xx = x_hat[sl], x[sl]
        if cfg.kind == "exact_sorted":
            return _exact_batch(xh, xx, p, want_grad)
        C = pairwise_cost(xh, xx, p)
        plans, _ = _entropic_batch(C, cfg)
        w = (C * plans).sum(axis=(-2, -1))
        return w, (ot_gradient(xh, xx, plans, p) if want_grad else None)

    threads = max(1, min(int(threads), B))
    if threads == 1:
        return work(slice(0, B))
    bounds = np.linspace(0, B, threads + 1).astype(int)
    chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, chunks))
    w = np.concatenate([pt[0] for pt in parts])
    grad = np.concatenate([pt[1] for pt in parts]) if want_grad else None
    return w, grad


def ot_gradient(x_hat, x, T, p: int = 1) -> np.ndarray:
    """Gradient of ``<C(x_hat), T>`` in ``x_hat`` with ``T`` held fixed.

    Exact ties ``x_hat_i == x_j`` contribute 0 for ``p=1``. Accepts batched
    inputs ``(..., m)`` with plans ``(..., m, m)``.
    """
    x_hat, x = _check_pair(x_hat, x)
    p = _check_p(p)
    plan = T.matrix if isinstance(T, TransportPlan) else np.asarray(T, dtype=np.float64)
    m = x_hat.shape[-1]
    if plan.shape != x_hat.shape + (m,):
        raise ValueError(f"plan shape {plan.shape} does not match patches {x_hat.shape}")
    d = x_hat[..., :, None] - x[..., None, :]
    term = np.sign(d) if p == 1 else 2.0 * d
    return (plan * term).sum(axis=-1)


def gaussian_w2_closed_form(mu: float, sigma: float, mu_hat: float, sigma_hat: float) -> float:
    """Squared 2-Wasserstein distance between two 1-D Gaussians."""
    if sigma < 0 or sigma_hat < 0:
        raise ValueError("standard deviations must be nonnegative")
    return (mu - mu_hat) ** 2 + (sigma - sigma_hat) ** 2
