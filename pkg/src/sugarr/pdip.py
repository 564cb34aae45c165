"""Equality-plus-box-bound nonlinear program solver.

The first-order optimality conditions are assembled into one square
nonlinear system and solved with Newton's method, circuit-simulation style:

* stationarity        grad f(x) + J(x)^T lam + mu_hi - mu_lo = 0
* primal feasibility  g(x) = 0
* relaxed complementarity, upper   mu_hi * (x - ub) + eps = 0
* relaxed complementarity, lower  -mu_lo * (x - lb) + eps = 0

with mu > 0 and lb < x < ub maintained at every iterate. The relaxation
scalar eps is held fixed (no barrier schedule); each primal variable and
each bound dual is damped separately with a fraction-to-boundary rule so
iterates cannot oscillate across their limits (diode limiting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularKKTError(RuntimeError):
    def __init__(self, variable: str):
        super().__init__(f"singular KKT matrix (null pivot near variable {variable})")
        self.variable = variable


@dataclass
class SolverConfig:
    epsilon: float = 1e-6     # complementarity relaxation
    gamma_x: float = 0.95     # primal fraction-to-boundary damping
    gamma_mu: float = 0.95    # dual fraction-to-boundary damping
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if not (0.0 < self.gamma_x < 1.0 and 0.0 < self.gamma_mu < 1.0):
            raise ValueError("damping constants must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class OptProblem:
    """Declarative constrained problem over named, box-bounded variables."""

    names: list[str]
    lb: np.ndarray
    ub: np.ndarray
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], sp.spmatrix]
    hess_combo: Callable[[np.ndarray, np.ndarray], sp.spmatrix]  # sum_i lam_i * hess g_i
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    obj_hessian: Callable[[np.ndarray], sp.spmatrix]
    n_eq: int
    step_limits: np.ndarray | None = None

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.lb.shape != self.ub.shape or len(self.names) != self.lb.size:
            raise ValueError("inconsistent problem dimensions")
        both = np.isfinite(self.lb) & np.isfinite(self.ub)
        if np.any(self.lb[both] >= self.ub[both]):
            raise ValueError("requires lb < ub wherever both are finite")

    @property
    def n(self) -> int:
        return self.lb.size

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class PDIPState:
    """Point in the full primal-dual space; also used for Newton updates."""
    x: np.ndarray
    lam: np.ndarray
    mu_hi: np.ndarray  # one entry per finite upper bound
    mu_lo: np.ndarray  # one entry per finite lower bound


@dataclass
class IterationRecord:
    iteration: int
    kkt_residual: float
    complementarity_residual: float
    step_tau_min: float
    objective: float
    x: np.ndarray | None = None
    mu_lo: np.ndarray | None = None
    mu_hi: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"iter": self.iteration, "kkt_residual": self.kkt_residual,
                "complementarity_residual": self.complementarity_residual,
                "step_tau_min": self.step_tau_min, "objective": self.objective}


@dataclass
class OptSolution:
    x: np.ndarray
    lam: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    kkt_residual: float
    complementarity_residual: float
    converged: bool
    iterations: int
    objective: float
    diagnostics: str = ""


def _bound_selectors(problem: OptProblem) -> tuple[np.ndarray, np.ndarray]:
    return np.flatnonzero(np.isfinite(problem.lb)), np.flatnonzero(np.isfinite(problem.ub))


def pdip_residual(problem: OptProblem, state: PDIPState, config: SolverConfig) -> np.ndarray:
    """Stacked first-order-condition residual at a primal-dual point."""
    lo_idx, hi_idx = _bound_selectors(problem)
    x = state.x
    grad = problem.gradient(x) + problem.jacobian(x).T @ state.lam
    grad[hi_idx] += state.mu_hi
    grad[lo_idx] -= state.mu_lo
    comp_hi = state.mu_hi * (x[hi_idx] - problem.ub[hi_idx]) + config.epsilon
    comp_lo = -state.mu_lo * (x[lo_idx] - problem.lb[lo_idx]) + config.epsilon
    return np.concatenate([grad, problem.residual(x), comp_hi, comp_lo])


def build_kkt(problem: OptProblem, state: PDIPState,
              config: SolverConfig) -> tuple[sp.csr_matrix, np.ndarray]:
    """Newton linearization of the first-order conditions: (matrix, rhs).

    The state must be strictly interior with positive bound duals; the rhs is
    the negated residual so the system reads  K * dz = rhs.
    """
    lo_idx, hi_idx = _bound_selectors(problem)
    x = state.x
    if np.any(x[hi_idx] >= problem.ub[hi_idx]) or np.any(x[lo_idx] <= problem.lb[lo_idx]):
        raise ValueError("state is not strictly interior to its bounds")
    if np.any(state.mu_hi <= 0) or np.any(state.mu_lo <= 0):
        raise ValueError("bound duals must be positive")
    n, m = problem.n, problem.n_eq
    n_hi, n_lo = hi_idx.size, lo_idx.size
    jac = problem.jacobian(x).tocsr()
    hess = (problem.obj_hessian(x) + problem.hess_combo(x, state.lam)).tocsr()
    e_hi = sp.coo_matrix((np.ones(n_hi), (np.arange(n_hi), hi_idx)), shape=(n_hi, n)).tocsr()
    e_lo = sp.coo_matrix((np.ones(n_lo), (np.arange(n_lo), lo_idx)), shape=(n_lo, n)).tocsr()
    grid = [
        [hess, jac.T, e_hi.T, -e_lo.T],
        [jac, None, None, None],
        [sp.diags(state.mu_hi) @ e_hi, None,
         sp.diags(x[hi_idx] - problem.ub[hi_idx]), None],
        [-sp.diags(state.mu_lo) @ e_lo, None, None,
         -sp.diags(x[lo_idx] - problem.lb[lo_idx])],
    ]
    sizes = [n, m, n_hi, n_lo]
    keep = [i for i, s in enumerate(sizes) if s > 0]
    k = sp.bmat([[grid[r][c] for c in keep] for r in keep], format="csr")
    rhs = -pdip_residual(problem, state, config)
    return k, rhs


def diode_step_lengths(state: PDIPState, update: PDIPState, config: SolverConfig,
                       problem: OptProblem) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable and per-dual damping factors for one Newton update.

    Primal variables moving toward a finite bound are cut back so they retain
    a (1 - gamma_x) fraction of the current slack; bound duals heading
    negative keep a (1 - gamma_mu) fraction of their value. Every entry is
    limited separately.
    """
    lo_idx, hi_idx = _bound_selectors(problem)
    x, dx = state.x, update.x
    tau_x = np.ones_like(x)
    up = hi_idx[dx[hi_idx] > 0]
    if up.size:
        tau_x[up] = np.minimum(1.0, config.gamma_x * (problem.ub[up] - x[up]) / dx[up])
    down = lo_idx[dx[lo_idx] < 0]
    if down.size:
        tau_x[down] = np.minimum(tau_x[down],
                                 config.gamma_x * (problem.lb[down] - x[down]) / dx[down])
    if problem.step_limits is not None:
        mask = np.abs(dx) > problem.step_limits
        tau_x[mask] = np.minimum(tau_x[mask], problem.step_limits[mask] / np.abs(dx[mask]))
    mu = np.concatenate([state.mu_hi, state.mu_lo])
    dmu = np.concatenate([update.mu_hi, update.mu_lo])
    tau_mu = np.ones_like(mu)
    neg = dmu < 0
    tau_mu[neg] = np.minimum(1.0, -config.gamma_mu * mu[neg] / dmu[neg])
    return tau_x, tau_mu


def _initial_state(problem: OptProblem, init: np.ndarray, config: SolverConfig) -> PDIPState:
    lo_idx, hi_idx = _bound_selectors(problem)
    x = np.asarray(init, dtype=float).copy()
    span = np.where(np.isfinite(problem.ub) & np.isfinite(problem.lb),
                    problem.ub - problem.lb, 1.0)
    margin = 1e-3 * span
    x[hi_idx] = np.minimum(x[hi_idx], problem.ub[hi_idx] - margin[hi_idx])
    x[lo_idx] = np.maximum(x[lo_idx], problem.lb[lo_idx] + margin[lo_idx])
    mu_hi = np.maximum(config.epsilon / (problem.ub[hi_idx] - x[hi_idx]), 1e-3)
    mu_lo = np.maximum(config.epsilon / (x[lo_idx] - problem.lb[lo_idx]), 1e-3)
    return PDIPState(x=x, lam=np.zeros(problem.n_eq), mu_hi=mu_hi, mu_lo=mu_lo)


def _split(problem: OptProblem, dz: np.ndarray) -> PDIPState:
    lo_idx, hi_idx = _bound_selectors(problem)
    n, m = problem.n, problem.n_eq
    n_hi = hi_idx.size
    return PDIPState(x=dz[:n], lam=dz[n:n + m],
                     mu_hi=dz[n + m:n + m + n_hi], mu_lo=dz[n + m + n_hi:])


def _residual_norms(problem: OptProblem, state: PDIPState,
                    config: SolverConfig) -> tuple[float, float]:
    f = pdip_residual(problem, state, config)
    n, m = problem.n, problem.n_eq
    kkt = float(np.max(np.abs(f[:n + m]))) if n + m else 0.0
    comp = float(np.max(np.abs(f[n + m:]))) if f.size > n + m else 0.0
    return kkt, comp


def _name_null_pivot(problem: OptProblem, k: sp.csr_matrix) -> str:
    mags = np.abs(k).sum(axis=1).A1 + np.abs(k).sum(axis=0).A1
    worst = int(np.argmin(mags))
    if worst < problem.n:
        return problem.names[worst]
    if worst < problem.n + problem.n_eq:
        return f"equality dual {worst - problem.n}"
    return f"bound dual {worst - problem.n - problem.n_eq}"


def solve(problem: OptProblem, init: np.ndarray,
          config: SolverConfig = SolverConfig(),
          callback: Callable[[IterationRecord], None] | None = None) -> OptSolution:
    """Run the interior-point Newton loop from a (clipped-to-interior) start."""
    state = _initial_state(problem, init, config)
    best: tuple[float, PDIPState] | None = None
    kkt = comp = float("inf")
    for it in range(1, config.max_iter + 1):
        kkt, comp = _residual_norms(problem, state, config)
        score = max(kkt, comp)
        if best is None or score < best[0]:
            best = (score, PDIPState(state.x.copy(), state.lam.copy(),
                                     state.mu_hi.copy(), state.mu_lo.copy()))
        if kkt <= config.tol and comp <= config.tol:
            return OptSolution(x=state.x, lam=state.lam, mu_lo=state.mu_lo,
                               mu_hi=state.mu_hi, kkt_residual=kkt,
                               complementarity_residual=comp, converged=True,
                               iterations=it - 1, objective=problem.objective(state.x))
        k, rhs = build_kkt(problem, state, config)
        try:
            lu = spla.splu(k.tocsc())
            dz = lu.solve(rhs)
            # one step of iterative refinement
            dz += lu.solve(rhs - k @ dz)
        except RuntimeError as exc:
            raise SingularKKTError(_name_null_pivot(problem, k)) from exc
        update = _split(problem, dz)
        tau_x, tau_mu = diode_step_lengths(state, update, config, problem)
        n_hi = state.mu_hi.size
        state.x += tau_x * update.x
        state.lam += update.lam
        state.mu_hi += tau_mu[:n_hi] * update.mu_hi
        state.mu_lo += tau_mu[n_hi:] * update.mu_lo
        if callback is not None:
            taus = np.concatenate([tau_x, tau_mu]) if tau_mu.size else tau_x
            callback(IterationRecord(
                iteration=it, kkt_residual=kkt, complementarity_residual=comp,
                step_tau_min=float(taus.min()) if taus.size else 1.0,
                objective=problem.objective(state.x),
                x=state.x.copy(), mu_lo=state.mu_lo.copy(), mu_hi=state.mu_hi.copy()))
    _, bstate = best
    kkt, comp = _residual_norms(problem, bstate, config)
    return OptSolution(x=bstate.x, lam=bstate.lam, mu_lo=bstate.mu_lo, mu_hi=bstate.mu_hi,
                       kkt_residual=kkt, complementarity_residual=comp, converged=False,
                       iterations=config.max_iter, objective=problem.objective(bstate.x),
                       diagnostics=(f"iteration cap: kkt residual {kkt:.3e}, "
                                    f"complementarity residual {comp:.3e}"))


def check_kkt(problem: OptProblem, solution: OptSolution, tol: float = 1e-6) -> dict:
    """Audit a solution against the first-order conditions; pure reporting."""
    lo_idx, hi_idx = _bound_selectors(problem)
    x = solution.x
    grad = problem.gradient(x) + problem.jacobian(x).T @ solution.lam
    grad[hi_idx] += solution.mu_hi
    grad[lo_idx] -= solution.mu_lo
    g = problem.residual(x)
    # fixed-relaxation complementarity: mu * slack should sit at -eps exactly,
    # so the audit reports |mu * (x - bound) + eps|
    eps = getattr(solution, "epsilon", 1e-6)
    comp_hi = solution.mu_hi * (x[hi_idx] - problem.ub[hi_idx]) + eps
    comp_lo = -solution.mu_lo * (x[lo_idx] - problem.lb[lo_idx]) + eps
    comp = np.concatenate([comp_hi, comp_lo]) if hi_idx.size + lo_idx.size else np.zeros(0)
    mu_ok = bool(np.all(solution.mu_hi > 0) and np.all(solution.mu_lo > 0))
    interior = bool(np.all(x[hi_idx] < problem.ub[hi_idx]) and
                    np.all(x[lo_idx] > problem.lb[lo_idx]))
    return {
        "stationarity": float(np.max(np.abs(grad))) if grad.size else 0.0,
        "feasibility": float(np.max(np.abs(g))) if g.size else 0.0,
        "complementarity": float(np.max(np.abs(comp))) if comp.size else 0.0,
        "mu_positive": mu_ok,
        "strict_interior": interior,
        "within_tol": bool(
            (grad.size == 0 or np.max(np.abs(grad)) <= tol)
            and (g.size == 0 or np.max(np.abs(g)) <= tol)
            and mu_ok and interior),
    }


# ---------------------------------------------------------------------------
# quadratic-form problem builder
# ---------------------------------------------------------------------------

class QuadraticProblemBuilder:
    """Assembles problems whose equalities are (at most) quadratic forms.

    Each equality row is  const + sum(c * x_i) + sum(c * x_i * x_j) = 0, which
    covers network current balance, voltage-square definitions and bilinear
    power/current couplings with exact constant Hessians.
    """

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.init: list[float] = []
        self.steps: list[float] = []
        self.rows_const: list[float] = []
        self.rows_lin: list[dict[int, float]] = []
        self.rows_quad: list[list[tuple[int, int, float]]] = []
        self.obj_w: dict[int, float] = {}
        self.obj_c: dict[int, float] = {}

    def add_variable(self, name: str, lb: float = -np.inf, ub: float = np.inf,
                     init: float = 0.0, step_limit: float = np.inf) -> int:
        if name in self.names:
            raise ValueError(f"duplicate variable {name}")
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.init.append(init)
        self.steps.append(step_limit)
        return len(self.names) - 1

    def add_equality(self, const: float = 0.0, lin: dict[int, float] | None = None,
                     quad: list[tuple[int, int, float]] | None = None) -> int:
        self.rows_const.append(const)
        self.rows_lin.append(dict(lin or {}))
        self.rows_quad.append(list(quad or []))
        return len(self.rows_const) - 1

    def add_objective_term(self, var: int, weight: float, center: float = 0.0):
        """Accumulate weight * (x_var - center)^2 into the objective."""
        if var in self.obj_w:
            raise ValueError(f"objective already carries variable {self.names[var]}")
        self.obj_w[var] = weight
        self.obj_c[var] = center

    def build(self) -> tuple[OptProblem, np.ndarray]:
        n = len(self.names)
        m = len(self.rows_const)
        const = np.array(self.rows_const, dtype=float)
        lin_rows, lin_cols, lin_vals = [], [], []
        for r, terms in enumerate(self.rows_lin):
            for i, c in terms.items():
                lin_rows.append(r)
                lin_cols.append(i)
                lin_vals.append(c)
        lin = sp.coo_matrix((lin_vals, (lin_rows, lin_cols)), shape=(m, n)).tocsr()
        q_row, q_i, q_j, q_c = [], [], [], []
        for r, terms in enumerate(self.rows_quad):
            for i, j, c in terms:
                q_row.append(r)
                q_i.append(i)
                q_j.append(j)
                q_c.append(c)
        q_row = np.array(q_row, dtype=int)
        q_i = np.array(q_i, dtype=int)
        q_j = np.array(q_j, dtype=int)
        q_c = np.array(q_c, dtype=float)
        w = np.zeros(n)
        cen = np.zeros(n)
        for i, wv in self.obj_w.items():
            w[i] = wv
            cen[i] = self.obj_c[i]

        def residual(x: np.ndarray) -> np.ndarray:
            r = const + lin @ x
            if q_row.size:
                np.add.at(r, q_row, q_c * x[q_i] * x[q_j])
            return r

        def jacobian(x: np.ndarray) -> sp.spmatrix:
            if not q_row.size:
                return lin
            rows = np.concatenate([q_row, q_row])
            cols = np.concatenate([q_i, q_j])
            vals = np.concatenate([q_c * x[q_j], q_c * x[q_i]])
            return lin + sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()

        def hess_combo(x: np.ndarray, lam: np.ndarray) -> sp.spmatrix:
            if not q_row.size:
                return sp.csr_matrix((n, n))
            lamc = lam[q_row] * q_c
            rows = np.concatenate([q_i, q_j])
            cols = np.concatenate([q_j, q_i])
            vals = np.concatenate([lamc, lamc])
            return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

        def objective(x: np.ndarray) -> float:
            d = x - cen
            return float(np.sum(w * d * d))

        def gradient(x: np.ndarray) -> np.ndarray:
            return 2.0 * w * (x - cen)

        obj_h = sp.diags(2.0 * w).tocsr()

        problem = OptProblem(
            names=list(self.names), lb=np.array(self.lb), ub=np.array(self.ub),
            residual=residual, jacobian=jacobian, hess_combo=hess_combo,
            objective=objective, gradient=gradient, obj_hessian=lambda x: obj_h,
            n_eq=m, step_limits=np.array(self.steps))
        return problem, np.array(self.init, dtype=float)
