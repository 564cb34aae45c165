"""Steady-state solvers for the energized subnetwork.

Two modes share one Newton core:

* classical power flow: the reference generator absorbs the active and
  reactive imbalance and the frequency state is frozen at nominal;
* governor power flow: a single frequency deviation state couples every
  generator through its droop response, the reference included, so the
  machine outputs stay physical and the imbalance shows up as a frequency
  shift instead of a fictitious slack injection.

Generator active-power limits act on the droop response through a smooth
double-saturation blend, so no outer limit-enforcement loop is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .bigload import big_current
from .netmodel import Network, Generator, assemble_ybus, islands

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 120
V_STEP_LIMIT = 0.1    # per-iteration cap on rectangular voltage updates
F_STEP_LIMIT = 0.5    # per-iteration cap on the frequency state, Hz
PQ_STEP_LIMIT = 1.0   # per-iteration cap on the reference machine's P/Q states


class PowerFlowError(RuntimeError):
    """Raised when a steady state cannot be produced for the energized net."""


class NoReferenceError(PowerFlowError):
    """An energized island carries no reference machine to anchor it."""


@dataclass
class SmoothLimitParams:
    """Blending scale for the saturating droop curve (flat / linear / flat)."""
    sharpness: float = 0.01

    def __post_init__(self):
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


@dataclass
class PFSolution:
    v_real: dict[int, float]
    v_imag: dict[int, float]
    delta_f: float
    p_out: dict[int, float]
    q_out: dict[int, float]
    converged: bool
    iterations: int
    max_kcl_residual: float
    mode: str = "classical"

    def vmag(self, bus: int) -> float:
        return float(np.hypot(self.v_real[bus], self.v_imag[bus]))

    def v_extremes(self) -> tuple[float, float]:
        mags = [self.vmag(b) for b in self.v_real]
        return max(mags), min(mags)


def _softplus(z):
    return np.logaddexp(0.0, z)


def droop_response(gen: Generator, delta_f: float,
                   params: SmoothLimitParams = SmoothLimitParams()) -> float:
    """Frequency-driven change in generator output, smoothly held inside P limits.

    The raw proportional response -droop_gain * delta_f is blended against the
    headroom to p_max and the floor to p_min so the curve is C1 everywhere.
    """
    if gen.droop_gain == 0.0:
        return 0.0
    lo = gen.p_min - gen.p_set
    hi = gen.p_max - gen.p_set
    span = gen.p_max - gen.p_min
    mid = -gen.droop_gain * delta_f
    if span <= 0:
        return float(np.clip(mid, min(lo, hi), max(lo, hi)))
    s = params.sharpness * span
    return float(lo + s * _softplus((mid - lo) / s) - s * _softplus((mid - hi) / s))


def droop_response_deriv(gen: Generator, delta_f: float,
                         params: SmoothLimitParams = SmoothLimitParams()) -> float:
    """d(droop_response)/d(delta_f)."""
    if gen.droop_gain == 0.0:
        return 0.0
    lo = gen.p_min - gen.p_set
    hi = gen.p_max - gen.p_set
    span = gen.p_max - gen.p_min
    if span <= 0:
        return 0.0
    s = params.sharpness * span
    mid = -gen.droop_gain * delta_f
    gate = expit((mid - lo) / s) - expit((mid - hi) / s)
    return float(-gen.droop_gain * gate)


# ---------------------------------------------------------------------------
# Newton core
# ---------------------------------------------------------------------------

def _reference_island(net: Network) -> list[int]:
    ref = net.reference_generator()
    comps = islands(net)
    ref_comp = None
    for comp in comps:
        if ref.bus in comp:
            ref_comp = comp
        else:
            raise NoReferenceError(f"no reference in island {comp}")
    if ref_comp is None:
        raise NoReferenceError("reference bus is not energized")
    return ref_comp


class _PFSystem:
    """Rectangular current-balance equations over one energized island.

    Unknown layout: [V_R(0..n), V_I(0..n), extra...] where extras are
    (P_ref, Q_ref) in classical mode and (delta_f, Q_ref) in governor mode.
    Rows: KCL_R per bus, KCL_I per bus, then the two reference-bus voltage pins.
    """

    def __init__(self, net: Network, mode: str, smooth: SmoothLimitParams,
                 load_scale: float = 1.0, gen_scale: float = 1.0):
        self.net = net
        self.mode = mode
        self.smooth = smooth
        self.load_scale = load_scale
        self.gen_scale = gen_scale
        self.q_override: dict[int, float] | None = None
        self.ref = net.reference_generator()
        comp = _reference_island(net)
        self.bus_ids = comp
        self.idx = {b: i for i, b in enumerate(comp)}
        y, full_idx = assemble_ybus(net)
        order = [full_idx[b] for b in comp]
        self.Y = y.tocsr()[order, :][:, order].toarray()
        self.G = self.Y.real
        self.B = self.Y.imag
        self.n = len(comp)
        self.gens = [g for g in net.energized_generators() if g.bus in self.idx]
        self.loads = [d for d in net.energized_loads() if d.bus in self.idx]

    def initial_state(self) -> np.ndarray:
        n = self.n
        x = np.zeros(2 * n + 2)
        x[:n] = 1.0
        x[self.idx[self.ref.bus]] = self.ref.v_set
        if self.mode == "classical":
            x[2 * n] = self.ref.p_set
        x[2 * n + 1] = self.ref.q_set
        return x

    def gen_pq(self, gen: Generator, x: np.ndarray) -> tuple[float, float]:
        n = self.n
        s = self.gen_scale
        if self.mode == "classical":
            p = x[2 * n] if gen is self.ref else s * gen.p_set
        else:
            p = s * gen.p_set + droop_response(gen, x[2 * n], self.smooth)
        if gen is self.ref:
            q = x[2 * n + 1]
        else:
            q = s * self.q_override.get(gen.id, gen.q_set) if self.q_override \
                else s * gen.q_set
        return p, q

    def residual(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        vr, vi = x[:n], x[n:2 * n]
        f = np.zeros(2 * n + 2)
        # network term Y V
        yr = self.G @ vr - self.B @ vi
        yi = self.G @ vi + self.B @ vr
        f[:n] -= yr
        f[n:2 * n] -= yi
        for gen in self.gens:
            i = self.idx[gen.bus]
            p, q = self.gen_pq(gen, x)
            u = vr[i] ** 2 + vi[i] ** 2
            f[i] += (p * vr[i] + q * vi[i]) / u
            f[n + i] += (p * vi[i] - q * vr[i]) / u
        for d in self.loads:
            i = self.idx[d.bus]
            if d.kind == "big":
                lr, li = big_current(d.big, vr[i], vi[i])
                lr, li = self.load_scale * lr, self.load_scale * li
            else:
                p, q = self.load_scale * d.p_d, self.load_scale * d.q_d
                u = vr[i] ** 2 + vi[i] ** 2
                lr = (p * vr[i] + q * vi[i]) / u
                li = (p * vi[i] - q * vr[i]) / u
            f[i] -= lr
            f[n + i] -= li
        iref = self.idx[self.ref.bus]
        f[2 * n] = vr[iref] - self.ref.v_set
        f[2 * n + 1] = vi[iref]
        return f

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        vr, vi = x[:n], x[n:2 * n]
        j = np.zeros((2 * n + 2, 2 * n + 2))
        j[:n, :n] = -self.G
        j[:n, n:2 * n] = self.B
        j[n:2 * n, :n] = -self.B
        j[n:2 * n, n:2 * n] = -self.G
        for gen in self.gens:
            i = self.idx[gen.bus]
            p, q = self.gen_pq(gen, x)
            a, b = vr[i], vi[i]
            u = a * a + b * b
            ir = (p * a + q * b) / u
            ii = (p * b - q * a) / u
            j[i, i] += p / u - ir * 2 * a / u
            j[i, n + i] += q / u - ir * 2 * b / u
            j[n + i, i] += -q / u - ii * 2 * a / u
            j[n + i, n + i] += p / u - ii * 2 * b / u
            if self.mode == "classical":
                if gen is self.ref:
                    j[i, 2 * n] += a / u
                    j[n + i, 2 * n] += b / u
            else:
                dp = droop_response_deriv(gen, x[2 * n], self.smooth)
                j[i, 2 * n] += dp * a / u
                j[n + i, 2 * n] += dp * b / u
            if gen is self.ref:
                j[i, 2 * n + 1] += b / u
                j[n + i, 2 * n + 1] += -a / u
        for d in self.loads:
            i = self.idx[d.bus]
            a, b = vr[i], vi[i]
            if d.kind == "big":
                s = self.load_scale
                j[i, i] -= s * d.big.g
                j[i, n + i] -= -s * d.big.b
                j[n + i, i] -= s * d.big.b
                j[n + i, n + i] -= s * d.big.g
            else:
                p, q = self.load_scale * d.p_d, self.load_scale * d.q_d
                u = a * a + b * b
                lr = (p * a + q * b) / u
                li = (p * b - q * a) / u
                j[i, i] -= p / u - lr * 2 * a / u
                j[i, n + i] -= q / u - lr * 2 * b / u
                j[n + i, i] -= -q / u - li * 2 * a / u
                j[n + i, n + i] -= p / u - li * 2 * b / u
        iref = self.idx[self.ref.bus]
        j[2 * n, iref] = 1.0
        j[2 * n + 1, n + iref] = 1.0
        return j

    def newton(self, x0: np.ndarray, tol: float, max_iter: int):
        n = self.n
        x = x0.copy()
        history: list[float] = []
        for it in range(1, max_iter + 1):
            f = self.residual(x)
            kcl = float(np.max(np.abs(f[:2 * n]))) if n else 0.0
            pin = float(np.max(np.abs(f[2 * n:])))
            if max(kcl, pin) <= tol:
                return x, it - 1, kcl, True
            history = (history + [float(np.linalg.norm(f))])[-8:]
            try:
                dx = np.linalg.solve(self.jacobian(x), -f)
            except np.linalg.LinAlgError as exc:
                total_gain = sum(g.droop_gain for g in self.gens)
                hint = " (total droop gain is zero)" if total_gain == 0.0 else ""
                raise PowerFlowError(f"singular power-flow system{hint}") from exc
            # physics-based step limiting: one common multiplier keeps the
            # Newton direction intact while every state honors its own cap
            tau = 1.0
            mv = float(np.max(np.abs(dx[:2 * n]))) if n else 0.0
            if mv > V_STEP_LIMIT:
                tau = min(tau, V_STEP_LIMIT / mv)
            flim = F_STEP_LIMIT if self.mode == "governor" else PQ_STEP_LIMIT
            if abs(dx[2 * n]) > flim:
                tau = min(tau, flim / abs(dx[2 * n]))
            if abs(dx[2 * n + 1]) > PQ_STEP_LIMIT:
                tau = min(tau, PQ_STEP_LIMIT / abs(dx[2 * n + 1]))
            # non-monotone acceptance: a step must beat the recent worst
            # mismatch, tolerating transient growth without limit-cycling
            bar = max(history) * 0.9999
            scale, best_scale, best_norm = tau, tau, np.inf
            for _ in range(7):
                cnorm = float(np.linalg.norm(self.residual(x + scale * dx)))
                if cnorm < best_norm:
                    best_scale, best_norm = scale, cnorm
                if cnorm < bar:
                    break
                scale *= 0.5
            x = x + best_scale * dx
        f = self.residual(x)
        kcl = float(np.max(np.abs(f[:2 * n]))) if n else 0.0
        return x, max_iter, kcl, False

    def to_solution(self, x: np.ndarray, iterations: int, kcl: float,
                    converged: bool) -> PFSolution:
        n = self.n
        vr = {b: float(x[self.idx[b]]) for b in self.bus_ids}
        vi = {b: float(x[n + self.idx[b]]) for b in self.bus_ids}
        p_out, q_out = {}, {}
        for gen in self.gens:
            p, q = self.gen_pq(gen, x)
            p_out[gen.id] = float(p)
            q_out[gen.id] = float(q)
        delta_f = float(x[2 * n]) if self.mode == "governor" else 0.0
        return PFSolution(v_real=vr, v_imag=vi, delta_f=delta_f,
                          p_out=p_out, q_out=q_out, converged=converged,
                          iterations=iterations, max_kcl_residual=kcl, mode=self.mode)


def _vheld_init(sysobj: "_PFSystem", tol: float, max_iter: int) -> np.ndarray | None:
    """Companion solve with generator voltages held and reactive output free.

    Heavily absorbing states sit close to the fixed-Q fold where flat-start
    Newton loses the branch; pinning the machine voltage magnitudes removes
    those collapse directions, and its solution is an excellent start point
    for the fixed-Q system.
    """
    n = sysobj.n
    idx = sysobj.idx
    pv = [g for g in sysobj.gens if g is not sysobj.ref]
    nq = len(pv)
    m = 2 * n + 2 + nq

    def split(z):
        return z[:2 * n + 2], z[2 * n + 2:]

    def residual(z):
        base, qfree = split(z)
        f = np.zeros(m)
        fb = sysobj.residual(base)
        f[:2 * n + 2] = fb
        for k, g in enumerate(pv):
            i = idx[g.bus]
            a, b = base[i], base[n + i]
            u = a * a + b * b
            dq = qfree[k] - g.q_set
            # swap the held q_set injection for the free one
            f[i] += dq * b / u
            f[n + i] += -dq * a / u
            f[2 * n + 2 + k] = u - g.v_set ** 2
        return f

    def jacobian(z):
        base, qfree = split(z)
        j = np.zeros((m, m))
        j[:2 * n + 2, :2 * n + 2] = sysobj.jacobian(base)
        for k, g in enumerate(pv):
            i = idx[g.bus]
            a, b = base[i], base[n + i]
            u = a * a + b * b
            dq = qfree[k] - g.q_set
            ir, ii = dq * b / u, -dq * a / u
            j[i, i] += -ir * 2 * a / u
            j[i, n + i] += dq / u - ir * 2 * b / u
            j[n + i, i] += -dq / u - ii * 2 * a / u
            j[n + i, n + i] += -ii * 2 * b / u
            j[i, 2 * n + 2 + k] = b / u
            j[n + i, 2 * n + 2 + k] = -a / u
            j[2 * n + 2 + k, i] = 2 * a
            j[2 * n + 2 + k, n + i] = 2 * b
        return j

    z = np.zeros(m)
    z[:2 * n + 2] = sysobj.initial_state()
    for k, g in enumerate(pv):
        z[idx[g.bus]] = g.v_set
        z[2 * n + 2 + k] = g.q_set
    history: list[float] = []
    for _ in range(max_iter):
        f = residual(z)
        if np.max(np.abs(f)) <= tol:
            qfree = {g.id: float(z[2 * n + 2 + k]) for k, g in enumerate(pv)}
            return z[:2 * n + 2], qfree
        history = (history + [float(np.linalg.norm(f))])[-8:]
        try:
            dz = np.linalg.solve(jacobian(z), -f)
        except np.linalg.LinAlgError:
            return None
        mv = float(np.max(np.abs(dz[:2 * n]))) if n else 0.0
        tau = min(1.0, V_STEP_LIMIT / mv) if mv > V_STEP_LIMIT else 1.0
        bar = max(history) * 0.9999
        scale, best_scale, best_norm = tau, tau, np.inf
        for _ in range(7):
            cnorm = float(np.linalg.norm(residual(z + scale * dz)))
            if cnorm < best_norm:
                best_scale, best_norm = scale, cnorm
            if cnorm < bar:
                break
            scale *= 0.5
        z = z + best_scale * dz
    return None


def _plausible(sysobj: "_PFSystem", x: np.ndarray) -> bool:
    """Operational-branch screen: magnitudes within generous equipment range.

    Conductance-style loads admit spurious mathematical solutions with wildly
    inflated voltage; a converged state outside this band is rejected in
    favor of a retry seeded from the machine-voltage companion profile.
    """
    vm = np.hypot(x[:sysobj.n], x[sysobj.n:2 * sysobj.n])
    return bool(vm.max() <= 1.15 and vm.min() >= 0.8)


def _solve(net: Network, mode: str, tol: float, max_iter: int,
           smooth: SmoothLimitParams) -> PFSolution:
    sys0 = _PFSystem(net, mode, smooth)
    fallback = None
    total = 0

    def finish(x, iters, kcl):
        return sys0.to_solution(x, iters, kcl, True)

    x, iters, kcl, ok = sys0.newton(sys0.initial_state(), tol, max_iter)
    total += iters
    if ok:
        if _plausible(sys0, x):
            return finish(x, total, kcl)
        fallback = (x.copy(), kcl)

    companion = _vheld_init(sys0, tol, max_iter)
    if companion is not None:
        warm, q_comp = companion
        x, iters, kcl, ok = sys0.newton(warm, tol, max_iter)
        total += iters
        if ok:
            if _plausible(sys0, x):
                return finish(x, total, kcl)
            fallback = fallback or (x.copy(), kcl)
        else:
            # reactive bridge: morph the held outputs toward the fixed
            # set-points, tracking the branch from the known companion state
            x = warm
            lam_done, step = 0.0, 0.5
            while lam_done < 1.0:
                lam = min(1.0, lam_done + step)
                sys0.q_override = {gid: (1.0 - lam) * qc
                                   + lam * net.generators[gid].q_set
                                   for gid, qc in q_comp.items()}
                xt, iters, kcl, ok = sys0.newton(x, tol, max_iter)
                total += iters
                if ok:
                    x, lam_done = xt, lam
                    step = min(step * 1.7, 0.5)
                else:
                    step *= 0.5
                    if step < 2e-3:
                        break
            sys0.q_override = None
            if lam_done >= 1.0:
                if _plausible(sys0, x):
                    return finish(x, total, kcl)
                fallback = fallback or (x.copy(), kcl)

    # last resort: ramp loads and dispatch in together from the trivially
    # solvable unloaded network, warm-starting every stage and halving the
    # stage size where Newton loses the branch
    sysl = _PFSystem(net, mode, smooth, load_scale=0.0, gen_scale=0.0)
    x = sysl.initial_state()
    lam_done, step = 0.0, 0.2
    kcl = np.inf
    while lam_done < 1.0:
        lam = min(1.0, lam_done + step)
        sysl.load_scale = lam
        sysl.gen_scale = lam
        xt, iters, kcl, ok = sysl.newton(x, tol, max_iter)
        total += iters
        if ok:
            x = xt
            lam_done = lam
            step = min(step * 1.7, 0.25)
        else:
            step *= 0.5
            if step < 2e-3:
                if fallback is not None:
                    xf, kf = fallback
                    return finish(xf, total, kf)
                worst = sysl.bus_ids[int(np.argmax(np.abs(sysl.residual(xt)[:sysl.n])))]
                raise PowerFlowError(
                    f"{mode} power flow did not converge (continuation stalled at "
                    f"{lam_done:.3f}, worst residual at bus {worst}, {kcl:.3e})")
    if _plausible(sysl, x) or fallback is None:
        return sysl.to_solution(x, total, kcl, True)
    xf, kf = fallback
    return finish(xf, total, kf)


def solve_pf(net: Network, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             smooth: SmoothLimitParams = SmoothLimitParams()) -> PFSolution:
    """Classical power flow: frequency frozen, reference absorbs the imbalance."""
    return _solve(net, "classical", tol, max_iter, smooth)


def solve_gpf(net: Network, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              smooth: SmoothLimitParams = SmoothLimitParams()) -> PFSolution:
    """Governor power flow: one island-wide frequency state, droop on every machine."""
    return _solve(net, "governor", tol, max_iter, smooth)


def kcl_residual(net: Network, solution: PFSolution) -> dict[int, complex]:
    """Complex current mismatch at every energized bus for a given state.

    Generator injections are taken from the solution's recorded outputs, so
    this is a direct audit of the network equations rather than a re-solve.
    """
    bus_ids = sorted(solution.v_real)
    if not bus_ids:
        return {}
    y, full_idx = assemble_ybus(net)
    order = [full_idx[b] for b in bus_ids]
    Y = y.tocsr()[order, :][:, order].toarray()
    idx = {b: i for i, b in enumerate(bus_ids)}
    v = np.array([complex(solution.v_real[b], solution.v_imag[b]) for b in bus_ids])
    inj = np.zeros(len(bus_ids), dtype=complex)
    for gen in net.energized_generators():
        if gen.id not in solution.p_out or gen.bus not in idx:
            continue
        i = idx[gen.bus]
        s = complex(solution.p_out[gen.id], solution.q_out[gen.id])
        inj[i] += np.conj(s / v[i])
    for d in net.energized_loads():
        if d.bus not in idx:
            continue
        i = idx[d.bus]
        if d.kind == "big":
            ir, ii = big_current(d.big, v[i].real, v[i].imag)
        else:
            s = complex(d.p_d, d.q_d)
            c = np.conj(s / v[i])
            ir, ii = c.real, c.imag
        inj[i] -= complex(ir, ii)
    mism = inj - Y @ v
    return {b: complex(mism[idx[b]]) for b in bus_ids}


def branch_losses(net: Network, solution: PFSolution) -> float:
    """Total series active-power loss over in-service branches at the solved state."""
    from .netmodel import branch_admittances
    total = 0.0
    for br in net.in_service_branches():
        if br.from_bus not in solution.v_real or br.to_bus not in solution.v_real:
            continue
        vf = complex(solution.v_real[br.from_bus], solution.v_imag[br.from_bus])
        vt = complex(solution.v_real[br.to_bus], solution.v_imag[br.to_bus])
        yff, yft, ytf, ytt = branch_admittances(br)
        i_f = yff * vf + yft * vt
        i_t = ytf * vf + ytt * vt
        total += (vf * np.conj(i_f)).real + (vt * np.conj(i_t)).real
    return float(total)


def total_load_power(net: Network, solution: PFSolution) -> float:
    """Active power drawn by all energized loads at the solved voltages."""
    from .bigload import big_power
    total = 0.0
    for d in net.energized_loads():
        if d.bus not in solution.v_real:
            continue
        vr, vi = solution.v_real[d.bus], solution.v_imag[d.bus]
        if d.kind == "big":
            p, _ = big_power(d.big, vr, vi)
        else:
            p = d.p_d
        total += p
    return float(total)


def apply_solution(net: Network, solution: PFSolution) -> None:
    """Write solved voltages onto the (mutable) network's energized buses."""
    for b, vr in solution.v_real.items():
        net.buses[b].v_real = vr
        net.buses[b].v_imag = solution.v_imag[b]
