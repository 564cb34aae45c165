"""Crank-path validation and island synchronization.

Each crank step is analyzed before actuation: the governor power flow of the
hypothetically energized island is solved first, and only when a frequency,
voltage or ramp limit is violated does the corrective optimization run. The
optimization minimally adjusts generator active-power set-points subject to
current balance, droop coupling, device limits and per-step ramp windows,
assembled as exact quadratic forms for the interior-point solver.

Synchronization builds the same kind of problem over a fully restored island:
the boundary bus complex voltage and the island frequency are pinned to the
values received from the neighbouring island, non-participating machines hold
constant voltage through a heavily penalized escape slack, and participating
machines trade set-point changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import pdip
from .bigload import pq_to_big
from .netmodel import (Network, CrankStep, CrankPath, apply_energization,
                       assemble_ybus, islands as find_islands)
from .powerflow import (PFSolution, SmoothLimitParams, PowerFlowError,
                        NoReferenceError, solve_gpf, apply_solution)

PV_DEVIATION_FLAG = 1e-4  # squared-voltage slack that signals a profile problem


@dataclass
class StepBounds:
    delta_f_min: float = -1.2
    delta_f_max: float = 1.2
    v_min: float = 0.9
    v_max: float = 1.1

    def __post_init__(self):
        if not (self.delta_f_min < self.delta_f_max and self.v_min < self.v_max):
            raise ValueError("bounds require min < max")

    def bus_v(self, net: Network, bus: int) -> tuple[float, float]:
        b = net.buses[bus]
        return (b.v_min if b.v_min is not None else self.v_min,
                b.v_max if b.v_max is not None else self.v_max)


@dataclass
class StepReport:
    step: int
    feasible: bool
    indeterminate: bool = False
    v_max: float = 0.0
    v_min: float = 0.0
    delta_f: float = 0.0
    delta_p: dict[int, float] = field(default_factory=dict)
    max_delta_p: float = 0.0
    max_delta_p_bus: int | None = None
    slack_p: float = 0.0
    dispatch_after: dict[int, float] = field(default_factory=dict)
    recommended_v_set: dict[int, float] = field(default_factory=dict)
    bus_voltage: dict[int, complex] = field(default_factory=dict)
    corrected: bool = False
    loading: float = 1.0
    diagnostics: str = ""
    telemetry: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bus_voltage"] = {b: [v.real, v.imag] for b, v in self.bus_voltage.items()}
        return d


@dataclass
class BoundaryState:
    """Three-scalar boundary-bus state exchanged between islands."""
    bus: int
    v_mag: float
    theta: float          # degrees
    delta_f: float        # Hz
    island_id: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        if self.v_mag <= 0:
            raise ValueError("boundary voltage magnitude must be positive")

    def rect(self) -> tuple[float, float]:
        th = math.radians(self.theta)
        return self.v_mag * math.cos(th), self.v_mag * math.sin(th)


@dataclass
class SyncRecommendation:
    p_set: dict[int, float]
    q_set: dict[int, float]
    boundary_v_mag: float
    boundary_theta: float
    boundary_delta_f: float
    pv_deviation: dict[int, float]
    flagged: list[tuple[int, float]]
    objective: float = 0.0
    indeterminate: bool = False
    diagnostics: str = ""
    telemetry: dict = field(default_factory=dict)


@dataclass
class BuiltProblem:
    problem: pdip.OptProblem
    init: np.ndarray
    meta: dict


# ---------------------------------------------------------------------------
# step preparation
# ---------------------------------------------------------------------------

def prepare_step(net: Network, step: CrankStep, loading: float = 1.0) -> Network:
    """Hypothetically energize a step and attach its loads as linear circuits.

    Constant-power records switching on at this step are converted at flat
    voltage after scaling by the step and session loading factors; records
    already converted stay untouched. The step's dispatch targets land on the
    generator set-points.
    """
    out = apply_energization(net, step)
    factor = loading * step.loading_factor
    for d in out.loads:
        if d.energized and d.kind == "constant-power":
            d.big = pq_to_big(d.p_d * factor, d.q_d * factor, 1.0, 0.0)
            d.kind = "big"
            d.p_d = None
            d.q_d = None
    for gid, target in step.dispatch.items():
        gen = out.generators[gid]
        gen.p_set = target.p
        gen.q_set = target.q
        if target.v_set is not None:
            gen.v_set = target.v_set
    return out


def _bound_problems(net: Network, sol: PFSolution, bounds: StepBounds,
                    prev_dispatch: dict[int, float]) -> list[str]:
    """Reasons the uncorrected governor state is not actuable."""
    problems = []
    if not bounds.delta_f_min <= sol.delta_f <= bounds.delta_f_max:
        problems.append(f"frequency deviation {sol.delta_f:+.4f} Hz outside "
                        f"[{bounds.delta_f_min}, {bounds.delta_f_max}]")
    for b in sol.v_real:
        lo, hi = bounds.bus_v(net, b)
        vm = sol.vmag(b)
        if not lo <= vm <= hi:
            problems.append(f"bus {b} voltage {vm:.4f} outside [{lo}, {hi}]")
    for gen in net.energized_generators():
        if gen.id in prev_dispatch:
            delta = gen.p_set - prev_dispatch[gen.id]
            if not gen.ramp_min - 1e-9 <= delta <= gen.ramp_max + 1e-9:
                problems.append(f"generator {gen.id} ramp {delta:+.3f} outside "
                                f"[{gen.ramp_min}, {gen.ramp_max}]")
    return problems


# ---------------------------------------------------------------------------
# shared constraint fabric
# ---------------------------------------------------------------------------

class _IslandCircuit:
    """Voltage variables, current-balance accumulators and load stamps for
    the reference island of an energized network."""

    def __init__(self, b: pdip.QuadraticProblemBuilder, net: Network,
                 bounds: StepBounds, v_init: dict[int, complex] | None = None,
                 load_scale: float = 1.0):
        self.b = b
        self.net = net
        ref = net.reference_generator()
        comp = None
        for c in find_islands(net):
            if ref.bus in c:
                comp = c
            else:
                raise NoReferenceError(f"no reference in island {c}")
        if comp is None:
            raise NoReferenceError("reference bus is not energized")
        self.ref = ref
        self.buses = comp
        self.vr: dict[int, int] = {}
        self.vi: dict[int, int] = {}
        self.vsq: dict[int, int] = {}
        self.v_init = v_init or {}
        self.kcl_r = {bus: {"const": 0.0, "lin": {}} for bus in comp}
        self.kcl_i = {bus: {"const": 0.0, "lin": {}} for bus in comp}

        for bus in comp:
            lo, hi = bounds.bus_v(net, bus)
            v = self.v0(bus)
            self.vr[bus] = b.add_variable(f"vr:{bus}", init=v.real, step_limit=0.1)
            self.vi[bus] = b.add_variable(f"vi:{bus}", init=v.imag, step_limit=0.1)
            self.vsq[bus] = b.add_variable(f"vsq:{bus}", lb=lo * lo, ub=hi * hi,
                                           init=abs(v) ** 2)
            b.add_equality(lin={self.vsq[bus]: -1.0},
                           quad=[(self.vr[bus], self.vr[bus], 1.0),
                                 (self.vi[bus], self.vi[bus], 1.0)])

        y, full_idx = assemble_ybus(net)
        order = [full_idx[bus] for bus in comp]
        ym = y.tocsr()[order, :][:, order].tocoo()
        for r, c, val in zip(ym.row, ym.col, ym.data):
            bus_r, bus_c = comp[r], comp[c]
            self._kcl_add(bus_r, self.vr[bus_c], -val.real, -val.imag)
            self._kcl_add(bus_r, self.vi[bus_c], +val.imag, -val.real)

        n_pq = 0
        for d in net.energized_loads():
            if d.bus not in self.kcl_r:
                continue
            if d.kind == "big":
                s = load_scale
                self._kcl_add(d.bus, self.vr[d.bus], -s * d.big.g, -s * d.big.b)
                self._kcl_add(d.bus, self.vi[d.bus], +s * d.big.b, -s * d.big.g)
                self.kcl_r[d.bus]["const"] -= s * d.big.alpha_r
                self.kcl_i[d.bus]["const"] -= s * d.big.alpha_i
            else:
                p, q = load_scale * d.p_d, load_scale * d.q_d
                v = self.v0(d.bus)
                u = abs(v) ** 2
                idr = b.add_variable(f"idr:{d.bus}:{n_pq}",
                                     init=(p * v.real + q * v.imag) / u)
                idi = b.add_variable(f"idi:{d.bus}:{n_pq}",
                                     init=(p * v.imag - q * v.real) / u)
                n_pq += 1
                b.add_equality(quad=[(idr, self.vsq[d.bus], 1.0)],
                               lin={self.vr[d.bus]: -p, self.vi[d.bus]: -q})
                b.add_equality(quad=[(idi, self.vsq[d.bus], 1.0)],
                               lin={self.vi[d.bus]: -p, self.vr[d.bus]: +q})
                self.kcl_r[d.bus]["lin"][idr] = -1.0
                self.kcl_i[d.bus]["lin"][idi] = -1.0

    def v0(self, bus: int) -> complex:
        v = self.v_init.get(bus)
        return v if v is not None else complex(1.0, 0.0)

    def _kcl_add(self, bus: int, var: int, re_coef: float, im_coef: float):
        lr = self.kcl_r[bus]["lin"]
        li = self.kcl_i[bus]["lin"]
        if re_coef:
            lr[var] = lr.get(var, 0.0) + re_coef
        if im_coef:
            li[var] = li.get(var, 0.0) + im_coef

    def add_generator_current(self, gen, ptot: int, q: int) -> tuple[int, int]:
        v = self.v0(gen.bus)
        u = abs(v) ** 2
        p0, q0 = gen.p_set, gen.q_set
        igr = self.b.add_variable(f"igr:{gen.id}", init=(p0 * v.real + q0 * v.imag) / u)
        igi = self.b.add_variable(f"igi:{gen.id}", init=(p0 * v.imag - q0 * v.real) / u)
        self.b.add_equality(quad=[(igr, self.vsq[gen.bus], 1.0),
                                  (ptot, self.vr[gen.bus], -1.0),
                                  (q, self.vi[gen.bus], -1.0)])
        self.b.add_equality(quad=[(igi, self.vsq[gen.bus], 1.0),
                                  (ptot, self.vi[gen.bus], -1.0),
                                  (q, self.vr[gen.bus], +1.0)])
        self.kcl_r[gen.bus]["lin"][igr] = 1.0
        self.kcl_i[gen.bus]["lin"][igi] = 1.0
        return igr, igi

    def finalize(self):
        for bus in self.buses:
            self.b.add_equality(const=self.kcl_r[bus]["const"], lin=self.kcl_r[bus]["lin"])
            self.b.add_equality(const=self.kcl_i[bus]["const"], lin=self.kcl_i[bus]["lin"])


# ---------------------------------------------------------------------------
# crank-step optimization
# ---------------------------------------------------------------------------

def build_crank_problem(net: Network, step: CrankStep, prev_dispatch: dict[int, float],
                        bounds: StepBounds = StepBounds(),
                        warm: PFSolution | None = None,
                        load_scale: float = 1.0) -> BuiltProblem:
    """Minimal set-point correction problem over a prepared step snapshot.

    Decision variables are the per-generator set-point corrections; droop
    coupling ties every machine to the island frequency state, whose bounds
    (with the voltage-square and device boxes) define the feasible set. Ramp
    windows from the previous step's realized dispatch shift onto correction
    bounds; generators first energized at this step carry no window.
    """
    for gen in net.energized_generators():
        if gen.id not in step.generators_to_energize and gen.id not in prev_dispatch \
                and net.steps_applied > 1:
            raise ValueError(f"missing prev_dispatch for generator {gen.id}")
    b = pdip.QuadraticProblemBuilder()
    v_init = None
    if warm is not None:
        v_init = {bus: complex(warm.v_real[bus], warm.v_imag[bus]) for bus in warm.v_real}
    circuit = _IslandCircuit(b, net, bounds, v_init, load_scale)
    df0 = warm.delta_f if warm is not None else 0.0
    df = b.add_variable("df", lb=bounds.delta_f_min, ub=bounds.delta_f_max,
                        init=df0, step_limit=0.5)
    meta = {"df": df, "dpg": {}, "q": {}, "ptot": {}, "vr": circuit.vr,
            "vi": circuit.vi, "vsq": circuit.vsq, "ref": circuit.ref,
            "buses": circuit.buses, "targets": {}}
    df_init = min(max(df0, bounds.delta_f_min), bounds.delta_f_max)
    for gen in net.energized_generators():
        if gen.bus not in circuit.kcl_r:
            continue
        gid = gen.id
        q = b.add_variable(f"q:{gid}", lb=gen.q_min, ub=gen.q_max, init=gen.q_set)
        if gid in prev_dispatch:
            lo = gen.ramp_min + prev_dispatch[gid] - gen.p_set
            hi = gen.ramp_max + prev_dispatch[gid] - gen.p_set
        else:
            lo, hi = -np.inf, np.inf
        dpg = b.add_variable(f"dpg:{gid}", lb=lo, ub=hi, init=0.0)
        b.add_objective_term(dpg, 1.0)
        dpp = b.add_variable(f"dpp:{gid}", init=-gen.droop_gain * df_init)
        ptot = b.add_variable(f"ptot:{gid}", lb=gen.p_min, ub=gen.p_max,
                              init=gen.p_set - gen.droop_gain * df_init)
        b.add_equality(lin={dpp: 1.0, df: gen.droop_gain})
        b.add_equality(const=-gen.p_set, lin={ptot: 1.0, dpp: -1.0, dpg: -1.0})
        circuit.add_generator_current(gen, ptot, q)
        meta["dpg"][gid] = dpg
        meta["q"][gid] = q
        meta["ptot"][gid] = ptot
        meta["targets"][gid] = gen.p_set
    # the reference machine pins the island's angle datum
    b.add_equality(lin={circuit.vi[circuit.ref.bus]: 1.0})
    circuit.finalize()
    problem, init = b.build()
    return BuiltProblem(problem=problem, init=init, meta=meta)


def _report_from_solution(net: Network, step: CrankStep, built: BuiltProblem,
                          sol: pdip.OptSolution, loading: float,
                          trace: list) -> StepReport:
    x = sol.x
    meta = built.meta
    vmags = {bus: float(np.hypot(x[meta["vr"][bus]], x[meta["vi"][bus]]))
             for bus in meta["buses"]}
    delta_p = {gid: float(x[i]) for gid, i in meta["dpg"].items()}
    worst = max(delta_p, key=lambda g: abs(delta_p[g]), default=None)
    dispatch_after = {gid: meta["targets"][gid] + delta_p[gid] for gid in delta_p}
    rec_v = {gid: vmags[net.generators[gid].bus] for gid in delta_p}
    report = StepReport(
        step=step.sequence,
        feasible=bool(sol.converged),
        indeterminate=not sol.converged,
        v_max=max(vmags.values()),
        v_min=min(vmags.values()),
        delta_f=float(x[meta["df"]]),
        delta_p=delta_p,
        max_delta_p=delta_p[worst] if worst is not None else 0.0,
        max_delta_p_bus=net.generators[worst].bus if worst is not None else None,
        slack_p=dispatch_after.get(meta["ref"].id, 0.0),
        dispatch_after=dispatch_after,
        recommended_v_set=rec_v,
        bus_voltage={bus: complex(x[meta["vr"][bus]], x[meta["vi"][bus]])
                     for bus in meta["buses"]},
        corrected=True,
        loading=loading,
        diagnostics=sol.diagnostics,
        telemetry={"solver_iterations": sol.iterations,
                   "kkt_residual": sol.kkt_residual,
                   "complementarity_residual": sol.complementarity_residual,
                   "objective": sol.objective,
                   "trace": [t.as_dict() for t in trace]},
    )
    return report


def _solve_crank(net: Network, step: CrankStep, prev_dispatch: dict[int, float],
                 bounds: StepBounds, config: pdip.SolverConfig,
                 warm: PFSolution | None, loading: float) -> StepReport:
    trace: list[pdip.IterationRecord] = []
    built = build_crank_problem(net, step, prev_dispatch, bounds, warm)
    sol = pdip.solve(built.problem, built.init, config, callback=trace.append)
    if not sol.converged:
        # load continuation: walk the linear-circuit loads in from a light start
        x = None
        for lam in (0.3, 0.6, 1.0):
            built = build_crank_problem(net, step, prev_dispatch, bounds, warm,
                                        load_scale=lam)
            start = built.init if x is None else x
            sol = pdip.solve(built.problem, start, config, callback=trace.append)
            if not sol.converged:
                break
            x = sol.x
    return _report_from_solution(net, step, built, sol, loading, trace)


def validate_step(net: Network, step: CrankStep, prev_dispatch: dict[int, float],
                  bounds: StepBounds = StepBounds(),
                  config: pdip.SolverConfig = pdip.SolverConfig(),
                  loading: float = 1.0,
                  smooth: SmoothLimitParams = SmoothLimitParams()) -> StepReport:
    """Analyze one crank step against the current network snapshot.

    Pure with respect to `net`. When the uncorrected governor power flow
    already satisfies every bound and ramp window the report carries
    identically zero corrections; otherwise the optimization supplies them.
    Solver breakdowns surface as an indeterminate report, never as a silently
    feasible one.
    """
    snap = prepare_step(net, step, loading)
    gpf = None
    gpf_error = ""
    try:
        gpf = solve_gpf(snap, smooth=smooth)
    except NoReferenceError:
        raise
    except PowerFlowError as exc:
        gpf_error = str(exc)
    if gpf is not None and gpf.converged:
        problems = _bound_problems(snap, gpf, bounds, prev_dispatch)
        if not problems:
            vmax, vmin = gpf.v_extremes()
            gens = snap.energized_generators()
            return StepReport(
                step=step.sequence, feasible=True,
                v_max=vmax, v_min=vmin, delta_f=gpf.delta_f,
                delta_p={g.id: 0.0 for g in gens},
                max_delta_p=0.0, max_delta_p_bus=None,
                slack_p=snap.reference_generator().p_set,
                dispatch_after={g.id: g.p_set for g in gens},
                recommended_v_set={g.id: g.v_set for g in gens},
                bus_voltage={bus: complex(gpf.v_real[bus], gpf.v_imag[bus])
                             for bus in gpf.v_real},
                corrected=False, loading=loading,
                telemetry={"pf_iterations": gpf.iterations,
                           "max_kcl_residual": gpf.max_kcl_residual},
            )
    try:
        report = _solve_crank(snap, step, prev_dispatch, bounds, config, gpf, loading)
    except NoReferenceError:
        raise
    except (pdip.SingularKKTError, PowerFlowError) as exc:
        return StepReport(step=step.sequence, feasible=False, indeterminate=True,
                          loading=loading,
                          diagnostics=f"{gpf_error + '; ' if gpf_error else ''}{exc}")
    if report.indeterminate and gpf_error:
        report.diagnostics = f"{gpf_error}; {report.diagnostics}"
    return report


def actuate_step(net: Network, step: CrankStep, report: StepReport) -> Network:
    """Energize the step and realize the validated set-points on the network."""
    if report.indeterminate or not report.feasible:
        raise ValueError(f"cannot actuate step {step.sequence}: report is not feasible")
    out = prepare_step(net, step, report.loading)
    for gid, p in report.dispatch_after.items():
        out.generators[gid].p_set = p
    for gid, v in report.recommended_v_set.items():
        out.generators[gid].v_set = v
    for bus, v in report.bus_voltage.items():
        out.buses[bus].v_real = v.real
        out.buses[bus].v_imag = v.imag
    return out


def restore_network(net: Network, path: CrankPath,
                    bounds: StepBounds = StepBounds(),
                    config: pdip.SolverConfig = pdip.SolverConfig(),
                    loading: float = 1.0,
                    smooth: SmoothLimitParams = SmoothLimitParams(),
                    on_report=None) -> tuple[Network, list[StepReport]]:
    """Sequential validate-then-actuate over a whole path.

    Halts at the first infeasible or indeterminate step, returning the partial
    report list together with the network as far as it was actually energized.
    """
    current = net.copy()
    prev_dispatch: dict[int, float] = {}
    reports: list[StepReport] = []
    for step in path.steps:
        report = validate_step(current, step, prev_dispatch, bounds, config,
                               loading, smooth)
        reports.append(report)
        if on_report is not None:
            on_report(report)
        if report.indeterminate or not report.feasible:
            break
        current = actuate_step(current, step, report)
        prev_dispatch = dict(report.dispatch_after)
    return current, reports


def run_restoration(net: Network, path: CrankPath,
                    bounds: StepBounds = StepBounds(),
                    config: pdip.SolverConfig = pdip.SolverConfig(),
                    loading: float = 1.0,
                    smooth: SmoothLimitParams = SmoothLimitParams()) -> list[StepReport]:
    """Validate and actuate every step of the path; returns the step reports."""
    _, reports = restore_network(net, path, bounds, config, loading, smooth)
    return reports


def audit_ramping(net: Network, reports: list[StepReport]) -> list[tuple[int, int, float]]:
    """Post-hoc ramp audit over consecutive realized dispatches.

    Returns (step, generator, delta) triples that violate the generator's
    per-step ramp window; an empty list means the whole run honored them.
    """
    violations = []
    prev: dict[int, float] = {}
    for rep in reports:
        if rep.indeterminate or not rep.feasible:
            break
        for gid, p in rep.dispatch_after.items():
            if gid in prev:
                gen = net.generators[gid]
                delta = p - prev[gid]
                if not gen.ramp_min - 1e-9 <= delta <= gen.ramp_max + 1e-9:
                    violations.append((rep.step, gid, delta))
        prev = dict(rep.dispatch_after)
    return violations


# ---------------------------------------------------------------------------
# island synchronization
# ---------------------------------------------------------------------------

def build_sync_problem(net: Network, boundary: BoundaryState,
                       participating: list[int], weight: float = 1e6,
                       bounds: StepBounds = StepBounds()) -> BuiltProblem:
    """Set-point adjustment problem matching a remote boundary state.

    The remote island's complex boundary voltage and frequency enter as
    constants; the local island's angle datum comes from the boundary pin, so
    the reference machine is not separately anchored. Non-participating
    generators hold their voltage set-points through a squared-magnitude
    equality with a weighted escape slack.
    """
    if not participating:
        raise ValueError("participating generator set is empty")
    for gid in participating:
        if gid not in net.generators or not net.generators[gid].energized:
            raise ValueError(f"participating generator {gid} is not energized here")
    b = pdip.QuadraticProblemBuilder()
    v_init = {}
    for bus in net.energized_buses():
        bb = net.buses[bus]
        if bb.v_real is not None:
            v_init[bus] = complex(bb.v_real, bb.v_imag)
    # rotate the warm start so the boundary angle matches the remote value
    v2r, v2i = boundary.rect()
    if boundary.bus in v_init and abs(v_init[boundary.bus]) > 0:
        rot = complex(v2r, v2i) / v_init[boundary.bus]
        rot /= abs(rot)
        v_init = {bus: v * rot for bus, v in v_init.items()}
    circuit = _IslandCircuit(b, net, bounds, v_init)
    if boundary.bus not in circuit.kcl_r:
        raise ValueError(f"boundary bus {boundary.bus} is not in this island")
    df = b.add_variable("df", init=boundary.delta_f)
    meta = {"df": df, "dpg": {}, "q": {}, "ptot": {}, "dvsq": {},
            "vr": circuit.vr, "vi": circuit.vi, "vsq": circuit.vsq,
            "ref": circuit.ref, "buses": circuit.buses, "boundary": boundary}
    part = set(participating)
    for gen in net.energized_generators():
        if gen.bus not in circuit.kcl_r:
            continue
        gid = gen.id
        q = b.add_variable(f"q:{gid}", lb=gen.q_min, ub=gen.q_max, init=gen.q_set)
        dpp = b.add_variable(f"dpp:{gid}", init=-gen.droop_gain * boundary.delta_f)
        ptot = b.add_variable(f"ptot:{gid}", lb=gen.p_min, ub=gen.p_max,
                              init=gen.p_set - gen.droop_gain * boundary.delta_f)
        b.add_equality(lin={dpp: 1.0, df: gen.droop_gain})
        if gid in part:
            dpg = b.add_variable(f"dpg:{gid}", lb=gen.ramp_min, ub=gen.ramp_max,
                                 init=0.0)
            b.add_objective_term(dpg, 1.0)
            # reactive set-point change is free, lightly regularized for a
            # well-posed saddle system
            b.add_objective_term(q, 1e-6, center=gen.q_set)
            b.add_equality(const=-gen.p_set, lin={ptot: 1.0, dpp: -1.0, dpg: -1.0})
            meta["dpg"][gid] = dpg
        else:
            b.add_equality(const=-gen.p_set, lin={ptot: 1.0, dpp: -1.0})
            if gen.bus not in meta["dvsq"]:
                dvsq = b.add_variable(f"dvsq:{gen.bus}", init=0.0)
                b.add_objective_term(dvsq, weight * weight)
                b.add_equality(const=-gen.v_set ** 2,
                               lin={circuit.vsq[gen.bus]: 1.0, dvsq: 1.0})
                meta["dvsq"][gen.bus] = dvsq
        circuit.add_generator_current(gen, ptot, q)
        meta["q"][gid] = q
        meta["ptot"][gid] = ptot
    # boundary equalities: match the remote complex voltage and frequency
    b.add_equality(const=-v2r, lin={circuit.vr[boundary.bus]: 1.0})
    b.add_equality(const=-v2i, lin={circuit.vi[boundary.bus]: 1.0})
    b.add_equality(const=-boundary.delta_f, lin={df: 1.0})
    circuit.finalize()
    problem, init = b.build()
    return BuiltProblem(problem=problem, init=init, meta=meta)


def solve_sync(net: Network, boundary: BoundaryState, participating: list[int],
               weight: float = 1e6, bounds: StepBounds = StepBounds(),
               config: pdip.SolverConfig = pdip.SolverConfig()) -> SyncRecommendation:
    """Solve the synchronization problem and package the recommendation."""
    built = build_sync_problem(net, boundary, participating, weight, bounds)
    trace: list[pdip.IterationRecord] = []
    sol = pdip.solve(built.problem, built.init, config, callback=trace.append)
    meta = built.meta
    x = sol.x
    if not sol.converged:
        return SyncRecommendation(p_set={}, q_set={}, boundary_v_mag=boundary.v_mag,
                                  boundary_theta=boundary.theta,
                                  boundary_delta_f=boundary.delta_f,
                                  pv_deviation={}, flagged=[], indeterminate=True,
                                  diagnostics=sol.diagnostics or "solver did not converge",
                                  telemetry={"trace": [t.as_dict() for t in trace]})
    p_new = {gid: net.generators[gid].p_set + float(x[i])
             for gid, i in meta["dpg"].items()}
    q_new = {gid: float(x[meta["q"][gid]]) for gid in meta["dpg"]}
    vb = complex(x[meta["vr"][boundary.bus]], x[meta["vi"][boundary.bus]])
    pv_dev = {bus: float(x[i]) for bus, i in meta["dvsq"].items()}
    flagged = sorted(((bus, dv) for bus, dv in pv_dev.items()
                      if abs(dv) > PV_DEVIATION_FLAG),
                     key=lambda t: -abs(t[1]))
    return SyncRecommendation(
        p_set=p_new, q_set=q_new,
        boundary_v_mag=float(abs(vb)),
        boundary_theta=float(math.degrees(math.atan2(vb.imag, vb.real))),
        boundary_delta_f=float(x[meta["df"]]),
        pv_deviation=pv_dev, flagged=flagged,
        objective=sol.objective,
        telemetry={"solver_iterations": sol.iterations,
                   "kkt_residual": sol.kkt_residual,
                   "complementarity_residual": sol.complementarity_residual,
                   "trace": [t.as_dict() for t in trace]},
    )


def flag_voltage_issues(recommendation: SyncRecommendation) -> list[tuple[int, float]]:
    """Constant-voltage buses whose set-point slack exceeds the flag level."""
    return sorted(((bus, dv) for bus, dv in recommendation.pv_deviation.items()
                   if abs(dv) > PV_DEVIATION_FLAG), key=lambda t: -abs(t[1]))
