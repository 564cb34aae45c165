"""Build the bundled 39-bus restoration scenario.

Produces the native case file and two crank-path files (one per island) from
the matrix-style 39-bus data. Per-step generator targets are calibrated
against the actual governor solver so the staged energization hits a chosen
frequency-deviation profile, reactive set-points come from a constant-voltage
solve at each stage, and the second island's final dispatch is additionally
tuned so its boundary bus lands on the published-style interchange state.

Run from the repository root:  python tools/make_ieee39_scenario.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from polar_ref import solve_pv_pq  # noqa: E402

from sugarr.netmodel import (load_matrix_case, serialize_case, serialize_crankpath,
                             load_case, load_crankpath, CrankStep, DispatchTarget,
                             CrankPath)  # noqa: E402
from sugarr.powerflow import solve_gpf, solve_pf  # noqa: E402
from sugarr.restoration import prepare_step, restore_network, StepBounds  # noqa: E402

DATA = Path(__file__).resolve().parent.parent / "src" / "sugarr" / "data"

# classic machine numbering of the 39-bus system: unit id -> bus
GEN_BUS = {1: 39, 2: 31, 3: 32, 4: 33, 5: 34, 6: 35, 7: 36, 8: 37, 9: 38, 10: 30}
BUS_GEN = {b: g for g, b in GEN_BUS.items()}

# droop gains, pu per Hz
DROOP = {30: 0.80, 31: 0.50, 32: 0.56, 33: 0.50, 34: 0.39,
         35: 0.53, 36: 0.45, 37: 0.73, 38: 0.67, 39: 0.85}

RAMP = 4.0          # per-step ramp window, pu
PMAX_SCALE = 1.2    # capability headroom over the matrix-case ratings
CAP = 0.95          # calibration never dispatches above this fraction of p_max

# staged energization (island 1, reference machine at bus 30)
STAGES_1 = [
    ([30, 2, 25, 37], [10, 8]),
    ([1, 39], [1]),
    ([3, 4, 5, 6, 31], [2]),
    ([25, 26, 28, 29, 38], [9]),
    ([10, 13, 14, 32], [3]),
    ([16, 17, 18, 19, 20, 34], [5]),
    ([21, 22, 35], [6]),
    ([23, 36], [7]),
    ([33], [4]),
    ([7, 8, 9, 11, 12, 15, 24, 27], []),
]
# frequency-deviation profile the staged dispatch is calibrated to (Hz)
DF_TARGETS_1 = [3.98, 1.46, 0.395, 0.50, 1.462, 0.064, 0.60, 0.35, 1.25, 0.002]
PAIR_SET_10 = 5.4   # step-10 set-point for the two synchronization machines

# island 2 cranks up from the big unit at bus 39
STAGES_2 = [
    ([39, 1, 2, 30], [1, 10]),
    ([25, 37], [8]),
    ([3, 4, 5, 6, 31], [2]),
    ([26, 28, 29, 38], [9]),
    ([10, 13, 14, 32], [3]),
    ([16, 17, 18, 19, 20, 34], [5]),
    ([21, 22, 35], [6]),
    ([23, 36], [7]),
    ([33], [4]),
    ([7, 8, 9, 11, 12, 15, 24, 27], []),
]
DF_TARGETS_2 = [-0.30, 0.40, 0.30, 0.55, 0.90, 0.10, 0.45, 0.60, 1.00, 0.002]

# per-island, per-step dispatch tilts (bus -> weight multiplier); step 9 of
# island 1 leans on the western units so the absorbing classical twin does
# not have to haul the whole surplus across the east-west corridor
TILT_1 = {9: {38: 0.85, 39: 1.1}}
# step-level reference set-points: deep-surplus stages crank the
# black-start unit up so its absorbing classical twin stays shallow
SLACK_SET_1 = {9: 5.5}
TILT_2 = {}

BOUNDARY_BUS_2 = 28
THETA_TARGET = 5.34    # degrees at the island-2 boundary bus
VMAG_TARGET = 1.063    # pu at the island-2 boundary bus


def base_network():
    net = load_matrix_case((DATA / "case39.m").read_text())
    gens = {}
    for g in list(net.generators.values()):
        gid = BUS_GEN[g.bus]
        g.id = gid
        g.droop_gain = DROOP[g.bus]
        g.p_min = 0.0
        g.p_max = round(g.p_max * PMAX_SCALE, 2)
        g.ramp_min, g.ramp_max = -RAMP, RAMP
        g.is_reference = (g.bus == 30)
        g.participates_in_sync = g.bus in (30, 38)
        # partially energized stages run light and absorbing-heavy baselines
        # run deep; the interchange-tuned matrix ratings offer neither, so
        # widen both sides. The black-start unit keeps its original floor.
        if g.bus != 30:
            g.q_min = min(g.q_min, -1.0)
        g.q_max = max(g.q_max, 3.0)
        gens[gid] = g
    net.generators = gens
    net.reference_bus = 30
    for b in net.buses.values():
        b.v_min = None   # defer to step-level limits
        b.v_max = None
    return net


def make_path(stages, dispatch):
    steps = []
    for i, (buses, gens) in enumerate(stages, start=1):
        steps.append(CrankStep(
            sequence=i, buses_to_energize=list(buses),
            generators_to_energize=list(gens),
            dispatch={gid: DispatchTarget(p=round(p, 6), q=round(q, 6), v_set=v)
                      for gid, (p, q, v) in sorted(dispatch[i - 1].items())},
            position=i))
    return CrankPath(steps=steps)


def snapshot_through(net, path, t):
    cur = net.copy()
    for s in path.steps[:t]:
        cur = prepare_step(cur, s)
    return cur


def pv_state(snapshot, slack_bus, p_out):
    """Constant-voltage solve over the energized subgraph.

    Machine buses hold their voltage set-points with reactive output free;
    injections come from p_out (by bus). Uses the package's rectangular
    companion solver. Returns (q_gen_by_bus, vm_by_bus, va_by_bus, p_slack).
    """
    from sugarr.powerflow import _PFSystem, _vheld_init, SmoothLimitParams
    snap = snapshot.copy()
    for g in snap.energized_generators():
        g.p_set = p_out.get(g.bus, g.p_set)
    sysobj = _PFSystem(snap, "classical", SmoothLimitParams())
    out = _vheld_init(sysobj, 1e-9, 200)
    if out is None:
        raise RuntimeError("constant-voltage calibration solve stalled")
    warm, qfree = out
    n = sysobj.n
    q_by_bus = {}
    for g in snap.energized_generators():
        if g.id in qfree:
            q_by_bus[g.bus] = qfree[g.id]
    q_by_bus[sysobj.ref.bus] = float(warm[2 * n + 1])
    p_slack = float(warm[2 * n])
    vm_by, va_by = {}, {}
    for b, i in sysobj.idx.items():
        vm_by[b] = float(np.hypot(warm[i], warm[n + i]))
        va_by[b] = float(np.degrees(np.arctan2(warm[n + i], warm[i])))
    return q_by_bus, vm_by, va_by, p_slack


def apply_targets(snapshot, targets):
    for gid, (p, q, v) in targets.items():
        gen = snapshot.generators[gid]
        gen.p_set = p
        gen.q_set = q
        if v is not None:
            gen.v_set = v


def gpf_delta_f(snapshot, targets):
    snap = snapshot.copy()
    apply_targets(snap, targets)
    sol = solve_gpf(snap)
    return sol.delta_f, sol


def solve_scale(f, target, start, tol=1e-10):
    """Find rho with f(rho) = target for monotone-increasing f.

    Expands outward from the seed until the target is bracketed, then
    bisects; f may return None where the probe dispatch fails to solve, which
    simply shrinks that side of the expansion.
    """
    r0 = start
    f0 = f(r0)
    guard = 0
    while f0 is None and guard < 25:
        r0 *= 0.92
        f0 = f(r0)
        guard += 1
    if f0 is None:
        raise RuntimeError("no solvable starting scale")
    lo = hi = r0
    flo = fhi = f0
    step = max(0.04, 0.05 * r0)
    guard = 0
    while flo > target and guard < 200:
        lo = max(lo - step, 1e-4)
        val = f(lo)
        if val is None:
            step *= 0.5
        else:
            flo = val
            step *= 1.4
        guard += 1
        if lo <= 1e-4 and flo > target:
            raise RuntimeError("target below reachable range")
    step = max(0.04, 0.05 * r0)
    guard = 0
    while fhi < target and guard < 200:
        hi = hi + step
        val = f(hi)
        if val is None:
            hi = hi - step
            step *= 0.5
            if step < 1e-6:
                raise RuntimeError("target above solvable range")
        else:
            fhi = val
            step *= 1.4
        guard += 1
    if not (flo <= target <= fhi):
        raise RuntimeError(f"failed to bracket target ({flo} .. {fhi} vs {target})")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if val is None:
            # shrink toward the side that solved most recently
            hi = mid if abs(mid - hi) > abs(mid - lo) else hi
            lo = lo if abs(mid - hi) > abs(mid - lo) else mid
            continue
        if abs(val - target) < tol or hi - lo < 1e-13:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_island(net, stages, df_targets, slack_bus, pair_step10=None,
                     step10_shift=0.0, vset_override=None, label="",
                     slack_set=2.5, tilt=None, slack_steps=None):
    """Calibrate per-step dispatch to the frequency profile.

    For every stage the dispatch scale, the reactive set-points and (when
    needed) nearby voltage set-points are settled together so that three
    states coexist off one data set: the governor baseline hits the target
    frequency deviation inside the voltage band, the classical baseline
    converges, and the step actuates uncorrected whenever its target lies
    inside the frequency bounds.
    """
    from sugarr.powerflow import PowerFlowError

    slack_gid = BUS_GEN[slack_bus]
    dispatch: list[dict] = []
    path_sofar: list[CrankStep] = []
    qset = {}                      # bus -> reactive set-point estimate
    vlocal = dict(vset_override or {})   # bus -> tuned voltage set-point
    for t, ((buses, gens), df_t) in enumerate(zip(stages, df_targets), start=1):
        base = net.copy()
        for s in path_sofar:
            base = prepare_step(base, s)
        step = CrankStep(sequence=t, buses_to_energize=list(buses),
                         generators_to_energize=list(gens), dispatch={}, position=t)
        snap = prepare_step(base, step)
        egens = snap.energized_generators()
        corrective = abs(df_t) > 1.2

        # generator adjacency for set-point nudges
        adj = {}
        for br in snap.in_service_branches():
            adj.setdefault(br.from_bus, set()).add(br.to_bus)
            adj.setdefault(br.to_bus, set()).add(br.from_bus)

        def nearest_gens(bus, radius=3):
            seen, ring = {bus}, [bus]
            found = [g for g in egens if g.bus == bus]
            hops = 0
            while not found and hops < radius:
                nxt = []
                for b in ring:
                    for nb in adj.get(b, ()):
                        if nb not in seen:
                            seen.add(nb)
                            nxt.append(nb)
                ring = nxt
                found = [g for g in egens if g.bus in ring]
                hops += 1
            return found

        fixed = {slack_gid: (slack_steps or {}).get(t, slack_set)}
        if t == len(stages) and pair_step10 is not None:
            fixed = {BUS_GEN[30]: pair_step10, BUS_GEN[38]: pair_step10}
        step_tilt = (tilt or {}).get(t, {})
        weights = {g.id: min(max(g.p_set, 0.5), CAP * g.p_max)
                   * step_tilt.get(g.bus, 1.0)
                   for g in egens if g.id not in fixed}

        load_est = sum(d.big.g for d in snap.energized_loads() if d.kind == "big") * 1.07
        load_est += sum(d.p_d for d in snap.energized_loads()
                        if d.kind == "constant-power")
        gain = sum(g.droop_gain for g in egens)
        need = load_est * 1.015 + df_t * gain - sum(fixed.values())
        rho_seed = max(need / max(sum(weights.values()), 1e-6), 0.1) if weights else 1.0

        def targets_for(rho, q_by_bus):
            tg = {}
            for g in egens:
                if g.id in fixed:
                    p = fixed[g.id]
                else:
                    p = min(weights[g.id] * rho, CAP * g.p_max)
                    if t == len(stages) and step10_shift:
                        if g.bus == (39 if pair_step10 is not None else 38):
                            p -= step10_shift
                        elif g.bus in (31, 32):
                            p += step10_shift / 2.0
                    p = min(max(p, 0.0), CAP * g.p_max)
                tg[g.id] = (p, q_by_bus.get(g.bus, g.q_set),
                            vlocal.get(g.bus, g.v_set))
            return tg

        def probe(q_by_bus):
            def f(rho):
                try:
                    return gpf_delta_f(snap, targets_for(rho, q_by_bus))[0]
                except PowerFlowError:
                    return None
            return f

        def settle_states(w):
            """Yield (rho, q) candidates along the joint reactive/scale
            iteration; every yielded state hits the frequency target exactly,
            so callers accept the first one whose companion checks pass."""
            q_local = dict(qset)
            try:
                rho_local = solve_scale(probe(q_local), df_t, rho_seed)
            except RuntimeError:
                return
            yield rho_local, dict(q_local)
            for _ in range(14):
                tg_local = targets_for(rho_local, q_local)
                try:
                    df_l, sol_l = gpf_delta_f(snap, tg_local)
                except PowerFlowError:
                    return
                snap_l = snap.copy()
                apply_targets(snap_l, tg_local)
                p_cl = {g.bus: g.p_set for g in snap_l.energized_generators()}
                p_gv = {g.bus: sol_l.p_out[g.id] for g in snap_l.energized_generators()}
                try:
                    q_cl, _, _, _ = pv_state(snap_l, slack_bus, p_cl)
                    q_gv, _, _, _ = pv_state(snap_l, slack_bus, p_gv)
                except RuntimeError:
                    return
                drift = 0.0
                for g in egens:
                    lo_q, hi_q = g.q_min, g.q_max
                    q_mix = w * q_cl[g.bus] + (1.0 - w) * q_gv[g.bus]
                    q_tgt = float(np.clip(q_mix, lo_q + 0.02 * (hi_q - lo_q),
                                          hi_q - 0.02 * (hi_q - lo_q)))
                    # relaxed update: the joint reactive/scale iteration is
                    # only marginally stable on the biggest islands
                    q_new = q_local.get(g.bus, q_tgt) + 0.5 * (q_tgt - q_local.get(g.bus, q_tgt))
                    drift = max(drift, abs(q_new - q_local.get(g.bus, q_new)))
                    q_local[g.bus] = q_new
                try:
                    rho_local = solve_scale(probe(q_local), df_t, rho_local)
                except RuntimeError:
                    return
                yield rho_local, dict(q_local)
                if drift < 2e-3:
                    return

        chosen = None
        for attempt in range(8):
            gov_high, gov_low, stall = [], [], []
            outcomes = []
            ladder = ((1.0, 0.925, 0.875, 0.75, 0.5) if corrective else
                      (0.5, 0.625, 0.75, 0.875, 0.925, 1.0, 0.375, 0.25, 0.0))
            for w in ladder:
                trail = list(settle_states(w))
                if not trail:
                    outcomes.append((w, "no states"))
                    continue
                # prefer the most-settled state; walk back only when needed
                order = [len(trail) - 1] if not corrective else                     list(range(len(trail) - 1, -1, -1))
                for k in order:
                    rho_w, q_w = trail[k]
                    tg_w = targets_for(rho_w, q_w)
                    try:
                        df_w, sol_w = gpf_delta_f(snap, tg_w)
                    except PowerFlowError:
                        continue
                    vmax_w, vmin_w = sol_w.v_extremes()
                    snap3 = snap.copy()
                    apply_targets(snap3, tg_w)
                    try:
                        cl = solve_pf(snap3)
                    except PowerFlowError as exc:
                        import re as _re
                        mbus = _re.search(r"bus (\d+)", str(exc))
                        stall.append(int(mbus.group(1)) if mbus else None)
                        continue
                    cl_vmax, cl_vmin = cl.v_extremes()
                    if cl_vmin < 0.895 or cl_vmax > 1.105:
                        stall.append(None)
                        print(f"    (quality reject: classical V [{cl_vmin:.4f}, "
                              f"{cl_vmax:.4f}], slack {cl.p_out[BUS_GEN[slack_bus]]:+.3f})")
                        continue
                    if not corrective and not (0.9006 <= vmin_w and vmax_w <= 1.0994):
                        vm = {b: sol_w.vmag(b) for b in sol_w.v_real}
                        if vmax_w > 1.0994:
                            gov_high.append(max(vm, key=vm.get))
                        if vmin_w < 0.9006:
                            gov_low.append(min(vm, key=vm.get))
                        continue
                    chosen = (w, q_w, rho_w, tg_w, df_w, sol_w, cl, snap3)
                    break
                if chosen is not None:
                    break
                outcomes.append((w, f"none of {len(trail)} states accepted"))
            if chosen is not None:
                break
            print(f"  [{label} step {t} attempt {attempt}] " +
                  "; ".join(f"w={w}:{o}" for w, o in outcomes) +
                  f" | stalls {stall[:12]} high {gov_high[:6]} low {gov_low[:6]}")
            # nudge voltage set-points toward whichever side binds; damp the
            # sizes across attempts so opposing pressures cannot ping-pong
            size = 0.015 * (0.6 ** attempt)
            moved = False
            if gov_high:
                worst = max(set(gov_high), key=gov_high.count)
                for g in nearest_gens(worst):
                    cur = vlocal.get(g.bus, g.v_set)
                    if cur > 0.985:
                        vlocal[g.bus] = round(max(0.985, cur - size), 4)
                        moved = True
            if gov_low:
                worst = max(set(gov_low), key=gov_low.count)
                for g in nearest_gens(worst):
                    cur = vlocal.get(g.bus, g.v_set)
                    if cur < 1.06:
                        vlocal[g.bus] = round(min(1.06, cur + size), 4)
                        moved = True
            if not gov_high and not gov_low and stall:
                worst = max((b for b in stall if b is not None),
                            key=lambda b: stall.count(b), default=None)
                if worst is not None:
                    for g in nearest_gens(worst):
                        cur = vlocal.get(g.bus, g.v_set)
                        if cur < 1.06:
                            vlocal[g.bus] = round(min(1.06, cur + size), 4)
                            moved = True
            if not moved:
                break
        if chosen is None:
            raise RuntimeError(f"{label} step {t}: no reactive blend keeps both "
                               f"baseline states healthy")
        w, q_w, rho, tg, df_fin, sol, cl, snap3 = chosen
        qset.update(q_w)
        vmax, vmin = sol.v_extremes()
        ref = snap3.reference_generator()
        cl_note = (f"classical slack {cl.p_out[ref.id]:+.3f}  "
                   f"V [{cl.v_extremes()[1]:.3f}, {cl.v_extremes()[0]:.3f}]")
        print(f"{label} step {t}: df {df_fin:+.4f} Hz (target {df_t:+.3f})  "
              f"V [{vmin:.4f}, {vmax:.4f}]  w={w}  |  {cl_note}")
        dispatch.append(tg)
        step.dispatch = {gid: DispatchTarget(p=p, q=q, v_set=v)
                         for gid, (p, q, v) in tg.items()}
        path_sofar.append(step)
    return dispatch


def main():
    net = base_network()

    print("== island 1 ==")
    dispatch1 = calibrate_island(net, STAGES_1, DF_TARGETS_1, slack_bus=30,
                                 pair_step10=PAIR_SET_10, label="i1",
                                 vset_override={31: 1.02, 32: 1.02}, tilt=TILT_1,
                                 slack_steps=SLACK_SET_1)
    path1 = make_path(STAGES_1, dispatch1)

    print("== island 2 ==")
    dispatch2 = calibrate_island(net, STAGES_2, DF_TARGETS_2, slack_bus=39,
                                 label="i2", slack_set=9.5,
                                 vset_override={31: 1.02, 32: 1.02, 39: 1.04},
                                 tilt=TILT_2)
    path2 = make_path(STAGES_2, dispatch2)

    case_text = serialize_case(net)
    (DATA / "ieee39_case.yaml").write_text(case_text)
    (DATA / "ieee39_crank.yaml").write_text(serialize_crankpath(path1))
    (DATA / "ieee39_island2_crank.yaml").write_text(serialize_crankpath(path2))

    # round-trip sanity
    net2 = load_case(case_text)
    load_crankpath((DATA / "ieee39_crank.yaml").read_text(), net2)
    load_crankpath((DATA / "ieee39_island2_crank.yaml").read_text(), net2)
    print("scenario files written")


if __name__ == "__main__":
    main()
