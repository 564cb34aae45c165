"""Independent polar-form PV/PQ Newton power flow, used only for data checks
and scenario construction. Deliberately textbook-style and separate from the
package's rectangular solvers so it can serve as a cross-check."""

import numpy as np


def ybus(nbus, branches):
    """branches: (f, t, r, x, b, tap) with 1-based bus ids."""
    y = np.zeros((nbus, nbus), dtype=complex)
    for f, t, r, x, b, tap in branches:
        f, t = int(f) - 1, int(t) - 1
        ys = 1.0 / complex(r, x)
        ysh = 0.5j * b
        tap = tap if tap else 1.0
        y[f, f] += (ys + ysh) / tap**2
        y[t, t] += ys + ysh
        y[f, t] += -ys / tap
        y[t, f] += -ys / tap
    return y


def solve_pv_pq(nbus, branches, slack, pv, p_inj, q_inj, vset, tol=1e-10,
                max_iter=60, yshunt=None, vm0=None, va0=None):
    """Standard polar NR. slack: bus (1-based); pv: list of PV buses.

    p_inj/q_inj: net injections (gen - load) per unit. vset: magnitude targets
    for slack and PV buses. yshunt: optional per-bus admittance added to the
    diagonal (linear-circuit loads). vm0/va0 (radians) warm-start the solve.
    Returns (vm, va_deg, s_inj, mismatch).
    """
    y = ybus(nbus, branches)
    if yshunt is not None:
        y[np.arange(nbus), np.arange(nbus)] += yshunt
    g, b = y.real, y.imag
    vm = np.ones(nbus) if vm0 is None else np.array(vm0, dtype=float)
    va = np.zeros(nbus) if va0 is None else np.array(va0, dtype=float)
    sl = slack - 1
    pv0 = [p - 1 for p in pv]
    vm[sl] = vset[slack]
    for p in pv0:
        vm[p] = vset[p + 1]
    pq0 = [i for i in range(nbus) if i != sl and i not in pv0]
    ang_idx = [i for i in range(nbus) if i != sl]
    for _ in range(max_iter):
        vc = vm * np.exp(1j * va)
        s = vc * np.conj(y @ vc)
        dp = p_inj - s.real
        dq = q_inj - s.imag
        mis = np.concatenate([dp[ang_idx], dq[pq0]])
        if np.max(np.abs(mis)) < tol:
            break
        n_a, n_m = len(ang_idx), len(pq0)
        jac = np.zeros((n_a + n_m, n_a + n_m))
        for r, i in enumerate(ang_idx):
            for c, j in enumerate(ang_idx):
                if i == j:
                    jac[r, c] = -s[i].imag - b[i, i] * vm[i] ** 2
                else:
                    jac[r, c] = vm[i] * vm[j] * (g[i, j] * np.sin(va[i] - va[j])
                                                 - b[i, j] * np.cos(va[i] - va[j]))
            for c, j in enumerate(pq0):
                if i == j:
                    jac[r, n_a + c] = s[i].real / vm[i] + g[i, i] * vm[i]
                else:
                    jac[r, n_a + c] = vm[i] * (g[i, j] * np.cos(va[i] - va[j])
                                               + b[i, j] * np.sin(va[i] - va[j]))
        for r, i in enumerate(pq0):
            for c, j in enumerate(ang_idx):
                if i == j:
                    jac[n_a + r, c] = s[i].real - g[i, i] * vm[i] ** 2
                else:
                    jac[n_a + r, c] = -vm[i] * vm[j] * (g[i, j] * np.cos(va[i] - va[j])
                                                        + b[i, j] * np.sin(va[i] - va[j]))
            for c, j in enumerate(pq0):
                if i == j:
                    jac[n_a + r, n_a + c] = s[i].imag / vm[i] - b[i, i] * vm[i]
                else:
                    jac[n_a + r, n_a + c] = vm[i] * (g[i, j] * np.sin(va[i] - va[j])
                                                     - b[i, j] * np.cos(va[i] - va[j]))
        upd = np.linalg.solve(jac, mis)
        # damped update: keep the direction, halve until the mismatch shrinks
        base_norm = np.linalg.norm(mis)
        scale, best, best_norm = 1.0, 1.0, np.inf
        for _ in range(6):
            va_t = va.copy(); vm_t = vm.copy()
            va_t[ang_idx] += scale * upd[:n_a]
            vm_t[pq0] += scale * upd[n_a:]
            vc_t = vm_t * np.exp(1j * va_t)
            s_t = vc_t * np.conj(y @ vc_t)
            m_t = np.concatenate([(p_inj - s_t.real)[ang_idx], (q_inj - s_t.imag)[pq0]])
            nt = np.linalg.norm(m_t)
            if nt < best_norm:
                best, best_norm = scale, nt
            if nt < base_norm:
                break
            scale *= 0.5
        va[ang_idx] += best * upd[:n_a]
        vm[pq0] += best * upd[n_a:]
    vc = vm * np.exp(1j * va)
    s = vc * np.conj(y @ vc)
    return vm, np.degrees(va), s, np.max(np.abs(np.concatenate([dp[ang_idx], dq[pq0]])))
