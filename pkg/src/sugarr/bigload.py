"""Linear circuit load model fitted from streamed voltage/current samples.

A load is a constant current source (alpha) in parallel with a conductance
and a susceptance. The drawn current is linear in the rectangular bus
voltage, which keeps fitting a plain least-squares problem and lets loads
aggregate in parallel by summing parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class FitError(ValueError):
    """Raised when a sample set cannot pin down the load parameters."""


@dataclass
class BigLoad:
    alpha_r: float = 0.0
    alpha_i: float = 0.0
    g: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        for name in ("alpha_r", "alpha_i", "g", "b"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"BigLoad.{name} must be finite")

    @property
    def passive(self) -> bool:
        # negative fitted conductance is kept but flagged (generation behind the meter)
        return self.g >= 0.0


@dataclass
class MeasurementSample:
    bus: int
    timestamp: float
    v_real: float
    v_imag: float
    i_real: float
    i_imag: float


@dataclass
class FitResult:
    load: BigLoad
    residual_norm: float
    samples_used: int
    standard_errors: tuple[float, float, float, float] | None = None


def big_current(load: BigLoad, v_real: float, v_imag: float):
    """Drawn current (real, imag) at a rectangular voltage; vectorizes over arrays."""
    i_r = load.g * v_real - load.b * v_imag + load.alpha_r
    i_i = load.g * v_imag + load.b * v_real + load.alpha_i
    return i_r, i_i


def big_power(load: BigLoad, v_real: float, v_imag: float) -> tuple[float, float]:
    """Complex power S = V * conj(I) drawn by the load at the given voltage."""
    i_r, i_i = big_current(load, v_real, v_imag)
    p = v_real * i_r + v_imag * i_i
    q = v_imag * i_r - v_real * i_i
    return p, q


def _design_matrix(samples: list[MeasurementSample]) -> tuple[np.ndarray, np.ndarray]:
    a = np.zeros((2 * len(samples), 4))
    rhs = np.zeros(2 * len(samples))
    for k, s in enumerate(samples):
        a[2 * k] = (1.0, 0.0, s.v_real, -s.v_imag)
        a[2 * k + 1] = (0.0, 1.0, s.v_imag, s.v_real)
        rhs[2 * k] = s.i_real
        rhs[2 * k + 1] = s.i_imag
    return a, rhs


def fit_big(samples: list[MeasurementSample]) -> FitResult:
    """Least-squares fit of (alpha_r, alpha_i, g, b) from measurement samples.

    Needs at least two samples at non-collinear voltage phasors; otherwise the
    4-parameter model is under-determined and the unresolvable direction is
    reported in the error.
    """
    if len(samples) < 2:
        raise FitError("need at least 2 samples to fit a load")
    a, rhs = _design_matrix(samples)
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    scale = sv[0] if sv[0] > 0 else 1.0
    if sv[-1] <= 1e-9 * scale:
        null = vt[-1]
        names = ("alpha_r", "alpha_i", "g", "b")
        direction = " ".join(f"{c:+.3f}*{n}" for c, n in zip(null, names) if abs(c) > 1e-6)
        raise FitError(f"under-determined sample set; unresolved direction {direction}")
    theta = vt.T @ ((u.T @ rhs) / sv)
    resid = a @ theta - rhs
    rnorm = float(np.linalg.norm(resid))
    dof = max(len(rhs) - 4, 1)
    sigma2 = float(resid @ resid) / dof
    cov = (vt.T * (1.0 / sv**2)) @ vt * sigma2
    se = tuple(float(v) for v in np.sqrt(np.maximum(np.diag(cov), 0.0)))
    return FitResult(load=BigLoad(*map(float, theta)), residual_norm=rnorm,
                     samples_used=len(samples), standard_errors=se)


def aggregate(loads: list[BigLoad]) -> BigLoad:
    """Parallel combination: parameters add component-wise; empty list is a zero load."""
    out = BigLoad()
    for ld in loads:
        out = BigLoad(out.alpha_r + ld.alpha_r, out.alpha_i + ld.alpha_i,
                      out.g + ld.g, out.b + ld.b)
    return out


def pq_to_big(p: float, q: float, v_real: float = 1.0, v_imag: float = 0.0) -> BigLoad:
    """Seed a load from P/Q data so it draws exactly (p, q) at the given voltage.

    The conductance and susceptance carry the full power at the operating
    point, so the constant-current part is zero there by construction.
    """
    vsq = v_real * v_real + v_imag * v_imag
    if vsq == 0.0:
        raise ValueError("cannot seed a load at zero voltage")
    return BigLoad(alpha_r=0.0, alpha_i=0.0, g=p / vsq, b=-q / vsq)


# ---------------------------------------------------------------------------
# per-bus sliding measurement windows
# ---------------------------------------------------------------------------

DEFAULT_WINDOW = 256


@dataclass
class MeasurementWindow:
    """Most-recent samples for one bus, deduplicated by timestamp."""

    bus: int
    limit: int = DEFAULT_WINDOW
    samples: list[MeasurementSample] = field(default_factory=list)
    _seen: set[float] = field(default_factory=set)

    def add(self, sample: MeasurementSample) -> bool:
        if sample.bus != self.bus:
            raise ValueError(f"sample for bus {sample.bus} fed to window of bus {self.bus}")
        if sample.timestamp in self._seen:
            return False  # at-least-once delivery: drop replays
        self._seen.add(sample.timestamp)
        self.samples.append(sample)
        if len(self.samples) > self.limit:
            dropped = self.samples.pop(0)
            self._seen.discard(dropped.timestamp)
        return True

    def fit(self) -> FitResult:
        return fit_big(self.samples)


def synth_stream(load: BigLoad, bus: int, n: int, *, v0: complex = 1.0 + 0.0j,
                 noise: float = 0.0, drift: float = 0.0, seed: int = 0,
                 t0: float = 0.0, dt: float = 1.0) -> list[MeasurementSample]:
    """Synthetic measurement stream for a load around an operating voltage.

    Voltage wanders around v0 so the fit sees phasor diversity; optional
    Gaussian noise applies to the currents and `drift` scales the load
    linearly over the stream (models a slowly changing feeder).
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        ang = rng.uniform(-0.03, 0.03)
        mag = 1.0 + rng.uniform(-0.05, 0.05)
        v = v0 * mag * complex(math.cos(ang), math.sin(ang))
        scale = 1.0 + drift * (k / max(n - 1, 1))
        snapshot = BigLoad(load.alpha_r * scale, load.alpha_i * scale,
                           load.g * scale, load.b * scale)
        i_r, i_i = big_current(snapshot, v.real, v.imag)
        out.append(MeasurementSample(
            bus=bus, timestamp=t0 + k * dt, v_real=v.real, v_imag=v.imag,
            i_real=i_r + rng.normal(0.0, noise) if noise else i_r,
            i_imag=i_i + rng.normal(0.0, noise) if noise else i_i))
    return out
