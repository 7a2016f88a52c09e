"""Empirical internal-stability checks by impulse injection.

Perturbations enter at four points of the loop: the plant state (d_x), the
plant input (d_u), the measurement (d_y) and the controller's internal state
update (d_xhat). Each is observed on x, u, y and xhat.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .architectures import CHANNELS, reference_closed_loop
from .lti import LTISystem, SpectralSeries, is_schur_stable
from .realizations import SFSimplified, SFStandard, robust_margin
from .synthesis import SystemResponseSF

SIGNALS = ("x", "u", "y", "xhat")
DEFAULT_TOL = 1e-6


def default_probe_horizon(T: int) -> int:
    return max(4 * T, 50)


@dataclass
class ProbeEntry:
    peak: float
    tail: float
    decayed: bool


@dataclass
class ProbeReport:
    horizon: int
    tol: float
    grid: dict = field(default_factory=dict)       # (channel, signal) -> ProbeEntry
    responses: dict = field(default_factory=dict)  # (channel, signal) -> (steps, out_dim, in_dim)

    @property
    def all_decayed(self) -> bool:
        return all(e.decayed for e in self.grid.values())

    def tail_matrix(self) -> np.ndarray:
        return np.array([[self.grid[(c, s)].tail if (c, s) in self.grid else np.nan
                          for s in SIGNALS] for c in CHANNELS])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", *SIGNALS])
        for c, row in zip(CHANNELS, self.tail_matrix()):
            w.writerow([c, *(format(v, ".17g") for v in row)])
        return buf.getvalue()


def _channel_dim(sys: LTISystem, channel: str) -> int:
    return {"d_x": sys.nx, "d_u": sys.nu, "d_y": sys.ny, "d_xhat": sys.nx}[channel]


def internal_stability_probe(sys: LTISystem, controller, horizon: int | None = None,
                             tol: float = DEFAULT_TOL, amplitude: float = 1.0) -> ProbeReport:
    """Inject unit impulses on every coordinate of every channel at t = 0.

    Each response is simulated for ``2 * horizon`` steps. ``peak`` is the
    largest magnitude seen; ``tail`` is the largest magnitude from step
    ``horizon`` on. Non-decay is reported, never raised.
    """
    if horizon is None:
        horizon = default_probe_horizon(getattr(controller, "T", 1))
    steps = 2 * horizon
    report = ProbeReport(horizon, tol)
    for ch in CHANNELS:
        if ch == "d_xhat" and not getattr(controller, "accepts_xhat_disturbance", True):
            continue
        dim = _channel_dim(sys, ch)
        collected: dict[str, list] = {s: [] for s in SIGNALS}
        for j in range(dim):
            d = np.zeros((steps, dim))
            d[0, j] = amplitude
            trace = reference_closed_loop(sys, controller, {ch: d}, steps)
            for s in SIGNALS:
                collected[s].append(trace[s] if s in trace else None)
        for s in SIGNALS:
            if any(r is None for r in collected[s]):
                continue
            resp = np.stack(collected[s], axis=2)
            peak = float(np.max(np.abs(resp), initial=0.0))
            tail = float(np.max(np.abs(resp[horizon:]), initial=0.0))
            report.grid[(ch, s)] = ProbeEntry(peak, tail, tail <= tol)
            report.responses[(ch, s)] = resp
    return report


def xhat_to_state_prediction(sys: LTISystem, phi_xx: SpectralSeries, steps: int) -> np.ndarray:
    """Impulse response of (zI - A)^-1 - Phi_xx, taps 0..steps-1."""
    out = np.zeros((steps, sys.nx, sys.nx))
    power = np.eye(sys.nx)
    for t in range(1, steps):
        out[t] = power - phi_xx[t]
        power = sys.A @ power
    return out


def closed_loop_map_check(sys: LTISystem, resp: SystemResponseSF, tol: float = 1e-8,
                          realization: str = "auto", extra_steps: int = 10) -> dict:
    """Impulse d_x = e_j at t = 0; x and u traces must equal the j-th columns of Phi_x, Phi_u.

    Taps beyond the horizon must be zero; their largest magnitude is
    reported as ``beyond_horizon``.
    """
    if realization == "auto":
        realization = "simplified" if is_schur_stable(sys.A)[0] else "standard"
    ctrl = SFSimplified(sys, resp.phi_u) if realization == "simplified" else SFStandard(resp)
    T = resp.horizon
    steps = T + 1 + extra_steps
    dev_x = dev_u = beyond = 0.0
    for j in range(sys.nx):
        d = np.zeros((steps, sys.nx))
        d[0, j] = 1.0
        tr = reference_closed_loop(sys, ctrl, {"d_x": d}, steps)
        for t in range(steps):
            want_x = resp.phi_x[t][:, j]
            want_u = resp.phi_u[t][:, j]
            if t <= T:
                dev_x = max(dev_x, float(np.max(np.abs(tr["x"][t] - want_x))))
                dev_u = max(dev_u, float(np.max(np.abs(tr["u"][t] - want_u))))
            else:
                beyond = max(beyond, float(np.max(np.abs(tr["x"][t]))),
                             float(np.max(np.abs(tr["u"][t]))))
    return {"realization": realization, "max_dev_x": dev_x, "max_dev_u": dev_u,
            "beyond_horizon": beyond, "ok": max(dev_x, dev_u) <= tol}


def certify_unstable_extension(sys_full: LTISystem, A_s, A_u, resp: SystemResponseSF,
                               T_sim: int = 200, tol: float = DEFAULT_TOL) -> dict:
    """Margin check plus a simulation of the full plant under the controller designed for A_s.

    The controller is the simplified realization built on the model
    ``(A_s, B)``. The simulation runs whether or not the margin certifies.
    """
    A_s = np.atleast_2d(np.asarray(A_s, dtype=float))
    A_u = np.atleast_2d(np.asarray(A_u, dtype=float))
    if not np.allclose(A_s + A_u, sys_full.A, rtol=0, atol=1e-12):
        raise ValueError("A_s + A_u does not reproduce the full plant's A")
    margin = robust_margin(A_s, A_u, resp.phi_x)
    model = LTISystem.state_feedback(A_s, sys_full.B)
    ctrl = SFSimplified(model, resp.phi_u)
    peak = 0.0
    final = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(sys_full.nx):
            d = np.zeros((T_sim, sys_full.nx))
            d[0, j] = 1.0
            tr = reference_closed_loop(sys_full, ctrl, {"d_x": d}, T_sim)
            mag = np.abs(np.concatenate([tr["x"], tr["u"]], axis=1))
            peak = max(peak, float(np.max(mag)))
            final = max(final, float(np.max(mag[-max(1, T_sim // 10):])))
    finite = bool(np.isfinite(peak) and np.isfinite(final))
    return {
        "margin": margin.value,
        "certified": margin.certified,
        "peak": peak,
        "final": final,
        "finite": finite,
        "decayed": finite and final <= tol,
    }
