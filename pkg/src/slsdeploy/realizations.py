"""Step-wise controller realizations built from system responses.

Every controller exposes ``initial_state()`` and a pure
``step(y, state, xhat_disturbance=None) -> (u, new_state)``. States are
immutable; history arrays hold the most recent sample in row 0 and read as
zero before t = 0.

    SFStandard    delta = x - xhat, u = Phi_u * delta, xhat = (z Phi_x - z I) * delta
    SFSimplified  delta = x - A x[t-1] - B u[t-1], u = Phi_u * delta
    OFStandard    beta / ybar recursions with the (I + Phi_uy[0] D) loop solve
    OFSimplified  xhat[t+1] = A xhat + B u, delta = y - C xhat - D u, u = Phi_uy * delta
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .lti import LTISystem, SpectralSeries, induced_linf_norm, is_schur_stable
from .synthesis import SystemResponseOF, SystemResponseSF

LOOP_COND_LIMIT = 1e12


def _shift_in(history: np.ndarray, newest: np.ndarray) -> np.ndarray:
    """Push ``newest`` into row 0 and drop the oldest row."""
    if len(history) == 0:
        return history
    out = np.empty_like(history)
    out[0] = newest
    out[1:] = history[:-1]
    out.setflags(write=False)
    return out


def _frozen_vec(v) -> np.ndarray:
    a = np.array(v, dtype=float)
    a.setflags(write=False)
    return a


def _apply_taps(series: SpectralSeries, first_tau: int, samples: np.ndarray) -> np.ndarray:
    """sum_k series[first_tau + k] @ samples[k]."""
    r = series.shape[0]
    out = np.zeros(r)
    for k in range(len(samples)):
        el = series[first_tau + k]
        if el.any():
            out += el @ samples[k]
    return out


def _check_measurement(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"measurement must have shape ({n},), got {y.shape}")
    return y


def _loop_matrix(phi0: np.ndarray, D: np.ndarray) -> np.ndarray | None:
    """(I + Phi_uy[0] D)^-1, or None when the loop is absent."""
    M = np.eye(phi0.shape[0]) + phi0 @ D
    if np.array_equal(M, np.eye(M.shape[0])):
        return None
    if np.linalg.cond(M) > LOOP_COND_LIMIT:
        raise np.linalg.LinAlgError("I + Phi_uy[0] D is singular; the algebraic loop has no solution")
    return np.linalg.inv(M)


def _require_stable(A, name: str):
    stable, rho = is_schur_stable(A)
    if not stable:
        raise ValueError(f"{name} needs a Schur-stable A, spectral radius is {rho:.6g}")


@dataclass(frozen=True)
class SFStandardState:
    dhist: np.ndarray  # delta[t-1], ..., delta[t-T+1]
    xhat: np.ndarray   # xhat[t]


@dataclass(frozen=True)
class SFSimplifiedState:
    dhist: np.ndarray  # delta[t-1], ..., delta[t-T+1]
    xhat: np.ndarray   # A x[t-1] + B u[t-1]


@dataclass(frozen=True)
class OFStandardState:
    beta: np.ndarray   # beta[t], ..., beta[t-T+1]
    ybar: np.ndarray   # ybar[t-1], ..., ybar[t-T]
    u_prev: np.ndarray


@dataclass(frozen=True)
class OFSimplifiedState:
    xhat: np.ndarray   # xhat[t]
    dhist: np.ndarray  # delta[t-1], ..., delta[t-T]
    u_prev: np.ndarray


class SFStandard:
    """Standard state-feedback realization; works for unstable plants."""

    feedthrough = True

    def __init__(self, resp: SystemResponseSF):
        self.resp = resp
        self.nx = resp.phi_x.shape[0]
        self.nu = resp.phi_u.shape[0]
        self.ny = self.nx
        self.T = resp.horizon

    def initial_state(self) -> SFStandardState:
        return SFStandardState(_frozen_vec(np.zeros((max(self.T - 1, 0), self.nx))),
                               _frozen_vec(np.zeros(self.nx)))

    def step(self, x, state: SFStandardState, xhat_disturbance=None):
        x = _check_measurement(x, self.nx)
        delta = x - state.xhat
        window = np.vstack([delta[None, :], state.dhist])  # delta[t], ..., delta[t-T+1]
        u = _apply_taps(self.resp.phi_u, 1, window)
        xhat = _apply_taps(self.resp.phi_x, 2, window[: self.T - 1])
        if xhat_disturbance is not None:
            xhat = xhat + xhat_disturbance
        return u, SFStandardState(_shift_in(state.dhist, delta), _frozen_vec(xhat))

    def internals(self, state: SFStandardState) -> dict:
        last = state.dhist[0] if len(state.dhist) else np.full(self.nx, np.nan)
        return {"delta": last, "xhat": state.xhat}


class SFSimplified:
    """Simplified state-feedback realization; never stores Phi_x."""

    feedthrough = True

    def __init__(self, sys: LTISystem, phi_u: SpectralSeries):
        _require_stable(sys.A, "the simplified state-feedback realization")
        if phi_u.shape != (sys.nu, sys.nx):
            raise ValueError(f"Phi_u has shape {phi_u.shape}, expected {(sys.nu, sys.nx)}")
        self.sys = sys
        self.phi_u = phi_u
        self.nx, self.nu, self.ny = sys.nx, sys.nu, sys.nx
        self.T = phi_u.horizon

    def initial_state(self) -> SFSimplifiedState:
        return SFSimplifiedState(_frozen_vec(np.zeros((max(self.T - 1, 0), self.nx))),
                                 _frozen_vec(np.zeros(self.nx)))

    def step(self, x, state: SFSimplifiedState, xhat_disturbance=None):
        x = _check_measurement(x, self.nx)
        delta = x - state.xhat
        window = np.vstack([delta[None, :], state.dhist])
        u = _apply_taps(self.phi_u, 1, window)
        xhat = self.sys.A @ x + self.sys.B @ u
        if xhat_disturbance is not None:
            xhat = xhat + xhat_disturbance
        return u, SFSimplifiedState(_shift_in(state.dhist, delta), _frozen_vec(xhat))

    def internals(self, state: SFSimplifiedState) -> dict:
        last = state.dhist[0] if len(state.dhist) else np.full(self.nx, np.nan)
        return {"delta": last, "xhat": state.xhat}


class OFStandard:
    """Standard output-feedback realization with the ybar = y - D u loop."""

    accepts_xhat_disturbance = False

    def __init__(self, resp: SystemResponseOF, sys: LTISystem):
        self.resp = resp
        self.sys = sys
        self.nx, self.nu, self.ny = sys.dims
        if resp.phi_uy.shape != (self.nu, self.ny):
            raise ValueError(f"Phi_uy has shape {resp.phi_uy.shape}, expected {(self.nu, self.ny)}")
        self.T = resp.horizon
        self.phi0 = resp.phi_uy[0]
        self.loop = _loop_matrix(self.phi0, sys.D)
        self.feedthrough = bool(self.phi0.any())

    def initial_state(self) -> OFStandardState:
        return OFStandardState(_frozen_vec(np.zeros((self.T, self.nx))),
                               _frozen_vec(np.zeros((self.T, self.ny))),
                               _frozen_vec(np.zeros(self.nu)))

    def step(self, y, state: OFStandardState, xhat_disturbance=None):
        if xhat_disturbance is not None and np.any(xhat_disturbance):
            raise ValueError("the standard output-feedback realization has no xhat signal")
        y = _check_measurement(y, self.ny)
        r = self.resp
        u_prime = _apply_taps(r.phi_ux, 1, state.beta) + _apply_taps(r.phi_uy, 1, state.ybar)
        rhs = self.phi0 @ y + u_prime
        u = rhs if self.loop is None else self.loop @ rhs
        ybar = y - self.sys.D @ u
        ywin = np.vstack([ybar[None, :], state.ybar])  # ybar[t], ..., ybar[t-T]
        beta_next = -_apply_taps(r.phi_xx, 2, state.beta[: self.T - 1]) \
            - _apply_taps(r.phi_xy, 1, ywin[: self.T])
        return u, OFStandardState(_shift_in(state.beta, beta_next), _shift_in(state.ybar, ybar),
                                  _frozen_vec(u))

    def internals(self, state: OFStandardState) -> dict:
        return {"beta": state.beta[0], "ybar": state.ybar[0]}


class OFSimplified:
    """Simplified output-feedback realization for stable plants.

    With D != 0 the current input appears on both sides of
    ``u = Phi_uy[0] (y - C xhat - D u) + ...``; each step solves the
    ``(I + Phi_uy[0] D)`` system.
    """

    def __init__(self, sys: LTISystem, phi_uy: SpectralSeries):
        _require_stable(sys.A, "the simplified output-feedback realization")
        if phi_uy.shape != (sys.nu, sys.ny):
            raise ValueError(f"Phi_uy has shape {phi_uy.shape}, expected {(sys.nu, sys.ny)}")
        if phi_uy.start_tau != 0 and len(phi_uy):
            phi_uy = SpectralSeries(0, phi_uy.taps(0, phi_uy.horizon))
        self.sys = sys
        self.phi_uy = phi_uy
        self.nx, self.nu, self.ny = sys.dims
        self.T = max(phi_uy.horizon, 0)
        self.phi0 = phi_uy[0]
        self.loop = _loop_matrix(self.phi0, sys.D)
        self.feedthrough = bool(self.phi0.any())

    def initial_state(self) -> OFSimplifiedState:
        return OFSimplifiedState(_frozen_vec(np.zeros(self.nx)),
                                 _frozen_vec(np.zeros((self.T, self.ny))),
                                 _frozen_vec(np.zeros(self.nu)))

    def step(self, y, state: OFSimplifiedState, xhat_disturbance=None):
        y = _check_measurement(y, self.ny)
        s = self.sys
        innov = y - s.C @ state.xhat
        u_prime = _apply_taps(self.phi_uy, 1, state.dhist)
        rhs = self.phi0 @ innov + u_prime
        u = rhs if self.loop is None else self.loop @ rhs
        delta = innov - s.D @ u
        xhat = s.A @ state.xhat + s.B @ u
        if xhat_disturbance is not None:
            xhat = xhat + xhat_disturbance
        return u, OFSimplifiedState(_frozen_vec(xhat), _shift_in(state.dhist, delta), _frozen_vec(u))

    def internals(self, state: OFSimplifiedState) -> dict:
        last = state.dhist[0] if len(state.dhist) else np.full(self.ny, np.nan)
        return {"delta": last, "xhat": state.xhat}


# thin functional wrappers

def sf_standard_step(resp: SystemResponseSF, x, state=None):
    ctrl = SFStandard(resp)
    return ctrl.step(x, ctrl.initial_state() if state is None else state)


def sf_simplified_step(sys: LTISystem, phi_u: SpectralSeries, x, state=None):
    ctrl = SFSimplified(sys, phi_u)
    return ctrl.step(x, ctrl.initial_state() if state is None else state)


def of_standard_step(resp: SystemResponseOF, sys: LTISystem, y, state=None):
    ctrl = OFStandard(resp, sys)
    return ctrl.step(y, ctrl.initial_state() if state is None else state)


def of_simplified_step(sys: LTISystem, phi_uy: SpectralSeries, y, state=None):
    ctrl = OFSimplified(sys, phi_uy)
    return ctrl.step(y, ctrl.initial_state() if state is None else state)


class Margin(NamedTuple):
    value: float
    certified: bool


def robust_margin(A_s, A_u, phi_x: SpectralSeries) -> Margin:
    """Induced l_inf norm of ``A_u Phi_x``; below one certifies the full plant A_s + A_u."""
    A_s = np.atleast_2d(np.asarray(A_s, dtype=float))
    A_u = np.atleast_2d(np.asarray(A_u, dtype=float))
    if A_s.shape != A_u.shape or A_u.shape[1] != phi_x.shape[0]:
        raise ValueError(f"shape mismatch: A_s {A_s.shape}, A_u {A_u.shape}, Phi_x {phi_x.shape}")
    value = induced_linf_norm(phi_x.left(A_u))
    return Margin(value, value < 1.0)


def run_open_loop(controller, inputs, xhat_disturbances=None):
    """Drive a controller with a measurement sequence; returns (u rows, final state)."""
    state = controller.initial_state()
    us = []
    for t, y in enumerate(inputs):
        d = None if xhat_disturbances is None else xhat_disturbances[t]
        u, state = controller.step(y, state, d)
        us.append(u)
    return np.array(us), state


def measured_frequency_response(controller, z: complex, n_steps: int = 600) -> np.ndarray:
    """Estimate K(z) for |z| > 1 by driving with z^t e_i.

    The controller is real, so the real and imaginary parts of the drive are
    run separately and recombined. Transients decay relative to |z|^t.
    """
    ny = controller.ny
    K = np.zeros((controller.nu, ny), dtype=complex)
    t = np.arange(n_steps)
    powers = z ** t
    for i in range(ny):
        re = np.zeros((n_steps, ny))
        im = np.zeros((n_steps, ny))
        re[:, i] = powers.real
        im[:, i] = powers.imag
        u_re, _ = run_open_loop(controller, re)
        u_im, _ = run_open_loop(controller, im)
        K[:, i] = (u_re[-1] + 1j * u_im[-1]) / powers[-1]
    return K
