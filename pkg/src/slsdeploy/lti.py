"""Discrete-time LTI plants, FIR spectral series, and simulation traces.

Plants follow

    x[t+1] = A x[t] + B u[t] + d_x[t]
    y[t]   = C x[t] + D u[t] + d_y[t]

and a :class:`SpectralSeries` stores the taps ``Phi[start_tau..T]`` of the
FIR transfer matrix ``sum_tau z^-tau Phi[tau]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse.linalg as spla

DENSE_EIG_LIMIT = 64
POWER_TOL = 1e-12


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LTISystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray = None
    D: np.ndarray = None

    def __post_init__(self):
        A = _frozen(self.A, 2)
        B = _frozen(self.B, 2)
        nx = A.shape[0]
        if A.shape != (nx, nx):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != nx:
            raise ValueError(f"B has {B.shape[0]} rows, expected {nx}")
        C = np.eye(nx) if self.C is None else self.C
        C = _frozen(C, 2)
        if C.shape[1] != nx:
            raise ValueError(f"C has {C.shape[1]} columns, expected {nx}")
        D = np.zeros((C.shape[0], B.shape[1])) if self.D is None else self.D
        D = _frozen(D, 2)
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.nx, self.nu, self.ny

    @property
    def is_state_feedback(self) -> bool:
        return (
            self.ny == self.nx
            and np.array_equal(self.C, np.eye(self.nx))
            and not np.any(self.D)
        )

    @classmethod
    def state_feedback(cls, A, B) -> "LTISystem":
        A = np.asarray(A, dtype=float)
        return cls(A, B, np.eye(A.shape[0]), None)

    def impulse_response(self, T: int) -> "SpectralSeries":
        """Plant taps G[0] = D, G[tau] = C A^(tau-1) B up to ``T``."""
        taps = [self.D]
        power = np.eye(self.nx)
        for _ in range(T):
            taps.append(self.C @ power @ self.B)
            power = self.A @ power
        return SpectralSeries(0, taps)

    def transfer(self, z: complex) -> np.ndarray:
        """G(z) = C (zI - A)^-1 B + D."""
        res = np.linalg.solve(z * np.eye(self.nx) - self.A, self.B)
        return self.C @ res + self.D


def _check_vec(v, n, what) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {v.shape}")
    return v


def plant_step(sys: LTISystem, x, u, d_x=None) -> np.ndarray:
    x = _check_vec(x, sys.nx, "x")
    u = _check_vec(u, sys.nu, "u")
    out = sys.A @ x + sys.B @ u
    if d_x is not None:
        out = out + _check_vec(d_x, sys.nx, "d_x")
    return out


def plant_output(sys: LTISystem, x, u, d_y=None) -> np.ndarray:
    x = _check_vec(x, sys.nx, "x")
    u = _check_vec(u, sys.nu, "u")
    out = sys.C @ x + sys.D @ u
    if d_y is not None:
        out = out + _check_vec(d_y, sys.ny, "d_y")
    return out


def spectral_radius(A) -> float:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {A.shape}")
    n = A.shape[0]
    if n == 0:
        return 0.0
    if n <= DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(A))))
    try:
        vals = spla.eigs(A, k=1, which="LM", tol=POWER_TOL, return_eigenvectors=False)
        return float(np.abs(vals[0]))
    except spla.ArpackNoConvergence:
        return float(np.max(np.abs(np.linalg.eigvals(A))))


def is_schur_stable(A, tol: float = 0.0) -> tuple[bool, float]:
    """Return ``(rho(A) < 1 - tol, rho(A))``."""
    rho = spectral_radius(A)
    return rho < 1.0 - tol, rho


@dataclass(frozen=True, eq=False)
class SpectralSeries:
    """FIR transfer matrix ``sum_{tau=start_tau}^{T} z^-tau Phi[tau]``.

    Taps outside ``[start_tau, horizon]`` read as zero matrices.
    """

    start_tau: int
    elements: np.ndarray

    def __init__(self, start_tau: int, elements, shape: tuple[int, int] | None = None):
        if start_tau < 0:
            raise ValueError("start_tau must be non-negative")
        if isinstance(elements, np.ndarray) and elements.ndim == 3:
            arr = np.array(elements, dtype=float)
        else:
            elements = [np.atleast_2d(np.asarray(e, dtype=float)) for e in elements]
            if elements:
                shapes = {e.shape for e in elements}
                if len(shapes) != 1:
                    raise ValueError(f"non-uniform element shapes {sorted(shapes)}")
                arr = np.stack(elements)
            else:
                if shape is None:
                    raise ValueError("an empty series needs an explicit shape")
                arr = np.zeros((0, *shape))
        if shape is not None and arr.shape[1:] != tuple(shape):
            raise ValueError(f"elements have shape {arr.shape[1:]}, expected {shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "start_tau", int(start_tau))
        object.__setattr__(self, "elements", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.elements.shape[1], self.elements.shape[2]

    @property
    def horizon(self) -> int:
        return self.start_tau + len(self.elements) - 1

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, tau: int) -> np.ndarray:
        k = tau - self.start_tau
        if 0 <= k < len(self.elements):
            return self.elements[k]
        return np.zeros(self.shape)

    def taps(self, start: int, stop: int) -> np.ndarray:
        """Stack of taps ``start..stop`` inclusive, zero-padded, shape (n, r, c)."""
        return np.stack([self[tau] for tau in range(start, stop + 1)]) if stop >= start \
            else np.zeros((0, *self.shape))

    def evaluate(self, z: complex) -> np.ndarray:
        out = np.zeros(self.shape, dtype=complex)
        for k, el in enumerate(self.elements):
            out += el * z ** (-(self.start_tau + k))
        return out

    def truncated(self, max_tau: int) -> "SpectralSeries":
        keep = max(0, min(len(self.elements), max_tau - self.start_tau + 1))
        return SpectralSeries(self.start_tau, self.elements[:keep], shape=self.shape)

    def left(self, M) -> "SpectralSeries":
        """The series ``M @ Phi``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return SpectralSeries(self.start_tau, np.einsum("ij,tjk->tik", M, self.elements)
                              if len(self) else np.zeros((0, M.shape[0], self.shape[1])),
                              shape=(M.shape[0], self.shape[1]))

    def right(self, M) -> "SpectralSeries":
        """The series ``Phi @ M``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return SpectralSeries(self.start_tau, np.einsum("tij,jk->tik", self.elements, M)
                              if len(self) else np.zeros((0, self.shape[0], M.shape[1])),
                              shape=(self.shape[0], M.shape[1]))

    def __add__(self, other: "SpectralSeries") -> "SpectralSeries":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        lo = min(self.start_tau, other.start_tau)
        hi = max(self.horizon, other.horizon)
        return SpectralSeries(lo, [self[t] + other[t] for t in range(lo, hi + 1)],
                              shape=self.shape)

    def __neg__(self) -> "SpectralSeries":
        return SpectralSeries(self.start_tau, -self.elements, shape=self.shape)

    def __sub__(self, other: "SpectralSeries") -> "SpectralSeries":
        return self + (-other)

    def compose(self, other: "SpectralSeries", max_tau: int | None = None) -> "SpectralSeries":
        """Series product ``self * other`` (tap convolution), optionally truncated."""
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"cannot compose {self.shape} with {other.shape}")
        shape = (self.shape[0], other.shape[1])
        lo = self.start_tau + other.start_tau
        hi = self.horizon + other.horizon
        if max_tau is not None:
            hi = min(hi, max_tau)
        if hi < lo or not len(self) or not len(other):
            return SpectralSeries(lo, [], shape=shape)
        out = np.zeros((hi - lo + 1, *shape))
        for i, a in enumerate(self.elements):
            for j, b in enumerate(other.elements):
                k = i + j
                if k > hi - lo:
                    break
                out[k] += a @ b
        return SpectralSeries(lo, out, shape=shape)

    @classmethod
    def zeros(cls, start_tau: int, horizon: int, shape: tuple[int, int]) -> "SpectralSeries":
        return cls(start_tau, np.zeros((horizon - start_tau + 1, *shape)), shape=shape)

    def to_json(self) -> dict:
        r, c = self.shape
        return {
            "start_tau": self.start_tau,
            "rows": r,
            "cols": c,
            "elements": self.elements.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SpectralSeries":
        shape = (int(obj["rows"]), int(obj["cols"]))
        els = np.asarray(obj["elements"], dtype=float).reshape(-1, *shape)
        return cls(int(obj["start_tau"]), els, shape=shape)


def convolve_at(series: SpectralSeries, history, t: int, offset: int = 0) -> np.ndarray:
    """Evaluate ``sum_tau Phi[tau] w[t + offset - tau]``.

    ``history`` is an array of shape (n_steps, dim); indices outside it read zero.
    """
    w = np.atleast_2d(np.asarray(history, dtype=float))
    r, c = series.shape
    if w.shape[1] != c:
        raise ValueError(f"history dimension {w.shape[1]} does not match series columns {c}")
    out = np.zeros(r)
    for k, el in enumerate(series.elements):
        idx = t + offset - (series.start_tau + k)
        if 0 <= idx < len(w):
            out += el @ w[idx]
    return out


class TruncatedResolvent(NamedTuple):
    series: SpectralSeries
    tail_norm: float
    decaying: bool


def truncated_resolvent(A, T: int) -> TruncatedResolvent:
    """Taps ``A^(tau-1)`` of ``(zI - A)^-1`` for tau = 1..T, plus ``||A^T||_2``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    els = np.empty((T, n, n))
    power = np.eye(n)
    for k in range(T):
        els[k] = power
        power = A @ power
    tail = float(np.linalg.norm(power, 2)) if n else 0.0
    return TruncatedResolvent(SpectralSeries(1, els, shape=(n, n)), tail, tail < 1.0)


def induced_linf_norm(series: SpectralSeries) -> float:
    """l_inf -> l_inf induced norm: max row sum of absolute values over all taps."""
    if not len(series):
        return 0.0
    return float(np.max(np.abs(series.elements).sum(axis=(0, 2))))


@dataclass
class Trace:
    """Per-step signal record, each signal an array of shape (n_steps, dim)."""

    signals: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.signals[name]

    def __contains__(self, name: str) -> bool:
        return name in self.signals

    @property
    def n_steps(self) -> int:
        return len(next(iter(self.signals.values()))) if self.signals else 0

    @classmethod
    def from_rows(cls, rows: Mapping[str, Sequence[np.ndarray]]) -> "Trace":
        return cls({k: np.array(v, dtype=float).reshape(len(v), -1) for k, v in rows.items()})

    def columns(self, names: Sequence[str] | None = None) -> list[str]:
        names = list(self.signals) if names is None else names
        return [f"{n}_{i + 1}" for n in names for i in range(self.signals[n].shape[1])]

    def to_rows(self, names: Sequence[str] | None = None) -> list[list[float]]:
        names = list(self.signals) if names is None else names
        mat = np.hstack([self.signals[n] for n in names]) if names else np.zeros((self.n_steps, 0))
        return mat.tolist()


def matrix_to_json(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": M.shape[0], "cols": M.shape[1], "data": M.tolist()}


def matrix_from_json(obj) -> np.ndarray:
    if isinstance(obj, Mapping):
        shape = (int(obj["rows"]), int(obj["cols"]))
        return np.asarray(obj["data"], dtype=float).reshape(shape)
    return np.atleast_2d(np.asarray(obj, dtype=float))


def system_to_json(sys: LTISystem) -> dict:
    return {
        "dims": {"nx": sys.nx, "nu": sys.nu, "ny": sys.ny},
        "A": matrix_to_json(sys.A),
        "B": matrix_to_json(sys.B),
        "C": matrix_to_json(sys.C),
        "D": matrix_to_json(sys.D),
    }


def system_from_json(obj: Mapping) -> LTISystem:
    sys = LTISystem(*(matrix_from_json(obj[k]) for k in "ABCD"))
    dims = obj.get("dims")
    if dims and (dims["nx"], dims["nu"], dims["ny"]) != sys.dims:
        raise ValueError(f"declared dims {dims} disagree with matrices {sys.dims}")
    return sys
