"""FIR system level synthesis by equality-constrained least squares.

Every program here is a quadratic H2 objective over spectral taps subject to
affine achievability constraints, so each one reduces to

    minimize ||F z - g||^2   subject to   E z = f

and is solved through its KKT system. Masked (structurally zero) entries are
removed from the unknowns before the solve, so they come back as exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg

from .lti import LTISystem, SpectralSeries, is_schur_stable, truncated_resolvent

FEASIBILITY_TOL = 1e-9
SINGULAR_COND = 1e12


class InfeasibleError(ValueError):
    """The constraint set admits no solution; ``constraint`` names the worst row."""

    def __init__(self, message: str, constraint: str = "", residual: float = float("nan")):
        super().__init__(message)
        self.constraint = constraint
        self.residual = residual


@dataclass(frozen=True)
class SparsityPattern:
    """Structural-zero masks on the spectral taps of the decision variables.

    ``masks`` maps a variable name (``phi_x``, ``phi_u``, ``phi_xx``, ``phi_xy``,
    ``phi_ux``, ``phi_uy``) to a boolean array. A 2-d mask applies to every tap;
    a 3-d mask is indexed by tau and its last slice repeats past its end.
    ``bands`` maps a variable name to a bandwidth ``d`` allowing ``|i - j| <= d``.
    True means the entry is free.
    """

    masks: Mapping[str, np.ndarray] = field(default_factory=dict)
    bands: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def banded(cls, d: int, names: Iterable[str] = ("phi_u",)) -> "SparsityPattern":
        return cls(bands={n: int(d) for n in names})

    def mask(self, name: str, tau: int, shape: tuple[int, int]) -> np.ndarray:
        m = np.ones(shape, dtype=bool)
        if name in self.bands:
            i, j = np.indices(shape)
            m &= np.abs(i - j) <= self.bands[name]
        if name in self.masks:
            given = np.asarray(self.masks[name], dtype=bool)
            if given.ndim == 3:
                given = given[min(tau, len(given) - 1)]
            if given.shape != shape:
                raise ValueError(f"mask for {name} has shape {given.shape}, expected {shape}")
            m &= given
        return m


@dataclass(frozen=True)
class SynthesisSpec:
    """Horizon, weights, and terminal handling for an H2 FIR program.

    ``state_weight``/``input_weight`` are the square-root factors Q^1/2 and
    R^1/2 (identity when omitted). ``dx_weight``/``dy_weight`` scale the
    disturbance channels of output-feedback objectives.
    """

    horizon: int
    state_weight: np.ndarray | None = None
    input_weight: np.ndarray | None = None
    terminal: str = "hard"
    penalty: float = 1e4
    pattern: SparsityPattern | None = None
    dx_weight: np.ndarray | None = None
    dy_weight: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.terminal not in ("hard", "soft"):
            raise ValueError(f"terminal must be 'hard' or 'soft', got {self.terminal!r}")
        if self.terminal == "soft" and not self.penalty > 0:
            raise ValueError("soft terminal mode needs a positive penalty")

    def weights(self, sys: LTISystem):
        q = np.eye(sys.nx) if self.state_weight is None else np.atleast_2d(self.state_weight)
        r = np.eye(sys.nu) if self.input_weight is None else np.atleast_2d(self.input_weight)
        wx = np.eye(sys.nx) if self.dx_weight is None else np.atleast_2d(self.dx_weight)
        wy = np.eye(sys.ny) if self.dy_weight is None else np.atleast_2d(self.dy_weight)
        return q, r, wx, wy

    @property
    def pattern_or_empty(self) -> SparsityPattern:
        return self.pattern if self.pattern is not None else SparsityPattern()


@dataclass(frozen=True)
class SystemResponseSF:
    phi_x: SpectralSeries
    phi_u: SpectralSeries

    @property
    def horizon(self) -> int:
        return max(self.phi_x.horizon, self.phi_u.horizon)

    def to_json(self) -> dict:
        return {"kind": "sf", "phi_x": self.phi_x.to_json(), "phi_u": self.phi_u.to_json()}


@dataclass(frozen=True)
class SystemResponseOF:
    phi_xx: SpectralSeries
    phi_xy: SpectralSeries
    phi_ux: SpectralSeries
    phi_uy: SpectralSeries
    truncated: bool = False
    tail_bound: float = 0.0
    tail_norm: float = 0.0

    @property
    def horizon(self) -> int:
        return max(s.horizon for s in (self.phi_xx, self.phi_xy, self.phi_ux, self.phi_uy))

    def to_json(self) -> dict:
        return {
            "kind": "of",
            "phi_xx": self.phi_xx.to_json(),
            "phi_xy": self.phi_xy.to_json(),
            "phi_ux": self.phi_ux.to_json(),
            "phi_uy": self.phi_uy.to_json(),
            "truncated": self.truncated,
            "tail_bound": self.tail_bound,
            "tail_norm": self.tail_norm,
        }


def response_from_json(obj: Mapping):
    kind = obj.get("kind")
    if kind == "sf":
        return SystemResponseSF(SpectralSeries.from_json(obj["phi_x"]),
                                SpectralSeries.from_json(obj["phi_u"]))
    if kind == "of":
        return SystemResponseOF(
            *(SpectralSeries.from_json(obj[k]) for k in ("phi_xx", "phi_xy", "phi_ux", "phi_uy")),
            truncated=bool(obj.get("truncated", False)),
            tail_bound=float(obj.get("tail_bound", 0.0)),
            tail_norm=float(obj.get("tail_norm", 0.0)),
        )
    if kind == "youla":
        return SpectralSeries.from_json(obj["phi_uy"])
    raise ValueError(f"unknown response kind {kind!r}")


@dataclass
class SynthesisResult:
    response: object
    objective: float
    kkt_residual: float = 0.0
    constraint_residual: float = 0.0
    terminal_residual: float = 0.0


@dataclass
class ECLSSolution:
    z: np.ndarray
    multipliers: np.ndarray
    objective: float
    kkt_residual: float
    constraint_residual: float


def solve_ecls(F, g, E, f, labels=None, tol: float = FEASIBILITY_TOL) -> ECLSSolution:
    """Minimize ``||F z - g||^2`` subject to ``E z = f`` via the KKT system.

    A rank-deficient KKT matrix is handled by the minimum-norm least-squares
    solution. Inconsistent constraints raise :class:`InfeasibleError` naming
    the row with the largest residual.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = F.shape[1]
    g = np.zeros(F.shape[0]) if g is None else np.asarray(g, dtype=float)
    E = np.asarray(E, dtype=float).reshape(-1, n)
    f = np.asarray(f, dtype=float).reshape(-1)
    m = E.shape[0]
    scale = max(1.0, float(np.max(np.abs(f), initial=0.0)))
    if m:
        z0 = np.linalg.lstsq(E, f, rcond=None)[0]
        r0 = E @ z0 - f
        worst = int(np.argmax(np.abs(r0)))
        if abs(r0[worst]) > tol * scale:
            label = labels[worst] if labels is not None else f"row {worst}"
            raise InfeasibleError(
                f"equality constraints are inconsistent; worst violation {abs(r0[worst]):.3e} at {label}",
                constraint=label, residual=float(abs(r0[worst])))
    H = 2.0 * F.T @ F
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = E.T
    K[n:, :n] = E
    rhs = np.concatenate([2.0 * F.T @ g, f])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    z, nu = sol[:n], sol[n:]
    grad = H @ z - 2.0 * F.T @ g + E.T @ nu
    res = F @ z - g
    return ECLSSolution(
        z=z,
        multipliers=nu,
        objective=float(res @ res),
        kkt_residual=float(np.linalg.norm(grad)),
        constraint_residual=float(np.max(np.abs(E @ z - f), initial=0.0)),
    )


# -- state feedback -----------------------------------------------------------

def _sf_column_program(sys: LTISystem, spec: SynthesisSpec, j: int):
    """Unknowns for column j, ordered [x_1, u_1, x_2, u_2, ..., x_T, u_T]."""
    nx, nu = sys.nx, sys.nu
    T = spec.horizon
    q, r, _, _ = spec.weights(sys)
    pattern = spec.pattern_or_empty
    blk = nx + nu
    n = T * blk

    def xs(tau):
        return slice((tau - 1) * blk, (tau - 1) * blk + nx)

    def us(tau):
        return slice((tau - 1) * blk + nx, tau * blk)

    free = np.ones(n, dtype=bool)
    for tau in range(1, T + 1):
        free[xs(tau)] = pattern.mask("phi_x", tau, (nx, nx))[:, j]
        free[us(tau)] = pattern.mask("phi_u", tau, (nu, nx))[:, j]

    E_rows, f_rows, labels = [], [], []
    blockE = np.zeros((nx, n))
    blockE[:, xs(1)] = np.eye(nx)
    E_rows.append(blockE)
    f_rows.append(np.eye(nx)[:, j])
    labels += [f"Phi_x[1]=I (row {i}, col {j})" for i in range(nx)]
    for tau in range(1, T):
        blockE = np.zeros((nx, n))
        blockE[:, xs(tau + 1)] = np.eye(nx)
        blockE[:, xs(tau)] = -sys.A
        blockE[:, us(tau)] = -sys.B
        E_rows.append(blockE)
        f_rows.append(np.zeros(nx))
        labels += [f"recursion tau={tau} (row {i}, col {j})" for i in range(nx)]
    term = np.zeros((nx, n))
    term[:, xs(T)] = sys.A
    term[:, us(T)] = sys.B

    F_rows = []
    for tau in range(1, T + 1):
        b = np.zeros((q.shape[0], n))
        b[:, xs(tau)] = q
        F_rows.append(b)
        b = np.zeros((r.shape[0], n))
        b[:, us(tau)] = r
        F_rows.append(b)
    if spec.terminal == "hard":
        E_rows.append(term)
        f_rows.append(np.zeros(nx))
        labels += [f"terminal A Phi_x[T] + B Phi_u[T] = 0 (row {i}, col {j})" for i in range(nx)]
    else:
        F_rows.append(np.sqrt(spec.penalty) * term)
    E = np.vstack(E_rows)
    F = np.vstack(F_rows)
    return F, E, np.concatenate(f_rows), labels, free, term, xs, us


def _check_identity_admissible(pattern: SparsityPattern, name: str, n: int):
    m = pattern.mask(name, 1, (n, n))
    if not np.all(np.diag(m)):
        missing = [int(i) for i in np.flatnonzero(~np.diag(m))]
        raise InfeasibleError(
            f"sparsity pattern forbids diagonal entries {missing} of {name}[1], which must equal I",
            constraint=f"{name}[1]=I")


def synth_sf_h2(sys: LTISystem, spec: SynthesisSpec, by_column: bool = True) -> SynthesisResult:
    """State-feedback FIR H2 synthesis, one small KKT solve per column.

    With ``by_column=False`` all columns are stacked into one block-diagonal
    program; the result is the same up to rounding.
    """
    if not sys.is_state_feedback:
        raise ValueError("synth_sf_h2 needs a state-feedback plant (C = I, D = 0)")
    nx, nu, T = sys.nx, sys.nu, spec.horizon
    _check_identity_admissible(spec.pattern_or_empty, "phi_x", nx)
    programs = [_sf_column_program(sys, spec, j) for j in range(nx)]

    def solve(F, E, f, labels, free):
        sol = solve_ecls(F[:, free], None, E[:, free], f, labels)
        z = np.zeros(F.shape[1])
        z[free] = sol.z
        return z, sol

    cols = []
    objective = kkt = cres = 0.0
    if by_column:
        for F, E, f, labels, free, *_ in programs:
            z, sol = solve(F, E, f, labels, free)
            cols.append(z)
            objective += sol.objective
            kkt = max(kkt, sol.kkt_residual)
            cres = max(cres, sol.constraint_residual)
    else:
        F = scipy.linalg.block_diag(*(p[0] for p in programs))
        E = scipy.linalg.block_diag(*(p[1] for p in programs))
        f = np.concatenate([p[2] for p in programs])
        labels = [lab for p in programs for lab in p[3]]
        free = np.concatenate([p[4] for p in programs])
        z, sol = solve(F, E, f, labels, free)
        cols = np.split(z, nx)
        objective, kkt, cres = sol.objective, sol.kkt_residual, sol.constraint_residual

    xs, us = programs[0][6], programs[0][7]
    phi_x = np.zeros((T, nx, nx))
    phi_u = np.zeros((T, nu, nx))
    for j, z in enumerate(cols):
        for tau in range(1, T + 1):
            phi_x[tau - 1, :, j] = z[xs(tau)]
            phi_u[tau - 1, :, j] = z[us(tau)]
    resp = SystemResponseSF(SpectralSeries(1, phi_x), SpectralSeries(1, phi_u))
    terminal = float(np.max(np.abs(sys.A @ phi_x[-1] + sys.B @ phi_u[-1])))
    return SynthesisResult(resp, objective, kkt, cres, terminal)


def validate_sf_achievability(resp: SystemResponseSF, sys: LTISystem, tol: float = 1e-9) -> dict:
    """Max-abs residuals of the state-feedback achievability constraints."""
    T = resp.horizon
    px, pu = resp.phi_x, resp.phi_u
    ident = float(np.max(np.abs(px[1] - np.eye(sys.nx))))
    rec = [float(np.max(np.abs(px[tau + 1] - sys.A @ px[tau] - sys.B @ pu[tau])))
           for tau in range(1, T)]
    terminal = float(np.max(np.abs(sys.A @ px[T] + sys.B @ pu[T])))
    leading = float(np.max(np.abs(px[0]), initial=0.0)) + float(np.max(np.abs(pu[0]), initial=0.0))
    recursion = max(rec, default=0.0)
    worst = max(ident, recursion, terminal, leading)
    return {
        "identity": ident,
        "recursion": recursion,
        "recursion_by_tau": rec,
        "terminal": terminal,
        "strictly_proper": leading,
        "max": worst,
        "ok": worst <= tol,
    }


# -- output feedback: quadruple program ----------------------------------------

_OF_NAMES = ("phi_xx", "phi_xy", "phi_ux", "phi_uy")


class _OFLayout:
    """Unknown ordering: tau-major, then matrix (xx, xy, ux, uy), then column-major entries."""

    def __init__(self, sys: LTISystem, T: int):
        nx, nu, ny = sys.dims
        self.shapes = {"phi_xx": (nx, nx), "phi_xy": (nx, ny), "phi_ux": (nu, nx), "phi_uy": (nu, ny)}
        self.T = T
        self.offsets = {}
        pos = 0
        for tau in range(0, T + 1):
            for name in _OF_NAMES:
                if tau == 0 and name != "phi_uy":
                    continue
                self.offsets[(name, tau)] = pos
                r, c = self.shapes[name]
                pos += r * c
        self.n = pos

    def block(self, name: str, tau: int):
        """Column slice of the unknowns for ``name[tau]`` or None if structurally zero."""
        key = (name, tau)
        if key not in self.offsets:
            return None
        r, c = self.shapes[name]
        return slice(self.offsets[key], self.offsets[key] + r * c)

    def unpack(self, z: np.ndarray) -> dict[str, SpectralSeries]:
        out = {}
        for name in _OF_NAMES:
            r, c = self.shapes[name]
            start = 0 if name == "phi_uy" else 1
            els = [z[self.block(name, tau)].reshape((r, c), order="F")
                   for tau in range(start, self.T + 1)]
            out[name] = SpectralSeries(start, els, shape=(r, c))
        return out


def _vec_left(L):
    """Matrix of X -> L X on column-major vec(X) with X having ``c`` columns: kron(I_c, L)."""
    return lambda c: np.kron(np.eye(c), L)


def synth_of_h2_quadruple(sys: LTISystem, spec: SynthesisSpec) -> SynthesisResult:
    """Output-feedback FIR H2 synthesis over the full quadruple.

    Both affine constraint families are imposed coefficient-wise for
    tau = 0..T with all taps past T fixed at zero (hard FIR) or penalized
    (soft). The objective is the Frobenius norm of
    ``diag(Q^1/2, R^1/2) [Phi_xx Phi_xy; Phi_ux Phi_uy] diag(Wx, Wy)``.
    """
    nx, nu, ny = sys.dims
    T = spec.horizon
    A, B, C = sys.A, sys.B, sys.C
    q, r, wx, wy = spec.weights(sys)
    pattern = spec.pattern_or_empty
    _check_identity_admissible(pattern, "phi_xx", nx)
    lay = _OFLayout(sys, T)
    n = lay.n

    free = np.ones(n, dtype=bool)
    for (name, tau), _ in lay.offsets.items():
        free[lay.block(name, tau)] = pattern.mask(name, tau, lay.shapes[name]).ravel(order="F")

    def add(row_block, name, tau, op):
        sl = lay.block(name, tau)
        if sl is not None:
            row_block[:, sl] += op

    hard_rows, hard_rhs, labels = [], [], []
    soft_rows = []

    def emit(block, rhs, label, tau):
        if tau == T and spec.terminal == "soft":
            soft_rows.append(np.sqrt(spec.penalty) * block)
            return
        hard_rows.append(block)
        hard_rhs.append(rhs)
        labels.extend(f"{label} tau={tau} (entry {k})" for k in range(block.shape[0]))

    I_nx = np.eye(nx)
    for tau in range(0, T + 1):
        lead = I_nx.ravel(order="F") if tau == 0 else np.zeros(nx * nx)
        # (zI - A) Phi_xx - B Phi_ux = I
        blk = np.zeros((nx * nx, n))
        add(blk, "phi_xx", tau + 1, np.eye(nx * nx))
        add(blk, "phi_xx", tau, -np.kron(np.eye(nx), A))
        add(blk, "phi_ux", tau, -np.kron(np.eye(nx), B))
        emit(blk, lead, "row-constraint xx", tau)
        # (zI - A) Phi_xy - B Phi_uy = 0
        blk = np.zeros((nx * ny, n))
        add(blk, "phi_xy", tau + 1, np.eye(nx * ny))
        add(blk, "phi_xy", tau, -np.kron(np.eye(ny), A))
        add(blk, "phi_uy", tau, -np.kron(np.eye(ny), B))
        emit(blk, np.zeros(nx * ny), "row-constraint xy", tau)
        # Phi_xx (zI - A) - Phi_xy C = I
        blk = np.zeros((nx * nx, n))
        add(blk, "phi_xx", tau + 1, np.eye(nx * nx))
        add(blk, "phi_xx", tau, -np.kron(A.T, np.eye(nx)))
        add(blk, "phi_xy", tau, -np.kron(C.T, np.eye(nx)))
        emit(blk, lead, "column-constraint xx", tau)
        # Phi_ux (zI - A) - Phi_uy C = 0
        blk = np.zeros((nu * nx, n))
        add(blk, "phi_ux", tau + 1, np.eye(nu * nx))
        add(blk, "phi_ux", tau, -np.kron(A.T, np.eye(nu)))
        add(blk, "phi_uy", tau, -np.kron(C.T, np.eye(nu)))
        emit(blk, np.zeros(nu * nx), "column-constraint ux", tau)

    weights = {"phi_xx": (q, wx), "phi_xy": (q, wy), "phi_ux": (r, wx), "phi_uy": (r, wy)}
    obj_rows = []
    for (name, tau), _ in lay.offsets.items():
        L, R = weights[name]
        blk = np.zeros((L.shape[0] * R.shape[1], n))
        blk[:, lay.block(name, tau)] = np.kron(R.T, L)
        obj_rows.append(blk)
    F = np.vstack(obj_rows + soft_rows)
    E = np.vstack(hard_rows)
    f = np.concatenate(hard_rhs)
    sol = solve_ecls(F[:, free], None, E[:, free], f, labels)
    z = np.zeros(n)
    z[free] = sol.z
    series = lay.unpack(z)
    resp = SystemResponseOF(series["phi_xx"], series["phi_xy"], series["phi_ux"], series["phi_uy"])
    report = validate_of_achievability(resp, sys)
    return SynthesisResult(resp, sol.objective, sol.kkt_residual, sol.constraint_residual,
                           report["terminal"])


def validate_of_achievability(resp: SystemResponseOF, sys: LTISystem, tol: float = 1e-9) -> dict:
    """Coefficient-wise residuals of both output-feedback constraint families.

    Coefficients tau = 0..H-1 (H the response horizon) are the in-horizon
    residuals; tau = H involves the taps past the horizon and is reported as
    ``terminal`` (the truncation defect for truncated responses).
    """
    A, B, C = sys.A, sys.B, sys.C
    xx, xy, ux, uy = resp.phi_xx, resp.phi_xy, resp.phi_ux, resp.phi_uy
    H = resp.horizon
    I = np.eye(sys.nx)
    fams = {"row_xx": [], "row_xy": [], "col_xx": [], "col_ux": []}
    for tau in range(0, H + 1):
        lead = I if tau == 0 else 0.0
        fams["row_xx"].append(np.max(np.abs(xx[tau + 1] - A @ xx[tau] - B @ ux[tau] - lead)))
        fams["row_xy"].append(np.max(np.abs(xy[tau + 1] - A @ xy[tau] - B @ uy[tau]), initial=0.0))
        fams["col_xx"].append(np.max(np.abs(xx[tau + 1] - xx[tau] @ A - xy[tau] @ C - lead)))
        fams["col_ux"].append(np.max(np.abs(ux[tau + 1] - ux[tau] @ A - uy[tau] @ C), initial=0.0))
    inside = max(float(max(v[:-1], default=0.0)) for v in fams.values())
    terminal = max(float(v[-1]) for v in fams.values())
    proper = max(float(np.max(np.abs(s[0]), initial=0.0)) for s in (xx, xy, ux))
    out = {k: float(max(v[:-1], default=0.0)) for k, v in fams.items()}
    out.update({
        "in_horizon": inside,
        "terminal": terminal,
        "strictly_proper": proper,
        "max": max(inside, terminal, proper),
    })
    limit = max(tol, resp.tail_bound) if resp.truncated else tol
    out["ok"] = max(inside, proper) <= tol and terminal <= limit
    return out


# -- output feedback: Youla route for stable plants ----------------------------

_MAPS = ("xx", "xy", "ux", "uy")


def default_eval_horizon(T: int) -> int:
    return T + max(4 * T, 50)


def _require_stable(sys: LTISystem, what: str):
    stable, rho = is_schur_stable(sys.A)
    if not stable:
        raise ValueError(f"{what} needs a Schur-stable A, spectral radius is {rho:.6g}")


def closed_loop_maps(sys: LTISystem, phi_uy: SpectralSeries, horizon: int) -> dict[str, SpectralSeries]:
    """Closed-loop maps induced by ``phi_uy`` on a stable plant, taps 0..horizon.

    With Delta = (zI - A)^-1 these are
    xx = Delta + Delta B Phi_uy C Delta, xy = Delta B Phi_uy,
    ux = Phi_uy C Delta, uy = Phi_uy.
    """
    delta = truncated_resolvent(sys.A, horizon).series
    dB = delta.right(sys.B)
    cD = delta.left(sys.C)
    xy = dB.compose(phi_uy, horizon)
    ux = phi_uy.compose(cD, horizon)
    xx = delta + xy.compose(cD, horizon)
    return {"xx": xx.truncated(horizon), "xy": xy, "ux": ux, "uy": phi_uy.truncated(horizon)}


def synth_of_youla(sys: LTISystem, spec: SynthesisSpec, closed_loop_weights=None,
                   eval_horizon: int | None = None) -> SynthesisResult:
    """Choose an FIR ``Phi_uy`` (taps 0..T) minimizing weighted closed-loop H2 norms.

    ``closed_loop_weights`` maps any of ``xx``, ``xy``, ``ux``, ``uy`` to a
    ``(left, right)`` weight pair; the default is the quadruple objective of
    ``spec``. Maps are truncated at ``eval_horizon`` taps. Every map is affine
    in the free taps, so this is a plain least-squares problem.
    """
    _require_stable(sys, "synth_of_youla")
    nx, nu, ny = sys.dims
    T = spec.horizon
    H = default_eval_horizon(T) if eval_horizon is None else int(eval_horizon)
    q, r, wx, wy = spec.weights(sys)
    if closed_loop_weights is None:
        closed_loop_weights = {"xx": (q, wx), "xy": (q, wy), "ux": (r, wx), "uy": (r, wy)}
    unknown = set(closed_loop_weights) - set(_MAPS)
    if unknown:
        raise ValueError(f"unknown closed-loop maps {sorted(unknown)}")
    pattern = spec.pattern_or_empty

    basis = []
    for tau in range(T + 1):
        m = pattern.mask("phi_uy", tau, (nu, ny))
        for c in range(ny):
            for rr in range(nu):
                if m[rr, c]:
                    basis.append((tau, rr, c))

    def weighted_stack(phi: SpectralSeries) -> np.ndarray:
        maps = closed_loop_maps(sys, phi, H)
        parts = []
        for name in _MAPS:
            if name not in closed_loop_weights:
                continue
            L, R = (np.atleast_2d(np.asarray(w, dtype=float)) for w in closed_loop_weights[name])
            s = maps[name]
            taps = s.taps(0, H)
            parts.append(np.einsum("ij,tjk,kl->til", L, taps, R).ravel())
        return np.concatenate(parts)

    zero = SpectralSeries(0, np.zeros((T + 1, nu, ny)))
    offset = weighted_stack(zero)
    M = np.empty((offset.size, len(basis)))
    for k, (tau, rr, c) in enumerate(basis):
        els = np.zeros((T + 1, nu, ny))
        els[tau, rr, c] = 1.0
        M[:, k] = weighted_stack(SpectralSeries(0, els)) - offset
    theta = np.linalg.lstsq(M, -offset, rcond=None)[0] if basis else np.zeros(0)
    els = np.zeros((T + 1, nu, ny))
    for k, (tau, rr, c) in enumerate(basis):
        els[tau, rr, c] = theta[k]
    phi = SpectralSeries(0, els)
    res = M @ theta + offset
    grad = float(np.linalg.norm(2 * M.T @ res)) if basis else 0.0
    return SynthesisResult(phi, float(res @ res), grad, 0.0, 0.0)


def quadruple_from_phiuy(sys: LTISystem, phi_uy: SpectralSeries, eval_horizon: int) -> SystemResponseOF:
    """Truncated quadruple induced by ``phi_uy`` on a stable plant.

    ``tail_norm`` is ``||A^H||_2``; ``tail_bound`` estimates the l1 mass of the
    dropped taps from the first ``T + 2`` of them, continued geometrically at
    the spectral radius of A.
    """
    _require_stable(sys, "quadruple_from_phiuy")
    H = int(eval_horizon)
    extra = phi_uy.horizon + 2
    maps = closed_loop_maps(sys, phi_uy, H + extra)
    _, rho = is_schur_stable(sys.A)
    dropped = 0.0
    last = 0.0
    for name in ("xx", "xy", "ux"):
        taps = maps[name].taps(H + 1, H + extra)
        mass = np.abs(taps).max(axis=(1, 2)) if len(taps) else np.zeros(1)
        dropped = max(dropped, float(mass.sum()))
        last = max(last, float(mass[-1]))
    bound = dropped + last * rho / (1.0 - rho)
    tail_norm = truncated_resolvent(sys.A, H).tail_norm
    return SystemResponseOF(
        maps["xx"].truncated(H),
        maps["xy"].truncated(H),
        maps["ux"].truncated(H),
        phi_uy,
        truncated=True,
        tail_bound=bound,
        tail_norm=tail_norm,
    )


# -- pointwise controller evaluation --------------------------------------------

def _checked_inv(M: np.ndarray, what: str) -> np.ndarray:
    if M.shape[0] != M.shape[1]:
        raise np.linalg.LinAlgError(f"{what} is not square: {M.shape}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise np.linalg.LinAlgError(f"{what} is singular at this z (condition number {cond:.3e})")
    return np.linalg.inv(M)


def eval_controller_pointwise(resp, sys: LTISystem, z: complex) -> np.ndarray:
    """K(z) recovered from a system response, for ``|z| > 1``.

    State feedback: ``Phi_u(z) Phi_x(z)^-1``. Output feedback:
    ``((Phi_uy - Phi_ux Phi_xx^-1 Phi_xy)^-1 + D)^-1``.
    """
    if abs(z) <= 1.0:
        raise ValueError(f"evaluation point must lie outside the unit disk, |z| = {abs(z)}")
    if isinstance(resp, SystemResponseSF):
        return resp.phi_u.evaluate(z) @ _checked_inv(resp.phi_x.evaluate(z), "Phi_x(z)")
    if isinstance(resp, SystemResponseOF):
        xx_inv = _checked_inv(resp.phi_xx.evaluate(z), "Phi_xx(z)")
        inner = resp.phi_uy.evaluate(z) - resp.phi_ux.evaluate(z) @ xx_inv @ resp.phi_xy.evaluate(z)
        # (L^-1 + D)^-1 = L (I + D L)^-1, which also covers non-square L.
        return inner @ _checked_inv(np.eye(sys.ny) + sys.D @ inner, "I + D L")
    raise TypeError(f"unsupported response type {type(resp).__name__}")


def eval_youla_pointwise(sys: LTISystem, phi_uy: SpectralSeries, z: complex) -> np.ndarray:
    """K(z) = (Phi_uy^-1 + G)^-1, written as (I + Phi_uy G)^-1 Phi_uy to allow N_u != N_y."""
    Q = phi_uy.evaluate(z)
    G = sys.transfer(z)
    return np.linalg.solve(np.eye(sys.nu) + Q @ G, Q)
