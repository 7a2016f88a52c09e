"""Compile synthesized controllers into networks of sensor, actuator and controller nodes.

State-feedback builders take a :class:`SystemResponseSF`; output-feedback
builders take the FIR ``Phi_uy`` of the simplified realization. Messages are
pruned on exact structural zeros of the supplied matrices.

Output-feedback networks order each step in one of two ways:

* current-first, used when ``Phi_uy[0] != 0``: the newest innovation feeds
  ``u[t]``. Requires ``D = 0`` in the distributed layouts, since otherwise
  ``u[t]`` and the innovation depend on each other across nodes.
* past-first, used when ``Phi_uy[0] == 0``: ``u[t]`` is formed from past
  innovations, then the ``D u[t]`` correction reaches the sensors. Works for
  any ``D``.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .components import (Adder, AlgebraicLoopError, Buffer, Collector, DelayBuffer,
                         Disseminator, Multiplier, Network, NodeProgram, run_network_step)
from .lti import LTISystem, SpectralSeries, Trace, is_schur_stable
from .synthesis import SystemResponseSF

CTRL = "ctrl"
GSK = "gsk"


def sensor_id(i: int) -> str:
    return f"s{i + 1:03d}"


def actuator_id(k: int) -> str:
    return f"a{k + 1:03d}"


def _require_stable(sys: LTISystem, what: str):
    stable, rho = is_schur_stable(sys.A)
    if not stable:
        raise ValueError(f"{what} uses the simplified realization and needs a Schur-stable A "
                         f"(spectral radius {rho:.6g})")


def _first_nonzero(v, default: float) -> float:
    nz = np.flatnonzero(v)
    return float(nz[0]) if len(nz) else default


def _locations(sys: LTISystem):
    mid = (sys.nx - 1) / 2.0
    act = [_first_nonzero(sys.B[:, k], mid) for k in range(sys.nu)]
    out = [_first_nonzero(sys.C[i, :], mid) for i in range(sys.ny)]
    return act, out, mid


def _delay_refs(name: str, n: int) -> list[str]:
    return [f"{name}@{k}" for k in range(1, n + 1)]


def _support(series: SpectralSeries, start: int | None = None) -> np.ndarray:
    """Entries nonzero in any tap from ``start`` on."""
    els = series.elements
    if start is not None:
        els = series.taps(start, series.horizon)
    if not len(els):
        return np.zeros(series.shape, dtype=bool)
    return np.any(els != 0.0, axis=0)


def _network(kind: str, nodes: list[NodeProgram], n_in: int, n_out: int, **meta) -> Network:
    return Network({n.id: n for n in nodes}, n_inputs=n_in, n_outputs=n_out, kind=kind, meta=meta)


# -- state feedback -------------------------------------------------------------------

def _phi_u_stack(resp: SystemResponseSF, rows, cols) -> np.ndarray:
    T = resp.phi_u.horizon
    return np.hstack([resp.phi_u[tau][np.ix_(rows, cols)] for tau in range(1, T + 1)])


def _sf_sensor_relays(sys: LTISystem) -> list[NodeProgram]:
    nodes = []
    for i in range(sys.nx):
        nodes.append(NodeProgram(
            sensor_id(i), "sensor", [
                Buffer("x", 1, wire=True),
                Disseminator("x", [(CTRL, [0], f"x_{i + 1}")]),
            ], index=i, location=float(i), input=("x", [i])))
    return nodes


def _actuator_relays(sys: LTISystem, locs) -> list[NodeProgram]:
    return [NodeProgram(actuator_id(k), "actuator", [
        Buffer("u", 1, wire=True),
        Collector("u", [(CTRL, f"u_{k + 1}", [0])]),
    ], index=k, location=locs[k], output=("u", [k])) for k in range(sys.nu)]


def build_centralized_sf(sys: LTISystem, resp: SystemResponseSF) -> Network:
    """One controller node running the simplified state-feedback realization."""
    _require_stable(sys, "build_centralized_sf")
    nx, nu, T = sys.nx, sys.nu, resp.phi_u.horizon
    act_loc, _, mid = _locations(sys)
    stack = _phi_u_stack(resp, list(range(nu)), list(range(nx)))
    ctrl = NodeProgram(CTRL, "controller", [
        Buffer("x", nx), Buffer("delta", nx), Buffer("u", nu),
        Buffer("negAx", nx), Buffer("negBu", nx),
        DelayBuffer("dhist", nx, T - 1, "delta"),
        Collector("x", [(sensor_id(i), f"x_{i + 1}", [i]) for i in range(nx)]),
        Adder([("x", None, 1), ("negAx", None, 1), ("negBu", None, 1)], "delta", nx),
        Multiplier(stack, ["delta", *_delay_refs("dhist", T - 1)], "u"),
        Disseminator("u", [(actuator_id(k), [k], f"u_{k + 1}") for k in range(nu)]),
        Multiplier(-sys.A, ["x"], "negAx"),
        Multiplier(-sys.B, ["u"], "negBu"),
    ], location=mid)
    nodes = _sf_sensor_relays(sys) + [ctrl] + _actuator_relays(sys, act_loc)
    return _network("centralized_sf", nodes, nx, nu, T=T)


def build_original_sf(sys: LTISystem, resp: SystemResponseSF) -> Network:
    """One controller node running the standard realization; no stability requirement."""
    nx, nu, T = sys.nx, sys.nu, resp.horizon
    act_loc, _, mid = _locations(sys)
    stack_u = _phi_u_stack(resp, list(range(nu)), list(range(nx)))
    comps = [
        Buffer("x", nx), Buffer("xhat", nx), Buffer("delta", nx), Buffer("u", nu),
        DelayBuffer("dhist", nx, T - 1, "delta"),
        Collector("x", [(sensor_id(i), f"x_{i + 1}", [i]) for i in range(nx)]),
        Adder([("x", None, 1), ("xhat", None, -1)], "delta", nx),
        Multiplier(stack_u, ["delta", *_delay_refs("dhist", T - 1)], "u"),
        Disseminator("u", [(actuator_id(k), [k], f"u_{k + 1}") for k in range(nu)]),
    ]
    if T >= 2:
        stack_x = np.hstack([resp.phi_x[tau] for tau in range(2, T + 1)])
        comps.append(Multiplier(stack_x, ["delta", *_delay_refs("dhist", T - 2)], "xhat"))
    ctrl = NodeProgram(CTRL, "controller", comps, location=mid)
    nodes = _sf_sensor_relays(sys) + [ctrl] + _actuator_relays(sys, act_loc)
    return _network("original_sf", nodes, nx, nu, T=T)


def _sf_sensor(sys: LTISystem, i: int, tail: list, extra_buffers: list) -> NodeProgram:
    """Distributed sensor computing delta_i = x_i - A^{i*} x[t-1] - B^{i*} u[t-1]."""
    A, B = sys.A, sys.B
    from_sensors = [j for j in range(sys.nx) if j != i and A[i, j] != 0.0]
    to_sensors = [j for j in range(sys.nx) if j != i and A[j, i] != 0.0]
    from_acts = [k for k in range(sys.nu) if B[i, k] != 0.0]
    comps = [
        Buffer("x", 1), Buffer("delta", 1), Buffer("negAx_col", sys.nx),
        Buffer("a_sum", 1), Buffer("b_sum", 1),
        Buffer("recvA", len(from_sensors), wire=True),
        Buffer("recvB", len(from_acts), wire=True),
        *extra_buffers,
        Disseminator("negAx_col", [(sensor_id(j), [j], f"-A[{j + 1},{i + 1}]x_{i + 1}")
                                   for j in to_sensors]),
        Collector("recvA", [(sensor_id(j), f"-A[{i + 1},{j + 1}]x_{j + 1}", [p])
                            for p, j in enumerate(from_sensors)]),
        Adder([("negAx_col", [i], 1)] + [("recvA", [p], 1) for p in range(len(from_sensors))],
              "a_sum", 1),
        Collector("recvB", [(actuator_id(k), f"-B[{i + 1},{k + 1}]u_{k + 1}", [p])
                            for p, k in enumerate(from_acts)]),
        Adder([("recvB", [p], 1) for p in range(len(from_acts))], "b_sum", 1),
        Adder([("x", None, 1), ("a_sum", None, 1), ("b_sum", None, 1)], "delta", 1),
        *tail,
        Multiplier(-A[:, i:i + 1], ["x"], "negAx_col"),
    ]
    return NodeProgram(sensor_id(i), "sensor", comps, index=i, location=float(i), input=("x", [i]))


def _sf_actuator(sys: LTISystem, k: int, loc: float, middle: list, buffers: list) -> NodeProgram:
    B = sys.B
    to_sensors = [i for i in range(sys.nx) if B[i, k] != 0.0]
    comps = [
        Buffer("u", 1), Buffer("negBu_col", sys.nx), *buffers,
        Disseminator("negBu_col", [(sensor_id(i), [i], f"-B[{i + 1},{k + 1}]u_{k + 1}")
                                   for i in to_sensors]),
        *middle,
        Multiplier(-B[:, k:k + 1], ["u"], "negBu_col"),
    ]
    return NodeProgram(actuator_id(k), "actuator", comps, index=k, location=loc, output=("u", [k]))


def _sf_delta_users(resp: SystemResponseSF, k: int) -> list[int]:
    return [int(i) for i in np.flatnonzero(_support(resp.phi_u)[k])]


def build_naive_distributed_sf(sys: LTISystem, resp: SystemResponseSF) -> Network:
    """Sensors send delta_i to actuators; each actuator convolves its row of Phi_u."""
    _require_stable(sys, "build_naive_distributed_sf")
    nx, nu, T = sys.nx, sys.nu, resp.phi_u.horizon
    act_loc, _, _ = _locations(sys)
    supp = _support(resp.phi_u)
    sensors = []
    for i in range(nx):
        users = [k for k in range(nu) if supp[k, i]]
        tail = [Disseminator("delta", [(actuator_id(k), [0], f"delta_{i + 1}") for k in users])]
        sensors.append(_sf_sensor(sys, i, tail, []))
    acts = []
    for k in range(nu):
        S = _sf_delta_users(resp, k)
        middle = [
            Collector("delta", [(sensor_id(i), f"delta_{i + 1}", [p]) for p, i in enumerate(S)]),
            Multiplier(_phi_u_stack(resp, [k], S), ["delta", *_delay_refs("dhist", T - 1)], "u"),
        ]
        bufs = [Buffer("delta", len(S)), DelayBuffer("dhist", len(S), T - 1, "delta")]
        acts.append(_sf_actuator(sys, k, act_loc[k], middle, bufs))
    return _network("naive_distributed_sf", sensors + acts, nx, nu, T=T)


def build_memconserv_distributed_sf(sys: LTISystem, resp: SystemResponseSF) -> Network:
    """Sensors convolve their column of Phi_u; actuators add the partial results."""
    _require_stable(sys, "build_memconserv_distributed_sf")
    nx, nu, T = sys.nx, sys.nu, resp.phi_u.horizon
    act_loc, _, _ = _locations(sys)
    supp = _support(resp.phi_u)
    sensors = []
    for i in range(nx):
        R = [k for k in range(nu) if supp[k, i]]
        stack = _phi_u_stack(resp, R, [i])
        tail = [
            Multiplier(stack, ["delta", *_delay_refs("dhist", T - 1)], "partial"),
            Disseminator("partial", [(actuator_id(k), [p], f"Phi_u[{k + 1},{i + 1}]*delta_{i + 1}")
                                     for p, k in enumerate(R)]),
        ]
        extra = [DelayBuffer("dhist", 1, T - 1, "delta"), Buffer("partial", len(R))]
        sensors.append(_sf_sensor(sys, i, tail, extra))
    acts = []
    for k in range(nu):
        S = _sf_delta_users(resp, k)
        middle = [
            Collector("parts", [(sensor_id(i), f"Phi_u[{k + 1},{i + 1}]*delta_{i + 1}", [p])
                                for p, i in enumerate(S)]),
            Adder([("parts", [p], 1) for p in range(len(S))], "u", 1),
        ]
        acts.append(_sf_actuator(sys, k, act_loc[k], middle, [Buffer("parts", len(S), wire=True)]))
    return _network("memconserv_distributed_sf", sensors + acts, nx, nu, T=T)


def build_global_state_sf(sys: LTISystem, resp: SystemResponseSF) -> Network:
    """Sensors send delta_i to a global state keeper, which forwards the stacked delta."""
    _require_stable(sys, "build_global_state_sf")
    nx, nu, T = sys.nx, sys.nu, resp.phi_u.horizon
    act_loc, _, mid = _locations(sys)
    sensors = [_sf_sensor(sys, i, [Disseminator("delta", [(GSK, [0], f"delta_{i + 1}")])], [])
               for i in range(nx)]
    routes = []
    acts = []
    for k in range(nu):
        S = _sf_delta_users(resp, k)
        if S:
            routes.append((actuator_id(k), S, f"delta->{actuator_id(k)}"))
            collect = [Collector("delta", [(GSK, f"delta->{actuator_id(k)}", list(range(len(S))))],
                                 required=True)]
        else:
            collect = []
        middle = collect + [
            Multiplier(_phi_u_stack(resp, [k], S), ["delta", *_delay_refs("dhist", T - 1)], "u"),
        ]
        bufs = [Buffer("delta", len(S)), DelayBuffer("dhist", len(S), T - 1, "delta")]
        acts.append(_sf_actuator(sys, k, act_loc[k], middle, bufs))
    gsk = NodeProgram(GSK, "gsk", [
        Buffer("delta", nx),
        Collector("delta", [(sensor_id(i), f"delta_{i + 1}", [i]) for i in range(nx)]),
        Disseminator("delta", routes),
    ], location=mid)
    return _network("global_state_sf", sensors + [gsk] + acts, nx, nu, T=T)


# -- output feedback -----------------------------------------------------------------

def _of_prepare(sys: LTISystem, phi_uy: SpectralSeries, what: str, distributed: bool):
    _require_stable(sys, what)
    if phi_uy.shape != (sys.nu, sys.ny):
        raise ValueError(f"Phi_uy has shape {phi_uy.shape}, expected {(sys.nu, sys.ny)}")
    if phi_uy.start_tau != 0:
        phi_uy = SpectralSeries(0, phi_uy.taps(0, phi_uy.horizon))
    current_first = bool(phi_uy[0].any())
    if distributed and current_first and sys.D.any():
        raise AlgebraicLoopError(
            f"{what}: Phi_uy[0] != 0 and D != 0 couple u[t] and the innovation across nodes; "
            "use the centralized layout or a strictly proper Phi_uy")
    return phi_uy, current_first


def _phi_uy_stack(phi_uy: SpectralSeries, rows, cols, first: int) -> np.ndarray:
    T = phi_uy.horizon
    if T < first:
        return np.zeros((len(rows), 0))
    return np.hstack([phi_uy[tau][np.ix_(rows, cols)] for tau in range(first, T + 1)])


def _of_sensor_relays(sys: LTISystem, target: str) -> list[NodeProgram]:
    _, out_loc, _ = _locations(sys)
    return [NodeProgram(sensor_id(i), "sensor", [
        Buffer("y", 1, wire=True),
        Disseminator("y", [(target, [0], f"y_{i + 1}")]),
    ], index=i, location=out_loc[i], input=("y", [i])) for i in range(sys.ny)]


def build_centralized_of(sys: LTISystem, phi_uy: SpectralSeries) -> Network:
    """One controller node running the simplified output-feedback realization."""
    phi_uy, current_first = _of_prepare(sys, phi_uy, "build_centralized_of", distributed=False)
    nx, nu, ny = sys.dims
    T = phi_uy.horizon
    act_loc, _, mid = _locations(sys)
    comps = [
        Buffer("y", ny, wire=True), Buffer("negCx", ny, wire=True),
        Buffer("delta", ny), DelayBuffer("dhist", ny, T, "delta"),
        Buffer("xhat", nx), Buffer("Axhat", nx), Buffer("Bu", nx, wire=True), Buffer("u", nu),
        Collector("y", [(sensor_id(i), f"y_{i + 1}", [i]) for i in range(ny)]),
        Multiplier(-sys.C, ["xhat"], "negCx"),
    ]
    if not sys.D.any():
        comps += [
            Adder([("y", None, 1), ("negCx", None, 1)], "delta", ny),
            Multiplier(_phi_uy_stack(phi_uy, range(nu), range(ny), 0),
                       ["delta", *_delay_refs("dhist", T)], "u"),
        ]
    else:
        loop = np.linalg.inv(np.eye(nu) + phi_uy[0] @ sys.D)
        comps += [
            Buffer("innov", ny, wire=True), Buffer("uprime", nu, wire=True),
            Buffer("negDu", ny, wire=True),
            Adder([("y", None, 1), ("negCx", None, 1)], "innov", ny),
            Multiplier(_phi_uy_stack(phi_uy, range(nu), range(ny), 1),
                       _delay_refs("dhist", T), "uprime"),
            Multiplier(np.hstack([loop @ phi_uy[0], loop]), ["innov", "uprime"], "u"),
            Multiplier(-sys.D, ["u"], "negDu"),
            Adder([("innov", None, 1), ("negDu", None, 1)], "delta", ny),
        ]
    comps += [
        Disseminator("u", [(actuator_id(k), [k], f"u_{k + 1}") for k in range(nu)]),
        Multiplier(sys.A, ["xhat"], "Axhat"),
        Multiplier(sys.B, ["u"], "Bu"),
        Adder([("Axhat", None, 1), ("Bu", None, 1)], "xhat", nx),
    ]
    ctrl = NodeProgram(CTRL, "controller", comps, location=mid)
    nodes = _of_sensor_relays(sys, CTRL) + [ctrl] + _actuator_relays(sys, act_loc)
    return _network("centralized_of", nodes, ny, nu, T=T, current_first=current_first)


def _of_users(phi_uy: SpectralSeries, first: int):
    """supp[k, i]: Phi_uy^{ki}[tau] != 0 for some tau >= first."""
    return _support(phi_uy, first)


def build_sensor_side_of(sys: LTISystem, phi_uy: SpectralSeries) -> Network:
    """Every sensor keeps a full copy of xhat and convolves its column of Phi_uy."""
    phi_uy, current_first = _of_prepare(sys, phi_uy, "build_sensor_side_of", distributed=True)
    nx, nu, ny = sys.dims
    T = phi_uy.horizon
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    act_loc, out_loc, _ = _locations(sys)
    first = 0 if current_first else 1
    supp = _of_users(phi_uy, first)

    def bu_label(k):
        return f"B[:,{k + 1}]u_{k + 1}"

    def du_label(i, k):
        return f"-D[{i + 1},{k + 1}]u_{k + 1}"

    sensors = []
    for i in range(ny):
        R = [k for k in range(nu) if supp[k, i]]
        d_from = [k for k in range(nu) if D[i, k] != 0.0]
        stack = _phi_uy_stack(phi_uy, R, [i], first)
        taps = (["delta"] if current_first else []) + _delay_refs("dhist", T)
        conv = [
            Multiplier(stack, taps, "partial"),
            Disseminator("partial", [(actuator_id(k), [p], f"Phi_uy[{k + 1},{i + 1}]*delta_{i + 1}")
                                     for p, k in enumerate(R)]),
        ]
        receive = [
            Collector("recvBu", [(actuator_id(k), bu_label(k), list(range(k * nx, (k + 1) * nx)))
                                 for k in range(nu)]),
            Collector("recvDu", [(actuator_id(k), du_label(i, k), [p]) for p, k in enumerate(d_from)]),
        ]
        innovation = [
            Multiplier(-C[i:i + 1, :], ["xhat"], "negCx"),
            Adder([("y", None, 1), ("negCx", None, 1)]
                  + [("recvDu", [p], 1) for p in range(len(d_from))], "delta", 1),
        ]
        update = [
            Multiplier(A, ["xhat"], "Axhat"),
            Adder([("Axhat", None, 1)] + [("recvBu", list(range(k * nx, (k + 1) * nx)), 1)
                                          for k in range(nu)], "xhat", nx),
        ]
        body = innovation + conv + receive + update if current_first \
            else conv + receive + innovation + update
        comps = [
            Buffer("y", 1), Buffer("xhat", nx), Buffer("delta", 1),
            DelayBuffer("dhist", 1, T, "delta"), Buffer("partial", len(R)),
            Buffer("negCx", 1, wire=True), Buffer("Axhat", nx, wire=True),
            Buffer("recvBu", nx * nu, wire=True), Buffer("recvDu", len(d_from), wire=True),
            *body,
        ]
        sensors.append(NodeProgram(sensor_id(i), "sensor", comps, index=i, location=out_loc[i],
                                   input=("y", [i])))
    acts = []
    for k in range(nu):
        S = [i for i in range(ny) if supp[k, i]]
        d_to = [i for i in range(ny) if D[i, k] != 0.0]
        comps = [
            Buffer("u", 1), Buffer("parts", len(S), wire=True),
            Buffer("Bu", nx, wire=True), Buffer("negDu", len(d_to), wire=True),
            Collector("parts", [(sensor_id(i), f"Phi_uy[{k + 1},{i + 1}]*delta_{i + 1}", [p])
                                for p, i in enumerate(S)]),
            Adder([("parts", [p], 1) for p in range(len(S))], "u", 1),
            Multiplier(B[:, k:k + 1], ["u"], "Bu"),
            Disseminator("Bu", [(sensor_id(i), list(range(nx)), bu_label(k)) for i in range(ny)]),
        ]
        if d_to:
            comps += [
                Multiplier(-D[d_to, k:k + 1], ["u"], "negDu"),
                Disseminator("negDu", [(sensor_id(i), [p], du_label(i, k)) for p, i in enumerate(d_to)]),
            ]
        acts.append(NodeProgram(actuator_id(k), "actuator", comps, index=k, location=act_loc[k],
                                output=("u", [k])))
    return _network("sensor_side_of", sensors + acts, ny, nu, T=T, current_first=current_first)


def _reachable_states(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Structural support of sum_m A^m b."""
    reach = b != 0.0
    adj = A != 0.0
    while True:
        nxt = reach | np.any(adj[:, reach], axis=1)
        if np.array_equal(nxt, reach):
            return reach
        reach = nxt


def build_actuator_side_of(sys: LTISystem, phi_uy: SpectralSeries) -> Network:
    """Actuator k keeps xhat_(k) driven by its own input; sensors sum the summaries."""
    phi_uy, current_first = _of_prepare(sys, phi_uy, "build_actuator_side_of", distributed=True)
    nx, nu, ny = sys.dims
    T = phi_uy.horizon
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    act_loc, out_loc, _ = _locations(sys)
    first = 0 if current_first else 1
    supp = _of_users(phi_uy, first)

    def s_label(i, k):
        return f"-C[{i + 1},:]xhat_({k + 1})-D[{i + 1},{k + 1}]u_{k + 1}"

    summary_to = []
    for k in range(nu):
        reach = _reachable_states(A, B[:, k])
        rows = [i for i in range(ny) if np.any((C[i] != 0.0) & reach) or D[i, k] != 0.0]
        summary_to.append(rows)

    sensors = []
    for i in range(ny):
        R = [k for k in range(nu) if supp[k, i]]
        senders = [k for k in range(nu) if i in summary_to[k]]
        taps = (["delta"] if current_first else []) + _delay_refs("dhist", T)
        conv = [
            Multiplier(_phi_uy_stack(phi_uy, R, [i], first), taps, "partial"),
            Disseminator("partial", [(actuator_id(k), [p], f"Phi_uy[{k + 1},{i + 1}]*delta_{i + 1}")
                                     for p, k in enumerate(R)]),
        ]
        innovation = [
            Collector("recvS", [(actuator_id(k), s_label(i, k), [p]) for p, k in enumerate(senders)]),
            Adder([("y", None, 1)] + [("recvS", [p], 1) for p in range(len(senders))], "delta", 1),
        ]
        body = innovation + conv if current_first else conv + innovation
        comps = [
            Buffer("y", 1), Buffer("delta", 1), DelayBuffer("dhist", 1, T, "delta"),
            Buffer("partial", len(R)), Buffer("recvS", len(senders), wire=True),
            *body,
        ]
        sensors.append(NodeProgram(sensor_id(i), "sensor", comps, index=i, location=out_loc[i],
                                   input=("y", [i])))
    acts = []
    for k in range(nu):
        S = [i for i in range(ny) if supp[k, i]]
        rows = summary_to[k]
        summary_matrix = np.hstack([-C[rows, :], -D[rows, k:k + 1]])
        summarize = [
            Multiplier(summary_matrix, ["xhat", "u"], "summary"),
            Disseminator("summary", [(sensor_id(i), [p], s_label(i, k)) for p, i in enumerate(rows)]),
        ]
        compute_u = [
            Collector("parts", [(sensor_id(i), f"Phi_uy[{k + 1},{i + 1}]*delta_{i + 1}", [p])
                                for p, i in enumerate(S)]),
            Adder([("parts", [p], 1) for p in range(len(S))], "u", 1),
        ]
        update = [
            Multiplier(A, ["xhat"], "Axhat"),
            Multiplier(B[:, k:k + 1], ["u"], "Bu"),
            Adder([("Axhat", None, 1), ("Bu", None, 1)], "xhat", nx),
        ]
        # in current-first order u[t] is still the previous value when summarizing, and D = 0
        body = summarize + compute_u + update if current_first else compute_u + summarize + update
        comps = [
            Buffer("u", 1), Buffer("xhat", nx), Buffer("summary", len(rows), wire=True),
            Buffer("parts", len(S), wire=True), Buffer("Axhat", nx, wire=True),
            Buffer("Bu", nx, wire=True),
            *body,
        ]
        acts.append(NodeProgram(actuator_id(k), "actuator", comps, index=k, location=act_loc[k],
                                output=("u", [k])))
    return _network("actuator_side_of", sensors + acts, ny, nu, T=T, current_first=current_first)


def build_global_state_of(sys: LTISystem, phi_uy: SpectralSeries) -> Network:
    """A global state keeper runs the xhat recursion and forwards the innovation."""
    phi_uy, current_first = _of_prepare(sys, phi_uy, "build_global_state_of", distributed=True)
    nx, nu, ny = sys.dims
    T = phi_uy.horizon
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    act_loc, _, mid = _locations(sys)
    first = 0 if current_first else 1
    supp = _of_users(phi_uy, first)
    d_cols = [k for k in range(nu) if D[:, k].any()]

    acts = []
    routes = []
    for k in range(nu):
        S = [i for i in range(ny) if supp[k, i]]
        label = f"delta->{actuator_id(k)}"
        collect = []
        if S:
            routes.append((actuator_id(k), S, label))
            collect = [Collector("delta", [(GSK, label, list(range(len(S))))], required=True)]
        taps = (["delta"] if current_first else []) + _delay_refs("dhist", T)
        compute = [
            Multiplier(_phi_uy_stack(phi_uy, [k], S, first), taps, "u"),
            Multiplier(B[:, k:k + 1], ["u"], "Bu"),
            Disseminator("Bu", [(GSK, list(range(nx)), f"B[:,{k + 1}]u_{k + 1}")]),
        ]
        if k in d_cols:
            compute += [
                Multiplier(D[:, k:k + 1], ["u"], "Du"),
                Disseminator("Du", [(GSK, list(range(ny)), f"D[:,{k + 1}]u_{k + 1}")]),
            ]
        body = collect + compute if current_first else compute + collect
        comps = [
            Buffer("u", 1), Buffer("delta", len(S)), DelayBuffer("dhist", len(S), T, "delta"),
            Buffer("Bu", nx, wire=True), Buffer("Du", ny, wire=True),
            *body,
        ]
        acts.append(NodeProgram(actuator_id(k), "actuator", comps, index=k, location=act_loc[k],
                                output=("u", [k])))
    innovation = [
        Collector("y", [(sensor_id(i), f"y_{i + 1}", [i]) for i in range(ny)]),
        Multiplier(-C, ["xhat"], "negCx"),
    ]
    receive = [
        Collector("recvBu", [(actuator_id(k), f"B[:,{k + 1}]u_{k + 1}", list(range(k * nx, (k + 1) * nx)))
                             for k in range(nu)]),
        Collector("recvDu", [(actuator_id(k), f"D[:,{k + 1}]u_{k + 1}", list(range(p * ny, (p + 1) * ny)))
                             for p, k in enumerate(d_cols)]),
    ]
    form_delta = [
        Adder([("y", None, 1), ("negCx", None, 1)]
              + [("recvDu", list(range(p * ny, (p + 1) * ny)), -1) for p in range(len(d_cols))],
              "delta", ny),
        Disseminator("delta", routes),
    ]
    update = [
        Multiplier(A, ["xhat"], "Axhat"),
        Adder([("Axhat", None, 1)] + [("recvBu", list(range(k * nx, (k + 1) * nx)), 1)
                                      for k in range(nu)], "xhat", nx),
    ]
    body = innovation + form_delta + receive + update if current_first \
        else innovation + receive + form_delta + update
    gsk = NodeProgram(GSK, "gsk", [
        Buffer("y", ny, wire=True), Buffer("negCx", ny, wire=True), Buffer("delta", ny),
        Buffer("xhat", nx), Buffer("Axhat", nx, wire=True),
        Buffer("recvBu", nx * nu, wire=True), Buffer("recvDu", ny * len(d_cols), wire=True),
        *body,
    ], location=mid)
    nodes = _of_sensor_relays(sys, GSK) + [gsk] + acts
    return _network("global_state_of", nodes, ny, nu, T=T, current_first=current_first)


SF_BUILDERS = {
    "centralized": build_centralized_sf,
    "original": build_original_sf,
    "global_state": build_global_state_sf,
    "naive_distributed": build_naive_distributed_sf,
    "memconserv_distributed": build_memconserv_distributed_sf,
}

OF_BUILDERS = {
    "centralized": build_centralized_of,
    "sensor_side": build_sensor_side_of,
    "actuator_side": build_actuator_side_of,
    "global_state": build_global_state_of,
}


# -- closed-loop simulation ------------------------------------------------------------

CHANNELS = ("d_x", "d_u", "d_y", "d_xhat")


def _disturbance_arrays(sys: LTISystem, disturbances: Mapping | None, T_sim: int) -> dict:
    dims = {"d_x": sys.nx, "d_u": sys.nu, "d_y": sys.ny, "d_xhat": sys.nx}
    out = {}
    disturbances = disturbances or {}
    unknown = set(disturbances) - set(CHANNELS)
    if unknown:
        raise ValueError(f"unknown disturbance channels {sorted(unknown)}")
    for name, dim in dims.items():
        d = disturbances.get(name)
        if d is None:
            out[name] = np.zeros((T_sim, dim))
            continue
        d = np.asarray(d, dtype=float).reshape(-1, dim) if np.size(d) else np.zeros((0, dim))
        full = np.zeros((T_sim, dim))
        n = min(T_sim, len(d))
        full[:n] = d[:n]
        out[name] = full
    return out


def make_disturbances(sys: LTISystem, T_sim: int, kind: str = "random", seed: int = 0,
                      scale: float = 1.0, channels=("d_x",), index: int = 0, start: int = 0) -> dict:
    """Disturbance programs: ``impulse`` (unit at ``start`` on coordinate ``index``), ``step``, ``random``."""
    rng = np.random.default_rng(seed)
    dims = {"d_x": sys.nx, "d_u": sys.nu, "d_y": sys.ny, "d_xhat": sys.nx}
    out = {}
    for ch in channels:
        d = np.zeros((T_sim, dims[ch]))
        if kind == "impulse":
            if start < T_sim:
                d[start, index] = scale
        elif kind == "step":
            d[start:, index] = scale
        elif kind == "random":
            d = scale * rng.standard_normal((T_sim, dims[ch]))
        else:
            raise ValueError(f"unknown disturbance kind {kind!r}")
        out[ch] = d
    return out


def _feedthrough(controller) -> np.ndarray:
    ny = controller.ny
    K0 = np.zeros((controller.nu, ny))
    for i in range(ny):
        e = np.zeros(ny)
        e[i] = 1.0
        K0[:, i] = controller.step(e, controller.initial_state())[0]
    return K0


def reference_closed_loop(sys: LTISystem, controller, disturbances: Mapping | None, T_sim: int,
                          x0=None) -> Trace:
    """Monolithic plant + controller simulation, the gold trace for equivalence checks.

    The plant input is ``u + d_u`` while the controller keeps its own ``u``.
    ``d_xhat`` enters the controller's internal state update. With ``D != 0``
    the plant-controller loop through the current input is solved each step.
    """
    d = _disturbance_arrays(sys, disturbances, T_sim)
    x = np.zeros(sys.nx) if x0 is None else np.asarray(x0, dtype=float).copy()
    state = controller.initial_state()
    loop = None
    if sys.D.any():
        K0 = _feedthrough(controller)
        loop = np.linalg.inv(np.eye(sys.nu) - K0 @ sys.D)
    rows = {"x": [], "u": [], "y": []}
    internals: dict[str, list] = {}
    for t in range(T_sim):
        w = sys.C @ x + d["d_y"][t]
        if loop is None:
            y = w
        else:
            w = w + sys.D @ d["d_u"][t]
            u_guess = loop @ controller.step(w, state)[0]
            y = w + sys.D @ u_guess
        u, state = controller.step(y, state, d["d_xhat"][t])
        rows["x"].append(x)
        rows["u"].append(u)
        rows["y"].append(y)
        for name, val in controller.internals(state).items():
            internals.setdefault(name, []).append(np.asarray(val, dtype=float))
        x = sys.A @ x + sys.B @ (u + d["d_u"][t]) + d["d_x"][t]
    trace = Trace.from_rows(rows)
    for name, vals in internals.items():
        trace.signals[name] = np.array(vals).reshape(T_sim, -1)
    for name, val in d.items():
        trace.signals[name] = val
    return trace


def simulate_network(sys: LTISystem, net: Network, disturbances: Mapping | None, T_sim: int,
                     x0=None, probes=()) -> Trace:
    """Closed loop of the plant with a deployed network.

    ``probes`` lists ``(node id, signal ref)`` pairs recorded after every step.
    """
    if sys.D.any():
        raise ValueError("network simulation needs D = 0; the plant output would depend on the "
                         "input the network is about to produce")
    if net.n_inputs != sys.ny and not (net.n_inputs == sys.nx and sys.is_state_feedback):
        raise ValueError(f"network takes {net.n_inputs} inputs, plant provides {sys.ny}")
    d = _disturbance_arrays(sys, disturbances, T_sim)
    x = np.zeros(sys.nx) if x0 is None else np.asarray(x0, dtype=float).copy()
    rows = {"x": [], "u": [], "y": []}
    probe_rows = {f"{n}:{r}": [] for n, r in probes}
    for t in range(T_sim):
        y = sys.C @ x + d["d_y"][t]
        u = run_network_step(net, t, y)
        rows["x"].append(x)
        rows["u"].append(u)
        rows["y"].append(y)
        for n, r in probes:
            probe_rows[f"{n}:{r}"].append(net.read(n, r))
        x = sys.A @ x + sys.B @ (u + d["d_u"][t]) + d["d_x"][t]
    trace = Trace.from_rows(rows)
    for key, vals in probe_rows.items():
        trace.signals[key] = np.array(vals).reshape(T_sim, -1)
    return trace


def max_relative_deviation(a: Trace, b: Trace, names=("x", "u")) -> float:
    """max |a - b| / max(1, max |b|) over the named signals."""
    worst = 0.0
    for n in names:
        ref = b[n]
        scale = max(1.0, float(np.max(np.abs(ref), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(a[n] - ref), initial=0.0)) / scale)
    return worst


def message_hops(net: Network) -> list[tuple[int, str, str, float]]:
    """Per ledger message, the distance between the source and target locations."""
    out = []
    for m in net.ledger:
        out.append((m.t, m.source, m.target,
                    abs(net.nodes[m.source].location - net.nodes[m.target].location)))
    return out
