"""Command-line pipelines: synthesize, simulate, compare, costs, probe.

Every command reads a JSON scenario, validated against ``scenario.schema.json``,
and writes into ``--out``. Outputs carry the scenario's sha256 and the seed;
CSV floats use 17 significant digits so reruns are byte-identical.

Exit codes: 0 success, 1 usage or schema error, 2 infeasible synthesis,
3 comparison mismatch beyond tolerance.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys as _sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .architectures import (OF_BUILDERS, SF_BUILDERS, make_disturbances, max_relative_deviation,
                            reference_closed_loop, simulate_network)
from .costs import (COMPARISON_OF, COMPARISON_SF, PUBLISHED_OF, PUBLISHED_SF, measure_costs,
                    predict_of_costs, predict_sf_costs, reconcile)
from .lti import LTISystem, SpectralSeries, Trace, is_schur_stable, matrix_from_json, system_to_json
from .realizations import OFSimplified, OFStandard, SFSimplified, SFStandard
from .stability import SIGNALS, internal_stability_probe
from .synthesis import (InfeasibleError, SparsityPattern, SynthesisSpec, SystemResponseOF,
                        SystemResponseSF, default_eval_horizon, quadruple_from_phiuy,
                        synth_of_h2_quadruple, synth_of_youla, synth_sf_h2,
                        validate_of_achievability, validate_sf_achievability)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3

DEFAULT_COMPARE_TOL = 1e-9


class UsageError(Exception):
    """Bad flags, schema violations, or scenarios that contradict their own choices."""


# -- plant generators -----------------------------------------------------------------

def _select_outputs(nx: int, outputs) -> np.ndarray:
    if outputs is None:
        return np.eye(nx)
    bad = [i for i in outputs if i >= nx]
    if bad:
        raise UsageError(f"plant.outputs: indices {bad} out of range for {nx} states")
    return np.eye(nx)[list(outputs)]


def chain_plant(n: int, a_diag: float = 0.4, a_off: float = 0.2, b_diag: float = 1.0,
                outputs=None) -> LTISystem:
    """Tridiagonal chain of ``n`` scalar subsystems, one actuator each."""
    A = a_diag * np.eye(n) + a_off * (np.eye(n, k=1) + np.eye(n, k=-1))
    return LTISystem(A, b_diag * np.eye(n), _select_outputs(n, outputs))


def grid_plant(width: int, height: int, a_diag: float = 0.4, a_off: float = 0.1,
               b_diag: float = 1.0, outputs=None) -> LTISystem:
    """Row-major ``width`` x ``height`` grid coupled to its four neighbours."""
    n = width * height
    A = a_diag * np.eye(n)
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                A[i, i + 1] = A[i + 1, i] = a_off
            if r + 1 < height:
                A[i, i + width] = A[i + width, i] = a_off
    return LTISystem(A, b_diag * np.eye(n), _select_outputs(n, outputs))


def plant_from_config(cfg: dict) -> LTISystem:
    kind = cfg["type"]
    shape_keys = {k: cfg[k] for k in ("a_diag", "a_off", "b_diag") if k in cfg}
    if kind == "chain":
        return chain_plant(cfg["n"], outputs=cfg.get("outputs"), **shape_keys)
    if kind == "grid":
        return grid_plant(cfg["width"], cfg["height"], outputs=cfg.get("outputs"), **shape_keys)
    mats = {k: matrix_from_json(cfg[k]) for k in "ABCD" if k in cfg}
    try:
        return LTISystem(mats["A"], mats["B"], mats.get("C"), mats.get("D"))
    except ValueError as exc:
        raise UsageError(f"plant: {exc}") from exc


# -- scenario ---------------------------------------------------------------------------

def load_schema() -> dict:
    return json.loads(resources.files("slsdeploy").joinpath("scenario.schema.json").read_text())


def _weight(value, n: int):
    if value is None:
        return None
    M = matrix_from_json(value)
    return float(M[0, 0]) * np.eye(n) if M.size == 1 else M


@dataclass
class Scenario:
    raw: dict
    sha256: str
    seed: int
    sys: LTISystem
    mode: str
    spec: SynthesisSpec
    realization: str
    architectures: list
    disturbance: dict = field(default_factory=dict)
    T_sim: int = 100
    eval_horizon: int | None = None
    perturb: dict | None = None
    probe: dict = field(default_factory=dict)
    name: str = ""

    @property
    def is_sf(self) -> bool:
        return self.mode == "sf"

    @property
    def builders(self) -> dict:
        return SF_BUILDERS if self.is_sf else OF_BUILDERS

    def stamp(self) -> dict:
        return {"scenario_sha256": self.sha256, "seed": self.seed, "name": self.name}


def _schema_message(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in (err.instance or {})]
        parts.append(missing[0] if missing else "?")
    path = "/".join(parts) or "<root>"
    fld = parts[-1] if parts else "<root>"
    return f"schema violation at {path} (field {fld!r}): {err.message}"


def parse_scenario(text: bytes | str, seed: int | None = None, arch: list | None = None) -> Scenario:
    data = text.encode() if isinstance(text, str) else text
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft7Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise UsageError(_schema_message(errors[0]))

    plant = plant_from_config(raw["plant"])
    syn = raw["synthesis"]
    mode = syn["mode"]
    if mode == "sf" and not plant.is_state_feedback:
        raise UsageError("synthesis.mode: 'sf' needs C = I and D = 0; drop plant.outputs or pick an OF mode")
    stable = is_schur_stable(plant.A)[0]
    realization = raw.get("realization", "simplified" if stable else "standard")
    if realization == "simplified" and not stable:
        raise UsageError("realization: the simplified realization needs a Schur-stable plant")
    if mode == "of_youla" and not stable:
        raise UsageError("synthesis.mode: the Youla route needs a Schur-stable plant")

    pattern = None
    if "bandwidth" in syn:
        names = ("phi_x", "phi_u") if mode == "sf" else ("phi_uy",)
        pattern = SparsityPattern.banded(syn["bandwidth"], names)
    spec = SynthesisSpec(
        horizon=syn["horizon"],
        state_weight=_weight(syn.get("state_weight"), plant.nx),
        input_weight=_weight(syn.get("input_weight"), plant.nu),
        terminal=syn.get("terminal", "hard"),
        penalty=syn.get("penalty", 1e4),
        pattern=pattern,
    )
    builders = SF_BUILDERS if mode == "sf" else OF_BUILDERS
    archs = list(arch) if arch else list(raw.get("architectures", builders))
    unknown = [a for a in archs if a not in builders]
    if unknown:
        raise UsageError(f"architectures: unknown ids {unknown}; known: {sorted(builders)}")
    perturb = raw.get("perturb")
    if perturb:
        bad = [a for a in perturb["architectures"] if a not in builders]
        if bad:
            raise UsageError(f"perturb/architectures: unknown ids {bad}")
    return Scenario(
        raw=raw,
        sha256=hashlib.sha256(data).hexdigest(),
        seed=int(raw.get("seed", 0)) if seed is None else int(seed),
        sys=plant,
        mode=mode,
        spec=spec,
        realization=realization,
        architectures=archs,
        disturbance=raw.get("disturbance", {}),
        T_sim=raw.get("T_sim", 100),
        eval_horizon=syn.get("eval_horizon"),
        perturb=perturb,
        probe=raw.get("probe", {}),
        name=raw.get("name", ""),
    )


def load_scenario(path, seed: int | None = None, arch: list | None = None) -> Scenario:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(data, seed, arch)


# -- pipeline pieces -------------------------------------------------------------------

@dataclass
class Design:
    """Synthesized response plus what the realizations and builders consume."""

    result: object
    response: object          # SystemResponseSF, SystemResponseOF, or Phi_uy series
    builder_input: object     # what the architecture builders take
    quadruple: SystemResponseOF | None = None


def synthesize(sc: Scenario) -> Design:
    if sc.mode == "sf":
        res = synth_sf_h2(sc.sys, sc.spec)
        return Design(res, res.response, res.response)
    if sc.mode == "of_quadruple":
        res = synth_of_h2_quadruple(sc.sys, sc.spec)
        return Design(res, res.response, res.response.phi_uy, res.response)
    res = synth_of_youla(sc.sys, sc.spec, eval_horizon=sc.eval_horizon)
    H = sc.eval_horizon or default_eval_horizon(sc.spec.horizon)
    return Design(res, res.response, res.response, quadruple_from_phiuy(sc.sys, res.response, H))


def reference_controller(sc: Scenario, design: Design):
    if sc.is_sf:
        if sc.realization == "simplified":
            return SFSimplified(sc.sys, design.response.phi_u)
        return SFStandard(design.response)
    if sc.realization == "simplified":
        return OFSimplified(sc.sys, design.builder_input)
    return OFStandard(design.quadruple, sc.sys)


def _perturbed(series: SpectralSeries, p: dict) -> SpectralSeries:
    els = np.array(series.elements, dtype=float)
    k = p["tap"] - series.start_tau
    if not (0 <= k < len(els)) or p["row"] >= els.shape[1] or p["col"] >= els.shape[2]:
        raise UsageError(f"perturb: entry ({p['tap']}, {p['row']}, {p['col']}) is outside the response")
    els[k, p["row"], p["col"]] += p["delta"]
    return SpectralSeries(series.start_tau, els, series.shape)


def build_networks(sc: Scenario, design: Design) -> dict:
    nets = {}
    for name in sc.architectures:
        data = design.builder_input
        if sc.perturb and name in sc.perturb["architectures"]:
            if sc.is_sf:
                data = SystemResponseSF(data.phi_x, _perturbed(data.phi_u, sc.perturb))
            else:
                data = _perturbed(data, sc.perturb)
        nets[name] = sc.builders[name](sc.sys, data)
    return nets


def disturbances(sc: Scenario) -> dict:
    d = sc.disturbance
    return make_disturbances(sc.sys, sc.T_sim, kind=d.get("kind", "random"), seed=sc.seed,
                             scale=d.get("scale", 1.0), channels=tuple(d.get("channels", ["d_x"])),
                             index=d.get("index", 0), start=d.get("start", 0))


# -- writers ------------------------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def _header(sc: Scenario) -> str:
    return f"# scenario_sha256={sc.sha256} seed={sc.seed}\n"


def trace_csv(sc: Scenario, trace: Trace, names=("x", "u", "y")) -> str:
    buf = io.StringIO()
    buf.write(_header(sc))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *trace.columns(list(names))])
    for t, row in enumerate(trace.to_rows(list(names))):
        w.writerow([t, *map(_fmt, row)])
    return buf.getvalue()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, sc: Scenario, payload: dict):
    _write(path, json.dumps({**sc.stamp(), **payload}, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------------

def cmd_synthesize(sc: Scenario, out: Path) -> int:
    design = synthesize(sc)
    if sc.mode == "sf":
        report = validate_sf_achievability(design.response, sc.sys)
        response = design.response.to_json()
    elif sc.mode == "of_quadruple":
        report = validate_of_achievability(design.response, sc.sys)
        response = design.response.to_json()
    else:
        report = validate_of_achievability(design.quadruple, sc.sys)
        response = {"kind": "youla", "phi_uy": design.response.to_json()}
    r = design.result
    _write_json(out / "response.json", sc, {
        "mode": sc.mode, "system": system_to_json(sc.sys), "response": response,
        "objective": r.objective})
    report = {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v)
              for k, v in report.items() if not isinstance(v, (list, np.ndarray))}
    _write_json(out / "achievability.json", sc, {
        "achievability": report, "kkt_residual": r.kkt_residual,
        "constraint_residual": r.constraint_residual, "terminal_residual": r.terminal_residual})
    print(f"synthesized {sc.mode} T={sc.spec.horizon} objective={r.objective:.6g} "
          f"achievable={report.get('ok')}")
    return EXIT_OK


def run_simulations(sc: Scenario):
    design = synthesize(sc)
    dist = disturbances(sc)
    ref = reference_closed_loop(sc.sys, reference_controller(sc, design), dist, sc.T_sim)
    nets = build_networks(sc, design)
    traces = {name: simulate_network(sc.sys, net, dist, sc.T_sim) for name, net in nets.items()}
    return ref, nets, traces


def cmd_simulate(sc: Scenario, out: Path) -> int:
    ref, nets, traces = run_simulations(sc)
    _write(out / "trace_reference.csv", trace_csv(sc, ref))
    for name, net in nets.items():
        _write(out / f"trace_{name}.csv", trace_csv(sc, traces[name]))
        _write(out / f"ledger_{name}.csv", _header(sc) + net.ledger_csv())
        _write_json(out / f"network_{name}.json", sc, {"network": net.to_json()})
        print(f"{name}: {len(net.ledger)} messages over {sc.T_sim} steps")
    return EXIT_OK


def deviation_matrix(ref: Trace, traces: dict) -> tuple[list, np.ndarray]:
    names = ["reference", *traces]
    all_traces = {"reference": ref, **traces}
    M = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            M[i, j] = max_relative_deviation(all_traces[a], all_traces[b])
    return names, M


def cmd_compare(sc: Scenario, out: Path, tol: float = DEFAULT_COMPARE_TOL) -> int:
    ref, _, traces = run_simulations(sc)
    names, M = deviation_matrix(ref, traces)
    buf = io.StringIO()
    buf.write(_header(sc))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["architecture", *names])
    for n, row in zip(names, M):
        w.writerow([n, *map(_fmt, row)])
    _write(out / "compare.csv", buf.getvalue())
    vs_ref = {n: float(M[i, 0]) for i, n in enumerate(names) if n != "reference"}
    failing = sorted(n for n, v in vs_ref.items() if v > tol)
    _write_json(out / "compare.json", sc, {"tol": tol, "vs_reference": vs_ref, "mismatched": failing})
    for n, v in vs_ref.items():
        print(f"{n}: max relative deviation {v:.3e} {'MISMATCH' if v > tol else 'ok'}")
    return EXIT_MISMATCH if failing else EXIT_OK


def cmd_costs(sc: Scenario, out: Path) -> int:
    design = synthesize(sc)
    nets = build_networks(sc, design)
    nx, nu, ny = sc.sys.dims
    T = sc.spec.horizon
    reports = []
    csv_parts = []
    for name, net in nets.items():
        measured = measure_costs(net, steps=1, seed=sc.seed)
        entry = {"architecture": name, "measured": measured.measured, "per_node": measured.per_node}
        if sc.is_sf and name in PUBLISHED_SF:
            pred = predict_sf_costs(name, (nx, nu), T)
        elif not sc.is_sf and name in PUBLISHED_OF:
            pred = predict_of_costs(name, (nx, nu, ny), T)
        else:
            pred = None
        if pred is not None:
            pred.measured = measured.measured
            entry.update(predicted=pred.predicted, scalar_predicted=pred.scalar_predicted,
                         reconciliation=reconcile(pred, measured))
            csv_parts.append(pred.to_csv())
        else:
            csv_parts.append(measured.to_csv())
        reports.append(entry)
    table = COMPARISON_SF if sc.is_sf else COMPARISON_OF
    _write_json(out / "costs.json", sc, {"dims": {"nx": nx, "nu": nu, "ny": ny, "T": T},
                                         "reports": reports, "comparison": table})
    body = "".join(p if i == 0 else p.split("\n", 1)[1] for i, p in enumerate(csv_parts))
    _write(out / "costs.csv", _header(sc) + body)
    for e in reports:
        m = e["measured"]
        print(f"{e['architecture']}: flops={m['flops']} memory={m['memory']} messages={m['messages']}")
    return EXIT_OK


def cmd_probe(sc: Scenario, out: Path, tol: float | None = None) -> int:
    design = synthesize(sc)
    ctrl = reference_controller(sc, design)
    tol = tol if tol is not None else sc.probe.get("tol", 1e-6)
    rep = internal_stability_probe(sc.sys, ctrl, horizon=sc.probe.get("horizon"), tol=tol)
    _write(out / "probe.csv", _header(sc) + rep.to_csv())
    grid = {f"{c}->{s}": {"peak": e.peak, "tail": e.tail, "decayed": e.decayed}
            for (c, s), e in sorted(rep.grid.items())}
    _write_json(out / "probe.json", sc, {"horizon": rep.horizon, "tol": tol, "signals": list(SIGNALS),
                                         "grid": grid, "all_decayed": rep.all_decayed})
    print(f"probe horizon={rep.horizon}: {sum(e.decayed for e in rep.grid.values())}/{len(rep.grid)} "
          f"responses decayed below {tol:g}")
    return EXIT_OK


COMMANDS = {
    "synthesize": lambda sc, a: cmd_synthesize(sc, a.out),
    "simulate": lambda sc, a: cmd_simulate(sc, a.out),
    "compare": lambda sc, a: cmd_compare(sc, a.out, DEFAULT_COMPARE_TOL if a.tol is None else a.tol),
    "costs": lambda sc, a: cmd_costs(sc, a.out),
    "probe": lambda sc, a: cmd_probe(sc, a.out, a.tol),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(_sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _arch_list(text: str) -> list:
    return [a.strip() for a in text.split(",") if a.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON file")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--seed", type=_u64, default=None, help="override the scenario seed")
    common.add_argument("--arch", type=_arch_list, default=None, help="comma-separated architecture ids")
    common.add_argument("--tol", type=float, default=None, help="comparison or probe tolerance")
    parser = _Parser(prog="slsdeploy", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = load_scenario(args.scenario, args.seed, args.arch)
        if args.out is None:
            args.out = Path(sc.raw.get("outputs", {}).get("dir", "out"))
        return COMMANDS[args.command](sc, args)
    except UsageError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    _sys.exit(main())
