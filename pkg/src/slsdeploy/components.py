"""Basic cyber components, node programs, and a deterministic network scheduler.

A node program is an ordered list of components acting on named local
signals. Registers (``Buffer``) keep their value across steps and count
toward memory; wires are scratch values that reset every step. A
``DelayBuffer`` holds the past ``n`` values of a signal, read as
``"name@k"`` for k = 1..n.

Scheduling inside a step: nodes are swept in ascending id order, each one
running until it finishes or waits at a ``Collector`` whose parts have not
arrived. Sweeps repeat until every live node is done. A sweep without
progress means a dependency cycle across nodes and raises
:class:`AlgebraicLoopError`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class AlgebraicLoopError(RuntimeError):
    """Nodes wait on each other within one step."""


class ChannelError(ValueError):
    """A message payload does not fit the slot it is delivered to."""


def _parse_ref(ref: str) -> tuple[str, int]:
    if "@" in ref:
        name, k = ref.split("@")
        return name, int(k)
    return ref, 0


@dataclass
class Buffer:
    name: str
    dim: int
    wire: bool = False

    @property
    def memory(self) -> int:
        return 0 if self.wire else self.dim

    flops = 0


@dataclass
class DelayBuffer:
    """z^-n line fed by ``source``; shifts once at the end of each step."""

    name: str
    dim: int
    n: int
    source: str

    @property
    def memory(self) -> int:
        return self.n * self.dim

    flops = 0


@dataclass
class Multiplier:
    """output = matrix @ concat(inputs)."""

    matrix: np.ndarray
    inputs: list[str]
    output: str

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))

    @property
    def memory(self) -> int:
        return int(self.matrix.size)

    @property
    def flops(self) -> int:
        m, n = self.matrix.shape
        return m * (2 * n - 1) if n else 0


@dataclass
class Adder:
    """output = sum of signed terms; each term is (ref, indices or None, sign)."""

    terms: list[tuple[str, object, int]]
    output: str
    dim: int

    memory = 0

    @property
    def flops(self) -> int:
        k = len(self.terms)
        if k == 0:
            return 0
        extra = self.dim if self.terms[0][2] < 0 else 0
        return self.dim * (k - 1) + extra


@dataclass
class Disseminator:
    """Send ``source[indices]`` to each target under a semantic label."""

    source: str
    routes: list[tuple[str, list[int], str]]

    memory = 0
    flops = 0


@dataclass
class Collector:
    """Assemble ``output`` from parts ``(source node, label, output indices)``.

    Parts from failed or finished-without-sending nodes read as zero. A
    ``required`` collector instead halts its node for the step.
    """

    output: str
    parts: list[tuple[str, str, list[int]]]
    required: bool = False

    memory = 0
    flops = 0


@dataclass
class NodeProgram:
    id: str
    role: str
    components: list
    index: int = 0
    location: float = 0.0
    input: tuple[str, list[int]] | None = None
    output: tuple[str, list[int]] | None = None

    def buffers(self) -> dict[str, Buffer]:
        return {c.name: c for c in self.components if isinstance(c, Buffer)}

    def delays(self) -> dict[str, DelayBuffer]:
        return {c.name: c for c in self.components if isinstance(c, DelayBuffer)}

    @property
    def memory(self) -> int:
        return sum(c.memory for c in self.components)

    @property
    def multiplier_memory(self) -> int:
        return sum(c.memory for c in self.components if isinstance(c, Multiplier))

    @property
    def buffer_memory(self) -> int:
        return sum(c.memory for c in self.components if isinstance(c, (Buffer, DelayBuffer)))

    @property
    def flops_per_step(self) -> int:
        return sum(c.flops for c in self.components)

    def to_json(self) -> dict:
        comps = []
        for c in self.components:
            d = {"type": type(c).__name__}
            for k, v in vars(c).items():
                d[k] = v.tolist() if isinstance(v, np.ndarray) else v
            comps.append(d)
        return {"id": self.id, "role": self.role, "index": self.index, "location": self.location,
                "input": self.input, "output": self.output, "components": comps}


@dataclass(frozen=True)
class Message:
    t: int
    source: str
    target: str
    label: str
    payload: tuple

    @property
    def dim(self) -> int:
        return len(self.payload)


@dataclass
class _NodeRuntime:
    regs: dict
    lines: dict
    pc: int = 0
    done: bool = False
    halted: bool = False


@dataclass
class Network:
    nodes: dict[str, NodeProgram] = field(default_factory=dict)
    n_inputs: int = 0
    n_outputs: int = 0
    kind: str = ""
    ledger: list[Message] = field(default_factory=list)
    failed: set = field(default_factory=set)
    flops: dict = field(default_factory=dict)
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = dict(sorted(self.nodes.items()))
        self._rt = {nid: self._fresh(node) for nid, node in self.nodes.items()}
        self.flops = {nid: 0 for nid in self.nodes}

    @staticmethod
    def _fresh(node: NodeProgram) -> _NodeRuntime:
        regs = {b.name: np.zeros(b.dim) for b in node.buffers().values()}
        lines = {d.name: np.zeros((d.n, d.dim)) for d in node.delays().values()}
        return _NodeRuntime(regs, lines)

    def add_node(self, node: NodeProgram):
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id}")
        self.nodes[node.id] = node
        self.nodes = dict(sorted(self.nodes.items()))
        self._rt[node.id] = self._fresh(node)
        self.flops[node.id] = 0

    def reset(self):
        self.ledger = []
        self.failed = set()
        self.steps = 0
        self._rt = {nid: self._fresh(node) for nid, node in self.nodes.items()}
        self.flops = {nid: 0 for nid in self.nodes}

    # -- signal access ------------------------------------------------------

    def read(self, node_id: str, ref: str) -> np.ndarray:
        rt = self._rt[node_id]
        name, k = _parse_ref(ref)
        if k == 0:
            return rt.regs[name].copy()
        line = rt.lines[name]
        return line[k - 1].copy() if k <= len(line) else np.zeros(line.shape[1])

    def _get(self, rt: _NodeRuntime, ref: str) -> np.ndarray:
        name, k = _parse_ref(ref)
        if k == 0:
            return rt.regs[name]
        line = rt.lines[name]
        return line[k - 1] if k <= len(line) else np.zeros(line.shape[1])

    # -- structure ------------------------------------------------------------

    @property
    def memory(self) -> int:
        return sum(n.memory for n in self.nodes.values())

    def messages_per_step(self) -> int:
        """Routed messages per step from the wiring (structure only)."""
        return sum(len(c.routes) for n in self.nodes.values() for c in n.components
                   if isinstance(c, Disseminator))

    def channels(self) -> list[tuple[str, str, str]]:
        out = []
        for nid, node in self.nodes.items():
            for c in node.components:
                if isinstance(c, Disseminator):
                    out.extend((nid, target, label) for target, _, label in c.routes)
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_inputs": self.n_inputs, "n_outputs": self.n_outputs,
                "nodes": [n.to_json() for n in self.nodes.values()]}

    # -- ledger export ----------------------------------------------------------

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "source", "target", "label", "dim", "payload"])
        for m in self.ledger:
            w.writerow([m.t, m.source, m.target, m.label, m.dim,
                        " ".join(format(v, ".17g") for v in m.payload)])
        return buf.getvalue()

    def ledger_json(self) -> str:
        rows = [{"t": m.t, "source": m.source, "target": m.target, "label": m.label,
                 "dim": m.dim, "payload": list(m.payload)} for m in self.ledger]
        return json.dumps(rows, indent=1)


def validate_wiring(net: Network) -> list[str]:
    """Return wiring violations; an empty list means the network is consistent."""
    problems = []
    sent = {}
    for nid, node in net.nodes.items():
        declared = set(node.buffers())
        known = declared | set(node.delays())
        for c in node.components:
            if isinstance(c, Disseminator):
                base, _ = _parse_ref(c.source)
                if base not in known:
                    problems.append(f"{nid}: disseminator reads undeclared signal {c.source}")
                for target, idx, label in c.routes:
                    if target not in net.nodes:
                        problems.append(f"{nid}: disseminator targets absent node {target} ({label})")
                    sent[(nid, target, label)] = len(idx)
            elif isinstance(c, (Multiplier, Adder, Collector)):
                if c.output not in declared:
                    problems.append(f"{nid}: {type(c).__name__} writes undeclared signal {c.output}")
            elif isinstance(c, DelayBuffer) and c.source not in declared:
                problems.append(f"{nid}: delay line {c.name} fed by undeclared signal {c.source}")
        if node.input is not None and node.input[0] not in declared:
            problems.append(f"{nid}: input port writes undeclared signal {node.input[0]}")
        if node.output is not None and node.output[0] not in declared:
            problems.append(f"{nid}: output port reads undeclared signal {node.output[0]}")
    expected = {}
    for nid, node in net.nodes.items():
        bufs = node.buffers()
        for c in node.components:
            if not isinstance(c, Collector):
                continue
            dim = bufs[c.output].dim if c.output in bufs else 0
            cover = np.zeros(dim, dtype=int)
            for source, label, idx in c.parts:
                expected[(source, nid, label)] = len(idx)
                for i in idx:
                    if 0 <= i < dim:
                        cover[i] += 1
                    else:
                        problems.append(f"{nid}: collector {c.output} index {i} out of range")
            bad = [int(i) for i in np.flatnonzero(cover != 1)]
            if bad:
                problems.append(f"{nid}: collector {c.output} covers indices {bad} not exactly once")
    for key, n in sent.items():
        if key not in expected:
            problems.append(f"message {key[0]}->{key[1]} '{key[2]}' has no matching collector part")
        elif expected[key] != n:
            problems.append(f"message {key[0]}->{key[1]} '{key[2]}' sends {n} values, collector expects {expected[key]}")
    for key in expected:
        if key not in sent:
            problems.append(f"collector part {key[0]}->{key[1]} '{key[2]}' has no matching disseminator")
    return problems


def fail_node(net: Network, node_id: str) -> Network:
    """Mark a node failed: it no longer runs, sends, or receives."""
    if node_id not in net.nodes:
        raise KeyError(node_id)
    net.failed.add(node_id)
    return net


def run_network_step(net: Network, t: int, inputs) -> np.ndarray:
    """Execute one synchronous step and return the assembled actuator outputs."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    if inputs.shape != (net.n_inputs,):
        raise ChannelError(f"network expects {net.n_inputs} inputs, got {inputs.shape}")
    mailbox: dict[tuple[str, str, str], np.ndarray] = {}
    live = [nid for nid in net.nodes if nid not in net.failed]
    for nid in live:
        node, rt = net.nodes[nid], net._rt[nid]
        rt.pc, rt.done, rt.halted = 0, False, False
        for b in node.buffers().values():
            if b.wire:
                rt.regs[b.name] = np.zeros(b.dim)
        if node.input is not None:
            name, idx = node.input
            rt.regs[name] = inputs[idx].copy()

    def finished(nid):
        return nid in net.failed or net._rt[nid].done

    while True:
        progress = False
        for nid in live:
            rt = net._rt[nid]
            if rt.done:
                continue
            moved = _run_node(net, nid, t, mailbox, finished)
            progress = progress or moved
        if all(net._rt[nid].done for nid in live):
            break
        if not progress:
            waiting = [nid for nid in live if not net._rt[nid].done]
            raise AlgebraicLoopError(f"step {t}: nodes {waiting} wait on each other")

    out = np.zeros(net.n_outputs)
    for nid in live:
        node, rt = net.nodes[nid], net._rt[nid]
        if not rt.halted:
            for d in node.delays().values():
                line = rt.lines[d.name]
                if d.n:
                    line[1:] = line[:-1]
                    line[0] = rt.regs[d.source]
        if node.output is not None and not rt.halted:
            name, idx = node.output
            out[idx] = rt.regs[name]
    net.steps += 1
    return out


def _run_node(net: Network, nid: str, t: int, mailbox, finished) -> bool:
    node, rt = net.nodes[nid], net._rt[nid]
    start = rt.pc
    comps = node.components
    while rt.pc < len(comps):
        c = comps[rt.pc]
        if isinstance(c, Collector):
            ready = all((src, nid, label) in mailbox or finished(src) for src, label, _ in c.parts)
            if not ready:
                return rt.pc != start
            out = np.zeros(len(rt.regs[c.output]))
            for src, label, idx in c.parts:
                key = (src, nid, label)
                if key in mailbox:
                    payload = mailbox.pop(key)
                    if payload.shape != (len(idx),):
                        raise ChannelError(f"{src}->{nid} '{label}': payload {payload.shape}, slot {len(idx)}")
                    out[idx] = payload
                elif c.required:
                    rt.halted = True
                    rt.done = True
                    return True
            rt.regs[c.output] = out
        elif isinstance(c, Disseminator):
            src = net._get(rt, c.source)
            for target, idx, label in c.routes:
                if target in net.failed:
                    continue
                payload = np.array(src[idx], dtype=float)
                mailbox[(nid, target, label)] = payload
                net.ledger.append(Message(t, nid, target, label, tuple(float(v) for v in payload)))
        elif isinstance(c, Multiplier):
            vec = np.concatenate([net._get(rt, r) for r in c.inputs]) if c.inputs else np.zeros(0)
            rt.regs[c.output] = c.matrix @ vec if vec.size else np.zeros(c.matrix.shape[0])
            net.flops[nid] += c.flops
        elif isinstance(c, Adder):
            acc = np.zeros(c.dim)
            for ref, idx, sign in c.terms:
                v = net._get(rt, ref)
                v = v if idx is None else v[idx]
                acc = acc + sign * v
            rt.regs[c.output] = acc
            net.flops[nid] += c.flops
        rt.pc += 1
    rt.done = True
    return True


def run_network(net: Network, inputs: Sequence) -> np.ndarray:
    """Drive the network open loop with a sequence of input vectors."""
    return np.array([run_network_step(net, t, y) for t, y in enumerate(inputs)])
