import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slsdeploy.components import (Adder, AlgebraicLoopError, Buffer, ChannelError, Collector,
                                  DelayBuffer, Disseminator, Multiplier, Network, NodeProgram,
                                  fail_node, run_network, run_network_step, validate_wiring)


@pytest.mark.parametrize("m,n", [(1, 1), (2, 3), (4, 1), (3, 5)])
def test_multiplier_counts(m, n):
    mult = Multiplier(np.ones((m, n)), ["a"], "b")
    assert mult.flops == m * (2 * n - 1)
    assert mult.memory == m * n


@pytest.mark.parametrize("signs,dim,expected", [
    ((1, 1), 3, 3), ((1, 1, 1), 2, 4), ((-1, 1), 2, 4), ((1,), 4, 0), ((-1,), 2, 2)])
def test_adder_counts(signs, dim, expected):
    add = Adder([(f"t{i}", None, s) for i, s in enumerate(signs)], "out", dim)
    assert add.flops == expected
    assert add.memory == 0


def test_buffer_memory():
    assert Buffer("a", 3).memory == 3
    assert Buffer("a", 3, wire=True).memory == 0
    assert DelayBuffer("d", 2, 4, "a").memory == 8


def relay_network(gain=2.0, required=False):
    """Sensor forwards y; controller scales it and keeps a one-step delay line."""
    sensor = NodeProgram("s001", "sensor", [
        Buffer("y", 1, wire=True),
        Disseminator("y", [("ctrl", [0], "y_1")]),
    ], location=0.0, input=("y", [0]))
    ctrl = NodeProgram("ctrl", "controller", [
        Buffer("y", 1, wire=True), Buffer("u", 1), DelayBuffer("yd", 1, 2, "y"),
        Collector("y", [("s001", "y_1", [0])], required=required),
        Multiplier([[gain, 1.0]], ["y", "yd@1"], "u"),
    ], location=1.0, output=("u", [0]))
    return Network({"s001": sensor, "ctrl": ctrl}, 1, 1, kind="relay")


def test_relay_network_runs_and_logs():
    net = relay_network()
    assert validate_wiring(net) == []
    out = run_network(net, [[1.0], [2.0], [3.0]])
    np.testing.assert_allclose(out.ravel(), [2.0, 5.0, 8.0])
    assert [(m.t, m.source, m.target, m.label) for m in net.ledger] == \
        [(t, "s001", "ctrl", "y_1") for t in range(3)]
    assert net.flops["ctrl"] == 3 * 3
    np.testing.assert_allclose(net.read("ctrl", "yd@1"), [3.0])
    np.testing.assert_allclose(net.read("ctrl", "yd@2"), [2.0])
    np.testing.assert_allclose(net.read("ctrl", "yd@3"), [0.0])


def test_memory_inventory():
    net = relay_network()
    assert net.memory == 2 + 1 + 2
    assert net.messages_per_step() == 1
    assert net.channels() == [("s001", "ctrl", "y_1")]


def test_wiring_problems_are_reported():
    net = relay_network()
    net.nodes["ctrl"].components[3] = Collector("y", [("s001", "wrong", [0])])
    problems = validate_wiring(net)
    assert any("no matching collector" in p for p in problems)
    assert any("no matching disseminator" in p for p in problems)


def test_undeclared_signal_reported():
    node = NodeProgram("n", "x", [Multiplier([[1.0]], ["a"], "ghost")])
    assert any("undeclared" in p for p in validate_wiring(Network({"n": node})))


def test_wrong_input_width_raises():
    with pytest.raises(ChannelError):
        run_network_step(relay_network(), 0, [1.0, 2.0])


def test_algebraic_loop_detected():
    def node(me, other):
        return NodeProgram(me, "x", [
            Buffer("v", 1),
            Collector("v", [(other, "v", [0])]),
            Disseminator("v", [(other, [0], "v")]),
        ])
    net = Network({"a": node("a", "b"), "b": node("b", "a")}, 0, 0)
    with pytest.raises(AlgebraicLoopError):
        run_network_step(net, 0, [])


def test_failed_sender_reads_zero():
    net = relay_network()
    run_network_step(net, 0, [1.0])
    fail_node(net, "s001")
    out = run_network_step(net, 1, [5.0])
    np.testing.assert_allclose(out, [1.0])  # only the delayed sample remains
    assert all(m.source != "s001" or m.t == 0 for m in net.ledger)


def test_failed_receiver_gets_nothing():
    net = relay_network()
    fail_node(net, "ctrl")
    out = run_network_step(net, 0, [1.0])
    assert not out.any() and net.ledger == []
    with pytest.raises(KeyError):
        fail_node(net, "nobody")


def test_required_collector_halts_without_shifting():
    net = relay_network(required=True)
    run_network_step(net, 0, [1.0])
    fail_node(net, "s001")
    before = net.read("ctrl", "yd@1")
    out = run_network_step(net, 1, [5.0])
    assert not out.any()
    np.testing.assert_array_equal(net.read("ctrl", "yd@1"), before)


def test_reset_clears_state():
    net = relay_network()
    run_network(net, [[1.0], [2.0]])
    fail_node(net, "s001")
    net.reset()
    assert net.ledger == [] and not net.failed and net.steps == 0
    assert not net.read("ctrl", "yd@1").any()


def test_ledger_csv_is_exact():
    net = relay_network()
    run_network(net, [[0.1], [1 / 3]])
    lines = net.ledger_csv().splitlines()
    assert lines[0] == "t,source,target,label,dim,payload"
    assert lines[2].split(",")[-1] == format(1 / 3, ".17g")
    assert float(lines[2].split(",")[-1]) == 1 / 3


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8))
def test_message_count_ignores_payload(values):
    net = relay_network()
    run_network(net, [[v] for v in values])
    assert len(net.ledger) == len(values) * net.messages_per_step()
