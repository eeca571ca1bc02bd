#!/usr/bin/env python3
"""
Pruebas de autograd: gradientes por diferencias finitas, backward, ADAM y calendario
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest

import autograd as ag
from engine import gradient_suite
from errors import ConfigError, GraphCycleError, ShapeError
from models import TrainConfig

SUITE = gradient_suite(np.random.default_rng(0))


@pytest.mark.parametrize("case", sorted(SUITE))
def test_gradients_match_finite_differences(case):
    """Cada primitiva y la IMDN de 1 bloque por debajo de 1e-4"""
    fn, inputs = SUITE[case]
    results = ag.gradient_check(fn, inputs, probes=5, rng=np.random.default_rng(1))
    for result in results:
        assert result.probes > 0, result
        assert result.max_rel_error < 1e-4, result


def test_broken_conv_backward_is_detected():
    fn, inputs = SUITE["conv2d"]
    with ag.broken_backward("conv2d"):
        results = ag.gradient_check(fn, inputs, probes=3, rng=np.random.default_rng(2))
    by_name = {r.name: r for r in results}
    assert by_name["w"].max_rel_error > 1e-4
    assert "conv2d" not in ag._BROKEN_OPS


def test_probes_at_kinks_are_skipped():
    fn = lambda n: ag.sum_all(ag.relu(n["x"]))
    results = ag.gradient_check(fn, {"x": np.zeros((1, 1, 2, 2))}, probes=2, rng=np.random.default_rng(0))
    assert results[0].probes == 0
    assert results[0].skipped > 0


def test_backward_accumulates_into_leaves():
    x = ag.parameter(np.array([[[[1.0, -2.0]]]]), "x")
    loss = ag.sum_all(ag.leaky_relu(x, 0.05))
    first = ag.backward(loss)["x"].copy()
    ag.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    np.testing.assert_allclose(first, [[[[1.0, 0.05]]]])


def test_shared_node_gradients_add_up():
    x = ag.parameter(np.ones((1, 1, 2, 2)), "x")
    loss = ag.sum_all(ag.add(x, x))
    ag.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


def test_backward_requires_scalar_loss():
    x = ag.parameter(np.ones((1, 1, 2, 2)), "x")
    with pytest.raises(ShapeError):
        ag.backward(ag.relu(x))


def test_cycle_is_reported():
    a = ag.parameter(np.array(1.0), "a")
    b = ag.sum_all(a)
    c = ag.sum_all(b)
    b.parents = (c,)
    with pytest.raises(GraphCycleError):
        ag.backward(c)


def test_no_grad_builds_no_graph():
    x = ag.parameter(np.ones((1, 1, 2, 2)), "x")
    with ag.no_grad():
        out = ag.relu(x)
    assert out.is_leaf and not out.requires_grad
    assert ag.grad_enabled()


def test_l1_loss_value_and_zero_subgradient():
    pred = ag.parameter(np.array([[[[1.0, 2.0, 3.0]]]]), "pred")
    target = np.array([[[[1.0, 0.0, 4.0]]]])
    loss = ag.l1_loss(pred, target)
    assert loss.item() == pytest.approx(1.0)
    ag.backward(loss)
    np.testing.assert_allclose(pred.grad, [[[[0.0, 1 / 3, -1 / 3]]]])
    with pytest.raises(ShapeError):
        ag.l1_loss(pred, np.zeros((1, 1, 1, 2)))


def test_lr_schedule_halves_every_period():
    config = TrainConfig()
    assert ag.lr_schedule(0, config) == 2e-4
    assert ag.lr_schedule(199_999, config) == 2e-4
    assert ag.lr_schedule(200_000, config) == pytest.approx(1e-4)
    assert ag.lr_schedule(600_000, config) == pytest.approx(2.5e-5)


def test_adam_first_step_moves_by_learning_rate():
    config = TrainConfig(learning_rate=1e-3)
    params = {"p": np.array([1.0, -1.0])}
    grads = {"p": np.array([0.5, -2.0])}
    updated, state = ag.adam_step(params, grads, ag.AdamState(), config, 1)
    np.testing.assert_allclose(updated["p"], [1.0 - 1e-3, -1.0 + 1e-3], rtol=1e-7)
    assert state.step == 1
    np.testing.assert_array_equal(params["p"], [1.0, -1.0])


def test_adam_rejects_iteration_zero():
    with pytest.raises(ConfigError):
        ag.adam_step({}, {}, ag.AdamState(), TrainConfig(), 0)


def test_adam_keeps_parameters_without_gradient():
    params = {"p": np.ones(2), "q": np.zeros(2)}
    updated, _ = ag.adam_step(params, {"p": np.ones(2)}, ag.AdamState(), TrainConfig(), 1)
    assert updated["q"] is params["q"]


def test_zero_grad_resets_accumulators():
    nodes = {"x": ag.parameter(np.ones((1, 1, 2, 2)), "x"), "y": ag.parameter(np.ones((1, 1, 2, 2)), "y")}
    ag.backward(ag.sum_all(ag.add(nodes["x"], nodes["y"])))
    ag.zero_grad(nodes)
    for node in nodes.values():
        np.testing.assert_array_equal(node.grad, 0.0)
