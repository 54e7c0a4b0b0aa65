import json

import numpy as np
import pytest

from vmtune import experiments as ex
from vmtune import optimize as op
from vmtune import sim
from vmtune.parameters import regularization
from vmtune.scenarios import ScenarioSet, grid_scenarios

CFG = sim.SimConfig(T=3.0)


@pytest.fixture(scope="module")
def cart():
    return ex.build_cart(n_scenarios=4).system


def test_adam_first_step_has_size_alpha():
    st = op.AdamState.init(2, 0.5)
    th, st = op.adam_step(st, [1.0, 1.0], [3.0, -1e-3])
    np.testing.assert_allclose(th, [0.5, 1.5], rtol=1e-4)  # eps shaves the tiny component
    assert st.t == 1
    th2, _ = op.adam_step(op.AdamState.init(2, 0.5), [1.0, 1.0], [3.0, -1e-3], maximize=True)
    np.testing.assert_allclose(th2, [1.5, 0.5], rtol=1e-4)


def test_adam_minimizes_a_quadratic():
    st = op.AdamState.init(2, 0.1)
    th = np.array([3.0, -2.0])
    for _ in range(500):
        th, st = op.adam_step(st, th, 2 * th * [1.0, 10.0])
    np.testing.assert_allclose(th, 0.0, atol=1e-2)


def test_adam_rejects_bad_gradients():
    with pytest.raises(op.OptimizerAbort):
        op.adam_step(op.AdamState.init(2), [0.0, 0.0], [np.nan, 0.0])
    with pytest.raises(ValueError):
        op.adam_step(op.AdamState.init(2), [0.0, 0.0], [0.0, 0.0, 0.0])


def test_aggregates():
    L = np.array([1.0, 3.0, 3.0, 2.0])
    c, w = op._aggregate(L, "max", 0.1)
    assert c == 3.0 and w.tolist() == [0, 1, 0, 0]
    c, w = op._aggregate(L, "sum", 0.1)
    assert c == 9.0 and np.all(w == 1)
    c, w = op._aggregate(L, "softmax", 1e-3)
    assert c == pytest.approx(3.0 + 1e-3 * np.log(2), rel=1e-9)
    assert w.sum() == pytest.approx(1.0) and w[1] == pytest.approx(0.5)


def test_regularization_is_flat_inside_the_knee():
    assert float(regularization(np.array([1.0, -8.0]))) == 0.0
    assert float(regularization(np.array([np.log(3000.0) + 2.0, 0.0]))) == pytest.approx(4.0)


def test_sampled_tuning_improves_and_records(cart):
    S = grid_scenarios(400, seed=0)
    W = ScenarioSet(tuple(S[i] for i in (120, 200, 260, 330)), {"kind": "sampled", "N": 4, "seed": 0})
    theta0 = np.array([100.0, 10.0])
    r = op.tune_sampled(cart, W, theta0, iters=8, lr=5.0, cfg=CFG)
    assert len(r.history) == 8 and r.history[0].cost == pytest.approx(
        np.max(sim.evaluate_losses(cart, theta0, list(W), CFG)), rel=1e-12)
    assert r.best_cost < r.history[0].cost
    assert r.best_cost == pytest.approx(np.max(r.final_costs), rel=1e-12)
    assert r.theta_hat_star == pytest.approx({"k": r.theta_star[0], "b": r.theta_star[1]})

    d = json.loads(r.to_json(theta_history=True))
    assert d["cost_history"] == [h.cost for h in r.history] and len(d["theta_history"]) == 8
    assert "wall_clock" not in d and "wall_clock" in r.to_dict(timing=True)
    lines = r.history_csv().splitlines()
    assert lines[0] == "iter,cost,active,n_scenarios,theta_1,theta_2" and len(lines) == 9

    again = op.tune_sampled(cart, W, theta0, iters=8, lr=5.0, cfg=CFG)
    assert again.to_json() == r.to_json()


def test_tuning_argument_checks(cart):
    W = grid_scenarios(2, seed=0)
    with pytest.raises(ValueError):
        op.tune_sampled(cart, W, [1.0, 1.0], aggregate="median")
    with pytest.raises(ValueError):
        op.tune_adversarial(cart, W, [1.0, 1.0], aggregate="mean")


def test_inner_ascent_does_not_lose_ground(cart):
    theta = np.array([237.68, 50.0])
    om0 = np.array([3.0, 0.0, 1.0, 1.0])
    l0 = sim.adversarial_loss_and_gradient(cart, theta, om0, CFG)[0]
    om, l, _ = op.inner_ascent(cart, theta, om0, iters=6, lr=0.5, cfg=CFG)
    assert l >= l0 and om.shape == (4,)


def test_adversarial_round_grows_the_set(cart):
    W = grid_scenarios(2, seed=0)
    r = op.tune_adversarial(cart, W, [237.68, 50.0], outer_rounds=1, inner_iters=3, outer_iters=2, cfg=CFG)
    assert len(r.scenarios) == 3 and r.scenarios[-1].label == "adversarial-1"
    assert r.rounds[0]["round"] == 1 and len(r.final_costs) == 3
    assert r.scenarios.provenance["kind"] == "adversarial"


def test_landscape_grid_and_csv(cart):
    W = list(grid_scenarios(400, seed=0))[250:252]
    ks, bs = [100.0, 300.0], [20.0, 40.0, 60.0]
    g = op.cost_landscape(cart, W, ks, bs, CFG)
    assert g.shape == (3, 2)
    assert g[1, 0] == pytest.approx(np.max(sim.evaluate_losses(cart, [100.0, 40.0], W, CFG)))
    lines = op.landscape_csv(ks, bs, g).splitlines()
    assert lines[0] == "k,b,cost" and len(lines) == 7
    with pytest.raises(ValueError):
        op.cost_landscape(ex.build_rcm().system, W, ks, bs)
