import numpy as np
import pytest

from vmtune import ltioracle as lo


def test_cart_model_poles():
    ss = lo.cart_closed_loop(100.0, 20.0)
    np.testing.assert_allclose(sorted(ss.poles.real), [-10.0, -10.0], atol=1e-6)
    assert ss.is_stable
    with pytest.raises(ValueError):
        lo.cart_closed_loop(-1.0, 1.0)


def test_unstable_system_is_refused():
    ss = lo.StateSpace([[0.1]], [[1.0]], [[1.0]], [[0.0]])
    assert not ss.is_stable
    with pytest.raises(lo.UnstableSystemError):
        lo.hinf_gain(ss)


def test_dimension_checks():
    with pytest.raises(ValueError):
        lo.StateSpace(np.eye(2), np.ones((3, 1)), np.ones((1, 2)), np.zeros((1, 1)))


def test_first_order_lag_gain():
    ss = lo.StateSpace([[-2.0]], [[2.0]], [[1.0]], [[0.0]])
    np.testing.assert_allclose(lo.gain_curve(ss, [0.0, 2.0]), [1.0, 1 / np.sqrt(2)], rtol=1e-12)


def test_coordinate_change_leaves_the_gain_alone():
    ss = lo.cart_closed_loop(237.68, 50.0)
    T = np.array([[2.0, 1.0], [0.5, 3.0]])
    om = np.geomspace(0.1, 100, 7)
    np.testing.assert_allclose(lo.gain_curve(ss.transformed(T), om), lo.gain_curve(ss, om), rtol=1e-10)


def test_hinf_matches_a_dense_grid():
    ss = lo.cart_closed_loop(150.0, 12.0)
    g, w = lo.hinf_gain(ss)
    dense = lo.gain_curve(ss, np.geomspace(1e-3, 1e4, 200000))
    assert g >= dense.max() * (1 - 1e-12)
    assert g == pytest.approx(dense.max(), rel=1e-6)
    assert lo.gain_curve(ss, [w])[0] == pytest.approx(g, rel=1e-12)


def test_directional_gain_is_bounded_by_sigma_max():
    ss = lo.cart_closed_loop(237.68, 50.0)
    rng = np.random.default_rng(0)
    for om in (0.5, 7.0, 40.0):
        s = lo.gain_curve(ss, [om])[0]
        for eta in rng.normal(size=(5, 3)):
            assert lo.directional_gain(ss, om, eta) <= s * (1 + 1e-12)


def test_oracle_optimum_is_a_local_minimum():
    k, b, g = lo.oracle_optimum()
    assert g == pytest.approx(lo.hinf_gain(lo.cart_closed_loop(k, b))[0], rel=1e-12)
    for dk, db in ((1.02, 1.0), (0.98, 1.0), (1.0, 1.02), (1.0, 0.98), (1.02, 1.02), (0.98, 0.98)):
        assert lo.hinf_gain(lo.cart_closed_loop(k * dk, b * db))[0] >= g * (1 - 1e-9)


def test_gain_csv(tmp_path):
    ss = lo.cart_closed_loop(237.68, 50.0)
    p = tmp_path / "g.csv"
    lo.write_gain_csv(p, ss, [1.0, 10.0])
    lines = p.read_text().splitlines()
    assert lines[0] == "omega,sigma_max" and len(lines) == 3
    assert float(lines[2].split(",")[1]) == pytest.approx(lo.gain_curve(ss, [10.0])[0])
