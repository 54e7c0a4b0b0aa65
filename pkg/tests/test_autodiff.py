import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmtune import autodiff as ad

finite = st.floats(-3.0, 3.0, allow_nan=False)


def _fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.parametrize("name, f, x", [
    ("exp", ad.exp, 0.7), ("log", ad.log, 1.3), ("sqrt", ad.sqrt, 2.2), ("tanh", ad.tanh, -0.4),
    ("sin", ad.sin, 0.9), ("cos", ad.cos, 0.9), ("cosh", ad.cosh, 0.3), ("sinh", ad.sinh, 0.3),
    ("log_cosh", ad.log_cosh, 1.7),
])
def test_unary_tangents_match_finite_differences(name, f, x):
    d = f(ad.Dual(jnp.asarray(x), jnp.ones((1,))))
    assert float(d.tangent[0]) == pytest.approx(_fd(lambda v: float(ad.primal(f(jnp.asarray(v)))), x), rel=1e-7)


@given(finite, finite)
@settings(max_examples=50, deadline=None)
def test_product_and_quotient_rules(a, b):
    x = ad.lift(jnp.array([a, b]))
    p = x[0] * x[1]
    np.testing.assert_allclose(p.tangent, [b, a], atol=1e-12)
    q = x[0] / (x[1] * x[1] + 1.0)
    den = b * b + 1.0
    np.testing.assert_allclose(q.tangent, [1 / den, -2 * a * b / den ** 2], rtol=1e-12, atol=1e-14)


def test_primal_path_is_bit_identical_to_plain_arithmetic():
    rng = np.random.default_rng(0)
    x = jnp.asarray(rng.normal(size=5))

    def f(v):
        return ad.sum(ad.tanh(v) * v + ad.exp(-v * v)) / 3.0

    assert float(ad.primal(f(ad.lift(x)))) == float(f(x))


def test_gradient_of_quadratic_form():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    val, g = ad.gradient(lambda t: 0.5 * ad.dot(t, ad.matmul(A, t)), np.array([0.5, -1.0]))
    np.testing.assert_allclose(g, A @ [0.5, -1.0], rtol=1e-14)
    assert val == pytest.approx(0.5 * np.array([0.5, -1.0]) @ A @ [0.5, -1.0])


def test_gradient_of_constant_is_zero():
    val, g = ad.gradient(lambda t: 4.0, np.ones(3))
    assert val == 4.0
    np.testing.assert_array_equal(g, np.zeros(3))


def test_solve_spd_value_and_derivative():
    rng = np.random.default_rng(1)
    R = rng.normal(size=(4, 4))
    M0 = R @ R.T + 4 * np.eye(4)
    b = rng.normal(size=4)
    np.testing.assert_allclose(ad.solve_spd(jnp.asarray(M0), jnp.asarray(b)), np.linalg.solve(M0, b), rtol=1e-12)

    # d/dt (M0 + t I)^-1 b = -(M0)^-2 b at t = 0
    t = ad.Dual(jnp.asarray(0.0), jnp.ones(1))
    x = ad.solve_spd(M0 + t * jnp.eye(4), jnp.asarray(b))
    np.testing.assert_allclose(x.tangent[0], -np.linalg.solve(M0, np.linalg.solve(M0, b)), rtol=1e-10)


def test_max_takes_tangent_of_larger_and_first_on_ties():
    a = ad.Dual(jnp.asarray(1.0), jnp.array([1.0]))
    b = ad.Dual(jnp.asarray(1.0), jnp.array([5.0]))
    assert float(ad.maximum(a, b).tangent[0]) == 1.0
    c = ad.Dual(jnp.asarray(2.0), jnp.array([5.0]))
    assert float(ad.maximum(a, c).tangent[0]) == 5.0


def test_norm_is_differentiable_at_zero():
    z = ad.Dual(jnp.zeros(3), jnp.eye(3))
    n = ad.norm(z)
    assert float(n.primal) == 0.0
    assert np.all(np.isfinite(np.asarray(n.tangent)))


def test_cross_and_matmul_tangents():
    rng = np.random.default_rng(2)
    a0, b0 = rng.normal(size=3), rng.normal(size=3)
    a = ad.Dual(jnp.asarray(a0), jnp.eye(3))
    c = ad.cross(a, jnp.asarray(b0))
    # d(a x b)/da_i = e_i x b
    np.testing.assert_allclose(c.tangent, np.stack([np.cross(e, b0) for e in np.eye(3)]), atol=1e-15)


def test_domain_errors_on_concrete_values():
    with pytest.raises(ad.DomainError):
        ad.log(jnp.asarray(-1.0))
    with pytest.raises(ad.DomainError):
        ad.sqrt(ad.Dual(jnp.asarray(-4.0), jnp.ones(1)))


def test_duals_pass_through_jit_and_vmap():
    @jax.jit
    def f(d):
        return ad.sin(d) * d

    x = ad.Dual(jnp.linspace(0, 1, 4), jnp.ones((1, 4)))
    y = f(x)
    np.testing.assert_allclose(y.tangent[0], np.cos(x.primal) * x.primal + np.sin(x.primal), rtol=1e-14)

    g = jax.vmap(lambda p: ad.exp(ad.Dual(p, jnp.ones(1))).tangent[0])
    np.testing.assert_allclose(g(jnp.arange(3.0)), np.exp(np.arange(3.0)), rtol=1e-15)


def test_lift_rejects_matrices():
    with pytest.raises(ValueError):
        ad.lift(np.zeros((2, 2)))
