import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from reconbound.autodiff import ConvergenceError
from reconbound.data import Sample, make_synthetic
from reconbound.models import (
    ModelSpec,
    Objective,
    accuracy,
    init_params,
    logistic_grad_analytic,
    logistic_input_jacobian_analytic,
    per_sample_loss,
    train_erm,
)


def test_logistic_loss_at_zero_is_log2():
    spec = ModelSpec("logistic", input_dim=5)
    for y in (0, 1):
        assert per_sample_loss(spec, np.zeros(5), Sample(np.full(5, 0.3), y)) == pytest.approx(math.log(2), abs=1e-15)


def test_multiclass_loss_at_zero_is_log_k():
    spec = ModelSpec("logistic", input_dim=3, num_classes=4)
    assert per_sample_loss(spec, np.zeros(spec.num_params), Sample(np.ones(3), 2)) == pytest.approx(math.log(4))


def test_logistic_gradient_and_mixed_partial_match_closed_forms(rng):
    spec = ModelSpec("logistic", input_dim=6)
    for _ in range(20):
        w = rng.standard_normal(6)
        z = Sample(rng.random(6), int(rng.integers(2)))
        g = np.asarray(jax.grad(spec.loss)(jnp.asarray(w), jnp.asarray(z.x), z.y))
        np.testing.assert_allclose(g, logistic_grad_analytic(w, z), rtol=1e-10, atol=1e-15)
        J = np.asarray(jax.jacfwd(jax.grad(spec.loss), argnums=1)(jnp.asarray(w), jnp.asarray(z.x), z.y))
        np.testing.assert_allclose(J, logistic_input_jacobian_analytic(w, z), rtol=1e-8, atol=1e-14)


def test_param_counts():
    assert ModelSpec("logistic", input_dim=7).num_params == 7
    assert ModelSpec("logistic", input_dim=7, num_classes=3).num_params == 21
    assert ModelSpec("tanh-mlp", input_dim=7, num_classes=3, hidden=(4,)).num_params == 7 * 4 + 4 + 4 * 3 + 3


@pytest.mark.parametrize("kwargs", [
    dict(kind="svm"),
    dict(kind="logistic", hidden=(3,)),
    dict(kind="tanh-mlp"),
    dict(kind="logistic", l2=-1.0),
    dict(kind="logistic", activation="sigmoid"),
])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(input_dim=3, **kwargs)


def test_first_layer_factorisation(rng):
    spec = ModelSpec("tanh-mlp", input_dim=5, num_classes=3, hidden=(4,))
    w = jnp.asarray(init_params(spec, rng))
    x = jnp.asarray(rng.random(5))
    W1, _ = spec.first_layer(w)
    assert float(spec.head_loss(w, W1 @ x, 1)) == pytest.approx(float(spec.loss(w, x, 1)), rel=1e-14)


def _small_problem(n=40, d=5, l2=0.1):
    ds = make_synthetic(n, d, seed=3, max_norm=1.0)
    return ModelSpec("logistic", input_dim=d, l2=l2), ds


def test_train_erm_reaches_stationarity():
    spec, ds = _small_problem()
    w = train_erm(spec, ds)
    g = Objective(spec, ds.X, ds.y).grad(jnp.asarray(w))
    assert float(jnp.linalg.norm(g)) <= 1e-12


def test_train_erm_is_invariant_to_sample_order():
    spec, ds = _small_problem()
    perm = np.random.default_rng(0).permutation(len(ds))
    np.testing.assert_allclose(train_erm(spec, ds), train_erm(spec, ds.subset(perm)), atol=1e-10)


def test_train_erm_iteration_budget():
    spec, ds = _small_problem()
    with pytest.raises(ConvergenceError):
        train_erm(spec, ds, max_iters=1)


def test_train_erm_requires_regularisation():
    _, ds = _small_problem()
    with pytest.raises(ValueError):
        train_erm(ModelSpec("logistic", input_dim=ds.dim), ds)


def test_replace_one_sensitivity(rng):
    """|w*(D) - w*(D')| <= 2 / (n l2) for neighbours with |x| <= 1."""
    spec, ds = _small_problem(n=30, l2=0.05)
    w = train_erm(spec, ds)
    bound = 2.0 / (len(ds) * spec.l2)
    for i in range(5):
        X = ds.X.copy()
        y = ds.y.copy()
        x_new = rng.random(ds.dim)
        X[i] = x_new / max(1.0, np.linalg.norm(x_new))
        y[i] = 1 - y[i]
        w2 = train_erm(spec, type(ds)(X, y))
        assert np.linalg.norm(w - w2) <= bound


def test_objective_hessian_diag_matches_dense():
    spec, ds = _small_problem()
    obj = Objective(spec, ds.X, ds.y)
    w = jnp.asarray(train_erm(spec, ds))
    np.testing.assert_allclose(obj.hessian_diag(w), np.diag(obj.hessian(w)), rtol=1e-12)


def test_accuracy_in_unit_interval(rng):
    spec, ds = _small_problem()
    a = accuracy(spec, train_erm(spec, ds), ds)
    assert 0.5 <= a <= 1.0
