"""Shared fixtures: the two-parameter relu net and random tanh MLPs."""

import numpy as np
import pytest

from lapkit.nets import Activation, Batch, Dense, ModelSpec, init_params, mlp

THETA1 = 1.6556547
THETA2 = 1.0420421
# Jacobian of relu(theta1*x - 1)*theta2 at x=1 (relu active):
# d/dtheta1 = theta2, d/dtheta2 = relu(theta1 - 1).
FIG1_J = np.array([THETA2, THETA1 - 1.0])


@pytest.fixture
def fig1_model():
    return ModelSpec(
        (Dense(1, 1, bias=False, shift=(-1.0,)), Activation("relu"), Dense(1, 1, bias=False)),
        1,
        1,
    )


@pytest.fixture
def fig1_params():
    return {
        "dense_0": {"w": np.array([[THETA1]])},
        "dense_1": {"w": np.array([[THETA2]])},
    }


@pytest.fixture
def fig1_data():
    return Batch(np.array([[1.0], [-1.0]]), np.array([[1.0], [-1.0]]))


def random_tanh_net(seed, in_dim=3, hidden=(8, 6), out_dim=2):
    model = mlp(in_dim, list(hidden), out_dim, "tanh")
    params = init_params(model, seed=seed)
    return model, params


def random_batch(seed, model, n=6, classification=False):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, model.input_dim))
    if classification:
        y = rng.integers(0, model.output_dim, n)
    else:
        y = rng.standard_normal((n, model.output_dim))
    return Batch(x, y)
