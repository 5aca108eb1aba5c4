import numpy as np
import pytest

from utils.panel import DemandPanel

HOUR = 3600
# 2019-09-02T00:00:00Z, a Monday
MONDAY = 1567382400


def numerical_grad(loss_fn, param, eps=1e-5):
    """Central differences of a scalar loss with respect to every entry of param."""
    grad = np.zeros_like(param.values)
    for idx in np.ndindex(param.shape):
        orig = param.values[idx]
        param.values[idx] = orig + eps
        up = loss_fn().item()
        param.values[idx] = orig - eps
        down = loss_fn().item()
        param.values[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture
def finite_diff():
    return numerical_grad


@pytest.fixture
def rel_err():
    return relative_error


def synthetic_panel(k=3, n_hours=240, censor_rate=0.3, seed=0, start=MONDAY):
    """Daily-cycle demand per node; a share of the hours is clipped below the true value."""
    rng = np.random.default_rng(seed)
    hours = np.arange(n_hours)
    base = 10 + 6 * np.sin(2 * np.pi * hours / 24)[None, :] + np.arange(k)[:, None]
    true = np.clip(base + rng.normal(0, 1.0, size=(k, n_hours)), 0.0, None)
    observed = true.copy()
    clipped = rng.random((k, n_hours)) < censor_rate
    observed[clipped] = true[clipped] * rng.uniform(0.3, 0.9, size=clipped.sum())
    return DemandPanel.from_demand([str(v) for v in range(k)], start, observed, true)


@pytest.fixture
def make_panel():
    return synthetic_panel
