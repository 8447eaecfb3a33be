"""Shared fixtures: finite-difference oracles and tiny seeded networks."""

import numpy as np
import pytest

from marl_redteam import diffnet as dn


def central_diff(f, x, step=1e-5):
    """Central finite differences of a scalar function at x (1-D array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (f(xp) - f(xm)) / (2 * step)
    return out


def param_central_diff(f, params, step=1e-5):
    """Finite differences of scalar f() with respect to every entry of a
    named parameter collection, perturbing in place."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for k, v in params.items():
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = v[idx]
            v[idx] = old + step
            fp = f()
            v[idx] = old - step
            fm = f()
            v[idx] = old
            grads[k][idx] = (fp - fm) / (2 * step)
    return grads


def rel_err(a, b, floor=1e-6):
    """Relative error with an absolute floor.

    The floor keeps near-zero coordinates meaningful: central differences
    at step 1e-5 on an O(1) function carry ~1e-11 of roundoff, so
    derivatives far below the floor cannot be resolved relatively.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


@pytest.fixture
def tiny_agent_net():
    return dn.init_agent_net(input_dim=7, hidden_dim=5, n_actions=4,
                             seed_or_rng=123)


@pytest.fixture
def tiny_mixing_net():
    return dn.init_mixing_net(n_agents=3, state_dim=6, embed_dim=4,
                              seed_or_rng=321)
