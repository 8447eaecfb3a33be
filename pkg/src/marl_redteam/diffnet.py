"""Minimal differentiable-network core backing the whole test-bench.

Everything is float64 numpy: recurrent per-agent action-value networks
(dense input layer -> gated recurrent cell -> dense output) and a
state-conditioned monotonic mixing network (hypernetworks produce the
mixing weights; absolute value keeps them nonnegative). Forward passes
record a cache; ``backward`` replays it to produce exact gradients with
respect to every parameter and input. No graph framework, no GPU: the
point is gradients that can be checked against finite differences to
tight tolerances and checkpoints that round-trip bit-exactly.

Internally all math runs on 2-D batches ``(batch, dim)``; the public
operations accept single vectors and squeeze the batch axis back out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]


class DimensionError(ValueError):
    """Input shape does not match the network architecture."""


class NumericError(RuntimeError):
    """A forward or backward pass produced a non-finite value."""


class ArchitectureMismatch(ValueError):
    """Two parameter collections do not share names and shapes."""


# ---------------------------------------------------------------------------
# small helpers

def as_batch(x, dim: int, name: str) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to a float64 ``(batch, dim)`` array.

    Returns the array and whether the input was a single vector (so the
    caller can squeeze the batch axis back out of its results).
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{name}: expected (*, {dim}), got {np.asarray(x).shape}")
    return arr, single


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite value in {where}")
    return x


def _sigmoid(x):
    # numerically stable split form
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _elu(x):
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(pre):
    return np.where(pre > 0, 1.0, np.exp(pre))


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


# ---------------------------------------------------------------------------
# networks

AGENT_PARAM_ORDER = (
    "w_in", "b_in",
    "w_z", "u_z", "b_z",
    "w_r", "u_r", "b_r",
    "w_n", "u_n", "b_n",
    "w_out", "b_out",
)

MIX_PARAM_ORDER = (
    "hyper_w1.w", "hyper_w1.b",
    "hyper_b1.w", "hyper_b1.b",
    "hyper_w2.w", "hyper_w2.b",
    "value.w1", "value.b1",
    "value.w2", "value.b2",
)


@dataclass
class AgentNet:
    """Recurrent per-agent action-value network.

    obs -> dense -> elu -> gated recurrent cell -> dense -> q_values.
    The cell uses update/reset gates; the hidden state carries memory
    across timesteps of one episode.
    """

    input_dim: int
    hidden_dim: int
    n_actions: int
    params: Params = field(repr=False)

    def init_hidden(self, batch: int | None = None) -> np.ndarray:
        if batch is None:
            return np.zeros(self.hidden_dim)
        return np.zeros((batch, self.hidden_dim))


@dataclass
class MixingNet:
    """State-conditioned monotonic combiner of per-agent Q-values.

    Hypernetworks (single linear layers on the global state) emit the
    mixing weights; absolute value makes them nonnegative, which makes
    the combined team value monotone nondecreasing in every agent's
    Q-value. A two-layer state-value head supplies the final bias.
    """

    n_agents: int
    state_dim: int
    embed_dim: int
    params: Params = field(repr=False)


def init_agent_net(input_dim: int, hidden_dim: int, n_actions: int,
                   seed_or_rng) -> AgentNet:
    """Seeded uniform init, bound 1/sqrt(fan_in) per weight matrix."""
    rng = np.random.default_rng(seed_or_rng)
    h, d, a = hidden_dim, input_dim, n_actions
    p: Params = {}
    p["w_in"] = _uniform_init(rng, (h, d), d)
    p["b_in"] = _uniform_init(rng, (h,), d)
    for gate in ("z", "r", "n"):
        p[f"w_{gate}"] = _uniform_init(rng, (h, h), h)
        p[f"u_{gate}"] = _uniform_init(rng, (h, h), h)
        p[f"b_{gate}"] = _uniform_init(rng, (h,), h)
    p["w_out"] = _uniform_init(rng, (a, h), h)
    p["b_out"] = _uniform_init(rng, (a,), h)
    return AgentNet(input_dim, hidden_dim, n_actions, p)


def init_mixing_net(n_agents: int, state_dim: int, embed_dim: int,
                    seed_or_rng) -> MixingNet:
    rng = np.random.default_rng(seed_or_rng)
    n, s, e = n_agents, state_dim, embed_dim
    p: Params = {}
    p["hyper_w1.w"] = _uniform_init(rng, (n * e, s), s)
    p["hyper_w1.b"] = _uniform_init(rng, (n * e,), s)
    p["hyper_b1.w"] = _uniform_init(rng, (e, s), s)
    p["hyper_b1.b"] = _uniform_init(rng, (e,), s)
    p["hyper_w2.w"] = _uniform_init(rng, (e, s), s)
    p["hyper_w2.b"] = _uniform_init(rng, (e,), s)
    p["value.w1"] = _uniform_init(rng, (e, s), s)
    p["value.b1"] = _uniform_init(rng, (e,), s)
    p["value.w2"] = _uniform_init(rng, (1, e), e)
    p["value.b2"] = _uniform_init(rng, (1,), e)
    return MixingNet(n_agents, state_dim, embed_dim, p)


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def clone_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def accumulate_params(into: Params, grads: Params) -> None:
    for k, g in grads.items():
        into[k] += g


# ---------------------------------------------------------------------------
# agent forward / backward

@dataclass
class AgentStepCache:
    """Activations of one recurrent step, enough to replay it exactly."""

    net: AgentNet
    obs: np.ndarray        # (B, input_dim)
    h_prev: np.ndarray     # (B, hidden_dim)
    pre_in: np.ndarray
    g: np.ndarray          # elu of pre_in, the cell input
    z: np.ndarray
    r: np.ndarray
    rh: np.ndarray         # r * h_prev
    cand: np.ndarray       # tanh candidate
    h_new: np.ndarray
    q: np.ndarray
    single: bool

    def backward(self, d_q: np.ndarray | None, d_h_new: np.ndarray | None
                 ) -> tuple[Params, np.ndarray, np.ndarray]:
        """Gradients of (d_q . q + d_h_new . h_new) summed over the batch.

        Returns (param_grads, d_obs, d_h_prev). Either upstream may be
        None (treated as zero).
        """
        p = self.net.params
        B = self.obs.shape[0]
        if d_q is None:
            d_q = np.zeros((B, self.net.n_actions))
        else:
            d_q = np.asarray(d_q, dtype=np.float64).reshape(B, self.net.n_actions)
        dh = np.zeros((B, self.net.hidden_dim)) if d_h_new is None \
            else np.array(d_h_new, dtype=np.float64).reshape(B, self.net.hidden_dim)

        grads = {}
        grads["w_out"] = d_q.T @ self.h_new
        grads["b_out"] = d_q.sum(axis=0)
        dh = dh + d_q @ p["w_out"]

        z, r, h_prev, cand = self.z, self.r, self.h_prev, self.cand
        d_z = dh * (cand - h_prev)
        d_cand = dh * z
        d_hprev = dh * (1.0 - z)

        d_cpre = d_cand * (1.0 - cand * cand)
        grads["w_n"] = d_cpre.T @ self.g
        grads["u_n"] = d_cpre.T @ self.rh
        grads["b_n"] = d_cpre.sum(axis=0)
        d_g = d_cpre @ p["w_n"]
        d_rh = d_cpre @ p["u_n"]
        d_r = d_rh * h_prev
        d_hprev = d_hprev + d_rh * r

        d_zpre = d_z * z * (1.0 - z)
        d_rpre = d_r * r * (1.0 - r)
        grads["w_z"] = d_zpre.T @ self.g
        grads["u_z"] = d_zpre.T @ h_prev
        grads["b_z"] = d_zpre.sum(axis=0)
        grads["w_r"] = d_rpre.T @ self.g
        grads["u_r"] = d_rpre.T @ h_prev
        grads["b_r"] = d_rpre.sum(axis=0)
        d_g = d_g + d_zpre @ p["w_z"] + d_rpre @ p["w_r"]
        d_hprev = d_hprev + d_zpre @ p["u_z"] + d_rpre @ p["u_r"]

        d_pre = d_g * _elu_grad(self.pre_in)
        grads["w_in"] = d_pre.T @ self.obs
        grads["b_in"] = d_pre.sum(axis=0)
        d_obs = d_pre @ p["w_in"]
        return grads, d_obs, d_hprev


def agent_forward(net: AgentNet, obs, hidden) -> tuple[np.ndarray, np.ndarray, AgentStepCache]:
    """One recurrent step: (q_values, new_hidden, cache).

    ``obs`` and ``hidden`` may be single vectors or (batch, dim) arrays.
    """
    x, single = as_batch(obs, net.input_dim, "obs")
    h, hsingle = as_batch(hidden, net.hidden_dim, "hidden")
    if single != hsingle or x.shape[0] != h.shape[0]:
        raise DimensionError("obs and hidden batch sizes differ")
    p = net.params
    pre_in = x @ p["w_in"].T + p["b_in"]
    g = _elu(pre_in)
    z = _sigmoid(g @ p["w_z"].T + h @ p["u_z"].T + p["b_z"])
    r = _sigmoid(g @ p["w_r"].T + h @ p["u_r"].T + p["b_r"])
    rh = r * h
    cand = np.tanh(g @ p["w_n"].T + rh @ p["u_n"].T + p["b_n"])
    h_new = (1.0 - z) * h + z * cand
    q = h_new @ p["w_out"].T + p["b_out"]
    _check_finite(q, "agent output layer")
    cache = AgentStepCache(net, x, h, pre_in, g, z, r, rh, cand, h_new, q, single)
    if single:
        return q[0], h_new[0], cache
    return q, h_new, cache


def input_gradient(net: AgentNet, obs, hidden, selector) -> np.ndarray:
    """Gradient of ``selector . q_values`` with respect to ``obs``.

    The hidden state is treated as a constant, so this is the
    per-timestep sensitivity of any linear combination of the action
    values to the current observation.
    """
    sel = np.asarray(selector, dtype=np.float64)
    if sel.shape != (net.n_actions,):
        raise DimensionError(f"selector: expected ({net.n_actions},), got {sel.shape}")
    q, _, cache = agent_forward(net, obs, hidden)
    d_q = np.broadcast_to(sel, (cache.obs.shape[0], net.n_actions))
    _, d_obs, _ = cache.backward(d_q, None)
    _check_finite(d_obs, "input gradient")
    return d_obs[0] if cache.single else d_obs


def action_jacobian(net: AgentNet, obs, hidden) -> np.ndarray:
    """(n_actions, input_dim) matrix of dQ_a/dobs at one timestep.

    One shared forward pass, one backward per action row.
    """
    q, _, cache = agent_forward(net, np.asarray(obs, dtype=np.float64),
                                np.asarray(hidden, dtype=np.float64))
    if not cache.single:
        raise DimensionError("action_jacobian expects a single observation")
    rows = np.empty((net.n_actions, net.input_dim))
    for a in range(net.n_actions):
        sel = np.zeros((1, net.n_actions))
        sel[0, a] = 1.0
        _, d_obs, _ = cache.backward(sel, None)
        rows[a] = d_obs[0]
    _check_finite(rows, "action jacobian")
    return rows


# ---------------------------------------------------------------------------
# mixing forward / backward

@dataclass
class MixStepCache:
    net: MixingNet
    state: np.ndarray      # (B, state_dim)
    qs: np.ndarray         # (B, n_agents)
    pre_w1: np.ndarray     # (B, n_agents*embed), before abs
    w1: np.ndarray         # (B, n_agents, embed)
    pre_hidden: np.ndarray
    hidden: np.ndarray
    pre_w2: np.ndarray
    w2: np.ndarray
    pre_v1: np.ndarray
    v1: np.ndarray
    q_total: np.ndarray    # (B,)
    single: bool

    def backward(self, d_q_total) -> tuple[Params, np.ndarray, np.ndarray]:
        """Returns (param_grads, d_chosen_qs, d_state), summed over batch."""
        net, p = self.net, self.net.params
        B = self.state.shape[0]
        dqt = np.asarray(d_q_total, dtype=np.float64).reshape(B)
        grads = {}

        d_hidden = dqt[:, None] * self.w2
        d_w2 = dqt[:, None] * self.hidden
        d_pre_w2 = d_w2 * np.sign(self.pre_w2)
        grads["hyper_w2.w"] = d_pre_w2.T @ self.state
        grads["hyper_w2.b"] = d_pre_w2.sum(axis=0)
        d_state = d_pre_w2 @ p["hyper_w2.w"]

        # state-value head
        d_v1 = dqt[:, None] * p["value.w2"][0]
        grads["value.w2"] = (dqt[:, None] * self.v1).sum(axis=0, keepdims=True)
        grads["value.b2"] = np.array([dqt.sum()])
        d_pre_v1 = d_v1 * _elu_grad(self.pre_v1)
        grads["value.w1"] = d_pre_v1.T @ self.state
        grads["value.b1"] = d_pre_v1.sum(axis=0)
        d_state = d_state + d_pre_v1 @ p["value.w1"]

        d_pre_hidden = d_hidden * _elu_grad(self.pre_hidden)
        d_qs = np.einsum("be,bne->bn", d_pre_hidden, self.w1)
        d_w1 = self.qs[:, :, None] * d_pre_hidden[:, None, :]
        d_pre_w1 = d_w1.reshape(B, -1) * np.sign(self.pre_w1)
        grads["hyper_w1.w"] = d_pre_w1.T @ self.state
        grads["hyper_w1.b"] = d_pre_w1.sum(axis=0)
        d_state = d_state + d_pre_w1 @ p["hyper_w1.w"]
        grads["hyper_b1.w"] = d_pre_hidden.T @ self.state
        grads["hyper_b1.b"] = d_pre_hidden.sum(axis=0)
        d_state = d_state + d_pre_hidden @ p["hyper_b1.w"]
        return grads, d_qs, d_state


def mixing_forward(mix: MixingNet, chosen_qs, state) -> tuple[np.ndarray, MixStepCache]:
    """Combine per-agent chosen Q-values into the team value.

    Returns a scalar for vector inputs, a (batch,) array for batches.
    Monotone nondecreasing in every entry of ``chosen_qs`` because the
    mixing weights pass through absolute value.
    """
    qs, qsingle = as_batch(chosen_qs, mix.n_agents, "chosen_qs")
    s, ssingle = as_batch(state, mix.state_dim, "state")
    if qs.shape[0] != s.shape[0]:
        raise DimensionError("chosen_qs and state batch sizes differ")
    p = mix.params
    B, n, e = qs.shape[0], mix.n_agents, mix.embed_dim

    pre_w1 = s @ p["hyper_w1.w"].T + p["hyper_w1.b"]
    w1 = np.abs(pre_w1).reshape(B, n, e)
    b1 = s @ p["hyper_b1.w"].T + p["hyper_b1.b"]
    pre_hidden = np.einsum("bn,bne->be", qs, w1) + b1
    hidden = _elu(pre_hidden)
    pre_w2 = s @ p["hyper_w2.w"].T + p["hyper_w2.b"]
    w2 = np.abs(pre_w2)
    pre_v1 = s @ p["value.w1"].T + p["value.b1"]
    v1 = _elu(pre_v1)
    v = v1 @ p["value.w2"].T + p["value.b2"]
    q_total = (hidden * w2).sum(axis=1) + v[:, 0]
    _check_finite(q_total, "mixing output")
    single = qsingle and ssingle
    cache = MixStepCache(mix, s, qs, pre_w1, w1, pre_hidden, hidden,
                         pre_w2, w2, pre_v1, v1, q_total, single)
    if single:
        return float(q_total[0]), cache
    return q_total, cache


def backward(cache, upstream_grad):
    """Replay a recorded forward pass against an upstream gradient.

    For an agent cache the upstream is d(loss)/d(q_values) and the
    result is (param_grads, d_obs); for a mixing cache it is
    d(loss)/d(q_total) and the result is (param_grads, d_chosen_qs).
    Deterministic: identical cache and upstream give identical output.
    """
    if isinstance(cache, AgentStepCache):
        up = np.asarray(upstream_grad, dtype=np.float64)
        if cache.single:
            up = up.reshape(1, -1)
        if up.shape != cache.q.shape:
            raise DimensionError(
                f"upstream_grad: expected {cache.q.shape}, got {up.shape}")
        grads, d_obs, _ = cache.backward(up, None)
        return grads, (d_obs[0] if cache.single else d_obs)
    if isinstance(cache, MixStepCache):
        grads, d_qs, _ = cache.backward(upstream_grad)
        return grads, (d_qs[0] if cache.single else d_qs)
    raise TypeError(f"not a forward cache: {type(cache).__name__}")


# ---------------------------------------------------------------------------
# optimization and target networks

@dataclass
class OptimConfig:
    lr: float = 0.01
    grad_clip: float = 10.0  # global norm; <=0 disables


def global_grad_norm(grads: Params) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def optimizer_step(params: Params, grads: Params, config: OptimConfig) -> Params:
    """Plain gradient descent with optional global-norm clipping.

    Refuses non-finite gradients. Returns a new parameter collection;
    the input is not mutated.
    """
    if set(params) != set(grads):
        raise ArchitectureMismatch("parameter/gradient name mismatch")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ArchitectureMismatch(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}: step refused")
    scale = 1.0
    if config.grad_clip > 0:
        norm = global_grad_norm(grads)
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
    return {k: v - config.lr * scale * grads[k] for k, v in params.items()}


class RmsPropOptimizer:
    """Adaptive alternative behind the same step interface.

    Deterministic (no randomness); keeps a running mean of squared
    gradients per parameter. Used by the training configs that need the
    faster optimizer; the plain rule above stays the reference.
    """

    def __init__(self, lr: float = 5e-4, alpha: float = 0.99,
                 eps: float = 1e-5, grad_clip: float = 10.0):
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.grad_clip = grad_clip
        self._sq: Params | None = None

    def step(self, params: Params, grads: Params) -> Params:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}: step refused")
        scale = 1.0
        if self.grad_clip > 0:
            norm = global_grad_norm(grads)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        if self._sq is None:
            self._sq = {k: np.zeros_like(v) for k, v in grads.items()}
        new = {}
        for k, v in params.items():
            g = grads[k] * scale
            self._sq[k] = self.alpha * self._sq[k] + (1.0 - self.alpha) * g * g
            new[k] = v - self.lr * g / (np.sqrt(self._sq[k]) + self.eps)
        return new


def make_optimizer(rule: str, lr: float, grad_clip: float = 10.0):
    """Build a ``step(params, grads) -> params`` callable for a rule name."""
    if rule == "sgd":
        cfg = OptimConfig(lr=lr, grad_clip=grad_clip)
        return lambda params, grads: optimizer_step(params, grads, cfg)
    if rule == "rmsprop":
        return RmsPropOptimizer(lr=lr, grad_clip=grad_clip).step
    raise ValueError(f"unknown optimizer rule: {rule}")


def target_sync(online: Params, target: Params, mode: str = "hard",
                rate: float = 1.0) -> Params:
    """Copy (hard) or blend (soft, by ``rate``) online weights into target."""
    if set(online) != set(target):
        raise ArchitectureMismatch("parameter name mismatch")
    for k in online:
        if online[k].shape != target[k].shape:
            raise ArchitectureMismatch(f"shape mismatch for {k}")
    if mode == "hard":
        return clone_params(online)
    if mode == "soft":
        return {k: (1.0 - rate) * target[k] + rate * online[k] for k in online}
    raise ValueError(f"unknown sync mode: {mode}")
