"""Centralized training of the ally team and greedy evaluation.

Recurrent per-agent Q-networks with parameters shared across agents of
the same unit class (the one-hot agent id inside the observation keeps
them distinguishable), a monotonic mixing network over the chosen
Q-values, an episode replay buffer, and one-step TD learning against
hard-synced target networks. The TD target is the standard one: each
target net's per-agent available-action max feeds the target mixing
network.

Everything is seeded and single-threaded; a fixed (config, seed) pair
reproduces the training run and any evaluation bit-exactly. Evaluation
accepts a per-step hook so adversarial policies and observation
perturbations can be injected without touching the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffnet as dn
from . import env as envmod
from .checkpoint import Checkpoint


# ---------------------------------------------------------------------------
# episode storage

@dataclass
class Episode:
    """One complete episode, observations indexed 0..T, actions 0..T-1."""

    obs: np.ndarray         # (T+1, N, F)
    avail: np.ndarray       # (T+1, N, A) bool
    state: np.ndarray       # (T+1, S)
    actions: np.ndarray     # (T, N) int
    rewards: np.ndarray     # (T,)
    terminated: np.ndarray  # (T,) bool; True only at the final step
    won: bool

    @property
    def length(self) -> int:
        return self.actions.shape[0]


@dataclass
class EpisodeBatch:
    """Episodes padded to a common horizon with a validity mask."""

    obs: np.ndarray         # (B, T+1, N, F)
    avail: np.ndarray       # (B, T+1, N, A)
    state: np.ndarray       # (B, T+1, S)
    actions: np.ndarray     # (B, T, N)
    rewards: np.ndarray     # (B, T)
    terminated: np.ndarray  # (B, T)
    mask: np.ndarray        # (B, T) 1.0 where the step is real

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def batch_episodes(episodes: list[Episode]) -> EpisodeBatch:
    if not episodes:
        raise ValueError("empty episode list")
    B = len(episodes)
    T = max(ep.length for ep in episodes)
    _, N, F = episodes[0].obs.shape
    A = episodes[0].avail.shape[2]
    S = episodes[0].state.shape[1]
    obs = np.zeros((B, T + 1, N, F))
    avail = np.zeros((B, T + 1, N, A), dtype=bool)
    avail[:, :, :, envmod.NOOP] = True  # padded steps stay well-formed
    state = np.zeros((B, T + 1, S))
    actions = np.zeros((B, T, N), dtype=np.int64)
    rewards = np.zeros((B, T))
    terminated = np.zeros((B, T), dtype=bool)
    mask = np.zeros((B, T))
    for b, ep in enumerate(episodes):
        L = ep.length
        obs[b, :L + 1] = ep.obs
        avail[b, :L + 1] = ep.avail
        state[b, :L + 1] = ep.state
        actions[b, :L] = ep.actions
        rewards[b, :L] = ep.rewards
        terminated[b, :L] = ep.terminated
        mask[b, :L] = 1.0
    return EpisodeBatch(obs, avail, state, actions, rewards, terminated, mask)


class ReplayBuffer:
    """Ring buffer of complete episodes with FIFO eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._slots: list[Episode] = []
        self._next = 0
        self.insertions = 0

    def __len__(self) -> int:
        return len(self._slots)

    def push(self, episode: Episode) -> None:
        if len(self._slots) < self.capacity:
            self._slots.append(episode)
        else:
            self._slots[self._next] = episode
            self._next = (self._next + 1) % self.capacity
        self.insertions += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Episode]:
        if n > len(self._slots):
            raise ValueError("not enough stored episodes")
        idx = rng.choice(len(self._slots), size=n, replace=False)
        return [self._slots[i] for i in idx]


# ---------------------------------------------------------------------------
# team of class-shared networks

class Team:
    """Per-class shared agent nets plus the agent->class wiring."""

    def __init__(self, agent_nets: dict[str, dn.AgentNet], classes: tuple[str, ...]):
        self.nets = agent_nets
        self.classes = classes
        self.groups = {c: [i for i, cl in enumerate(classes) if cl == c]
                       for c in dict.fromkeys(classes)}

    @property
    def n_agents(self) -> int:
        return len(self.classes)

    def net_for(self, agent_index: int) -> dn.AgentNet:
        return self.nets[self.classes[agent_index]]

    def init_hidden(self, batch: int = 1) -> np.ndarray:
        h = next(iter(self.nets.values())).hidden_dim
        return np.zeros((batch, self.n_agents, h))

    def forward(self, obs: np.ndarray, hidden: np.ndarray,
                collect_caches: bool = False):
        """Batched step for all agents: (B, N, F), (B, N, H) -> q, h'.

        Agents sharing a class run as one matrix call. Returns
        (q (B, N, A), h_new (B, N, H), caches) where caches maps class
        name to the AgentStepCache of its grouped forward.
        """
        B, N, F = obs.shape
        sample = next(iter(self.nets.values()))
        q = np.zeros((B, N, sample.n_actions))
        h_new = np.zeros((B, N, sample.hidden_dim))
        caches: dict[str, dn.AgentStepCache] = {}
        for cls, idx in self.groups.items():
            net = self.nets[cls]
            o = obs[:, idx].reshape(B * len(idx), F)
            h = hidden[:, idx].reshape(B * len(idx), net.hidden_dim)
            qc, hc, cache = dn.agent_forward(net, o, h)
            q[:, idx] = qc.reshape(B, len(idx), net.n_actions)
            h_new[:, idx] = hc.reshape(B, len(idx), net.hidden_dim)
            if collect_caches:
                caches[cls] = cache
        return q, h_new, caches

    def clone(self) -> "Team":
        return Team({c: dn.AgentNet(n.input_dim, n.hidden_dim, n.n_actions,
                                    dn.clone_params(n.params))
                     for c, n in self.nets.items()}, self.classes)


def masked_argmax(q: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Greedy action over available entries; ties go to the lowest index."""
    masked = np.where(avail, q, -np.inf)
    return np.argmax(masked, axis=-1)


def act_epsilon_greedy(team: Team, observations: np.ndarray, hiddens: np.ndarray,
                       masks: np.ndarray, epsilon: float,
                       rng: np.random.Generator):
    """Joint action: per agent, explore uniformly over available actions
    with probability epsilon, otherwise take the masked argmax.

    Returns (actions (N,), q_values (N, A), new_hiddens (N, H)).
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    q, h_new, _ = team.forward(observations[None], hiddens[None])
    q, h_new = q[0], h_new[0]
    actions = masked_argmax(q, masks)
    for i in range(team.n_agents):
        avail = np.flatnonzero(masks[i])
        assert avail.size > 0, "environment guarantees an available action"
        if rng.uniform() < epsilon:
            actions[i] = int(rng.choice(avail))
    return actions, q, h_new


# ---------------------------------------------------------------------------
# TD loss with full backpropagation through time

def qmix_td_loss(batch: EpisodeBatch, online: Team, online_mix: dn.MixingNet,
                 target: Team, target_mix: dn.MixingNet, gamma: float):
    """Mean squared TD error over real steps, plus exact gradients.

    y_t = r_t + gamma * (1 - terminated_t) * Q_total_target(t+1), where
    the target side takes each agent's available-action max. Gradients
    flow through the online mixing network into the online agent nets
    and across time through the recurrent state. Padded steps contribute
    nothing.

    Returns (loss, grads) with grads keyed "agent.<class>" and "mix".
    """
    B, T, N = batch.actions.shape
    denom = batch.mask.sum()
    if denom == 0:
        raise ValueError("batch has no real steps")

    # online unroll over t = 0..T-1 with caches for BPTT
    hidden = online.init_hidden(B)
    step_caches: list[dict[str, dn.AgentStepCache]] = []
    chosen_q = np.zeros((B, T, N))
    for t in range(T):
        q, hidden, caches = online.forward(batch.obs[:, t], hidden,
                                           collect_caches=True)
        step_caches.append(caches)
        chosen_q[:, t] = np.take_along_axis(
            q, batch.actions[:, t, :, None], axis=2)[:, :, 0]

    # target unroll over t = 1..T (no gradients)
    t_hidden = target.init_hidden(B)
    target_max = np.zeros((B, T + 1, N))
    for t in range(T + 1):
        tq, t_hidden, _ = target.forward(batch.obs[:, t], t_hidden)
        target_max[:, t] = np.where(batch.avail[:, t], tq, -np.inf).max(axis=2)

    q_tot, mix_caches = [], []
    for t in range(T):
        qt, cache = dn.mixing_forward(online_mix, chosen_q[:, t], batch.state[:, t])
        q_tot.append(qt)
        mix_caches.append(cache)
    q_tot = np.stack(q_tot, axis=1)  # (B, T)

    y = np.zeros((B, T))
    for t in range(T):
        nxt, _ = dn.mixing_forward(target_mix, target_max[:, t + 1],
                                   batch.state[:, t + 1])
        y[:, t] = batch.rewards[:, t] + gamma * (1.0 - batch.terminated[:, t]) * nxt

    td = (q_tot - y) * batch.mask
    loss = float((td * td).sum() / denom)
    if not np.isfinite(loss):
        raise dn.NumericError(
            f"non-finite TD loss (denom={denom}, horizon={T}, batch={B})")

    # backward
    d_qtot = 2.0 * td / denom  # (B, T)
    mix_grads = dn.zeros_like_params(online_mix.params)
    d_chosen = np.zeros((B, T, N))
    for t in range(T):
        g, d_qs, _ = mix_caches[t].backward(d_qtot[:, t])
        dn.accumulate_params(mix_grads, g)
        d_chosen[:, t] = d_qs

    agent_grads = {c: dn.zeros_like_params(net.params)
                   for c, net in online.nets.items()}
    d_hidden = {c: None for c in online.nets}  # flows t+1 -> t per class
    A = next(iter(online.nets.values())).n_actions
    for t in range(T - 1, -1, -1):
        d_q = np.zeros((B, N, A))
        np.put_along_axis(d_q, batch.actions[:, t, :, None],
                          d_chosen[:, t, :, None], axis=2)
        for cls, idx in online.groups.items():
            cache = step_caches[t][cls]
            up = d_q[:, idx].reshape(B * len(idx), A)
            g, _, d_hprev = cache.backward(up, d_hidden[cls])
            dn.accumulate_params(agent_grads[cls], g)
            d_hidden[cls] = d_hprev

    grads = {f"agent.{c}": g for c, g in agent_grads.items()}
    grads["mix"] = mix_grads
    return loss, grads


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    episodes: int = 5000
    gamma: float = 0.99
    lr: float = 5e-4
    optimizer: str = "rmsprop"      # "sgd" is the plain reference rule
    grad_clip: float = 10.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_episodes: int | None = None  # default: half of episodes
    buffer_episodes: int = 2000
    batch_size: int = 32
    target_sync_period: int = 200   # optimizer updates between hard syncs
    hidden_dim: int = 64
    embed_dim: int = 32
    eval_every: int = 250           # 0 disables the in-training eval log
    eval_episodes: int = 40
    keep_best: bool = True          # ship the best in-training eval snapshot

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.lr < 0 or self.batch_size < 1 or self.buffer_episodes < 1:
            raise ValueError("invalid training config")
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ValueError("epsilon schedule must stay within [0, 1]")

    def epsilon_at(self, episode: int) -> float:
        span = self.epsilon_anneal_episodes
        if span is None:
            span = max(1, self.episodes // 2)
        if span <= 0 or episode >= span:
            return self.epsilon_end
        frac = episode / span
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def rollout_episode(env_cfg: envmod.EnvConfig, team: Team, epsilon: float,
                    env_seed, policy_rng: np.random.Generator) -> Episode:
    """Play one episode with epsilon-greedy actions; record everything."""
    state, obs_list, state_vec = envmod.reset(env_cfg, env_seed)
    N = env_cfg.n_allies
    obs_hist, avail_hist, state_hist = [], [], []
    act_hist, rew_hist, term_hist = [], [], []
    hidden = team.init_hidden(1)[0]
    while True:
        obs = np.stack([o.features for o in obs_list])
        avail = np.stack([o.available_mask for o in obs_list])
        obs_hist.append(obs)
        avail_hist.append(avail)
        state_hist.append(state_vec)
        if state.terminated:
            break
        actions, _, hidden = act_epsilon_greedy(team, obs, hidden, avail,
                                                epsilon, policy_rng)
        state, obs_list, state_vec, outcome = envmod.step(state, actions)
        act_hist.append(actions)
        rew_hist.append(outcome.reward)
        term_hist.append(outcome.terminated)
    return Episode(np.stack(obs_hist), np.stack(avail_hist), np.stack(state_hist),
                   np.stack(act_hist), np.array(rew_hist),
                   np.array(term_hist, dtype=bool), state.team_won)


def build_team(env_cfg: envmod.EnvConfig, hidden_dim: int, seed) -> Team:
    nets = {}
    for k, cls in enumerate(dict.fromkeys(env_cfg.ally_classes)):
        nets[cls] = dn.init_agent_net(env_cfg.obs_dim, hidden_dim,
                                      env_cfg.n_actions, [seed, 10 + k])
    return Team(nets, tuple(env_cfg.ally_classes))


def train(env_cfg: envmod.EnvConfig, cfg: TrainConfig, seed: int,
          log_cb: Callable[[dict], None] | None = None
          ) -> tuple[Checkpoint, list[dict]]:
    """Full training run; returns the checkpoint and the training log.

    Log rows: {episode, loss, epsilon, eval_win_rate} with eval entries
    only on evaluation episodes. Deterministic for a fixed (config, seed).
    """
    team = build_team(env_cfg, cfg.hidden_dim, seed)
    mix = dn.init_mixing_net(env_cfg.n_allies, env_cfg.state_dim,
                             cfg.embed_dim, [seed, 20])
    target_team = team.clone()
    target_mix = dn.MixingNet(mix.n_agents, mix.state_dim, mix.embed_dim,
                              dn.clone_params(mix.params))
    opt = make_group_optimizer(cfg.optimizer, cfg.lr, cfg.grad_clip)
    buffer = ReplayBuffer(cfg.buffer_episodes)
    log: list[dict] = []
    updates = 0
    last_loss = float("nan")
    best: tuple | None = None
    for ep in range(cfg.episodes):
        epsilon = cfg.epsilon_at(ep)
        episode = rollout_episode(env_cfg, team, epsilon, [seed, 1, ep],
                                  np.random.default_rng([seed, 2, ep]))
        buffer.push(episode)
        if len(buffer) >= cfg.batch_size:
            sample = buffer.sample(cfg.batch_size, np.random.default_rng([seed, 3, ep]))
            batch = batch_episodes(sample)
            loss, grads = qmix_td_loss(batch, team, mix, target_team,
                                       target_mix, cfg.gamma)
            last_loss = loss
            for cls in team.nets:
                team.nets[cls].params = opt(f"agent.{cls}",
                                            team.nets[cls].params,
                                            grads[f"agent.{cls}"])
            mix.params = opt("mix", mix.params, grads["mix"])
            updates += 1
            if updates % cfg.target_sync_period == 0:
                for cls in team.nets:
                    target_team.nets[cls].params = dn.target_sync(
                        team.nets[cls].params, target_team.nets[cls].params)
                target_mix.params = dn.target_sync(mix.params, target_mix.params)
        row = {"episode": ep, "loss": last_loss, "epsilon": epsilon,
               "eval_win_rate": ""}
        if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
            wins = _quick_eval(env_cfg, team, cfg.eval_episodes, [seed, 4, ep])
            row["eval_win_rate"] = wins
            if cfg.keep_best and (best is None or wins >= best[0]):
                best = (wins, {c: dn.clone_params(n.params)
                               for c, n in team.nets.items()},
                        dn.clone_params(mix.params))
        log.append(row)
        if log_cb is not None:
            log_cb(row)

    if best is not None:
        for cls, params in best[1].items():
            team.nets[cls].params = params
        mix.params = best[2]
    ckpt = Checkpoint(
        kind="qmix_team",
        agent_nets=team.nets,
        mixing_net=mix,
        config={"env": env_cfg.to_dict(), "train": cfg.to_dict()},
        rng_seed=seed,
    )
    return ckpt, log


def make_group_optimizer(rule: str, lr: float, grad_clip: float):
    """``step(group, params, grads)`` with per-group optimizer state.

    Adaptive rules keep an accumulator per named parameter group; the
    plain rule is stateless either way.
    """
    steppers: dict[str, Callable] = {}

    def step(group: str, params: dn.Params, grads: dn.Params) -> dn.Params:
        if group not in steppers:
            steppers[group] = dn.make_optimizer(rule, lr, grad_clip)
        return steppers[group](params, grads)

    return step


def _quick_eval(env_cfg: envmod.EnvConfig, team: Team, n_episodes: int,
                seed) -> float:
    wins = 0
    for e in range(n_episodes):
        state, obs_list, _ = envmod.reset(env_cfg, [*seed, e])
        hidden = team.init_hidden(1)[0]
        while not state.terminated:
            obs = np.stack([o.features for o in obs_list])
            avail = np.stack([o.available_mask for o in obs_list])
            q, h_new, _ = team.forward(obs[None], hidden[None])
            hidden = h_new[0]
            actions = masked_argmax(q[0], avail)
            state, obs_list, _, _ = envmod.step(state, actions)
        wins += int(state.team_won)
    return wins / n_episodes


# ---------------------------------------------------------------------------
# greedy evaluation with an intervention hook

class AttackSoundnessError(AssertionError):
    """An attack record disagreed with the independent forward pass."""


@dataclass
class EvalStepContext:
    """Read-only view of one evaluation step, handed to the hook.

    Everything refers to the clean (unperturbed) stream: observations,
    availability masks, the pre-step recurrent states, the Q-values the
    team computed from them, and the greedy actions those imply.
    """

    t: int
    obs: np.ndarray            # (N, F)
    masks: np.ndarray          # (N, A)
    hiddens: np.ndarray        # (N, H), before this step's update
    q_values: np.ndarray       # (N, A)
    clean_actions: np.ndarray  # (N,)
    state_vec: np.ndarray      # (S,)
    team: Team
    mix: dn.MixingNet | None
    rng: np.random.Generator


@dataclass
class AttackRecord:
    """Per-timestep bookkeeping for one intervention on one agent."""

    agent_index: int
    target_action: int | None   # None for untargeted perturbations
    clean_action: int
    success: bool
    iterations: int = 0
    l1: float = 0.0
    linf: float = 0.0
    theta_used: float | None = None
    method: str = ""
    final_action: int = -1       # filled in by evaluate()


@dataclass
class StepIntervention:
    override_actions: dict[int, int] = field(default_factory=dict)
    perturbed_obs: dict[int, np.ndarray] = field(default_factory=dict)
    attack_records: list[AttackRecord] = field(default_factory=list)


class EvalHook:
    """Base hook: observe each step, optionally intervene."""

    def begin_episode(self, episode_index: int, rng: np.random.Generator) -> None:
        pass

    def step(self, ctx: EvalStepContext) -> StepIntervention | None:
        return None


@dataclass
class EvalResult:
    episode_rewards: list[float]
    wins: list[bool]
    attack_records: list[AttackRecord]
    traces: list[dict]
    n_episodes: int
    seed: int

    @property
    def avg_reward(self) -> float:
        return float(np.mean(self.episode_rewards))

    @property
    def win_rate(self) -> float:
        return float(np.mean([1.0 if w else 0.0 for w in self.wins]))

    @property
    def attacked_steps(self) -> int:
        return len(self.attack_records)

    @property
    def misclassification_rate(self) -> float:
        if not self.attack_records:
            return 0.0
        changed = sum(1 for r in self.attack_records
                      if r.final_action != r.clean_action)
        return changed / len(self.attack_records)

    @property
    def target_success_rate(self) -> float:
        targeted = [r for r in self.attack_records if r.target_action is not None]
        if not targeted:
            return 0.0
        hits = sum(1 for r in targeted if r.final_action == r.target_action)
        return hits / len(targeted)

    @property
    def l1_norms(self) -> list[float]:
        return [r.l1 for r in self.attack_records]

    @property
    def avg_l1(self) -> float:
        return float(np.mean(self.l1_norms)) if self.attack_records else 0.0


def evaluate(ckpt: Checkpoint, n_episodes: int, seed: int,
             hook: EvalHook | None = None,
             record_traces: bool = False) -> EvalResult:
    """Greedy (epsilon = 0) execution of a team checkpoint.

    Per-episode seeds derive from (seed, episode index), so two runs
    with the same checkpoint and seed are bit-identical, and paired
    comparisons across hooks share episode layouts. The hook may
    override actions (direct control) or replace an agent's observation
    (perturbation); in the latter case that agent's action and next
    recurrent state are recomputed from the perturbed observation, so
    the agent only ever sees what it receives.

    Every intervention is audited here, independently of the hook:
    perturbed observations must stay inside [-1, 1], recorded success
    flags must agree with the recomputed action, and every action taken
    must be mask-available.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env_cfg = envmod.EnvConfig.from_dict(ckpt.config["env"])
    team = Team(ckpt.agent_nets, tuple(env_cfg.ally_classes))
    rewards: list[float] = []
    wins: list[bool] = []
    records: list[AttackRecord] = []
    traces: list[dict] = []
    for e in range(n_episodes):
        state, obs_list, state_vec = envmod.reset(env_cfg, [seed, 1, e])
        hook_rng = np.random.default_rng([seed, 5, e])
        if hook is not None:
            hook.begin_episode(e, hook_rng)
        hidden = team.init_hidden(1)[0]
        t = 0
        while not state.terminated:
            obs = np.stack([o.features for o in obs_list])
            masks = np.stack([o.available_mask for o in obs_list])
            q, h_new, _ = team.forward(obs[None], hidden[None])
            q, h_new = q[0], h_new[0]
            clean_actions = masked_argmax(q, masks)
            actions = clean_actions.copy()
            step_records: list[AttackRecord] = []
            if hook is not None:
                ctx = EvalStepContext(t, obs, masks, hidden, q, clean_actions,
                                      state_vec, team, ckpt.mixing_net, hook_rng)
                iv = hook.step(ctx)
                if iv is not None:
                    for i, pobs in iv.perturbed_obs.items():
                        pobs = np.asarray(pobs, dtype=np.float64)
                        if pobs.shape != (env_cfg.obs_dim,):
                            raise ValueError("perturbed observation shape mismatch")
                        if np.max(np.abs(pobs)) > 1.0 + 1e-12:
                            raise AttackSoundnessError(
                                "perturbed observation escapes [-1, 1]")
                        qi, hi, _ = dn.agent_forward(team.net_for(i), pobs, hidden[i])
                        actions[i] = int(masked_argmax(qi[None], masks[i][None])[0])
                        h_new[i] = hi
                    for i, a in iv.override_actions.items():
                        actions[i] = int(a)
                    step_records = iv.attack_records
            for rec in step_records:
                rec.final_action = int(actions[rec.agent_index])
                if rec.target_action is not None:
                    confirmed = rec.final_action == rec.target_action
                else:
                    confirmed = rec.final_action != rec.clean_action
                if rec.success != confirmed:
                    raise AttackSoundnessError(
                        f"success flag {rec.success} contradicts forward pass "
                        f"(agent {rec.agent_index}, step {t})")
            for i in range(env_cfg.n_allies):
                if not masks[i][actions[i]]:
                    raise AttackSoundnessError(
                        f"agent {i} took unavailable action {actions[i]}")
            records.extend(step_records)
            if record_traces:
                trace = {
                    "episode": e, "step": t,
                    "units": [u.to_dict() for u in state.units],
                    "joint_action": [int(a) for a in actions],
                    "masks": [[bool(b) for b in m] for m in masks],
                }
                if step_records:
                    trace["attacks"] = [_record_dict(r) for r in step_records]
            state, obs_list, state_vec, outcome = envmod.step(state, actions)
            if record_traces:
                trace["reward"] = outcome.reward
                trace["terminated"] = outcome.terminated
                trace["team_won"] = outcome.team_won
                traces.append(trace)
            hidden = h_new
            t += 1
        rewards.append(state.cumulative_reward)
        wins.append(state.team_won)
    return EvalResult(rewards, wins, records, traces, n_episodes, seed)


def _record_dict(r: AttackRecord) -> dict:
    return {
        "agent": r.agent_index, "target": r.target_action,
        "clean_action": r.clean_action, "final_action": r.final_action,
        "success": r.success, "iterations": r.iterations,
        "l1": r.l1, "linf": r.linf, "theta_used": r.theta_used,
        "method": r.method,
    }
