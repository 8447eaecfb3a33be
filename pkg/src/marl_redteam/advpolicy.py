"""Step one of the attack: choosing the action the victim should take.

Five selectors. Random draws uniformly from the victim's available
actions; Local-Worst takes the victim's own lowest Q-value; QMIX-Worst
substitutes each candidate action's Q-value into the victim's slot of
the team's chosen Q-values and picks the one minimizing the mixed team
value; OW is a recurrent DQN trained on the victim's observation stream
with the team reward negated; OWR is OW plus a penalty that steers the
policy toward actions the victim's own network already ranks close to
its greedy choice (those are the ones a perturbation can actually
force).

The OWR penalty enters as reward shaping: per-step adversary reward is
-team_reward - lambda * gap^2, where gap is the frozen victim net's
Q difference between its greedy action and the selected one. With
lambda = 0 this is exactly OW, bit for bit.

All tie-breaks go to the lowest action index.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffnet as dn
from . import env as envmod
from . import qmix as qm
from .checkpoint import Checkpoint


def select_random(mask, rng: np.random.Generator) -> int:
    """Uniform over available actions."""
    avail = np.flatnonzero(np.asarray(mask, dtype=bool))
    if avail.size == 0:
        raise ValueError("no available action")
    return int(rng.choice(avail))


def select_local_worst(victim_q, mask) -> int:
    """Available action with the lowest victim Q-value; ties -> lowest index."""
    q = np.asarray(victim_q, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if q.shape != m.shape:
        raise ValueError("q/mask length mismatch")
    if not m.any():
        raise ValueError("no available action")
    return int(np.argmin(np.where(m, q, np.inf)))


def select_qmix_worst(all_chosen_qs, victim_per_action_qs, state,
                      mix: dn.MixingNet, mask, victim_index: int) -> int:
    """Available victim action minimizing the mixed team value.

    For each candidate action, its Q-value replaces the victim's entry
    in the team's chosen Q-values and the mixing network is evaluated;
    the arg-min wins, ties to the lowest index.
    """
    chosen = np.asarray(all_chosen_qs, dtype=np.float64)
    per_action = np.asarray(victim_per_action_qs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    avail = np.flatnonzero(m)
    if avail.size == 0:
        raise ValueError("no available action")
    candidates = np.repeat(chosen[None, :], avail.size, axis=0)
    candidates[:, victim_index] = per_action[avail]
    states = np.repeat(np.asarray(state, dtype=np.float64)[None, :],
                       avail.size, axis=0)
    totals, _ = dn.mixing_forward(mix, candidates, states)
    return int(avail[np.argmin(totals)])


# ---------------------------------------------------------------------------
# selector objects pluggable into qmix.evaluate hooks

class AdvPolicy:
    """Target-action chooser for one victim agent."""

    variant = "base"

    def __init__(self, victim_index: int):
        self.victim_index = victim_index

    def begin_episode(self, rng: np.random.Generator) -> None:
        pass

    def propose(self, ctx: qm.EvalStepContext) -> int:
        raise NotImplementedError


class RandomPolicy(AdvPolicy):
    variant = "random"

    def propose(self, ctx):
        return select_random(ctx.masks[self.victim_index], ctx.rng)


class LocalWorstPolicy(AdvPolicy):
    variant = "lw"

    def propose(self, ctx):
        v = self.victim_index
        return select_local_worst(ctx.q_values[v], ctx.masks[v])


class QmixWorstPolicy(AdvPolicy):
    variant = "qmix-worst"

    def propose(self, ctx):
        v = self.victim_index
        chosen = np.take_along_axis(ctx.q_values,
                                    ctx.clean_actions[:, None], axis=1)[:, 0]
        return select_qmix_worst(chosen, ctx.q_values[v], ctx.state_vec,
                                 ctx.mix, ctx.masks[v], v)


class LearnedPolicy(AdvPolicy):
    """Greedy head over a trained adversarial Q-network (OW or OWR).

    Recurrent: carries its own hidden state, fed by the victim's clean
    observation stream, reset at episode boundaries.
    """

    def __init__(self, victim_index: int, net: dn.AgentNet, variant: str):
        super().__init__(victim_index)
        self.net = net
        self.variant = variant
        self._hidden = net.init_hidden()

    def begin_episode(self, rng):
        self._hidden = self.net.init_hidden()

    def propose(self, ctx):
        v = self.victim_index
        q, self._hidden, _ = dn.agent_forward(self.net, ctx.obs[v], self._hidden)
        return int(qm.masked_argmax(q[None], ctx.masks[v][None])[0])


def make_policy(method: str, victim_index: int,
                adv_ckpt: Checkpoint | None = None) -> AdvPolicy:
    if method == "random":
        return RandomPolicy(victim_index)
    if method == "lw":
        return LocalWorstPolicy(victim_index)
    if method == "qmix-worst":
        return QmixWorstPolicy(victim_index)
    if method in ("ow", "owr"):
        if adv_ckpt is None:
            raise ValueError(f"{method} needs a trained adversarial checkpoint")
        if adv_ckpt.method != method:
            raise ValueError(
                f"checkpoint was trained as {adv_ckpt.method!r}, not {method!r}")
        return LearnedPolicy(victim_index, adv_ckpt.agent_nets["adversary"], method)
    raise ValueError(f"unknown target-selection method: {method}")


# ---------------------------------------------------------------------------
# DQN training of OW / OWR

@dataclass
class AdvTrainConfig(qm.TrainConfig):
    lambda_reg: float = 0.1

    def __post_init__(self):
        super().__post_init__()
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")


def dqn_td_loss(batch: qm.EpisodeBatch, online: dn.AgentNet,
                target: dn.AgentNet, gamma: float):
    """Single-agent recurrent TD loss and exact gradients.

    Same target construction as the team loss minus the mixing stage:
    y_t = r_t + gamma * (1 - terminated_t) * max over available actions
    of the target net at t+1.
    """
    B, T, n = batch.actions.shape
    assert n == 1, "adversary batches hold a single agent"
    denom = batch.mask.sum()
    if denom == 0:
        raise ValueError("batch has no real steps")
    obs = batch.obs[:, :, 0]      # (B, T+1, F)
    avail = batch.avail[:, :, 0]  # (B, T+1, A)

    hidden = np.zeros((B, online.hidden_dim))
    caches = []
    chosen = np.zeros((B, T))
    for t in range(T):
        q, hidden, cache = dn.agent_forward(online, obs[:, t], hidden)
        caches.append(cache)
        chosen[:, t] = np.take_along_axis(q, batch.actions[:, t], axis=1)[:, 0]

    t_hidden = np.zeros((B, target.hidden_dim))
    t_max = np.zeros((B, T + 1))
    for t in range(T + 1):
        tq, t_hidden, _ = dn.agent_forward(target, obs[:, t], t_hidden)
        t_max[:, t] = np.where(avail[:, t], tq, -np.inf).max(axis=1)

    y = batch.rewards + gamma * (1.0 - batch.terminated) * t_max[:, 1:]
    td = (chosen - y) * batch.mask
    loss = float((td * td).sum() / denom)
    if not np.isfinite(loss):
        raise dn.NumericError("non-finite adversary TD loss")

    d_chosen = 2.0 * td / denom
    grads = dn.zeros_like_params(online.params)
    d_hidden = None
    A = online.n_actions
    for t in range(T - 1, -1, -1):
        d_q = np.zeros((B, A))
        np.put_along_axis(d_q, batch.actions[:, t], d_chosen[:, t, None], axis=1)
        g, _, d_hidden = caches[t].backward(d_q, d_hidden)
        dn.accumulate_params(grads, g)
    return loss, grads


def _adversary_rollout(env_cfg: envmod.EnvConfig, team: qm.Team,
                       victim_index: int, adv_net: dn.AgentNet,
                       epsilon: float, lambda_reg: float, env_seed,
                       rng: np.random.Generator) -> tuple[qm.Episode, float]:
    """One episode with the adversary driving the victim's actions.

    Non-victim agents act greedily from the frozen team; the victim's
    recorded stream is what the adversary trains on. Returns the episode
    (rewards already negated and shaped) and the raw team reward.
    """
    v = victim_index
    state, obs_list, _ = envmod.reset(env_cfg, env_seed)
    team_hidden = team.init_hidden(1)[0]
    adv_hidden = adv_net.init_hidden()
    obs_hist, avail_hist, act_hist, rew_hist, term_hist = [], [], [], [], []
    team_reward = 0.0
    while True:
        obs = np.stack([o.features for o in obs_list])
        masks = np.stack([o.available_mask for o in obs_list])
        obs_hist.append(obs[v].copy())
        avail_hist.append(masks[v].copy())
        if state.terminated:
            break
        q, team_hidden, _ = team.forward(obs[None], team_hidden[None])
        q, team_hidden = q[0], team_hidden[0]
        actions = qm.masked_argmax(q, masks)
        victim_greedy = int(actions[v])

        adv_q, adv_hidden, _ = dn.agent_forward(adv_net, obs[v], adv_hidden)
        if rng.uniform() < epsilon:
            a_v = int(rng.choice(np.flatnonzero(masks[v])))
        else:
            a_v = int(qm.masked_argmax(adv_q[None], masks[v][None])[0])
        actions[v] = a_v

        # gap to the victim's own preference, under the frozen victim net
        gap = float(q[v, victim_greedy] - q[v, a_v])
        state, obs_list, _, outcome = envmod.step(state, actions)
        team_reward += outcome.reward
        act_hist.append(a_v)
        rew_hist.append(-outcome.reward - lambda_reg * gap * gap)
        term_hist.append(outcome.terminated)
    episode = qm.Episode(
        obs=np.stack(obs_hist)[:, None, :],
        avail=np.stack(avail_hist)[:, None, :],
        state=np.zeros((len(obs_hist), 1)),
        actions=np.array(act_hist, dtype=np.int64)[:, None],
        rewards=np.array(rew_hist),
        terminated=np.array(term_hist, dtype=bool),
        won=state.team_won,
    )
    return episode, team_reward


def _train_adversary(env_cfg: envmod.EnvConfig, team_ckpt: Checkpoint,
                     victim_index: int, cfg: AdvTrainConfig, seed: int,
                     method: str, log_cb=None) -> tuple[Checkpoint, list[dict]]:
    if not 0 <= victim_index < env_cfg.n_allies:
        raise ValueError("victim index out of range")
    team = qm.Team(team_ckpt.agent_nets, tuple(env_cfg.ally_classes))
    adv_net = dn.init_agent_net(env_cfg.obs_dim, cfg.hidden_dim,
                                env_cfg.n_actions, [seed, 30])
    target_net = dn.AgentNet(adv_net.input_dim, adv_net.hidden_dim,
                             adv_net.n_actions, dn.clone_params(adv_net.params))
    opt = qm.make_group_optimizer(cfg.optimizer, cfg.lr, cfg.grad_clip)
    buffer = qm.ReplayBuffer(cfg.buffer_episodes)
    log: list[dict] = []
    updates = 0
    last_loss = float("nan")
    best: tuple | None = None  # (eval team reward, params): lower is better
    recent_team_rewards: list[float] = []
    for ep in range(cfg.episodes):
        epsilon = cfg.epsilon_at(ep)
        episode, team_reward = _adversary_rollout(
            env_cfg, team, victim_index, adv_net, epsilon, cfg.lambda_reg,
            [seed, 1, ep], np.random.default_rng([seed, 2, ep]))
        buffer.push(episode)
        recent_team_rewards.append(team_reward)
        if len(buffer) >= cfg.batch_size:
            sample = buffer.sample(cfg.batch_size,
                                   np.random.default_rng([seed, 3, ep]))
            batch = qm.batch_episodes(sample)
            loss, grads = dqn_td_loss(batch, adv_net, target_net, cfg.gamma)
            last_loss = loss
            adv_net.params = opt("adversary", adv_net.params, grads)
            updates += 1
            if updates % cfg.target_sync_period == 0:
                target_net.params = dn.target_sync(adv_net.params,
                                                   target_net.params)
        row = {"episode": ep, "loss": last_loss, "epsilon": epsilon,
               "team_reward_ma": float(np.mean(recent_team_rewards[-100:])),
               "eval_team_reward": "", "eval_team_win_rate": ""}
        if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
            win_rate, reward = _adv_quick_eval(env_cfg, team, victim_index,
                                               adv_net, cfg.eval_episodes,
                                               [seed, 4, ep])
            row["eval_team_reward"] = reward
            row["eval_team_win_rate"] = win_rate
            score = (win_rate, reward)
            if cfg.keep_best and (best is None or score <= best[0]):
                best = (score, dn.clone_params(adv_net.params))
        log.append(row)
        if log_cb is not None:
            log_cb(row)
    if best is not None:
        adv_net.params = best[1]
    ckpt = Checkpoint(
        kind="adv_policy",
        agent_nets={"adversary": adv_net},
        mixing_net=None,
        config={"env": env_cfg.to_dict(), "train": cfg.to_dict(),
                "victim_index": victim_index,
                "team_config_hash": team_ckpt.config_hash},
        rng_seed=seed,
        method=method,
        extra={"victim_index": victim_index,
               "team_config_hash": team_ckpt.config_hash},
    )
    return ckpt, log


def _adv_quick_eval(env_cfg: envmod.EnvConfig, team: qm.Team,
                    victim_index: int, adv_net: dn.AgentNet,
                    n_episodes: int, seed) -> tuple[float, float]:
    """(team win rate, mean team reward) under greedy adversary control.

    Lower is better on both; snapshot selection compares (win, reward)
    lexicographically so a policy that actually denies wins outranks one
    that only shaves reward.
    """
    total = 0.0
    wins = 0
    for e in range(n_episodes):
        episode, team_reward = _adversary_rollout(
            env_cfg, team, victim_index, adv_net, 0.0, 0.0, [*seed, e],
            np.random.default_rng([*seed, e]))
        total += team_reward
        wins += int(episode.won)
    return wins / n_episodes, total / n_episodes


def train_ow(env_cfg: envmod.EnvConfig, team_ckpt: Checkpoint,
             victim_index: int, cfg: AdvTrainConfig, seed: int,
             log_cb=None) -> tuple[Checkpoint, list[dict]]:
    """Adversarial policy minimizing team reward (negated-reward DQN)."""
    cfg = replace(cfg, lambda_reg=0.0)
    return _train_adversary(env_cfg, team_ckpt, victim_index, cfg, seed,
                            "ow", log_cb)


def train_owr(env_cfg: envmod.EnvConfig, team_ckpt: Checkpoint,
              victim_index: int, cfg: AdvTrainConfig, seed: int,
              log_cb=None) -> tuple[Checkpoint, list[dict]]:
    """OW with the forceability penalty; lambda_reg = 0 reduces to OW."""
    return _train_adversary(env_cfg, team_ckpt, victim_index, cfg, seed,
                            "owr", log_cb)
