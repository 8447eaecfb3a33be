"""Team training machinery: behavior policy, TD loss, replay, evaluate."""

import numpy as np
import pytest

from marl_redteam import diffnet as dn
from marl_redteam import env as E
from marl_redteam import qmix as qm

from conftest import param_central_diff, rel_err


def tiny_team(seed=0, input_dim=4, hidden=3, n_actions=3):
    nets = {"a": dn.init_agent_net(input_dim, hidden, n_actions, seed),
            "b": dn.init_agent_net(input_dim, hidden, n_actions, seed + 1)}
    return qm.Team(nets, ("a", "b"))


def synthetic_batch(rng, B=2, T=3, N=2, F=4, A=3, S=5, pad_last=False):
    obs = rng.uniform(-1, 1, (B, T + 1, N, F))
    avail = rng.uniform(size=(B, T + 1, N, A)) > 0.3
    avail[..., 0] = True
    state = rng.uniform(-1, 1, (B, T + 1, S))
    actions = np.zeros((B, T, N), dtype=np.int64)
    for b in range(B):
        for t in range(T):
            for n in range(N):
                actions[b, t, n] = rng.choice(np.flatnonzero(avail[b, t, n]))
    rewards = rng.normal(size=(B, T))
    terminated = np.zeros((B, T), dtype=bool)
    terminated[:, -1] = True
    mask = np.ones((B, T))
    if pad_last:
        mask[-1, -1] = 0.0
    return qm.EpisodeBatch(obs, avail, state, actions, rewards, terminated, mask)


# ---------------------------------------------------------------------------
# behavior policy

def test_greedy_action_is_argmax():
    team = tiny_team()
    # force known q by монkeypatch-free construction: use masked_argmax directly
    q = np.array([[1.0, 3.0, 2.0]])
    avail = np.array([[True, True, True]])
    assert qm.masked_argmax(q, avail)[0] == 1
    avail = np.array([[True, False, True]])
    assert qm.masked_argmax(q, avail)[0] == 2


def test_masked_argmax_tie_breaks_low_index():
    q = np.array([[0.5, 0.5, 0.5]])
    avail = np.array([[True, True, True]])
    assert qm.masked_argmax(q, avail)[0] == 0


def test_epsilon_zero_is_greedy_and_respects_mask():
    team = tiny_team()
    rng = np.random.default_rng(0)
    obs = rng.uniform(-1, 1, (2, 4))
    hid = np.zeros((2, 3))
    masks = np.array([[True, True, False], [False, True, True]])
    actions, q, _ = qm.act_epsilon_greedy(team, obs, hid, masks, 0.0, rng)
    for i in range(2):
        expect = np.argmax(np.where(masks[i], q[i], -np.inf))
        assert actions[i] == expect
        assert masks[i][actions[i]]


def test_epsilon_one_is_uniform_over_available():
    # chi-square against uniform over the two available actions
    team = tiny_team()
    rng = np.random.default_rng(123)
    obs = np.zeros((2, 4))
    hid = np.zeros((2, 3))
    masks = np.array([[True, True, False], [True, True, True]])
    counts = np.zeros(3)
    n = 10_000
    for _ in range(n):
        actions, _, _ = qm.act_epsilon_greedy(team, obs, hid, masks, 1.0, rng)
        counts[actions[0]] += 1
    assert counts[2] == 0
    # 3 sigma for a fair coin over n draws
    sigma = np.sqrt(n * 0.5 * 0.5)
    assert abs(counts[0] - n / 2) < 3 * sigma


def test_epsilon_out_of_range_rejected():
    team = tiny_team()
    with pytest.raises(ValueError):
        qm.act_epsilon_greedy(team, np.zeros((2, 4)), np.zeros((2, 3)),
                              np.ones((2, 3), dtype=bool), 1.5,
                              np.random.default_rng(0))


# ---------------------------------------------------------------------------
# TD loss

def test_td_loss_zero_case():
    team = tiny_team()
    for net in team.nets.values():
        net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    mix = dn.init_mixing_net(2, 5, 3, 0)
    mix.params = {k: np.zeros_like(v) for k, v in mix.params.items()}
    batch = synthetic_batch(np.random.default_rng(0))
    batch.rewards[:] = 0.0
    loss, grads = qm.qmix_td_loss(batch, team, mix, team.clone(),
                                  dn.MixingNet(2, 5, 3, dn.clone_params(mix.params)),
                                  gamma=0.0)
    assert loss == 0.0


def test_td_loss_hand_computed_single_step():
    # one episode, one step, one agent class; everything tiny and explicit
    net = dn.init_agent_net(2, 2, 2, 5)
    team = qm.Team({"a": net}, ("a",))
    mix = dn.init_mixing_net(1, 2, 2, 6)
    B, T, N = 1, 1, 1
    obs = np.array([[[[0.3, -0.2]], [[0.1, 0.4]]]])         # (1, 2, 1, 2)
    avail = np.ones((B, T + 1, N, 2), dtype=bool)
    state = np.array([[[0.5, -0.5], [0.2, 0.9]]])
    actions = np.array([[[1]]])
    rewards = np.array([[0.7]])
    terminated = np.array([[False]])
    mask = np.ones((B, T))
    batch = qm.EpisodeBatch(obs, avail, state, actions, rewards, terminated, mask)

    target_team = team.clone()
    target_mix = dn.MixingNet(1, 2, 2, dn.clone_params(mix.params))
    gamma = 0.9
    loss, _ = qm.qmix_td_loss(batch, team, mix, target_team, target_mix, gamma)

    # hand computation with the public single-step operations
    q0, h0, _ = dn.agent_forward(net, obs[0, 0, 0], np.zeros(2))
    q_tot, _ = dn.mixing_forward(mix, np.array([q0[1]]), state[0, 0])
    tq0, th0, _ = dn.agent_forward(target_team.nets["a"], obs[0, 0, 0], np.zeros(2))
    tq1, _, _ = dn.agent_forward(target_team.nets["a"], obs[0, 1, 0], th0)
    y_tot, _ = dn.mixing_forward(target_mix, np.array([tq1.max()]), state[0, 1])
    y = 0.7 + gamma * y_tot
    assert loss == pytest.approx((q_tot - y) ** 2, rel=1e-12)


def test_td_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    team = tiny_team(seed=9)
    mix = dn.init_mixing_net(2, 5, 3, 10)
    target_team = tiny_team(seed=30)
    target_mix = dn.init_mixing_net(2, 5, 3, 31)
    batch = synthetic_batch(rng, pad_last=True)
    loss, grads = qm.qmix_td_loss(batch, team, mix, target_team, target_mix, 0.9)

    def f():
        l, _ = qm.qmix_td_loss(batch, team, mix, target_team, target_mix, 0.9)
        return l

    for cls, net in team.nets.items():
        fd = param_central_diff(f, net.params)
        for k in fd:
            assert rel_err(grads[f"agent.{cls}"][k], fd[k]).max() < 1e-4, (cls, k)
    fd = param_central_diff(f, mix.params)
    for k in fd:
        assert rel_err(grads["mix"][k], fd[k]).max() < 1e-4, k


def test_td_loss_padded_steps_contribute_nothing():
    rng = np.random.default_rng(2)
    team = tiny_team(seed=3)
    mix = dn.init_mixing_net(2, 5, 3, 4)
    tt, tm = tiny_team(seed=5), dn.init_mixing_net(2, 5, 3, 6)
    batch = synthetic_batch(rng, pad_last=True)
    loss1, _ = qm.qmix_td_loss(batch, team, mix, tt, tm, 0.9)
    # rewrite the padded step's reward; the loss must not move
    batch.rewards[-1, -1] = 1e6
    loss2, _ = qm.qmix_td_loss(batch, team, mix, tt, tm, 0.9)
    assert loss1 == loss2


# ---------------------------------------------------------------------------
# replay buffer

def _episode_stub(tag: float) -> qm.Episode:
    T, N, F, A, S = 2, 1, 3, 2, 2
    return qm.Episode(
        obs=np.full((T + 1, N, F), tag),
        avail=np.ones((T + 1, N, A), dtype=bool),
        state=np.zeros((T + 1, S)),
        actions=np.zeros((T, N), dtype=np.int64),
        rewards=np.array([tag, tag]),
        terminated=np.array([False, True]),
        won=False,
    )


def test_replay_round_trip_bit_exact():
    buf = qm.ReplayBuffer(4)
    eps = [_episode_stub(float(i)) for i in range(3)]
    for e in eps:
        buf.push(e)
    got = buf.sample(3, np.random.default_rng(0))
    by_tag = {e.rewards[0]: e for e in got}
    for i, e in enumerate(eps):
        g = by_tag[float(i)]
        assert g is e  # stored object, not a copy: trivially bit-exact
        np.testing.assert_array_equal(g.obs, e.obs)


def test_replay_fifo_eviction():
    buf = qm.ReplayBuffer(2)
    for i in range(5):
        buf.push(_episode_stub(float(i)))
    tags = sorted(e.rewards[0] for e in buf._slots)
    assert tags == [3.0, 4.0]
    assert buf.insertions == 5


def test_replay_rejects_oversample():
    buf = qm.ReplayBuffer(2)
    buf.push(_episode_stub(0.0))
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# training and evaluation (tiny runs)

def quick_cfg(**kw):
    base = dict(episodes=0, buffer_episodes=8, batch_size=2,
                eval_every=0, hidden_dim=8, embed_dim=4)
    base.update(kw)
    return qm.TrainConfig(**base)


def test_zero_episode_training_equals_initialization():
    env_cfg = E.EnvConfig()
    cfg = quick_cfg(episodes=0)
    ckpt, log = qm.train(env_cfg, cfg, seed=5)
    fresh = qm.build_team(env_cfg, cfg.hidden_dim, 5)
    for cls, net in fresh.nets.items():
        for k in net.params:
            np.testing.assert_array_equal(ckpt.agent_nets[cls].params[k],
                                          net.params[k])


def test_training_is_deterministic():
    env_cfg = E.EnvConfig()
    cfg = quick_cfg(episodes=5, batch_size=2)
    c1, _ = qm.train(env_cfg, cfg, seed=8)
    c2, _ = qm.train(env_cfg, cfg, seed=8)
    for cls in c1.agent_nets:
        for k in c1.agent_nets[cls].params:
            np.testing.assert_array_equal(c1.agent_nets[cls].params[k],
                                          c2.agent_nets[cls].params[k])
    for k in c1.mixing_net.params:
        np.testing.assert_array_equal(c1.mixing_net.params[k],
                                      c2.mixing_net.params[k])


@pytest.fixture(scope="module")
def untrained_ckpt():
    ckpt, _ = qm.train(E.EnvConfig(), quick_cfg(episodes=0), seed=2)
    return ckpt


def test_evaluate_identity_hook_matches_no_hook(untrained_ckpt):
    class Identity(qm.EvalHook):
        pass

    r1 = qm.evaluate(untrained_ckpt, 5, seed=3)
    r2 = qm.evaluate(untrained_ckpt, 5, seed=3, hook=Identity())
    assert r1.episode_rewards == r2.episode_rewards
    assert r1.wins == r2.wins


def test_evaluate_is_bit_reproducible(untrained_ckpt):
    r1 = qm.evaluate(untrained_ckpt, 5, seed=3)
    r2 = qm.evaluate(untrained_ckpt, 5, seed=3)
    assert r1.episode_rewards == r2.episode_rewards


def test_evaluate_forced_noop_never_wins(untrained_ckpt):
    class AllNoop(qm.EvalHook):
        def step(self, ctx):
            return qm.StepIntervention(
                override_actions={i: E.NOOP for i in range(5)})

    res = qm.evaluate(untrained_ckpt, 5, seed=4, hook=AllNoop())
    assert res.win_rate == 0.0


def test_evaluate_audits_box_violations(untrained_ckpt):
    class OutOfBox(qm.EvalHook):
        def step(self, ctx):
            bad = np.full(E.OBS_DIM, 1.5)
            return qm.StepIntervention(perturbed_obs={0: bad})

    with pytest.raises(qm.AttackSoundnessError):
        qm.evaluate(untrained_ckpt, 1, seed=0, hook=OutOfBox())


def test_evaluate_audits_wrong_success_flag(untrained_ckpt):
    class LyingHook(qm.EvalHook):
        def step(self, ctx):
            rec = qm.AttackRecord(agent_index=0, target_action=None,
                                  clean_action=int(ctx.clean_actions[0]),
                                  success=True)  # no perturbation happened
            return qm.StepIntervention(attack_records=[rec])

    with pytest.raises(qm.AttackSoundnessError):
        qm.evaluate(untrained_ckpt, 1, seed=0, hook=LyingHook())


def test_monotone_factorization_after_tiny_training():
    env_cfg = E.EnvConfig()
    ckpt, _ = qm.train(env_cfg, quick_cfg(episodes=4, batch_size=2), seed=1)
    mix = ckpt.mixing_net
    rng = np.random.default_rng(0)
    for _ in range(200):
        qs = rng.normal(size=mix.n_agents) * 3
        state = rng.uniform(-1, 1, mix.state_dim)
        base, _ = dn.mixing_forward(mix, qs, state)
        i = rng.integers(0, mix.n_agents)
        bump = qs.copy()
        bump[i] += 1e-3
        up, _ = dn.mixing_forward(mix, bump, state)
        assert up >= base - 1e-9
