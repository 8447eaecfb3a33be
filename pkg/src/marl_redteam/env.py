"""MicroBattle: a deterministic, seedable cooperative skirmish on a grid.

Five ally agents (2 ranged, 3 melee) fight five scripted enemies of the
same composition. The interface mirrors a SMAC-style map: partial
observations of exactly ``OBS_DIM`` features in [-1, 1] per agent, an
availability mask over the discrete action set, a global state vector,
and a shaped team reward capped so a perfect episode totals 20.

Action ids: 0 no-op, 1 stop, 2..5 move N/S/E/W, 6+k attack the k-th
opposing unit. No-op is always available; a dead agent has nothing else.

Within a step, resolution order is fixed: movement -> attacks
(simultaneous damage, applied in attacker index order with overkill
truncated) -> deaths -> cooldown decrement. Randomness enters only
through spawn jitter at reset, so (seed, action sequence) -> trajectory
is a pure function.

Reward is raw integer bookkeeping scaled at the end of each step:
credited damage to enemies, +``kill_bonus`` per enemy death,
+``win_bonus`` on clearing the map, all times ``20 / raw_max``. The
default constants make ``raw_max`` = 320, so the scale is exactly
1/16 and a winning episode's cumulative reward is exactly 20.0 in
float64.

Observation layout (OBS_LAYOUT_VERSION = 1, 96 features):
    [0:4]    movement availability N/S/E/W
    [4:9]    own health, own cooldown fraction, own class (+1 ranged,
             -1 melee), own x and y normalized to [-1, 1]
    [9:39]   per enemy k (6 each): visible flag, dx/sight, dy/sight,
             health fraction, class, attackable flag
    [39:63]  per other ally (6 each): visible flag, dx/sight, dy/sight,
             health fraction, class, cooling-down flag
    [63:68]  one-hot agent id
    [68:96]  zero padding
A dead observer emits all zeros.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

OBS_DIM = 96
OBS_LAYOUT_VERSION = 1

NOOP, STOP = 0, 1
MOVE_N, MOVE_S, MOVE_E, MOVE_W = 2, 3, 4, 5
ATTACK_BASE = 6
# y grows southward
MOVE_DELTAS = {MOVE_N: (0, -1), MOVE_S: (0, 1), MOVE_E: (1, 0), MOVE_W: (-1, 0)}

RANGED, MELEE = "ranged", "melee"
ALLY, ENEMY = "ally", "enemy"


class UnavailableActionError(ValueError):
    """An agent was issued an action its availability mask forbids."""

    def __init__(self, agent_index: int, action: int):
        super().__init__(f"agent {agent_index}: action {action} unavailable")
        self.agent_index = agent_index
        self.action = action


@dataclass
class ClassStats:
    max_health: float
    damage: float
    attack_range: int
    cooldown: int  # steps between attacks


@dataclass
class EnvConfig:
    width: int = 14
    height: int = 9
    sight_range: int = 6
    episode_limit: int = 60
    ally_classes: tuple[str, ...] = (RANGED, RANGED, MELEE, MELEE, MELEE)
    enemy_classes: tuple[str, ...] = (RANGED, RANGED, MELEE, MELEE, MELEE)
    ally_stats: dict = field(default_factory=lambda: {
        RANGED: ClassStats(max_health=36, damage=12, attack_range=4, cooldown=1),
        MELEE: ClassStats(max_health=48, damage=5, attack_range=1, cooldown=0),
    })
    enemy_stats: dict = field(default_factory=lambda: {
        RANGED: ClassStats(max_health=36, damage=7, attack_range=4, cooldown=1),
        MELEE: ClassStats(max_health=48, damage=7, attack_range=1, cooldown=0),
    })
    kill_bonus: float = 10.0
    win_bonus: float = 54.0
    reward_cap: float = 20.0

    @property
    def n_allies(self) -> int:
        return len(self.ally_classes)

    @property
    def n_enemies(self) -> int:
        return len(self.enemy_classes)

    @property
    def n_actions(self) -> int:
        return ATTACK_BASE + self.n_enemies

    @property
    def obs_dim(self) -> int:
        return OBS_DIM

    @property
    def state_dim(self) -> int:
        return 6 * (self.n_allies + self.n_enemies) + 1

    @property
    def raw_max(self) -> float:
        hp = sum(self.enemy_stats[c].max_health for c in self.enemy_classes)
        return hp + self.kill_bonus * self.n_enemies + self.win_bonus

    @property
    def reward_scale(self) -> float:
        return self.reward_cap / self.raw_max

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "sight_range": self.sight_range, "episode_limit": self.episode_limit,
            "ally_classes": list(self.ally_classes),
            "enemy_classes": list(self.enemy_classes),
            "ally_stats": {c: vars(s) for c, s in self.ally_stats.items()},
            "enemy_stats": {c: vars(s) for c, s in self.enemy_stats.items()},
            "kill_bonus": self.kill_bonus, "win_bonus": self.win_bonus,
            "reward_cap": self.reward_cap,
        }

    @staticmethod
    def from_dict(d: dict) -> "EnvConfig":
        kw = dict(d)
        kw["ally_classes"] = tuple(kw.get("ally_classes", EnvConfig().ally_classes))
        kw["enemy_classes"] = tuple(kw.get("enemy_classes", EnvConfig().enemy_classes))
        for key in ("ally_stats", "enemy_stats"):
            if key in kw:
                kw[key] = {c: ClassStats(**v) for c, v in kw[key].items()}
        return EnvConfig(**kw)


@dataclass
class UnitState:
    x: int
    y: int
    health: float
    max_health: float
    cooldown: int
    unit_class: str
    team: str
    alive: bool

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "health": self.health,
                "max_health": self.max_health, "cooldown": self.cooldown,
                "unit_class": self.unit_class, "team": self.team,
                "alive": self.alive}


@dataclass
class WorldState:
    cfg: EnvConfig
    units: list[UnitState]          # allies first, then enemies
    step_count: int
    rng: np.random.Generator
    cumulative_raw: float
    terminated: bool
    team_won: bool

    @property
    def allies(self) -> list[UnitState]:
        return self.units[:self.cfg.n_allies]

    @property
    def enemies(self) -> list[UnitState]:
        return self.units[self.cfg.n_allies:]

    @property
    def cumulative_reward(self) -> float:
        return self.cumulative_raw * self.cfg.reward_scale


@dataclass
class AgentObservation:
    features: np.ndarray            # (OBS_DIM,), each in [-1, 1]
    available_mask: np.ndarray      # (n_actions,), bool


@dataclass
class StepOutcome:
    reward: float
    terminated: bool
    team_won: bool


def _cheb(ax, ay, bx, by) -> int:
    return max(abs(ax - bx), abs(ay - by))


def _manhattan(ax, ay, bx, by) -> int:
    return abs(ax - bx) + abs(ay - by)


def _stats(cfg: EnvConfig, unit: UnitState) -> ClassStats:
    table = cfg.ally_stats if unit.team == ALLY else cfg.enemy_stats
    return table[unit.unit_class]


def _base_positions(cfg: EnvConfig) -> list[tuple[int, int]]:
    cy = cfg.height // 2
    ally = [(2, cy - 2), (2, cy + 2), (4, cy - 1), (4, cy), (4, cy + 1)]
    enemy = [(cfg.width - 3, cy - 2), (cfg.width - 3, cy + 2),
             (cfg.width - 5, cy - 1), (cfg.width - 5, cy), (cfg.width - 5, cy + 1)]
    if cfg.n_allies != 5 or cfg.n_enemies != 5:
        raise ValueError("default formation supports the 5v5 composition only")
    return ally + enemy


def reset(cfg: EnvConfig, seed) -> tuple[WorldState, list[AgentObservation], np.ndarray]:
    """Fresh world; spawn jitter is the only use of the seed."""
    rng = np.random.default_rng(seed)
    placed: list[tuple[int, int]] = []
    units: list[UnitState] = []
    classes = list(cfg.ally_classes) + list(cfg.enemy_classes)
    teams = [ALLY] * cfg.n_allies + [ENEMY] * cfg.n_enemies
    for (bx, by), ucls, team in zip(_base_positions(cfg), classes, teams):
        jitter = int(rng.integers(-1, 2))
        pos = None
        for dy in (jitter, 0, -1, 1, -2, 2):
            cand = (bx, by + dy)
            if 0 <= cand[1] < cfg.height and cand not in placed:
                pos = cand
                break
        if pos is None:
            raise RuntimeError("could not place unit")
        placed.append(pos)
        table = cfg.ally_stats if team == ALLY else cfg.enemy_stats
        st = table[ucls]
        units.append(UnitState(pos[0], pos[1], st.max_health, st.max_health,
                               0, ucls, team, True))
    state = WorldState(cfg, units, 0, rng, 0.0, False, False)
    obs = [observe(state, i) for i in range(cfg.n_allies)]
    return state, obs, global_state(state)


def available_mask(state: WorldState, agent_index: int) -> np.ndarray:
    """Availability over the action set for one ally.

    No-op is always available; everything else requires being alive.
    Attacks require cooldown 0 and a living target within attack range.
    """
    cfg = state.cfg
    unit = state.units[agent_index]
    mask = np.zeros(cfg.n_actions, dtype=bool)
    mask[NOOP] = True
    if not unit.alive:
        return mask
    mask[STOP] = True
    occupied = {(u.x, u.y) for u in state.units if u.alive and u is not unit}
    for action, (dx, dy) in MOVE_DELTAS.items():
        nx, ny = unit.x + dx, unit.y + dy
        if 0 <= nx < cfg.width and 0 <= ny < cfg.height and (nx, ny) not in occupied:
            mask[action] = True
    st = _stats(cfg, unit)
    if unit.cooldown == 0:
        for k, enemy in enumerate(state.enemies):
            if enemy.alive and _cheb(unit.x, unit.y, enemy.x, enemy.y) <= st.attack_range:
                mask[ATTACK_BASE + k] = True
    return mask


def observe(state: WorldState, agent_index: int) -> AgentObservation:
    """Partial observation for one ally; see the module docstring layout."""
    cfg = state.cfg
    me = state.units[agent_index]
    feats = np.zeros(OBS_DIM)
    mask = available_mask(state, agent_index)
    if not me.alive:
        return AgentObservation(feats, mask)

    sr = float(cfg.sight_range)
    my_stats = _stats(cfg, me)
    feats[0:4] = mask[MOVE_N:MOVE_W + 1].astype(np.float64)
    feats[4] = me.health / me.max_health
    feats[5] = me.cooldown / max(1, my_stats.cooldown)
    feats[6] = 1.0 if me.unit_class == RANGED else -1.0
    feats[7] = 2.0 * me.x / (cfg.width - 1) - 1.0
    feats[8] = 2.0 * me.y / (cfg.height - 1) - 1.0

    off = 9
    for k, other in enumerate(state.enemies):
        base = off + 6 * k
        if other.alive and _cheb(me.x, me.y, other.x, other.y) <= cfg.sight_range:
            feats[base + 0] = 1.0
            feats[base + 1] = (other.x - me.x) / sr
            feats[base + 2] = (other.y - me.y) / sr
            feats[base + 3] = other.health / other.max_health
            feats[base + 4] = 1.0 if other.unit_class == RANGED else -1.0
            feats[base + 5] = 1.0 if mask[ATTACK_BASE + k] else 0.0
    off += 6 * cfg.n_enemies
    slot = 0
    for j, other in enumerate(state.allies):
        if j == agent_index:
            continue
        base = off + 6 * slot
        if other.alive and _cheb(me.x, me.y, other.x, other.y) <= cfg.sight_range:
            feats[base + 0] = 1.0
            feats[base + 1] = (other.x - me.x) / sr
            feats[base + 2] = (other.y - me.y) / sr
            feats[base + 3] = other.health / other.max_health
            feats[base + 4] = 1.0 if other.unit_class == RANGED else -1.0
            feats[base + 5] = 1.0 if other.cooldown > 0 else 0.0
        slot += 1
    off += 6 * (cfg.n_allies - 1)
    feats[off + agent_index] = 1.0
    return AgentObservation(feats, mask)


def global_state(state: WorldState) -> np.ndarray:
    cfg = state.cfg
    out = np.zeros(cfg.state_dim)
    for i, u in enumerate(state.units):
        b = 6 * i
        st = _stats(cfg, u)
        out[b + 0] = 1.0 if u.alive else 0.0
        out[b + 1] = u.health / u.max_health
        out[b + 2] = u.cooldown / max(1, st.cooldown)
        out[b + 3] = 2.0 * u.x / (cfg.width - 1) - 1.0
        out[b + 4] = 2.0 * u.y / (cfg.height - 1) - 1.0
        out[b + 5] = 1.0 if u.unit_class == RANGED else -1.0
    out[-1] = state.step_count / cfg.episode_limit
    return out


def scripted_enemy_policy(state: WorldState) -> list[int]:
    """Mirrored-action intents for every enemy.

    Attack the nearest living ally in range (lowest ally index on
    ties) when off cooldown; otherwise step toward the nearest ally,
    minimizing (Chebyshev, Manhattan) distance lexicographically, ties
    going to the first of N/S/E/W; stop when no move improves.
    """
    cfg = state.cfg
    intents = []
    occupied = {(u.x, u.y) for u in state.units if u.alive}
    living_allies = [(j, a) for j, a in enumerate(state.allies) if a.alive]
    for enemy in state.enemies:
        if not enemy.alive or not living_allies:
            intents.append(NOOP)
            continue
        st = _stats(cfg, enemy)
        best_j, best_d = None, None
        for j, ally in living_allies:
            d = _cheb(enemy.x, enemy.y, ally.x, ally.y)
            if best_d is None or d < best_d:
                best_j, best_d = j, d
        if enemy.cooldown == 0 and best_d <= st.attack_range:
            intents.append(ATTACK_BASE + best_j)
            continue
        target = state.allies[best_j]

        def key(x, y):
            return (_cheb(x, y, target.x, target.y),
                    _manhattan(x, y, target.x, target.y))

        cur = key(enemy.x, enemy.y)
        chosen = STOP
        best_key = cur
        for action in (MOVE_N, MOVE_S, MOVE_E, MOVE_W):
            dx, dy = MOVE_DELTAS[action]
            nx, ny = enemy.x + dx, enemy.y + dy
            if not (0 <= nx < cfg.width and 0 <= ny < cfg.height):
                continue
            if (nx, ny) in occupied:
                continue
            k = key(nx, ny)
            if k < best_key:
                best_key = k
                chosen = action
        intents.append(chosen)
    return intents


def reference_ally_policy(state: WorldState, agent_index: int) -> int:
    """Hand-written focus-fire policy that reliably clears the map.

    All allies concentrate on the lowest-(health, index) living enemy;
    ranged units step away from adjacent threats while their attack
    cools down. Used by tests as a known-winning action source and by
    the demos as a non-learned baseline. Deterministic.
    """
    cfg = state.cfg
    me = state.units[agent_index]
    mask = available_mask(state, agent_index)
    if not me.alive:
        return NOOP
    living = [(u.health, k) for k, u in enumerate(state.enemies) if u.alive]
    if not living:
        return STOP
    _, focus = min(living)
    if mask[ATTACK_BASE + focus]:
        return ATTACK_BASE + focus
    in_range = [(state.enemies[k].health, k) for k in range(cfg.n_enemies)
                if mask[ATTACK_BASE + k]]
    if in_range:
        return ATTACK_BASE + min(in_range)[1]
    near_d, near_k = min((_cheb(me.x, me.y, u.x, u.y), k)
                         for k, u in enumerate(state.enemies) if u.alive)
    nearest = state.enemies[near_k]
    if me.unit_class == RANGED and me.cooldown > 0 and near_d <= 2:
        best, act = -near_d, STOP
        for a in (MOVE_N, MOVE_S, MOVE_E, MOVE_W):
            if not mask[a]:
                continue
            dx, dy = MOVE_DELTAS[a]
            v = -_cheb(me.x + dx, me.y + dy, nearest.x, nearest.y)
            if v < best:
                best, act = v, a
        return act
    target = state.enemies[focus]
    best = (_cheb(me.x, me.y, target.x, target.y),
            _manhattan(me.x, me.y, target.x, target.y))
    act = STOP
    for a in (MOVE_N, MOVE_S, MOVE_E, MOVE_W):
        if not mask[a]:
            continue
        dx, dy = MOVE_DELTAS[a]
        k2 = (_cheb(me.x + dx, me.y + dy, target.x, target.y),
              _manhattan(me.x + dx, me.y + dy, target.x, target.y))
        if k2 < best:
            best, act = k2, a
    return act


def step(state: WorldState, joint_action) -> tuple[WorldState, list[AgentObservation],
                                                   np.ndarray, StepOutcome]:
    """Advance one tick. Ally actions must be mask-available.

    Pure with respect to its arguments: returns a new WorldState.
    """
    cfg = state.cfg
    joint_action = [int(a) for a in joint_action]
    if len(joint_action) != cfg.n_allies:
        raise ValueError(f"expected {cfg.n_allies} actions")
    for i, a in enumerate(joint_action):
        if not available_mask(state, i)[a]:
            raise UnavailableActionError(i, a)

    new = WorldState(cfg, copy.deepcopy(state.units), state.step_count,
                     state.rng, state.cumulative_raw, state.terminated,
                     state.team_won)
    if new.terminated:
        raise ValueError("episode already terminated")

    enemy_intents = scripted_enemy_policy(state)
    # intents per global unit index: (kind, payload)
    intents: list[tuple[str, int]] = []
    for a in joint_action:
        if a in MOVE_DELTAS:
            intents.append(("move", a))
        elif a >= ATTACK_BASE:
            intents.append(("attack", cfg.n_allies + (a - ATTACK_BASE)))
        else:
            intents.append(("hold", 0))
    for a in enemy_intents:
        if a in MOVE_DELTAS:
            intents.append(("move", a))
        elif a >= ATTACK_BASE:
            intents.append(("attack", a - ATTACK_BASE))
        else:
            intents.append(("hold", 0))

    # movement, in unit index order; blocked moves become holds
    for idx, unit in enumerate(new.units):
        kind, payload = intents[idx]
        if not unit.alive or kind != "move":
            continue
        dx, dy = MOVE_DELTAS[payload]
        nx, ny = unit.x + dx, unit.y + dy
        blocked = not (0 <= nx < cfg.width and 0 <= ny < cfg.height)
        if not blocked:
            for other in new.units:
                if other.alive and other is not unit and (other.x, other.y) == (nx, ny):
                    blocked = True
                    break
        if not blocked:
            unit.x, unit.y = nx, ny

    # attacks: queue from units alive at phase start, then apply in
    # attacker index order with overkill truncated
    queue: list[tuple[int, int, float]] = []
    for idx, unit in enumerate(new.units):
        kind, target_idx = intents[idx]
        if kind != "attack" or not unit.alive or unit.cooldown != 0:
            continue
        target = new.units[target_idx]
        if not target.alive:
            continue
        queue.append((idx, target_idx, _stats(cfg, unit).damage))

    raw_gain = 0.0
    attacked = set()
    for idx, target_idx, dmg in queue:
        target = new.units[target_idx]
        credited = min(dmg, target.health)
        target.health -= credited
        attacked.add(idx)
        if target.team == ENEMY:
            raw_gain += credited

    # deaths
    for unit in new.units:
        if unit.alive and unit.health <= 0:
            unit.health = 0.0
            unit.alive = False
            unit.cooldown = 0
            if unit.team == ENEMY:
                raw_gain += cfg.kill_bonus

    # cooldowns
    for idx, unit in enumerate(new.units):
        if not unit.alive:
            continue
        if idx in attacked:
            unit.cooldown = _stats(cfg, unit).cooldown
        elif unit.cooldown > 0:
            unit.cooldown -= 1

    new.step_count += 1
    team_won = not any(u.alive for u in new.enemies)
    if team_won:
        raw_gain += cfg.win_bonus
    allies_dead = not any(u.alive for u in new.allies)
    terminated = team_won or allies_dead or new.step_count >= cfg.episode_limit

    before = new.cumulative_raw * cfg.reward_scale
    new.cumulative_raw += raw_gain
    reward = new.cumulative_raw * cfg.reward_scale - before
    new.terminated = terminated
    new.team_won = team_won

    obs = [observe(new, i) for i in range(cfg.n_allies)]
    return new, obs, global_state(new), StepOutcome(reward, terminated, team_won)
