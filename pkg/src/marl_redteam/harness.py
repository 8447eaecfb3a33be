"""Experiment orchestration: direct control, the two-step attack,
sweeps, and file reporting.

A run takes a trained team checkpoint, designates one victim agent,
and evaluates episodes where at each timestep (1) a target-selection
policy proposes an action for the victim from its clean observation and
(2) optionally, a perturbation method rewrites the victim's observation
so its own greedy choice lands on that target. The victim then acts on
whatever it sees, successful or not, and its recurrent state carries
the perturbed stream forward.

Paired-seed discipline: every run derives its episode seeds from the
config seed the same way, so methods compared under one seed see
identical spawn layouts and the reported orderings are not noise.

Outputs: a fixed-header CSV (2-decimal numbers), a full-precision JSON
with L1 histograms, optional line-delimited JSON episode traces, and a
run manifest (the manifest carries wall-clock time and is the one
output file that is not byte-reproducible).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import advexample as ax
from . import advpolicy as ap
from . import env as envmod
from . import qmix as qm
from .checkpoint import Checkpoint, load_checkpoint

SCHEMA_VERSION = 1

CSV_HEADER = ("label,avg_reward,win_rate,misclassification_rate,"
              "target_success_rate,avg_l1,attacked_steps,n_episodes,seed")

# L1 histogram: unit bins to 20, one overflow bin to the box maximum
L1_HIST_EDGES = tuple(float(x) for x in range(21)) + (2.0 * envmod.OBS_DIM,)

ATTACK_METHODS = ("fgsm", "it-fgsm", "jsma", "d-jsma")
TARGET_METHODS = ("random", "lw", "qmix-worst", "ow", "owr")


@dataclass
class ExperimentConfig:
    team_checkpoint: str
    adv_checkpoint: str | None = None
    victim_index: int = 0
    target_method: str | None = None     # None -> unattacked baseline
    attack_method: str | None = None     # None -> direct control
    budget: ax.AttackBudget = field(default_factory=ax.AttackBudget)
    n_episodes: int = 500
    seed: int = 0
    out_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema: {self.schema_version}")
        if self.target_method is not None and self.target_method not in TARGET_METHODS:
            raise ValueError(f"unknown target method: {self.target_method}")
        if self.attack_method is not None and self.attack_method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method: {self.attack_method}")
        if self.attack_method not in (None, "fgsm") and self.target_method is None:
            raise ValueError(f"{self.attack_method} needs a target-selection method")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "team_checkpoint": self.team_checkpoint,
            "adv_checkpoint": self.adv_checkpoint,
            "victim_index": self.victim_index,
            "target_method": self.target_method,
            "attack_method": self.attack_method,
            "budget": self.budget.to_dict(),
            "n_episodes": self.n_episodes,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        kw = dict(d)
        if "budget" in kw and kw["budget"] is not None:
            b = dict(kw["budget"])
            if "theta_schedule" in b:
                b["theta_schedule"] = tuple(b["theta_schedule"])
            kw["budget"] = ax.AttackBudget(**b)
        return ExperimentConfig(**kw)

    @property
    def label(self) -> str:
        if self.target_method is None and self.attack_method is None:
            return "baseline"
        if self.attack_method is None:
            return f"direct+{self.target_method}"
        if self.target_method is None:
            return self.attack_method
        return f"{self.attack_method}+{self.target_method}"


@dataclass
class MetricsRow:
    label: str
    avg_reward: float
    win_rate: float
    misclassification_rate: float
    target_success_rate: float
    avg_l1: float
    l1_hist_edges: tuple[float, ...]
    l1_hist_counts: tuple[int, ...]
    attacked_steps: int
    n_episodes: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "label": self.label, "avg_reward": self.avg_reward,
            "win_rate": self.win_rate,
            "misclassification_rate": self.misclassification_rate,
            "target_success_rate": self.target_success_rate,
            "avg_l1": self.avg_l1,
            "l1_hist_edges": list(self.l1_hist_edges),
            "l1_hist_counts": list(self.l1_hist_counts),
            "attacked_steps": self.attacked_steps,
            "n_episodes": self.n_episodes, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsRow":
        kw = dict(d)
        kw["l1_hist_edges"] = tuple(kw["l1_hist_edges"])
        kw["l1_hist_counts"] = tuple(int(c) for c in kw["l1_hist_counts"])
        return MetricsRow(**kw)

    def csv_line(self) -> str:
        return (f"{self.label},{self.avg_reward:.2f},{self.win_rate:.2f},"
                f"{self.misclassification_rate:.2f},"
                f"{self.target_success_rate:.2f},{self.avg_l1:.2f},"
                f"{self.attacked_steps},{self.n_episodes},{self.seed}")


def metrics_row(label: str, result: qm.EvalResult) -> MetricsRow:
    counts, _ = np.histogram(result.l1_norms, bins=np.array(L1_HIST_EDGES))
    return MetricsRow(
        label=label,
        avg_reward=result.avg_reward,
        win_rate=result.win_rate,
        misclassification_rate=result.misclassification_rate,
        target_success_rate=result.target_success_rate,
        avg_l1=result.avg_l1,
        l1_hist_edges=L1_HIST_EDGES,
        l1_hist_counts=tuple(int(c) for c in counts),
        attacked_steps=result.attacked_steps,
        n_episodes=result.n_episodes,
        seed=result.seed,
    )


# ---------------------------------------------------------------------------
# hooks

def _victim_alive(ctx: qm.EvalStepContext, victim: int) -> bool:
    # a dead agent's mask admits only no-op
    return bool(ctx.masks[victim][envmod.STOP])


class DirectControlHook(qm.EvalHook):
    """Replace the victim's action with the selector's proposal."""

    def __init__(self, policy: ap.AdvPolicy):
        self.policy = policy

    def begin_episode(self, episode_index, rng):
        self.policy.begin_episode(rng)

    def step(self, ctx):
        v = self.policy.victim_index
        if not _victim_alive(ctx, v):
            return None
        target = self.policy.propose(ctx)
        rec = qm.AttackRecord(
            agent_index=v, target_action=target,
            clean_action=int(ctx.clean_actions[v]), success=True,
            method="direct")
        return qm.StepIntervention(override_actions={v: target},
                                   attack_records=[rec])


class TwoStepHook(qm.EvalHook):
    """Select a target from the clean stream, then perturb to force it."""

    def __init__(self, victim_index: int, attack_method: str,
                 budget: ax.AttackBudget, policy: ap.AdvPolicy | None):
        if attack_method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method: {attack_method}")
        if attack_method != "fgsm" and policy is None:
            raise ValueError(f"{attack_method} needs a target selector")
        self.victim_index = victim_index
        self.attack_method = attack_method
        self.budget = budget
        self.policy = policy

    def begin_episode(self, episode_index, rng):
        if self.policy is not None:
            self.policy.begin_episode(rng)

    def step(self, ctx):
        v = self.victim_index
        if not _victim_alive(ctx, v):
            return None
        net = ctx.team.net_for(v)
        obs_v, hid_v, mask_v = ctx.obs[v], ctx.hiddens[v], ctx.masks[v]
        target: int | None = None
        if self.attack_method == "fgsm":
            res = ax.fgsm_untargeted(net, obs_v, hid_v, mask_v,
                                     self.budget.epsilon)
        else:
            target = self.policy.propose(ctx)
            if self.attack_method == "it-fgsm":
                res = ax.it_fgsm(net, obs_v, hid_v, mask_v, target, self.budget)
            elif self.attack_method == "jsma":
                res = ax.jsma_2f(net, obs_v, hid_v, mask_v, target,
                                 self.budget.theta_schedule[-1],
                                 self.budget.max_iters_per_theta)
            else:
                res = ax.d_jsma(net, obs_v, hid_v, mask_v, target, self.budget)
        rec = qm.AttackRecord(
            agent_index=v, target_action=target,
            clean_action=int(ctx.clean_actions[v]), success=res.success,
            iterations=res.iterations_used, l1=res.l1_norm,
            linf=res.linf_norm, theta_used=res.theta_used,
            method=self.attack_method)
        return qm.StepIntervention(perturbed_obs={v: res.perturbed_obs},
                                   attack_records=[rec])


# ---------------------------------------------------------------------------
# runs

def _load_checkpoints(config: ExperimentConfig,
                      team_ckpt: Checkpoint | None,
                      adv_ckpt: Checkpoint | None
                      ) -> tuple[Checkpoint, Checkpoint | None]:
    if team_ckpt is None:
        team_ckpt = load_checkpoint(config.team_checkpoint)
    if adv_ckpt is None and config.adv_checkpoint:
        adv_ckpt = load_checkpoint(config.adv_checkpoint)
    if config.target_method in ("ow", "owr"):
        if adv_ckpt is None:
            raise ValueError(f"{config.target_method} requires adv_checkpoint")
        if adv_ckpt.extra.get("team_config_hash") != team_ckpt.config_hash:
            raise ValueError("adversarial checkpoint was trained against a "
                             "different team checkpoint: refusing to run")
        if adv_ckpt.extra.get("victim_index") != config.victim_index:
            raise ValueError("adversarial checkpoint targets a different victim")
    return team_ckpt, adv_ckpt


def _build_policy(config: ExperimentConfig, adv_ckpt: Checkpoint | None
                  ) -> ap.AdvPolicy | None:
    if config.target_method is None:
        return None
    return ap.make_policy(config.target_method, config.victim_index, adv_ckpt)


def run_baseline(config: ExperimentConfig, team_ckpt: Checkpoint | None = None,
                 record_traces: bool = False) -> tuple[MetricsRow, qm.EvalResult]:
    team_ckpt, _ = _load_checkpoints(replace(config, target_method=None),
                                     team_ckpt, None)
    result = qm.evaluate(team_ckpt, config.n_episodes, config.seed,
                         hook=None, record_traces=record_traces)
    return metrics_row("baseline", result), result


def run_direct_control(config: ExperimentConfig,
                       team_ckpt: Checkpoint | None = None,
                       adv_ckpt: Checkpoint | None = None,
                       record_traces: bool = False
                       ) -> tuple[MetricsRow, qm.EvalResult]:
    if config.target_method is None:
        raise ValueError("direct control needs a target-selection method")
    if config.attack_method is not None:
        raise ValueError("direct control must not set a perturbation method")
    team_ckpt, adv_ckpt = _load_checkpoints(config, team_ckpt, adv_ckpt)
    hook = DirectControlHook(_build_policy(config, adv_ckpt))
    result = qm.evaluate(team_ckpt, config.n_episodes, config.seed,
                         hook=hook, record_traces=record_traces)
    return metrics_row(config.label, result), result


def run_two_step(config: ExperimentConfig,
                 team_ckpt: Checkpoint | None = None,
                 adv_ckpt: Checkpoint | None = None,
                 record_traces: bool = False
                 ) -> tuple[MetricsRow, qm.EvalResult]:
    if config.attack_method is None:
        raise ValueError("two-step run needs a perturbation method")
    team_ckpt, adv_ckpt = _load_checkpoints(config, team_ckpt, adv_ckpt)
    hook = TwoStepHook(config.victim_index, config.attack_method,
                       config.budget, _build_policy(config, adv_ckpt))
    result = qm.evaluate(team_ckpt, config.n_episodes, config.seed,
                         hook=hook, record_traces=record_traces)
    return metrics_row(config.label, result), result


def run_experiment(config: ExperimentConfig,
                   team_ckpt: Checkpoint | None = None,
                   adv_ckpt: Checkpoint | None = None,
                   record_traces: bool = False
                   ) -> tuple[MetricsRow, qm.EvalResult]:
    """Dispatch on the config: baseline, direct control, or two-step."""
    if config.attack_method is not None:
        return run_two_step(config, team_ckpt, adv_ckpt, record_traces)
    if config.target_method is not None:
        return run_direct_control(config, team_ckpt, adv_ckpt, record_traces)
    return run_baseline(config, team_ckpt, record_traces)


def sweep(config: ExperimentConfig, axis: str, values,
          team_ckpt: Checkpoint | None = None,
          adv_ckpt: Checkpoint | None = None) -> list[MetricsRow]:
    """One run per axis value, all sharing the config seed (paired)."""
    rows: list[MetricsRow] = []
    for v in values:
        if axis == "epsilon":
            cfg = replace(config, budget=replace(config.budget, epsilon=float(v)))
            suffix = f"eps={float(v):g}"
        elif axis == "theta":
            cfg = replace(config, budget=replace(
                config.budget, theta_schedule=(float(v),)))
            suffix = f"theta={float(v):g}"
        elif axis == "method":
            cfg = replace(config, attack_method=str(v))
            suffix = None
        else:
            raise ValueError(f"unknown sweep axis: {axis}")
        row, _ = run_experiment(cfg, team_ckpt, adv_ckpt)
        if suffix:
            row.label = f"{row.label}[{suffix}]"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# reporting

def report(rows: list[MetricsRow], out_dir) -> tuple[Path, Path]:
    """Write metrics.csv (2-decimal) and metrics.json (full precision).

    Byte-deterministic for identical rows.
    """
    if not rows:
        raise ValueError("report needs at least one metrics row")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    json_path = out / "metrics.json"
    lines = [CSV_HEADER] + [r.csv_line() for r in rows]
    csv_path.write_text("\n".join(lines) + "\n")
    json_path.write_text(json.dumps([r.to_dict() for r in rows], indent=1) + "\n")
    return csv_path, json_path


def write_traces(traces: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in traces:
            fh.write(json.dumps(t) + "\n")
    return path


def metrics_from_traces(trace_lines: list[dict], label: str, seed: int
                        ) -> MetricsRow:
    """Recompute a MetricsRow from raw episode traces.

    Independent of EvalResult bookkeeping; the recomputation invariant
    test checks the two agree.
    """
    episodes: dict[int, dict] = {}
    l1s: list[float] = []
    attacked = changed = targeted = hits = 0
    for rec in trace_lines:
        e = rec["episode"]
        ep = episodes.setdefault(e, {"reward": 0.0, "won": False})
        ep["reward"] += rec["reward"]
        if rec.get("terminated"):
            ep["won"] = bool(rec.get("team_won"))
        for a in rec.get("attacks", []):
            attacked += 1
            l1s.append(a["l1"])
            if a["final_action"] != a["clean_action"]:
                changed += 1
            if a["target"] is not None:
                targeted += 1
                if a["final_action"] == a["target"]:
                    hits += 1
    counts, _ = np.histogram(l1s, bins=np.array(L1_HIST_EDGES))
    n = len(episodes)
    return MetricsRow(
        label=label,
        avg_reward=float(np.mean([ep["reward"] for ep in episodes.values()])),
        win_rate=float(np.mean([1.0 if ep["won"] else 0.0
                                for ep in episodes.values()])),
        misclassification_rate=(changed / attacked) if attacked else 0.0,
        target_success_rate=(hits / targeted) if targeted else 0.0,
        avg_l1=float(np.mean(l1s)) if l1s else 0.0,
        l1_hist_edges=L1_HIST_EDGES,
        l1_hist_counts=tuple(int(c) for c in counts),
        attacked_steps=attacked,
        n_episodes=n,
        seed=seed,
    )


def write_manifest(out_dir, config: ExperimentConfig,
                   checkpoint_hashes: dict[str, str],
                   wall_clock_seconds: float) -> Path:
    """Run metadata; the only output file that is not byte-reproducible."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": config.to_dict(),
        "code_version": __version__,
        "checkpoint_hashes": checkpoint_hashes,
        "wall_clock_seconds": wall_clock_seconds,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# trace replay (the textual substitute for watching a game)

_GLYPHS = {(envmod.ALLY, envmod.RANGED): "R", (envmod.ALLY, envmod.MELEE): "M",
           (envmod.ENEMY, envmod.RANGED): "r", (envmod.ENEMY, envmod.MELEE): "m"}


def render_step(rec: dict, width: int = 14, height: int = 9) -> str:
    grid = [["." for _ in range(width)] for _ in range(height)]
    for u in rec["units"]:
        if not u["alive"]:
            continue
        glyph = _GLYPHS[(u["team"], u["unit_class"])]
        grid[u["y"]][u["x"]] = glyph
    lines = [f"episode {rec['episode']} step {rec['step']}  "
             f"reward {rec['reward']:+.4f}"
             + ("  [WIN]" if rec.get("team_won") else "")]
    lines += ["".join(row) for row in grid]
    healths = " ".join(f"{_GLYPHS[(u['team'], u['unit_class'])]}"
                       f"{int(u['health'])}" for u in rec["units"])
    lines.append(f"hp: {healths}")
    lines.append(f"actions: {rec['joint_action']}")
    for a in rec.get("attacks", []):
        lines.append(
            f"  attack[{a['method']}] agent {a['agent']} target {a['target']} "
            f"clean {a['clean_action']} final {a['final_action']} "
            f"success {a['success']} l1 {a['l1']:.2f}")
    return "\n".join(lines)


def replay(trace_path, episode: int | None = None) -> str:
    """Pretty-print a trace file (optionally a single episode)."""
    out = []
    with Path(trace_path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if episode is not None and rec["episode"] != episode:
                continue
            out.append(render_step(rec))
    return "\n\n".join(out)
