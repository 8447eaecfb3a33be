"""Command-line front end.

Subcommands: train-qmix, train-adv, attack, sweep, report, replay.
Experiment configs are JSON documents (schema_version 1); the
MARL_REDTEAM_SEED environment variable overrides any config or flag
seed, which CI uses to pin reruns.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import advpolicy as ap
from . import harness as hx
from . import qmix as qm
from .advexample import AttackBudget
from .checkpoint import load_checkpoint
from .env import EnvConfig

SEED_ENV_VAR = "MARL_REDTEAM_SEED"


def _seed_override(seed: int) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return seed


def _load_env_and_train(config_path: str | None) -> tuple[EnvConfig, dict]:
    if config_path is None:
        return EnvConfig(), {}
    doc = json.loads(Path(config_path).read_text())
    env_cfg = EnvConfig.from_dict(doc["env"]) if "env" in doc else EnvConfig()
    return env_cfg, doc.get("train", {})


def _write_log_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(str(r[k]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train_qmix(args) -> int:
    env_cfg, train_kw = _load_env_and_train(args.config)
    cfg = qm.TrainConfig(**train_kw)
    seed = _seed_override(args.seed)
    t0 = time.time()

    def cb(row):
        if args.verbose and row["eval_win_rate"] != "":
            print(f"episode {row['episode'] + 1}: loss={row['loss']:.4f} "
                  f"epsilon={row['epsilon']:.3f} "
                  f"eval_win_rate={row['eval_win_rate']:.2%}")

    ckpt, log = qm.train(env_cfg, cfg, seed, log_cb=cb)
    ckpt.save(args.out)
    if args.log:
        _write_log_csv(args.log, log)
    print(f"trained {cfg.episodes} episodes in {time.time() - t0:.0f}s "
          f"-> {args.out}")
    return 0


def cmd_train_adv(args) -> int:
    team_ckpt = load_checkpoint(args.team)
    env_cfg = EnvConfig.from_dict(team_ckpt.config["env"])
    _, train_kw = _load_env_and_train(args.config)
    train_kw.setdefault("lambda_reg", args.lambda_reg)
    cfg = ap.AdvTrainConfig(**train_kw)
    seed = _seed_override(args.seed)
    t0 = time.time()

    def cb(row):
        if args.verbose and (row["episode"] + 1) % 200 == 0:
            print(f"episode {row['episode'] + 1}: loss={row['loss']:.4f} "
                  f"team_reward_ma={row['team_reward_ma']:.2f}")

    trainer = ap.train_ow if args.method == "ow" else ap.train_owr
    ckpt, log = trainer(env_cfg, team_ckpt, args.victim, cfg, seed, log_cb=cb)
    ckpt.save(args.out)
    if args.log:
        _write_log_csv(args.log, log)
    print(f"trained {args.method} adversary in {time.time() - t0:.0f}s "
          f"-> {args.out}")
    return 0


def _experiment_config(args) -> hx.ExperimentConfig:
    # collect everything first: the config dataclass validates method
    # combinations on construction, so build it exactly once
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    else:
        doc = hx.ExperimentConfig(team_checkpoint=args.team).to_dict()
    if args.team:
        doc["team_checkpoint"] = args.team
    if args.adv:
        doc["adv_checkpoint"] = args.adv
    if args.victim is not None:
        doc["victim_index"] = args.victim
    if args.method is not None:
        doc["attack_method"] = None if args.method == "direct" else args.method
    if args.target_policy is not None:
        doc["target_method"] = args.target_policy
    budget = doc.get("budget") or AttackBudget().to_dict()
    if args.epsilon is not None:
        budget["epsilon"] = args.epsilon
    if args.alpha is not None:
        budget["alpha"] = args.alpha
    if args.theta_schedule is not None:
        budget["theta_schedule"] = [float(t)
                                    for t in args.theta_schedule.split(",")]
    if args.max_iters is not None:
        budget["max_iters_per_theta"] = args.max_iters
    doc["budget"] = budget
    if args.episodes is not None:
        doc["n_episodes"] = args.episodes
    if args.seed is not None:
        doc["seed"] = args.seed
    doc["seed"] = _seed_override(doc.get("seed", 0))
    if args.out_dir:
        doc["out_dir"] = args.out_dir
    return hx.ExperimentConfig.from_dict(doc)


def _finish_run(cfg: hx.ExperimentConfig, rows, result=None,
                traces: bool = False, t0: float = 0.0) -> int:
    out_dir = cfg.out_dir or "."
    csv_path, json_path = hx.report(rows, out_dir)
    team = load_checkpoint(cfg.team_checkpoint)
    hashes = {"team": team.config_hash}
    if cfg.adv_checkpoint:
        hashes["adv"] = load_checkpoint(cfg.adv_checkpoint).config_hash
    hx.write_manifest(out_dir, cfg, hashes, time.time() - t0)
    if traces and result is not None:
        hx.write_traces(result.traces, Path(out_dir) / "traces.jsonl")
    for row in rows:
        print(row.csv_line())
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_attack(args) -> int:
    cfg = _experiment_config(args)
    t0 = time.time()
    row, result = hx.run_experiment(cfg, record_traces=args.traces)
    return _finish_run(cfg, [row], result, args.traces, t0)


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    values = [v for v in args.values.split(",") if v]
    t0 = time.time()
    rows = hx.sweep(cfg, args.axis, values)
    if not rows:
        print("empty sweep: no values given", file=sys.stderr)
        return 1
    return _finish_run(cfg, rows, t0=t0)


def cmd_report(args) -> int:
    rows = []
    for path in args.rows:
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, list):
            rows.extend(hx.MetricsRow.from_dict(d) for d in doc)
        else:
            rows.append(hx.MetricsRow.from_dict(doc))
    csv_path, json_path = hx.report(rows, args.out_dir)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_replay(args) -> int:
    print(hx.replay(args.trace, args.episode))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marl-redteam",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-qmix", help="train the baseline team")
    t.add_argument("--config", help="JSON with optional env/train sections")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--log", help="training log CSV path")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train_qmix)

    a = sub.add_parser("train-adv", help="train an OW/OWR adversarial policy")
    a.add_argument("--method", choices=("ow", "owr"), required=True)
    a.add_argument("--lambda", dest="lambda_reg", type=float, default=0.1,
                   help="forceability penalty weight (owr)")
    a.add_argument("--team", required=True, help="team checkpoint path")
    a.add_argument("--victim", type=int, default=0)
    a.add_argument("--config", help="JSON with optional train section")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--log")
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(func=cmd_train_adv)

    def _run_flags(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--team", help="team checkpoint path")
        sp.add_argument("--adv", help="adversarial checkpoint path")
        sp.add_argument("--victim", type=int)
        sp.add_argument("--method",
                        choices=("direct", "fgsm", "it-fgsm", "jsma", "d-jsma"))
        sp.add_argument("--target-policy",
                        choices=("random", "lw", "qmix-worst", "ow", "owr"))
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--theta-schedule", help="comma-separated, ascending")
        sp.add_argument("--max-iters", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")

    k = sub.add_parser("attack", help="run one attack configuration")
    _run_flags(k)
    k.add_argument("--traces", action="store_true",
                   help="also write traces.jsonl")
    k.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="run one config across an axis")
    _run_flags(s)
    s.add_argument("--axis", choices=("epsilon", "theta", "method"),
                   required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="re-emit CSV/JSON from saved rows")
    r.add_argument("--rows", nargs="+", required=True,
                   help="metrics JSON files")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)

    y = sub.add_parser("replay", help="pretty-print an episode trace")
    y.add_argument("--trace", required=True)
    y.add_argument("--episode", type=int)
    y.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
