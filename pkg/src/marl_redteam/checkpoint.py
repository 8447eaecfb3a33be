"""Versioned JSON checkpoints for agent and mixing networks.

One document holds the architecture, every named weight array flattened
to a list, the seed the run started from, and a hash of the originating
config. Doubles survive the JSON round trip bit-exactly (shortest-repr
serialization), which the replay-integrity tests rely on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .diffnet import AgentNet, MixingNet, Params

FORMAT_VERSION = 1


def config_hash(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of a config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _pack_params(params: Params) -> dict[str, list[float]]:
    return {k: v.ravel().tolist() for k, v in sorted(params.items())}


def _unpack_params(packed: dict[str, list[float]], shapes: dict[str, list[int]]) -> Params:
    return {k: np.array(v, dtype=np.float64).reshape(shapes[k])
            for k, v in packed.items()}


@dataclass
class Checkpoint:
    """Team or adversary snapshot plus the config it was trained under."""

    kind: str                       # "qmix_team" | "adv_policy"
    agent_nets: dict[str, AgentNet]
    mixing_net: MixingNet | None
    config: dict[str, Any]
    rng_seed: int
    method: str | None = None      # adv policies: "ow" | "owr"
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "rng_seed": self.rng_seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "agents": {},
        }
        if self.method is not None:
            doc["method"] = self.method
        if self.extra:
            doc["extra"] = self.extra
        for name, net in sorted(self.agent_nets.items()):
            doc["agents"][name] = {
                "input_dim": net.input_dim,
                "hidden_dim": net.hidden_dim,
                "n_actions": net.n_actions,
                "shapes": {k: list(v.shape) for k, v in sorted(net.params.items())},
                "weights": _pack_params(net.params),
            }
        if self.mixing_net is not None:
            mix = self.mixing_net
            doc["mixing"] = {
                "n_agents": mix.n_agents,
                "state_dim": mix.state_dim,
                "embed_dim": mix.embed_dim,
                "shapes": {k: list(v.shape) for k, v in sorted(mix.params.items())},
                "weights": _pack_params(mix.params),
            }
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=1) + "\n")


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')}")
    agents = {}
    for name, spec in doc["agents"].items():
        params = _unpack_params(spec["weights"], spec["shapes"])
        agents[name] = AgentNet(spec["input_dim"], spec["hidden_dim"],
                                spec["n_actions"], params)
    mixing = None
    if "mixing" in doc:
        m = doc["mixing"]
        mixing = MixingNet(m["n_agents"], m["state_dim"], m["embed_dim"],
                           _unpack_params(m["weights"], m["shapes"]))
    ckpt = Checkpoint(
        kind=doc["kind"],
        agent_nets=agents,
        mixing_net=mixing,
        config=doc["config"],
        rng_seed=doc["rng_seed"],
        method=doc.get("method"),
        extra=doc.get("extra", {}),
    )
    if doc.get("config_hash") != ckpt.config_hash:
        raise ValueError("checkpoint config hash mismatch")
    return ckpt
