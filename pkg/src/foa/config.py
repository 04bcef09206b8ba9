"""Run configuration with environment-variable overrides."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Mapping, Optional

from .errors import InvalidArgument

SYNTH_MODES = ("concat", "rebase", "merge")

# env var -> (field, parser)
ENV_OVERRIDES = {
    "FOE_DECOMP_THRESHOLD": ("decomp_threshold", float),
    "FOE_DECOMP_MAX_AGENTS": ("decomp_max_agents", int),
    "FOE_DECOMP_SUBTASKS_MIN": ("subtasks_min", int),
    "FOE_DECOMP_SUBTASKS_MAX": ("subtasks_max", int),
    "FOE_DECOMP_MERGE_SIM": ("merge_sim", float),
    "FOE_CLUSTER_SIM_THRESHOLD": ("cluster_sim_threshold", float),
}


@dataclass(frozen=True)
class FederationConfig:
    decomp_threshold: float = 0.3
    decomp_max_agents: int = 4
    subtasks_min: int = 2
    subtasks_max: int = 4
    merge_sim: float = 0.5
    cluster_sim_threshold: float = 0.2
    cluster_max_size: int = 4
    rounds: int = 3
    timeout_ms: float = 300_000.0
    call_timeout_ms: float = 30_000.0
    team_size: int = 3
    agent_capacity: int = 2
    resource_lambda: float = 1.0
    cluster_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    synth_mode: str = "concat"
    reputation_beta: float = 0.2
    early_exit: bool = True
    majority_stop: bool = False
    audit_gate_fail: bool = False
    retrieval_pool: int = 32
    oracle_limit: int = 30

    def __post_init__(self):
        object.__setattr__(self, "cluster_weights", tuple(float(w) for w in self.cluster_weights))
        if not 0.0 < self.decomp_threshold < 1.0:
            raise InvalidArgument("decomp_threshold must lie in (0, 1)")
        if not 1 <= self.subtasks_min <= self.subtasks_max:
            raise InvalidArgument("need 1 <= subtasks_min <= subtasks_max")
        if self.decomp_max_agents < 1 or self.team_size < 1 or self.agent_capacity < 1:
            raise InvalidArgument("agent counts, team size and capacity must be positive")
        if self.rounds < 1 or self.cluster_max_size < 1:
            raise InvalidArgument("rounds and cluster_max_size must be positive")
        if self.timeout_ms <= 0 or self.call_timeout_ms <= 0:
            raise InvalidArgument("timeouts must be positive")
        if self.synth_mode not in SYNTH_MODES:
            raise InvalidArgument(f"synth_mode must be one of {SYNTH_MODES}")
        if not 0.0 <= self.reputation_beta <= 1.0:
            raise InvalidArgument("reputation_beta must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["cluster_weights"] = list(self.cluster_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgument(f"unknown config keys {unknown}")
        return cls(**dict(d))

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> "FederationConfig":
        environ = os.environ if environ is None else environ
        changes = {}
        for var, (name, parse) in ENV_OVERRIDES.items():
            if var in environ:
                try:
                    changes[name] = parse(environ[var])
                except ValueError:
                    raise InvalidArgument(f"{var}={environ[var]!r} is not a valid {parse.__name__}") from None
        return replace(self, **changes) if changes else self
