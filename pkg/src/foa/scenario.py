"""Scenario documents: a federation, its tasks and the run configuration."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .agents import Behavior, Federation, MockAgent, ToolStub
from .capability import RESOURCE_FIELDS, SpecDocument
from .clock import SimClock
from .config import FederationConfig
from .decompose import TaskSpec
from .errors import FoaError
from .orchestrator import JobReport, Orchestrator
from .policy import PolicyVocabulary
from .transport import InProcessBroker

BUNDLED = ("smoke", "fault-injection", "infeasible")


class ScenarioError(FoaError):
    """A scenario document failed to parse or validate; ``location`` points at the culprit."""

    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class AgentDef:
    agent_id: str
    goals: Tuple[str, ...] = ()
    rules: Tuple[str, ...] = ()
    tools: Tuple[str, ...] = ()
    skills: Tuple[str, ...] = ()
    resources: Tuple[float, ...] = (100.0, 100.0, 16.0, 400.0)
    policies: Tuple[str, ...] = ()
    seed: int = 0
    reputation: float = 0.5
    capacity: Optional[int] = None
    tool_stubs: Tuple[ToolStub, ...] = ()
    behavior: Behavior = Behavior()

    def to_dict(self) -> Dict[str, Any]:
        return {"agent_id": self.agent_id, "goals": list(self.goals), "rules": list(self.rules),
                "tools": list(self.tools), "skills": list(self.skills), "resources": list(self.resources),
                "policies": list(self.policies), "seed": self.seed, "reputation": self.reputation,
                "capacity": self.capacity,
                "tool_stubs": [{"name": t.name, "lookup": dict(t.lookup)} for t in self.tool_stubs],
                "behavior": self.behavior.to_dict()}


@dataclass(frozen=True)
class TaskDef:
    task_id: str
    description: str
    policies: Tuple[str, ...] = ()
    resources: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {"task_id": self.task_id, "description": self.description,
                "policies": list(self.policies), "resources": list(self.resources)}


@dataclass(frozen=True)
class Scenario:
    name: str
    agents: Tuple[AgentDef, ...]
    tasks: Tuple[TaskDef, ...]
    config: FederationConfig = FederationConfig()
    seed: int = 0
    policy_labels: Tuple[str, ...] = ()
    blocklist: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "seed": self.seed, "config": self.config.to_dict(),
                "policy_labels": list(self.policy_labels), "blocklist": list(self.blocklist),
                "agents": [a.to_dict() for a in self.agents], "tasks": [t.to_dict() for t in self.tasks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        return _parse_scenario(d)

    @classmethod
    def from_json(cls, text: str, source: str = "<scenario>") -> "Scenario":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{source}:{exc.lineno}:{exc.colno}", exc.msg) from None
        return _parse_scenario(doc, source)


def _get(d: Mapping[str, Any], key: str, where: str, kind, default=...):
    if key not in d:
        if default is ...:
            raise ScenarioError(f"{where}.{key}", "missing")
        return default
    value = d[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind):
        raise ScenarioError(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _strings(d, key, where) -> Tuple[str, ...]:
    values = _get(d, key, where, list, [])
    for i, v in enumerate(values):
        if not isinstance(v, str):
            raise ScenarioError(f"{where}.{key}[{i}]", "expected string")
    return tuple(values)


def _numbers(d, key, where, default) -> Tuple[float, ...]:
    values = _get(d, key, where, list, list(default))
    if len(values) != len(RESOURCE_FIELDS):
        raise ScenarioError(f"{where}.{key}", f"expected {len(RESOURCE_FIELDS)} numbers {RESOURCE_FIELDS}")
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
            raise ScenarioError(f"{where}.{key}[{i}]", "expected a non-negative number")
    return tuple(float(v) for v in values)


def _parse_scenario(doc: Any, source: str = "<scenario>") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError(source, "top level must be an object")
    where = source
    try:
        config = FederationConfig.from_dict(_get(doc, "config", where, dict, {}))
    except (FoaError, TypeError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{where}.config", str(exc)) from None
    agents = []
    for i, a in enumerate(_get(doc, "agents", where, list)):
        aw = f"{where}.agents[{i}]"
        if not isinstance(a, dict):
            raise ScenarioError(aw, "expected object")
        stubs = []
        for j, t in enumerate(_get(a, "tool_stubs", aw, list, [])):
            tw = f"{aw}.tool_stubs[{j}]"
            if not isinstance(t, dict):
                raise ScenarioError(tw, "expected object")
            stubs.append(ToolStub(_get(t, "name", tw, str), _get(t, "lookup", tw, dict, {})))
        try:
            behavior = Behavior.from_dict(_get(a, "behavior", aw, dict, {}))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{aw}.behavior", str(exc)) from None
        capacity = _get(a, "capacity", aw, (int, type(None)), None)
        agents.append(AgentDef(
            agent_id=_get(a, "agent_id", aw, str), goals=_strings(a, "goals", aw), rules=_strings(a, "rules", aw),
            tools=_strings(a, "tools", aw), skills=_strings(a, "skills", aw),
            resources=_numbers(a, "resources", aw, AgentDef.resources), policies=_strings(a, "policies", aw),
            seed=_get(a, "seed", aw, int, 0), reputation=_get(a, "reputation", aw, float, 0.5),
            capacity=capacity, tool_stubs=tuple(stubs), behavior=behavior))
    ids = [a.agent_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"{where}.agents", "duplicate agent_id")
    tasks = []
    for i, t in enumerate(_get(doc, "tasks", where, list)):
        tw = f"{where}.tasks[{i}]"
        if not isinstance(t, dict):
            raise ScenarioError(tw, "expected object")
        tasks.append(TaskDef(_get(t, "task_id", tw, str), _get(t, "description", tw, str),
                             _strings(t, "policies", tw), _numbers(t, "resources", tw, TaskDef.resources)))
    labels = _strings(doc, "policy_labels", where)
    for i, a in enumerate(agents):
        bad = [p for p in a.policies if p not in labels]
        if bad:
            raise ScenarioError(f"{where}.agents[{i}].policies", f"unknown labels {bad}")
    for i, t in enumerate(tasks):
        bad = [p for p in t.policies if p not in labels]
        if bad:
            raise ScenarioError(f"{where}.tasks[{i}].policies", f"unknown labels {bad}")
    return Scenario(_get(doc, "name", where, str, Path(source).stem), tuple(agents), tuple(tasks), config,
                    _get(doc, "seed", where, int, 0), labels, _strings(doc, "blocklist", where))


def load_scenario(ref: str) -> Scenario:
    """Load a bundled scenario by name or a JSON file by path."""
    if ref in BUNDLED and not Path(ref).exists():
        text = resources.files("foa.scenarios").joinpath(f"{ref}.json").read_text(encoding="utf-8")
        return Scenario.from_json(text, f"{ref}.json")
    path = Path(ref)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(str(path), exc.strerror or "unreadable") from None
    return Scenario.from_json(text, str(path))


def mix_seed(scenario_seed: int, agent_seed: int) -> int:
    digest = hashlib.blake2b(f"{scenario_seed}:{agent_seed}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass
class RunOutcome:
    reports: List[JobReport]
    federation: Federation = field(repr=False)
    orchestrator: Orchestrator = field(repr=False)

    @property
    def exit_code(self) -> int:
        return 0 if all(r.status == "Done" for r in self.reports) else 1


def build(scenario: Scenario, seed: Optional[int] = None, timeout_ms: Optional[float] = None,
          duplicate_qos1: bool = False, config: Optional[FederationConfig] = None) -> Tuple[Federation, Orchestrator]:
    cfg = config if config is not None else scenario.config
    if timeout_ms is not None:
        cfg = FederationConfig.from_dict({**cfg.to_dict(), "timeout_ms": float(timeout_ms)})
    base_seed = scenario.seed if seed is None else seed
    vocab = PolicyVocabulary(scenario.policy_labels)
    federation = Federation(InProcessBroker(duplicate_qos1=duplicate_qos1), SimClock(), vocab)
    orchestrator = Orchestrator(federation, cfg, scenario.blocklist)
    for a in scenario.agents:
        spec = SpecDocument(a.agent_id, a.goals, a.rules, a.tools)
        agent = MockAgent(a.agent_id, mix_seed(base_seed, a.seed), a.tool_stubs, a.behavior)
        capacity = a.capacity if a.capacity is not None else cfg.agent_capacity
        federation.register(spec, a.skills, a.resources, vocab.bits(a.policies), agent, a.reputation, capacity)
    return federation, orchestrator


def run_scenario(scenario: Scenario, seed: Optional[int] = None, timeout_ms: Optional[float] = None,
                 report_dir: Optional[Path] = None, duplicate_qos1: bool = False,
                 config: Optional[FederationConfig] = None) -> RunOutcome:
    federation, orchestrator = build(scenario, seed, timeout_ms, duplicate_qos1, config)
    reports = []
    for t in scenario.tasks:
        task = TaskSpec(t.task_id, t.description, p_req=federation.vocabulary.bits(t.policies), r_req=t.resources)
        reports.append(orchestrator.run_job(task))
    if report_dir is not None:
        report_dir = Path(report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        for r in reports:
            (report_dir / f"{r.job_id}.json").write_text(r.to_json() + "\n", encoding="utf-8")
    return RunOutcome(reports, federation, orchestrator)
