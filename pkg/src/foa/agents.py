"""Worker-agent interface, deterministic mock agents and federation registration."""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .capability import (EMBED_DIM, RESOURCE_FIELDS, BitSet, BloomFilter, SpecDocument, Vcv,
                         VcvDelta, embed_text, tokenize)
from .clock import SimClock
from .consensus import Draft, update_draft
from .decompose import TaskSpec
from .errors import AgentCrash, AgentTimeout, Conflict, InvalidArgument, Refused
from .policy import AGENT_REFUSAL, PolicyLog, PolicyVocabulary
from .routing import DEFAULT_CAPACITY, AgentProfile
from .transport import (AGENT_TASKS, CAPABILITY_UPDATES, CLUSTER_CHANNEL, JOBS, RETAIN, Client,
                        Deduplicator, Envelope, InProcessBroker, decode_message, topic_for)

logger = logging.getLogger(__name__)

ENERGY = RESOURCE_FIELDS.index("energy_units")


@dataclass(frozen=True)
class ToolStub:
    name: str
    lookup: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "lookup", dict(sorted(self.lookup.items())))


def retrieve_resources(tools: Sequence[ToolStub], description: str) -> str:
    """Snippets whose keys share a token with the description, in key order."""
    wanted = set(tokenize(description))
    hits = []
    for tool in sorted(tools, key=lambda t: t.name):
        for key, snippet in tool.lookup.items():
            if wanted & set(tokenize(key)):
                hits.append((key, tool.name, snippet))
    hits.sort(key=lambda h: (h[0], h[1]))
    return "\n".join(snippet for _, _, snippet in hits)


@dataclass(frozen=True)
class Behavior:
    """Scripted behaviour of a mock agent.

    ``proposals`` maps a task id (or ``"*"``) to ``{"subtasks": [...], "deps": [[i, j], ...]}``.
    ``stall`` patterns make UPDATE time out on matching subtasks; ``refuse``
    patterns make the agent decline them.  ``fail_at_call``/``crash_at_call``
    inject a timeout or crash on the n-th interface call (1-based).
    ``complete_at_round`` of None means the agent never votes complete.
    """
    proposals: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    complete_at_round: Optional[int] = 1
    refuse: Tuple[str, ...] = ()
    stall: Tuple[str, ...] = ()
    fail_at_call: Optional[int] = None
    crash_at_call: Optional[int] = None
    latency_ms: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "refuse", tuple(self.refuse))
        object.__setattr__(self, "stall", tuple(self.stall))
        for pattern in self.refuse + self.stall:
            re.compile(pattern)
        if self.latency_ms < 0:
            raise InvalidArgument("latency must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {"proposals": {k: dict(v) for k, v in self.proposals.items()},
                "complete_at_round": self.complete_at_round, "refuse": list(self.refuse),
                "stall": list(self.stall), "fail_at_call": self.fail_at_call,
                "crash_at_call": self.crash_at_call, "latency_ms": self.latency_ms}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Behavior":
        return cls(**dict(d))


def _digest(*parts: Any) -> str:
    return hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=16).hexdigest()


class MockAgent:
    """Template-and-hash stand-in for a language-model worker."""

    def __init__(self, agent_id: str, seed: int = 0, tools: Sequence[ToolStub] = (),
                 behavior: Behavior = Behavior(), token_budget: Optional[int] = None):
        self.agent_id = agent_id
        self.seed = int(seed)
        self.tools = tuple(tools)
        self.behavior = behavior
        self.token_budget = token_budget
        self.calls = 0
        self.last_cost_ms = 0.0
        self._descriptions: Dict[str, str] = {}

    def _call(self) -> None:
        self.calls += 1
        if self.behavior.crash_at_call == self.calls:
            raise AgentCrash(f"{self.agent_id} crashed on call {self.calls}")
        if self.behavior.fail_at_call == self.calls:
            raise AgentTimeout(f"{self.agent_id} timed out on call {self.calls}")
        self.last_cost_ms = self.behavior.latency_ms

    def call_cost_ms(self) -> float:
        return self.last_cost_ms

    def _matches(self, patterns: Sequence[str], description: str) -> bool:
        return any(re.search(p, description, re.IGNORECASE) for p in patterns)

    def refuses(self, description: str) -> bool:
        return self._matches(self.behavior.refuse, description)

    def decompose(self, task: TaskSpec) -> Tuple[List[str], List[Tuple[int, int]]]:
        self._call()
        script = self.behavior.proposals.get(task.task_id, self.behavior.proposals.get("*"))
        if script is None:
            # fall back to splitting the description on clause boundaries
            parts = [p.strip() for p in re.split(r"[;.]|\band then\b", task.description) if p.strip()]
            return parts, [(i, i + 1) for i in range(len(parts) - 1)]
        return list(script.get("subtasks", [])), [tuple(d) for d in script.get("deps", [])]

    def confidence(self, subtask_id: str) -> float:
        h = int(_digest(self.seed, subtask_id, "confidence")[:8], 16)
        return round(0.5 + 0.45 * h / 0xFFFFFFFF, 6)

    def generate_draft(self, subtask_id: str, description: str, context: str = "") -> Draft:
        if self.refuses(description):
            raise Refused(f"{self.agent_id} declines {subtask_id}")
        self._call()
        self._descriptions[subtask_id] = description
        resources = retrieve_resources(self.tools, description)
        ref = _digest(self.seed, subtask_id, description, context)[:12]
        words = f"{description} ({subtask_id} by {self.agent_id}, ref {ref})".split()
        if resources:
            words += ["using:"] + resources.split()
        if self.token_budget is not None:
            words = words[:max(1, self.token_budget)]
        return Draft(self.agent_id, subtask_id, 0, " ".join(words), self.confidence(subtask_id))

    def refine(self, own: Draft, peers: Sequence[Draft], weights: Mapping[str, float]) -> Draft:
        self._call()
        if self._matches(self.behavior.stall, self._descriptions.get(own.subtask_id, "")):
            raise AgentTimeout(f"{self.agent_id} stalled on {own.subtask_id}")
        new = update_draft(own, peers, weights)
        done = self.behavior.complete_at_round is not None and new.round >= self.behavior.complete_at_round
        return Draft(new.author_id, new.subtask_id, new.round, new.content, new.confidence, done)


def build_vcv(spec: SpecDocument, skills: Sequence[str], resources: Sequence[float], policies: BitSet,
              version: int = 0, dim: int = EMBED_DIM) -> Vcv:
    r = np.asarray(resources, dtype=np.float64)
    if r.shape != (len(RESOURCE_FIELDS),):
        raise InvalidArgument(f"resource vector needs {len(RESOURCE_FIELDS)} entries {RESOURCE_FIELDS}")
    return Vcv(agent_id=spec.agent_id, c=embed_text(spec.capability_text(skills), dim),
               s=BloomFilter.of(skills), r=r, p=policies, e=embed_text(spec.text, dim), v=version)


def staging_topic(job_id: str, subtask_id: str, attempt: int = 1) -> str:
    suffix = "drafts" if attempt == 1 else f"a{attempt}.drafts"
    return topic_for(CLUSTER_CHANNEL, f"{job_id}.{subtask_id}.{suffix}")


class AgentWorker:
    """Reactive endpoint consuming one agent's task topic."""

    def __init__(self, agent: MockAgent, broker: InProcessBroker, policy_log: Optional[PolicyLog] = None):
        self.agent = agent
        self.client = Client(broker, agent.agent_id)
        self.policy_log = policy_log
        self.dedup = Deduplicator()
        self.client.subscribe(topic_for(AGENT_TASKS, agent.agent_id), self.on_message)

    def on_message(self, env: Envelope) -> None:
        msg = decode_message(env.payload)
        if not self.dedup.first(msg["type"], env.correlation_id):
            return
        if msg["type"] == "DECOMPOSE_REQ":
            self._decompose(msg, env.correlation_id)
        elif msg["type"] == "DISPATCH":
            self._dispatch(msg, env.correlation_id)

    def _decompose(self, msg, correlation_id: str) -> None:
        task = TaskSpec.from_dict(msg["task"])
        try:
            subtasks, deps = self.agent.decompose(task)
        except (AgentTimeout, AgentCrash) as exc:
            logger.info("no decomposition from %s: %s", self.agent.agent_id, exc)
            return
        self.client.send(topic_for(JOBS), "DECOMPOSE_PROP", correlation_id=correlation_id,
                         job_id=msg["job_id"], agent_id=self.agent.agent_id,
                         subtasks=list(subtasks), deps=[list(d) for d in deps])

    def _dispatch(self, msg, correlation_id: str) -> None:
        sid, description = msg["subtask_id"], msg["description"]
        context = "\n".join(filter(None, [msg["context"], retrieve_resources(self.agent.tools, description)]))
        try:
            draft = self.agent.generate_draft(sid, description, context)
        except Refused as exc:
            if self.policy_log is not None:
                self.policy_log.record(AGENT_REFUSAL, self.agent.agent_id, f"{msg['job_id']}:{sid}: {exc}")
            return
        except (AgentTimeout, AgentCrash) as exc:
            logger.info("no draft from %s: %s", self.agent.agent_id, exc)
            return
        self.client.send(staging_topic(msg["job_id"], sid, msg["attempt"]), "DRAFT",
                         correlation_id=correlation_id, job_id=msg["job_id"], subtask_id=sid,
                         attempt=msg["attempt"], draft=draft.to_dict())

    def close(self) -> None:
        self.client.close()


class Federation:
    """The registered agents, their workers and the shared broker."""

    def __init__(self, broker: Optional[InProcessBroker] = None, clock: Optional[SimClock] = None,
                 vocabulary: PolicyVocabulary = PolicyVocabulary()):
        self.broker = broker if broker is not None else InProcessBroker()
        self.clock = clock if clock is not None else SimClock()
        self.vocabulary = vocabulary
        self.policy_log = PolicyLog(Client(self.broker, "policy"))
        self.client = Client(self.broker, "registry")
        self.agents: Dict[str, MockAgent] = {}
        self.workers: Dict[str, AgentWorker] = {}
        self.profiles: Dict[str, AgentProfile] = {}
        self.specs: Dict[str, SpecDocument] = {}

    def __len__(self):
        return len(self.agents)

    def register(self, spec: SpecDocument, skills: Sequence[str], resources: Sequence[float],
                 policies: BitSet, agent: MockAgent, reputation: float = 0.5,
                 capacity: int = DEFAULT_CAPACITY) -> AgentProfile:
        if spec.agent_id in self.agents:
            raise Conflict(f"agent {spec.agent_id!r} is already registered")
        if agent.agent_id != spec.agent_id:
            raise InvalidArgument("agent and spec ids differ")
        vcv = build_vcv(spec, skills, resources, policies)
        if agent.token_budget is None:
            agent.token_budget = int(vcv.r[ENERGY])
        profile = AgentProfile(vcv, reputation, capacity)
        self.agents[spec.agent_id] = agent
        self.specs[spec.agent_id] = spec
        self.profiles[spec.agent_id] = profile
        self.workers[spec.agent_id] = AgentWorker(agent, self.broker, self.policy_log)
        self.client.send(topic_for(CAPABILITY_UPDATES), "VCV_UPDATE",
                         correlation_id=f"{vcv.agent_id}:v{vcv.v}", vcv=vcv.to_dict())
        snapshot = VcvDelta("registry", tuple((aid, p.vcv) for aid, p in sorted(self.profiles.items())))
        self.client.send(topic_for(RETAIN), "VCV_DELTA", correlation_id=f"snapshot:{len(self.profiles)}",
                         retained=True, delta=snapshot.to_dict())
        return profile


def register_agent(federation: Federation, spec: SpecDocument, skills: Sequence[str],
                   resources: Sequence[float], policies: BitSet, seed: int = 0,
                   tools: Sequence[ToolStub] = (), behavior: Behavior = Behavior(),
                   reputation: float = 0.5, capacity: int = DEFAULT_CAPACITY) -> AgentProfile:
    agent = MockAgent(spec.agent_id, seed, tools, behavior)
    return federation.register(spec, skills, resources, policies, agent, reputation, capacity)
