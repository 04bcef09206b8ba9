"""Submission screening, compliance events and the audit trail."""
from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

from .capability import POLICY_BITS, BitSet, BloomFilter, bloom_contains, tokenize
from .errors import InvalidArgument
from .transport import POLICY_EVENTS, Client, topic_for

BLOCKED_SUBMISSION = "BLOCKED_SUBMISSION"
AGENT_REFUSAL = "AGENT_REFUSAL"
GATE_FAIL = "GATE_FAIL"
EVENT_KINDS = (BLOCKED_SUBMISSION, AGENT_REFUSAL, GATE_FAIL)


@dataclass(frozen=True)
class PolicyEvent:
    event_id: str
    kind: str
    subject: str
    detail: str
    at: int

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise InvalidArgument(f"unknown policy event kind {self.kind!r}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PolicyEvent":
        return cls(d["event_id"], d["kind"], d["subject"], d["detail"], d["at"])


class PolicyLog:
    """Append-only event log; optionally mirrors each event to the enforcement topic."""

    def __init__(self, client: Optional[Client] = None, prefix: str = "pe"):
        self.client = client
        self.prefix = prefix
        self._events: List[PolicyEvent] = []
        self._lock = threading.Lock()

    def record(self, kind: str, subject: str, detail: str, at: int = 0) -> PolicyEvent:
        with self._lock:
            event = PolicyEvent(f"{self.prefix}{len(self._events) + 1:05d}", kind, subject, detail, at)
            self._events.append(event)
        if self.client is not None:
            self.client.send(topic_for(POLICY_EVENTS), "POLICY_EVENT", correlation_id=event.event_id,
                             event=event.to_dict())
        return event

    @property
    def events(self) -> List[PolicyEvent]:
        return list(self._events)

    def of_kind(self, kind: str) -> List[PolicyEvent]:
        return [e for e in self._events if e.kind == kind]

    def __len__(self):
        return len(self._events)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self._events)


def build_blocklist(terms: Iterable[str]) -> BloomFilter:
    return BloomFilter.of(tok for term in terms for tok in tokenize(term))


@dataclass(frozen=True)
class ScreenResult:
    accepted: bool
    event: Optional[PolicyEvent] = None
    hits: tuple = ()


def screen_submission(task_id: str, description: str, blocklist: BloomFilter,
                      log: Optional[PolicyLog] = None, at: int = 0) -> ScreenResult:
    """Block a submission when any lowercased, punctuation-free token hits the blocklist."""
    hits = tuple(sorted({t for t in tokenize(description) if bloom_contains(blocklist, t)}))
    if not hits:
        return ScreenResult(True)
    event = None
    if log is not None:
        event = log.record(BLOCKED_SUBMISSION, task_id, "blocked terms: " + ", ".join(hits), at)
    return ScreenResult(False, event, hits)


def gate_fail_auditor(log: PolicyLog, job_id: str = "", at: Callable[[], int] = lambda: 0):
    """Routing hook: one GATE_FAIL event per policy-gated (subtask, agent) pair."""
    def audit(subtask, agent) -> None:
        missing = [i for i in subtask.p_s.indices() if i not in agent.vcv.p]
        log.record(GATE_FAIL, agent.agent_id,
                   f"{job_id}:{subtask.subtask_id} missing policy bits {missing}", at())
    return audit


class PolicyVocabulary:
    """Maps human-readable policy labels onto bit positions."""

    def __init__(self, labels: Sequence[str] = (), size: int = POLICY_BITS):
        if len(set(labels)) != len(labels):
            raise InvalidArgument("policy labels must be unique")
        if len(labels) > size:
            raise InvalidArgument(f"{len(labels)} labels do not fit {size} policy bits")
        self.labels = tuple(labels)
        self.size = size
        self._pos = {label: i for i, label in enumerate(self.labels)}

    def bits(self, labels: Iterable[str]) -> BitSet:
        unknown = [lb for lb in labels if lb not in self._pos]
        if unknown:
            raise InvalidArgument(f"unknown policy labels {unknown}")
        return BitSet.from_indices(self.size, (self._pos[lb] for lb in labels))

    def labels_of(self, bits: BitSet) -> List[str]:
        return [self.labels[i] for i in bits.indices() if i < len(self.labels)]
