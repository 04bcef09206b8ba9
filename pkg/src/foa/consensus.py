"""k-round intra-cluster refinement over the cluster channel."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .clock import SimClock
from .cluster import Cluster
from .errors import AgentCrash, AgentTimeout, ConsensusFailed, InvalidArgument, ProtocolError
from .transport import Client, Envelope, InProcessBroker, decode_message

logger = logging.getLogger(__name__)

ADOPT_MARGIN = 0.05
NUDGE = 0.5
DEFAULT_ROUNDS = 3
DEFAULT_TIMEOUT_MS = 300_000


@dataclass(frozen=True)
class Draft:
    author_id: str
    subtask_id: str
    round: int
    content: str
    confidence: float
    complete_vote: bool = False

    def __post_init__(self):
        if self.round < 0:
            raise InvalidArgument("draft round must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgument(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Draft":
        return cls(**{k: d[k] for k in ("author_id", "subtask_id", "round", "content", "confidence", "complete_vote")})


@dataclass(frozen=True)
class ConsensusResult:
    subtask_id: str
    answer: str
    confidence: float
    rounds_used: int
    contributors: Tuple[str, ...]
    cluster_id: str = ""
    representative: str = ""
    timed_out: bool = False
    drafts: Tuple[Draft, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "contributors", tuple(self.contributors))
        if not self.contributors:
            raise InvalidArgument("a consensus result needs at least one contributor")

    def to_dict(self) -> Dict[str, Any]:
        return {"subtask_id": self.subtask_id, "answer": self.answer, "confidence": self.confidence,
                "rounds_used": self.rounds_used, "contributors": list(self.contributors),
                "cluster_id": self.cluster_id, "representative": self.representative,
                "timed_out": self.timed_out}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ConsensusResult":
        return cls(d["subtask_id"], d["answer"], d["confidence"], d["rounds_used"], tuple(d["contributors"]),
                   d.get("cluster_id", ""), d.get("representative", ""), d.get("timed_out", False))


def _weighted(d: Draft, weights: Mapping[str, float]) -> float:
    return weights.get(d.author_id, 1.0) * d.confidence


def update_draft(own: Draft, peers: Sequence[Draft], weights: Mapping[str, float],
                 margin: float = ADOPT_MARGIN, nudge: float = NUDGE) -> Draft:
    """Reference UPDATE: adopt a clearly better peer draft, otherwise drift toward the weighted mean."""
    for p in peers:
        if p.subtask_id != own.subtask_id or p.round != own.round:
            raise ProtocolError(f"peer draft {p.author_id}@{p.round} does not match {own.author_id}@{own.round}")
    if not peers:
        return replace(own, round=own.round + 1)
    best = min(peers, key=lambda p: (-_weighted(p, weights), p.author_id))
    if _weighted(best, weights) > _weighted(own, weights) + margin:
        return replace(own, round=own.round + 1, content=best.content, confidence=best.confidence)
    everyone = [own, *peers]
    total = sum(weights.get(d.author_id, 1.0) for d in everyone)
    if total > 0:
        mean = sum(_weighted(d, weights) for d in everyone) / total
    else:
        mean = sum(d.confidence for d in everyone) / len(everyone)
    conf = min(1.0, max(0.0, own.confidence + nudge * (mean - own.confidence)))
    return replace(own, round=own.round + 1, confidence=conf)


def select_representative(drafts: Sequence[Draft], weights: Mapping[str, float]) -> Draft:
    if not drafts:
        raise InvalidArgument("no drafts to choose from")
    ranked = sorted(drafts, key=lambda d: (-_weighted(d, weights), d.author_id))
    content, votes = Counter(d.content for d in drafts).most_common(1)[0]
    if votes * 2 > len(drafts):
        return next(d for d in ranked if d.content == content)
    return ranked[0]


class ClusterMember(Protocol):
    agent_id: str

    def refine(self, own: Draft, peers: Sequence[Draft], weights: Mapping[str, float]) -> Draft: ...

    def call_cost_ms(self) -> float: ...


def run_rounds(cluster: Cluster, members: Mapping[str, ClusterMember], initial: Mapping[str, Draft],
               weights: Mapping[str, float], k_max: int = DEFAULT_ROUNDS,
               timeout_ms: float = DEFAULT_TIMEOUT_MS, broker: Optional[InProcessBroker] = None,
               clock: Optional[SimClock] = None, job_id: str = "", early_exit: bool = True,
               majority_stop: bool = False) -> ConsensusResult:
    """Barrier-synchronized draft exchange on the cluster channel.

    Each round every live member publishes its current draft, receives its
    peers' drafts and produces an update.  A member whose update times out
    holds the barrier for the per-round slice and keeps its stale draft; a
    crashed member is dropped.  When the cluster deadline passes the partial
    result comes back with ``timed_out`` set and no TASK_COMPLETE is sent.
    """
    if k_max < 1:
        raise InvalidArgument("k_max must be at least 1")
    ids = list(cluster.members)
    absent = [m for m in ids if m not in members or m not in initial]
    if absent:
        raise InvalidArgument(f"cluster members without agent or initial draft: {absent}")
    broker = broker if broker is not None else InProcessBroker()
    clock = clock if clock is not None else SimClock()
    channel = cluster.channel_topic
    start = clock.now()
    round_slice = timeout_ms / k_max

    inbox: Dict[str, Dict[Tuple[str, int], Draft]] = {m: {} for m in ids}
    clients: Dict[str, Client] = {}

    def receiver(member_id):
        def on_message(env: Envelope) -> None:
            msg = decode_message(env.payload)
            if msg["type"] != "DRAFT":
                return
            d = Draft.from_dict(msg["draft"])
            inbox[member_id].setdefault((d.author_id, d.round), d)
        return on_message

    for m in ids:
        clients[m] = Client(broker, m)
        clients[m].subscribe(channel, receiver(m), no_local=True)

    current = {m: initial[m] for m in ids}
    seen: List[Draft] = list(current.values())
    live = list(ids)
    rounds_used = 0
    timed_out = False
    try:
        for r in range(1, k_max + 1):
            for m in live:
                d = current[m]
                clients[m].send(channel, "DRAFT", correlation_id=f"{cluster.cluster_id}:{m}:{d.round}",
                                job_id=job_id, subtask_id=cluster.subtask_id, draft=d.to_dict())
            round_cost = 0.0
            dropped = []
            updated = {}
            for m in live:
                own = current[m]
                peers = [inbox[m][(p, own.round)] for p in live if p != m and (p, own.round) in inbox[m]]
                try:
                    new = members[m].refine(own, peers, weights)
                    round_cost = max(round_cost, members[m].call_cost_ms())
                except AgentTimeout:
                    logger.info("member %s of %s timed out in round %d", m, cluster.cluster_id, r)
                    new = replace(own, round=own.round + 1, complete_vote=False)
                    round_cost = round_slice
                except AgentCrash:
                    logger.warning("member %s of %s crashed in round %d; dropped", m, cluster.cluster_id, r)
                    dropped.append(m)
                    continue
                updated[m] = new
                seen.append(new)
            live = [m for m in live if m not in dropped]
            if not live:
                raise ConsensusFailed(f"every member of {cluster.cluster_id} failed")
            current.update(updated)
            clock.advance(min(round_cost, round_slice))
            rounds_used = r
            if clock.now() - start >= timeout_ms:
                timed_out = True
                break
            votes = sum(current[m].complete_vote for m in live)
            if early_exit and (votes == len(live) or (majority_stop and votes * 2 > len(live))):
                break
        finals = [current[m] for m in live]
        rep = select_representative(finals, weights)
        result = ConsensusResult(cluster.subtask_id, rep.content, rep.confidence, rounds_used, tuple(live),
                                 cluster.cluster_id, rep.author_id, timed_out, tuple(seen))
        if not timed_out:
            clients[live[0]].send(channel, "TASK_COMPLETE", correlation_id=f"{cluster.cluster_id}:complete",
                                  job_id=job_id, subtask_id=cluster.subtask_id,
                                  cluster_id=cluster.cluster_id, result=result.to_dict())
        return result
    finally:
        for c in clients.values():
            c.close()
