"""The coordinating agent: job state machine, supervision, fallback, synthesis and reputation."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .agents import Federation, staging_topic
from .capability import Vcv, VcvDelta, VcvStore
from .clock import SimClock
from .cluster import ClusterWeights, form_clusters, hier_cluster, similarity_matrix
from .config import FederationConfig
from .consensus import ConsensusResult, Draft, run_rounds
from .decompose import TaskDag, TaskSpec, merge_proposals, normalize_proposal, select_candidates, validate_dag
from .errors import ConsensusFailed, EmptyDecomposition, FoaError, Infeasible, InvalidArgument
from .index import ShardedIndex
from .policy import build_blocklist, gate_fail_auditor, screen_submission
from .routing import (AgentProfile, AssignmentMatrix, SubtaskRequirement, exhaustive_assignment,
                      score_matrix, solve_assignment)
from .transport import (AGENT_TASKS, CAPABILITY_UPDATES, CLUSTER_CHANNEL, JOBS, META, RESULT, RETAIN,
                        Client, Deduplicator, Envelope, decode_message, topic_for, topic_kind)

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    DECOMPOSING = "Decomposing"
    ASSIGNING = "Assigning"
    EXECUTING = "Executing"
    SYNTHESIZING = "Synthesizing"
    DONE = "Done"
    FAILED = "Failed"


class NodeStatus(str, Enum):
    PENDING = "Pending"
    READY = "Ready"
    RUNNING = "Running"
    COMPLETE = "Complete"
    TIMED_OUT = "TimedOut"


class SynthMode(str, Enum):
    CONCAT = "concat"
    REBASE = "rebase"
    MERGE = "merge"


class JobFailed(FoaError):
    pass


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthCounter:
    ops: int = 0
    calls: int = 0


def _line_key(line: str) -> str:
    head, sep, _ = line.partition(":")
    return head.strip().lower() if sep else line.strip().lower()


def synth(predecessors: Sequence[Tuple[str, str]], node_answer: str, mode: SynthMode = SynthMode.CONCAT,
          node_id: str = "", counter: Optional[SynthCounter] = None) -> str:
    """Combine predecessor solutions (``(subtask_id, text)`` in id order) with a node's answer.

    Two lines conflict when they share a key (the text before the first colon)
    but differ.  Rebase lets the node's lines win such conflicts; Merge keeps
    both and marks the later one.
    """
    mode = SynthMode(mode)
    if counter is not None:
        counter.calls += 1
        counter.ops += 1 + len(predecessors)
    if not predecessors:
        return node_answer
    if mode is SynthMode.CONCAT:
        blocks = [f"=== {sid} ===\n{text}" for sid, text in predecessors]
        blocks.append(f"=== {node_id or 'node'} ===\n{node_answer}")
        return "\n".join(blocks)
    node_lines = [ln for ln in node_answer.splitlines() if ln.strip()]
    if mode is SynthMode.REBASE:
        node_keys = {_line_key(ln) for ln in node_lines}
        out, seen = [], set(node_lines)
        for _, text in predecessors:
            for ln in text.splitlines():
                if ln.strip() and ln not in seen and _line_key(ln) not in node_keys:
                    out.append(ln)
                    seen.add(ln)
        return "\n".join(out + node_lines)
    out, seen, owner = [], set(), {}
    for sid, text in [*predecessors, (node_id or "node", node_answer)]:
        for ln in text.splitlines():
            if not ln.strip() or ln in seen:
                continue
            seen.add(ln)
            key = _line_key(ln)
            if key in owner and owner[key][1] != ln:
                out.append(f"{ln}  [conflict: {sid} vs {owner[key][0]}]")
            else:
                owner.setdefault(key, (sid, ln))
                out.append(ln)
    return "\n".join(out)


def synthesize_dag(dag: TaskDag, answers: Dict[str, str], mode: SynthMode = SynthMode.CONCAT,
                   counter: Optional[SynthCounter] = None) -> Tuple[str, Dict[str, str]]:
    """Topological synthesis; several sinks are merged in ascending id order."""
    solutions: Dict[str, str] = {}
    for sid in dag.order:
        preds = [(p, solutions[p]) for p in sorted(dag.predecessors(sid))]
        solutions[sid] = synth(preds, answers[sid], mode, sid, counter)
    sinks = sorted(dag.sinks())
    if not sinks:
        return "", solutions
    if len(sinks) == 1:
        return solutions[sinks[0]], solutions
    last = sinks[-1]
    final = synth([(s, solutions[s]) for s in sinks[:-1]], solutions[last], mode, last, counter)
    return final, solutions


def update_reputation(profile: AgentProfile, outcome_score: float, beta: float = 0.2) -> AgentProfile:
    if not 0.0 <= outcome_score <= 1.0:
        raise InvalidArgument(f"outcome score {outcome_score} outside [0, 1]")
    rep = min(1.0, max(0.0, (1.0 - beta) * profile.reputation + beta * outcome_score))
    return AgentProfile(profile.vcv, rep, profile.capacity)


# ---------------------------------------------------------------- state

@dataclass
class JobState:
    job_id: str
    task: TaskSpec
    started_at: float = 0.0
    phase: Phase = Phase.DECOMPOSING
    dag: Optional[TaskDag] = None
    assignment: Optional[AssignmentMatrix] = None
    node_status: Dict[str, NodeStatus] = field(default_factory=dict)
    results: Dict[str, ConsensusResult] = field(default_factory=dict)
    proposals: Dict[str, dict] = field(default_factory=dict)
    staged: Dict[Tuple[str, int], Dict[str, Draft]] = field(default_factory=dict)
    drafts: Dict[str, Dict[tuple, Draft]] = field(default_factory=dict)
    assignees: Dict[str, Set[str]] = field(default_factory=dict)
    expected: Dict[str, Set[str]] = field(default_factory=dict)
    closed: Dict[str, Set[str]] = field(default_factory=dict)
    cluster_results: Dict[str, Dict[str, ConsensusResult]] = field(default_factory=dict)
    timeouts: Counter = field(default_factory=Counter)
    fallbacks: List[dict] = field(default_factory=list)
    rounds: Dict[str, int] = field(default_factory=dict)
    clusters: Dict[str, List[List[str]]] = field(default_factory=dict)
    phase_ms: Dict[str, float] = field(default_factory=dict)
    candidates: List[str] = field(default_factory=list)
    objective: Optional[float] = None
    oracle_objective: Optional[float] = None
    dedup: Deduplicator = field(default_factory=Deduplicator)

    def ready(self, sid: str) -> bool:
        return all(self.node_status[p] == NodeStatus.COMPLETE for p in self.dag.predecessors(sid))


@dataclass
class JobReport:
    job_id: str
    status: str
    answer: str
    diagnostic: str = ""
    phase_ms: Dict[str, float] = field(default_factory=dict)
    message_counts: Dict[str, int] = field(default_factory=dict)
    deliveries: int = 0
    rounds: Dict[str, int] = field(default_factory=dict)
    clusters: Dict[str, List[List[str]]] = field(default_factory=dict)
    teams: Dict[str, List[str]] = field(default_factory=dict)
    objective: Optional[float] = None
    oracle_objective: Optional[float] = None
    fallbacks: List[dict] = field(default_factory=list)
    synth_ops: int = 0
    nodes: Dict[str, str] = field(default_factory=dict)
    edges: List[List[str]] = field(default_factory=list)
    removed_edges: int = 0
    subtask_answers: Dict[str, str] = field(default_factory=dict)
    candidates: List[str] = field(default_factory=list)
    policy_events: List[dict] = field(default_factory=list)
    reputations: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def counters(self) -> dict:
        """Everything except the raw delivery count."""
        d = self.to_dict()
        d.pop("deliveries")
        return d


# ---------------------------------------------------------------- orchestrator

Grader = Callable[[str, ConsensusResult], float]


def confidence_grader(subtask_id: str, result: ConsensusResult) -> float:
    return result.confidence


class Orchestrator:
    def __init__(self, federation: Federation, config: FederationConfig = FederationConfig(),
                 blocklist_terms: Sequence[str] = (), grader: Grader = confidence_grader,
                 orchestrator_id: str = "agent-0"):
        self.federation = federation
        self.config = config
        self.broker = federation.broker
        self.clock: SimClock = federation.clock
        self.grader = grader
        self.blocklist = build_blocklist(blocklist_terms)
        self.store = VcvStore(orchestrator_id)
        self.index = ShardedIndex()
        self.reputations: Dict[str, float] = {}
        self.jobs: Dict[str, JobState] = {}
        self.client = Client(self.broker, orchestrator_id)
        self.submitter = Client(self.broker, "submitter")
        self.client.subscribe(topic_for(CAPABILITY_UPDATES), self._on_capability)
        self.client.subscribe(topic_for(RETAIN), self._on_capability)
        self.client.subscribe(topic_for(JOBS), self._on_jobs)
        self.client.subscribe("foa/clusters/+/channel", self._on_channel)

    # -- inbound traffic ---------------------------------------------------

    def _ingest(self, vcv: Vcv) -> None:
        if self.store.put(vcv):
            self.index.insert_vcv(vcv)

    def _on_capability(self, env: Envelope) -> None:
        msg = decode_message(env.payload)
        if msg["type"] == "VCV_UPDATE":
            self._ingest(Vcv.from_dict(msg["vcv"]))
        elif msg["type"] == "VCV_DELTA":
            for _, vcv in VcvDelta.from_dict(msg["delta"]).entries:
                self._ingest(vcv)

    def _on_jobs(self, env: Envelope) -> None:
        msg = decode_message(env.payload)
        if msg["type"] != "DECOMPOSE_PROP":
            return
        job = self.jobs.get(msg["job_id"])
        if job is None or not job.dedup.first("DECOMPOSE_PROP", msg["agent_id"]):
            return
        job.proposals[msg["agent_id"]] = msg

    def _on_channel(self, env: Envelope) -> None:
        msg = decode_message(env.payload)
        job = self.jobs.get(msg.get("job_id", ""))
        if job is None:
            return
        if msg["type"] == "DRAFT":
            draft = Draft.from_dict(msg["draft"])
            job.drafts.setdefault(draft.subtask_id, {})[(env.topic, draft.author_id, draft.round)] = draft
            if "attempt" in msg and env.topic == staging_topic(job.job_id, msg["subtask_id"], msg["attempt"]):
                job.staged.setdefault((msg["subtask_id"], msg["attempt"]), {}).setdefault(draft.author_id, draft)
        elif msg["type"] == "TASK_COMPLETE":
            self.on_task_complete(job, env)

    # -- profiles ------------------------------------------------------------

    def profile(self, agent_id: str) -> AgentProfile:
        registered = self.federation.profiles.get(agent_id)
        capacity = registered.capacity if registered else self.config.agent_capacity
        if agent_id not in self.reputations:
            self.reputations[agent_id] = registered.reputation if registered else 0.5
        return AgentProfile(self.store.get(agent_id), self.reputations[agent_id], capacity)

    def profiles(self, exclude: Set[str] = frozenset()) -> List[AgentProfile]:
        return [self.profile(a) for a in sorted(self.store.snapshot()) if a not in exclude]

    def _weights(self) -> Dict[str, float]:
        return {a: self.profile(a).reputation for a in sorted(self.store.snapshot())}

    # -- phase helpers ---------------------------------------------------------

    def _charge(self, agent_ids: Sequence[str], responded: Set[str]) -> float:
        cost = 0.0
        for aid in agent_ids:
            if aid in responded:
                cost = max(cost, self.federation.agents[aid].call_cost_ms())
            else:
                cost = max(cost, self.config.call_timeout_ms)
        return self.clock.advance(cost)

    def _decompose(self, job: JobState) -> TaskDag:
        cfg = self.config
        if len(self.index) == 0:
            raise EmptyDecomposition("the federation has no registered agents")
        pool = [aid for aid, _ in self.index.search(job.task.c_t, min(len(self.index), cfg.retrieval_pool))]
        candidates = select_candidates(job.task, [self.profile(a) for a in pool],
                                       cfg.decomp_threshold, cfg.decomp_max_agents)
        job.candidates = sorted(a.agent_id for a in candidates)
        for aid in job.candidates:
            self.client.send(topic_for(AGENT_TASKS, aid), "DECOMPOSE_REQ",
                             correlation_id=f"{job.job_id}:decompose:{aid}",
                             job_id=job.job_id, task=job.task.to_dict())
        self._charge(job.candidates, set(job.proposals))
        proposals = []
        for aid in sorted(job.proposals):
            msg = job.proposals[aid]
            prop = normalize_proposal(aid, msg["subtasks"], msg["deps"], cfg.subtasks_min, cfg.subtasks_max,
                                      len(job.task.c_t))
            if prop is not None:
                proposals.append(prop)
        graph = merge_proposals(proposals, cfg.merge_sim, job.task, cfg.team_size)
        return validate_dag(graph)

    def _route(self, job: JobState, subtasks: Sequence[SubtaskRequirement],
               exclude: Set[str] = frozenset()) -> AssignmentMatrix:
        agents = self.profiles(exclude)
        if not agents:
            raise Infeasible([s.subtask_id for s in subtasks])
        hook = None
        if self.config.audit_gate_fail:
            hook = gate_fail_auditor(self.federation.policy_log, job.job_id, lambda: int(self.clock.now()))
        scores = score_matrix(subtasks, agents, self.config.resource_lambda, hook)
        reps = [a.reputation for a in agents]
        caps = [s.r_i_cap for s in subtasks]
        capacities = [a.capacity for a in agents]
        sids = [s.subtask_id for s in subtasks]
        aids = [a.agent_id for a in agents]
        x = solve_assignment(scores, reps, caps, capacities, sids, aids)
        if not exclude:
            utility = scores * np.asarray(reps)[None, :]
            job.objective = x.objective(utility)
            if len(sids) * len(aids) <= self.config.oracle_limit:
                job.oracle_objective, _ = exhaustive_assignment(scores, reps, caps, capacities)
        return x

    # -- execution -----------------------------------------------------------

    def _dispatch(self, job: JobState, sid: str, team: Sequence[str], attempt: int) -> None:
        cfg = self.config
        job.node_status[sid] = NodeStatus.RUNNING
        job.assignees.setdefault(sid, set()).update(team)
        node = job.dag.nodes[sid]
        context = "\n".join(f"{p}: {job.results[p].answer}" for p in sorted(job.dag.predecessors(sid)))
        for aid in sorted(team):
            self.client.send(topic_for(AGENT_TASKS, aid), "DISPATCH",
                             correlation_id=f"{job.job_id}:{sid}:a{attempt}:{aid}", job_id=job.job_id,
                             subtask_id=sid, description=node.description, context=context, attempt=attempt)
        staged = job.staged.get((sid, attempt), {})
        self._charge(sorted(team), set(staged))
        if not staged:
            logger.info("%s/%s attempt %d produced no drafts", job.job_id, sid, attempt)
            self.timeout_fallback(job, sid)
            return
        authors = sorted(staged)
        vcvs = [self.store.get(a) for a in authors]
        S = similarity_matrix(vcvs, {a: staged[a].content for a in authors}, ClusterWeights(*cfg.cluster_weights))
        partition = hier_cluster(S, cfg.cluster_sim_threshold, cfg.cluster_max_size, authors)
        clusters = form_clusters(job.job_id, sid, partition, attempt)
        job.clusters[f"{sid}#{attempt}"] = [list(c.members) for c in clusters]
        job.expected[sid] = {c.cluster_id for c in clusters}
        job.closed[sid] = set()
        job.cluster_results[sid] = {}
        for c in clusters:
            self.client.send(topic_for(META), "TASK_ASSIGN", correlation_id=c.cluster_id, job_id=job.job_id,
                             subtask_id=sid, cluster_id=c.cluster_id, members=list(c.members), k_max=cfg.rounds)
        start = self.clock.now()
        longest = 0.0
        weights = self._weights()
        for c in clusters:
            own_clock = SimClock(start)
            try:
                result = run_rounds(c, {m: self.federation.agents[m] for m in c.members},
                                    {m: staged[m] for m in c.members}, weights, cfg.rounds, cfg.timeout_ms,
                                    self.broker, own_clock, job.job_id, cfg.early_exit, cfg.majority_stop)
                job.rounds[c.cluster_id] = result.rounds_used
                if result.timed_out:
                    job.closed[sid].add(c.cluster_id)
            except ConsensusFailed as exc:
                logger.warning("%s", exc)
                job.rounds[c.cluster_id] = 0
                job.closed[sid].add(c.cluster_id)
            longest = max(longest, own_clock.now() - start)
        self.clock.advance(longest)
        self._maybe_complete(job, sid)
        if job.node_status[sid] != NodeStatus.COMPLETE:
            self.timeout_fallback(job, sid)

    def _maybe_complete(self, job: JobState, sid: str) -> None:
        if job.node_status[sid] != NodeStatus.RUNNING:
            return
        done = job.cluster_results.get(sid, {})
        if not job.expected.get(sid) or job.expected[sid] - job.closed[sid] - set(done):
            return
        if not done:
            return
        best = min(done.values(), key=lambda r: (-r.confidence, r.cluster_id))
        self._complete(job, sid, best)

    def _complete(self, job: JobState, sid: str, result: ConsensusResult) -> None:
        job.node_status[sid] = NodeStatus.COMPLETE
        job.results[sid] = result
        for succ in job.dag.successors(sid):
            if job.node_status[succ] == NodeStatus.PENDING and job.ready(succ):
                job.node_status[succ] = NodeStatus.READY

    def on_task_complete(self, job: JobState, env: Envelope) -> JobState:
        msg = decode_message(env.payload)
        if not job.dedup.first("TASK_COMPLETE", env.correlation_id):
            return job
        sid = msg["subtask_id"]
        if sid not in job.node_status:
            logger.error("TASK_COMPLETE for unknown subtask %s of %s", sid, job.job_id)
            return job
        if job.node_status[sid] != NodeStatus.RUNNING:
            return job
        job.cluster_results.setdefault(sid, {})[msg["cluster_id"]] = ConsensusResult.from_dict(msg["result"])
        self._maybe_complete(job, sid)
        return job

    def _best_draft(self, job: JobState, sid: str) -> Optional[Draft]:
        drafts = list(job.drafts.get(sid, {}).values())
        if not drafts:
            return None
        return min(drafts, key=lambda d: (-self.profile(d.author_id).reputation * d.confidence,
                                          d.author_id, -d.round, d.content))

    def timeout_fallback(self, job: JobState, sid: str) -> JobState:
        """Reassign on the first timeout, accept the best draft on the next, else fail the job."""
        job.timeouts[sid] += 1
        if job.timeouts[sid] == 1:
            try:
                x = self._route(job, [job.dag.nodes[sid]], exclude=job.assignees.get(sid, set()))
                team = x.team(sid)
            except Infeasible:
                team = []
            if team:
                job.fallbacks.append({"subtask_id": sid, "action": "reassign", "team": team})
                self._dispatch(job, sid, team, attempt=2)
                return job
        best = self._best_draft(job, sid)
        if best is None:
            job.node_status[sid] = NodeStatus.TIMED_OUT
            job.fallbacks.append({"subtask_id": sid, "action": "failed"})
            raise JobFailed(f"subtask {sid} timed out with no drafts to fall back on")
        job.fallbacks.append({"subtask_id": sid, "action": "accept_best", "author_id": best.author_id})
        self._complete(job, sid, ConsensusResult(sid, best.content, best.confidence, 0, (best.author_id,),
                                                 "", best.author_id, True))
        return job

    # -- entry point ---------------------------------------------------------

    def run_job(self, task: TaskSpec, job_id: Optional[str] = None) -> JobReport:
        job_id = job_id or task.task_id
        if job_id in self.jobs:
            raise InvalidArgument(f"job {job_id!r} already ran")
        cfg = self.config
        job = JobState(job_id, task, started_at=self.clock.now())
        self.jobs[job_id] = job
        first_pub = len(self.broker.published)
        first_delivery = self.broker.delivery_count()
        first_event = len(self.federation.policy_log)
        diagnostic, answer, synth_counter = "", "", SynthCounter()
        removed = 0

        def timed(name, fn):
            t0 = self.clock.now()
            try:
                return fn()
            finally:
                job.phase_ms[name] = self.clock.now() - t0

        try:
            screen = screen_submission(job_id, task.description, self.blocklist, self.federation.policy_log,
                                       int(self.clock.now()))
            if not screen.accepted:
                raise JobFailed(f"submission blocked by policy: {', '.join(screen.hits)}")
            self.submitter.send(topic_for(JOBS), "JOB_SUBMIT", correlation_id=job_id, job_id=job_id,
                                task=task.to_dict())
            job.phase = Phase.DECOMPOSING
            job.dag = timed("decomposition", lambda: self._decompose(job))
            removed = job.dag.removed_edges
            job.node_status = {sid: NodeStatus.PENDING for sid in job.dag.nodes}
            job.phase = Phase.ASSIGNING
            subtasks = [job.dag.nodes[sid] for sid in sorted(job.dag.nodes)]
            job.assignment = timed("assignment", lambda: self._route(job, subtasks))
            job.phase = Phase.EXECUTING
            for sid in job.dag.nodes:
                if job.ready(sid):
                    job.node_status[sid] = NodeStatus.READY

            def execute():
                while True:
                    ready = sorted(s for s, st in job.node_status.items() if st == NodeStatus.READY)
                    if not ready:
                        break
                    for sid in ready:
                        self._dispatch(job, sid, job.assignment.team(sid), attempt=1)

            timed("execution", execute)
            unresolved = sorted(s for s, st in job.node_status.items() if st != NodeStatus.COMPLETE)
            if unresolved:
                raise JobFailed(f"subtasks never completed: {unresolved}")
            job.phase = Phase.SYNTHESIZING
            answers = {sid: r.answer for sid, r in job.results.items()}
            answer, _ = timed("synthesis", lambda: synthesize_dag(job.dag, answers, SynthMode(cfg.synth_mode),
                                                                  synth_counter))
            self._update_reputations(job)
            job.phase = Phase.DONE
        except (JobFailed, EmptyDecomposition, Infeasible) as exc:
            job.phase = Phase.FAILED
            diagnostic = f"{type(exc).__name__}: {exc}"
            logger.warning("job %s failed: %s", job_id, diagnostic)
        self.client.send(topic_for(RESULT), "RESULT", correlation_id=job_id, retained=True,
                         job_id=job_id, status=job.phase.value, answer=answer, diagnostic=diagnostic)
        published = self.broker.published[first_pub:]
        counts = Counter(topic_kind(e.topic) for e in published)
        return JobReport(
            job_id=job_id, status=job.phase.value, answer=answer, diagnostic=diagnostic,
            phase_ms=dict(job.phase_ms), message_counts=dict(sorted(counts.items())),
            deliveries=self.broker.delivery_count() - first_delivery,
            rounds=dict(sorted(job.rounds.items())), clusters=dict(sorted(job.clusters.items())),
            teams=job.assignment.teams() if job.assignment is not None else {},
            objective=job.objective, oracle_objective=job.oracle_objective,
            fallbacks=list(job.fallbacks), synth_ops=synth_counter.ops,
            nodes={s: n.description for s, n in sorted(job.dag.nodes.items())} if job.dag else {},
            edges=sorted([list(e) for e in job.dag.edges]) if job.dag else [],
            removed_edges=removed,
            subtask_answers={s: r.answer for s, r in sorted(job.results.items())},
            candidates=list(job.candidates),
            policy_events=[e.to_dict() for e in self.federation.policy_log.events[first_event:]],
            reputations={a: round(r, 12) for a, r in sorted(self.reputations.items())},
        )

    def _update_reputations(self, job: JobState) -> None:
        scores: Dict[str, List[float]] = {}
        for sid in sorted(job.results):
            result = job.results[sid]
            grade = self.grader(sid, result)
            for aid in result.contributors:
                scores.setdefault(aid, []).append(grade)
        for aid, grades in sorted(scores.items()):
            updated = update_reputation(self.profile(aid), sum(grades) / len(grades), self.config.reputation_beta)
            self.reputations[aid] = updated.reputation


