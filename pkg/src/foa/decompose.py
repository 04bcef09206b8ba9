"""Collaborative task decomposition: candidate selection, proposals, consensus merge, DAG repair."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

import numpy as np

from .capability import EMBED_DIM, POLICY_BITS, RESOURCE_FIELDS, BitSet, cosine, embed_text, is_unit
from .errors import AgentTimeout, EmptyDecomposition, InvalidArgument
from .routing import AgentProfile, SubtaskRequirement, task_compatibility

logger = logging.getLogger(__name__)

Edge = Tuple[str, str]


@dataclass(frozen=True, eq=False)
class TaskSpec:
    task_id: str
    description: str
    c_t: np.ndarray = None
    p_req: BitSet = field(default_factory=lambda: BitSet(POLICY_BITS))
    r_req: np.ndarray = None

    def __post_init__(self):
        if not self.description.strip():
            raise InvalidArgument("task description must be non-empty")
        c_t = embed_text(self.description) if self.c_t is None else np.asarray(self.c_t, dtype=np.float64)
        if not is_unit(c_t):
            raise InvalidArgument("task embedding must be unit-norm")
        object.__setattr__(self, "c_t", c_t)
        r = np.zeros(len(RESOURCE_FIELDS)) if self.r_req is None else np.asarray(self.r_req, dtype=np.float64)
        object.__setattr__(self, "r_req", r)

    def to_dict(self) -> Dict[str, Any]:
        return {"task_id": self.task_id, "description": self.description,
                "p_req": self.p_req.indices(), "p_bits": self.p_req.size, "r_req": self.r_req.tolist()}

    @classmethod
    def from_dict(cls, d) -> "TaskSpec":
        return cls(d["task_id"], d["description"],
                   p_req=BitSet.from_indices(d.get("p_bits", POLICY_BITS), d.get("p_req", [])),
                   r_req=d.get("r_req"))


@dataclass(frozen=True)
class Proposal:
    proposer_id: str
    subtasks: Tuple[Tuple[str, np.ndarray], ...]
    deps: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple((d, np.asarray(e, dtype=np.float64)) for d, e in self.subtasks))
        object.__setattr__(self, "deps", tuple((int(a), int(b)) for a, b in self.deps))
        n = len(self.subtasks)
        for a, b in self.deps:
            if not (0 <= a < n and 0 <= b < n):
                raise InvalidArgument(f"dependency ({a}, {b}) out of range for {n} subtasks")
            if a == b:
                raise InvalidArgument(f"self-dependency on subtask {a}")

    @property
    def descriptions(self) -> List[str]:
        return [d for d, _ in self.subtasks]


class TaskGraph:
    """Subtask graph as merged from proposals; may still contain cycles or dangling edges."""

    def __init__(self, nodes: Dict[str, SubtaskRequirement], edges: Iterable[Edge] = ()):
        self.nodes = dict(nodes)
        self.edges: Set[Edge] = set(edges)

    def predecessors(self, sid: str) -> List[str]:
        return sorted(a for a, b in self.edges if b == sid)

    def successors(self, sid: str) -> List[str]:
        return sorted(b for a, b in self.edges if a == sid)

    def topological_order(self) -> Optional[List[str]]:
        """Kahn's algorithm with smallest-id-first tie break; None when cyclic."""
        indeg = {n: 0 for n in self.nodes}
        succ: Dict[str, List[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            if a in indeg and b in indeg:
                indeg[b] += 1
                succ[a].append(b)
        heap = [n for n, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            n = heapq.heappop(heap)
            order.append(n)
            for m in succ[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    heapq.heappush(heap, m)
        return order if len(order) == len(self.nodes) else None

    def is_acyclic(self) -> bool:
        return self.topological_order() is not None

    def sources(self) -> List[str]:
        targets = {b for _, b in self.edges}
        return sorted(n for n in self.nodes if n not in targets)

    def sinks(self) -> List[str]:
        origins = {a for a, _ in self.edges}
        return sorted(n for n in self.nodes if n not in origins)

    def to_dict(self) -> Dict[str, Any]:
        return {"nodes": {sid: req.description for sid, req in sorted(self.nodes.items())},
                "edges": sorted(list(e) for e in self.edges)}


class TaskDag(TaskGraph):
    """A validated, acyclic :class:`TaskGraph`."""

    def __init__(self, nodes, edges=()):
        super().__init__(nodes, edges)
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise InvalidArgument(f"edge ({a}, {b}) references a missing node")
        self.order = self.topological_order()
        if self.order is None:
            raise InvalidArgument("graph contains a cycle")


class Decomposer(Protocol):
    agent_id: str

    def decompose(self, task: TaskSpec) -> Tuple[List[str], List[Tuple[int, int]]]: ...


def select_candidates(t: TaskSpec, agents: Sequence[AgentProfile], tau: float = 0.3,
                      k_fallback: int = 4) -> List[AgentProfile]:
    if not 0.0 < tau < 1.0:
        raise InvalidArgument("tau must lie in (0, 1)")
    if k_fallback < 1:
        raise InvalidArgument("k_fallback must be positive")
    scored = [(task_compatibility(t.c_t, t.p_req, t.r_req, a.vcv), a) for a in agents]
    qualified = [(alpha, a) for alpha, a in scored if alpha > tau]
    if qualified:
        qualified.sort(key=lambda item: (-item[0], item[1].agent_id))
        return [a for _, a in qualified[:k_fallback]]
    by_similarity = sorted(agents, key=lambda a: (-cosine(t.c_t, a.vcv.c), a.agent_id))
    return list(by_similarity[:k_fallback])


def normalize_proposal(proposer_id: str, subtasks: Sequence[str], deps: Sequence[Sequence[int]],
                       min_sub: int = 2, max_sub: int = 4, dim: int = EMBED_DIM) -> Optional[Proposal]:
    """Clamp a raw proposal to the configured bounds and embed it; None if rejected."""
    subtasks = [s for s in subtasks if isinstance(s, str) and s.strip()]
    if len(subtasks) < min_sub:
        logger.info("proposal from %s rejected: %d subtasks < %d", proposer_id, len(subtasks), min_sub)
        return None
    kept = subtasks[:max_sub]
    n = len(kept)
    clean = sorted({(int(a), int(b)) for a, b in deps if 0 <= int(a) < n and 0 <= int(b) < n and int(a) != int(b)})
    return Proposal(proposer_id, tuple((s, embed_text(s, dim)) for s in kept), tuple(clean))


def collect_proposals(candidates: Sequence[Decomposer], t: TaskSpec, min_sub: int = 2,
                      max_sub: int = 4) -> List[Proposal]:
    proposals = []
    for agent in candidates:
        try:
            subtasks, deps = agent.decompose(t)
        except AgentTimeout:
            logger.warning("decomposition by %s timed out; skipped", agent.agent_id)
            continue
        prop = normalize_proposal(agent.agent_id, subtasks, deps, min_sub, max_sub, len(t.c_t))
        if prop is not None:
            proposals.append(prop)
    return proposals


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def node_ids(count: int) -> List[str]:
    width = max(2, len(str(count)))
    return [f"s{i:0{width}d}" for i in range(1, count + 1)]


def merge_proposals(proposals: Sequence[Proposal], merge_sim: float = 0.5, task: Optional[TaskSpec] = None,
                    team_cap: int = 1) -> TaskGraph:
    """Union all proposed subtasks, merging every pair with cosine >= ``merge_sim`` (transitively)."""
    if not proposals:
        raise EmptyDecomposition("no usable decomposition proposals")
    proposers = [p.proposer_id for p in proposals]
    if len(set(proposers)) != len(proposers):
        raise InvalidArgument("one proposal per proposer expected")
    # keyed by content so that proposal order cannot influence the result
    items = sorted(((desc, p.proposer_id, i, emb) for p in proposals for i, (desc, emb) in enumerate(p.subtasks)),
                   key=lambda it: (it[0], it[1], it[2]))
    if not items:
        raise EmptyDecomposition("proposals contain no subtasks")
    position = {(it[1], it[2]): k for k, it in enumerate(items)}
    uf = _UnionFind(len(items))
    embs = np.stack([it[3] for it in items])
    sims = embs @ embs.T
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            if sims[a, b] >= merge_sim:
                uf.union(a, b)
    groups: Dict[int, List[int]] = {}
    for k in range(len(items)):
        groups.setdefault(uf.find(k), []).append(k)
    ordered = sorted(groups.values(), key=lambda members: min(members))
    ids = node_ids(len(ordered))
    group_of: Dict[int, str] = {}
    nodes: Dict[str, SubtaskRequirement] = {}
    p_req = task.p_req if task is not None else BitSet(POLICY_BITS)
    r_req = task.r_req if task is not None else np.zeros(len(RESOURCE_FIELDS))
    for sid, members in zip(ids, ordered):
        for k in members:
            group_of[k] = sid
        canonical = items[members[0]][0]
        mean = embs[members].sum(axis=0)
        norm = np.linalg.norm(mean)
        emb = mean / norm if norm > 0 else embs[members[0]]
        nodes[sid] = SubtaskRequirement(sid, emb, p_req, r_req, emb, team_cap, canonical)
    edges = set()
    for p in proposals:
        for a, b in p.deps:
            u = group_of[position[(p.proposer_id, a)]]
            v = group_of[position[(p.proposer_id, b)]]
            if u != v:
                edges.add((u, v))
    return TaskGraph(nodes, edges)


def strongly_connected_components(nodes: Iterable[str], edges: Iterable[Edge]) -> List[List[str]]:
    """Iterative Tarjan; components returned with sorted members, ordered by smallest member."""
    succ: Dict[str, List[str]] = {n: [] for n in nodes}
    for a, b in edges:
        succ[a].append(b)
    for n in succ:
        succ[n].sort()
    index: Dict[str, int] = {}
    low: Dict[str, int] = {}
    on_stack: Set[str] = set()
    stack: List[str] = []
    comps: List[List[str]] = []
    counter = 0
    for root in sorted(succ):
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            recurse = False
            while i < len(succ[v]):
                w = succ[v][i]
                i += 1
                if w not in index:
                    work.append((v, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    comps.sort(key=lambda c: c[0])
    return comps


def validate_dag(g: TaskGraph) -> TaskDag:
    """Drop dangling edges and self-loops, then break cycles deterministically.

    While any strongly connected component has more than one node, the
    lexicographically greatest ``(from, to)`` edge inside each such component is
    removed.  The number of removed cycle edges is kept on ``removed_edges``.
    """
    edges = {(a, b) for a, b in g.edges if a in g.nodes and b in g.nodes and a != b}
    removed = 0
    while True:
        comps = [set(c) for c in strongly_connected_components(g.nodes, edges) if len(c) > 1]
        if not comps:
            break
        for comp in comps:
            inside = [e for e in edges if e[0] in comp and e[1] in comp]
            edges.discard(max(inside))
            removed += 1
    dag = TaskDag(g.nodes, edges)
    dag.removed_edges = removed
    return dag
