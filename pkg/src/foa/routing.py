"""Agent/subtask compatibility scoring and the team assignment optimizer."""
from __future__ import annotations

import functools
import math
from collections import deque
from itertools import combinations
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .capability import BitSet, Vcv, cosine, is_unit
from .errors import Infeasible, InvalidArgument

DEFAULT_CAPACITY = 2
RESOURCE_LAMBDA = 1.0


@dataclass(frozen=True, eq=False)
class SubtaskRequirement:
    subtask_id: str
    c_s: np.ndarray
    p_s: BitSet
    r_s: np.ndarray
    e_s: np.ndarray
    r_i_cap: int = 1
    description: str = ""

    def __post_init__(self):
        for name in ("c_s", "e_s"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if not is_unit(vec):
                raise InvalidArgument(f"{name} of {self.subtask_id} must be unit-norm")
            object.__setattr__(self, name, vec)
        object.__setattr__(self, "r_s", np.asarray(self.r_s, dtype=np.float64))
        if self.r_i_cap < 1:
            raise InvalidArgument("team size cap must be at least 1")


@dataclass(frozen=True)
class AgentProfile:
    vcv: Vcv
    reputation: float = 0.5
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        if not 0.0 <= self.reputation <= 1.0:
            raise InvalidArgument(f"reputation {self.reputation} outside [0, 1]")
        if self.capacity < 0:
            raise InvalidArgument("capacity must be non-negative")

    @property
    def agent_id(self) -> str:
        return self.vcv.agent_id

    def with_vcv(self, vcv: Vcv) -> "AgentProfile":
        return replace(self, vcv=vcv)


def resource_penalty(r_s, r_a, lam: float = RESOURCE_LAMBDA) -> float:
    """exp(-lam * ||max(0, r_s - r_a)||); surplus capacity is never penalized."""
    r_s = np.asarray(r_s, dtype=np.float64)
    r_a = np.asarray(r_a, dtype=np.float64)
    if r_s.shape != r_a.shape:
        raise InvalidArgument(f"resource vectors differ in shape: {r_s.shape} vs {r_a.shape}")
    gap = np.maximum(0.0, r_s - r_a)
    return math.exp(-lam * float(np.linalg.norm(gap)))


def spec_alignment(e_s, e_a) -> float:
    return cosine(e_s, e_a)


def policy_gate(p_s: BitSet, p_a: BitSet) -> bool:
    return p_s.issubset(p_a)


def compatibility_score(s: SubtaskRequirement, a: AgentProfile, lam: float = RESOURCE_LAMBDA,
                        on_gate_fail: Optional[Callable[[SubtaskRequirement, AgentProfile], None]] = None) -> float:
    """Semantic fit x policy gate x resource penalty x spec alignment."""
    vcv = a.vcv
    if not policy_gate(s.p_s, vcv.p):
        if on_gate_fail is not None:
            on_gate_fail(s, a)
        return 0.0
    return (cosine(s.c_s, vcv.c)
            * resource_penalty(s.r_s, vcv.r, lam)
            * spec_alignment(s.e_s, vcv.e))


def task_compatibility(c_t, p_req: BitSet, r_req, vcv: Vcv, lam: float = RESOURCE_LAMBDA) -> float:
    """Task-level score used for candidate selection (no spec term)."""
    if not policy_gate(p_req, vcv.p):
        return 0.0
    return cosine(c_t, vcv.c) * resource_penalty(r_req, vcv.r, lam)


def score_matrix(subtasks: Sequence[SubtaskRequirement], agents: Sequence[AgentProfile],
                 lam: float = RESOURCE_LAMBDA, on_gate_fail=None) -> np.ndarray:
    out = np.zeros((len(subtasks), len(agents)))
    for i, s in enumerate(subtasks):
        for j, a in enumerate(agents):
            out[i, j] = compatibility_score(s, a, lam, on_gate_fail)
    return out


@dataclass
class AssignmentMatrix:
    x: np.ndarray
    subtask_ids: List[str] = field(default_factory=list)
    agent_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int8)
        k, n = self.x.shape
        if not self.subtask_ids:
            self.subtask_ids = [f"s{i}" for i in range(k)]
        if not self.agent_ids:
            self.agent_ids = [f"a{j}" for j in range(n)]

    def team(self, subtask_id: str) -> List[str]:
        i = self.subtask_ids.index(subtask_id)
        return [self.agent_ids[j] for j in np.flatnonzero(self.x[i])]

    def teams(self) -> Dict[str, List[str]]:
        return {sid: self.team(sid) for sid in self.subtask_ids}

    def objective(self, utility: np.ndarray) -> float:
        return float(np.sum(self.x * utility))

    def is_feasible(self, caps: Sequence[int], capacities: Sequence[int]) -> bool:
        rows = self.x.sum(axis=1)
        cols = self.x.sum(axis=0)
        return bool(np.all(rows >= 1) and np.all(rows <= np.asarray(caps))
                    and np.all(cols <= np.asarray(capacities)))


def _check_shapes(scores, reputations, caps, capacities):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or 0 in scores.shape:
        raise InvalidArgument("scores must be a non-empty k x n matrix")
    k, n = scores.shape
    reps = np.asarray(reputations, dtype=np.float64)
    caps = [int(c) for c in caps]
    capacities = [int(c) for c in capacities]
    if reps.shape != (n,) or len(caps) != k or len(capacities) != n:
        raise InvalidArgument("reputations/capacities must have n entries and caps k entries")
    if any(c < 1 for c in caps):
        raise InvalidArgument("team size caps must be >= 1")
    return scores, reps, caps, capacities


class _Solver:
    """Greedy construction, augmenting-path repair, 2-swap and residual-cycle improvement."""

    def __init__(self, utility, caps, capacities, subtask_ids, agent_ids):
        self.u = utility
        self.k, self.n = utility.shape
        self.caps = caps
        self.capacities = capacities
        self.sids = subtask_ids
        self.aids = agent_ids
        self.eligible = utility > 0
        self.x = np.zeros((self.k, self.n), dtype=np.int8)
        self.swaps = 0
        self.cycles = 0

    def row(self, i):
        return int(self.x[i].sum())

    def load(self, j):
        return int(self.x[:, j].sum())

    def greedy(self):
        order = sorted(((i, j) for i in range(self.k) for j in range(self.n) if self.eligible[i, j]),
                       key=lambda ij: (-self.u[ij], self.sids[ij[0]], self.aids[ij[1]]))
        for i, j in order:
            if self.row(i) < self.caps[i] and self.load(j) < self.capacities[j]:
                self.x[i, j] = 1

    def _augment_cover(self, start: int) -> bool:
        # BFS from an uncovered row; ends at an agent with spare capacity or a row that can shed one member
        prev: Dict[Tuple[str, int], Tuple[str, int]] = {}
        queue = deque([("row", start)])
        seen = {("row", start)}
        while queue:
            kind, idx = queue.popleft()
            if kind == "row":
                if idx != start and self.row(idx) > 1:
                    self._apply_path(prev, ("row", idx), start)
                    return True
                for j in range(self.n):
                    if self.eligible[idx, j] and not self.x[idx, j] and ("agent", j) not in seen:
                        seen.add(("agent", j))
                        prev[("agent", j)] = ("row", idx)
                        if self.load(j) < self.capacities[j]:
                            self._apply_path(prev, ("agent", j), start)
                            return True
                        queue.append(("agent", j))
            else:
                for i in range(self.k):
                    if self.x[i, idx] and ("row", i) not in seen:
                        seen.add(("row", i))
                        prev[("row", i)] = ("agent", idx)
                        queue.append(("row", i))
        return False

    def _apply_path(self, prev, end, start):
        node = end
        while node != ("row", start):
            parent = prev[node]
            if parent[0] == "row":
                self.x[parent[1], node[1]] = 1
            else:
                self.x[node[1], parent[1]] = 0
            node = parent

    def repair(self):
        uncovered = []
        for i in range(self.k):
            if self.row(i) == 0 and not self._augment_cover(i):
                uncovered.append(self.sids[i])
        if uncovered:
            raise Infeasible(uncovered)

    def two_swap(self):
        """Replace one member of a team by an unused eligible agent while it pays."""
        improved = True
        while improved:
            improved = False
            for i in range(self.k):
                for j_out in np.flatnonzero(self.x[i]):
                    best, best_gain = None, 1e-12
                    for j_in in range(self.n):
                        if (self.eligible[i, j_in] and not self.x[i, j_in]
                                and self.load(j_in) < self.capacities[j_in]):
                            gain = self.u[i, j_in] - self.u[i, j_out]
                            if gain > best_gain:
                                best, best_gain = j_in, gain
                    if best is not None:
                        self.x[i, j_out] = 0
                        self.x[i, best] = 1
                        self.swaps += 1
                        improved = True

    def _residual_arcs(self):
        # nodes: 0 = source, 1 = sink, rows 2..k+1, agents k+2..k+n+1; arc costs are negated utilities
        S, T = 0, 1
        arcs = [(T, S, 0.0), (S, T, 0.0)]
        for i in range(self.k):
            r = 2 + i
            cnt = self.row(i)
            if cnt < self.caps[i]:
                arcs.append((S, r, 0.0))
            if cnt > 1:
                arcs.append((r, S, 0.0))
            for j in range(self.n):
                a = 2 + self.k + j
                if self.x[i, j]:
                    arcs.append((a, r, float(self.u[i, j])))
                elif self.eligible[i, j]:
                    arcs.append((r, a, -float(self.u[i, j])))
        for j in range(self.n):
            a = 2 + self.k + j
            load = self.load(j)
            if load < self.capacities[j]:
                arcs.append((a, T, 0.0))
            if load > 0:
                arcs.append((T, a, 0.0))
        return arcs

    def _negative_cycle(self, eps=1e-12):
        size = 2 + self.k + self.n
        arcs = self._residual_arcs()
        dist = [0.0] * size
        pred = [-1] * size
        last = -1
        for _ in range(size):
            last = -1
            for a, b, w in arcs:
                if dist[a] + w < dist[b] - eps:
                    dist[b] = dist[a] + w
                    pred[b] = a
                    last = b
            if last == -1:
                return None
        node = last
        for _ in range(size):
            node = pred[node]
        cycle = [node]
        cur = pred[node]
        while cur != node:
            cycle.append(cur)
            cur = pred[cur]
        cycle.reverse()
        return cycle

    def cancel_cycles(self):
        while True:
            cycle = self._negative_cycle()
            if cycle is None:
                return
            for a, b in zip(cycle, cycle[1:] + cycle[:1]):
                if a >= 2 and b >= 2:
                    if a < 2 + self.k:
                        self.x[a - 2, b - 2 - self.k] = 1
                    else:
                        self.x[b - 2, a - 2 - self.k] = 0
            self.cycles += 1


def solve_assignment(scores, reputations, caps, capacities,
                     subtask_ids: Optional[Sequence[str]] = None,
                     agent_ids: Optional[Sequence[str]] = None) -> AssignmentMatrix:
    """Maximize sum x_ij * score_ij * rep_j with team sizes in [1, cap_i] and agent loads <= capacity_j.

    Pairs with non-positive utility are ineligible.
    """
    scores, reps, caps, capacities = _check_shapes(scores, reputations, caps, capacities)
    k, n = scores.shape
    sids = list(subtask_ids) if subtask_ids is not None else [f"s{i}" for i in range(k)]
    aids = list(agent_ids) if agent_ids is not None else [f"a{j}" for j in range(n)]
    utility = scores * reps[None, :]
    no_agent = [sids[i] for i in range(k) if not np.any(utility[i] > 0)]
    if no_agent:
        raise Infeasible(no_agent)
    solver = _Solver(utility, caps, capacities, sids, aids)
    solver.greedy()
    solver.repair()
    solver.two_swap()
    solver.cancel_cycles()
    return AssignmentMatrix(solver.x.copy(), sids, aids)


def exhaustive_assignment(scores, reputations, caps, capacities) -> Tuple[float, Optional[np.ndarray]]:
    """Exact optimum by enumerating every feasible team per subtask (memoized on agent loads).

    Returns ``(objective, x)``; ``x`` is None and objective -inf when infeasible.
    """
    scores, reps, caps, capacities = _check_shapes(scores, reputations, caps, capacities)
    utility = scores * reps[None, :]
    k, n = utility.shape
    teams_per_row = []
    for i in range(k):
        elig = [j for j in range(n) if utility[i, j] > 0]
        teams = []
        for size in range(1, caps[i] + 1):
            teams.extend(combinations(elig, size))
        teams_per_row.append(teams)

    @functools.lru_cache(maxsize=None)
    def best(i: int, loads: Tuple[int, ...]):
        if i == k:
            return 0.0, ()
        top = (-math.inf, ())
        for team in teams_per_row[i]:
            if any(loads[j] >= capacities[j] for j in team):
                continue
            nxt = list(loads)
            for j in team:
                nxt[j] += 1
            val, rest = best(i + 1, tuple(nxt))
            val += sum(utility[i, j] for j in team)
            if val > top[0]:
                top = (val, (team,) + rest)
        return top

    value, choice = best(0, (0,) * n)
    if value == -math.inf:
        return value, None
    x = np.zeros((k, n), dtype=np.int8)
    for i, team in enumerate(choice):
        x[i, list(team)] = 1
    return float(np.sum(x * utility)), x
