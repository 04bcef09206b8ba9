"""Counter sweeps for routing, clustering and consensus."""
from __future__ import annotations

import time
from collections import Counter
from typing import Dict, List, Sequence

import numpy as np

from .capability import EMBED_DIM, POLICY_BITS, BitSet, BloomFilter, Vcv
from .clock import SimClock
from .cluster import Cluster, hier_cluster, similarity_matrix
from .consensus import Draft, run_rounds, update_draft
from .routing import AgentProfile, SubtaskRequirement, score_matrix, solve_assignment
from .transport import InProcessBroker, decode_message

BENCH_MODES = ("routing", "clustering", "consensus")


def random_unit(rng: np.random.Generator, dim: int = EMBED_DIM) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_vcv(rng: np.random.Generator, agent_id: str) -> Vcv:
    return Vcv(agent_id=agent_id, c=random_unit(rng), s=BloomFilter.empty(),
               r=rng.uniform(0, 10, 4), p=BitSet(POLICY_BITS), e=random_unit(rng), v=0)


class SilentMember:
    """Cluster member that never votes complete; used to exercise full-length runs."""

    def __init__(self, agent_id: str, latency_ms: float = 1.0):
        self.agent_id = agent_id
        self.latency_ms = latency_ms

    def refine(self, own, peers, weights):
        return update_draft(own, peers, weights)

    def call_cost_ms(self) -> float:
        return self.latency_ms


def bench_routing(sizes: Sequence[int], seed: int = 0) -> List[Dict[str, object]]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        k = max(1, n // 2)
        agents = [AgentProfile(random_vcv(rng, f"a{j:04d}"), float(rng.uniform(0.1, 1.0)), 2) for j in range(n)]
        subtasks = []
        for i in range(k):
            # tie requirements to an agent so every row has a positive entry
            base = agents[i % n].vcv
            subtasks.append(SubtaskRequirement(f"s{i:04d}", base.c, BitSet(POLICY_BITS), np.zeros(4), base.e, 2))
        t0 = time.perf_counter()
        scores = score_matrix(subtasks, agents)
        x = solve_assignment(scores, [a.reputation for a in agents], [2] * k, [2] * n)
        elapsed = time.perf_counter() - t0
        util = scores * np.array([a.reputation for a in agents])[None, :]
        rows.append({"agents": n, "subtasks": k, "score_evals": k * n,
                     "objective": round(x.objective(util), 6), "seconds": round(elapsed, 4)})
    return rows


def bench_clustering(sizes: Sequence[int], seed: int = 0) -> List[Dict[str, object]]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        vcvs = [random_vcv(rng, f"a{j:04d}") for j in range(n)]
        drafts = {v.agent_id: f"draft {j % 3} for the shared subtask" for j, v in enumerate(vcvs)}
        counter: Counter = Counter()
        S = similarity_matrix(vcvs, drafts, counter=counter)
        parts = hier_cluster(S, ids=[v.agent_id for v in vcvs])
        rows.append({"agents": n, "entries": counter["similarity_entries"], "expected": n * (n - 1) // 2,
                     "clusters": len(parts), "largest": max(len(p) for p in parts)})
    return rows


def bench_consensus(sizes: Sequence[int], rounds: int = 3, seed: int = 0) -> List[Dict[str, object]]:
    rows = []
    for size in sizes:
        broker = InProcessBroker()
        members = [f"m{j}" for j in range(size)]
        cluster = Cluster(f"bench.c{size}", "s01", tuple(members))
        initial = {m: Draft(m, "s01", 0, f"answer from {m}", 0.5 + 0.01 * j) for j, m in enumerate(members)}
        result = run_rounds(cluster, {m: SilentMember(m) for m in members}, initial, {m: 1.0 for m in members},
                            k_max=rounds, broker=broker, clock=SimClock(), early_exit=False)
        drafts = sum(1 for sub, env in broker.delivery_log
                     if sub in members and decode_message(env.payload)["type"] == "DRAFT")
        rows.append({"cluster": size, "rounds": result.rounds_used, "draft_deliveries": drafts,
                     "expected": rounds * size * (size - 1)})
    return rows


def bench(mode: str, sizes: Sequence[int], seed: int = 0) -> List[Dict[str, object]]:
    if mode == "routing":
        return bench_routing(sizes, seed)
    if mode == "clustering":
        return bench_clustering(sizes, seed)
    if mode == "consensus":
        return bench_consensus(sizes, seed=seed)
    raise ValueError(f"unknown bench mode {mode!r}; choose from {BENCH_MODES}")


def format_table(rows: Sequence[Dict[str, object]]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[str(c) for c in cols]] + [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells)
