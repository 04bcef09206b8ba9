import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foa.capability import POLICY_BITS, BitSet, BloomFilter, Vcv, embed_text
from foa.decompose import (Proposal, TaskDag, TaskGraph, TaskSpec, collect_proposals, merge_proposals,
                           normalize_proposal, select_candidates, validate_dag)
from foa.errors import AgentTimeout, EmptyDecomposition, InvalidArgument
from foa.routing import AgentProfile, SubtaskRequirement

from oracles import break_cycles_oracle, is_topologically_sortable, merged_component_count


def profile(aid, text, p=()):
    return AgentProfile(Vcv(agent_id=aid, c=embed_text(text), s=BloomFilter.empty(), r=np.zeros(4),
                            p=BitSet.from_indices(POLICY_BITS, p), e=embed_text(text), v=0))


def prop(pid, texts, deps=()):
    return Proposal(pid, tuple((t, embed_text(t)) for t in texts), tuple(deps))


def node(sid):
    e = embed_text(sid)
    return SubtaskRequirement(sid, e, BitSet(POLICY_BITS), np.zeros(4), e)


class Scripted:
    def __init__(self, agent_id, subtasks, deps=(), timeout=False):
        self.agent_id, self.subtasks, self.deps, self.timeout = agent_id, subtasks, deps, timeout

    def decompose(self, task):
        if self.timeout:
            raise AgentTimeout(self.agent_id)
        return self.subtasks, list(self.deps)


TASK = TaskSpec("t", "triage chest pain and review medication")


class TestCandidates:
    def test_single_qualifier(self):
        agents = [profile("a", "triage chest pain and review medication"), profile("b", "tax filing law")]
        assert [a.agent_id for a in select_candidates(TASK, agents, 0.3)] == ["a"]

    def test_fallback(self):
        agents = [profile(f"x{i}", f"unrelated topic number {i}") for i in range(6)]
        got = select_candidates(TASK, agents, 0.99, 4)
        oracle = sorted(agents, key=lambda a: (-float(np.dot(TASK.c_t, a.vcv.c)), a.agent_id))[:4]
        assert [a.agent_id for a in got] == [a.agent_id for a in oracle]

    def test_cap(self):
        agents = [profile(f"a{i}", "triage chest pain and review medication" + " extra" * i) for i in range(6)]
        got = select_candidates(TASK, agents, 0.3, 4)
        alphas = {a.agent_id: float(np.dot(TASK.c_t, a.vcv.c)) for a in agents}
        assert [a.agent_id for a in got] == sorted(alphas, key=lambda k: (-alphas[k], k))[:4]

    def test_empty(self):
        assert select_candidates(TASK, [], 0.3) == []

    def test_tau_monotone(self):
        agents = [profile(f"a{i}", t) for i, t in enumerate(
            ["triage chest pain", "review medication", "triage", "billing", "chest pain review medication"])]
        sizes = []
        for tau in (0.1, 0.2, 0.3, 0.5, 0.7):
            qualified = [a for a in agents if float(np.dot(TASK.c_t, a.vcv.c)) > tau]
            sizes.append(len(qualified))
        assert sizes == sorted(sizes, reverse=True)


class TestProposals:
    def test_bounds(self):
        got = collect_proposals([Scripted("a", ["x one", "y two", "z three"]), Scripted("b", ["only"]),
                                 Scripted("c", [f"step {i}" for i in range(6)]),
                                 Scripted("d", ["p", "q"], timeout=True)], TASK)
        assert [(p.proposer_id, len(p.subtasks)) for p in got] == [("a", 3), ("c", 4)]

    def test_validation(self):
        with pytest.raises(InvalidArgument):
            prop("a", ["x", "y"], [(0, 0)])
        with pytest.raises(InvalidArgument):
            prop("a", ["x", "y"], [(0, 5)])
        assert normalize_proposal("a", ["x"], []) is None


class TestMerge:
    def test_single(self):
        g = merge_proposals([prop("a", ["alpha task", "beta job", "gamma work"], [(0, 1), (1, 2)])])
        assert len(g.nodes) == 3 and len(g.edges) == 2

    def test_identical(self):
        texts = ["alpha task", "beta job", "gamma work"]
        g = merge_proposals([prop("a", texts, [(0, 1)]), prop("b", texts, [(0, 1)])])
        assert len(g.nodes) == 3 and len(g.edges) == 1

    def test_one_cross_pair(self):
        a = prop("a", ["alpha bravo charlie", "delta echo foxtrot", "golf hotel india"])
        b = prop("b", ["alpha bravo charlie delta", "juliet kilo lima", "mike november oscar"])
        assert len(merge_proposals([a, b]).nodes) == 5

    def test_empty(self):
        with pytest.raises(EmptyDecomposition):
            merge_proposals([])

    def test_canonical_and_self_edges(self):
        a = prop("a", ["review medication interactions", "check medication interactions"], [(0, 1)])
        g = merge_proposals([a])
        assert len(g.nodes) == 1 and not g.edges
        assert next(iter(g.nodes.values())).description == "check medication interactions"

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_order_independent(self, seed):
        rnd = random.Random(seed)
        vocab = ["triage", "chest", "pain", "review", "drug", "write", "summary", "code", "bill", "plan"]
        props = []
        for pid in range(3):
            texts = [" ".join(rnd.sample(vocab, 3)) for _ in range(rnd.randint(2, 4))]
            n = len(texts)
            deps = [(i, j) for i in range(n) for j in range(n) if i != j and rnd.random() < 0.3]
            props.append(prop(f"p{pid}", texts, deps))
        g1 = merge_proposals(props)
        g2 = merge_proposals(list(reversed(props)))
        assert {s: n.description for s, n in g1.nodes.items()} == {s: n.description for s, n in g2.nodes.items()}
        assert g1.edges == g2.edges
        total = sum(len(p.subtasks) for p in props)
        assert len(g1.nodes) <= total


class TestValidateDag:
    def test_acyclic_identity(self):
        g = TaskGraph({s: node(s) for s in "ABC"}, {("A", "B"), ("B", "C")})
        out = validate_dag(g)
        assert out.edges == g.edges and out.removed_edges == 0

    def test_two_cycle(self):
        out = validate_dag(TaskGraph({s: node(s) for s in "AB"}, {("A", "B"), ("B", "A")}))
        assert out.edges == {("A", "B")}

    def test_dangling(self):
        out = validate_dag(TaskGraph({"A": node("A")}, {("A", "Z")}))
        assert out.edges == set()

    def test_taskdag_rejects_cycle(self):
        with pytest.raises(InvalidArgument):
            TaskDag({s: node(s) for s in "AB"}, {("A", "B"), ("B", "A")})

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle(self, seed):
        rnd = random.Random(seed)
        names = [f"n{i}" for i in range(rnd.randint(1, 8))]
        edges = {(a, b) for a in names for b in names if a != b and rnd.random() < 0.3}
        out = validate_dag(TaskGraph({s: node(s) for s in names}, edges))
        exp_edges, exp_removed = break_cycles_oracle(names, edges)
        assert out.edges == exp_edges and out.removed_edges == exp_removed
        assert is_topologically_sortable(names, out.edges)

    def test_pipeline_component_count(self):
        texts = ["triage chest pain", "triage chest pain now", "bill the visit", "summary writing"]
        embs = [embed_text(t) for t in texts]
        g = merge_proposals([prop("a", texts[:2]), prop("b", texts[2:])])
        assert len(g.nodes) == merged_component_count(embs, 0.5)
