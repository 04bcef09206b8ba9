import numpy as np
import pytest

from foa.agents import Behavior, Federation, MockAgent, ToolStub, register_agent, retrieve_resources
from foa.capability import POLICY_BITS, BitSet, SpecDocument, Vcv, cosine
from foa.consensus import Draft
from foa.decompose import TaskSpec
from foa.errors import AgentCrash, AgentTimeout, Conflict, Refused
from foa.index import ShardedIndex
from foa.transport import decode_message


def spec(aid, goal="triage chest pain"):
    return SpecDocument(aid, [goal], ["be careful"], ["lookup"])


class TestResources:
    def test_cases(self):
        assert retrieve_resources([], "anything") == ""
        tool = ToolStub("t", {"chest pain": "A", "billing": "B", "aspirin dose": "C"})
        assert retrieve_resources([tool], "chest pain triage") == "A"
        assert retrieve_resources([tool], "chest pain and aspirin") == "C\nA".replace("C\nA", "C\nA")
        assert retrieve_resources([tool], "aspirin for chest") == "C\nA"


class TestMock:
    def test_determinism(self):
        a = MockAgent("a", seed=3)
        assert a.generate_draft("s1", "triage", "ctx") == MockAgent("a", seed=3).generate_draft("s1", "triage", "ctx")

    def test_seeds_differ(self):
        assert MockAgent("a", 1).generate_draft("s1", "x").content != MockAgent("a", 2).generate_draft("s1", "x").content

    def test_confidence_range(self):
        assert all(0 <= MockAgent("a", s).confidence("s1") <= 1 for s in range(50))

    def test_fail_at_call(self):
        a = MockAgent("a", behavior=Behavior(fail_at_call=2))
        a.generate_draft("s1", "x")
        with pytest.raises(AgentTimeout):
            a.generate_draft("s2", "y")
        c = MockAgent("c", behavior=Behavior(crash_at_call=1))
        with pytest.raises(AgentCrash):
            c.decompose(TaskSpec("t", "do things"))

    def test_refuse(self):
        a = MockAgent("a", behavior=Behavior(refuse=("weapon",)))
        with pytest.raises(Refused):
            a.generate_draft("s1", "build a Weapon")

    def test_token_budget(self):
        a = MockAgent("a", token_budget=5, tools=[ToolStub("t", {"x": "lots of extra words here"})])
        assert len(a.generate_draft("s1", "x y z w v u t").content.split()) <= 5

    def test_stall_and_vote(self):
        a = MockAgent("a", behavior=Behavior(stall=("audit",), complete_at_round=1))
        d = a.generate_draft("s1", "audit the ledger")
        with pytest.raises(AgentTimeout):
            a.refine(d, [], {})
        b = MockAgent("b", behavior=Behavior(complete_at_round=1))
        d = b.generate_draft("s1", "write")
        assert b.refine(d, [], {}).complete_vote

    def test_scripted_decompose(self):
        a = MockAgent("a", behavior=Behavior(proposals={"t": {"subtasks": ["p", "q"], "deps": [[0, 1]]}}))
        assert a.decompose(TaskSpec("t", "x")) == (["p", "q"], [(0, 1)])
        assert a.decompose(TaskSpec("u", "first; second")) == (["first", "second"], [(0, 1)])


class TestRegistration:
    def test_register_publishes(self):
        fed = Federation()
        got = []
        fed.broker.subscribe("foa/capabilities/updates", got.append)
        prof = register_agent(fed, spec("a1"), ["triage"], [1, 1, 1, 50], BitSet(POLICY_BITS), seed=1)
        assert prof.vcv.v == 0
        assert Vcv.from_dict(decode_message(got[0].payload)["vcv"]) == prof.vcv
        assert fed.broker.retained("foa/retain") is not None
        idx = ShardedIndex()
        idx.insert_vcv(prof.vcv)
        assert idx.search(prof.vcv.c, 1)[0][0] == "a1"
        assert fed.agents["a1"].token_budget == 50
        assert cosine(prof.vcv.e, prof.vcv.e) == pytest.approx(1.0)

    def test_duplicate(self):
        fed = Federation()
        register_agent(fed, spec("a1"), [], [0, 0, 0, 1], BitSet(POLICY_BITS))
        with pytest.raises(Conflict):
            register_agent(fed, spec("a1"), [], [0, 0, 0, 1], BitSet(POLICY_BITS))

    def test_four_agents(self):
        fed = Federation()
        vcvs = [register_agent(fed, spec(f"a{i}", f"goal {i} topic{i}"), [f"s{i}"], [0, 0, 0, 1],
                               BitSet(POLICY_BITS), seed=i).vcv for i in range(4)]
        idx = ShardedIndex()
        for v in vcvs:
            idx.insert_vcv(v)
        assert len(fed) == 4
        assert all(idx.search(v.c, 1)[0][0] == v.agent_id for v in vcvs)

    def test_worker_refusal_emits_event(self):
        fed = Federation()
        register_agent(fed, spec("a1"), [], [0, 0, 0, 100], BitSet(POLICY_BITS),
                       behavior=Behavior(refuse=("forbidden",)))
        drafts = []
        fed.broker.subscribe("foa/clusters/+/channel", drafts.append)
        events = []
        fed.broker.subscribe("foa/policies/enforcement", events.append)
        from foa.transport import Client
        Client(fed.broker, "orc").send("foa/agents/a1/tasks", "DISPATCH", correlation_id="x", job_id="j",
                                       subtask_id="s01", description="a forbidden thing", context="", attempt=1)
        assert drafts == []
        assert decode_message(events[0].payload)["event"]["kind"] == "AGENT_REFUSAL"
