import pytest

from foa.clock import SimClock
from foa.cluster import Cluster
from foa.consensus import ConsensusResult, Draft, run_rounds, select_representative, update_draft
from foa.errors import AgentCrash, AgentTimeout, ConsensusFailed, InvalidArgument, ProtocolError
from foa.transport import InProcessBroker, decode_message


def d(author, conf=0.5, content=None, rnd=0, vote=False):
    return Draft(author, "s1", rnd, content or f"answer {author}", conf, vote)


class Member:
    def __init__(self, agent_id, complete_at=None, latency=10.0, fail=None):
        self.agent_id, self.complete_at, self.latency, self.fail = agent_id, complete_at, latency, fail
        self.calls = 0

    def refine(self, own, peers, weights):
        self.calls += 1
        if self.fail == "timeout":
            raise AgentTimeout(self.agent_id)
        if self.fail == "crash":
            raise AgentCrash(self.agent_id)
        new = update_draft(own, peers, weights)
        vote = self.complete_at is not None and new.round >= self.complete_at
        return Draft(new.author_id, new.subtask_id, new.round, new.content, new.confidence, vote)

    def call_cost_ms(self):
        return self.latency


def run(members, k=3, timeout=300_000, broker=None, clock=None, weights=None, **kw):
    ids = [m.agent_id for m in members]
    cluster = Cluster("c1", "s1", tuple(ids))
    initial = {m: d(m, 0.5 + 0.1 * i) for i, m in enumerate(sorted(ids))}
    return run_rounds(cluster, {m.agent_id: m for m in members}, initial, weights or {m: 1.0 for m in ids},
                      k, timeout, broker, clock, "job", **kw)


class TestUpdate:
    def test_no_peers(self):
        own = d("a", 0.4)
        assert update_draft(own, [], {}) == Draft("a", "s1", 1, own.content, 0.4, False)

    def test_adopt(self):
        got = update_draft(d("a", 0.4), [d("b", 0.9)], {"a": 1.0, "b": 1.0})
        assert got.content == "answer b" and got.round == 1

    def test_tie_keeps_own(self):
        got = update_draft(d("a", 0.5), [d("b", 0.5)], {"a": 1.0, "b": 1.0})
        assert got.content == "answer a"

    def test_margin_boundary(self):
        got = update_draft(d("a", 0.5), [d("b", 0.54)], {})
        assert got.content == "answer a" and 0.5 <= got.confidence <= 0.54

    def test_round_mismatch(self):
        with pytest.raises(ProtocolError):
            update_draft(d("a"), [d("b", rnd=1)], {})

    def test_draft_validation(self):
        with pytest.raises(InvalidArgument):
            Draft("a", "s", 0, "x", 1.5)


class TestRepresentative:
    def test_majority(self):
        drafts = [d("a", 0.1, "X"), d("b", 0.2, "X"), d("c", 0.9, "Y")]
        assert select_representative(drafts, {}).content == "X"

    def test_weight(self):
        drafts = [d("a", 0.5), d("b", 0.5), d("c", 0.5)]
        assert select_representative(drafts, {"a": 0.9, "b": 0.5, "c": 0.1}).author_id == "a"

    def test_tie(self):
        assert select_representative([d("b", 0.5), d("a", 0.5)], {}).author_id == "a"

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            select_representative([], {})


class TestRounds:
    def test_singleton_round_one(self):
        r = run([Member("a", complete_at=1)])
        assert r.rounds_used == 1 and r.answer == "answer a" and r.contributors == ("a",)

    def test_early_exit_round_two(self):
        assert run([Member("a", 2), Member("b", 2), Member("c", 2)]).rounds_used == 2

    def test_never_complete(self):
        r = run([Member("a"), Member("b")])
        assert r.rounds_used == 3 and r.answer and not r.timed_out

    def test_message_count_and_task_complete(self):
        for size in (2, 3, 4):
            broker = InProcessBroker()
            members = [Member(f"m{i}") for i in range(size)]
            run(members, broker=broker, early_exit=False)
            kinds = [(s, decode_message(e.payload)["type"]) for s, e in broker.delivery_log]
            drafts = [1 for s, t in kinds if t == "DRAFT"]
            assert len(drafts) == 3 * size * (size - 1)
            published = [decode_message(e.payload)["type"] for e in broker.published]
            assert published.count("TASK_COMPLETE") == 1

    def test_monotone_rounds_per_author(self):
        broker = InProcessBroker()
        run([Member("a"), Member("b"), Member("c")], broker=broker)
        seen = {}
        for e in broker.published:
            m = decode_message(e.payload)
            if m["type"] == "DRAFT":
                a, r = m["draft"]["author_id"], m["draft"]["round"]
                assert r >= seen.get(a, -1)
                seen[a] = r

    def test_timeout_partial(self):
        clock = SimClock()
        broker = InProcessBroker()
        r = run([Member("a", 1), Member("b", fail="timeout")], timeout=3000, clock=clock, broker=broker)
        assert r.timed_out and r.rounds_used == 3 and clock.now() == pytest.approx(3000)
        assert "TASK_COMPLETE" not in [decode_message(e.payload)["type"] for e in broker.published]

    def test_crash_drops_member(self):
        r = run([Member("a", 1), Member("b", fail="crash")])
        assert r.contributors == ("a",)

    def test_all_crash(self):
        with pytest.raises(ConsensusFailed):
            run([Member("a", fail="crash")])

    def test_duplicate_delivery_same_result(self):
        plain = run([Member("a"), Member("b"), Member("c", 2)], broker=InProcessBroker())
        dup = run([Member("a"), Member("b"), Member("c", 2)], broker=InProcessBroker(duplicate_qos1=True))
        assert plain == dup

    def test_result_roundtrip(self):
        r = ConsensusResult("s1", "x", 0.7, 2, ("a", "b"), "c1", "a", False)
        assert ConsensusResult.from_dict(r.to_dict()) == r
        with pytest.raises(InvalidArgument):
            ConsensusResult("s1", "x", 0.7, 2, ())
