import random

import pytest
from hypothesis import given, settings, strategies as st

from foa.errors import InvalidArgument, ProtocolError, Unavailable
from foa.transport import (AGENT_TASKS, CLUSTER_CHANNEL, JOBS, MESSAGE_FIELDS, Client, Deduplicator, Envelope,
                           InProcessBroker, decode_message, encode_message, from_mqtt, to_mqtt, topic_for,
                           topic_kind, topic_matches, validate_pattern)

from oracles import topic_regex


def env(topic, payload=b"{}", **kw):
    return Envelope(topic, encode_message("RESULT", job_id="j", status="Done", answer="x") if payload == b"{}" else payload, **kw)


class TestTopics:
    def test_templates(self):
        assert topic_for(CLUSTER_CHANNEL, "c42") == "foa/clusters/c42/channel"
        assert topic_for(AGENT_TASKS, "a7") == "foa/agents/a7/tasks"
        assert topic_for(JOBS) == "foa/orchestrator/jobs"
        assert topic_for("capability_updates") == "foa/capabilities/updates"
        assert topic_for("policy_events") == "foa/policies/enforcement"
        assert [topic_for(k) for k in ("meta", "retain", "result")] == ["foa/meta", "foa/retain", "foa/result"]

    def test_invalid_ids(self):
        for bad in ("a/b", "+", "#", "", "a b"):
            with pytest.raises(InvalidArgument):
                topic_for(AGENT_TASKS, bad)
        with pytest.raises(InvalidArgument):
            topic_for(JOBS, "extra")

    def test_kind(self):
        assert topic_kind("foa/clusters/x/channel") == CLUSTER_CHANNEL
        with pytest.raises(InvalidArgument):
            topic_kind("other/topic")


segment = st.sampled_from(["foa", "agents", "a1", "a2", "tasks", "clusters", "c1", "channel", "x"])


@st.composite
def pattern_topic(draw):
    topic = draw(st.lists(segment, min_size=1, max_size=5))
    pat = []
    for i in range(draw(st.integers(1, 6))):
        choice = draw(st.integers(0, 9))
        if choice == 0:
            pat.append("#")
            break
        pat.append("+" if choice < 3 else draw(segment))
    return "/".join(pat), "/".join(topic)


class TestMatching:
    @given(pattern_topic())
    @settings(max_examples=1500, deadline=None)
    def test_against_regex_oracle(self, pt):
        pattern, topic = pt
        assert topic_matches(pattern, topic) == bool(topic_regex(pattern).match(topic))

    def test_pattern_validation(self):
        for bad in ("a/#/b", "a+/b", "", "a/b#"):
            with pytest.raises(InvalidArgument):
                validate_pattern(bad)


class TestMessages:
    def test_roundtrip_all_types(self):
        for msg_type, fields in MESSAGE_FIELDS.items():
            payload = {f: f"v-{f}" for f in fields}
            decoded = decode_message(encode_message(msg_type, **payload))
            assert decoded == {"type": msg_type, **payload}

    def test_missing_and_unknown(self):
        with pytest.raises(InvalidArgument):
            encode_message("DRAFT", job_id="j")
        with pytest.raises(ProtocolError):
            decode_message(b'{"type": "NOPE"}')
        with pytest.raises(ProtocolError):
            decode_message(b"\xff")


class TestBroker:
    def test_wildcard_delivery(self):
        b = InProcessBroker()
        got = []
        b.subscribe("foa/clusters/+/channel", got.append)
        b.publish(env("foa/clusters/c1/channel"))
        assert len(got) == 1

    def test_no_match(self):
        b = InProcessBroker()
        got = []
        b.subscribe("foa/agents/a1/tasks", got.append)
        b.publish(env("foa/agents/a2/tasks"))
        assert got == []

    def test_retained(self):
        b = InProcessBroker()
        b.publish(env("foa/retain", retained=True))
        got = []
        b.subscribe("foa/#", got.append)
        assert len(got) == 1 and got[0].retained
        with pytest.raises(InvalidArgument):
            b.publish(env("foa/meta", retained=True))

    def test_wildcard_publish_rejected(self):
        with pytest.raises(InvalidArgument):
            InProcessBroker().publish(env("foa/clusters/+/channel"))

    def test_shutdown(self):
        b = InProcessBroker()
        b.shutdown()
        with pytest.raises(Unavailable):
            b.publish(env("foa/meta"))
        with pytest.raises(Unavailable):
            b.subscribe("foa/#", lambda e: None)

    def test_fifo_per_publisher(self):
        b = InProcessBroker()
        got = []
        b.subscribe("foa/clusters/c1/channel", lambda e: got.append(e.correlation_id))
        c = Client(b, "p")
        for i in range(20):
            c.send("foa/clusters/c1/channel", "RESULT", correlation_id=str(i), job_id="j", status="s", answer="a")
        assert got == [str(i) for i in range(20)]

    def test_no_cross_talk(self):
        b = InProcessBroker()
        c1, c2 = [], []
        b.subscribe("foa/clusters/c1/channel", c1.append)
        b.subscribe("foa/clusters/c2/channel", c2.append)
        for _ in range(5):
            b.publish(env("foa/clusters/c1/channel"))
        assert len(c1) == 5 and c2 == []

    def test_no_local_and_duplicates(self):
        b = InProcessBroker(duplicate_qos1=True)
        mine, other = [], []
        a = Client(b, "a")
        a.subscribe("foa/meta", mine.append, no_local=True)
        Client(b, "b").subscribe("foa/meta", other.append)
        a.send("foa/meta", "RESULT", correlation_id="1", job_id="j", status="s", answer="x")
        a.send("foa/meta", "RESULT", correlation_id="2", qos=0, job_id="j", status="s", answer="x")
        assert mine == [] and len(other) == 3

    def test_reentrant_publish_is_queued(self):
        b = InProcessBroker()
        order = []

        def first(e):
            order.append("first")
            if e.correlation_id == "1":
                b.publish(Envelope("foa/meta", e.payload, correlation_id="2"))
            order.append("first-done")

        b.subscribe("foa/meta", first)
        b.publish(Envelope("foa/meta", encode_message("RESULT", job_id="j", status="s", answer="a"), correlation_id="1"))
        assert order == ["first", "first-done", "first", "first-done"]

    def test_dedup(self):
        d = Deduplicator()
        assert d.first("x", 1) and not d.first("x", 1) and d.duplicates == 1

    def test_mqtt_mapping(self):
        e = Envelope("foa/meta", b'{"type":"RESULT"}', 1, False, "corr", "me", 7)
        m = to_mqtt(e)
        assert from_mqtt(m["topic"], m["payload"], m["qos"], m["retain"], m["user_properties"]) == e
