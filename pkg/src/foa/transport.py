"""Topic schema, message envelopes and an in-process publish/subscribe broker.

The broker follows MQTT semantics where they matter to the protocol: ``+`` and
``#`` wildcards, retained messages, QoS 0/1, per-publisher FIFO order and the
v5 *no local* subscription option.  Deliveries are queued and drained by one
thread at a time, so handlers never run re-entrantly.
"""
from __future__ import annotations

import itertools
import json
import logging
import re
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Mapping, Optional, Tuple

from .errors import InvalidArgument, ProtocolError, Unavailable

logger = logging.getLogger(__name__)

JOBS = "jobs"
AGENT_TASKS = "agent_tasks"
CLUSTER_CHANNEL = "cluster_channel"
CAPABILITY_UPDATES = "capability_updates"
POLICY_EVENTS = "policy_events"
META = "meta"
RETAIN = "retain"
RESULT = "result"

_TEMPLATES = {
    JOBS: "foa/orchestrator/jobs",
    AGENT_TASKS: "foa/agents/{}/tasks",
    CLUSTER_CHANNEL: "foa/clusters/{}/channel",
    CAPABILITY_UPDATES: "foa/capabilities/updates",
    POLICY_EVENTS: "foa/policies/enforcement",
    META: "foa/meta",
    RETAIN: "foa/retain",
    RESULT: "foa/result",
}
TOPIC_KINDS = tuple(_TEMPLATES)
RETAINABLE = frozenset({CAPABILITY_UPDATES, RETAIN, RESULT})
_ID_RE = re.compile(r"^[^/+#\s]+$")

MESSAGE_FIELDS: Dict[str, Tuple[str, ...]] = {
    "JOB_SUBMIT": ("job_id", "task"),
    "VCV_UPDATE": ("vcv",),
    "VCV_DELTA": ("delta",),
    "DECOMPOSE_REQ": ("job_id", "task"),
    "DECOMPOSE_PROP": ("job_id", "agent_id", "subtasks", "deps"),
    "TASK_ASSIGN": ("job_id", "subtask_id", "cluster_id", "members", "k_max"),
    "DRAFT": ("job_id", "subtask_id", "draft"),
    "TASK_COMPLETE": ("job_id", "subtask_id", "cluster_id", "result"),
    "DISPATCH": ("job_id", "subtask_id", "description", "context", "attempt"),
    "POLICY_EVENT": ("event",),
    "RESULT": ("job_id", "status", "answer"),
}


def topic_for(kind: str, *ids: str) -> str:
    try:
        template = _TEMPLATES[kind]
    except KeyError:
        raise InvalidArgument(f"unknown topic kind {kind!r}") from None
    needed = template.count("{}")
    if len(ids) != needed:
        raise InvalidArgument(f"topic kind {kind!r} takes {needed} id(s), got {len(ids)}")
    for i in ids:
        if not isinstance(i, str) or not _ID_RE.match(i):
            raise InvalidArgument(f"invalid topic id {i!r}")
    return template.format(*ids)


def topic_kind(topic: str) -> str:
    """Return the schema kind a concrete topic belongs to."""
    segments = topic.split("/")
    for kind, template in _TEMPLATES.items():
        pattern = template.split("/")
        if len(pattern) != len(segments):
            continue
        if all(p == s or (p == "{}" and _ID_RE.match(s)) for p, s in zip(pattern, segments)):
            return kind
    raise InvalidArgument(f"topic {topic!r} is not part of the foa namespace")


def validate_pattern(pattern: str) -> None:
    if not pattern:
        raise InvalidArgument("empty subscription pattern")
    segments = pattern.split("/")
    for i, seg in enumerate(segments):
        if seg == "#":
            if i != len(segments) - 1:
                raise InvalidArgument("'#' must be the last segment")
        elif seg == "+":
            continue
        elif "+" in seg or "#" in seg:
            raise InvalidArgument(f"wildcard must occupy a whole segment: {seg!r}")


def validate_topic(topic: str) -> None:
    if not topic or any(not seg for seg in topic.split("/")):
        raise InvalidArgument(f"topic {topic!r} has empty segments")
    if "+" in topic or "#" in topic:
        raise InvalidArgument(f"cannot publish to wildcard topic {topic!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    pat = pattern.split("/")
    top = topic.split("/")
    for i, seg in enumerate(pat):
        if seg == "#":
            return True
        if i >= len(top):
            return False
        if seg != "+" and seg != top[i]:
            return False
    return len(pat) == len(top)


def encode_message(msg_type: str, **fields: Any) -> bytes:
    if msg_type not in MESSAGE_FIELDS:
        raise InvalidArgument(f"unknown message type {msg_type!r}")
    missing = [f for f in MESSAGE_FIELDS[msg_type] if f not in fields]
    if missing:
        raise InvalidArgument(f"{msg_type} missing fields {missing}")
    return json.dumps({"type": msg_type, **fields}, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_message(payload: bytes) -> Dict[str, Any]:
    try:
        record = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable payload: {exc}") from None
    msg_type = record.get("type")
    if msg_type not in MESSAGE_FIELDS:
        raise ProtocolError(f"unknown message type {msg_type!r}")
    missing = [f for f in MESSAGE_FIELDS[msg_type] if f not in record]
    if missing:
        raise ProtocolError(f"{msg_type} missing fields {missing}")
    return record


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: bytes
    qos: int = 1
    retained: bool = False
    correlation_id: str = ""
    sender_id: str = ""
    sent_at: int = 0

    def __post_init__(self):
        if self.qos not in (0, 1):
            raise InvalidArgument(f"unsupported QoS {self.qos}")

    @property
    def message(self) -> Dict[str, Any]:
        return decode_message(self.payload)

    @property
    def msg_type(self) -> str:
        return self.message["type"]


@dataclass(frozen=True)
class Receipt:
    msg_id: int
    deliveries: int


Handler = Callable[[Envelope], None]


@dataclass(eq=False)
class Subscription:
    pattern: str
    handler: Handler
    subscriber_id: str = ""
    no_local: bool = False
    broker: Optional["InProcessBroker"] = field(default=None, repr=False)
    active: bool = True

    def unsubscribe(self) -> None:
        if self.broker is not None:
            self.broker.unsubscribe(self)


class InProcessBroker:
    def __init__(self, duplicate_qos1: bool = False, strict_topics: bool = True):
        self.duplicate_qos1 = duplicate_qos1
        self.strict_topics = strict_topics
        self._lock = threading.RLock()
        self._subs: List[Subscription] = []
        self._retained: Dict[str, Envelope] = {}
        self._queue: Deque[Tuple[Subscription, Envelope]] = deque()
        self._draining = False
        self._ids = itertools.count(1)
        self._closed = False
        self.published: List[Envelope] = []
        self.delivery_log: List[Tuple[str, Envelope]] = []

    def subscribe(self, pattern: str, handler: Handler, subscriber_id: str = "",
                  no_local: bool = False) -> Subscription:
        validate_pattern(pattern)
        with self._lock:
            if self._closed:
                raise Unavailable("broker is shut down")
            sub = Subscription(pattern, handler, subscriber_id, no_local, self)
            self._subs.append(sub)
            for topic in sorted(self._retained):
                if topic_matches(pattern, topic):
                    self._enqueue(sub, self._retained[topic])
        self._drain()
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.active = False
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, env: Envelope) -> Receipt:
        validate_topic(env.topic)
        if self.strict_topics:
            kind = topic_kind(env.topic)
            if env.retained and kind not in RETAINABLE:
                raise InvalidArgument(f"retained messages are not allowed on {env.topic}")
        with self._lock:
            if self._closed:
                raise Unavailable("broker is shut down")
            msg_id = next(self._ids)
            self.published.append(env)
            if env.retained:
                if env.payload:
                    self._retained[env.topic] = env
                else:
                    self._retained.pop(env.topic, None)
            count = 0
            for sub in self._subs:
                if not topic_matches(sub.pattern, env.topic):
                    continue
                if sub.no_local and sub.subscriber_id and sub.subscriber_id == env.sender_id:
                    continue
                self._enqueue(sub, env)
                count += 1
                if env.qos == 1 and self.duplicate_qos1:
                    self._enqueue(sub, env)
                    count += 1
        self._drain()
        return Receipt(msg_id, count)

    def _enqueue(self, sub: Subscription, env: Envelope) -> None:
        self._queue.append((sub, env))

    def _drain(self) -> None:
        with self._lock:
            if self._draining:
                return
            self._draining = True
        try:
            while True:
                with self._lock:
                    if not self._queue:
                        self._draining = False
                        return
                    sub, env = self._queue.popleft()
                    if not sub.active:
                        continue
                    self.delivery_log.append((sub.subscriber_id, env))
                try:
                    sub.handler(env)
                except Exception:
                    logger.exception("handler for %s failed on %s", sub.pattern, env.topic)
        except BaseException:
            with self._lock:
                self._draining = False
            raise

    def retained(self, topic: str) -> Optional[Envelope]:
        return self._retained.get(topic)

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
            self._subs.clear()
            self._queue.clear()

    @property
    def closed(self) -> bool:
        return self._closed

    def publish_counts(self) -> Counter:
        return Counter(topic_kind(e.topic) for e in self.published)

    def delivery_count(self) -> int:
        return len(self.delivery_log)


class LogicalClock:
    """Per-node monotonic counter used to stamp outgoing envelopes."""

    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    def tick(self) -> int:
        with self._lock:
            self._value += 1
            return self._value

    def observe(self, remote: int) -> int:
        with self._lock:
            self._value = max(self._value, remote) + 1
            return self._value

    @property
    def value(self) -> int:
        return self._value


class Client:
    """A named broker endpoint that stamps and encodes outgoing protocol messages."""

    def __init__(self, broker: InProcessBroker, client_id: str):
        self.broker = broker
        self.client_id = client_id
        self.clock = LogicalClock()
        self._subs: List[Subscription] = []

    def send(self, topic: str, msg_type: str, correlation_id: str = "", qos: int = 1,
             retained: bool = False, **fields: Any) -> Receipt:
        env = Envelope(topic=topic, payload=encode_message(msg_type, **fields), qos=qos,
                       retained=retained, correlation_id=correlation_id,
                       sender_id=self.client_id, sent_at=self.clock.tick())
        return self.broker.publish(env)

    def subscribe(self, pattern: str, handler: Handler, no_local: bool = False) -> Subscription:
        def observed(env: Envelope) -> None:
            self.clock.observe(env.sent_at)
            handler(env)

        sub = self.broker.subscribe(pattern, observed, self.client_id, no_local)
        self._subs.append(sub)
        return sub

    def close(self) -> None:
        for sub in self._subs:
            sub.unsubscribe()
        self._subs.clear()


class Deduplicator:
    """Remembers processed message keys so at-least-once delivery has an exactly-once effect."""

    def __init__(self):
        self._seen = set()
        self.duplicates = 0

    def first(self, *key: Any) -> bool:
        if key in self._seen:
            self.duplicates += 1
            return False
        self._seen.add(key)
        return True


# External MQTT v5 broker seam.  Envelope metadata travels as v5 user properties.

def to_mqtt(env: Envelope) -> Dict[str, Any]:
    return {
        "topic": env.topic,
        "payload": env.payload,
        "qos": env.qos,
        "retain": env.retained,
        "user_properties": [("correlation_id", env.correlation_id),
                            ("sender_id", env.sender_id),
                            ("sent_at", str(env.sent_at))],
    }


def from_mqtt(topic: str, payload: bytes, qos: int, retain: bool,
              user_properties: Mapping[str, str] | List[Tuple[str, str]]) -> Envelope:
    props = dict(user_properties)
    return Envelope(topic=topic, payload=bytes(payload), qos=min(qos, 1), retained=bool(retain),
                    correlation_id=props.get("correlation_id", ""),
                    sender_id=props.get("sender_id", ""),
                    sent_at=int(props.get("sent_at", "0")))


class MqttBrokerAdapter:
    """Publish/subscribe against an external MQTT v5 broker through paho-mqtt.

    Offers the same ``publish``/``subscribe`` surface as :class:`InProcessBroker`.
    Requires the optional ``paho-mqtt`` dependency.
    """

    def __init__(self, host: str = "localhost", port: int = 1883, client_id: str = "foa"):
        try:
            import paho.mqtt.client as mqtt
            from paho.mqtt.packettypes import PacketTypes
            from paho.mqtt.properties import Properties
        except ImportError as exc:
            raise ImportError("MqttBrokerAdapter needs paho-mqtt: pip install 'paho-mqtt>=2'") from exc
        self._Properties, self._PacketTypes = Properties, PacketTypes
        self._client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=client_id,
                                   protocol=mqtt.MQTTv5)
        self._handlers: List[Tuple[str, Handler]] = []
        self._client.on_message = self._on_message
        self._client.connect(host, port)
        self._client.loop_start()

    def _on_message(self, client, userdata, msg):
        props = getattr(msg.properties, "UserProperty", None) or []
        env = from_mqtt(msg.topic, msg.payload, msg.qos, msg.retain, props)
        for pattern, handler in list(self._handlers):
            if topic_matches(pattern, env.topic):
                handler(env)

    def publish(self, env: Envelope) -> Receipt:
        validate_topic(env.topic)
        wire = to_mqtt(env)
        props = self._Properties(self._PacketTypes.PUBLISH)
        props.UserProperty = wire["user_properties"]
        info = self._client.publish(wire["topic"], wire["payload"], wire["qos"], wire["retain"], props)
        return Receipt(info.mid, -1)

    def subscribe(self, pattern: str, handler: Handler, subscriber_id: str = "", no_local: bool = False):
        import paho.mqtt.client as mqtt

        validate_pattern(pattern)
        self._handlers.append((pattern, handler))
        self._client.subscribe(pattern, options=mqtt.SubscribeOptions(qos=1, noLocal=no_local))

    def shutdown(self) -> None:
        self._client.loop_stop()
        self._client.disconnect()
