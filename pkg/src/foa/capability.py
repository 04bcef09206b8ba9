"""Versioned Capability Vectors and the plumbing around them.

A VCV is an immutable snapshot ``(c, s, r, p, e, v)`` of one agent: capability
embedding, skill Bloom filter, resource vector, policy bits, spec embedding and
version counter.  Sets of VCVs are reconciled between nodes by exchanging only
version-superseding entries (delta gossip).
"""
from __future__ import annotations

import base64
import functools
import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgument, NoChange, ProtocolError

EMBED_DIM = 768
REDUCED_DIM = 256
BLOOM_BITS = 1024
BLOOM_HASHES = 4
POLICY_BITS = 64
RESOURCE_FIELDS = ("latency_ms", "bandwidth_mbps", "memory_gb", "energy_units")
NORM_TOL = 1e-6

_EMBED_KEY = b"foa-embed-v1"
_PROJECTION_SEED = 20250917
_TOKEN_RE = re.compile(r"[a-z0-9]+")

Vector = np.ndarray


def tokenize(text: str) -> List[str]:
    """Lowercase alphanumeric tokens; punctuation and whitespace separate."""
    return _TOKEN_RE.findall(text.lower())


def _unit(vec: np.ndarray, what: str = "vector") -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not math.isfinite(norm):
        raise InvalidArgument(f"cannot normalize zero or non-finite {what}")
    return vec / norm


def is_unit(vec: Sequence[float], tol: float = NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(vec)) - 1.0) <= tol


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise InvalidArgument("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Deterministic signed feature-hashing embedder.

    Every token is hashed into one of ``dim`` buckets with a pseudo-random sign;
    texts sharing tokens therefore have high cosine similarity.  The result is
    L2-normalized.
    """
    if not isinstance(text, str) or not text.strip():
        raise InvalidArgument("embed_text requires non-empty text")
    if dim not in (REDUCED_DIM, EMBED_DIM):
        raise InvalidArgument(f"unsupported embedding dimension {dim}")
    tokens = tokenize(text) or [text.strip()]
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_EMBED_KEY).digest()
        h = int.from_bytes(digest, "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    if not vec.any():
        # every token cancelled out against a colliding opposite-sign token
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=_EMBED_KEY).digest()
        vec[int.from_bytes(digest, "little") % dim] = 1.0
    return _unit(vec)


@functools.lru_cache(maxsize=1)
def _projection() -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    mat = rng.standard_normal((EMBED_DIM, REDUCED_DIM)) / math.sqrt(REDUCED_DIM)
    mat.setflags(write=False)
    return mat


def reduce_dim(vec: Sequence[float]) -> np.ndarray:
    """Project a 768-d embedding to 256-d with a fixed Gaussian map and renormalize."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (EMBED_DIM,):
        raise InvalidArgument(f"reduce_dim expects length {EMBED_DIM}, got {arr.shape}")
    if not arr.any():
        raise InvalidArgument("cannot reduce a zero vector")
    return _unit(arr @ _projection(), "projected vector")


@dataclass(frozen=True)
class BitSet:
    """Fixed-length immutable bit array backed by a Python int."""

    size: int
    bits: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise InvalidArgument("bit set size must be positive")
        if self.bits < 0 or self.bits >> self.size:
            raise InvalidArgument("bits outside of the declared size")

    @classmethod
    def from_indices(cls, size: int, indices: Iterable[int]) -> "BitSet":
        bits = 0
        for i in indices:
            if not 0 <= i < size:
                raise InvalidArgument(f"bit index {i} out of range for size {size}")
            bits |= 1 << i
        return cls(size, bits)

    def set(self, i: int) -> "BitSet":
        if not 0 <= i < self.size:
            raise InvalidArgument(f"bit index {i} out of range for size {self.size}")
        return BitSet(self.size, self.bits | (1 << i))

    def clear(self, i: int) -> "BitSet":
        return BitSet(self.size, self.bits & ~(1 << i))

    def __contains__(self, i: int) -> bool:
        return bool((self.bits >> i) & 1)

    def indices(self) -> List[int]:
        return [i for i in range(self.size) if (self.bits >> i) & 1]

    def count(self) -> int:
        return bin(self.bits).count("1")

    def issubset(self, other: "BitSet") -> bool:
        if self.size != other.size:
            raise InvalidArgument("bit sets of different lengths")
        return self.bits & ~other.bits == 0

    def to_b64(self) -> str:
        return base64.b64encode(self.bits.to_bytes((self.size + 7) // 8, "little")).decode("ascii")

    @classmethod
    def from_b64(cls, size: int, data: str) -> "BitSet":
        raw = base64.b64decode(data.encode("ascii"), validate=True)
        if len(raw) != (size + 7) // 8:
            raise InvalidArgument("encoded bit set has the wrong length")
        return cls(size, int.from_bytes(raw, "little"))


@dataclass(frozen=True)
class BloomFilter:
    bitset: BitSet = field(default_factory=lambda: BitSet(BLOOM_BITS))
    hashes: int = BLOOM_HASHES

    @classmethod
    def empty(cls, size: int = BLOOM_BITS, hashes: int = BLOOM_HASHES) -> "BloomFilter":
        if hashes < 1:
            raise InvalidArgument("a Bloom filter needs at least one hash function")
        return cls(BitSet(size), hashes)

    @classmethod
    def of(cls, items: Iterable[str], size: int = BLOOM_BITS, hashes: int = BLOOM_HASHES) -> "BloomFilter":
        f = cls.empty(size, hashes)
        for item in items:
            f = bloom_insert(f, item)
        return f

    @property
    def size(self) -> int:
        return self.bitset.size

    def positions(self, item: str) -> List[int]:
        # double hashing: g_i(x) = h1(x) + i * h2(x)
        digest = hashlib.blake2b(item.encode("utf-8"), digest_size=16).digest()
        h1 = int.from_bytes(digest[:8], "little")
        h2 = int.from_bytes(digest[8:], "little") | 1
        return [(h1 + i * h2) % self.size for i in range(self.hashes)]

    def __contains__(self, item: str) -> bool:
        return bloom_contains(self, item)


def bloom_insert(f: BloomFilter, item: str) -> BloomFilter:
    bits = f.bitset.bits
    for pos in f.positions(item):
        bits |= 1 << pos
    return BloomFilter(BitSet(f.size, bits), f.hashes)


def bloom_contains(f: BloomFilter, item: str) -> bool:
    return all(pos in f.bitset for pos in f.positions(item))


def bloom_false_positive_rate(n_items: int, size: int = BLOOM_BITS, hashes: int = BLOOM_HASHES) -> float:
    """Analytic expectation (1 - e^{-hn/l})^h."""
    return (1.0 - math.exp(-hashes * n_items / size)) ** hashes


def _frozen_vector(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgument(f"{name} must be a non-empty 1-d vector")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Vcv:
    """Immutable capability profile; any mutation goes through :func:`bump_version`."""

    agent_id: str
    c: np.ndarray
    s: BloomFilter
    r: np.ndarray
    p: BitSet
    e: np.ndarray
    v: int = 0

    def __post_init__(self):
        if not self.agent_id:
            raise InvalidArgument("agent_id must be non-empty")
        for name in ("c", "e"):
            vec = _frozen_vector(getattr(self, name), name)
            if not is_unit(vec):
                raise InvalidArgument(f"{name} must be L2-normalized (norm={np.linalg.norm(vec):.9f})")
            object.__setattr__(self, name, vec)
        r = _frozen_vector(self.r, "r")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise InvalidArgument("resource entries must be finite and non-negative")
        object.__setattr__(self, "r", r)
        if not isinstance(self.v, int) or self.v < 0:
            raise InvalidArgument("version must be a non-negative integer")

    def __eq__(self, other):
        if not isinstance(other, Vcv):
            return NotImplemented
        return (self.agent_id == other.agent_id and self.v == other.v
                and self.s == other.s and self.p == other.p
                and np.array_equal(self.c, other.c)
                and np.array_equal(self.r, other.r)
                and np.array_equal(self.e, other.e))

    __hash__ = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "c": self.c.tolist(),
            "s": self.s.bitset.to_b64(),
            "s_bits": self.s.size,
            "s_hashes": self.s.hashes,
            "r": self.r.tolist(),
            "p": self.p.to_b64(),
            "p_bits": self.p.size,
            "e": self.e.tolist(),
            "v": self.v,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Vcv":
        try:
            s_bits = d.get("s_bits", BLOOM_BITS)
            p_bits = d.get("p_bits", POLICY_BITS)
            return cls(
                agent_id=d["agent_id"],
                c=d["c"],
                s=BloomFilter(BitSet.from_b64(s_bits, d["s"]), d.get("s_hashes", BLOOM_HASHES)),
                r=d["r"],
                p=BitSet.from_b64(p_bits, d["p"]),
                e=d["e"],
                v=d["v"],
            )
        except KeyError as exc:
            raise InvalidArgument(f"VCV record missing field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vcv":
        return cls.from_dict(json.loads(text))


_MUTABLE = ("c", "s", "r", "p", "e")


def bump_version(vcv: Vcv, **changes) -> Vcv:
    """Return a copy with ``changes`` applied and the version incremented by one."""
    unknown = set(changes) - set(_MUTABLE)
    if unknown:
        raise InvalidArgument(f"fields not mutable through bump_version: {sorted(unknown)}")
    fields = {name: getattr(vcv, name) for name in _MUTABLE}
    changed = False
    for name, value in changes.items():
        old = fields[name]
        if isinstance(old, np.ndarray):
            same = np.array_equal(old, np.asarray(value, dtype=np.float64))
        else:
            same = old == value
        if not same:
            changed = True
            fields[name] = value
    if not changed:
        raise NoChange(f"mutation leaves VCV of {vcv.agent_id} unchanged")
    return Vcv(agent_id=vcv.agent_id, v=vcv.v + 1, **fields)


@dataclass(frozen=True)
class SpecDocument:
    agent_id: str
    goals: Tuple[str, ...] = ()
    rules: Tuple[str, ...] = ()
    tools: Tuple[str, ...] = ()
    text: str = field(init=False)

    def __post_init__(self):
        for name in ("goals", "rules", "tools"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "text", render_spec(self.agent_id, self.goals, self.rules, self.tools))

    def capability_text(self, skills: Iterable[str] = ()) -> str:
        parts = list(self.goals) + list(self.tools) + sorted(skills)
        return " ; ".join(parts) if parts else self.agent_id

    def to_dict(self) -> Dict[str, Any]:
        return {"agent_id": self.agent_id, "goals": list(self.goals),
                "rules": list(self.rules), "tools": list(self.tools)}


def render_spec(agent_id: str, goals: Sequence[str], rules: Sequence[str], tools: Sequence[str]) -> str:
    lines = [f"Agent {agent_id}."]
    lines += [f"Goal: {g}." for g in goals]
    lines += [f"Rule: {r}." for r in rules]
    lines += [f"Tool: {t}." for t in tools]
    return "\n".join(lines)


@dataclass(frozen=True)
class VcvDelta:
    origin_id: str
    entries: Tuple[Tuple[str, Vcv], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((a, v) for a, v in self.entries))

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> Dict[str, Any]:
        return {"origin_id": self.origin_id,
                "entries": [vcv.to_dict() for _, vcv in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "VcvDelta":
        entries = [Vcv.from_dict(e) for e in d.get("entries", [])]
        return cls(d["origin_id"], tuple((v.agent_id, v) for v in entries))


def digest(local: Mapping[str, Vcv]) -> Dict[str, int]:
    return {agent_id: vcv.v for agent_id, vcv in local.items()}


def diff_deltas(local: Mapping[str, Vcv], remote_digest: Mapping[str, int], origin_id: str = "") -> VcvDelta:
    entries = [(agent_id, vcv) for agent_id, vcv in sorted(local.items())
               if agent_id not in remote_digest or vcv.v > remote_digest[agent_id]]
    return VcvDelta(origin_id, tuple(entries))


def apply_delta(local: Mapping[str, Vcv], delta: VcvDelta) -> Dict[str, Vcv]:
    """Highest version wins per agent; equal versions keep the incumbent."""
    seen = set()
    for agent_id, vcv in delta.entries:
        if agent_id in seen:
            raise ProtocolError(f"delta from {delta.origin_id!r} repeats agent {agent_id!r}")
        if agent_id != vcv.agent_id:
            raise ProtocolError(f"delta entry key {agent_id!r} does not match VCV {vcv.agent_id!r}")
        seen.add(agent_id)
    merged = dict(local)
    for agent_id, vcv in delta.entries:
        current = merged.get(agent_id)
        if current is None or vcv.v > current.v:
            merged[agent_id] = vcv
    return merged


class VcvStore:
    """A node's VCV set with serialized apply and per-agent version history."""

    def __init__(self, node_id: str, initial: Optional[Mapping[str, Vcv]] = None):
        self.node_id = node_id
        self._lock = threading.Lock()
        self._vcvs: Dict[str, Vcv] = {}
        self.history: Dict[str, List[int]] = {}
        for vcv in (initial or {}).values():
            self.put(vcv)

    def _observe(self, vcv: Vcv) -> None:
        self.history.setdefault(vcv.agent_id, []).append(vcv.v)

    def put(self, vcv: Vcv) -> bool:
        """Install a VCV if it supersedes the local one; return whether it did."""
        with self._lock:
            current = self._vcvs.get(vcv.agent_id)
            if current is not None and vcv.v <= current.v:
                return False
            self._vcvs[vcv.agent_id] = vcv
            self._observe(vcv)
            return True

    def get(self, agent_id: str) -> Optional[Vcv]:
        return self._vcvs.get(agent_id)

    def snapshot(self) -> Dict[str, Vcv]:
        with self._lock:
            return dict(self._vcvs)

    def digest(self) -> Dict[str, int]:
        with self._lock:
            return digest(self._vcvs)

    def delta_for(self, remote_digest: Mapping[str, int]) -> VcvDelta:
        with self._lock:
            return diff_deltas(self._vcvs, remote_digest, self.node_id)

    def apply(self, delta: VcvDelta) -> int:
        with self._lock:
            merged = apply_delta(self._vcvs, delta)
            changed = 0
            for agent_id, vcv in sorted(merged.items()):
                if self._vcvs.get(agent_id) is not vcv:
                    self._observe(vcv)
                    changed += 1
            self._vcvs = merged
            return changed

    def __len__(self):
        return len(self._vcvs)


def exchange(a: VcvStore, b: VcvStore) -> int:
    """One bidirectional anti-entropy exchange; returns entries transferred."""
    to_a = b.delta_for(a.digest())
    to_b = a.delta_for(b.digest())
    a.apply(to_a)
    b.apply(to_b)
    return len(to_a) + len(to_b)
