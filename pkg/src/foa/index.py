"""Sharded HNSW index over capability embeddings.

Each shard is an independent hierarchical navigable small-world graph using
cosine distance (``1 - dot`` on unit vectors).  Agents are routed to shards by a
stable hash of their id; superseded versions are tombstoned and a shard is
rebuilt once more than a quarter of its nodes are tombstones.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .capability import EMBED_DIM, REDUCED_DIM, Vcv, is_unit, reduce_dim
from .errors import InvalidArgument

SNAPSHOT_FORMAT = "foa-hnsw-snapshot"


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 1234

    def __post_init__(self):
        if self.M < 2:
            raise InvalidArgument("HNSW requires M >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise InvalidArgument("beam widths must be positive")

    @property
    def level_lambda(self) -> float:
        return 1.0 / math.log(self.M)


class _RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class HnswGraph:
    def __init__(self, dim: int, params: HnswParams = HnswParams(), seed: int = 0):
        self.dim = dim
        self.params = params
        self.rng = random.Random(seed)
        self._vecs = np.zeros((16, dim), dtype=np.float64)
        self.labels: List[str] = []
        self.versions: List[int] = []
        self.levels: List[int] = []
        self.links: List[List[List[int]]] = []
        self.deleted: set = set()
        self.entry: Optional[int] = None
        self.max_level = -1
        self.distance_evals = 0

    def __len__(self):
        return len(self.labels)

    @property
    def live_count(self) -> int:
        return len(self.labels) - len(self.deleted)

    def vector(self, node: int) -> np.ndarray:
        return self._vecs[node]

    def _dist(self, q: np.ndarray, ids: List[int]) -> np.ndarray:
        self.distance_evals += len(ids)
        return 1.0 - self._vecs[ids] @ q

    def _search_layer(self, q, entries: List[int], ef: int, level: int) -> List[Tuple[float, int]]:
        visited = set(entries)
        dists = self._dist(q, entries)
        candidates = [(float(d), n) for d, n in zip(dists, entries)]
        heapq.heapify(candidates)
        best = [(-d, n) for d, n in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while candidates:
            d_c, c = heapq.heappop(candidates)
            if d_c > -best[0][0] and len(best) >= ef:
                break
            fresh = [n for n in self.links[c][level] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for d_n, n in zip(self._dist(q, fresh), fresh):
                d_n = float(d_n)
                if len(best) < ef or d_n < -best[0][0]:
                    heapq.heappush(candidates, (d_n, n))
                    heapq.heappush(best, (-d_n, n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-nd, n) for nd, n in best)

    def _select_neighbors(self, candidates: List[Tuple[float, int]], m: int) -> List[int]:
        # diversity heuristic; pruned candidates backfill up to m
        selected: List[int] = []
        pruned: List[int] = []
        for d, c in candidates:
            if len(selected) >= m:
                break
            if selected:
                self.distance_evals += len(selected)
                to_selected = 1.0 - self._vecs[selected] @ self._vecs[c]
                if np.any(to_selected < d):
                    pruned.append(c)
                    continue
            selected.append(c)
        for c in pruned:
            if len(selected) >= m:
                break
            selected.append(c)
        return selected

    def _random_level(self) -> int:
        u = self.rng.random()
        return int(-math.log(1.0 - u) * self.params.level_lambda)

    def add(self, vec: np.ndarray, label: str, version: int = 0) -> int:
        node = len(self.labels)
        if node == self._vecs.shape[0]:
            grown = np.zeros((2 * node, self.dim), dtype=np.float64)
            grown[:node] = self._vecs[:node]
            self._vecs = grown
        self._vecs[node] = vec
        level = self._random_level()
        self.labels.append(label)
        self.versions.append(version)
        self.levels.append(level)
        self.links.append([[] for _ in range(level + 1)])
        if self.entry is None:
            self.entry, self.max_level = node, level
            return node

        q = self._vecs[node]
        M = self.params.M
        ep = [self.entry]
        for lc in range(self.max_level, level, -1):
            ep = [self._search_layer(q, ep, 1, lc)[0][1]]
        for lc in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, ep, self.params.ef_construction, lc)
            neighbors = self._select_neighbors(found, M)
            self.links[node][lc] = list(neighbors)
            m_max = 2 * M if lc == 0 else M
            for n in neighbors:
                adj = self.links[n][lc]
                adj.append(node)
                if len(adj) > m_max:
                    d = self._dist(self._vecs[n], adj)
                    ranked = sorted(zip(d.tolist(), adj))
                    self.links[n][lc] = self._select_neighbors(ranked, m_max)
            ep = [n for _, n in found]
        if level > self.max_level:
            self.entry, self.max_level = node, level
        return node

    def search(self, q: np.ndarray, k: int, ef: int) -> List[Tuple[float, int]]:
        if self.entry is None or self.live_count == 0:
            return []
        ep = [self.entry]
        for lc in range(self.max_level, 0, -1):
            ep = [self._search_layer(q, ep, 1, lc)[0][1]]
        found = self._search_layer(q, ep, max(ef, k) + len(self.deleted), 0)
        return [(d, n) for d, n in found if n not in self.deleted][:k]

    def degree_ok(self) -> bool:
        M = self.params.M
        return all(len(adj) <= (2 * M if lc == 0 else M)
                   for node_links in self.links for lc, adj in enumerate(node_links))

    def to_dict(self) -> dict:
        state = self.rng.getstate()
        return {
            "entry": self.entry,
            "max_level": self.max_level,
            "rng_state": [state[0], list(state[1]), state[2]],
            "nodes": [
                {"label": self.labels[i], "version": self.versions[i], "level": self.levels[i],
                 "deleted": i in self.deleted, "vector": self._vecs[i].tolist(), "links": self.links[i]}
                for i in range(len(self.labels))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, dim: int, params: HnswParams) -> "HnswGraph":
        g = cls(dim, params)
        state = d["rng_state"]
        g.rng.setstate((state[0], tuple(state[1]), state[2]))
        nodes = d["nodes"]
        g._vecs = np.zeros((max(16, len(nodes)), dim), dtype=np.float64)
        for i, node in enumerate(nodes):
            g._vecs[i] = node["vector"]
            g.labels.append(node["label"])
            g.versions.append(node["version"])
            g.levels.append(node["level"])
            g.links.append([list(adj) for adj in node["links"]])
            if node["deleted"]:
                g.deleted.add(i)
        g.entry = d["entry"]
        g.max_level = d["max_level"]
        return g


def stable_shard(agent_id: str, n_shards: int) -> int:
    h = hashlib.blake2b(agent_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % n_shards


class ShardedIndex:
    def __init__(self, dim: int = REDUCED_DIM, params: HnswParams = HnswParams(),
                 n_shards: int = 4, compact_ratio: float = 0.25):
        if n_shards < 1:
            raise InvalidArgument("need at least one shard")
        self.dim = dim
        self.params = params
        self.n_shards = n_shards
        self.compact_ratio = compact_ratio
        self.shards = [HnswGraph(dim, params, self._shard_seed(i, 0)) for i in range(n_shards)]
        self._locks = [_RWLock() for _ in range(n_shards)]
        self._generation = [0] * n_shards
        self.id_map: Dict[str, Tuple[int, int, int]] = {}
        self.rebuilds = 0

    def _shard_seed(self, shard: int, generation: int) -> int:
        return self.params.seed * 1_000_003 + shard * 7919 + generation

    def shard_of(self, agent_id: str) -> int:
        return stable_shard(agent_id, self.n_shards)

    def project(self, vec) -> np.ndarray:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape == (self.dim,):
            return arr
        if arr.shape == (EMBED_DIM,) and self.dim == REDUCED_DIM:
            return reduce_dim(arr)
        raise InvalidArgument(f"vector of shape {arr.shape} does not fit an index of dim {self.dim}")

    def __len__(self):
        return len(self.id_map)

    def __contains__(self, agent_id: str) -> bool:
        return agent_id in self.id_map

    def version_of(self, agent_id: str) -> Optional[int]:
        entry = self.id_map.get(agent_id)
        return entry[2] if entry else None

    def insert(self, agent_id: str, vector, version: int = 0) -> bool:
        """Insert or supersede; returns False when ``version`` is stale."""
        if not is_unit(vector):
            raise InvalidArgument("index vectors must be unit-norm")
        vec = self.project(vector)
        existing = self.id_map.get(agent_id)
        if existing is not None and version <= existing[2]:
            return False
        shard = self.shard_of(agent_id)
        with self._locks[shard].write():
            graph = self.shards[shard]
            if existing is not None:
                graph.deleted.add(existing[1])
            node = graph.add(vec, agent_id, version)
            self.id_map[agent_id] = (shard, node, version)
            if len(graph.deleted) > self.compact_ratio * len(graph):
                self._rebuild(shard)
        return True

    def insert_vcv(self, vcv: Vcv) -> bool:
        return self.insert(vcv.agent_id, vcv.c, vcv.v)

    def remove(self, agent_id: str) -> bool:
        entry = self.id_map.pop(agent_id, None)
        if entry is None:
            return False
        shard, node, _ = entry
        with self._locks[shard].write():
            self.shards[shard].deleted.add(node)
            graph = self.shards[shard]
            if len(graph.deleted) > self.compact_ratio * len(graph):
                self._rebuild(shard)
        return True

    def _rebuild(self, shard: int) -> None:
        old = self.shards[shard]
        self._generation[shard] += 1
        fresh = HnswGraph(self.dim, self.params, self._shard_seed(shard, self._generation[shard]))
        for node in range(len(old)):
            if node in old.deleted:
                continue
            label = old.labels[node]
            new_node = fresh.add(old.vector(node), label, old.versions[node])
            self.id_map[label] = (shard, new_node, old.versions[node])
        self.shards[shard] = fresh
        self.rebuilds += 1

    def search(self, query, k: int, ef: Optional[int] = None) -> List[Tuple[str, float]]:
        if k < 1:
            raise InvalidArgument("k must be positive")
        if not is_unit(query):
            raise InvalidArgument("query must be unit-norm")
        q = self.project(query)
        ef = max(ef or self.params.ef_search, k)
        merged: List[Tuple[str, float]] = []
        for shard, graph in enumerate(self.shards):
            with self._locks[shard].read():
                for d, node in graph.search(q, k, ef):
                    merged.append((graph.labels[node], 1.0 - d))
        merged.sort(key=lambda item: (-item[1], item[0]))
        return merged[:k]

    @property
    def distance_evals(self) -> int:
        return sum(g.distance_evals for g in self.shards)

    def save(self, path) -> None:
        doc = {
            "format": SNAPSHOT_FORMAT,
            "params": asdict(self.params),
            "n_shards": self.n_shards,
            "dim": self.dim,
            "compact_ratio": self.compact_ratio,
            "generation": self._generation,
            "shards": [g.to_dict() for g in self.shards],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "ShardedIndex":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != SNAPSHOT_FORMAT:
            raise InvalidArgument(f"{path} is not an index snapshot")
        params = HnswParams(**doc["params"])
        index = cls(doc["dim"], params, doc["n_shards"], doc["compact_ratio"])
        index._generation = list(doc["generation"])
        index.shards = [HnswGraph.from_dict(s, index.dim, params) for s in doc["shards"]]
        for shard, graph in enumerate(index.shards):
            for node, label in enumerate(graph.labels):
                if node not in graph.deleted:
                    index.id_map[label] = (shard, node, graph.versions[node])
        return index


def index_insert(index: ShardedIndex, vcv: Vcv) -> ShardedIndex:
    index.insert_vcv(vcv)
    return index


def index_search(index: ShardedIndex, query, k: int) -> List[Tuple[str, float]]:
    return index.search(query, k)

