"""Similarity-based cluster formation among the agents assigned to one subtask."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .capability import EMBED_DIM, Vcv, embed_text
from .errors import InvalidArgument
from .transport import CLUSTER_CHANNEL, topic_for

DEFAULT_CUT = 0.2
DEFAULT_MAX_SIZE = 4


@dataclass(frozen=True)
class ClusterWeights:
    capability: float = 0.25
    resource: float = 0.25
    draft: float = 0.25
    spec: float = 0.25

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws) or abs(sum(ws) - 1.0) > 1e-9:
            raise InvalidArgument(f"cluster weights must be non-negative and sum to 1, got {ws}")

    def as_tuple(self):
        return (self.capability, self.resource, self.draft, self.spec)


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    subtask_id: str
    members: tuple
    channel_topic: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(self.members)))
        if not self.members:
            raise InvalidArgument("a cluster needs at least one member")
        expected = topic_for(CLUSTER_CHANNEL, self.cluster_id)
        if not self.channel_topic:
            object.__setattr__(self, "channel_topic", expected)
        elif self.channel_topic != expected:
            raise InvalidArgument(f"channel {self.channel_topic!r} does not match cluster id")


def _resource_cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(agents: Sequence[Vcv], drafts: Mapping[str, str],
                      weights: ClusterWeights = ClusterWeights(),
                      counter: Optional[Counter] = None) -> np.ndarray:
    """Weighted sum of capability, resource, draft and spec cosines; diagonal fixed at 1."""
    missing = [a.agent_id for a in agents if a.agent_id not in drafts]
    if missing:
        raise InvalidArgument(f"no draft for agents {missing}")
    w1, w2, w3, w4 = weights.as_tuple()
    draft_emb = [embed_text(drafts[a.agent_id], EMBED_DIM) for a in agents]
    n = len(agents)
    S = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = agents[i], agents[j]
            S[i, j] = S[j, i] = (w1 * float(np.dot(a.c, b.c))
                                 + w2 * _resource_cos(a.r, b.r)
                                 + w3 * float(np.dot(draft_emb[i], draft_emb[j]))
                                 + w4 * float(np.dot(a.e, b.e)))
            if counter is not None:
                counter["similarity_entries"] += 1
    return S


def hier_cluster(S, cut: float = DEFAULT_CUT, max_size: int = DEFAULT_MAX_SIZE,
                 ids: Optional[Sequence] = None) -> List[List]:
    """Average-linkage agglomeration under a similarity cut and a size cap.

    Repeatedly merges the pair of clusters with the highest mean pairwise
    similarity among pairs whose union fits ``max_size``; stops once that best
    value drops below ``cut``.  Ties go to the pair with the smaller member ids.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0] if S.ndim == 2 else 0
    if n == 0:
        return []
    if S.shape != (n, n) or not np.allclose(S, S.T):
        raise InvalidArgument("similarity matrix must be square and symmetric")
    if max_size < 1:
        raise InvalidArgument("max_size must be positive")
    ids = list(range(n)) if ids is None else list(ids)
    if len(ids) != n or len(set(ids)) != n:
        raise InvalidArgument("ids must be unique and match the matrix size")
    # work in id order so permuted inputs behave identically
    perm = sorted(range(n), key=lambda i: ids[i])
    S = S[np.ix_(perm, perm)]
    labels = [ids[i] for i in perm]

    clusters: Dict[int, List[int]] = {i: [i] for i in range(n)}
    sums = S.copy()
    while True:
        best = None
        keys = sorted(clusters)
        for x, a in enumerate(keys):
            for b in keys[x + 1:]:
                if len(clusters[a]) + len(clusters[b]) > max_size:
                    continue
                avg = sums[a, b] / (len(clusters[a]) * len(clusters[b]))
                if best is None or avg > best[0]:
                    best = (avg, a, b)
        if best is None or best[0] < cut:
            break
        _, a, b = best
        clusters[a].extend(clusters.pop(b))
        sums[a, :] += sums[b, :]
        sums[:, a] += sums[:, b]
    out = [sorted(labels[i] for i in members) for members in clusters.values()]
    out.sort(key=lambda members: members[0])
    return out


def form_clusters(job_id: str, subtask_id: str, partition: Sequence[Sequence[str]],
                  attempt: int = 1) -> List[Cluster]:
    stem = f"{job_id}.{subtask_id}" if attempt == 1 else f"{job_id}.{subtask_id}.a{attempt}"
    return [Cluster(f"{stem}.c{n}", subtask_id, tuple(members))
            for n, members in enumerate(partition, start=1)]
