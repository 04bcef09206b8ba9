import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foa.capability import POLICY_BITS, BitSet, BloomFilter, Vcv, embed_text
from foa.cluster import Cluster, ClusterWeights, form_clusters, hier_cluster, similarity_matrix
from foa.errors import InvalidArgument


def vcv(aid, c, e, r):
    return Vcv(agent_id=aid, c=c, s=BloomFilter.empty(), r=np.asarray(r, float), p=BitSet(POLICY_BITS), e=e, v=0)


def basis(i):
    v = np.zeros(768)
    v[i] = 1
    return v


def rcos(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb == 0 else 0.0
    return float(a @ b / (na * nb))


def test_identical_all_ones():
    agents = [vcv(f"a{i}", basis(0), basis(1), [1, 2, 3, 4]) for i in range(3)]
    S = similarity_matrix(agents, {a.agent_id: "same draft" for a in agents})
    assert np.allclose(S, 1.0)


def test_capability_only_orthogonal():
    agents = [vcv(f"a{i}", basis(i), basis(5), [1, 1, 1, 1]) for i in range(3)]
    S = similarity_matrix(agents, {a.agent_id: f"d{a.agent_id}" for a in agents}, ClusterWeights(1, 0, 0, 0))
    assert np.allclose(S - np.eye(3), 0.0)


def test_matches_recompute_oracle():
    rng = np.random.default_rng(0)
    agents = []
    for i in range(3):
        c, e = rng.standard_normal(768), rng.standard_normal(768)
        agents.append(vcv(f"a{i}", c / np.linalg.norm(c), e / np.linalg.norm(e), rng.uniform(0, 5, 4) if i else [0, 0, 0, 0]))
    drafts = {"a0": "alpha beta", "a1": "beta gamma", "a2": "delta"}
    w = ClusterWeights(0.4, 0.1, 0.3, 0.2)
    S = similarity_matrix(agents, drafts, w)
    for i in range(3):
        for j in range(3):
            if i == j:
                assert S[i, j] == 1.0
                continue
            a, b = agents[i], agents[j]
            exp = (0.4 * float(a.c @ b.c) + 0.1 * rcos(a.r, b.r)
                   + 0.3 * float(embed_text(drafts[a.agent_id]) @ embed_text(drafts[b.agent_id]))
                   + 0.2 * float(a.e @ b.e))
            assert S[i, j] == pytest.approx(exp, abs=1e-9)


def test_missing_draft_and_weights():
    with pytest.raises(InvalidArgument):
        similarity_matrix([vcv("a", basis(0), basis(0), [0, 0, 0, 0])], {})
    with pytest.raises(InvalidArgument):
        ClusterWeights(0.5, 0.5, 0.5, 0.5)


def test_hier_examples():
    assert hier_cluster([[1.0]]) == [[0]]
    assert hier_cluster([[1, 0.9], [0.9, 1]]) == [[0, 1]]
    assert hier_cluster([[1, 0.1], [0.1, 1]]) == [[0], [1]]
    assert hier_cluster(np.zeros((0, 0))) == []


@st.composite
def sim_matrices(draw):
    n = draw(st.integers(1, 9))
    vals = draw(st.lists(st.floats(-1, 1), min_size=n * n, max_size=n * n))
    m = np.array(vals).reshape(n, n)
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


@given(sim_matrices(), st.integers(1, 4))
@settings(max_examples=80, deadline=None)
def test_partition_and_size_cap(S, max_size):
    parts = hier_cluster(S, 0.2, max_size)
    flat = sorted(x for p in parts for x in p)
    assert flat == list(range(len(S)))
    assert all(1 <= len(p) <= max_size for p in parts)


@given(sim_matrices(), st.floats(-1, 1), st.floats(-1, 1))
@settings(max_examples=80, deadline=None)
def test_cut_monotone(S, c1, c2):
    lo, hi = sorted((c1, c2))
    assert len(hier_cluster(S, hi, 4)) >= len(hier_cluster(S, lo, 4))


@given(sim_matrices(), st.randoms())
@settings(max_examples=60, deadline=None)
def test_permutation_invariant(S, rnd):
    n = len(S)
    ids = [f"a{i}" for i in range(n)]
    perm = list(range(n))
    rnd.shuffle(perm)
    P = S[np.ix_(perm, perm)]
    assert hier_cluster(S, 0.2, 4, ids) == hier_cluster(P, 0.2, 4, [ids[i] for i in perm])


def test_cluster_channel():
    c = Cluster("c42", "s1", ("b", "a"))
    assert c.members == ("a", "b") and c.channel_topic == "foa/clusters/c42/channel"
    with pytest.raises(InvalidArgument):
        Cluster("c1", "s1", ())
    ids = [c.cluster_id for c in form_clusters("job", "s01", [["a"], ["b"]])]
    assert ids == ["job.s01.c1", "job.s01.c2"]
    assert form_clusters("job", "s01", [["a"]], attempt=2)[0].cluster_id == "job.s01.a2.c1"
