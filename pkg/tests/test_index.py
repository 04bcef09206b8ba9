import numpy as np
import pytest

from foa.capability import POLICY_BITS, BitSet, BloomFilter, Vcv
from foa.errors import InvalidArgument
from foa.index import HnswGraph, HnswParams, ShardedIndex, index_insert, index_search, stable_shard

from oracles import brute_force_topk


def unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def vcv(aid, c, v=0):
    rng = np.random.default_rng(0)
    return Vcv(agent_id=aid, c=c, s=BloomFilter.empty(), r=np.zeros(4), p=BitSet(POLICY_BITS),
               e=unit(rng, 768), v=v)


def test_params():
    p = HnswParams()
    assert (p.M, p.ef_construction, p.ef_search) == (16, 200, 64)
    assert p.level_lambda == pytest.approx(1 / np.log(16))
    with pytest.raises(InvalidArgument):
        HnswParams(M=1)


def test_self_retrieval_and_supersede():
    rng = np.random.default_rng(1)
    idx = ShardedIndex()
    c1 = unit(rng, 768)
    index_insert(idx, vcv("A", c1, 1))
    assert index_search(idx, c1, 1)[0][0] == "A"
    c2 = unit(rng, 768)
    c2 = c2 - np.dot(c2, c1) * c1
    c2 /= np.linalg.norm(c2)
    index_insert(idx, vcv("A", c2, 2))
    assert idx.version_of("A") == 2
    hit = index_search(idx, c2, 1)[0]
    assert hit[0] == "A" and hit[1] == pytest.approx(1.0, abs=1e-6)
    assert len(index_search(idx, c1, 5)) == 1
    assert not idx.insert_vcv(vcv("A", c1, 1))
    assert idx.version_of("A") == 2


def test_empty_and_small():
    idx = ShardedIndex()
    rng = np.random.default_rng(2)
    assert idx.search(unit(rng, 256), 3) == []
    idx.insert("only", unit(rng, 256))
    assert [a for a, _ in idx.search(unit(rng, 256), 5)] == ["only"]


def test_k_larger_than_population_sorted():
    rng = np.random.default_rng(3)
    idx = ShardedIndex()
    vecs = {f"a{i}": unit(rng, 256) for i in range(12)}
    for aid, v in vecs.items():
        idx.insert(aid, v)
    q = unit(rng, 256)
    got = idx.search(q, 50)
    assert [a for a, _ in got] == [a for a, _ in brute_force_topk(vecs, q, 50)]


def test_rejects_non_unit():
    idx = ShardedIndex()
    with pytest.raises(InvalidArgument):
        idx.insert("x", np.ones(256))
    with pytest.raises(InvalidArgument):
        idx.search(np.ones(256), 1)


def test_tombstone_rebuild_and_degree():
    rng = np.random.default_rng(4)
    idx = ShardedIndex(n_shards=1)
    vecs = {f"a{i:02d}": unit(rng, 256) for i in range(40)}
    for aid, v in vecs.items():
        idx.insert(aid, v, 0)
    for aid in list(vecs)[:20]:
        vecs[aid] = unit(rng, 256)
        idx.insert(aid, vecs[aid], 1)
    assert idx.rebuilds >= 1
    assert all(g.degree_ok() for g in idx.shards)
    q = unit(rng, 256)
    assert idx.search(q, 10, ef=len(vecs)) == [(a, pytest.approx(s, abs=1e-9)) for a, s in brute_force_topk(vecs, q, 10)]


def test_stable_shard_in_range():
    assert all(0 <= stable_shard(f"agent-{i}", 4) < 4 for i in range(100))
    assert stable_shard("x", 4) == stable_shard("x", 4)


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    idx = ShardedIndex()
    for i in range(60):
        idx.insert(f"a{i}", unit(rng, 256))
    path = tmp_path / "index.json"
    idx.save(path)
    again = ShardedIndex.load(path)
    for _ in range(10):
        q = unit(rng, 256)
        assert again.search(q, 5) == idx.search(q, 5)
