import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featuredex.errors import (BadMagicError, DimensionMismatchError, DuplicateIdError,
                               EmptyTestSetError, MalformedError, TruncatedError,
                               VersionUnsupportedError)
from featuredex.retrieval import (build_index, decode_index, encode_index, evaluate,
                                  evaluate_frobenius, frobenius_norm, frobenius_rank, load_index,
                                  provenance_digest, query, ranking_metrics, save_index)


def _sum_of_squares_norm(a):
    total = 0.0
    for row in np.atleast_2d(a).tolist():
        for x in row:
            total += x * x
    return math.sqrt(total)


@pytest.mark.parametrize("matrix,expected", [
    (np.zeros((4, 4)), 0.0),
    (np.eye(3), math.sqrt(3)),
    (np.array([[1.0, 2.0], [3.0, 4.0]]), math.sqrt(30)),
])
def test_frobenius_examples(matrix, expected):
    got = frobenius_norm(matrix)
    assert got == pytest.approx(_sum_of_squares_norm(matrix), rel=1e-12, abs=0)
    assert got == pytest.approx(expected, rel=1e-12, abs=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 2**32))
def test_frobenius_random_against_oracle(n, m, seed):
    a = np.random.default_rng(seed).normal(size=(n, m))
    assert frobenius_norm(a) == pytest.approx(_sum_of_squares_norm(a), rel=1e-12)


def test_frobenius_rank_orders_by_difference_then_id():
    db = [(5, 0, 3.0), (2, 1, 5.0), (9, 2, 1.0), (1, 0, 7.0)]
    ranked = frobenius_rank(4.0, db)
    assert [r[0] for r in ranked] == [2, 5, 1, 9]
    assert [r[2] for r in ranked] == [1.0, 1.0, 3.0, 3.0]


def _index(n=1000, dim=16, seed=0, n_fam=5, dup=True):
    rng = np.random.default_rng(seed)
    emb = rng.integers(-3, 4, size=(n, dim)).astype(np.float32)  # coarse values force ties
    if dup:
        emb[1::10] = emb[0::10][: len(emb[1::10])]
    ids = rng.permutation(n * 3)[:n]
    fams = rng.integers(0, n_fam, size=n)
    return build_index(list(zip(ids, fams, emb))), ids, fams, emb


def _linear_scan(ids, fams, emb, q, k, exclude=None):
    rows = []
    for i, f, e in zip(ids.tolist(), fams.tolist(), emb.astype(np.float64)):
        if i == exclude:
            continue
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(e.tolist(), q.tolist())))
        rows.append((d, i, f))
    rows.sort()
    return [(i, f, d) for d, i, f in rows[:k]]


def test_query_matches_linear_scan_with_ties():
    index, ids, fams, emb = _index()
    rng = np.random.default_rng(1)
    for t in range(100):
        if t % 3 == 0:
            q = emb[rng.integers(len(emb))].astype(np.float64)
        else:
            q = rng.integers(-3, 4, size=emb.shape[1]).astype(np.float64)
        got = query(index, q, k=10)
        want = _linear_scan(ids, fams, emb, q, 10)
        assert [g[:2] for g in got] == [w[:2] for w in want]
        assert [g[2] for g in got] == pytest.approx([w[2] for w in want], rel=1e-12, abs=1e-12)


def test_self_query_and_exclusion():
    index, ids, _, emb = _index(n=50, dup=False)
    top = query(index, emb[7], k=3)
    assert top[0][0] == ids[7] and top[0][2] == 0.0
    assert all(r[0] != ids[7] for r in query(index, emb[7], k=3, exclude_id=int(ids[7])))


def test_distances_nondecreasing_and_scale_invariant():
    index, ids, fams, emb = _index(n=200, dup=False, seed=4)
    q = np.random.default_rng(5).normal(size=emb.shape[1])
    a = query(index, q, k=20)
    assert all(x[2] <= y[2] for x, y in zip(a, a[1:]))
    scaled = build_index(list(zip(ids, fams, emb * 4)))
    b = query(scaled, q * 4, k=20)
    assert [r[0] for r in a] == [r[0] for r in b]
    np.testing.assert_allclose([r[2] * 4 for r in a], [r[2] for r in b], rtol=1e-6)


def test_build_index_errors():
    with pytest.raises(DimensionMismatchError):
        build_index([(0, 0, np.zeros(3)), (1, 0, np.zeros(4))])
    with pytest.raises(DuplicateIdError):
        build_index([(0, 0, np.zeros(3)), (0, 1, np.ones(3))])
    index = build_index([(0, 0, np.zeros(3))])
    with pytest.raises(DimensionMismatchError):
        query(index, np.zeros(4))


def test_fidx_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(100):
        n, dim = int(rng.integers(1, 40)), int(rng.integers(1, 50))
        entries = [(int(i), int(rng.integers(0, 12)), rng.normal(size=dim)) for i in rng.permutation(500)[:n]]
        index = build_index(entries, "raw" if k % 2 else "learned", provenance_digest(k=k))
        data = encode_index(index)
        assert len(data) == 47 + n * (4 + 2 + 4 * dim)
        back = decode_index(data)
        assert back == index
        assert encode_index(back) == data
    save_index(index, tmp_path / "i.fidx")
    assert load_index(tmp_path / "i.fidx") == index


def test_fidx_errors():
    data = encode_index(build_index([(1, 2, np.ones(4)), (3, 0, np.zeros(4))]))
    with pytest.raises(BadMagicError):
        decode_index(b"FIDY" + data[4:])
    with pytest.raises(TruncatedError):
        decode_index(data[:-3])
    with pytest.raises(TruncatedError):
        decode_index(data[:20])
    with pytest.raises(VersionUnsupportedError):
        decode_index(data[:4] + b"\x02\x00" + data[6:])
    with pytest.raises(MalformedError):
        decode_index(data[:14] + b"\x07" + data[15:])


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200))
def test_fidx_fuzz(data):
    try:
        decode_index(b"FIDX" + data)
    except (MalformedError, TruncatedError, VersionUnsupportedError):
        pass


def test_separable_case_perfect():
    entries = [(i, i % 4, np.full(8, float(i % 4) * 10)) for i in range(40)]
    m = evaluate(build_index(entries), range(0, 40, 3), k=5)
    assert m["top1"] == 1.0 and m["topk"] == 1.0


def test_ranking_metrics_confusions():
    results = [(0, [0, 1, 1, 2, 3]), (0, [2, 2, 0, 1, 1]), (1, [1, 1, 1, 1, 1])]
    m = ranking_metrics(results, 5)
    assert m["top1"] == pytest.approx(2 / 3)
    assert m["topk"] == 1.0
    assert m["per_family"][0]["most_confused"] == [[1, 4], [2, 3]]
    assert m["per_family"][1]["most_confused"] == []
    assert m["per_family"][0]["top1_hits"] == 1


def test_topk_at_least_top1():
    index, ids, _, _ = _index(n=300, seed=9)
    m = evaluate(index, ids[:50].tolist(), k=5)
    assert m["topk"] >= m["top1"]


def test_frobenius_evaluation_excludes_self():
    norms = [(0, 0, 1.0), (1, 0, 1.1), (2, 1, 1.05), (3, 1, 9.0)]
    m = evaluate_frobenius(norms, [0], k=1)
    assert m["top1"] == 0.0  # 1.05 (family 1) is closer than 1.1
    with pytest.raises(EmptyTestSetError):
        evaluate_frobenius(norms, [], k=1)
