import numpy as np
import pytest

from kpreid.errors import ProtocolError
from kpreid.retrieval import EmbeddingEntry, cosine_similarity, evaluate_embeddings, rank_gallery


def entry(image_id, identity, z):
    return EmbeddingEntry(image_id, identity, np.asarray(z, dtype=float))


def test_cosine():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([2, 0], [3, 0]) == pytest.approx(1.0)
    assert cosine_similarity([0, 0], [1, 1]) == 0.0


def test_perfect_clusters():
    es = [entry("a0", "a", [1, 0.1]), entry("a1", "a", [1, -0.1]),
          entry("b0", "b", [0.1, 1]), entry("b1", "b", [-0.1, 1])]
    rep = evaluate_embeddings(es)
    assert rep.accuracy == 1.0
    assert rep.counts == {"TP": 4, "TN": 0, "FP": 0, "FN": 0}
    assert rep.to_json()["protocol"]


def test_hand_counted():
    # b1 sits next to a0, so query b1 ranks a0 first: one miss
    es = [entry("a0", "a", [1, 0]), entry("a1", "a", [0.9, 0.1]),
          entry("b0", "b", [0, 1]), entry("b1", "b", [1, 0.01])]
    rep = evaluate_embeddings(es)
    by_q = {q["query_id"]: q for q in rep.per_query}
    assert by_q["b1"]["top1_id"] == "a0" and not by_q["b1"]["correct"]
    assert rep.counts["FN"] == sum(not q["correct"] for q in rep.per_query)
    c = rep.counts
    assert rep.accuracy == (c["TP"] + c["TN"]) / sum(c.values())


def test_ties_go_to_smaller_image_id():
    q = entry("q", "a", [1, 0])
    gallery = [entry("z", "b", [2, 0]), entry("m", "a", [1, 0]), q]
    ranked = rank_gallery(q, gallery)
    assert [g.image_id for g, _ in ranked] == ["m", "z"]


def test_query_never_matches_itself():
    es = [entry("a0", "a", [1, 0]), entry("a1", "a", [0, 1]), entry("b0", "b", [1, 0.001]), entry("b1", "b", [0, 1])]
    assert all(q["top1_id"] != q["query_id"] for q in evaluate_embeddings(es).per_query)


def test_empty_gallery():
    q = entry("q", "a", [1, 0])
    with pytest.raises(ProtocolError):
        rank_gallery(q, [q])


def test_singleton_identity_rejected():
    with pytest.raises(ProtocolError, match="single"):
        evaluate_embeddings([entry("a0", "a", [1, 0]), entry("a1", "a", [1, 0]), entry("b0", "b", [0, 1])])


def test_order_independent():
    rng = np.random.default_rng(0)
    es = [entry(f"{c}{i}", c, rng.standard_normal(4)) for c in "abc" for i in range(3)]
    a = evaluate_embeddings(es).to_json()
    b = evaluate_embeddings(list(reversed(es))).to_json()
    assert a == b
