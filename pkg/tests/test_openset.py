import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from herdmetric import openset
from herdmetric.coatgen import Instance, SOURCES
from herdmetric.dataset import herd_identities, make_class_splits, make_openset_splits
from herdmetric.embednet import ClassHead, TrainConfig
from herdmetric.errors import EvaluationError
from herdmetric.openset import Gallery, knn_classify, knn_classify_many


def fake_herd(n_ids, per, size=2, seed=0):
    """Instances whose grids carry no identity signal; embedders below ignore them."""
    rng = np.random.default_rng(seed)
    herd = []
    for ident in range(n_ids):
        for _ in range(per):
            herd.append(Instance(rng.uniform(size=(size, size)), ident, SOURCES[ident % 3], 0,
                                 index=len(herd)))
    return herd


def split_for(herd, ratio, seed=1, rep=0, reps=1):
    cs = make_class_splits(herd, seed)
    return make_openset_splits(herd_identities(herd), [ratio], reps, seed, cs)[rep]


def one_hot(n):
    return lambda insts: np.eye(n)[[i.identity_id for i in insts]]


def test_knn_examples():
    g = Gallery(np.array([[0, 0], [0, 1], [1, 0], [10, 10], [10, 11]], float),
                np.array([1, 1, 1, 2, 2]))
    assert knn_classify(g, [0.4, 0.4], 5) == 1
    assert knn_classify(g, [10, 11], 1) == 2
    single = Gallery(np.array([[0.0], [5.0]]), np.array([7, 7]))
    for q, k in [([100.0], 1), ([-3.0], 2)]:
        assert knn_classify(single, q, k) == 7


def test_knn_ties():
    # one vote each: the nearer neighbour wins
    g = Gallery(np.array([[1.0], [-2.0]]), np.array([5, 3]))
    assert knn_classify(g, [0.0], 2) == 5
    # one vote each at equal distance: the smaller label wins
    g = Gallery(np.array([[1.0], [-1.0]]), np.array([5, 3]))
    assert knn_classify(g, [0.0], 2) == 3


def test_knn_errors():
    with pytest.raises(EvaluationError):
        knn_classify(Gallery(np.zeros((0, 2)), np.zeros(0, int)), [0, 0], 1)
    g = Gallery(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(EvaluationError):
        knn_classify(g, [0, 0], 0)


def test_knn_max_distance_rejects_outliers():
    g = Gallery(np.array([[0.0], [1.0]]), np.array([4, 4]))
    out = knn_classify_many(g, np.array([[0.5], [50.0]]), 1, max_distance=2.0)
    assert out.tolist() == [4, -1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7))
def test_knn_invariant_to_gallery_order(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    emb = rng.integers(-2, 3, size=(n, 2)).astype(float)  # coarse grid: many ties
    lab = rng.integers(0, 4, size=n)
    queries = rng.integers(-2, 3, size=(6, 2)).astype(float)
    base = knn_classify_many(Gallery(emb, lab), queries, k)
    perm = rng.permutation(n)
    assert np.array_equal(knn_classify_many(Gallery(emb[perm], lab[perm]), queries, k), base)


def test_gallery_is_every_non_test_instance():
    herd = fake_herd(6, 20)
    split = split_for(herd, 0.5)
    g = openset.build_gallery(one_hot(6), split, {i.index: i for i in herd})
    assert len(g) == 6 * 10
    assert set(g.labels.tolist()) == set(range(6))
    assert set(g.membership.tolist()) == {"train", "val"}


def test_one_hot_oracle_is_perfect():
    herd = fake_herd(9, 24)
    for ratio in (0.25, 0.5, 0.75):
        res = openset.evaluate_split(one_hot(9), split_for(herd, ratio), herd, 5)
        assert res.accuracy == 1.0
        assert res.error_known_fraction == 0.0 and res.error_unknown_fraction == 0.0
        assert len(res.records) == 90


def test_random_embedder_is_at_chance():
    n_ids, per = 10, 30
    herd = fake_herd(n_ids, per)
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(len(herd), 16))
    res = openset.evaluate_split(lambda insts: noise[[i.index for i in insts]],
                                 split_for(herd, 0.5), herd, 5)
    p, n = 1 / n_ids, n_ids * 10
    assert abs(res.accuracy - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_error_fractions_and_accuracy():
    herd = fake_herd(6, 20)
    split = split_for(herd, 0.5)
    known = set(split.known)
    # collapse every unknown identity onto identity 0's point, keep the rest exact
    target = min(known)
    emb = lambda insts: np.eye(6)[[i.identity_id if i.identity_id in known or i.identity_id == target
                                   else target for i in insts]]
    res = openset.evaluate_split(emb, split, herd, 5)
    wrong = [r for r in res.records if r.predicted != r.true_label]
    assert res.accuracy == (len(res.records) - len(wrong)) / len(res.records)
    assert res.accuracy == 0.5
    assert res.error_unknown_fraction == 1.0 and res.error_known_fraction == 0.0
    assert res.error_known_fraction + res.error_unknown_fraction == pytest.approx(1.0, abs=1e-12)
    assert res.known_query_fraction == 0.5


def test_split_herd_mismatch():
    herd = fake_herd(6, 20)
    split = split_for(herd, 0.5)
    with pytest.raises(EvaluationError):
        openset.evaluate_split(one_hot(6), split, herd[:-1], 5)
    with pytest.raises(EvaluationError):
        openset.evaluate_split(one_hot(7), split, fake_herd(7, 20), 5)


def perfect_head(n_ids, known):
    head = ClassHead(n_ids, known)
    head.params["head.w"][:] = 0.0
    for j, c in enumerate(known):
        head.params["head.w"][c, j] = 10.0
    return head


@pytest.mark.parametrize("ratio", [0.1, 0.5, 0.9])
def test_baseline_ceiling(ratio):
    herd = fake_herd(10, 20)
    split = split_for(herd, ratio)
    res = openset.closed_set_baseline(one_hot(10), perfect_head(10, split.known), split, herd)
    assert res.accuracy == res.known_query_fraction == len(split.known) / 10
    for seed in range(5):
        res = openset.closed_set_baseline(one_hot(10), ClassHead(10, split.known, seed),
                                          split, herd)
        assert res.accuracy <= res.known_query_fraction
        assert all(r.predicted in split.known for r in res.records)


def test_baseline_rejects_head_with_unknown_classes():
    herd = fake_herd(6, 20)
    split = split_for(herd, 0.5)
    with pytest.raises(EvaluationError):
        openset.closed_set_baseline(one_hot(6), ClassHead(6, range(6)), split, herd)


def test_summary_and_csvs(tmp_path):
    mk = lambda k, r, rep, a: openset.EvalResult(r, rep, a, 0.25, 0.75, loss_kind=k)
    results = [mk("tl", 0.5, 0, 0.9), mk("tl", 0.5, 1, 0.7), mk("tl", 0.25, 0, 1.0),
               mk("softmax", 0.5, 0, 0.4)]
    summary = openset.summarize(results)
    assert [(s.loss_kind, s.ratio, s.reps) for s in summary] == [
        ("tl", 0.5, 2), ("tl", 0.25, 1), ("softmax", 0.5, 1)]
    assert summary[0].mean == pytest.approx(0.8) and (summary[0].min, summary[0].max) == (0.7, 0.9)
    openset.write_results_csv(results, tmp_path / "r.csv")
    back = openset.read_results_csv(tmp_path / "r.csv")
    assert [(r.loss_kind, r.ratio, r.repetition, r.accuracy) for r in back] == [
        (r.loss_kind, r.ratio, r.repetition, r.accuracy) for r in results]
    openset.write_summary_csv(summary, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "loss_kind,75/25,50/50"
    assert lines[1] == 'tl,"100.00:[100.00,100.00]","80.00:[70.00,90.00]"'
    assert lines[2] == 'softmax,,"40.00:[40.00,40.00]"'


def signal_herd(n_ids, per, seed=0):
    """16x16 grids: a fixed random texture per identity plus noise."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(size=(n_ids, 16, 16))
    herd = []
    for ident in range(n_ids):
        for _ in range(per):
            g = np.clip(protos[ident] + rng.normal(scale=0.05, size=(16, 16)), 0, 1)
            herd.append(Instance(g, ident, SOURCES[ident % 3], 0, index=len(herd)))
    return herd


def test_sweep_rows_and_determinism():
    herd = signal_herd(4, 20)
    cs = make_class_splits(herd, 3)
    splits = make_openset_splits(herd_identities(herd), [0.25, 0.5], 2, 3, cs)
    cfg = TrainConfig(epochs=2, widths=(4, 4, 4), embed_dim=8, seed=3)
    one = openset.openness_sweep(herd, splits[:1], ["softmax"], cfg)
    assert len(one) == 1 and len(openset.summarize(one)) == 1
    kinds = ["softmax", "tl", "softmax-rtl"]
    a = openset.openness_sweep(herd, splits, kinds, cfg)
    b = openset.openness_sweep(herd, list(reversed(splits)), kinds, cfg)
    assert len(a) == len(splits) * len(kinds)
    assert len(openset.summarize(a)) == 2 * len(kinds)
    key = lambda r: (r.loss_kind, r.ratio, r.repetition, r.accuracy, r.error_known_fraction)
    assert [key(r) for r in a] == [key(r) for r in b]
    for r in a:
        if r.loss_kind == "softmax":
            assert r.accuracy <= r.known_query_fraction
