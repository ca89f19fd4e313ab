"""Open-set identification by kNN in the embedding space.

Every non-test instance of every identity, known or not, is enrolled in the
gallery; every test instance is a query. A closed-set softmax classifier is
scored on the same queries for comparison and can never name an identity it
was not trained on.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError
from .linalg import as_vec, pairwise_distances


@dataclass
class Gallery:
    embeddings: np.ndarray
    labels: np.ndarray
    membership: np.ndarray | None = None  # "train"/"val" per entry

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.embeddings.shape[0]:
            raise EvaluationError("gallery labels and embeddings differ in length")

    def __len__(self):
        return int(self.labels.shape[0])


def _vote(dists, labels, k, max_distance=None):
    order = np.lexsort((labels, dists))[:k]
    d, lab = dists[order], labels[order]
    if max_distance is not None:
        keep = d <= max_distance
        if not keep.any():
            return None
        d, lab = d[keep], lab[keep]
    votes = defaultdict(lambda: [0, 0.0])
    for l, dist in zip(lab.tolist(), d.tolist()):
        votes[l][0] += 1
        votes[l][1] += dist
    # most votes, then smallest summed distance, then smallest label
    return min(votes, key=lambda l: (-votes[l][0], votes[l][1], l))


def knn_classify_many(gallery: Gallery, queries, k: int = 5, *, max_distance=None):
    """Label each query row by majority vote of its ``k`` nearest gallery entries.

    With ``max_distance`` set, neighbours farther than that are ignored and a
    query with none left is labelled -1 (rejected).
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if len(gallery) == 0:
        raise EvaluationError("empty gallery")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[0] == 0:
        return np.zeros(0, dtype=gallery.labels.dtype)
    d = pairwise_distances(q, gallery.embeddings)
    out = []
    for row in d:
        v = _vote(row, gallery.labels, k, max_distance)
        out.append(-1 if v is None else v)
    return np.array(out)


def knn_classify(gallery: Gallery, query, k: int = 5, *, max_distance=None):
    return knn_classify_many(gallery, as_vec(query)[None], k, max_distance=max_distance)[0].item()


@dataclass
class QueryRecord:
    query_id: int
    true_label: int
    predicted: int
    known: bool


@dataclass
class EvalResult:
    ratio: float
    repetition: int
    accuracy: float
    error_known_fraction: float
    error_unknown_fraction: float
    records: list = field(default_factory=list)
    loss_kind: str = ""

    @property
    def known_query_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.known for r in self.records) / len(self.records)


def as_embedder(model):
    """Turn a network (anything with ``embed``) or a callable into ``f(instances) -> array``."""
    if hasattr(model, "embed"):
        return lambda insts: model.embed(np.array([i.grid for i in insts]))
    if callable(model):
        return model
    raise TypeError("expected an object with .embed or a callable")


def _check_split(split, herd):
    by_index = {inst.index: inst for inst in herd}
    ids = {inst.identity_id for inst in herd}
    split_ids = set(split.known) | set(split.unknown)
    if split_ids != ids:
        raise EvaluationError("split identities do not match the herd")
    if not split.classes:
        raise EvaluationError("split carries no per-class instance assignment")
    for c in split.classes:
        for i in c.train + c.val + c.test:
            inst = by_index.get(i)
            if inst is None or inst.identity_id != c.identity_id:
                raise EvaluationError(
                    f"instance {i} of class {c.identity_id} is missing from the herd")
    return by_index


def _result(split, query_insts, predicted, loss_kind=""):
    known = set(split.known)
    records = [QueryRecord(int(q.index), int(q.identity_id), int(p), q.identity_id in known)
               for q, p in zip(query_insts, predicted)]
    wrong = [r for r in records if r.predicted != r.true_label]
    n_err = len(wrong)
    err_known = sum(r.known for r in wrong) / n_err if n_err else 0.0
    return EvalResult(
        ratio=split.openness_ratio, repetition=split.repetition_index,
        accuracy=(len(records) - n_err) / len(records) if records else 0.0,
        error_known_fraction=err_known,
        error_unknown_fraction=(1.0 - err_known) if n_err else 0.0,
        records=records, loss_kind=loss_kind)


def build_gallery(embedder, split, by_index) -> Gallery:
    entries = [(i, "train") for c in split.classes for i in c.train]
    entries += [(i, "val") for c in split.classes for i in c.val]
    insts = [by_index[i] for i, _ in entries]
    return Gallery(embedder(insts), np.array([x.identity_id for x in insts]),
                   np.array([m for _, m in entries]))


def evaluate_split(model, split, herd, k: int = 5, *, max_distance=None, loss_kind=""):
    """kNN identification of every test instance against all non-test instances."""
    embedder = as_embedder(model)
    by_index = _check_split(split, herd)
    gallery = build_gallery(embedder, split, by_index)
    queries = [by_index[i] for c in split.classes for i in c.test]
    pred = knn_classify_many(gallery, embedder(queries), k, max_distance=max_distance)
    return _result(split, queries, pred, loss_kind)


def closed_set_baseline(model, head, split, herd, *, loss_kind="softmax"):
    """Score the softmax head directly: every query gets one of the known identities."""
    if set(head.classes) - set(split.known):
        raise EvaluationError("baseline head includes classes that are unknown in this split")
    embedder = as_embedder(model)
    by_index = _check_split(split, herd)
    queries = [by_index[i] for c in split.classes for i in c.test]
    pred = head.predict(embedder(queries))
    return _result(split, queries, pred, loss_kind)


# -- training + evaluation over many splits ----------------------------------

def train_on_split(herd, split, loss_kind, config, *, log=None):
    """Train a fresh network on the split's known classes. Returns (net, head, pocket, rows)."""
    from .embednet import ClassHead, EmbedNet, canonical_loss, train, uses_head
    from .linalg import child_seed

    kind = canonical_loss(loss_kind)
    known = set(split.known)
    pool = {c.identity_id: list(c.train) for c in split.classes if c.identity_id in known}
    val = [(i, c.identity_id) for c in split.classes if c.identity_id in known for i in c.val]
    images = np.array([inst.grid for inst in sorted(herd, key=lambda x: x.index)])
    init_seed = child_seed(config.seed, 44, split.seed)
    net = EmbedNet(config.widths, config.embed_dim, images.shape[-1], seed=init_seed)
    head = ClassHead(config.embed_dim, sorted(known), seed=init_seed) if uses_head(kind) else None
    cfg = config.for_loss(kind)
    return train(net, head, pool, val, images, kind, cfg, log=log)


def run_split(herd, split, loss_kind, config):
    """Train on ``split`` and score it: kNN for metric losses, the head for ``softmax``."""
    from .embednet import canonical_loss

    kind = canonical_loss(loss_kind)
    net, head, _, _ = train_on_split(herd, split, kind, config)
    if kind == "softmax":
        return closed_set_baseline(net, head, split, herd, loss_kind=kind)
    return evaluate_split(net, split, herd, config.k, loss_kind=kind)


def _job(args):
    herd, split, kind, config = args
    return run_split(herd, split, kind, config)


def openness_sweep(herd, splits, loss_kinds, config, *, workers: int = 1, progress=None):
    """Evaluate every (loss kind, split) pair.

    Returns results sorted by (loss kind order, ratio, repetition); the order
    does not depend on how jobs were scheduled.
    """
    from .embednet import canonical_loss

    kinds = [canonical_loss(k) for k in loss_kinds]
    jobs = [(herd, s, k, config) for k in kinds for s in splits]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = []
        for j in jobs:
            results.append(_job(j))
            if progress:
                progress(results[-1])
    order = {k: i for i, k in enumerate(kinds)}
    results.sort(key=lambda r: (order[r.loss_kind], r.ratio, r.repetition))
    return results


@dataclass
class SummaryRow:
    loss_kind: str
    ratio: float
    mean: float
    min: float
    max: float
    reps: int


def summarize(results):
    groups = defaultdict(list)
    for r in results:
        groups[(r.loss_kind, r.ratio)].append(r.accuracy)
    seen = []
    for r in results:
        if (r.loss_kind, r.ratio) not in seen:
            seen.append((r.loss_kind, r.ratio))
    return [SummaryRow(k, ratio, float(np.mean(groups[(k, ratio)])), float(min(groups[(k, ratio)])),
                       float(max(groups[(k, ratio)])), len(groups[(k, ratio)]))
            for k, ratio in seen]


def write_results_csv(results, path):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss_kind", "ratio", "repetition", "accuracy", "err_known_frac",
                    "err_unknown_frac"])
        for r in results:
            w.writerow([r.loss_kind, f"{r.ratio:g}", r.repetition, f"{r.accuracy:.6f}",
                        f"{r.error_known_fraction:.6f}", f"{r.error_unknown_fraction:.6f}"])


def read_results_csv(path):
    import csv
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalResult(float(row["ratio"]), int(row["repetition"]),
                                  float(row["accuracy"]), float(row["err_known_frac"]),
                                  float(row["err_unknown_frac"]), loss_kind=row["loss_kind"]))
    return out


def write_summary_csv(summary, path):
    """One row per loss kind, one ``mean:[min,max]`` cell (percent) per known/unknown split."""
    import csv
    ratios = sorted({s.ratio for s in summary})
    kinds = []
    for s in summary:
        if s.loss_kind not in kinds:
            kinds.append(s.loss_kind)
    cell = {(s.loss_kind, s.ratio): s for s in summary}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss_kind"] + [f"{round(100 * (1 - r))}/{round(100 * r)}" for r in ratios])
        for k in kinds:
            row = [k]
            for r in ratios:
                s = cell.get((k, r))
                row.append("" if s is None else
                           f"{100 * s.mean:.2f}:[{100 * s.min:.2f},{100 * s.max:.2f}]")
            w.writerow(row)
