"""Per-class train/val/test splits and known/unknown open-set partitions.

Class splits hold out exactly 10 test instances per identity and divide the
rest 9:1 into train and validation, with ``val = floor(rest / 10)``.

Open-set splits withhold ``round(ratio * total)`` identities (half-up) as
unknown. Unknowns are drawn as evenly as possible from each source tag: the
per-source quotas differ by at most one, and the sources that receive the
extra identity are chosen at random. Each (ratio, repetition) pair has its
own seed derived from the master seed, so a split never changes once made.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .linalg import child_seed, make_rng

TEST_PER_CLASS = 10
MIN_INSTANCES = 20
PROTOCOL_RATIOS = (0.1, 0.17, 0.25, 0.33, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class ClassSplit:
    identity_id: int
    train: list
    val: list
    test: list
    source: str = ""


@dataclass
class OpenSetSplit:
    known: list
    unknown: list
    openness_ratio: float
    repetition_index: int
    seed: int
    classes: list = field(default_factory=list)  # ClassSplit per identity

    def class_split(self, identity_id):
        for c in self.classes:
            if c.identity_id == identity_id:
                return c
        raise KeyError(identity_id)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def split_counts(total: int):
    """(train, val, test) sizes for a class with ``total`` instances."""
    rest = total - TEST_PER_CLASS
    val = rest // 10
    return rest - val, val, TEST_PER_CLASS


def make_class_splits(herd, seed: int):
    by_id = defaultdict(list)
    source = {}
    for inst in herd:
        by_id[inst.identity_id].append(inst.index)
        source[inst.identity_id] = inst.source_tag
    out = []
    for ident in sorted(by_id):
        ids = sorted(by_id[ident])
        if len(ids) < MIN_INSTANCES:
            raise ValidationError(
                f"identity {ident} has {len(ids)} instances; at least {MIN_INSTANCES} required")
        n_train, n_val, n_test = split_counts(len(ids))
        perm = make_rng(seed, 11, ident).permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        out.append(ClassSplit(
            identity_id=int(ident),
            test=sorted(shuffled[:n_test]),
            val=sorted(shuffled[n_test:n_test + n_val]),
            train=sorted(shuffled[n_test + n_val:]),
            source=source[ident]))
    return out


def stratified_unknown(identities, n_unknown: int, rng: np.random.Generator):
    """Pick ``n_unknown`` identities, spreading the picks evenly across sources."""
    by_src = defaultdict(list)
    for ident, src in identities:
        by_src[src].append(int(ident))
    sources = sorted(by_src)
    for s in sources:
        by_src[s].sort()
    quota = {s: 0 for s in sources}
    remaining = n_unknown
    # water-fill: each round gives one slot to every source that still has room
    while remaining > 0:
        open_src = [s for s in sources if quota[s] < len(by_src[s])]
        if not open_src:
            break
        if remaining >= len(open_src):
            for s in open_src:
                quota[s] += 1
            remaining -= len(open_src)
        else:
            for j in sorted(rng.choice(len(open_src), size=remaining, replace=False)):
                quota[open_src[j]] += 1
            remaining = 0
    unknown = []
    for s in sources:
        pool = by_src[s]
        pick = rng.choice(len(pool), size=quota[s], replace=False)
        unknown.extend(pool[j] for j in pick)
    return sorted(unknown)


def make_openset_splits(identities, ratios, reps: int, seed: int, class_splits=None):
    """All ``len(ratios) * reps`` splits, ratio-major then repetition."""
    identities = [(int(i), s) for i, s in identities]
    total = len(identities)
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    out = []
    for ri, ratio in enumerate(ratios):
        ratio = float(ratio)
        if not 0.0 < ratio < 1.0:
            raise ValidationError(f"openness ratio {ratio} must lie in (0, 1)")
        n_unknown = round_half_up(ratio * total)
        if n_unknown <= 0 or n_unknown >= total:
            raise ValidationError(
                f"ratio {ratio} gives {n_unknown} unknown of {total} identities")
        for rep in range(reps):
            s = child_seed(seed, 22, ri, rep)
            unknown = stratified_unknown(identities, n_unknown, make_rng(s))
            known = sorted(i for i, _ in identities if i not in set(unknown))
            out.append(OpenSetSplit(known=known, unknown=unknown, openness_ratio=ratio,
                                    repetition_index=rep, seed=s,
                                    classes=list(class_splits or [])))
    return out


def herd_identities(herd):
    seen = {}
    for inst in herd:
        seen.setdefault(inst.identity_id, inst.source_tag)
    return sorted(seen.items())


# -- persistence --------------------------------------------------------------

def split_to_dict(split: OpenSetSplit) -> dict:
    return {
        "ratio": split.openness_ratio,
        "repetition": split.repetition_index,
        "seed": split.seed,
        "known": list(split.known),
        "unknown": list(split.unknown),
        "classes": [{"id": c.identity_id, "source": c.source, "train": list(c.train),
                     "val": list(c.val), "test": list(c.test)} for c in split.classes],
    }


def split_from_dict(d: dict) -> OpenSetSplit:
    return OpenSetSplit(
        known=[int(i) for i in d["known"]], unknown=[int(i) for i in d["unknown"]],
        openness_ratio=float(d["ratio"]), repetition_index=int(d["repetition"]),
        seed=int(d["seed"]),
        classes=[ClassSplit(identity_id=int(c["id"]), source=c.get("source", ""),
                            train=[int(i) for i in c["train"]], val=[int(i) for i in c["val"]],
                            test=[int(i) for i in c["test"]]) for c in d["classes"]])


def save_splits(splits, path):
    Path(path).write_text(json.dumps([split_to_dict(s) for s in splits], indent=1) + "\n")


def load_splits(path):
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [split_from_dict(d) for d in data]
