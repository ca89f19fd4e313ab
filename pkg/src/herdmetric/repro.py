"""Desk-scale reproduction: drive the CLI end to end and check every acceptance bound.

``run_repro`` writes ``REPORT.md`` plus the herd, splits, run and sweep
artifacts under its output directory. The sweep is repeated in a second
directory to check that its CSVs come out byte-identical.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cli, dataset, detgeom as dg, embednet, gradcheck, mining, openset
from .coatgen import Instance
from .detgeom import Box, Detection, FocalParams
from .losses import LossConfig

REPRO_IDENTITIES = 16
REPRO_PER_IDENTITY = 40
REPRO_RATIOS = (0.25, 0.5, 0.75)
REPRO_REPS = 3
REPRO_EPOCHS = 40

GRAD_TOL = 1e-4
GRAD_CONFIGS_PER_KIND = 17
C5_MARGIN = 0.20
C5_FLOOR = 0.80
C6_BAND = 0.02


@dataclass
class CriterionResult:
    name: str
    bound: str
    measured: str
    passed: bool
    seconds: float


@dataclass
class ReproReport:
    seed: int
    out_dir: str
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def markdown(self) -> str:
        lines = [f"# herdmetric reproduction report (seed {self.seed})", "",
                 "| # | criterion | bound | measured | result | seconds |",
                 "|---|---|---|---|---|---|"]
        for i, r in enumerate(self.rows, 1):
            lines.append(f"| {i} | {r.name} | {r.bound} | {r.measured} | "
                         f"{'PASS' if r.passed else 'FAIL'} | {r.seconds:.1f} |")
        lines += ["", f"Overall: {'PASS' if self.passed else 'FAIL'}", ""]
        return "\n".join(lines)


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# -- criteria that need no training ------------------------------------------

def check_gradients(seed: int = 0, per_kind: int = GRAD_CONFIGS_PER_KIND):
    """Worst relative FD error over ``per_kind`` random configurations of every loss kind."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=1.0, lam=0.5)
    worst, count = 0.0, 0
    for kind in embednet.LOSS_KINDS:
        for _ in range(per_kind):
            net, head, images, labels = gradcheck.random_config(rng, kind, cfg)
            worst = max(worst, gradcheck.check(net, head, images, labels, kind, cfg))
            count += 1
    return worst, count


def random_batch(rng):
    P, K = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    dim = int(rng.integers(1, 6))
    labels = np.repeat(rng.choice(1000, size=P, replace=False), K)[rng.permutation(P * K)]
    if rng.random() < 0.5:
        emb = rng.integers(-2, 3, size=(P * K, dim)).astype(float)  # plenty of distance ties
    else:
        emb = rng.normal(size=(P * K, dim))
    return mining.TripletBatch(emb, labels, P, K)


def check_mining(seed: int = 0, n: int = 1000):
    """Number of random batches where vectorised and brute-force selections differ."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        b = random_batch(rng)
        hp, hn = mining.hardest_pairs(b)
        bp, bn = mining.brute_force_hard(b)
        mismatches += not (np.array_equal(hp, bp) and np.array_equal(hn, bn))
    return mismatches, n


def detgeom_cases():
    """Hand-worked geometry and loss values as (label, got, expected) triples."""
    a10 = Box(0, 0, 10, 10)
    A = Detection(Box(0, 0, 1, 1), 0.9)
    B = Detection(Box(0, 0, 2, 1), 0.8)
    C = Detection(Box(1, 0, 2, 1), 0.7)
    same_hi, same_lo = Detection(Box(0, 0, 4, 4), 0.9), Detection(Box(0, 0, 4, 4), 0.8)
    gts = {"img": [Box(0, 0, 10, 10), Box(20, 20, 30, 30)]}
    hand = {"img": [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(50, 50, 60, 60), 0.8),
                    Detection(Box(20, 20, 30, 30), 0.7)]}
    perfect = {"img": [Detection(b, 0.9) for b in gts["img"]]}
    miss = {"img": [Detection(Box(100, 100, 110, 110), 0.9)]}
    p, r, _ = dg.pr_curve(hand, gts)
    return [
        ("iou identical", dg.iou(a10, a10), 1.0),
        ("iou disjoint", dg.iou(a10, Box(50, 50, 60, 60)), 0.0),
        ("iou 1/7", dg.iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)), 1 / 7),
        ("nms single", float(dg.nms([A], 0.28) == [A]), 1.0),
        ("nms duplicate", float(dg.nms([same_lo, same_hi], 0.28) == [same_hi]), 1.0),
        ("nms chain", float(dg.nms([C, B, A], 0.28) == [A, C]), 1.0),
        ("encode identity", dg.encode_offsets(a10, a10), (0, 0, 0, 0)),
        ("encode shift", dg.encode_offsets(Box(1, 2, 11, 12), a10), (0.1, 0.2, 0.1, 0.2)),
        ("decode zero", dg.decode_offsets((0, 0, 0, 0), a10).as_tuple(), (0, 0, 10, 10)),
        ("decode shift", dg.decode_offsets((0.1, 0.2, 0.1, 0.2), a10).as_tuple(), (1, 2, 11, 12)),
        ("focal as CE", dg.focal_loss(0.5, 1, FocalParams(gamma=0, alpha=1.0)), math.log(2)),
        ("focal hand", dg.focal_loss(0.9, 1, FocalParams(2, 0.25)), 0.25 * 0.01 * -math.log(0.9)),
        ("smooth_l1(0)", dg.smooth_l1(0.0), 0.0),
        ("smooth_l1(1)", dg.smooth_l1(1.0), 0.5),
        ("smooth_l1(0.5)", dg.smooth_l1(0.5), 0.125),
        ("smooth_l1(3)", dg.smooth_l1(3.0), 2.5),
        ("regression equal", dg.regression_loss((1, 2, 3, 4), (1, 2, 3, 4)), 0.0),
        ("regression 4x0.5", dg.regression_loss((0.5,) * 4, (0,) * 4), 0.5),
        ("regression (2,0,0,0)", dg.regression_loss((2, 0, 0, 0), (0,) * 4), 1.5),
        ("detection loss", dg.detection_loss(0.5, 0.25, FocalParams(lam=1.0)), 0.75),
        ("detection fl=0", dg.detection_loss(0.5, 0.0), 0.5),
        ("detection lam=0", dg.detection_loss(0.5, 3.0, FocalParams(lam=0.0)), 0.5),
        ("AP perfect", dg.average_precision(perfect, gts), 1.0),
        ("AP no TP", dg.average_precision(miss, gts), 0.0),
        ("PR precision", tuple(p), (1.0, 0.5, 2 / 3)),
        ("PR recall", tuple(r), (0.5, 0.5, 1.0)),
        ("AP hand", dg.average_precision(hand, gts, 0.5, 0.5), 5 / 6),
    ]


def check_detgeom():
    """(worst hand-case error, worst focal-vs-CE error over a 1000-point grid)."""
    worst = 0.0
    for _, got, want in detgeom_cases():
        worst = max(worst, float(np.max(np.abs(np.subtract(got, want)))))
    unmod = FocalParams(gamma=0.0, alpha=1.0)
    grid = np.linspace(0.001, 0.999, 1000)
    ce = max(abs(dg.focal_loss(float(q), 1, unmod) + math.log(q)) for q in grid)
    return worst, ce


def check_protocol(seed: int, n_identities: int = 46, per_identity: int = 24):
    """(unknown count at ratio 0.5, set of per-class test counts) on a stand-in herd."""
    herd = []
    for ident in range(n_identities):
        for j in range(per_identity + ident % 5):
            herd.append(Instance(np.zeros((1, 1)), ident, "abc"[ident % 3], 0,
                                 index=len(herd)))
    cs = dataset.make_class_splits(herd, seed)
    split = dataset.make_openset_splits(dataset.herd_identities(herd), [0.5], 1, seed, cs)[0]
    return len(split.unknown), {len(c.test) for c in cs}


# -- criteria on the sweep ----------------------------------------------------

def _means(results, kind):
    groups = {}
    for r in results:
        if r.loss_kind == kind:
            groups.setdefault(r.ratio, []).append(r.accuracy)
    return {ratio: float(np.mean(v)) for ratio, v in sorted(groups.items())}


def ceiling_violations(herd, splits, results):
    """Baseline results whose accuracy exceeds the known-query fraction of their split."""
    by_key = {(s.openness_ratio, s.repetition_index): s for s in splits}
    bad = []
    for r in results:
        if r.loss_kind != "softmax":
            continue
        s = by_key[(r.ratio, r.repetition)]
        known = set(s.known)
        n_q = sum(len(c.test) for c in s.classes)
        n_known = sum(len(c.test) for c in s.classes if c.identity_id in known)
        if r.accuracy * n_q > n_known:  # integer counts, so this is exact
            bad.append(r)
    return bad


def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"herdmetric {' '.join(map(str, argv))} exited with {code}")


def _pipeline(root: Path, seed, identities, per_identity, ratios, reps, epochs, workers,
              with_train=True):
    herd_dir, splits = root / "herd", root / "herd" / "splits.json"
    ratio_arg = ",".join(str(r) for r in ratios)
    _cli("generate", "--identities", identities, "--per-identity", per_identity,
         "--seed", seed, "--out", herd_dir)
    _cli("split", "--herd", herd_dir, "--ratios", ratio_arg, "--reps", reps, "--seed", seed)
    if with_train:
        mid = ratios[len(ratios) // 2]
        _cli("train", "--herd", herd_dir, "--splits", splits, "--loss", "softmax-rtl",
             "--ratio", mid, "--rep", 0, "--epochs", epochs, "--seed", seed,
             "--out", root / "run")
        _cli("plot", "--run", root / "run", "--herd", herd_dir, "--splits", splits,
             "--ratio", mid, "--out", root / "run" / "pca.svg")
    _cli("sweep", "--herd", herd_dir, "--splits", splits, "--epochs", epochs, "--seed", seed,
         "--workers", workers, "--out", root / "sweep")
    _cli("plot", "--results", root / "sweep" / "results.csv",
         "--out", root / "sweep" / "replot.svg")
    return herd_dir, splits, root / "sweep"


def run_repro(seed: int = cli.DEFAULT_SEED, out_dir="repro_out", *, workers: int = 1,
              epochs: int = REPRO_EPOCHS, identities: int = REPRO_IDENTITIES,
              per_identity: int = REPRO_PER_IDENTITY, ratios=REPRO_RATIOS, reps: int = REPRO_REPS,
              force_fail: bool = False, grad_configs_per_kind: int = GRAD_CONFIGS_PER_KIND,
              mining_batches: int = 1000) -> ReproReport:
    """Run every acceptance check and write ``REPORT.md``; see :class:`ReproReport`."""
    from .coatgen import load_herd

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ReproReport(seed, str(out))
    add = report.rows.append

    (worst, n), t = _timed(check_gradients, seed, grad_configs_per_kind)
    add(CriterionResult("gradient correctness", f"max rel err <= {GRAD_TOL:g} over >= 100 configs",
                        f"{worst:.2e} over {n} configs", worst <= GRAD_TOL and n >= 100, t))

    (bad, n), t = _timed(check_mining, seed, mining_batches)
    add(CriterionResult("mining oracle equivalence", f"0 mismatches in {n} batches",
                        f"{bad} mismatches", bad == 0 and n >= 1000, t))

    (hand, ce), t = _timed(check_detgeom)
    add(CriterionResult("detection math", "hand cases <= 1e-9; focal vs CE <= 1e-12",
                        f"{hand:.1e}; {ce:.1e}", hand <= 1e-9 and ce <= 1e-12, t))

    t0 = time.perf_counter()
    first = _pipeline(out / "first", seed, identities, per_identity, ratios, reps, epochs, workers)
    sweep_seconds = time.perf_counter() - t0
    herd_dir, split_path, sweep_dir = first
    herd, _ = load_herd(herd_dir)
    splits = dataset.load_splits(split_path)
    results = openset.read_results_csv(sweep_dir / "results.csv")

    t0 = time.perf_counter()
    viol = ceiling_violations(herd, splits, results)
    base = _means(results, "softmax")
    vals = list(base.values())
    mono = all(b < a for a, b in zip(vals, vals[1:]))
    add(CriterionResult(
        "closed-set ceiling", "acc <= known fraction on every split; mean strictly decreasing",
        f"{len(viol)} violations; means " + ", ".join(f"{k:g}:{100 * v:.1f}" for k, v in base.items()),
        not viol and mono, time.perf_counter() - t0))

    srtl, tl = _means(results, "softmax-rtl"), _means(results, "tl")
    mid = 0.5 if 0.5 in srtl else sorted(srtl)[len(srtl) // 2]
    floor = 1.01 if force_fail else C5_FLOOR
    gap = srtl[mid] - base.get(mid, float("nan"))
    add(CriterionResult(
        "open-set superiority", f"softmax-rtl at {mid:g} >= {100 * floor:.0f}% and baseline + 20",
        f"{100 * srtl[mid]:.1f}% vs baseline {100 * base.get(mid, float('nan')):.1f}% "
        f"(gap {100 * gap:.1f})",
        srtl[mid] >= floor and gap >= C5_MARGIN, sweep_seconds))

    diffs = {r: srtl[r] - tl[r] for r in srtl}
    add(CriterionResult(
        "loss ordering", f"softmax-rtl >= tl - {100 * C6_BAND:.0f} pts at every ratio",
        ", ".join(f"{r:g}:{100 * d:+.1f}" for r, d in diffs.items()),
        all(d >= -C6_BAND for d in diffs.values()), 0.0))

    t0 = time.perf_counter()
    second = _pipeline(out / "second", seed, identities, per_identity, ratios, reps, epochs,
                       workers, with_train=False)
    names = ["results.csv", "summary.csv"]
    same = [(first[2] / n).read_bytes() == (second[2] / n).read_bytes() for n in names]
    same.append(first[1].read_bytes() == second[1].read_bytes())
    add(CriterionResult("determinism", "byte-identical results, summary and split files",
                        f"{sum(same)}/{len(same)} identical", all(same),
                        time.perf_counter() - t0))

    (n_unknown, test_counts), t = _timed(check_protocol, seed)
    add(CriterionResult("protocol fidelity", "23 unknown of 46 at 0.5; 10 test per class",
                        f"{n_unknown} unknown; test counts {sorted(test_counts)}",
                        n_unknown == 23 and test_counts == {10}, t))

    (out / "REPORT.md").write_text(report.markdown())
    return report
