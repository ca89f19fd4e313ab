"""Acceptance criteria, each at its stated tolerance.

Criteria 4 to 7 share one desk-scale reproduction run (about 25 minutes on a
single core). Every test records a PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the session.
"""
import time

import pytest

from herdmetric import repro


def record(log, n, name, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    return repro.run_repro(7, tmp_path_factory.mktemp("repro"))


def row(report, name):
    return next(r for r in report.rows if r.name == name)


def test_c1_gradients(acceptance_log):
    t0 = time.perf_counter()
    worst, n = repro.check_gradients(0)
    t = time.perf_counter() - t0
    ok = worst <= 1e-4 and n >= 100 and t < 60
    assert record(acceptance_log, 1, "gradient correctness", ok,
                  f"max rel err {worst:.2e} over {n} configs in {t:.1f}s (<= 1e-4, < 60s)")


def test_c2_mining(acceptance_log):
    t0 = time.perf_counter()
    bad, n = repro.check_mining(0, 1000)
    t = time.perf_counter() - t0
    ok = bad == 0 and n == 1000 and t < 30
    assert record(acceptance_log, 2, "mining oracle equivalence", ok,
                  f"{bad} mismatches in {n} batches in {t:.1f}s")


def test_c3_detection(acceptance_log):
    t0 = time.perf_counter()
    hand, ce = repro.check_detgeom()
    ap = repro.dg.average_precision(
        {"img": [repro.Detection(repro.Box(0, 0, 10, 10), 0.9),
                 repro.Detection(repro.Box(50, 50, 60, 60), 0.8),
                 repro.Detection(repro.Box(20, 20, 30, 30), 0.7)]},
        {"img": [repro.Box(0, 0, 10, 10), repro.Box(20, 20, 30, 30)]})
    t = time.perf_counter() - t0
    ok = hand <= 1e-9 and ce <= 1e-12 and abs(ap - 5 / 6) <= 1e-9 and t < 10
    assert record(acceptance_log, 3, "detection math", ok,
                  f"hand err {hand:.1e}, focal-vs-CE {ce:.1e}, AP {ap:.10f} in {t:.2f}s")


def test_c4_closed_set_ceiling(report, acceptance_log):
    r = row(report, "closed-set ceiling")
    assert record(acceptance_log, 4, r.name, r.passed, r.measured)


def test_c5_open_set_superiority(report, acceptance_log):
    r = row(report, "open-set superiority")
    ok = r.passed and r.seconds <= 20 * 60
    assert record(acceptance_log, 5, r.name, ok, f"{r.measured}; pipeline {r.seconds:.0f}s")


def test_c6_loss_ordering(report, acceptance_log):
    r = row(report, "loss ordering")
    assert record(acceptance_log, 6, r.name, r.passed, f"softmax-rtl minus tl: {r.measured}")


def test_c7_determinism(report, acceptance_log):
    r = row(report, "determinism")
    assert record(acceptance_log, 7, r.name, r.passed, r.measured)


def test_c8_protocol(acceptance_log):
    n_unknown, tests = repro.check_protocol(7)
    ok = n_unknown == 23 and tests == {10}
    assert record(acceptance_log, 8, "protocol fidelity", ok,
                  f"{n_unknown} unknown of 46 at ratio 0.5; test instances per class {sorted(tests)}")
