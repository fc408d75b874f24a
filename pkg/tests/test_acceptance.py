"""End-to-end acceptance checks at the stated sizes and tolerances.

Each test records one PASS/FAIL line (see ``conftest.py``), shown in the
terminal summary.  The full-workload tests are slow: about half an hour
on one core in total.
"""
import hashlib
import math
import os
import subprocess
import sys
from pathlib import Path

import pytest

from p2posn.harness import checks
from p2posn.harness.cli import default_plan_text
from p2posn.harness.plan import parse_plan
from p2posn.harness.report import FIGURE_METRICS, write_csvs
from p2posn.harness.runner import run_plan
from p2posn.storage import LOCAL_OBJECTS, REPLICATIONS

PLAN = parse_plan(default_plan_text())
_runs: dict = {}
_routing: dict = {}


def workload(n: int, seed: int):
    if (n, seed) not in _runs:
        _runs[(n, seed)] = run_plan(n, PLAN, seed=seed)
    return _runs[(n, seed)]


def routing(n: int):
    if n not in _routing:
        _routing[n] = checks.routing_check(n, 256, range(10))
    return _routing[n]


def test_c01_routing_oracle_agreement_and_hops(criterion):
    rep = routing(64)
    ok = rep.agreement == 1.0 and rep.mean_hops <= 1.0 and rep.wall_s < 10.0
    criterion(1, ok, f"N=64 lookups={rep.lookups} agreement={rep.agreement:.4f} "
                     f"mean_hops={rep.mean_hops:.3f} (<=1.0) runtime={rep.wall_s:.2f}s (<10s)")
    assert ok


def test_c02_hop_bound_across_sizes(criterion):
    parts, ok = [], True
    for n in (8, 16, 32, 64):
        rep = routing(n)
        bound = math.ceil(math.log2(n)) + 2
        ok &= rep.max_hops <= bound and rep.agreement == 1.0
        parts.append(f"N={n}:max={rep.max_hops}/bound={bound}")
    criterion(2, ok, " ".join(parts))
    assert ok


def test_c03_no_acknowledged_object_loss(criterion):
    acked = crashed = lost = unreadable = 0
    for seed in range(100):
        rep = checks.durability_run(seed, max_crash=3)
        acked += rep.acked
        crashed += rep.crashed
        lost += len(rep.lost)
        unreadable += len(rep.unreadable)
    detected, gone = checks.holder_wipeout(0)
    ok = lost == 0 and unreadable == 0 and detected and gone
    criterion(3, ok, f"runs=100 acked={acked} crashes={crashed} lost={lost} unreadable={unreadable} "
                     f"all-holders-crashed detected={detected}")
    assert ok


def test_c04_load_fairness(criterion):
    good, parts = 0, []
    for seed in range(10):
        r = workload(64, seed)
        direct = r.imbalance()
        monitored = r.monitored_imbalance(LOCAL_OBJECTS, REPLICATIONS)
        fair = (direct[0] < 2 and direct[1] < 2 and monitored is not None
                and monitored[0] < 2 and monitored[1] < 2)
        good += fair
        parts.append(f"s{seed}:{direct[0]:.2f}/{direct[1]:.2f}"
                     + (f"|mon {monitored[0]:.2f}/{monitored[1]:.2f}" if monitored else "|mon -"))
    ok = good >= 8
    criterion(4, ok, f"N=64 fair seeds={good}/10 (need >=8); stored/replica max/mean: " + " ".join(parts))
    assert ok


def test_c05_pht_range_queries(criterion):
    rep = checks.pht_check(range(100), keys=200, ranges=50)
    ok = rep.ok
    criterion(5, ok, f"seeds={rep.seeds} lookups={rep.lookups} ranges={rep.ranges} mismatches={rep.mismatches} "
                     f"max_probes={rep.max_probes} max_gets={rep.max_gets} bound={rep.bound}")
    assert ok


def test_c06_access_matrix_and_integrity(criterion):
    deviations, cells = [], 0
    for seed in range(3):
        rep = checks.access_matrix(seed)
        cells += len(rep.cells)
        deviations += rep.deviations
    fuzz = checks.integrity_fuzz(1000, seed=0, provider_name="ecc")
    ok = cells > 0 and not deviations and fuzz.ok and fuzz.mutations == 1000
    criterion(6, ok, f"matrix cells={cells} deviations={len(deviations)}; fuzz mutations={fuzz.mutations} "
                     f"rejected={fuzz.rejected} intact={fuzz.intact} silent={fuzz.silent}")
    assert ok


def test_c07_monitoring_exact_and_churn(criterion):
    reps = [checks.monitoring_check(64, seed, churn=0.1) for seed in range(5)]
    ok = all(r.ok for r in reps)
    criterion(7, ok, "N=64 " + " ".join(
        f"s{seed}:count={r.count},exact={r.exact},sd_err={r.stddev_err:.1e},depth={r.depth},"
        f"churn_ticks={r.churn_ticks}" for seed, r in enumerate(reps)))
    assert ok


def test_c08_full_workload_per_size(criterion, tmp_path):
    ok, parts = True, []
    for n in (8, 16, 32, 64):
        r = workload(n, 0)
        names = {p.name for p in write_csvs(r, tmp_path / f"n{n}")}
        csv_ok = all(f"{m}.csv" in names for m in FIGURE_METRICS)
        ok &= r.success_rate == 1.0 and csv_ok and r.wall_s < 300
        parts.append(f"N={n}:{r.total('ok')}/{r.scheduled} ok,{r.wall_s:.0f}s,csv={'ok' if csv_ok else 'missing'}")
    criterion(8, ok, " ".join(parts))
    assert ok


def test_c09_crypto_overhead_constant(criterion):
    rep = checks.crypto_overhead(range(600, 2201, 100), "ecc")
    ok = rep.ok
    criterion(9, ok, f"payloads {rep.sizes[0]}-{rep.sizes[-1]} B: asym overhead={sorted(set(rep.asym))} B "
                     f"signature={sorted(set(rep.sig))} B sym overhead={sorted(set(rep.sym))} B "
                     f"sealed item overhead={sorted(set(rep.item))} B")
    assert ok


def _csv_digest(outdir: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(outdir.glob("*.csv")):
        h.update(p.name.encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_c10_byte_identical_reruns(criterion, tmp_path):
    digests = []
    for i, hashseed in enumerate(("1", "2")):
        out = tmp_path / f"run{i}"
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        proc = subprocess.run([sys.executable, "-m", "p2posn", "run", "--nodes", "8", "--seed", "3",
                               "--out", str(out), "--no-figures"], env=env, capture_output=True, text=True)
        assert proc.returncode in (0, 1), proc.stderr
        digests.append(_csv_digest(out))
    ok = digests[0] == digests[1]
    criterion(10, ok, f"two processes (hash seeds 1, 2), N=8 built-in plan: "
                      f"sha256 {digests[0][:12]} vs {digests[1][:12]}")
    assert ok
