"""The seven acceptance criteria, each at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL ...`` line, echoed in the
terminal summary whatever the outcome. Criteria 5 and 6 share one ablation
grid (default config, seeds 0, 1, 2) whose outputs are kept under
``runs/acceptance`` for inspection; it takes over an hour on one core.
"""
import csv
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tempalign import checks
from tempalign.synth import gen_dataset
from tempalign.train import VARIANTS, WINDOWS, TrainConfig, ablate, summarize, train

from .conftest import ACCEPTANCE_LINES, TINY

ROOT = Path(__file__).resolve().parents[1]


def report(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    groups = [checks.primitive_checks(), checks.warp_checks(), [checks.head_check()], [checks.critic_check()],
              [checks.end_to_end_check()]]
    secs = time.perf_counter() - t0
    results = [r for g in groups for r in g]
    bad = [r.name for r in results if not r.passed]
    few = [r.name for r in results if int(r.detail.split()[0]) < 10]
    tol_ok = all(r.tol <= 1e-4 for r in results)
    n_smooth = sum(r.tol <= 1e-6 for r in results)
    ok = not bad and not few and tol_ok and secs < 120
    report(1, ok, f"{len(results)} suites ({n_smooth} at 1e-6, {len(checks.PRIMITIVES)} primitives), "
                  f"worst {max(r.value / r.tol for r in results):.2g} of tolerance, {secs:.0f}s; failed {bad}")


def test_criterion_2_identities(tmp_path):
    ids = checks.identity_checks()
    bad = [r.line() for r in ids if not r.passed]
    run = train(TrainConfig.from_json({**TINY, "epochs": 2, "out_dir": str(tmp_path)}))
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    beta = run.config.beta
    mismatch = [r["step"] for r in rows
                if float(r["l_total"]) != float(r["l_h"]) + beta * float(r["l_mi"])]
    ok = not bad and not mismatch and len(rows) > 0 and beta == 0.1
    report(2, ok, "; ".join(f"{r.name} {r.value:.1e}" for r in ids)
           + f"; loss identity exact on {len(rows) - len(mismatch)}/{len(rows)} logged steps")


def test_criterion_3_mi_bench():
    t0 = time.perf_counter()
    rows = checks.mi_bench(log=None)
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in rows) and [r.rho for r in rows] == [0.0, 0.5, 0.9] and secs < 300
    report(3, ok, ", ".join(f"rho={r.rho}: {r.estimate:.4f} in [{r.low:.4f},{r.high:.4f}] max {r.max_batch_estimate:.3f}"
                            f"<=logB {r.log_b:.3f}" for r in rows) + f"; {secs:.0f}s")


def test_criterion_4_alignment_recovery():
    t0 = time.perf_counter()
    rows = checks.alignment_bench(log=None)
    secs = time.perf_counter() - t0
    n_pass = sum(r.passed for r in rows)
    ok = len(rows) == 5 and n_pass >= 4 and secs < 600
    report(4, ok, f"{n_pass}/5 seeds reduce distance >=50% ("
                  + ", ".join(f"{r.reduction:.3f}" for r in rows) + f"); {secs:.0f}s")


@pytest.fixture(scope="module")
def ablation():
    base = TrainConfig()
    out = ROOT / "runs" / "acceptance"
    t0 = time.perf_counter()
    ds = gen_dataset(base.synth, base.n_clips, base.data_seed)
    rows = ablate(base, [0, 1, 2], out_dir=str(out), dataset=ds, log=print)
    secs = time.perf_counter() - t0
    means = {(s["table"], s["cell"]): s["mean"] for s in summarize(rows)}
    return rows, means, secs


def _win(w):
    return "{" + ",".join(f"{d:+d}" for d in w) + "}"


@pytest.mark.slow
def test_criterion_5_component_ordering(ablation):
    rows, means, secs = ablation
    m = [means[("components", v)] for v in VARIANTS]
    failed = [r for r in rows if r["status"] != "ok"]
    ok = (m[0] < m[1] < m[2] <= m[3] and m[3] - m[0] >= 0.03 and secs <= 2.5 * 3600 and not failed)
    report(5, ok, " / ".join(f"{v} {x:.4f}" for v, x in zip(VARIANTS, m))
           + f"; full-baseline {m[3] - m[0]:+.4f}; grid {secs / 60:.0f} min")


@pytest.mark.slow
def test_criterion_6_window_trend(ablation):
    _, means, _ = ablation
    m = [means[("window", _win(w))] for w in WINDOWS]
    steps = np.diff(m)
    ok = bool(np.all(steps >= -0.005))
    report(6, ok, " / ".join(f"{_win(w)} {x:.4f}" for w, x in zip(WINDOWS, m))
           + f"; worst step {steps.min():+.4f}")


def test_criterion_7_determinism(tmp_path):
    cfg = replace(TrainConfig(), epochs=2, n_clips=60)
    ds = gen_dataset(cfg.synth, cfg.n_clips, cfg.data_seed)
    for name in ("a", "b"):
        train(replace(cfg, out_dir=str(tmp_path / name)), ds)
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    proc = subprocess.run([sys.executable, "-m", "tempalign", "gradcheck"], capture_output=True, text=True)
    ok = same and proc.returncode == 0
    report(7, ok, f"metrics CSVs {'bit-identical' if same else 'DIFFER'}; gradcheck exit {proc.returncode}")
