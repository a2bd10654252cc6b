"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are echoed in the terminal summary under "acceptance criteria".
Criteria 6, 9 and 10 share one full training run through the CLI.
"""
import json
import time

import pytest

from demotraj import checks, cli


def test_c01_dynamics_roundtrip(acceptance):
    t0 = time.perf_counter()
    errs = checks.roundtrip_errors(10_000)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-9 and secs < 5.0
    acceptance(1, ok, f"roundtrip max err {worst:.1e} over 10000 pairs in {secs:.2f} s (< 1e-9, < 5 s)")
    assert ok


def test_c02_golden_step(acceptance):
    vy = checks.golden_step_vy()
    ok = abs(vy - checks.GOLDEN_VY) < 1e-12
    acceptance(2, ok, f"vy' = {vy:.15f}, oracle {checks.GOLDEN_VY:.15f} (tol 1e-12)")
    assert ok


def test_c03_convergence_order(acceptance):
    errs = checks.convergence_errors((0.1, 0.05, 0.025))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    ok = all(1.5 <= r <= 2.5 for r in ratios)
    acceptance(3, ok, "error ratios " + ", ".join(f"{r:.3f}" for r in ratios) + " (in [1.5, 2.5])")
    assert ok


def test_c04_gradient_suite(acceptance):
    t0 = time.perf_counter()
    errs = {name: checks.layer_gradcheck(name, draws=10, eps=1e-6) for name in checks.LAYER_CASES}
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and secs < 60.0
    acceptance(4, ok, f"{len(errs)} layers, worst {worst} {errs[worst]:.1e} in {secs:.1f} s (< 1e-4, < 60 s)")
    assert ok


def test_c05_kl(acceptance):
    kl = checks.kl_fixture()
    low = checks.kl_min_random(1000)
    ok = abs(kl - 0.5) < 1e-12 and low >= 0.0
    acceptance(5, ok, f"KL(N(1,1)||N(0,1)) = {kl:.15f}, min over 1000 pairs {low:.3e}")
    assert ok


def test_c07_metric_oracles(acceptance):
    r = checks.rmse_fixture()
    a = checks.min_ade_fixture()
    bad = checks.min_ade_monotone(1000)
    ok = abs(r - 3.5355) < 1e-4 and a == 1.0 and bad == 0
    acceptance(7, ok, f"rmse {r:.6f}, top-K minADE {a}, {bad} monotonicity violations in 1000 sets")
    assert ok


def test_c08_equivariance(acceptance):
    pe = checks.permutation_equivariance_error(100)
    fe = checks.frame_equivariance_error(100)
    ok = pe < 1e-9 and fe < 1e-9
    acceptance(8, ok, f"permutation {pe:.1e}, frame {fe:.1e} over 100 scenes (< 1e-9)")
    assert ok


def _full_run(out) -> float:
    """Default config: 50 epochs on 200 generated scenes, seed 7. Returns wall seconds."""
    t0 = time.perf_counter()
    assert cli.main(["train", "--out", str(out)]) == cli.EXIT_OK
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "run"
    return out, _full_run(out)


@pytest.mark.slow
def test_c06_closed_loop_benchmark(benchmark_run, acceptance):
    out, secs = benchmark_run
    metrics = json.loads((out / "metrics.json").read_text())
    demo, cv = metrics["demo"]["rmse_per_second"], metrics["const_vel"]["rmse_per_second"]
    gain2 = 1.0 - demo["2"] / cv["2"]
    gain5 = 1.0 - demo["5"] / cv["5"]
    ok = gain2 >= 0.20 and gain5 >= 0.10 and secs < 15 * 60
    acceptance(6, ok, f"2 s RMSE {demo['2']:.3f} vs CV {cv['2']:.3f} ({gain2:+.1%}), "
                      f"5 s {demo['5']:.3f} vs {cv['5']:.3f} ({gain5:+.1%}), {secs:.0f} s "
                      "(>= 20%, >= 10%, < 900 s)")
    assert ok


@pytest.mark.slow
def test_c09_determinism(benchmark_run, tmp_path, acceptance):
    first, _ = benchmark_run
    again = tmp_path / "again"
    _full_run(again)
    a, b = (first / "metrics.json").read_bytes(), (again / "metrics.json").read_bytes()
    ok = a == b and (first / "model.ckpt").read_bytes() == (again / "model.ckpt").read_bytes()
    acceptance(9, ok, "metrics.json and checkpoint byte-identical across two runs" if ok else "runs differ")
    assert ok


@pytest.mark.slow
def test_c10_latency(benchmark_run, capsys, acceptance):
    out, _ = benchmark_run
    cli.main(["verify", "--checkpoint", str(out / "model.ckpt")])
    row = next(ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("latency"))
    ms = float(row.split("PASS" if "PASS" in row else "FAIL")[1].split()[0])
    ok = ms < checks.LATENCY_BUDGET_MS
    acceptance(10, ok, f"single-scene inference {ms:.1f} ms via verify (< {checks.LATENCY_BUDGET_MS:.0f} ms)")
    assert ok
