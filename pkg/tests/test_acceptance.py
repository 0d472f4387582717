"""Acceptance criteria 1-10.

Each test records one ``PASS``/``FAIL criterion N`` line (printed in the
terminal summary) and then asserts it. Training-heavy criteria share models
through module fixtures. Run just this file with ``pytest tests/test_acceptance.py -v``.
"""
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from skno.adjoint import adjoint_identity_check, grad_check
from skno.datasets import gen_burgers_dataset, gen_heat_dataset
from skno.diagnostics import energy_capture, entanglement_entropy, layer_trace, superres_sweep
from skno.model import LIFT_KINDS, RECOVER_KINDS, ArchConfig, SknoModel, forward
from skno.oracle import oracle_verify
from skno.training import (TEST_SEED_OFFSET, read_suite_csv, run_experiment,
                           run_experiment_suite, suite_experiments)

# pinned tolerances
ORACLE_TOL = 1e-3
ORACLE_CPU_S = 10.0
GRAD_EPS, GRAD_TOL, GRAD_CPU_S = 1e-5, 1e-6, 300.0
ADJOINT_TOL, ADJOINT_DRAWS = 1e-12, 100
HEAT_TOL, HEAT_ABLATED_MIN, HEAT_CPU_S = 1e-2, 1e-1, 1200.0
RECOVERY_SPREAD = 2.0
BURGERS_TOL, SUPERRES_RATIO = 5e-3, 1.25
SUPERRES_GRIDS = (128, 256, 512, 1024)
DARCY_FACTOR, DARCY_CPU_S = 5.0, 3600.0
RESOLUTION_TOL = 1e-4
ENTROPY_ZERO, ENERGY_IDENTITY_TOL = 1e-10, 1e-10

DATA_CACHE: dict = {}


@pytest.fixture(scope="module")
def heat_runs():
    """Heat suite models: SKNO and its Ã-ablated twin on the same budget."""
    t0 = time.process_time()
    with threadpool_limits(1):
        runs = {e.name: run_experiment(e, DATA_CACHE) for e in suite_experiments("heat_linear")}
    return runs, time.process_time() - t0


@pytest.fixture(scope="module")
def burgers_run():
    (exp,) = suite_experiments("burgers")
    with threadpool_limits(1):
        return exp, run_experiment(exp, DATA_CACHE)


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_oracle(report):
    t0 = time.process_time()
    rows = oracle_verify(tol=ORACLE_TOL)
    cpu = time.process_time() - t0
    failed = [f"{r['check']}/{r['kind']}={r['error']:.3e}(bound {r['bound']:.3e})"
              for r in rows if not r["passed"]]
    ok = not failed and cpu < ORACLE_CPU_S
    errs = {f"{r['check']}/{r['kind']}": f"{r['error']:.3e}" for r in rows if r["check"] != "t_zero"}
    assert report(1, ok, f"errors {errs}; failed {failed or 'none'}; cpu {cpu:.2f}s")


# --- 2 ----------------------------------------------------------------------

def random_config(i):
    d = 1 + i % 2
    return ArchConfig(
        d=d, n_layers=1 + i % 4, modes=2, n_p=3, hidden=4,
        lift_kind=LIFT_KINDS[i % len(LIFT_KINDS)],
        recover_kind=RECOVER_KINDS[i % len(RECOVER_KINDS)],
        a_tilde_form=("diag", "full")[(i // 2) % 2],
        with_local_propagator=i % 3 == 0,
        with_positional_features=i % 5 == 1,
    )


def test_criterion_2_gradients(report):
    t0 = time.process_time()
    worst, failures, kinds = 0.0, [], set()
    for seed in range(10):
        arch = random_config(seed)
        kinds.update([arch.lift_kind, arch.recover_kind, arch.a_tilde_form, f"d{arch.d}"])
        m = SknoModel(arch, seed=seed)
        rng = np.random.default_rng(seed)
        shape = (2,) + (6,) * arch.d + (1,)
        a, u = rng.standard_normal(shape), rng.standard_normal(shape)
        training = "dropout" in arch.lift_kind + arch.recover_kind
        for r in grad_check(m, a, u, eps=GRAD_EPS, tolerance=GRAD_TOL, training=training):
            worst = max(worst, r.max_rel_error)
            if not r.passed:
                failures.append(f"seed{seed}:{r.tensor}")
    cpu = time.process_time() - t0
    covered = set(LIFT_KINDS) | set(RECOVER_KINDS) | {"diag", "full", "d1", "d2"}
    ok = not failures and cpu < GRAD_CPU_S and covered <= kinds
    assert report(2, ok, f"worst rel error {worst:.2e} over 10 models; failures {failures or 'none'}; "
                         f"all variants covered {covered <= kinds}; cpu {cpu:.1f}s")


# --- 3 ----------------------------------------------------------------------

def test_criterion_3_adjoint(report):
    worst_q, worst_p = 0.0, 0.0
    for lift, rec in (("linear", "linear"), ("constant", "step"), ("linear", "delta"), ("constant", "mean")):
        res = adjoint_identity_check(SknoModel(ArchConfig(n_p=8, lift_kind=lift, recover_kind=rec), seed=1),
                                     draws=ADJOINT_DRAWS)
        worst_q = max(worst_q, res["recover_max_rel"])
        worst_p = max(worst_p, res["lift_max_rel"])
    ok = worst_q < ADJOINT_TOL and worst_p < ADJOINT_TOL
    assert report(3, ok, f"recovery {worst_q:.2e}, lifting {worst_p:.2e} over {ADJOINT_DRAWS} draws")


# --- 4 ----------------------------------------------------------------------

def test_criterion_4_heat(report, heat_runs):
    runs, cpu = heat_runs
    skno, ablated = runs["skno"].final_rel_l2, runs["no_a_tilde"].final_rel_l2
    ok = skno <= HEAT_TOL and ablated > HEAT_ABLATED_MIN and cpu < HEAT_CPU_S
    assert report(4, ok, f"skno {skno:.3e} (<= {HEAT_TOL}), no_a_tilde {ablated:.3e} "
                         f"(> {HEAT_ABLATED_MIN}); cpu {cpu:.0f}s")


# --- 5 ----------------------------------------------------------------------

def test_criterion_5_recovery_parity(report):
    exps = [e for e in suite_experiments("pq_variants")
            if e.name in ("Q=delta", "Q=step", "Q=mean", "Q=linear")]
    with threadpool_limits(1):
        errs = {e.name: run_experiment(e, DATA_CACHE).final_rel_l2 for e in exps}
    spread = max(errs.values()) / min(errs.values())
    ok = spread <= RECOVERY_SPREAD
    detail = ", ".join(f"{k} {v:.3e}" for k, v in errs.items())
    assert report(5, ok, f"{detail}; max/min {spread:.2f} (<= {RECOVERY_SPREAD})")


# --- 6 ----------------------------------------------------------------------

def burgers_test_at(exp, n):
    spec = exp.data
    return gen_burgers_dataset(spec.n_test, n, seed=spec.seed + TEST_SEED_OFFSET,
                               solve_resolution=spec.resolution[0])


def test_criterion_6_burgers(report, burgers_run):
    exp, res = burgers_run
    sweep = superres_sweep(res.model, lambda n: burgers_test_at(exp, n), SUPERRES_GRIDS)
    errs = ", ".join(f"{n}:{e:.3e}" for n, e in sweep["rows"])
    ok = res.final_rel_l2 < BURGERS_TOL and sweep["ratio"] < SUPERRES_RATIO
    assert report(6, ok, f"test rel L2 {res.final_rel_l2:.3e} (< {BURGERS_TOL}); sweep {errs}; "
                         f"max/min {sweep['ratio']:.4f} (< {SUPERRES_RATIO})")


# --- 7 ----------------------------------------------------------------------

def test_criterion_7_darcy(report, tmp_path):
    exps = [e for e in suite_experiments("darcy_ablation")
            if e.name in ("baseline", "no_local", "no_global")]
    t0 = time.process_time()
    with threadpool_limits(1):
        rows = read_suite_csv(run_experiment_suite("darcy_ablation", tmp_path, experiments=exps,
                                                   save_runs=False))
    cpu = time.process_time() - t0
    err = {r["arch_summary"].split(":")[0]: float(r["final_rel_l2"]) for r in rows}
    base, local, glob = err["baseline"], err["no_local"], err["no_global"]
    ok = base < local < glob and glob >= DARCY_FACTOR * base and cpu < DARCY_CPU_S
    assert report(7, ok, f"baseline {base:.3e} < no_local {local:.3e} < no_global {glob:.3e}; "
                         f"no_global/baseline {glob / base:.1f} (>= {DARCY_FACTOR}); cpu {cpu:.0f}s")


# --- 8 ----------------------------------------------------------------------

def shared_point_error(model, a_n, a_2n):
    lo = forward(model, a_n)
    hi = forward(model, a_2n)[:, ::2]
    return float(np.linalg.norm(hi - lo) / np.linalg.norm(lo))


def test_criterion_8_resolution_invariance(report, heat_runs, burgers_run):
    runs, _ = heat_runs
    heat_model = runs["skno"].model
    heat_err = shared_point_error(heat_model, gen_heat_dataset(10, 256, seed=5).a,
                                  gen_heat_dataset(10, 512, seed=5).a)
    exp, res = burgers_run
    burgers_err = shared_point_error(res.model, burgers_test_at(exp, 128).a, burgers_test_at(exp, 256).a)
    ok = heat_err < RESOLUTION_TOL and burgers_err < RESOLUTION_TOL
    assert report(8, ok, f"N vs 2N shared-point rel L2: heat {heat_err:.2e}, burgers {burgers_err:.2e} "
                         f"(< {RESOLUTION_TOL})")


# --- 9 ----------------------------------------------------------------------

def test_criterion_9_diagnostics(report, heat_runs):
    runs, _ = heat_runs
    model = runs["skno"].model
    assert model.arch.lift_kind == "linear" and not model.arch.with_positional_features
    sample = gen_heat_dataset(1, 256, seed=11).a
    trace = layer_trace(model, sample)
    s0 = entanglement_entropy(trace[0][1])

    # last-layer dictionary against a linear readout of the trained model
    V = trace[-1][1]
    chi = model.params["recover.chi"][:, 0]
    caps = [energy_capture(V, chi, r) for r in range(1, V.shape[1] + 1)]
    es = [c[0] for c in caps]
    monotone = bool(np.all(np.diff(es) >= -1e-15))
    unorm = np.linalg.norm(V @ chi)
    identity = max(abs(direct - pred) / unorm for _, direct, pred in caps)

    rank1 = entanglement_entropy(np.outer(np.arange(1.0, 65.0), np.linspace(1, 2, 8)))
    eye = entanglement_entropy(3.7 * np.eye(16))
    ok = (s0 < ENTROPY_ZERO and monotone and identity < ENERGY_IDENTITY_TOL
          and abs(rank1) < ENTROPY_ZERO and abs(eye - np.log(16)) < ENTROPY_ZERO)
    assert report(9, ok, f"stage-0 entropy {s0:.1e}; E(r) non-decreasing {monotone}; "
                         f"identity rel error {identity:.1e}; rank-1 {rank1:.1e}; "
                         f"scaled identity {eye:.6f} vs ln16 {np.log(16):.6f}")


# --- 10 ---------------------------------------------------------------------

def _digest_dir(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _metrics_without_wall(path: Path):
    lines = path.read_text().splitlines()
    return [",".join(c for i, c in enumerate(line.split(",")) if i != 3) for line in lines]


def test_criterion_10_determinism(report, tmp_path):
    exps = suite_experiments("darcy_ablation", "smoke", seed=3)[:1] + suite_experiments("heat_linear", "smoke", seed=3)
    digests, metrics = [], []
    for rep in range(2):
        d, m = [], []
        for e in exps:
            out = tmp_path / f"rep{rep}" / e.name
            with threadpool_limits(1):
                run_experiment(e, {}, out_dir=out)
            d.append(_digest_dir(out / "checkpoint"))
            m.append(_metrics_without_wall(out / "metrics.csv"))
        digests.append(d)
        metrics.append(m)
    ok = digests[0] == digests[1] and metrics[0] == metrics[1]
    assert report(10, ok, f"{len(exps)} runs repeated: checkpoints identical {digests[0] == digests[1]}, "
                          f"metrics identical {metrics[0] == metrics[1]}")
