"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The toy-model ground states are built once per session (a couple of
minutes of SCF for the metal).  Set PWDYSON_TEST_CACHE to a directory to
persist the archives between sessions.

Criterion 2's ">= 10 tau" magnitude clause is asserted literally; see the
test docstring for what the desk-scale toy actually delivers.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from pwdyson import Lattice, build_grids
from pwdyson.archive import load_ground_state, save_ground_state
from pwdyson.config import Perturbation, reference_config
from pwdyson.groundstate import GaussianWell, ModelSpec, run_scf
from pwdyson.harness import check_bound_dominance, run_response
from pwdyson.igmres import igmres_solve
from pwdyson.kernels import KernelSpec, KerkerSpec, apply_kerker
from pwdyson.response import apply_chi0, apply_dielectric
from pwdyson.strategies import parse_strategy

from conftest import dense_chi0_oracle

TAU = 1e-9


def report(number, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number:2d} {status}: {detail}")
    return passed


def build_or_load(name, config):
    cache = os.environ.get("PWDYSON_TEST_CACHE")
    if cache:
        path = os.path.join(cache, name)
        if os.path.exists(os.path.join(path, "meta.json")):
            return load_ground_state(path)
    gs = run_scf(config.model, tol=config.scf.tol, max_iter=config.scf.max_iter,
                 mixing=config.scf.mixing, kerker_alpha=config.scf.kerker_alpha,
                 damping=config.scf.damping)
    if cache:
        save_ground_state(os.path.join(cache, name), gs)
    return gs


@pytest.fixture(scope="session")
def toy_metal():
    config = reference_config("toy_metal")
    return config, build_or_load("toy_metal", config)


@pytest.fixture(scope="session")
def toy_insulator():
    config = reference_config("toy_insulator")
    return config, build_or_load("toy_insulator", config)


@pytest.fixture(scope="session")
def metal_runs(toy_metal):
    """One respond run per strategy on the shared toy-metal ground state."""
    config, gs = toy_metal
    runs = {}
    for name in ("d10", "pbal", "pgrt", "pagr", "pd10"):
        run_config = dataclasses.replace(
            config, response=dataclasses.replace(config.response, strategy=name))
        try:
            runs[name] = run_response(run_config, gs=gs)
        except Exception as err:  # record failures; criteria decide
            runs[name] = err
    return runs


@pytest.fixture(scope="session")
def tiny_oracle_gs():
    """Small dense-oracle model with n_g <= 400."""
    model = ModelSpec(
        lattice=Lattice.cubic(3.4), e_cut=3.8, n_electrons=4,
        temperature=5e-3, smearing="fermi_dirac",
        gaussians=(
            GaussianWell(center=(0.4, 0.45, 0.5), amplitude=-3.0, width=0.8),
            GaussianWell(center=(0.7, 0.6, 0.45), amplitude=-2.0, width=0.7),
        ),
    )
    grids = build_grids(model.lattice, model.e_cut)
    assert grids.n_g <= 400
    return run_scf(model, tol=1e-11, max_iter=600, damping=0.3)


def test_criterion_1_inexact_gmres_guarantee():
    """100 adversarial budget-saturating trials keep the true residual <= tau."""
    rng = np.random.default_rng(2024)
    start = time.time()
    failures = 0
    for _ in range(100):
        n = int(rng.integers(50, 201))
        a = np.eye(n) + 0.5 * rng.standard_normal((n, n)) / np.sqrt(n)
        b = rng.standard_normal(n)

        def op(v, budget, a=a):
            err = rng.standard_normal(len(v))
            err *= budget / np.linalg.norm(err)
            return a @ v + err, 1

        tau = 1e-8
        result = igmres_solve(op, b, m=10, tau=tau)
        if np.linalg.norm(b - a @ result.solution) > tau:
            failures += 1
    elapsed = time.time() - start
    ok = failures == 0 and elapsed < 60
    assert report(1, ok, f"adversarial trials: {100 - failures}/100 within tau, "
                         f"{elapsed:.1f}s (< 60s)")


def test_criterion_2_static_tolerance_failure(metal_runs):
    """d10's estimate lies while pbal/pgrt hold tau.

    The ">= 10 tau" magnitude of the d10 stagnation is asserted as
    specified.  At desk scale the error amplification that produces the
    paper's three-orders gap is bounded by the small spectral factors of
    a Gamma-only toy, so the observed stagnation is O(tau), not 10 tau;
    the qualitative failure (estimated residual below tau/3, true
    residual above tau) is reproduced.
    """
    d10, pbal, pgrt = metal_runs["d10"], metal_runs["pbal"], metal_runs["pgrt"]
    for run in (d10, pbal, pgrt):
        assert not isinstance(run, Exception), f"run failed: {run}"
    est_ok = d10.final_est_res <= TAU / 3
    overshoot = d10.final_true_res / TAU
    failure_ok = d10.final_true_res >= 10 * TAU
    adaptive_ok = pbal.final_true_res <= TAU and pgrt.final_true_res <= TAU
    ok = est_ok and failure_ok and adaptive_ok
    report(2, ok,
           f"d10 est {d10.final_est_res:.2e} (<= tau/3: {est_ok}), "
           f"true {d10.final_true_res:.2e} = {overshoot:.1f} tau (>= 10 tau: {failure_ok}); "
           f"pbal {pbal.final_true_res:.2e}, pgrt {pgrt.final_true_res:.2e} (<= tau: {adaptive_ok})")
    assert ok


def test_criterion_3_efficiency_ordering(metal_runs):
    pbal, pagr, pd10 = metal_runs["pbal"], metal_runs["pagr"], metal_runs["pd10"]
    for run in (pbal, pagr, pd10):
        assert not isinstance(run, Exception), f"run failed: {run}"
    rel_bal = pbal.eta / pd10.eta
    rel_agr = pagr.eta / pd10.eta
    ok = rel_bal > 1.0 and rel_agr > 1.0
    assert report(3, ok, f"eta_rel(pbal/pd10) = {rel_bal:.2f}, "
                         f"eta_rel(pagr/pd10) = {rel_agr:.2f} (both > 1)")


def test_criterion_4_error_bound_dominance(toy_metal):
    _, gs = toy_metal
    rng = np.random.default_rng(7)
    check = check_bound_dominance(gs, KernelSpec(xc=gs.model.xc), rng, draws=20)
    assert report(4, check["passed"],
                  f"20 random (v, tol) draws, min bound/measured = {check['margin']:.2f}")


def test_criterion_5_y_coefficient_bound(metal_runs):
    worst = 0.0
    checked = 0
    for name, run in metal_runs.items():
        if isinstance(run, Exception) or not run.converged:
            continue
        rep = run.igmres
        cycle = rep.cycle_est_res[-1]
        for i, yi in enumerate(rep.y_final):
            bound = cycle[i] / rep.sigma_final
            worst = max(worst, abs(yi) / bound)
            checked += 1
    ok = checked > 0 and worst <= 1.0 + 1e-12
    assert report(5, ok, f"|y_i| <= ||r~_(i-1)|| / sigma_m on {checked} coefficients, "
                         f"worst ratio {worst:.3f}")


def test_criterion_6_kerker_properties():
    grids = build_grids(Lattice.cubic(4.0), 3.0)
    assert grids.n_g <= 512
    spec = KerkerSpec(alpha=0.8)
    t = np.zeros((grids.n_g, grids.n_g))
    for j in range(grids.n_g):
        e = np.zeros(grids.n_g)
        e[j] = 1.0
        t[:, j] = apply_kerker(spec, grids, e)
    herm = float(np.max(np.abs(t - t.T)))
    eig = np.linalg.eigvalsh(0.5 * (t + t.T))
    const = np.ones(grids.n_g)
    const_exact = np.max(np.abs(apply_kerker(spec, grids, const) - const))
    ok = (herm <= 1e-12 and eig.min() > 0 and eig.max() <= 1 + 1e-12
          and abs(eig.max() - 1.0) <= 1e-12 and const_exact <= 1e-12)
    assert report(6, ok, f"dense T at n_g={grids.n_g}: hermiticity {herm:.1e}, "
                         f"eigenvalues in ({eig.min():.3f}, {eig.max():.12f}], "
                         f"T const defect {const_exact:.1e}")


def test_criterion_7_row_norm_bounds(toy_metal, toy_insulator, tiny_oracle_gs):
    from pwdyson.response import orbital_row_norm

    worst_margin = np.inf
    for _, gs in (toy_metal, toy_insulator, (None, tiny_oracle_gs)):
        val = orbital_row_norm(gs.grids, gs.phi_occ)
        vol = gs.grids.lattice.volume
        lo, hi = np.sqrt(gs.n_occ / vol), np.sqrt(gs.grids.n_g / vol)
        if not lo * (1 - 1e-12) <= val <= hi * (1 + 1e-12):
            worst_margin = -1
            break
        worst_margin = min(worst_margin, val / lo, hi / val)
    ok = worst_margin > 0
    assert report(7, ok, f"sqrt(n_occ/V) <= row norm <= sqrt(n_g/V) on all ground "
                         f"states, min margin {worst_margin:.2f}")


def test_criterion_8_dense_oracle_equivalence(tiny_oracle_gs):
    gs = tiny_oracle_gs
    grids = gs.grids
    kernel = KernelSpec()
    chi = dense_chi0_oracle(gs)
    sym_defect = np.max(np.abs(chi - chi.T))
    eigs = np.linalg.eigvalsh(0.5 * (chi + chi.T))
    k_dense = np.zeros((grids.n_g, grids.n_g))
    for j in range(grids.n_g):
        e = np.zeros(grids.n_g)
        e[j] = 1.0
        from pwdyson.kernels import apply_kernel
        k_dense[:, j] = apply_kernel(kernel, grids, gs.rho, e)
    e_dense = np.eye(grids.n_g) - chi @ k_dense

    rng = np.random.default_rng(11)
    dv = rng.standard_normal(grids.n_g)
    b, _ = apply_chi0(gs, dv, np.full(gs.n_occ, 1e-13))

    def op(v, budget):
        app = apply_dielectric(gs, kernel, v, np.full(gs.n_occ, 1e-13))
        return app.output, app.ham_applications

    result = igmres_solve(op, b, m=20, tau=TAU)
    residual = np.linalg.norm(b - e_dense @ result.solution)
    x_direct = np.linalg.solve(e_dense, b)
    diff = np.linalg.norm(result.solution - x_direct)
    ok = residual <= TAU and sym_defect <= 1e-8 and eigs.max() <= 1e-8
    assert report(8, ok, f"n_g={grids.n_g}: GMRES-vs-dense residual {residual:.2e} "
                         f"(<= tau), |x - x_direct| = {diff:.2e}, chi0 symmetry "
                         f"{sym_defect:.1e}, max eigenvalue {eigs.max():.2e}")


def test_criterion_9_superlinearity(metal_runs):
    """Terminal inner-iteration collapse for the efficiency strategies.

    Gated on pbal and pagr, whose strategy prefactors match the loose
    budgets the collapse relies on; pgrt keeps its guarantee factor
    1/(|Kv| row) which on this toy is ~7x below bal, so its terminal CG
    count is reported for reference but not gated.
    """
    details = []
    ok = True
    for name in ("pbal", "pagr"):
        run = metal_runs[name]
        assert not isinstance(run, Exception)
        first, last = run.history[0][5], run.history[-1][5]
        ok &= last <= 2.0 and last <= 0.5 * first
        details.append(f"{name} {first:.1f} -> {last:.1f}")
    pgrt = metal_runs["pgrt"]
    if not isinstance(pgrt, Exception):
        details.append(f"(pgrt {pgrt.history[0][5]:.1f} -> {pgrt.history[-1][5]:.1f}, "
                       f"not gated)")
    assert report(9, ok, "mean CG iterations per band, first -> last outer "
                         "iteration: " + ", ".join(details))


def test_criterion_10_chi0_gauge_invariance(toy_metal, toy_insulator):
    results = []
    ok = True
    for label, (_, gs) in (("metal", toy_metal), ("insulator", toy_insulator)):
        out, _ = apply_chi0(gs, np.full(gs.grids.n_g, 1.0),
                            np.full(gs.n_occ, 1e-14))
        rel = np.linalg.norm(out) / gs.model.n_electrons
        ok &= rel <= 1e-10
        results.append(f"{label} {rel:.2e}")
    assert report(10, ok, "||chi0(const)|| / N <= 1e-10: " + ", ".join(results))
