"""Experiment orchestration: respond / compare / verify plus metrics.

Wires the dielectric application into a budgeted operator for the outer
inexact GMRES: each granted budget is translated into per-band Sternheimer
tolerances by the configured strategy.  Costs are measured in Hamiltonian
applications (one per inner CG iteration), the metric every report uses.
"""

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .archive import load_ground_state, save_ground_state
from .config import ExperimentConfig
from .errors import ConfigurationError, InvariantViolationError, NonConvergenceError
from .groundstate import (
    GroundState,
    diagonalize_dense,
    external_potential_derivative,
    ham_counter,
    run_scf,
)
from .igmres import igmres_solve
from .kernels import KernelSpec, KerkerSpec, apply_kerker
from .pwbasis import build_grids
from .response import (
    apply_chi0,
    apply_dielectric,
    dielectric_error_bound,
    orbital_row_norm,
)
from .sternheimer import project_out_occupied, solve_sternheimer
from .strategies import StrategySpec, ToleranceContext, parse_strategy, select_tolerances

TIGHT_CG_TOL = 1e-16
THREADS_ENV_VAR = "PWDYSON_NUM_THREADS"
HISTORY_COLUMNS = ("iter", "est_res", "true_res", "cum_ham", "mean_cg_tol", "mean_cg_iters")
REPORT_FORMAT_VERSION = 1


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV_VAR}={raw!r} is not an integer")


@dataclass
class RunMetrics:
    strategy: str
    tau: float
    m: int
    converged: bool
    n_ham: int                      # total, right-hand-side build included
    n_ham_rhs: int                  # share spent building the right-hand side
    final_est_res: float
    final_true_res: float
    final_true_res_precond: float   # nan for unpreconditioned runs
    true_res0: float
    eta: float
    history: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    s_final: float = np.nan
    bound_margin_min: float = np.inf

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "strategy": self.strategy,
            "tau": self.tau,
            "m": self.m,
            "converged": self.converged,
            "n_ham": self.n_ham,
            "n_ham_rhs": self.n_ham_rhs,
            "final_est_res": self.final_est_res,
            "final_true_res": self.final_true_res,
            "final_true_res_precond": self.final_true_res_precond,
            "true_res0": self.true_res0,
            "eta": self.eta,
            "s_final": self.s_final,
            "bound_margin_min": self.bound_margin_min,
            "restarts": self.restarts,
            "history": [dict(zip(HISTORY_COLUMNS, row)) for row in self.history],
        }


def _json_default(obj):
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _atomic_text(path: str, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ensure_ground_state(config: ExperimentConfig, archive_path: str = None) -> GroundState:
    """Load the configured archive if present, otherwise run the SCF."""
    path = archive_path or config.archive
    if path and os.path.exists(os.path.join(path, "meta.json")):
        return load_ground_state(path)
    gs = run_scf(
        config.model, tol=config.scf.tol, max_iter=config.scf.max_iter,
        mixing=config.scf.mixing, kerker_alpha=config.scf.kerker_alpha,
        damping=config.scf.damping,
    )
    if path:
        save_ground_state(path, gs)
    return gs


def _base_context(gs: GroundState, spec: StrategySpec, iteration: int,
                  rhs_norm: float = np.nan) -> ToleranceContext:
    grids = gs.grids
    return ToleranceContext(
        iteration=iteration, n_occ=gs.n_occ, occ=gs.occ_occ,
        volume=grids.lattice.volume, n_g=grids.n_g,
        row_norm=orbital_row_norm(grids, gs.phi_occ, real_part=True),
        rhs_norm=rhs_norm,
        eps_gap=(gs.eps_gap_ref - gs.eps_occ) if spec.use_gap else None,
    )


def build_perturbation(gs: GroundState, pert, spec: StrategySpec, threads: int = 1):
    """Displacement perturbation dV0 and the right-hand side chi0 dV0.

    dV0 is the analytic derivative of the indexed Gaussian's lattice sum
    with respect to its centre, contracted with the unit direction (or a
    central finite difference when the analytic flag is off).  The
    right-hand side applies chi0 in rescaled form, with per-band
    tolerances drawn from the strategy's iteration-0 budget tau/3; the
    static baselines use their fixed tolerance instead.
    """
    model, grids = gs.model, gs.grids
    if pert.analytic:
        dv0 = external_potential_derivative(model, grids, pert.gaussian, pert.direction)
    else:
        h = 1e-5
        direction = np.asarray(pert.direction, dtype=float)
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ConfigurationError("perturbation direction must be a nonzero vector")
        direction = direction / norm
        base = model.gaussians[pert.gaussian]
        frac_step = h * direction @ np.linalg.inv(model.lattice.a)

        def shifted(sign):
            from .groundstate import GaussianWell, external_potential
            center = tuple(np.asarray(base.center) + sign * frac_step)
            well = GaussianWell(center=center, amplitude=base.amplitude, width=base.width)
            shifted_model = type(model)(
                lattice=model.lattice, e_cut=model.e_cut,
                n_electrons=model.n_electrons, temperature=model.temperature,
                smearing=model.smearing, occupation_threshold=model.occupation_threshold,
                xc=model.xc, gaussians=(well,),
            )
            return external_potential(shifted_model, grids)

        dv0 = (shifted(+1) - shifted(-1)) / (2 * h)

    dv_norm = float(np.linalg.norm(dv0))
    if dv_norm == 0.0:
        return dv0, np.zeros(grids.n_g), 0

    # chi0 dV0 = |dV0| chi0(dV0 / |dV0|): the normalised application makes
    # the strategy tolerances commensurate with the error budget tau/3.
    ctx = _base_context(gs, spec, iteration=0)
    ctx.kv_norm = dv_norm
    if spec.kind == "d10n":
        # self-referencing baseline: provisional pass to measure |chi0 dV0|
        ctx.rhs_norm = 1.0
        provisional = select_tolerances(
            StrategySpec("d10", spec.preconditioned, spec.tau, spec.m), ctx)
        drho0, stats0 = apply_chi0(gs, dv0 / dv_norm, provisional, threads=threads)
        ctx.rhs_norm = float(np.linalg.norm(drho0)) * dv_norm
        cost = stats0.ham_applications
        tols = select_tolerances(spec, ctx)
        if np.all(tols >= provisional):
            return dv0, dv_norm * drho0, cost
        drho0, stats = apply_chi0(gs, dv0 / dv_norm, tols, threads=threads)
        return dv0, dv_norm * drho0, cost + stats.ham_applications
    ctx.rhs_norm = 1.0  # placeholder; unused by the remaining kinds
    tols = select_tolerances(spec, ctx)
    drho0, stats = apply_chi0(gs, dv0 / dv_norm, tols, threads=threads)
    return dv0, dv_norm * drho0, stats.ham_applications


def true_residual(gs: GroundState, kernel: KernelSpec, x: np.ndarray,
                  b: np.ndarray, threads: int = 1) -> float:
    """||b - E x|| with every Sternheimer tolerance tightened to 1e-16."""
    app = apply_dielectric(gs, kernel, np.asarray(x, dtype=float),
                           np.full(gs.n_occ, TIGHT_CG_TOL), threads=threads)
    return float(np.linalg.norm(b - app.output))


def run_response(config: ExperimentConfig, gs: GroundState = None,
                 out_dir: str = None) -> RunMetrics:
    """Solve the Dyson equation for the configured perturbation and strategy.

    Writes report.json and history.csv when an output directory is given.
    Non-convergence raises, with the partial report attached.
    """
    threads = thread_count()
    resp = config.response
    spec = parse_strategy(resp.strategy, tau=resp.tau, m=resp.m, use_gap=resp.use_gap)
    if gs is None:
        gs = ensure_ground_state(config)
    grids = gs.grids
    kernel = KernelSpec(xc=config.model.xc)
    kerker = KerkerSpec(alpha=resp.kerker_alpha) if spec.preconditioned else None

    ham_start = ham_counter.value
    dv0, b, n_ham_rhs = build_perturbation(gs, resp.perturbation, spec, threads=threads)
    b_norm = float(np.linalg.norm(b))

    ctx0 = _base_context(gs, spec, iteration=1, rhs_norm=b_norm)
    app_log = []
    history = []
    bound_margins = []

    def op(v, budget):
        def tolerances(kv_norm):
            ctx = ToleranceContext(
                iteration=1, n_occ=ctx0.n_occ, occ=ctx0.occ, volume=ctx0.volume,
                n_g=ctx0.n_g, row_norm=ctx0.row_norm, rhs_norm=ctx0.rhs_norm,
                eps_gap=ctx0.eps_gap, kv_norm=kv_norm, common_factor=budget,
            )
            return select_tolerances(spec, ctx)

        app = apply_dielectric(gs, kernel, v, tolerances, threads=threads)
        out = apply_kerker(kerker, grids, app.output) if kerker else app.output
        if app.kv_norm > 0 and app.tolerances_used:
            bound = dielectric_error_bound(gs, app.kv_norm, app.tolerances_used)
            bound_margins.append(budget / bound if bound > 0 else np.inf)
        app_log.append({
            "mean_cg_tol": float(np.mean(app.tolerances_used)) if app.tolerances_used else 0.0,
            "mean_cg_iters": float(np.mean(app.cg_iterations_per_band))
            if app.cg_iterations_per_band else 0.0,
        })
        return out, app.ham_applications

    every = resp.true_residual_every

    def monitor(info):
        stats = app_log[-1] if app_log else {"mean_cg_tol": 0.0, "mean_cg_iters": 0.0}
        t_res = np.nan
        if every and info["iteration"] % every == 0:
            t_res = true_residual(gs, kernel, info["get_x"](), b, threads=threads)
        history.append((info["iteration"], info["est_res"], t_res,
                        ham_counter.value - ham_start,
                        stats["mean_cg_tol"], stats["mean_cg_iters"]))

    b_solver = apply_kerker(kerker, grids, b) if kerker else b
    try:
        report = igmres_solve(op, b_solver, x0=None, m=spec.m, tau=spec.tau,
                              s_init=1.0, monitor=monitor)
        converged = True
    except NonConvergenceError as err:
        report = err.report
        converged = False

    n_ham = ham_counter.value - ham_start
    final_true = true_residual(gs, kernel, report.solution, b, threads=threads)
    if kerker:
        exact = apply_dielectric(gs, kernel, report.solution,
                                 np.full(gs.n_occ, TIGHT_CG_TOL), threads=threads)
        final_true_precond = float(np.linalg.norm(
            apply_kerker(kerker, grids, b - exact.output)))
    else:
        final_true_precond = np.nan
    true0 = b_norm
    eta = (-np.log10(final_true / true0) / n_ham
           if (n_ham > 0 and final_true > 0 and true0 > 0) else np.nan)

    metrics = RunMetrics(
        strategy=spec.name, tau=spec.tau, m=spec.m, converged=converged,
        n_ham=n_ham, n_ham_rhs=n_ham_rhs,
        final_est_res=report.final_est_res, final_true_res=final_true,
        final_true_res_precond=final_true_precond, true_res0=true0, eta=eta,
        history=history,
        restarts=[{"cycle": r.cycle, "reason": r.reason, "s_before": r.s_before,
                   "s_after": r.s_after} for r in report.restarts],
        s_final=report.s_final,
        bound_margin_min=float(np.min(bound_margins)) if bound_margins else np.inf,
    )
    metrics.solution = report.solution
    metrics.rhs = b
    metrics.igmres = report

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _atomic_text(os.path.join(out_dir, "report.json"),
                     json.dumps(metrics.to_dict(), indent=1, default=_json_default))
        lines = [",".join(HISTORY_COLUMNS)]
        for row in history:
            lines.append(",".join("" if (isinstance(x, float) and np.isnan(x))
                                  else repr(x) for x in row))
        _atomic_text(os.path.join(out_dir, "history.csv"), "\n".join(lines) + "\n")

    if not converged:
        raise NonConvergenceError(
            f"Dyson solve ({spec.name}) did not converge", report=metrics)
    return metrics


def compare_strategies(config: ExperimentConfig, strategies, out_dir: str = None,
                       gs: GroundState = None, reference: str = None) -> list:
    """Run each strategy on the shared model; tabulate cost and accuracy.

    eta_rel references the d10 baseline (pd10 when only the preconditioned
    run is present, or an explicit `reference`).  Failures are recorded
    per row instead of aborting the table.
    """
    if gs is None:
        gs = ensure_ground_state(config)
    rows = []
    for name in strategies:
        run_config = ExperimentConfig(
            model=config.model, scf=config.scf,
            response=type(config.response)(
                strategy=name, tau=config.response.tau, m=config.response.m,
                kerker_alpha=config.response.kerker_alpha,
                use_gap=config.response.use_gap,
                perturbation=config.response.perturbation,
                true_residual_every=config.response.true_residual_every,
                seed=config.response.seed,
            ),
            output_dir=config.output_dir, archive=config.archive,
        )
        try:
            metrics = run_response(run_config, gs=gs)
            rows.append({"strategy": metrics.strategy, "converged": True,
                         "final_true_res": metrics.final_true_res,
                         "n_ham": metrics.n_ham, "eta": metrics.eta})
        except NonConvergenceError as err:
            partial = err.report
            rows.append({"strategy": name, "converged": False,
                         "final_true_res": getattr(partial, "final_true_res", np.nan),
                         "n_ham": getattr(partial, "n_ham", 0),
                         "eta": getattr(partial, "eta", np.nan)})

    names = [r["strategy"] for r in rows]
    if reference is None:
        reference = "d10" if "d10" in names else ("pd10" if "pd10" in names else names[0])
    ref_eta = next((r["eta"] for r in rows if r["strategy"] == reference), np.nan)
    for r in rows:
        r["eta_rel"] = r["eta"] / ref_eta if ref_eta and np.isfinite(ref_eta) else np.nan

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _atomic_text(os.path.join(out_dir, "compare.json"), json.dumps({
            "format_version": REPORT_FORMAT_VERSION,
            "reference": reference,
            "rows": rows,
        }, indent=1, default=_json_default))
        cols = ("strategy", "converged", "final_true_res", "n_ham", "eta", "eta_rel")
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(repr(r[c]) if not isinstance(r[c], str) else r[c]
                                  for c in cols))
        _atomic_text(os.path.join(out_dir, "compare.csv"), "\n".join(lines) + "\n")
    return rows


# -- verification suite ----------------------------------------------------------


def check_fft_roundtrip(gs: GroundState, rng) -> dict:
    grids = gs.grids
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(grids.n_b) + 1j * rng.standard_normal(grids.n_b)
        err = np.linalg.norm(grids.to_fourier(grids.to_real(x)) - x) / np.linalg.norm(x)
        worst = max(worst, err)
    return {"name": "fft_roundtrip", "passed": worst <= 1e-14, "margin": 1e-14 / max(worst, 1e-300)}


def check_orthonormality(gs: GroundState) -> dict:
    defect = float(np.max(np.abs(gs.phi.conj().T @ gs.phi - np.eye(gs.n_kept))))
    return {"name": "orbital_orthonormality", "passed": defect <= 1e-10,
            "margin": 1e-10 / max(defect, 1e-300)}


def check_kerker_lemma(gs: GroundState, alpha: float) -> dict:
    # dense assembly on an auxiliary coarse grid with n_g <= 512
    e_cut = gs.model.e_cut
    grids = gs.grids
    while grids.n_g > 512:
        e_cut /= 2
        grids = build_grids(gs.model.lattice, e_cut)
    spec = KerkerSpec(alpha=alpha)
    t = np.zeros((grids.n_g, grids.n_g))
    for j in range(grids.n_g):
        e = np.zeros(grids.n_g)
        e[j] = 1.0
        t[:, j] = apply_kerker(spec, grids, e)
    herm = float(np.max(np.abs(t - t.T)))
    eig = np.linalg.eigvalsh(0.5 * (t + t.T))
    const = np.ones(grids.n_g)
    const_defect = float(np.max(np.abs(apply_kerker(spec, grids, const) - const)))
    passed = (herm <= 1e-12 and eig.min() > 0 and eig.max() <= 1 + 1e-12
              and abs(eig.max() - 1) <= 1e-12 and const_defect <= 1e-12)
    return {"name": "kerker_lemma", "passed": passed,
            "margin": min(1e-12 / max(herm, 1e-300), 1e-12 / max(abs(eig.max() - 1), 1e-300)),
            "details": {"hermiticity": herm, "lambda_min": float(eig.min()),
                        "lambda_max": float(eig.max()), "const_defect": const_defect,
                        "n_g": grids.n_g}}


def check_row_norm_bounds(gs: GroundState) -> dict:
    val = orbital_row_norm(gs.grids, gs.phi_occ)
    vol = gs.grids.lattice.volume
    lo, hi = np.sqrt(gs.n_occ / vol), np.sqrt(gs.grids.n_g / vol)
    passed = lo * (1 - 1e-12) <= val <= hi * (1 + 1e-12)
    return {"name": "row_norm_bounds", "passed": passed,
            "margin": min(val / lo, hi / val),
            "details": {"lower": lo, "value": val, "upper": hi}}


def check_chi0_const(gs: GroundState, threads: int = 1) -> dict:
    c = 1.0
    out, _ = apply_chi0(gs, np.full(gs.grids.n_g, c),
                        np.full(gs.n_occ, 1e-14), threads=threads)
    rel = float(np.linalg.norm(out)) / (c * gs.model.n_electrons)
    return {"name": "chi0_gauge_invariance", "passed": rel <= 1e-10,
            "margin": 1e-10 / max(rel, 1e-300)}


def check_bound_dominance(gs: GroundState, kernel: KernelSpec, rng,
                          draws: int = 20, threads: int = 1) -> dict:
    margins = []
    for _ in range(draws):
        v = rng.standard_normal(gs.grids.n_g)
        tols = 10.0 ** rng.uniform(-8, -4, gs.n_occ)
        approx = apply_dielectric(gs, kernel, v, tols, threads=threads)
        exact = apply_dielectric(gs, kernel, v, np.full(gs.n_occ, 1e-14),
                                 threads=threads)
        measured = float(np.linalg.norm(approx.output - exact.output))
        bound = dielectric_error_bound(gs, approx.kv_norm, tols)
        margins.append(bound / max(measured, 1e-300))
    worst = min(margins)
    return {"name": "error_bound_dominance", "passed": worst >= 1.0,
            "margin": worst, "details": {"draws": draws}}


def check_y_bound(gs: GroundState, config: ExperimentConfig, threads: int = 1) -> dict:
    # small converged solve on the actual Dyson problem
    spec = parse_strategy(config.response.strategy, tau=max(config.response.tau, 1e-7),
                          m=config.response.m)
    kernel = KernelSpec(xc=config.model.xc)
    kerker = KerkerSpec(alpha=config.response.kerker_alpha) if spec.preconditioned else None
    _, b, _ = build_perturbation(gs, config.response.perturbation, spec, threads=threads)

    def op(v, budget):
        def tolerances(kv):
            ctx = _base_context(gs, spec, iteration=1, rhs_norm=float(np.linalg.norm(b)))
            ctx.kv_norm = kv
            ctx.common_factor = budget
            return select_tolerances(spec, ctx)
        app = apply_dielectric(gs, kernel, v, tolerances, threads=threads)
        out = apply_kerker(kerker, gs.grids, app.output) if kerker else app.output
        return out, app.ham_applications

    b_solver = apply_kerker(kerker, gs.grids, b) if kerker else b
    report = igmres_solve(op, b_solver, m=spec.m, tau=spec.tau)
    y = report.y_final
    cycle = report.cycle_est_res[-1]
    worst = 0.0
    for i, yi in enumerate(y):
        bound = cycle[i] / report.sigma_final
        worst = max(worst, abs(yi) / bound if bound > 0 else np.inf)
    return {"name": "y_coefficient_bound", "passed": worst <= 1.0 + 1e-12,
            "margin": 1.0 / max(worst, 1e-300)}


def check_sternheimer_error_bound(gs: GroundState, rng) -> dict:
    # dense pseudo-inverse oracle; exact eigendecomposition of the stored H
    grids = gs.grids
    from .groundstate import dense_hamiltonian

    eps_all, phi_all = np.linalg.eigh(dense_hamiltonian(grids, gs.v_local))
    worst = 0.0
    for n in (0, gs.n_occ - 1):
        rhs = rng.standard_normal(grids.n_b) + 1j * rng.standard_normal(grids.n_b)
        rhs = project_out_occupied(gs.phi_occ, rhs)
        tol = 1e-8
        res = solve_sternheimer(gs, gs.v_local, n, rhs, tol)
        perp = phi_all[:, gs.n_occ:]
        gaps = eps_all[gs.n_occ:] - gs.eps[n]
        x_ref = perp @ ((perp.conj().T @ rhs) / gaps)
        err = float(np.linalg.norm(res.solution - x_ref))
        bound = tol / (gs.eps_gap_ref - gs.eps[n])
        worst = max(worst, err / bound)
    return {"name": "sternheimer_error_bound", "passed": worst <= 1.0 + 1e-9,
            "margin": 1.0 / max(worst, 1e-300)}


def verify_suite(config: ExperimentConfig, gs: GroundState = None,
                 out_dir: str = None) -> dict:
    """Run the executable-lemma checks; returns {ok, checks: [...]}."""
    threads = thread_count()
    if gs is None:
        gs = ensure_ground_state(config)
    rng = np.random.default_rng(config.response.seed)
    kernel = KernelSpec(xc=config.model.xc)
    checks = [
        check_fft_roundtrip(gs, rng),
        check_orthonormality(gs),
        check_kerker_lemma(gs, config.response.kerker_alpha),
        check_row_norm_bounds(gs),
        check_chi0_const(gs, threads=threads),
        check_bound_dominance(gs, kernel, rng, threads=threads),
        check_y_bound(gs, config, threads=threads),
        check_sternheimer_error_bound(gs, rng),
    ]
    ok = all(c["passed"] for c in checks)
    result = {"format_version": REPORT_FORMAT_VERSION, "ok": ok, "checks": checks}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _atomic_text(os.path.join(out_dir, "verify.json"), json.dumps(result, indent=1, default=_json_default))
    if not ok:
        failed = [c["name"] for c in checks if not c["passed"]]
        raise InvariantViolationError(f"verification failed: {', '.join(failed)}")
    return result
