"""Application of chi0 and the (inexact) dielectric adjoint E = I - chi0 K.

The density response to a local perturbation dv splits into three pieces:
first-order occupation changes, the occupied-subspace orbital response
(explicit sum over states), and the unoccupied response from one
Sternheimer solve per occupied band.  The per-band solve tolerances are
an explicit argument so this module stays agnostic of how they are
chosen.

E is always applied in rescaled form, E v = v - |Kv| chi0(Kv / |Kv|),
so the Sternheimer right-hand sides stay O(1) and small Kv cannot
underflow.  The same rescaling links the solve tolerances to the
computable error bound of `dielectric_error_bound`.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .groundstate import GroundState
from .kernels import KernelSpec, apply_kernel
from .sternheimer import project_out_occupied, solve_sternheimer

DEGENERACY_RTOL = 1e-8
IMAG_EIGENSHIFT_RTOL = 1e-10


@dataclass
class Chi0Stats:
    cg_iterations_per_band: list = field(default_factory=list)
    tolerances_used: list = field(default_factory=list)
    ham_applications: int = 0


@dataclass
class DielectricApplication:
    output: np.ndarray
    kv_norm: float
    cg_iterations_per_band: list
    tolerances_used: list
    ham_applications: int


def delta_eigen_occupations(gs: GroundState, dv: np.ndarray):
    """First-order eigenvalue, Fermi-level and occupation changes.

    delta_eps_n = <phi_n, dv phi_n>; the Fermi-level shift distributes the
    occupation change so that sum_n delta_f_n = 0.  For gapped systems
    (all f'_n ~ 0) the Fermi level is pinned and delta_eps_F = 0.
    """
    grids = gs.grids
    psi_r = grids.to_real_many(gs.phi_occ.T)
    dvpsi = grids.to_fourier_many(dv[None, :] * psi_r)
    raw = np.einsum("bn,nb->n", gs.phi_occ.conj(), dvpsi)
    # FFT roundoff puts ~eps * |dv| of noise on each matrix element
    scale = max(np.max(np.abs(raw), initial=0.0), float(np.linalg.norm(dv)) * grids.w)
    if scale > 0 and np.max(np.abs(raw.imag)) > IMAG_EIGENSHIFT_RTOL * scale:
        raise FloatingPointError(
            f"first-order eigenvalue shifts have imaginary part "
            f"{np.max(np.abs(raw.imag)):.2e} relative to {scale:.2e}"
        )
    delta_eps = raw.real
    fprime = gs.fprime_occ()
    fp_sum = fprime.sum()
    if abs(fp_sum) > 1e-14 * gs.n_occ:
        delta_eps_f = float(fprime @ delta_eps / fp_sum)
    else:
        delta_eps_f = 0.0
    delta_f = fprime * (delta_eps - delta_eps_f)
    return delta_eps, delta_eps_f, delta_f


def _occupied_pair_weights(gs: GroundState) -> np.ndarray:
    """Weight matrix W[m, n] for the occupied-occupied sum over states.

    W[m, n] multiplies <phi_m, dv phi_n>; the pair (n, m) + (m, n)
    contributions to the density response then reproduce the exact
    divided difference (f_n - f_m)/(eps_n - eps_m):

        f_n W[m, n] + f_m W[n, m] = (f_n - f_m)/(eps_n - eps_m).

    Degenerate pairs use the derivative f'_n for the divided difference.
    The diagonal is zero: the delta_f term carries the full first-order
    occupation response, which is what keeps chi0 of a constant zero
    for metals.
    """
    f = gs.occ_occ
    eps = gs.eps_occ
    fprime = gs.fprime_occ()
    n = gs.n_occ
    de = eps[None, :] - eps[:, None]               # eps_n - eps_m at [m, n]
    df = f[None, :] - f[:, None]
    degenerate = np.abs(de) <= DEGENERACY_RTOL * np.maximum(1.0, np.abs(eps[None, :]))
    ratio = np.where(degenerate, fprime[None, :], df / np.where(degenerate, 1.0, de))
    weights = ratio * f[None, :] / (f[None, :] ** 2 + f[:, None] ** 2)
    np.fill_diagonal(weights, 0.0)
    return weights


def delta_phi_occupied(gs: GroundState, dv: np.ndarray) -> np.ndarray:
    """Occupied-subspace orbital response, one column per occupied band."""
    grids = gs.grids
    psi_r = grids.to_real_many(gs.phi_occ.T)
    dvpsi = grids.to_fourier_many(dv[None, :] * psi_r).T      # (n_b, n_occ)
    m = gs.phi_occ.conj().T @ dvpsi                           # M[m, n] = <phi_m, dv phi_n>
    return gs.phi_occ @ (_occupied_pair_weights(gs) * m)


def apply_chi0(gs: GroundState, dv: np.ndarray, tolerances,
               threads: int = 1) -> tuple:
    """Density response chi0 dv with per-band Sternheimer tolerances.

    Returns (delta_rho, Chi0Stats).  The per-band contributions are
    accumulated in a fixed-order array and reduced with a pairwise sum,
    so results are reproducible independent of the thread count.
    """
    grids = gs.grids
    n_occ = gs.n_occ
    tolerances = np.asarray(tolerances, dtype=float)
    if tolerances.shape != (n_occ,):
        raise ValueError(f"need one tolerance per occupied band ({n_occ}), "
                         f"got shape {tolerances.shape}")
    if np.any(tolerances <= 0):
        raise ValueError("Sternheimer tolerances must be positive")

    psi_r = grids.to_real_many(gs.phi_occ.T)                  # (n_occ, n_g)
    dvpsi = grids.to_fourier_many(dv[None, :] * psi_r)        # (n_occ, n_b)
    m = gs.phi_occ.conj().T @ dvpsi.T                         # (n_occ, n_occ)

    raw_eps = np.diag(m)
    delta_eps = raw_eps.real
    fprime = gs.fprime_occ()
    fp_sum = fprime.sum()
    delta_eps_f = float(fprime @ delta_eps / fp_sum) if abs(fp_sum) > 1e-14 * n_occ else 0.0
    delta_f = fprime * (delta_eps - delta_eps_f)

    dphi_p = gs.phi_occ @ (_occupied_pair_weights(gs) * m)    # (n_b, n_occ)

    def solve_band(n):
        rhs = -project_out_occupied(gs.phi_occ, dvpsi[n])
        return solve_sternheimer(gs, gs.v_local, n, rhs, tolerances[n])

    if threads > 1 and n_occ > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_band, range(n_occ)))
    else:
        results = [solve_band(n) for n in range(n_occ)]

    dphi = dphi_p + np.stack([r.solution for r in results], axis=1)
    dphi_r = grids.to_real_many(dphi.T)                       # (n_occ, n_g)
    contrib = (2.0 * gs.occ_occ[:, None]) * (psi_r.conj() * dphi_r).real
    contrib += delta_f[:, None] * np.abs(psi_r) ** 2
    delta_rho = contrib.sum(axis=0)

    stats = Chi0Stats(
        cg_iterations_per_band=[r.cg_iterations for r in results],
        tolerances_used=list(tolerances),
        ham_applications=int(sum(r.cg_iterations for r in results)),
    )
    return delta_rho, stats


def apply_dielectric(gs: GroundState, kernel: KernelSpec, v: np.ndarray,
                     tolerances, threads: int = 1) -> DielectricApplication:
    """E v = v - |Kv| chi0(Kv / |Kv|); exact identity when Kv = 0.

    `tolerances` is either a per-band vector or a callable |Kv| -> vector,
    for strategies whose prefactor needs the kernel-product norm of the
    very vector being applied.
    """
    grids = gs.grids
    u = apply_kernel(kernel, grids, gs.rho, np.asarray(v, dtype=float))
    kv_norm = float(np.linalg.norm(u))
    if kv_norm == 0.0:
        return DielectricApplication(
            output=np.array(v, dtype=float, copy=True), kv_norm=0.0,
            cg_iterations_per_band=[], tolerances_used=[], ham_applications=0,
        )
    tol_vec = tolerances(kv_norm) if callable(tolerances) else tolerances
    drho, stats = apply_chi0(gs, u / kv_norm, tol_vec, threads=threads)
    return DielectricApplication(
        output=v - kv_norm * drho, kv_norm=kv_norm,
        cg_iterations_per_band=stats.cg_iterations_per_band,
        tolerances_used=stats.tolerances_used,
        ham_applications=stats.ham_applications,
    )


def orbital_row_norm(grids, phi: np.ndarray, real_part: bool = False) -> float:
    """Maximum over grid points of the l2 row norm of to_real(Phi).

    For orthonormal Phi this lies between sqrt(n_occ/|Omega|) and
    sqrt(n_g/|Omega|).  With `real_part` the imaginary parts are dropped,
    which for orbitals that can be chosen real costs at most sqrt(2).
    """
    psi_r = grids.to_real_many(phi.T)
    mat = psi_r.real if real_part else psi_r
    return float(np.sqrt(np.max(np.sum(np.abs(mat) ** 2, axis=0))))


def dielectric_error_bound(gs: GroundState, kv_norm: float, tolerances) -> float:
    """Computable bound on ||(E - E_inexact) v|| from the solve tolerances.

        2 |Kv| ||to_real(Phi)||_{2,inf} sqrt(n_g n_occ / |Omega|)
            * max_n f_n tau_n / (eps_{N_occ+1} - eps_n)
    """
    tolerances = np.asarray(tolerances, dtype=float)
    gaps = gs.eps_gap_ref - gs.eps_occ
    worst = float(np.max(gs.occ_occ * tolerances / gaps))
    row = _cached_row_norm(gs)
    grids = gs.grids
    return (2.0 * kv_norm * row
            * np.sqrt(grids.n_g * gs.n_occ / gs.grids.lattice.volume) * worst)


def _cached_row_norm(gs: GroundState, real_part: bool = False) -> float:
    key = "re" if real_part else "abs"
    if key not in gs._row_norm_cache:
        gs._row_norm_cache[key] = orbital_row_norm(gs.grids, gs.phi_occ, real_part)
    return gs._row_norm_cache[key]
