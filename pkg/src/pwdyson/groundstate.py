"""Toy-solid Hamiltonian, dense diagonalisation, smearing and the SCF loop.

The model is a reduced Hartree-Fock solid: kinetic energy, a lattice-summed
sum of Gaussian wells as the external potential, the Hartree potential of
the electron density, and optionally a local LDA exchange term.  At desk
scale (n_b up to a couple thousand) the eigenproblem is solved densely,
which keeps every downstream test exact.
"""

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.special import erfc, expit

from .errors import ConfigurationError, NonConvergenceError
from .pwbasis import FourierGrids, Lattice, build_grids


class HamiltonianCounter:
    """Thread-safe running count of Hamiltonian applications.

    One count per apply_hamiltonian call; this is the cost metric every
    report is based on, so concurrent Sternheimer solves must be able to
    increment it safely.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1):
        with self._lock:
            self._count += n

    def reset(self):
        with self._lock:
            self._count = 0

    @property
    def value(self) -> int:
        with self._lock:
            return self._count


ham_counter = HamiltonianCounter()


@dataclass(frozen=True)
class GaussianWell:
    center: tuple        # fractional coordinates in the cell
    amplitude: float     # Hartree (negative = attractive)
    width: float         # Bohr

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigurationError(f"gaussian width must be positive, got {self.width}")


@dataclass(frozen=True)
class ModelSpec:
    """Definition of the toy solid."""

    lattice: Lattice
    e_cut: float
    n_electrons: int
    temperature: float
    smearing: str = "fermi_dirac"
    occupation_threshold: float = 1e-8
    xc: str = "none"
    gaussians: tuple = ()

    def __post_init__(self):
        if self.n_electrons <= 0 or self.n_electrons % 2 != 0:
            raise ConfigurationError("n_electrons must be an even positive integer")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.smearing not in ("fermi_dirac", "gaussian"):
            raise ConfigurationError(f"unknown smearing {self.smearing!r}")
        if self.xc not in ("none", "lda_x"):
            raise ConfigurationError(f"unknown xc {self.xc!r}")
        if not 0 < self.occupation_threshold < 2:
            raise ConfigurationError("occupation_threshold must lie in (0, 2)")


# -- smearing ---------------------------------------------------------------

def smearing_function(kind: str):
    """Occupation f(x) on [0, 2) and its derivative f'(x), both monotone."""
    if kind == "fermi_dirac":
        def f(x):
            return 2.0 * expit(-np.asarray(x, dtype=float))

        def fprime(x):
            s = expit(-np.asarray(x, dtype=float))
            return -2.0 * s * (1.0 - s)
    elif kind == "gaussian":
        def f(x):
            return erfc(np.asarray(x, dtype=float))

        def fprime(x):
            x = np.asarray(x, dtype=float)
            return -2.0 / np.sqrt(np.pi) * np.exp(-np.clip(x * x, 0, 700))
    else:
        raise ConfigurationError(f"unknown smearing {kind!r}")
    return f, fprime


def fermi_and_occupations(eps, n_electrons, temperature, smearing="fermi_dirac"):
    """Fermi level by bisection and the resulting occupations.

    Bisects sum_n f((eps_n - mu)/T) = N down to float resolution in mu;
    the smearing functions are strictly monotone so the level is unique.

    Raises:
        NonConvergenceError: the retained spectrum cannot hold N electrons
            (sum f < N even as mu -> infinity), i.e. the model is
            under-resolved.
    """
    eps = np.asarray(eps, dtype=float)
    f, _ = smearing_function(smearing)
    n = float(n_electrons)
    if 2 * len(eps) <= n_electrons:
        raise NonConvergenceError(
            f"{len(eps)} states cannot hold {n_electrons} electrons; retain more states"
        )

    def count(mu):
        return float(np.sum(f((eps - mu) / temperature)))

    lo = float(eps.min()) - temperature
    hi = float(eps.max()) + temperature
    while count(lo) >= n:
        lo -= 10 * temperature + abs(lo) * 0.1 + 1.0
    while count(hi) < n:
        hi += 10 * temperature + abs(hi) * 0.1 + 1.0

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if count(mid) < n:
            lo = mid
        else:
            hi = mid
    fermi = min((lo, hi), key=lambda mu: abs(count(mu) - n))
    return fermi, f((eps - fermi) / temperature)


# -- external potential -----------------------------------------------------

def _lattice_shifts(lattice: Lattice, r_cut: float) -> np.ndarray:
    """Lattice translations forming a box that covers |R| <= r_cut."""
    # spacing between lattice planes along a_d is 2 pi / |b_d|
    spacing = 2 * np.pi / np.linalg.norm(lattice.b, axis=1)
    nmax = np.ceil(r_cut / spacing).astype(int)
    ranges = [np.arange(-m, m + 1) for m in nmax]
    n1, n2, n3 = np.meshgrid(*ranges, indexing="ij")
    ints = np.stack([n1.ravel(), n2.ravel(), n3.ravel()], axis=1)
    return ints @ lattice.a


def _gaussian_cutoff_radius(model: ModelSpec) -> float:
    # tail < 1e-12 of the amplitude beyond 3*max-width + cell diameter
    widths = [g.width for g in model.gaussians] or [0.0]
    diameter = float(np.sum(np.linalg.norm(model.lattice.a, axis=1)))
    return 3.0 * max(widths) + diameter


def external_potential(model: ModelSpec, grids: FourierGrids) -> np.ndarray:
    """Lattice-summed Gaussian wells evaluated on the cube grid."""
    v = np.zeros(grids.n_g)
    if not model.gaussians:
        return v
    points = grids.real_space_points()
    shifts = _lattice_shifts(model.lattice, _gaussian_cutoff_radius(model))
    for g in model.gaussians:
        center = np.asarray(g.center, dtype=float) @ model.lattice.a
        for shift in shifts:
            d = points - (center + shift)
            v += g.amplitude * np.exp(-np.einsum("ij,ij->i", d, d) / (2 * g.width**2))
    return v


def external_potential_derivative(model: ModelSpec, grids: FourierGrids,
                                  index: int, direction: np.ndarray) -> np.ndarray:
    """d/dc [lattice-summed well `index`] contracted with a unit direction."""
    if not 0 <= index < len(model.gaussians):
        raise ConfigurationError(f"gaussian index {index} out of range")
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if norm == 0 or not np.all(np.isfinite(direction)):
        raise ConfigurationError("perturbation direction must be a nonzero vector")
    direction = direction / norm
    g = model.gaussians[index]
    points = grids.real_space_points()
    shifts = _lattice_shifts(model.lattice, _gaussian_cutoff_radius(model))
    center = np.asarray(g.center, dtype=float) @ model.lattice.a
    dv = np.zeros(grids.n_g)
    for shift in shifts:
        d = points - (center + shift)
        gauss = np.exp(-np.einsum("ij,ij->i", d, d) / (2 * g.width**2))
        dv += g.amplitude * gauss * (d @ direction) / g.width**2
    return dv


# -- Hamiltonian ------------------------------------------------------------

def apply_hamiltonian(grids: FourierGrids, v_local: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Apply H = -Laplacian/2 + v_local to a sphere vector; counts one application."""
    if psi.shape != (grids.n_b,):
        raise ValueError(f"expected sphere vector of length {grids.n_b}, got {psi.shape}")
    if v_local.shape != (grids.n_g,):
        raise ValueError(f"expected grid potential of length {grids.n_g}, got {v_local.shape}")
    out = 0.5 * grids.g2_sphere * psi + grids.to_fourier(v_local * grids.to_real(psi))
    ham_counter.add(1)
    return out


def dense_hamiltonian(grids: FourierGrids, v_local: np.ndarray) -> np.ndarray:
    """Explicit n_b x n_b Hamiltonian via the Fourier convolution theorem.

    V_{G,G'} = vhat(G - G'); every difference of two sphere vectors fits
    in the cube, so the wrap-around indexing is alias-free.
    """
    vfft = grids.cube_fft(v_local) / grids.n_g
    nx, ny, nz = grids.cube_dims
    diff = grids.g_int[:, None, :] - grids.g_int[None, :, :]
    flat = (diff[..., 0] % nx) + nx * ((diff[..., 1] % ny) + ny * (diff[..., 2] % nz))
    h = vfft[flat]
    h[np.arange(grids.n_b), np.arange(grids.n_b)] += 0.5 * grids.g2_sphere
    return h


def diagonalize_dense(grids: FourierGrids, v_local: np.ndarray, n_states: int):
    """Lowest n_states eigenpairs of the (Hermitian) discretised Hamiltonian."""
    if n_states > grids.n_b:
        raise ConfigurationError(f"n_states={n_states} exceeds basis size {grids.n_b}")
    h = dense_hamiltonian(grids, v_local)
    eps, phi = scipy.linalg.eigh(h, subset_by_index=[0, n_states - 1])
    return eps, phi


# -- density and potentials ---------------------------------------------------

def compute_density(grids: FourierGrids, phi: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """rho(r) = sum_n f_n |to_real(phi_n)(r)|^2, clipped of FFT noise."""
    psi_r = grids.to_real_many(phi.T)
    rho = np.einsum("n,nr->r", np.asarray(occ, dtype=float), np.abs(psi_r) ** 2)
    return rho


def hartree_potential(grids: FourierGrids, rho: np.ndarray) -> np.ndarray:
    """Zero-mean solution of -Laplacian v = 4 pi (rho - mean rho)."""
    rhof = grids.cube_fft(rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        vf = 4 * np.pi * rhof / grids.g2_cube
    vf[grids.g2_cube == 0] = 0.0
    v = grids.cube_ifft(vf)
    return v.real


def lda_exchange_potential(rho: np.ndarray) -> np.ndarray:
    """Slater exchange V_x = -(3/pi)^(1/3) rho^(1/3)."""
    return -((3.0 / np.pi) ** (1.0 / 3.0)) * np.cbrt(np.clip(rho, 0.0, None))


def total_local_potential(model: ModelSpec, grids: FourierGrids,
                          v_ext: np.ndarray, rho: np.ndarray) -> np.ndarray:
    v = v_ext + hartree_potential(grids, rho)
    if model.xc == "lda_x":
        v = v + lda_exchange_potential(rho)
    return v


# -- ground state -------------------------------------------------------------

@dataclass
class GroundState:
    """Converged SCF state; immutable by convention after construction.

    phi/eps/occ cover the occupied bands plus n_extra probe states, so
    eps[n_occ] (the lowest retained unoccupied level) is always available
    for the response error bounds.
    """

    model: ModelSpec
    grids: FourierGrids
    phi: np.ndarray          # (n_b, n_kept) orthonormal columns
    eps: np.ndarray          # (n_kept,) ascending
    occ: np.ndarray          # (n_kept,) in [0, 2)
    fermi_level: float
    rho: np.ndarray          # (n_g,) electrons / Bohr^3 on the grid
    n_occ: int
    v_local: np.ndarray      # (n_g,) total local potential defining phi/eps
    scf_residual: float = 0.0
    _row_norm_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_kept(self) -> int:
        return self.phi.shape[1]

    @property
    def phi_occ(self) -> np.ndarray:
        return self.phi[:, : self.n_occ]

    @property
    def occ_occ(self) -> np.ndarray:
        return self.occ[: self.n_occ]

    @property
    def eps_occ(self) -> np.ndarray:
        return self.eps[: self.n_occ]

    @property
    def eps_gap_ref(self) -> float:
        """Lowest retained unoccupied eigenvalue eps_{N_occ + 1}."""
        return float(self.eps[self.n_occ])

    def fprime_occ(self) -> np.ndarray:
        """f'_n = (1/T) f'_smear((eps_n - eps_F)/T) for the occupied bands."""
        _, fp = smearing_function(self.model.smearing)
        x = (self.eps_occ - self.fermi_level) / self.model.temperature
        return fp(x) / self.model.temperature


def _choose_n_extra(n_occ: int) -> int:
    return max(3, int(np.ceil(0.1 * n_occ)))


def run_scf(model: ModelSpec, tol: float, max_iter: int = 200, *,
            mixing: str = "kerker", kerker_alpha: float = 0.8,
            damping: float = 0.8, grids: FourierGrids = None,
            verbose: bool = False) -> GroundState:
    """Damped fixed-point SCF iteration for the toy solid.

    rho_{k+1} = rho_k + damping * M (F_KS(rho_k) - rho_k) with M either
    the Kerker preconditioner or the identity; converged when the raw
    fixed-point residual satisfies ||F_KS(rho_k) - rho_k|| sqrt(|Omega|/n_g)
    <= tol (which implies the same for the damped step).
    """
    from .kernels import KerkerSpec, apply_kerker

    if not tol > 0:
        raise ConfigurationError("scf tolerance must be positive")
    if mixing not in ("kerker", "identity"):
        raise ConfigurationError(f"unknown mixing {mixing!r}")

    if grids is None:
        grids = build_grids(model.lattice, model.e_cut)
    v_ext = external_potential(model, grids)
    kerker = KerkerSpec(alpha=kerker_alpha) if mixing == "kerker" else None

    rho = np.full(grids.n_g, model.n_electrons / model.lattice.volume)
    n_states = min(grids.n_b, model.n_electrons // 2 + max(6, model.n_electrons // 4))
    weight = np.sqrt(model.lattice.volume / grids.n_g)

    for it in range(max_iter):
        v_loc = total_local_potential(model, grids, v_ext, rho)
        eps, phi = diagonalize_dense(grids, v_loc, n_states)
        fermi, occ = fermi_and_occupations(eps, model.n_electrons,
                                           model.temperature, model.smearing)
        n_occ = int(np.max(np.nonzero(occ > model.occupation_threshold)[0])) + 1
        n_extra = _choose_n_extra(n_occ)
        if n_occ + n_extra > n_states:
            if n_occ + n_extra > grids.n_b:
                raise NonConvergenceError(
                    f"basis too small: need {n_occ + n_extra} states, have {grids.n_b}"
                )
            n_states = min(grids.n_b, n_occ + n_extra + 4)
            continue

        rho_new = compute_density(grids, phi, occ)
        residual = rho_new - rho
        res_norm = np.linalg.norm(residual) * weight
        if verbose:
            print(f"scf iter {it:3d}  residual {res_norm:.3e}  fermi {fermi:+.6f}")
        if res_norm <= tol:
            n_kept = n_occ + n_extra
            return GroundState(
                model=model, grids=grids,
                phi=np.ascontiguousarray(phi[:, :n_kept]),
                eps=eps[:n_kept].copy(), occ=occ[:n_kept].copy(),
                fermi_level=fermi, rho=rho_new, n_occ=n_occ,
                v_local=v_loc, scf_residual=res_norm,
            )
        step = apply_kerker(kerker, grids, residual) if kerker else residual
        rho = rho + damping * step

    raise NonConvergenceError(
        f"SCF did not reach {tol:.1e} in {max_iter} iterations", residual=res_norm
    )
