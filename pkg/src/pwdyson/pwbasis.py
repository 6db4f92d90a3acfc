"""Periodic lattice, spherical/cubic Fourier grids and normalised FFTs.

Plane waves are normalised as e_G(r) = exp(i G.r) / sqrt(|Omega|).
Orbitals live on a sphere of reciprocal vectors |G| <= sqrt(2 E_cut)
(`n_b` coefficients), densities and potentials on a cubic FFT grid large
enough to hold every difference of two sphere vectors (`n_g` points).

The forward/inverse transforms between sphere coefficients and real-space
grid values are

    to_fourier = w Z^T W,      to_real = w^-1 W^-1 Z,

with W the unitary DFT, Z the sphere-into-cube zero-padding isometry and
w = sqrt(|Omega|) / sqrt(n_g).  With this convention `to_real` returns
unscaled function values on the grid and `to_fourier . to_real` is the
identity on sphere coefficients.

Real-space vectors are stored flat with x fastest:
index = ix + Nx * (iy + Ny * iz).
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ConfigurationError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Lattice:
    """Simulation cell with lattice vectors as rows of `a`.

    Reciprocal vectors (rows of `b`) satisfy b_i . a_j = 2 pi delta_ij.
    """

    a: np.ndarray        # (3, 3) Bohr, rows a1, a2, a3
    b: np.ndarray        # (3, 3) 1/Bohr, rows b1, b2, b3
    volume: float        # Bohr^3

    @classmethod
    def from_vectors(cls, a1, a2, a3) -> "Lattice":
        a = np.array([a1, a2, a3], dtype=float)
        if not np.all(np.isfinite(a)):
            raise ConfigurationError("lattice vectors must be finite")
        det = np.linalg.det(a)
        if abs(det) < 1e-14:
            raise ConfigurationError("lattice vectors are linearly dependent")
        b = TWO_PI * np.linalg.inv(a).T
        return cls(a=a, b=b, volume=abs(det))

    @classmethod
    def cubic(cls, alat: float) -> "Lattice":
        return cls.from_vectors([alat, 0, 0], [0, alat, 0], [0, 0, alat])

    @classmethod
    def orthorhombic(cls, ax: float, ay: float, az: float) -> "Lattice":
        return cls.from_vectors([ax, 0, 0], [0, ay, 0], [0, 0, az])

    def duality_defect(self) -> float:
        """Max relative deviation of b_i . a_j from 2 pi delta_ij."""
        return float(np.max(np.abs(self.b @ self.a.T / TWO_PI - np.eye(3))))


def _is_5smooth_even(n: int) -> bool:
    if n % 2 != 0:
        return False
    for p in (2, 3, 5):
        while n % p == 0:
            n //= p
    return n == 1


def _next_5smooth_even(n: int) -> int:
    n = max(2, n)
    while not _is_5smooth_even(n):
        n += 1
    return n


def _integer_box(b: np.ndarray, a: np.ndarray, radius: float) -> np.ndarray:
    """All integer triples whose lattice vector could lie within `radius`.

    Uses |i_d| = |G . a_d| / 2pi <= |G| |a_d| / 2pi as the per-dimension
    bound, so the box is guaranteed to contain the 2-norm ball.
    """
    nmax = np.floor(radius * np.linalg.norm(a, axis=1) / TWO_PI).astype(int)
    ranges = [np.arange(-m, m + 1) for m in nmax]
    i1, i2, i3 = np.meshgrid(*ranges, indexing="ij")
    return np.stack([i1.ravel(), i2.ravel(), i3.ravel()], axis=1)


class FourierGrids:
    """Spherical orbital grid and cubic density grid for one cutoff.

    Immutable after construction; transforms are pure functions of the
    stored index tables and may be called concurrently.

    Attributes:
        lattice: the unit cell.
        e_cut: kinetic cutoff (Hartree); sphere radius is sqrt(2 e_cut).
        g_int: (n_b, 3) integer coordinates of sphere vectors, sorted
            lexicographically.
        g_cart: (n_b, 3) Cartesian sphere vectors.
        g2_sphere: (n_b,) squared norms |G|^2 (twice the kinetic energy).
        cube_dims: (Nx, Ny, Nz) even 5-smooth FFT dimensions.
        n_b, n_g: sphere / cube sizes.
        w: FFT normalisation sqrt(|Omega|)/sqrt(n_g).
        g2_cube: (n_g,) squared norms on the cube, flat x-fastest.
    """

    def __init__(self, lattice: Lattice, e_cut: float):
        if not np.isfinite(e_cut) or e_cut <= 0:
            raise ConfigurationError(f"e_cut must be positive, got {e_cut}")
        self.lattice = lattice
        self.e_cut = float(e_cut)

        r_sphere = np.sqrt(2.0 * e_cut)
        r_cube = 2.0 * r_sphere

        # Sphere: |G|_2 <= sqrt(2 E_cut), lexicographic order on (i1,i2,i3).
        box = _integer_box(lattice.b, lattice.a, r_sphere)
        cart = box @ lattice.b
        inside = np.einsum("ij,ij->i", cart, cart) <= r_sphere**2 * (1 + 1e-14)
        g_int = box[inside]
        order = np.lexsort((g_int[:, 2], g_int[:, 1], g_int[:, 0]))
        self.g_int = np.ascontiguousarray(g_int[order])
        self.g_cart = self.g_int @ lattice.b
        self.g2_sphere = np.einsum("ij,ij->i", self.g_cart, self.g_cart)
        self.n_b = len(self.g_int)

        # Cube: smallest even dims holding every |G|_inf <= 2 sqrt(2 E_cut),
        # rounded up to 5-smooth even integers for FFT efficiency.
        box = _integer_box(lattice.b, lattice.a, np.sqrt(3.0) * r_cube)
        cart = box @ lattice.b
        keep = np.max(np.abs(cart), axis=1) <= r_cube * (1 + 1e-14)
        max_idx = np.max(np.abs(box[keep]), axis=0)
        self.cube_dims = tuple(_next_5smooth_even(2 * int(m) + 2) for m in max_idx)
        self.n_g = int(np.prod(self.cube_dims))
        self.w = np.sqrt(lattice.volume) / np.sqrt(self.n_g)

        nx, ny, nz = self.cube_dims
        wrapped = self.g_int % np.array(self.cube_dims)
        self.sphere_flat = np.ascontiguousarray(
            wrapped[:, 0] + nx * (wrapped[:, 1] + ny * wrapped[:, 2])
        )
        if len(np.unique(self.sphere_flat)) != self.n_b:
            raise ConfigurationError("cube grid cannot hold the sphere without aliasing")

        # Signed integer coordinates of every cube point, x fastest.
        freqs = [np.fft.fftfreq(n, 1.0 / n).astype(int) for n in self.cube_dims]
        ix, iy, iz = np.meshgrid(*freqs, indexing="ij")
        cube_int = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        )
        cube_cart = cube_int @ lattice.b
        self.g2_cube = np.einsum("ij,ij->i", cube_cart, cube_cart)

        self._to_real_scale = self.n_g / np.sqrt(lattice.volume)
        self._to_fourier_scale = np.sqrt(lattice.volume) / self.n_g

    # -- layout helpers ---------------------------------------------------

    def cube_view(self, flat: np.ndarray) -> np.ndarray:
        """Reshape a flat x-fastest vector to (Nx, Ny, Nz)."""
        return flat.reshape(self.cube_dims, order="F")

    def flat_view(self, cube: np.ndarray) -> np.ndarray:
        return cube.ravel(order="F")

    def real_space_points(self) -> np.ndarray:
        """(n_g, 3) Cartesian grid points, flat x-fastest order."""
        fracs = [np.arange(n) / n for n in self.cube_dims]
        fx, fy, fz = np.meshgrid(*fracs, indexing="ij")
        frac = np.stack(
            [fx.ravel(order="F"), fy.ravel(order="F"), fz.ravel(order="F")], axis=1
        )
        return frac @ self.lattice.a

    # -- sphere <-> real space --------------------------------------------

    def to_real(self, coeffs: np.ndarray) -> np.ndarray:
        """Inverse transform w^-1 W^-1 Z: sphere coefficients -> grid values."""
        if coeffs.shape != (self.n_b,):
            raise ValueError(f"expected sphere vector of length {self.n_b}, got {coeffs.shape}")
        full = np.zeros(self.n_g, dtype=np.complex128)
        full[self.sphere_flat] = coeffs
        vals = scipy.fft.ifftn(self.cube_view(full))
        return self.flat_view(vals) * self._to_real_scale

    def to_fourier(self, values: np.ndarray) -> np.ndarray:
        """Forward transform w Z^T W: grid values -> sphere coefficients."""
        if values.shape != (self.n_g,):
            raise ValueError(f"expected grid vector of length {self.n_g}, got {values.shape}")
        coeffs = scipy.fft.fftn(self.cube_view(values.astype(np.complex128)))
        return self.flat_view(coeffs)[self.sphere_flat] * self._to_fourier_scale

    def to_real_many(self, coeffs: np.ndarray) -> np.ndarray:
        """Batched `to_real` over rows of a (k, n_b) array -> (k, n_g)."""
        k = coeffs.shape[0]
        full = np.zeros((k, self.n_g), dtype=np.complex128)
        full[:, self.sphere_flat] = coeffs
        cube = full.reshape((k, *self.cube_dims), order="F")
        vals = scipy.fft.ifftn(cube, axes=(1, 2, 3))
        return vals.reshape(k, self.n_g, order="F") * self._to_real_scale

    def to_fourier_many(self, values: np.ndarray) -> np.ndarray:
        """Batched `to_fourier` over rows of a (k, n_g) array -> (k, n_b)."""
        k = values.shape[0]
        cube = values.astype(np.complex128).reshape((k, *self.cube_dims), order="F")
        coeffs = scipy.fft.fftn(cube, axes=(1, 2, 3))
        return coeffs.reshape(k, self.n_g, order="F")[:, self.sphere_flat] * self._to_fourier_scale

    # -- full-cube FFTs (for Fourier-diagonal operators) --------------------

    def cube_fft(self, values: np.ndarray) -> np.ndarray:
        """Plain forward DFT of a flat grid vector (no normalisation)."""
        return self.flat_view(scipy.fft.fftn(self.cube_view(values.astype(np.complex128))))

    def cube_ifft(self, coeffs: np.ndarray) -> np.ndarray:
        """Plain inverse DFT of a flat coefficient vector (1/N normalised)."""
        return self.flat_view(scipy.fft.ifftn(self.cube_view(coeffs)))


def build_grids(lattice: Lattice, e_cut: float) -> FourierGrids:
    """Build the sphere/cube Fourier grids for the given cutoff.

    The sphere enumerates exactly {G : |G|_2 <= sqrt(2 e_cut)} in
    lexicographic integer order; the cube is the smallest even 5-smooth
    FFT box holding |G|_inf <= 2 sqrt(2 e_cut).
    """
    if lattice.duality_defect() > 1e-12:
        raise ConfigurationError("lattice reciprocal vectors violate b_i . a_j = 2 pi delta_ij")
    return FourierGrids(lattice, e_cut)
