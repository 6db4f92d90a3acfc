"""Ground-state archive: meta.json plus raw little-endian float64 blobs.

Layout of an archive directory:

    meta.json     lattice, cutoff, grid dims, spectrum, occupations,
                  model parameters, format version, endianness tag
    phi_re.bin    Re of the orbital matrix, column-major n_b x n_kept
    phi_im.bin    Im of the orbital matrix, same layout
    rho.bin       density on the cube grid, x fastest
    v_local.bin   total local potential, same layout (so the Hamiltonian
                  that phi/eps diagonalise is reconstructed bit-exactly)

Write-read round trips are bit-exact.  All writes go through a temp file
plus atomic rename.
"""

import json
import os
import tempfile

import numpy as np

from .config import model_from_dict, model_to_dict
from .errors import ArchiveError
from .groundstate import GroundState
from .pwbasis import build_grids

FORMAT_VERSION = 1


def _atomic_write(path: str, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_blob(path: str, expected_count: int) -> np.ndarray:
    if not os.path.exists(path):
        raise ArchiveError(f"missing blob {os.path.basename(path)}")
    data = np.fromfile(path, dtype="<f8")
    if len(data) != expected_count:
        raise ArchiveError(
            f"{os.path.basename(path)}: expected {expected_count} float64 values, "
            f"found {len(data)}"
        )
    return data


def save_ground_state(path: str, gs: GroundState):
    os.makedirs(path, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "model": model_to_dict(gs.model),
        "cube_dims": list(gs.grids.cube_dims),
        "n_b": gs.grids.n_b,
        "n_g": gs.grids.n_g,
        "n_occ": gs.n_occ,
        "n_kept": gs.n_kept,
        "eps": gs.eps.tolist(),
        "occ": gs.occ.tolist(),
        "fermi_level": gs.fermi_level,
        "scf_residual": gs.scf_residual,
    }
    _atomic_write(os.path.join(path, "meta.json"),
                  json.dumps(meta, indent=1).encode())
    _atomic_write(os.path.join(path, "phi_re.bin"),
                  np.ascontiguousarray(gs.phi.real, dtype="<f8").tobytes(order="F"))
    _atomic_write(os.path.join(path, "phi_im.bin"),
                  np.ascontiguousarray(gs.phi.imag, dtype="<f8").tobytes(order="F"))
    _atomic_write(os.path.join(path, "rho.bin"),
                  np.asarray(gs.rho, dtype="<f8").tobytes())
    _atomic_write(os.path.join(path, "v_local.bin"),
                  np.asarray(gs.v_local, dtype="<f8").tobytes())


def load_ground_state(path: str) -> GroundState:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise ArchiveError(f"no meta.json under {path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"archive format version {version}, expected {FORMAT_VERSION}")
    if meta.get("endianness") != "little":
        raise ArchiveError(f"unsupported endianness tag {meta.get('endianness')!r}")

    model = model_from_dict(meta["model"])
    grids = build_grids(model.lattice, model.e_cut)
    if grids.n_b != meta["n_b"] or list(grids.cube_dims) != list(meta["cube_dims"]):
        raise ArchiveError(
            f"grid rebuild disagrees with archive: n_b {grids.n_b} vs {meta['n_b']}, "
            f"dims {grids.cube_dims} vs {tuple(meta['cube_dims'])}"
        )

    n_kept = int(meta["n_kept"])
    phi_re = _read_blob(os.path.join(path, "phi_re.bin"), grids.n_b * n_kept)
    phi_im = _read_blob(os.path.join(path, "phi_im.bin"), grids.n_b * n_kept)
    phi = (phi_re + 1j * phi_im).reshape((grids.n_b, n_kept), order="F")
    rho = _read_blob(os.path.join(path, "rho.bin"), grids.n_g)
    v_local = _read_blob(os.path.join(path, "v_local.bin"), grids.n_g)

    eps = np.asarray(meta["eps"], dtype=float)
    occ = np.asarray(meta["occ"], dtype=float)
    if len(eps) != n_kept or len(occ) != n_kept:
        raise ArchiveError("eps/occ length disagrees with n_kept")

    return GroundState(
        model=model, grids=grids, phi=phi, eps=eps, occ=occ,
        fermi_level=float(meta["fermi_level"]), rho=rho,
        n_occ=int(meta["n_occ"]), v_local=v_local,
        scf_residual=float(meta.get("scf_residual", 0.0)),
    )
