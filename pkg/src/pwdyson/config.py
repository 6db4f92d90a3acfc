"""Experiment configuration: JSON schema and the shipped reference models."""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigurationError
from .groundstate import GaussianWell, ModelSpec
from .pwbasis import Lattice


@dataclass(frozen=True)
class ScfParams:
    tol: float = 1e-10
    max_iter: int = 200
    mixing: str = "kerker"
    kerker_alpha: float = 0.8
    damping: float = 0.8


@dataclass(frozen=True)
class Perturbation:
    gaussian: int = 0
    direction: tuple = (1.0, 0.0, 0.0)
    analytic: bool = True


@dataclass(frozen=True)
class ResponseParams:
    strategy: str = "pbal"
    tau: float = 1e-9
    m: int = 10
    kerker_alpha: float = 0.8
    use_gap: bool = False
    perturbation: Perturbation = field(default_factory=Perturbation)
    true_residual_every: int = 0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    scf: ScfParams = field(default_factory=ScfParams)
    response: ResponseParams = field(default_factory=ResponseParams)
    output_dir: str = None
    archive: str = None


def model_from_dict(d: dict) -> ModelSpec:
    try:
        lattice = Lattice.from_vectors(*d["lattice"])
        gaussians = tuple(
            GaussianWell(center=tuple(g["center"]), amplitude=float(g["amplitude"]),
                         width=float(g["width"]))
            for g in d.get("gaussians", [])
        )
        return ModelSpec(
            lattice=lattice,
            e_cut=float(d["e_cut"]),
            n_electrons=int(d["n_electrons"]),
            temperature=float(d["temperature"]),
            smearing=d.get("smearing", "fermi_dirac"),
            occupation_threshold=float(d.get("occupation_threshold", 1e-8)),
            xc=d.get("xc", "none"),
            gaussians=gaussians,
        )
    except KeyError as missing:
        raise ConfigurationError(f"model config misses required key {missing}") from None


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "lattice": model.lattice.a.tolist(),
        "e_cut": model.e_cut,
        "n_electrons": model.n_electrons,
        "temperature": model.temperature,
        "smearing": model.smearing,
        "occupation_threshold": model.occupation_threshold,
        "xc": model.xc,
        "gaussians": [
            {"center": list(g.center), "amplitude": g.amplitude, "width": g.width}
            for g in model.gaussians
        ],
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    scf = ScfParams(**d.get("scf", {}))
    resp = dict(d.get("response", {}))
    pert = Perturbation(**{**resp.pop("perturbation", {})})
    direction = np.asarray(pert.direction, dtype=float)
    if direction.shape != (3,) or not np.linalg.norm(direction) > 0:
        raise ConfigurationError("perturbation direction must be a nonzero 3-vector")
    response = ResponseParams(perturbation=Perturbation(
        gaussian=pert.gaussian, direction=tuple(direction), analytic=pert.analytic,
    ), **resp)
    return ExperimentConfig(
        model=model_from_dict(d["model"]),
        scf=scf,
        response=response,
        output_dir=d.get("output_dir"),
        archive=d.get("archive"),
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"{path}: not valid JSON ({err})") from None
    return config_from_dict(raw)


def reference_config(name: str) -> ExperimentConfig:
    """One of the shipped toy configs: 'toy_metal' or 'toy_insulator'."""
    ref = resources.files("pwdyson") / "configs" / f"{name}.json"
    if not ref.is_file():
        raise ConfigurationError(f"no shipped config named {name!r}")
    return config_from_dict(json.loads(ref.read_text()))
