"""Per-band Sternheimer tolerance selection.

Implements the three adaptive prefactors (guaranteed / balanced /
aggressive) and the static baselines.  Every strategy multiplies a common
factor shared with the outer solver's budget formula,
(s / 3m) tau / ||r~_{i-1}||, so honoured tolerances translate directly
into an honoured operator budget.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

ADAPTIVE_KINDS = ("grt", "bal", "agr")
BASELINE_KINDS = ("d10", "d100", "d10n")
TOLERANCE_FLOOR = 1e-16


@dataclass(frozen=True)
class StrategySpec:
    """A named tolerance rule plus the outer-solver parameters it needs."""

    kind: str
    preconditioned: bool
    tau: float
    m: int
    use_gap: bool = False     # keep the eigenvalue-gap factor in the prefactor

    def __post_init__(self):
        if self.kind not in ADAPTIVE_KINDS + BASELINE_KINDS:
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.m < 1:
            raise ConfigurationError("restart size m must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.kind in ADAPTIVE_KINDS

    @property
    def name(self) -> str:
        return ("p" if self.preconditioned else "") + self.kind


def parse_strategy(name: str, tau: float, m: int, use_gap: bool = False) -> StrategySpec:
    """Parse a CLI strategy name; a leading 'p' selects Kerker preconditioning."""
    key = name.strip().lower()
    preconditioned = key.startswith("p")
    if preconditioned:
        key = key[1:]
    return StrategySpec(kind=key, preconditioned=preconditioned, tau=tau, m=m,
                        use_gap=use_gap)


@dataclass
class ToleranceContext:
    """Everything the prefactors may consume, for one operator application.

    `common_factor`, when set, overrides the recomputation of
    (s / 3m) tau / ||r~_{i-1}|| so the harness can hand through the exact
    budget granted by the outer solver.  Iteration 0 denotes the
    right-hand-side build, whose share of the error budget is tau/3.
    """

    iteration: int
    n_occ: int
    occ: np.ndarray
    volume: float
    n_g: int
    est_res_prev: float = np.nan
    s: float = np.nan
    kv_norm: float = np.nan
    row_norm: float = np.nan
    rhs_norm: float = np.nan
    eps_gap: np.ndarray = None
    common_factor: float = None


def _require(value, name, strategy):
    if value is None or not np.all(np.isfinite(value)) or not np.all(np.asarray(value) > 0):
        raise ConfigurationError(f"strategy {strategy!r} needs positive finite {name}, got {value}")
    return value


def common_factor(spec: StrategySpec, ctx: ToleranceContext) -> float:
    if ctx.common_factor is not None:
        return float(_require(ctx.common_factor, "common_factor", spec.kind))
    if ctx.iteration == 0:
        return spec.tau / 3.0
    _require(ctx.s, "s", spec.kind)
    _require(ctx.est_res_prev, "est_res_prev", spec.kind)
    return (ctx.s / (3.0 * spec.m)) * spec.tau / ctx.est_res_prev


def select_tolerances(spec: StrategySpec, ctx: ToleranceContext) -> np.ndarray:
    """Per-band CG tolerances tau_{i,n}, clamped below at 1e-16."""
    occ = np.asarray(_require(ctx.occ, "occupations", spec.kind), dtype=float)
    if len(occ) != ctx.n_occ:
        raise ConfigurationError("occupation vector length disagrees with n_occ")

    if spec.adaptive:
        shared = common_factor(spec, ctx)
        if spec.kind == "agr":
            prefactor = np.ones(ctx.n_occ)
        else:
            _require(ctx.volume, "volume", spec.kind)
            _require(ctx.n_g, "n_g", spec.kind)
            band = np.sqrt(ctx.volume) / (2.0 * occ * np.sqrt(ctx.n_g * ctx.n_occ))
            if spec.kind == "grt":
                _require(ctx.kv_norm, "kv_norm", spec.kind)
                _require(ctx.row_norm, "row_norm", spec.kind)
                prefactor = band / (ctx.kv_norm * ctx.row_norm)
            else:  # bal
                prefactor = band * np.sqrt(ctx.volume) / np.sqrt(ctx.n_occ)
            if spec.use_gap:
                gaps = _require(ctx.eps_gap, "eps_gap", spec.kind)
                prefactor = prefactor * np.asarray(gaps, dtype=float)
        tol = prefactor * shared
    elif spec.kind == "d10":
        tol = np.full(ctx.n_occ, spec.tau / 10.0)
    elif spec.kind == "d100":
        tol = np.full(ctx.n_occ, spec.tau / 100.0)
    else:  # d10n
        _require(ctx.rhs_norm, "rhs_norm", spec.kind)
        tol = np.full(ctx.n_occ, spec.tau / (10.0 * ctx.rhs_norm))
    return np.maximum(tol, TOLERANCE_FLOOR)
