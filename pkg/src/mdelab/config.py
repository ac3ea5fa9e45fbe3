"""Experiment configuration: schema, validation and construction of model objects."""
from __future__ import annotations

import hashlib
import json
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, field_validator, model_validator

from .rmt import DEFAULT_FILTER, EnsembleSpec, bare_matrix, default_metric
from .self_energy import CovarianceKernel
from .solver import DataPair, SolverConfig

MAX_N = 8192
MAX_TRIALS = 100_000

COMMANDS = ("solve", "dos", "stability", "locallaw", "rigidity", "gaps", "verify")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelConfig(_Model):
    """Second-moment structure of the fluctuation.

    ``mean_field`` and ``white`` are independent entries (the former always
    complex Hermitian); ``filter`` is a moving-average field with filter
    ``phi``; ``variance_profile`` has independent entries with variances
    ``profile`` (or a random symmetric profile in ``profile_range``).
    """

    kind: Literal["mean_field", "white", "filter", "variance_profile", "zero"] = "mean_field"
    beta: Literal[1, 2] = 2
    scale: PositiveFloat = 1.0
    phi: list[list[float]] | None = None
    envelope: Literal["none", "random"] = "none"
    envelope_range: tuple[float, float] = (0.8, 1.2)
    profile: list[list[float]] | None = None
    profile_range: tuple[float, float] = (0.5, 1.5)
    kernel_seed: int = Field(0, ge=0)

    @field_validator("phi")
    @classmethod
    def _odd_square(cls, v):
        if v is None:
            return v
        n = len(v)
        if n % 2 == 0 or any(len(row) != n for row in v):
            raise ValueError("phi must be an odd-sized square array")
        if not np.any(np.asarray(v, dtype=float)):
            raise ValueError("phi must not vanish")
        return v

    @field_validator("envelope_range", "profile_range")
    @classmethod
    def _range(cls, v):
        if not 0 <= v[0] <= v[1]:
            raise ValueError("range must satisfy 0 <= lo <= hi")
        return v


class BareConfig(_Model):
    kind: Literal["zero", "diagonal", "banded"] = "zero"
    values: list[float] | None = None
    amplitude: float = 1.0
    length: PositiveFloat = 1.0
    band: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _values_for_diagonal(self):
        if self.kind == "diagonal" and not self.values:
            raise ValueError("diagonal A requires 'values'")
        return self


class DataConfig(_Model):
    N: int = Field(50, ge=1, le=MAX_N)
    kernel: KernelConfig = KernelConfig()
    A: BareConfig = BareConfig()
    metric: Literal["circle", "line", "discrete"] = "circle"


class SolverSettings(_Model):
    tol: float = Field(1e-11, gt=0, le=1e-3)
    max_iter: int = Field(10_000, ge=1, le=1_000_000)
    method: Literal["auto", "dense", "diagonal", "circulant"] = "auto"

    def build(self) -> SolverConfig:
        return SolverConfig(tol=self.tol, max_iter=self.max_iter, method=self.method)


class Zeta(_Model):
    re: float = 0.0
    im: PositiveFloat = 1.0

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)


class TauGrid(_Model):
    start: float = -2.5
    stop: float = 2.5
    num: int = Field(101, ge=2, le=100_001)

    @model_validator(mode="after")
    def _order(self):
        if not self.start < self.stop:
            raise ValueError("tau grid needs start < stop")
        return self

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.num)


class VerifySettings(_Model):
    scale: Literal["desk", "quick"] = "desk"
    only: list[str] | None = None


class ExperimentConfig(_Model):
    command: Literal[COMMANDS] = "solve"  # type: ignore[valid-type]
    data: DataConfig = DataConfig()
    zetas: list[Zeta] = [Zeta()]
    tau: TauGrid = TauGrid()
    eta: PositiveFloat = 1e-3
    dos_mode: Literal["sweep", "march"] = "sweep"
    delta: PositiveFloat = 0.01
    solver: SolverSettings = SolverSettings()
    trials: int = Field(10, ge=1, le=MAX_TRIALS)
    reference_trials: int | None = Field(None, ge=1, le=MAX_TRIALS)
    seed: int = Field(0, ge=0)
    out: str = "mdelab-out"
    Ns: list[int] | None = None
    eta_exponent: float | None = Field(0.6, gt=0, lt=1)
    eta_fixed: PositiveFloat | None = None
    tau0: float = 0.0
    window: tuple[float, float] = (-0.5, 0.5)
    dump_eigenvalues: bool = False
    verify: VerifySettings = VerifySettings()

    @field_validator("Ns")
    @classmethod
    def _sizes(cls, v):
        if v is not None and (not v or any(n < 2 or n > MAX_N for n in v)):
            raise ValueError(f"Ns entries must lie in [2, {MAX_N}]")
        return v

    @field_validator("window")
    @classmethod
    def _window(cls, v):
        if not v[0] < v[1]:
            raise ValueError("window must be increasing")
        return v

    def sizes(self) -> list[int]:
        return self.Ns or [self.data.N]

    def eta_for(self, N: int) -> float:
        if self.eta_fixed is not None:
            return float(self.eta_fixed)
        return float(N ** -self.eta_exponent)

    def canonical_json(self) -> str:
        """Sorted compact JSON of every field that affects results (``out`` excluded)."""
        return json.dumps(self.model_dump(mode="json", exclude={"out"}), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config (raises ``pydantic.ValidationError`` or ``ValueError``)."""
    return ExperimentConfig.model_validate_json(text)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def _sym_random(N: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    e = rng.uniform(lo, hi, size=(N, N))
    return (e + e.T) / 2


def build_kernel(cfg: KernelConfig, N: int) -> CovarianceKernel:
    rng = np.random.default_rng(cfg.kernel_seed)
    env = None
    if cfg.envelope == "random":
        env = _sym_random(N, *cfg.envelope_range, rng)
    if cfg.kind == "zero":
        return CovarianceKernel.zero(N, cfg.beta)
    if cfg.kind == "mean_field":
        return CovarianceKernel.white(N, 2, cfg.scale, envelope=env)
    if cfg.kind == "white":
        return CovarianceKernel.white(N, cfg.beta, cfg.scale, envelope=env)
    if cfg.kind == "variance_profile":
        if cfg.profile is not None:
            s = np.asarray(cfg.profile, dtype=float)
            if s.shape != (N, N) or not np.allclose(s, s.T) or np.any(s < 0):
                raise ValueError("profile must be a symmetric nonnegative N x N array")
        else:
            s = _sym_random(N, *cfg.profile_range, rng)
        envelope = np.sqrt(s) if env is None else np.sqrt(s) * env
        return CovarianceKernel.white(N, cfg.beta, cfg.scale, envelope=envelope)
    phi = np.asarray(cfg.phi, dtype=float) if cfg.phi is not None else None
    if phi is None:
        phi = DEFAULT_FILTER
    phi = np.sqrt(cfg.scale) * phi / np.linalg.norm(phi)
    return CovarianceKernel.from_filter(N, phi, beta=cfg.beta, envelope=env, name="filter")


def build_bare(cfg: BareConfig, N: int) -> np.ndarray:
    return bare_matrix(cfg.kind, N, values=cfg.values, amplitude=cfg.amplitude, length=cfg.length,
                       band=cfg.band)


def build_spec(cfg: DataConfig, N: int | None = None, seed: int = 0) -> EnsembleSpec:
    N = cfg.N if N is None else N
    kernel = build_kernel(cfg.kernel, N)
    return EnsembleSpec(N, kernel, build_bare(cfg.A, N), default_metric(N, cfg.metric), seed,
                        cfg.kernel.kind)


def build_data_pair(cfg: DataConfig, N: int | None = None) -> DataPair:
    return build_spec(cfg, N).data_pair()
