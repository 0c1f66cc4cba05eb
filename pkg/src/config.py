import logging
import math
from pathlib import Path
from typing import Literal, Union

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from calculus import Exponent, Weight
from diffusion import JumpMeasure
from lattice import BravaisBasis, BravaisTorus, build_torus
from pam import Nonlinearity
from spectral import SmearProfile
from stochastic import Cutoff, NoiseSpec, RegularityParams
from utils import ConfigurationError, config_hash


logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "fourier-selftest",
    "besov-report",
    "heat-smoothing",
    "renorm-scaling",
    "noise-enhancement",
    "pam-macro",
    "pam-universality",
)

DEFAULT_PROFILE_RADIUS = 3 / 8
DEFAULT_SMEAR_RADIUS = 0.75
DEFAULT_CHI_INNER = 1 / 8
DEFAULT_CHI_OUTER = 1 / 4
DEFAULT_P_XI = 40.0
DEFAULT_SIGMA = 0.5
DEFAULT_KAPPA = 0.06
DEFAULT_ALPHA = 0.7

ExponentValue = Union[float, Literal["inf"]]


def as_exponent(p: ExponentValue):
    if p == "inf" or math.isinf(float(p)):
        return Exponent.INF
    return float(p)


class Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LatticeBlock(Block):
    basis: Union[Literal["square", "hexagonal"], list[list[float]]] = "square"
    dimension: int = 2
    scales: list[int] = Field(default_factory=lambda: [2, 3, 4])
    M: int = 64

    @field_validator("scales")
    @classmethod
    def _scales(cls, v):
        if not v:
            raise ValueError("at least one scale exponent is needed")
        return v


class AtomBlock(Block):
    g: list[int]
    kappa: float


class MeasureBlock(Block):
    kind: Literal["simple", "atoms"] = "simple"
    atoms: list[AtomBlock] = Field(default_factory=list)


class NoiseBlock(Block):
    distribution: Literal["gaussian", "rademacher", "uniform"] = "gaussian"
    p_xi: float = DEFAULT_P_XI


class NonlinearityBlock(Block):
    kind: Literal["linear", "logistic", "polynomial"] = "logistic"
    c: float = 1.0
    C: float = 1.0
    coeffs: list[float] = Field(default_factory=list)


class PartitionBlock(Block):
    radius: float = DEFAULT_PROFILE_RADIUS
    smear_radius: float = DEFAULT_SMEAR_RADIUS


class RegularityBlock(Block):
    p_xi: float = DEFAULT_P_XI
    sigma: float = DEFAULT_SIGMA
    kappa: float = DEFAULT_KAPPA
    alpha: float = DEFAULT_ALPHA
    chi_inner: float = DEFAULT_CHI_INNER
    chi_outer: float = DEFAULT_CHI_OUTER


class TimeBlock(Block):
    T: float = 0.25
    dt: float = 1 / 1024
    snapshot_every: int = 32


class SelftestBlock(Block):
    dimensions: list[int] = Field(default_factory=lambda: [1, 2])
    sides: list[int] = Field(default_factory=lambda: [8, 64, 256])
    scales: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])


class ReportBlock(Block):
    alphas: list[float] = Field(default_factory=lambda: [-1.5, -1.0, -0.5])
    p: list[ExponentValue] = Field(default_factory=lambda: ["inf", 2.0])
    q: list[ExponentValue] = Field(default_factory=lambda: ["inf"])
    weight_kappa: float = 0.0
    pairs: int = 10


class SmoothingBlock(Block):
    betas: list[float] = Field(default_factory=lambda: [0.5, 1.0])
    times: list[float] = Field(default_factory=lambda: [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1, 2e-1, 5e-1, 1.0])
    p: ExponentValue = "inf"


class MonteCarloBlock(Block):
    samples: int = 2000
    realizations: int = 100

    @field_validator("samples", "realizations")
    @classmethod
    def _positive(cls, v):
        if v < 2:
            raise ValueError("need at least two samples")
        return v


class ExperimentConfig(Block):
    kind: Literal[EXPERIMENT_KINDS]
    seeds: list[int] = Field(default_factory=lambda: [0])
    output: str | None = None
    lattice: LatticeBlock = Field(default_factory=LatticeBlock)
    measure: MeasureBlock = Field(default_factory=MeasureBlock)
    noise: NoiseBlock = Field(default_factory=NoiseBlock)
    nonlinearity: NonlinearityBlock = Field(default_factory=NonlinearityBlock)
    partition: PartitionBlock = Field(default_factory=PartitionBlock)
    regularity: RegularityBlock = Field(default_factory=RegularityBlock)
    time: TimeBlock = Field(default_factory=TimeBlock)
    selftest: SelftestBlock = Field(default_factory=SelftestBlock)
    report: ReportBlock = Field(default_factory=ReportBlock)
    smoothing: SmoothingBlock = Field(default_factory=SmoothingBlock)
    monte_carlo: MonteCarloBlock = Field(default_factory=MonteCarloBlock)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or any(not 0 <= s < 2**64 for s in v):
            raise ValueError("seeds must be a non-empty list of 64-bit unsigned integers")
        return v

    def basis(self) -> BravaisBasis:
        b = self.lattice.basis
        if b == "square":
            return BravaisBasis.square(self.lattice.dimension)
        if b == "hexagonal":
            return BravaisBasis.hexagonal()
        return BravaisBasis.from_vectors(b)

    def torus(self, N: int, M: int | None = None) -> BravaisTorus:
        return build_torus(self.basis(), N, M or self.lattice.M)

    def tori(self) -> list[BravaisTorus]:
        return [self.torus(N) for N in self.lattice.scales]

    def jump_measure(self) -> JumpMeasure:
        if self.measure.kind == "simple":
            return JumpMeasure.simple_random_walk(self.basis().dimension)
        return JumpMeasure.from_pairs((a.g, a.kappa) for a in self.measure.atoms)

    def nonlinearity_model(self) -> Nonlinearity:
        block = self.nonlinearity
        if block.kind == "linear":
            return Nonlinearity.linear(block.c)
        if block.kind == "logistic":
            return Nonlinearity.logistic(block.C)
        return Nonlinearity.polynomial(block.coeffs)

    def noise_spec(self, seed: int) -> NoiseSpec:
        return NoiseSpec(self.noise.distribution, "macro", seed, self.noise.p_xi)

    def regularity_params(self) -> RegularityParams:
        r = self.regularity
        return RegularityParams(r.p_xi, r.sigma, r.kappa, r.alpha)

    def cutoff(self) -> Cutoff:
        return Cutoff(self.regularity.chi_inner, self.regularity.chi_outer)

    def smear(self) -> SmearProfile:
        return SmearProfile(self.partition.smear_radius)

    def weight(self) -> Weight:
        return Weight.polynomial(self.report.weight_kappa)

    @property
    def digest(self) -> str:
        return config_hash(self.model_dump(mode="json", exclude={"output"}))

    def check(self) -> None:
        """Build every domain object once so that invalid blocks fail before any numerics."""
        measure = self.jump_measure()
        for torus in self.tori():
            if measure.dimension != torus.d:
                raise ConfigurationError(
                    f"measure of dimension {measure.dimension} on a {torus.d}d lattice", path="measure.atoms"
                )
        self.nonlinearity_model()
        self.regularity_params()
        self.cutoff()
        self.smear().validate()
        if not 0 < self.partition.radius:
            raise ConfigurationError(f"radius must be > 0, got {self.partition.radius!r}", path="partition.radius")
        if self.kind in ("pam-macro", "pam-universality") and self.basis().dimension != 2:
            raise ConfigurationError("the PAM experiments run in d=2", path="lattice.dimension")


def _error_path(err: ValidationError) -> str:
    first = err.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def parse_config(data: dict, seeds: list[int] | None = None) -> ExperimentConfig:
    if seeds is not None:
        data = {**data, "seeds": seeds}
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(err.errors()[0]["msg"], path=_error_path(err)) from None
    cfg.check()
    return cfg


def load_config(path, seeds: list[int] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = toml.load(path)
    except (OSError, toml.TomlDecodeError) as err:
        raise ConfigurationError(f"cannot read {path!s}: {err}", path="<file>") from None
    cfg = parse_config(data, seeds)
    logger.info("loaded %s config %s (hash %s)", cfg.kind, path, cfg.digest)
    return cfg
