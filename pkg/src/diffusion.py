"""Random-walk generators L^ε_μ, their symbols l^ε_μ and exponential propagators."""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Sequence

import numpy as np

from calculus import BesovParams, Exponent, Integrability, Weight, besov_norm, holder_norm, lp_norm
from lattice import BravaisBasis, BravaisTorus
from spectral import Field, filter_values, require_same_torus
from utils import ArgumentError, ConfigurationError


logger = logging.getLogger(__name__)

PHI1_SERIES_CUTOFF = 1e-4


def _hermite_pivots(rows: list[list[int]], d: int) -> list[int]:
    """Diagonal of the row-style Hermite normal form of an integer matrix."""
    rows = [list(r) for r in rows]
    pivots = []
    for col in range(d):
        active = [r for r in rows if r[col] != 0]
        rest = [r for r in rows if r[col] == 0]
        while len(active) > 1:
            active.sort(key=lambda r: abs(r[col]))
            head = active[0]
            reduced = []
            for r in active[1:]:
                q = r[col] // head[col]
                r = [a - q * b for a, b in zip(r, head)]
                (reduced if r[col] != 0 else rest).append(r)
            active = [head] + reduced
        if not active:
            pivots.append(0)
            continue
        pivots.append(abs(active[0][col]))
        rows = rest
    return pivots


@dataclass(frozen=True)
class JumpMeasure:
    """μ = Σ κ(g)(½δ_g + ½δ_{-g}) - (Σ κ(g)) δ_0 with g in lattice coordinates."""

    atoms: tuple[tuple[tuple[int, ...], float], ...]

    def __post_init__(self):
        if not self.atoms:
            raise ConfigurationError("measure needs at least one atom", path="measure.atoms")
        d = len(self.atoms[0][0])
        for g, kappa in self.atoms:
            if len(g) != d:
                raise ConfigurationError(f"atom {g!r} has the wrong dimension", path="measure.atoms")
            if not any(g):
                raise ConfigurationError("atoms must be non-zero lattice vectors", path="measure.atoms")
            if not kappa > 0 or not math.isfinite(kappa):
                raise ConfigurationError(f"rate of atom {g!r} must be > 0, got {kappa!r}", path="measure.atoms")
        if _hermite_pivots([list(g) for g, _ in self.atoms], d) != [1] * d:
            raise ConfigurationError("atoms do not generate the lattice", path="measure.atoms")

    @classmethod
    def from_pairs(cls, pairs) -> "JumpMeasure":
        return cls(tuple((tuple(int(c) for c in g), float(k)) for g, k in pairs))

    @classmethod
    def simple_random_walk(cls, d: int = 2) -> "JumpMeasure":
        """Nearest neighbour walk with κ(e_i) = 1/d; its limit generator is Δ/(2d)."""
        return cls.from_pairs((tuple(int(i == j) for i in range(d)), 1.0 / d) for j in range(d))

    @classmethod
    def truncated(
        cls,
        basis: BravaisBasis,
        rate: Callable[[np.ndarray], float],
        radius: float,
        lam: float,
        sigma: float,
        tol: float = 1e-14,
    ) -> "JumpMeasure":
        """Finite part of an infinite-range measure; atoms with κ(g)e^{λ|g|^σ} below tol·Σκ are dropped."""
        d = basis.dimension
        reach = int(math.ceil(radius / min(np.linalg.norm(basis.matrix, axis=1)))) + 1
        candidates = []
        for g in itertools.product(range(-reach, reach + 1), repeat=d):
            # one representative per ±g
            if not any(g) or next(c for c in g if c) < 0:
                continue
            length = float(np.linalg.norm(basis.to_physical(g)))
            if length <= radius:
                candidates.append((g, float(rate(basis.to_physical(g))), length))
        total = sum(k for _, k, _ in candidates)
        kept = [(g, k) for g, k, length in candidates if k > 0 and k * math.exp(lam * length**sigma) >= tol * total]
        logger.debug("truncated measure keeps %d of %d atoms", len(kept), len(candidates))
        return cls.from_pairs(kept)

    @property
    def dimension(self) -> int:
        return len(self.atoms[0][0])

    @property
    def total_rate(self) -> float:
        return sum(k for _, k in self.atoms)

    @cached_property
    def coordinates(self) -> np.ndarray:
        return np.array([g for g, _ in self.atoms], dtype=int)

    @cached_property
    def rates(self) -> np.ndarray:
        return np.array([k for _, k in self.atoms], dtype=float)

    def vectors(self, basis: BravaisBasis) -> np.ndarray:
        return basis.to_physical(self.coordinates)


@dataclass(frozen=True)
class MuNorm:
    matrix: np.ndarray

    @classmethod
    def of(cls, mu: JumpMeasure, basis: BravaisBasis) -> "MuNorm":
        g = mu.vectors(basis)
        return cls(np.einsum("n,ni,nj->ij", mu.rates, g, g))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.sqrt(0.5 * np.einsum("...i,ij,...j->...", x, self.matrix, x))


@dataclass(frozen=True)
class DiffusionSymbol:
    """l^ε_μ(x) = (2/ε²) Σ κ(g) sin²(επ x·g)."""

    mu: JumpMeasure
    basis: BravaisBasis
    eps: float

    def __call__(self, x) -> np.ndarray:
        phase = np.pi * self.eps * (np.asarray(x, dtype=float) @ self.mu.vectors(self.basis).T)
        return (2.0 / self.eps**2) * (np.sin(phase) ** 2 @ self.mu.rates)


def _check_measure(mu: JumpMeasure, torus: BravaisTorus) -> None:
    if mu.dimension != torus.d:
        raise ConfigurationError(f"measure of dimension {mu.dimension} on a {torus.d}d torus", path="measure.atoms")


def multiplier(mu: JumpMeasure, torus: BravaisTorus) -> DiffusionSymbol:
    _check_measure(mu, torus)
    return DiffusionSymbol(mu, torus.basis, torus.eps)


@lru_cache(maxsize=64)
def multiplier_table(mu: JumpMeasure, torus: BravaisTorus) -> np.ndarray:
    table = multiplier(mu, torus)(torus.frequencies())
    table.setflags(write=False)
    return table


def continuum_multiplier(mu: JumpMeasure, basis: BravaisBasis) -> Callable[[np.ndarray], np.ndarray]:
    """Symbol 4π²‖x‖²_μ of -L_μ."""
    norm = MuNorm.of(mu, basis)
    return lambda x: 4.0 * np.pi**2 * norm(x) ** 2


def semigroup_apply(f: Field, t: float, mu: JumpMeasure) -> Field:
    """e^{tL^ε_μ} f."""
    if t < 0:
        raise ArgumentError(f"semigroup time must be >= 0, got {t!r}")
    if t == 0:
        return f.like(f.values.copy())
    table = np.exp(-t * multiplier_table(mu, f.torus))
    return f.like(filter_values(f.values, table, f.torus))


def generator_apply(f: Field, mu: JumpMeasure) -> Field:
    """L^ε_μ f(x) = ε^{-2} Σ κ(g)(½f(x+εg) + ½f(x-εg) - f(x)) by the real-space stencil."""
    _check_measure(mu, f.torus)
    axes = tuple(range(f.torus.d))
    out = np.zeros_like(f.values)
    for g, kappa in mu.atoms:
        shift = tuple(-c for c in g)
        out += kappa * (0.5 * np.roll(f.values, shift, axis=axes) + 0.5 * np.roll(f.values, g, axis=axes) - f.values)
    return f.like(out / f.torus.eps**2)


def generator_apply_spectral(f: Field, mu: JumpMeasure) -> Field:
    return f.like(filter_values(f.values, -multiplier_table(mu, f.torus), f.torus))


def continuum_generator_apply(f: Field, mu: JumpMeasure) -> Field:
    """L_μ f computed with the quadratic symbol; meaningful for band-limited f."""
    table = continuum_multiplier(mu, f.torus.basis)(f.torus.frequencies())
    return f.like(filter_values(f.values, -table, f.torus))


def phi1(z) -> np.ndarray:
    """(e^z - 1)/z with a series branch near zero."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < PHI1_SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    series = 1.0 + z / 2.0 + z**2 / 6.0 + z**3 / 24.0
    return np.where(small, series, np.expm1(safe) / safe)


@lru_cache(maxsize=128)
def etd_propagators(mu: JumpMeasure, torus: BravaisTorus, dt: float, shift: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(e^{-dt·λ}, dt·φ1(-dt·λ)) on the dual grid with λ = l^ε_μ + shift."""
    if not dt > 0:
        raise ArgumentError(f"time step must be > 0, got {dt!r}")
    lam = multiplier_table(mu, torus) + shift
    decay = np.exp(-dt * lam)
    source = dt * phi1(-dt * lam)
    decay.setflags(write=False)
    source.setflags(write=False)
    logger.debug("etd tables eps=%g M=%d dt=%g shift=%g", torus.eps, torus.M, dt, shift)
    return decay, source


def duhamel_apply(F: Sequence[Field], times, mu: JumpMeasure) -> list[Field]:
    """I f(t_n) = ∫_0^{t_n} e^{(t_n - s)L} f(s) ds with f held constant on each grid interval."""
    times = np.asarray(times, dtype=float)
    if len(F) != len(times):
        raise ArgumentError(f"expected {len(times)} snapshots, got {len(F)}")
    torus = require_same_torus(*F)
    out = [Field.zeros(torus)]
    for k in range(len(times) - 1):
        h = float(times[k + 1] - times[k])
        decay, source = etd_propagators(mu, torus, h)
        axes = tuple(range(torus.d))
        spec = np.fft.fftn(out[-1].values, axes=axes) * decay + np.fft.fftn(F[k].values, axes=axes) * source
        out.append(Field(torus, np.fft.ifftn(spec, axes=axes).real))
    return out


def smoothing_ratio(
    f: Field, t: float, mu: JumpMeasure, beta: float, p: Integrability = Exponent.INF, weight: Weight | None = None
) -> float:
    """‖e^{tL}f‖_{𝒞^β_p} t^{β/2} / ‖f‖_{L^p}."""
    smoothed = semigroup_apply(f, t, mu)
    base = float(lp_norm(f.values, f.torus, p, weight))
    return besov_norm(smoothed, BesovParams(beta, p, Exponent.INF, weight or Weight())) * t ** (beta / 2) / base


def schauder_ratio(F: Sequence[Field], times, mu: JumpMeasure, beta: float, gain: float = 2.0) -> float:
    """‖I f(T)‖_{𝒞^{β+gain}} / sup_t ‖f(t)‖_{𝒞^β}; bounded in ε for gain < 2."""
    integral = duhamel_apply(F, times, mu)[-1]
    base = max(holder_norm(f, beta) for f in F)
    return holder_norm(integral, beta + gain) / base if base else 0.0
