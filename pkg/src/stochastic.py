"""Noise, Wick products, discrete multiple stochastic integrals and the enhanced noise (ξ, X, X•ξ)."""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import comb, ndtri

from calculus import Weight, holder_norm, resonant, smooth_step
from diffusion import JumpMeasure, multiplier_table
from lattice import BravaisTorus
from spectral import Field, filter_values
from utils import ArgumentError, ConfigurationError, NumericError


logger = logging.getLogger(__name__)

DISTRIBUTIONS = ("gaussian", "rademacher", "uniform")
MAX_WICK_ORDER = 6
MAX_DENSE_ORDER = 3


@dataclass(frozen=True)
class NoiseLaw:
    """Y = mean + sqrt(variance)·Z with Z standardized gaussian, rademacher or uniform."""

    distribution: str
    variance: float
    mean: float = 0.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigurationError(
                f"unknown distribution {self.distribution!r}, expected one of {DISTRIBUTIONS}", path="noise.distribution"
            )
        if not self.variance > 0:
            raise ConfigurationError(f"variance must be > 0, got {self.variance!r}", path="noise.variance")

    def standard_moment(self, k: int) -> float:
        if k % 2:
            return 0.0
        if self.distribution == "gaussian":
            return float(math.prod(range(k - 1, 0, -2)))
        if self.distribution == "rademacher":
            return 1.0
        return 3.0 ** (k // 2) / (k + 1)

    def moment(self, k: int) -> float:
        """E[Y^k]."""
        sd = math.sqrt(self.variance)
        return sum(comb(k, j, exact=True) * self.mean ** (k - j) * sd**j * self.standard_moment(j) for j in range(k + 1))

    def expectation(self, poly: Polynomial) -> float:
        return float(sum(c * self.moment(k) for k, c in enumerate(poly.coef)))


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str = "gaussian"
    scale: str = "macro"
    seed: int = 0
    p_xi: float = 40.0
    mean: float = 0.0
    # macro ε; the micro noise η^ε has variance ε²/|𝒢|
    eps: float | None = None

    def __post_init__(self):
        if self.scale not in ("macro", "micro"):
            raise ConfigurationError(f"scale must be macro or micro, got {self.scale!r}", path="noise.scale")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}", path="noise.seed")
        if self.scale == "micro" and not (self.eps and self.eps > 0):
            raise ConfigurationError("micro noise needs the macro eps", path="noise.eps")

    def law(self, torus: BravaisTorus) -> NoiseLaw:
        if self.scale == "macro":
            variance = 1.0 / torus.volume
        else:
            variance = self.eps**2 / torus.basis.volume
        return NoiseLaw(self.distribution, variance, self.mean)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.distribution, self.scale, seed, self.p_xi, self.mean, self.eps)


def _uniforms(seed: int, stream: int, size: int) -> np.ndarray:
    """Open-interval uniforms; draw k depends only on (seed, stream, k)."""
    bits = np.random.Philox(key=seed | (stream << 64))
    raw = bits.random_raw(size)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def standardized(distribution: str, u: np.ndarray) -> np.ndarray:
    if distribution == "gaussian":
        return ndtri(u)
    if distribution == "rademacher":
        return np.where(u < 0.5, -1.0, 1.0)
    return math.sqrt(3.0) * (2.0 * u - 1.0)


def sample_noise(spec: NoiseSpec, torus: BravaisTorus, stream: int = 0) -> Field:
    law = spec.law(torus)
    z = standardized(spec.distribution, _uniforms(spec.seed, stream, torus.size))
    return Field(torus, (law.mean + math.sqrt(law.variance) * z).reshape(torus.shape))


# Wick products

def independent_moments(law: NoiseLaw) -> Callable[[tuple], float]:
    """Moment oracle for i.i.d. sites: E[Y^E] factorizes over distinct labels."""

    def moments(labels: tuple) -> float:
        counts: dict = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
        return math.prod(law.moment(k) for k in counts.values())

    return moments


def wick_product(labels: Sequence, values: Mapping, moments: Callable[[tuple], float]) -> float:
    """Y^{⋄I} = Y^I - Σ_{∅≠E⊂I} E[Y^E] Y^{⋄(I∖E)}, I given as a label sequence (repeats allowed)."""
    labels = tuple(labels)
    if len(labels) > MAX_WICK_ORDER:
        raise ArgumentError(f"Wick order {len(labels)} exceeds {MAX_WICK_ORDER}")

    def key(ls) -> tuple:
        return tuple(sorted(ls, key=repr))

    def moment(ls) -> float:
        try:
            return float(moments(key(ls)))
        except KeyError as err:
            raise ConfigurationError(f"missing moment for {key(ls)!r}", path="noise.moments") from err

    @lru_cache(maxsize=None)
    def wick(ls: tuple) -> float:
        if not ls:
            return 1.0
        out = math.prod(float(values[label]) for label in ls)
        n = len(ls)
        for size in range(1, n + 1):
            for picked in itertools.combinations(range(n), size):
                inside = [ls[i] for i in picked]
                rest = key(ls[i] for i in range(n) if i not in picked)
                out -= moment(inside) * wick(rest)
        return out

    return wick(key(labels))


def wick_polynomial(n: int, law: NoiseLaw) -> Polynomial:
    """Y^{⋄n} as a polynomial in Y; He_n for a standard gaussian."""
    if not 0 <= n <= MAX_WICK_ORDER:
        raise ArgumentError(f"Wick order must be in 0..{MAX_WICK_ORDER}, got {n!r}")
    powers = [Polynomial([1.0])]
    y = Polynomial([0.0, 1.0])
    for k in range(1, n + 1):
        p = y**k
        for j in range(1, k + 1):
            p = p - comb(k, j, exact=True) * law.moment(j) * powers[k - j]
        powers.append(p)
    return powers[n]


# multiple stochastic integrals

def _integral_order(f: np.ndarray, torus: BravaisTorus) -> tuple[int, np.ndarray]:
    if f.ndim % torus.d == 0 and f.shape == torus.shape * (f.ndim // torus.d):
        n = f.ndim // torus.d
    elif all(s == torus.size for s in f.shape):
        n = f.ndim
    else:
        raise ArgumentError(f"kernel shape {f.shape} does not live on (𝒢^ε)^n for this torus")
    return n, f.reshape((torus.size,) * n)


def multiple_integral(f, noise: Field, law: NoiseLaw) -> float:
    """𝓘_n f = Σ |𝒢^ε|^n f(z_1..z_n) ξ(z_1)⋄…⋄ξ(z_n).

    f is a dense array (n <= 3) or a mapping {site tuple: value}; sites are flattened indices
    or index tuples of the torus.
    """
    torus = noise.torus
    xi = noise.values.reshape(-1)
    if isinstance(f, Mapping):
        return _sparse_integral(f, xi, law, torus)
    n, f = _integral_order(np.asarray(f, dtype=float), torus)
    if n > MAX_DENSE_ORDER:
        raise ArgumentError(f"dense kernels are limited to order {MAX_DENSE_ORDER}, got {n}; pass a sparse mapping")
    w1, w2, w3 = (wick_polynomial(k, law)(xi) for k in (1, 2, 3))
    vol = torus.volume**n
    if n == 1:
        return vol * float(f @ w1)
    if n == 2:
        diag = np.diagonal(f)
        return vol * float(w1 @ f @ w1 - diag @ (w1 * w1) + diag @ w2)
    d12 = np.einsum("zzy->zy", f)
    d13 = np.einsum("zyz->zy", f)
    d23 = np.einsum("yzz->zy", f)
    d123 = np.einsum("zzz->z", f)
    distinct = (
        np.einsum("abc,a,b,c->", f, w1, w1, w1)
        - sum(np.einsum("zy,z,y->", d, w1 * w1, w1) for d in (d12, d13, d23))
        + 2.0 * d123 @ w1**3
    )
    paired = sum(np.einsum("zy,z,y->", d, w2, w1) for d in (d12, d13, d23)) - 3.0 * d123 @ (w2 * w1)
    return vol * float(distinct + paired + d123 @ w3)


def _sparse_integral(f: Mapping, xi: np.ndarray, law: NoiseLaw, torus: BravaisTorus) -> float:
    total = 0.0
    for sites, value in f.items():
        counts: dict[int, int] = {}
        for site in sites:
            k = int(np.ravel_multi_index(site, torus.shape)) if isinstance(site, tuple) else int(site)
            counts[k] = counts.get(k, 0) + 1
        term = math.prod(float(wick_polynomial(m, law)(xi[k])) for k, m in counts.items())
        total += torus.volume ** len(sites) * float(value) * term
    return total


def multiple_integral_variance(f, law: NoiseLaw, torus: BravaisTorus) -> float:
    """Exact Var(𝓘_n f) for dense kernels of order 1 and 2."""
    n, f = _integral_order(np.asarray(f, dtype=float), torus)
    if n == 1:
        return torus.volume**2 * law.variance * float(f @ f)
    if n == 2:
        sym = 0.5 * (f + f.T)
        diag = np.diagonal(f)
        off = float(np.sum(sym**2) - np.sum(np.diagonal(sym) ** 2))
        w2 = wick_polynomial(2, law)
        return torus.volume**4 * (2.0 * law.variance**2 * off + law.expectation(w2 * w2) * float(diag @ diag))
    raise ArgumentError(f"exact variance is available for orders 1 and 2, got {n}")


# enhanced noise

@dataclass(frozen=True)
class Cutoff:
    """χ: 0 on ¼·Ĝ and 1 outside ½·Ĝ, in reduced coordinates of the unscaled cell."""

    inner: float = 1 / 8
    outer: float = 1 / 4

    def __post_init__(self):
        if not 0 < self.inner < self.outer <= 0.5:
            raise ConfigurationError(f"need 0 < inner < outer <= 1/2, got {self!r}", path="chi")

    def __call__(self, frequencies, torus: BravaisTorus) -> np.ndarray:
        # θ_i = x·a_i, not scaled by ε
        theta = np.abs(np.asarray(frequencies, dtype=float) @ torus.basis.matrix.T)
        inside = smooth_step((self.outer - theta) / (self.outer - self.inner))
        return 1.0 - np.prod(inside, axis=-1)

    def table(self, torus: BravaisTorus) -> np.ndarray:
        return self(torus.frequencies(), torus)


def _resolvent_table(mu: JumpMeasure, torus: BravaisTorus, chi: Cutoff) -> np.ndarray:
    """χ/l^ε_μ on the dual grid, zero where χ vanishes."""
    weights = chi.table(torus)
    symbol = multiplier_table(mu, torus)
    live = weights > 0
    if np.any(symbol[live] <= 0):
        raise NumericError("cutoff support overlaps a zero of the multiplier")
    out = np.zeros(torus.shape)
    out[live] = weights[live] / symbol[live]
    return out


def renorm_constant(mu: JumpMeasure, torus: BravaisTorus, chi: Cutoff | None = None) -> float:
    """c^ε_μ = ∫_{Ĝ^ε} χ/l^ε_μ by the rectangle rule on the dual grid."""
    c = torus.dual_cell * float(_resolvent_table(mu, torus, chi or Cutoff()).sum())
    logger.debug("c_eps N=%d M=%d: %.6f", torus.N, torus.M, c)
    return c


@dataclass(eq=False)
class EnhancedNoise:
    xi: Field
    X: Field
    c_eps: float
    resonant_renormalized: Field
    chi: Cutoff


def build_enhanced(xi: Field, mu: JumpMeasure, chi: Cutoff | None = None) -> EnhancedNoise:
    chi = chi or Cutoff()
    torus = xi.torus
    X = xi.like(filter_values(xi.values, _resolvent_table(mu, torus, chi), torus))
    c = renorm_constant(mu, torus, chi)
    return EnhancedNoise(xi, X, c, resonant(X, xi) - c, chi)


@dataclass(frozen=True)
class RegularityParams:
    p_xi: float = 40.0
    sigma: float = 0.5
    kappa: float = 0.06
    alpha: float = 0.7

    def __post_init__(self):
        if not self.kappa > 2 / self.p_xi:
            raise ConfigurationError(f"kappa must exceed 2/p_xi, got {self.kappa!r}", path="regularity.kappa")
        ratio = self.kappa / self.sigma
        if not 2 / self.p_xi < ratio < 1:
            raise ConfigurationError(f"kappa/sigma must lie in (2/p_xi, 1), got {ratio!r}", path="regularity.kappa")
        low, high = 2 / 3 - 2 * ratio / 3, 1 - 2 / self.p_xi - 2 * ratio
        if not low < self.alpha < high:
            raise ConfigurationError(
                f"alpha must lie in ({low:.4f}, {high:.4f}), got {self.alpha!r}", path="regularity.alpha"
            )

    @property
    def noise_exponent(self) -> float:
        return self.alpha + 2 * self.kappa / self.sigma - 2


def regularity_terms(e: EnhancedNoise, params: RegularityParams | None = None) -> tuple[float, float, float]:
    params = params or RegularityParams()
    beta = params.noise_exponent
    weight = Weight.polynomial(params.kappa)
    return (
        holder_norm(e.xi, beta, weight),
        holder_norm(e.X, beta + 2, weight),
        holder_norm(e.resonant_renormalized, 2 * beta + 2, Weight.polynomial(2 * params.kappa)),
    )


def regularity_statistic(e: EnhancedNoise, params: RegularityParams | None = None) -> float:
    """M_ε, the largest of the three weighted norms of (ξ, X, X•ξ)."""
    return max(regularity_terms(e, params))


# Monte Carlo

def monte_carlo_resonant_mean(
    spec: NoiseSpec, mu: JumpMeasure, torus: BravaisTorus, n_samples: int, chi: Cutoff | None = None
) -> dict:
    """Estimate of E[(X⊙ξ)(0)] over independent streams, with its standard error."""
    chi = chi or Cutoff()
    samples = np.empty(n_samples)
    for s in range(n_samples):
        xi = sample_noise(spec, torus, stream=s)
        X = xi.like(filter_values(xi.values, _resolvent_table(mu, torus, chi), torus))
        samples[s] = resonant(X, xi).values[torus.origin_index]
    return {
        "op": "resonant_mean",
        "eps": torus.eps,
        "M": torus.M,
        "seed": spec.seed,
        "n_samples": n_samples,
        "estimate": float(samples.mean()),
        "stderr": float(samples.std(ddof=1) / math.sqrt(n_samples)),
        "c_eps": renorm_constant(mu, torus, chi),
    }


def chaos_moment_ratio(f, spec: NoiseSpec, torus: BravaisTorus, n_samples: int, p: float = 4.0) -> float:
    """Empirical ‖𝓘_n f‖_{L^p(ℙ)} / ‖f‖_{L²((𝒢^ε)^n)}."""
    n, flat = _integral_order(np.asarray(f, dtype=float), torus)
    law = spec.law(torus)
    values = np.array([multiple_integral(flat, sample_noise(spec, torus, s), law) for s in range(n_samples)])
    norm = math.sqrt(torus.volume**n * float(np.sum(flat**2)))
    return float(np.mean(np.abs(values) ** p) ** (1.0 / p)) / norm
