"""Littlewood-Paley calculus on the torus.

Blocks are built from one radial profile fixed in physical frequency units, so the same
(φ_j) serves every ε; only the last block j_𝒢 = j_max is the lattice remainder 1 - Σ_{j<j_max} φ_j.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from strenum import StrEnum

from lattice import BravaisTorus
from spectral import Field, filter_values, require_same_torus
from utils import ArgumentError, ConfigurationError, ShapeError


logger = logging.getLogger(__name__)

DEFAULT_PROFILE_RADIUS = 3 / 8


class Exponent(StrEnum):
    INF = "inf"


Integrability = Union[float, Exponent]


def _is_inf(p: Integrability) -> bool:
    return p == Exponent.INF


def smooth_step(u):
    """C^∞ step from the exp(-1/u) mollifier: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class Weight:
    kind: str = "polynomial"
    kappa: float = 0.0
    sigma: float = 0.5
    l: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "subexponential"):
            raise ConfigurationError(f"unknown weight kind {self.kind!r}", path="weight.kind")
        if self.kind == "polynomial" and self.kappa < 0:
            raise ConfigurationError(f"kappa must be >= 0, got {self.kappa!r}", path="weight.kappa")
        if self.kind == "subexponential" and not (0 < self.sigma < 1 and self.l <= 0 and self.t >= 0):
            raise ConfigurationError(
                f"subexponential weight needs sigma in (0,1), l <= 0, t >= 0, got {self!r}", path="weight"
            )

    @classmethod
    def polynomial(cls, kappa: float) -> "Weight":
        return cls("polynomial", kappa=kappa)

    @classmethod
    def subexponential(cls, sigma: float, l: float, t: float = 0.0) -> "Weight":
        return cls("subexponential", sigma=sigma, l=l, t=t)

    def at_time(self, t: float) -> "Weight":
        """e^σ_{l+t}; polynomial weights do not depend on time."""
        if self.kind == "polynomial":
            return self
        return Weight.subexponential(self.sigma, self.l, t)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        r = 1.0 + np.linalg.norm(points, axis=-1)
        if self.kind == "polynomial":
            return r ** (-self.kappa)
        return np.exp(-(self.l + self.t) * r**self.sigma)


@dataclass(frozen=True)
class BesovParams:
    alpha: float
    p: Integrability = Exponent.INF
    q: Integrability = Exponent.INF
    weight: Weight = field(default_factory=Weight)

    def __post_init__(self):
        for name in ("p", "q"):
            val = getattr(self, name)
            if not _is_inf(val) and not val >= 1:
                raise ConfigurationError(f"{name} must be >= 1 or inf, got {val!r}", path=f"besov.{name}")


def lp_norm(values: np.ndarray, torus: BravaisTorus, p: Integrability, weight: Weight | None = None) -> float:
    """(|𝒢^ε| Σ |ρ f|^p)^{1/p}, reduced over the last d axes."""
    axes = tuple(range(-torus.d, 0))
    v = np.abs(values)
    if weight is not None:
        v = v * weight(torus.points())
    if _is_inf(p):
        return np.max(v, axis=axes)
    return (torus.volume * np.sum(v**p, axis=axes)) ** (1.0 / p)


@dataclass(eq=False)
class PartitionOfUnity:
    torus: BravaisTorus
    radius: float
    j_max: int
    blocks: np.ndarray

    @property
    def indices(self) -> range:
        return range(-1, self.j_max + 1)

    @property
    def count(self) -> int:
        return self.j_max + 2

    def block(self, j: int) -> np.ndarray:
        self._check_index(j)
        return self.blocks[j + 1]

    def _check_index(self, j: int) -> None:
        if not -1 <= j <= self.j_max:
            raise ArgumentError(f"block index {j!r} outside -1..{self.j_max}")

    def check(self, tol: float = 1e-12) -> None:
        total = self.blocks.sum(axis=0)
        assert np.max(np.abs(total - 1.0)) <= tol, "partition does not sum to one"
        for a in range(self.count):
            for b in range(a + 2, self.count):
                assert not np.any(self.blocks[a] * self.blocks[b]), f"blocks {a - 1} and {b - 1} overlap"


def _ball(rho: np.ndarray, radius: float) -> np.ndarray:
    """Radial χ0: one on |x| <= 3/8·r, zero on |x| >= r/2."""
    inner, outer = 0.375 * radius, 0.5 * radius
    return smooth_step((outer - rho) / (outer - inner))


@lru_cache(maxsize=32)
def build_partition(torus: BravaisTorus, radius: float = DEFAULT_PROFILE_RADIUS) -> PartitionOfUnity:
    """φ_{-1} = χ0, φ_j = χ0(2^{-j-1}·) - χ0(2^{-j}·) for 0 <= j < j_max, last block the remainder.

    φ_0 is supported in the annulus [3/8, 1]·r, so blocks two apart never overlap.
    """
    if radius <= 0:
        raise ConfigurationError(f"profile radius must be > 0, got {radius!r}", path="partition.radius")
    limit = torus.basis.inradius / torus.eps
    j_max = max(0, math.ceil(math.log2(limit / radius)))
    while radius * 2**j_max < limit:
        j_max += 1
    while j_max > 0 and radius * 2 ** (j_max - 1) >= limit:
        j_max -= 1
    if j_max < 1:
        raise ConfigurationError(
            f"grid too coarse for the partition (j_G={j_max}) at eps={torus.eps:g}, radius={radius!r}",
            path="partition.radius",
        )
    rho = np.linalg.norm(torus.frequencies(), axis=-1)
    blocks = np.empty((j_max + 2,) + torus.shape)
    blocks[0] = _ball(rho, radius)
    for j in range(j_max):
        blocks[j + 1] = _ball(rho / 2 ** (j + 1), radius) - _ball(rho / 2**j, radius)
    blocks[-1] = 1.0 - blocks[:-1].sum(axis=0)
    blocks.setflags(write=False)
    logger.debug("partition eps=%g M=%d j_G=%d", torus.eps, torus.M, j_max)
    return PartitionOfUnity(torus, radius, j_max, blocks)


def _partition_for(f: Field, partition: PartitionOfUnity | None) -> PartitionOfUnity:
    if partition is None:
        return build_partition(f.torus)
    if partition.torus != f.torus:
        raise ShapeError("partition was built for a different torus")
    return partition


def lp_blocks(f: Field, partition: PartitionOfUnity | None = None) -> np.ndarray:
    """All Δ_j f stacked along axis 0 (index j+1)."""
    partition = _partition_for(f, partition)
    return filter_values(f.values[None], partition.blocks, f.torus)


def lp_block(f: Field, j: int, partition: PartitionOfUnity | None = None) -> Field:
    partition = _partition_for(f, partition)
    return f.like(filter_values(f.values, partition.block(j), f.torus))


def partial_sum(f: Field, j: int, partition: PartitionOfUnity | None = None) -> Field:
    """S_j f = Σ_{i<j} Δ_i f."""
    partition = _partition_for(f, partition)
    partition._check_index(j)
    table = partition.blocks[: j + 1].sum(axis=0)
    return f.like(filter_values(f.values, table, f.torus))


def besov_blocks(f: Field, params: BesovParams, partition: PartitionOfUnity | None = None) -> np.ndarray:
    """2^{jα}‖ρ Δ_j f‖_{L^p} for j = -1..j_max."""
    partition = _partition_for(f, partition)
    norms = lp_norm(lp_blocks(f, partition), f.torus, params.p, params.weight)
    js = np.arange(-1, partition.j_max + 1)
    return 2.0 ** (js * params.alpha) * norms


def besov_norm(f: Field, params: BesovParams, partition: PartitionOfUnity | None = None) -> float:
    terms = besov_blocks(f, params, partition)
    if _is_inf(params.q):
        return float(np.max(terms))
    return float(np.sum(terms**params.q) ** (1.0 / params.q))


def holder_norm(f: Field, alpha: float, weight: Weight | None = None, p: Integrability = Exponent.INF) -> float:
    """𝒞^α_p norm (q = ∞)."""
    return besov_norm(f, BesovParams(alpha, p, Exponent.INF, weight or Weight()))


def paraproduct(f: Field, g: Field, partition: PartitionOfUnity | None = None) -> Field:
    """f ≺ g = Σ_j S_{j-1} f · Δ_j g."""
    require_same_torus(f, g)
    partition = _partition_for(f, partition)
    low = np.cumsum(lp_blocks(f, partition), axis=0)
    high = lp_blocks(g, partition)
    out = np.einsum("j...,j...->...", low[:-2], high[2:])
    return f.like(out)


def resonant(f: Field, g: Field, partition: PartitionOfUnity | None = None) -> Field:
    """f ⊙ g = Σ_{|i-j|<=1} Δ_i f · Δ_j g."""
    require_same_torus(f, g)
    partition = _partition_for(f, partition)
    F = lp_blocks(f, partition)
    G = lp_blocks(g, partition)
    near = G.copy()
    near[1:] += G[:-1]
    near[:-1] += G[1:]
    return f.like(np.einsum("j...,j...->...", F, near))


def commutator(f1: Field, f2: Field, f3: Field, partition: PartitionOfUnity | None = None) -> Field:
    """C(f1, f2, f3) = (f1 ≺ f2) ⊙ f3 - f1 (f2 ⊙ f3)."""
    require_same_torus(f1, f2, f3)
    return resonant(paraproduct(f1, f2, partition), f3, partition) - f1 * resonant(f2, f3, partition)


def paraproduct_constant(f: Field, g: Field, alpha1: float, alpha2: float, partition=None) -> float:
    """‖f ≺ g‖_{𝒞^{α1+α2}} / (‖f‖_{𝒞^{α1}} ‖g‖_{𝒞^{α2}}) for the paraproduct bound shape."""
    denom = holder_norm(f, alpha1) * holder_norm(g, alpha2)
    return holder_norm(paraproduct(f, g, partition), alpha1 + alpha2) / denom if denom else 0.0


def commutator_ratio(f1: Field, f2: Field, f3: Field, alpha2: float, alpha3: float, partition=None) -> float:
    """‖C(f1,f2,f3)‖ over the larger of its two terms, both at regularity α2 + α3."""
    left = resonant(paraproduct(f1, f2, partition), f3, partition)
    right = f1 * resonant(f2, f3, partition)
    beta = alpha2 + alpha3
    scale = max(holder_norm(left, beta), holder_norm(right, beta))
    return holder_norm(left - right, beta) / scale if scale else 0.0


@dataclass(frozen=True)
class TimeKernel:
    """Unit-mass bump φ on (start, stop) ⊂ (0, ∞) with tabulated Φ(u) = ∫_0^u φ, Ψ(u) = ∫_0^u vφ(v)dv."""

    start: float = 1.0
    stop: float = 2.0
    samples: int = 20001

    def __post_init__(self):
        if not 0 < self.start < self.stop:
            raise ConfigurationError(f"time kernel support must lie in (0, inf), got {self!r}", path="kernel")

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        mid, half = (self.start + self.stop) / 2, (self.stop - self.start) / 2
        s = (u - mid) / half
        out = np.zeros_like(s)
        inside = np.abs(s) < 1
        out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
        return out / self._mass

    @cached_property
    def _mass(self) -> float:
        u = np.linspace(self.start, self.stop, self.samples)
        mid, half = (self.start + self.stop) / 2, (self.stop - self.start) / 2
        s = (u - mid) / half
        raw = np.where(np.abs(s) < 1, np.exp(-1.0 / np.maximum(1.0 - s**2, 1e-300)), 0.0)
        return float(np.trapezoid(raw, u))

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = np.linspace(self.start, self.stop, self.samples)
        phi = self.density(u)
        cdf = cumulative_trapezoid(phi, u, initial=0.0)
        first = cumulative_trapezoid(u * phi, u, initial=0.0)
        return u, cdf / cdf[-1], first / cdf[-1]

    def cdf(self, u) -> np.ndarray:
        grid, cdf, _ = self._tables
        return np.interp(u, grid, cdf, left=0.0, right=1.0)

    def first_moment(self, u) -> np.ndarray:
        grid, _, first = self._tables
        return np.interp(u, grid, first, left=0.0, right=first[-1])


def _uniform_step(times: np.ndarray) -> float:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ArgumentError("time grid must be a non-empty 1d sequence")
    if times.size == 1:
        return 0.0
    steps = np.diff(times)
    h = float(steps.mean())
    if h <= 0 or np.max(np.abs(steps - h)) > 1e-9 * max(h, 1.0):
        raise ArgumentError("time grid is not uniform")
    return h


def time_smoothing_weights(times, t_idx: int, i: int, kernel: TimeKernel, clamp_initial: bool = True) -> np.ndarray:
    """Weights w_k with Q_i f(t) = Σ_k w_k f(s_k) for the piecewise linear interpolant of f.

    Q_i f(t) = ∫_{-∞}^t 2^{2i} φ(2^{2i}(t - s)) f(s ∨ 0) ds, integrated exactly against the
    interpolant; the part s < 0 sees f(0) (or nothing when clamp_initial is False).
    """
    times = np.asarray(times, dtype=float)
    h = _uniform_step(times)
    lam = 4.0**i
    t = times[t_idx] - times[0]
    w = np.zeros(t_idx + 1)
    if clamp_initial:
        w[0] += 1.0 - float(kernel.cdf(lam * t))
    if t_idx == 0:
        return w
    s = times[: t_idx + 1] - times[0]
    v = lam * (t - s)
    dcdf = kernel.cdf(v[:-1]) - kernel.cdf(v[1:])
    dfirst = kernel.first_moment(v[:-1]) - kernel.first_moment(v[1:])
    slope = ((t - s[:-1]) * dcdf - dfirst / lam) / h
    w[:-1] += dcdf - slope
    w[1:] += slope
    return w


def modified_paraproduct(
    F: Sequence[Field],
    G: Sequence[Field],
    times,
    t_idx: int,
    kernel: TimeKernel | None = None,
    partition: PartitionOfUnity | None = None,
    clamp_initial: bool = True,
) -> Field:
    """(F ≺≺ G)(t) = Σ_{j1 < j2-1} Q_{j2} Δ_{j1} F · Δ_{j2} G(t) on a uniform time grid."""
    times = np.asarray(times, dtype=float)
    if len(F) != len(times) or len(G) != len(times):
        raise ArgumentError(f"expected {len(times)} snapshots, got {len(F)} and {len(G)}")
    if not 0 <= t_idx < len(times):
        raise ArgumentError(f"time index {t_idx!r} outside the grid")
    _uniform_step(times)
    kernel = kernel or TimeKernel()
    torus = require_same_torus(*F[: t_idx + 1], G[t_idx])
    partition = _partition_for(G[t_idx], partition)
    past = np.stack([np.cumsum(lp_blocks(F[k], partition), axis=0) for k in range(t_idx + 1)])
    high = lp_blocks(G[t_idx], partition)
    out = np.zeros(torus.shape)
    for j2 in range(1, partition.j_max + 1):
        w = time_smoothing_weights(times, t_idx, j2, kernel, clamp_initial)
        smoothed = np.tensordot(w, past[:, j2 - 1], axes=1)
        out += smoothed * high[j2 + 1]
    return Field(torus, out)


WeightSchedule = Union[Weight, Callable[[float], Weight]]


def _weight_at(schedule: WeightSchedule | None, t: float) -> Weight:
    if schedule is None:
        return Weight()
    if isinstance(schedule, Weight):
        return schedule.at_time(t)
    return schedule(t)


def parabolic_norm(
    F: Sequence[Field],
    times,
    gamma: float,
    alpha: float,
    p: Integrability = Exponent.INF,
    weights: WeightSchedule | None = None,
) -> float:
    """Discrete 𝓛^{γ,α}_{p,T} norm: ‖t^γ f‖_{C^{α/2}_T L^p} + sup_t t^γ ‖f(t)‖_{𝒞^α_p}."""
    if not 0 <= gamma < 1:
        raise ArgumentError(f"gamma must lie in [0, 1), got {gamma!r}")
    times = np.asarray(times, dtype=float)
    _uniform_step(times)
    torus = require_same_torus(*F)
    rel = times - times[0]
    scale = np.where(rel > 0, rel, 0.0) ** gamma if gamma > 0 else np.ones_like(rel)
    scaled = [F[k].values * scale[k] for k in range(len(F))]
    w = [_weight_at(weights, float(t)) for t in rel]
    sup = max(float(lp_norm(v, torus, p, wk)) for v, wk in zip(scaled, w))
    holder = 0.0
    for b in range(1, len(F)):
        for a in range(b):
            diff = lp_norm(scaled[b] - scaled[a], torus, p, w[b])
            holder = max(holder, float(diff) / (rel[b] - rel[a]) ** (alpha / 2))
    besov = max(
        float(scale[k]) * besov_norm(F[k], BesovParams(alpha, p, Exponent.INF, w[k])) for k in range(len(F))
    )
    return sup + holder + besov
