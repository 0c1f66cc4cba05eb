"""Bravais lattices, their dyadic scalings and the finite periodic window we compute on."""

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from utils import ConfigurationError, is_power_of_two


logger = logging.getLogger(__name__)

MAX_DIMENSION = 3


@dataclass(frozen=True)
class BravaisBasis:
    vectors: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        d = len(self.vectors)
        if not 1 <= d <= MAX_DIMENSION:
            raise ConfigurationError(f"dimension must be in 1..{MAX_DIMENSION}, got {d}", path="lattice.basis")
        if any(len(v) != d for v in self.vectors):
            raise ConfigurationError(f"basis must be {d} vectors of length {d}", path="lattice.basis")
        matrix = np.asarray(self.vectors, dtype=float)
        if not np.all(np.isfinite(matrix)):
            raise ConfigurationError("basis has non-finite entries", path="lattice.basis")
        scale = float(np.prod(np.linalg.norm(matrix, axis=1)))
        if scale == 0.0 or abs(np.linalg.det(matrix)) <= 1e-12 * scale:
            raise ConfigurationError(f"singular basis {self.vectors!r}", path="lattice.basis")

    @classmethod
    def from_vectors(cls, vectors) -> "BravaisBasis":
        return cls(tuple(tuple(float(c) for c in v) for v in vectors))

    @classmethod
    def square(cls, d: int = 2) -> "BravaisBasis":
        return cls.from_vectors(np.eye(d))

    @classmethod
    def hexagonal(cls) -> "BravaisBasis":
        return cls.from_vectors([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])

    @property
    def dimension(self) -> int:
        return len(self.vectors)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Rows are a_1..a_d."""
        return np.asarray(self.vectors, dtype=float)

    @cached_property
    def reciprocal(self) -> np.ndarray:
        """Rows are the dual vectors with â_i·a_j = δ_ij."""
        return np.linalg.inv(self.matrix).T

    @cached_property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.matrix)))

    @cached_property
    def cell_volume(self) -> float:
        return float(abs(np.linalg.det(self.reciprocal)))

    @cached_property
    def inradius(self) -> float:
        # the face θ_i = 1/2 of the centered cell is the plane x·a_i = 1/2
        return float(np.min(0.5 / np.linalg.norm(self.matrix, axis=1)))

    def to_physical(self, coords) -> np.ndarray:
        """Lattice coordinates (integers) to physical vectors."""
        return np.asarray(coords, dtype=float) @ self.matrix


@dataclass(frozen=True)
class BravaisTorus:
    """Window {0..M-1}^d of ε·𝒢 with ε = 2^-N, periodic with period M·ε·a_i."""

    basis: BravaisBasis
    N: int
    M: int

    @property
    def d(self) -> int:
        return self.basis.dimension

    @property
    def eps(self) -> float:
        return math.ldexp(1.0, -self.N)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def size(self) -> int:
        return self.M**self.d

    @property
    def volume(self) -> float:
        """|𝒢^ε|, the mass of one lattice site."""
        return self.eps**self.d * self.basis.volume

    @property
    def window_volume(self) -> float:
        return self.size * self.volume

    @property
    def dual_cell(self) -> float:
        """Measure of one dual grid cell; the rectangle rule weight."""
        return 1.0 / self.window_volume

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.M // 2,) * self.d

    @cached_property
    def _indices(self) -> np.ndarray:
        axes = np.meshgrid(*[np.arange(self.M)] * self.d, indexing="ij")
        return np.stack(axes, axis=-1)

    @cached_property
    def _modes(self) -> np.ndarray:
        m = np.rint(np.fft.fftfreq(self.M, d=1.0 / self.M)).astype(int)
        axes = np.meshgrid(*[m] * self.d, indexing="ij")
        return np.stack(axes, axis=-1)

    def points(self) -> np.ndarray:
        """Physical points, shape (M,)*d + (d,)."""
        return self.eps * (self._indices - self.M // 2) @ self.basis.matrix

    def mode_numbers(self) -> np.ndarray:
        """Integer mode numbers m in FFT order, shape (M,)*d + (d,)."""
        return self._modes

    def frequencies(self) -> np.ndarray:
        """Dual grid Σ m_i/(Mε) â_i in FFT order, shape (M,)*d + (d,)."""
        return (self._modes / (self.M * self.eps)) @ self.basis.reciprocal

    def reduced_coordinates(self, x) -> np.ndarray:
        """θ with x = Σ θ_i â_i / ε; the scaled Fourier cell is θ ∈ [-1/2, 1/2)^d."""
        return self.eps * np.asarray(x, dtype=float) @ self.basis.matrix.T

    def index_of(self, point) -> tuple[int, ...]:
        k = np.rint(np.asarray(point, dtype=float) @ self.basis.reciprocal.T / self.eps) + self.M // 2
        return tuple(int(i) % self.M for i in k)

    def refine(self, r: int = 1) -> "BravaisTorus":
        """Same physical window, ε halved r times."""
        return BravaisTorus(self.basis, self.N + r, self.M * 2**r)

    def coarse_slice(self, r: int) -> tuple[slice, ...]:
        """Indices of the refine(r) torus that are points of this torus."""
        return (slice(None, None, 2**r),) * self.d


def build_torus(basis: BravaisBasis, N: int, M: int) -> BravaisTorus:
    if N < 0:
        raise ConfigurationError(f"scale exponent must be >= 0, got {N!r}", path="lattice.N")
    if M < 4 or M % 2:
        raise ConfigurationError(f"torus side must be even and >= 4, got {M!r}", path="lattice.M")
    if not is_power_of_two(M):
        raise ConfigurationError(f"torus side must be a power of two, got {M!r}", path="lattice.M")
    torus = BravaisTorus(basis, int(N), int(M))
    logger.debug("torus d=%d N=%d M=%d eps=%g |G^eps|=%g", torus.d, N, M, torus.eps, torus.volume)
    return torus


def reduce_to_cell(x, torus: BravaisTorus) -> np.ndarray:
    """[x] in the scaled Fourier cell with x - [x] in the scaled reciprocal lattice."""
    theta = torus.reduced_coordinates(x)
    theta = theta - np.floor(theta + 0.5)
    return theta @ torus.basis.reciprocal / torus.eps
