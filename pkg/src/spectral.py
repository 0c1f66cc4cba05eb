"""Lattice Fourier transform pair on the torus, Fourier multipliers, convolution and the
band-limited extension 𝓔^ε onto dyadically refined tori.

Spectral arrays are stored in FFT order over the mode numbers m (see BravaisTorus.mode_numbers).
Lattice sites sit at ε·Σ(k_i - M/2)a_i, so the transform picks up the phase (-1)^{Σm} with respect
to numpy's FFT.
"""

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Union

import numpy as np

from lattice import BravaisBasis, BravaisTorus, build_torus
from utils import ConfigurationError, NumericError, ShapeError


logger = logging.getLogger(__name__)

IMAG_TOLERANCE = 1e-10


@dataclass(eq=False)
class Field:
    torus: BravaisTorus
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.torus.shape:
            raise ShapeError(f"field shape {self.values.shape} does not match torus {self.torus.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"field has {int(np.count_nonzero(~np.isfinite(self.values)))} non-finite values")

    @classmethod
    def zeros(cls, torus: BravaisTorus) -> "Field":
        return cls(torus, np.zeros(torus.shape))

    @classmethod
    def constant(cls, torus: BravaisTorus, c: float) -> "Field":
        return cls(torus, np.full(torus.shape, float(c)))

    @classmethod
    def delta(cls, torus: BravaisTorus) -> "Field":
        """|𝒢^ε|^{-1}·1_{x=0}; its transform is identically 1."""
        values = np.zeros(torus.shape)
        values[torus.origin_index] = 1.0 / torus.volume
        return cls(torus, values)

    @classmethod
    def mode(cls, torus: BravaisTorus, m) -> "Field":
        """Real mode cos(2π x·ν_m) sampled on the torus."""
        k = np.stack(np.meshgrid(*[np.arange(torus.M)] * torus.d, indexing="ij"), axis=-1) - torus.M // 2
        return cls(torus, np.cos(2 * np.pi * (k @ np.asarray(m, dtype=float)) / torus.M))

    def mean(self) -> float:
        return float(self.values.mean())

    def like(self, values) -> "Field":
        return Field(self.torus, values)

    def _other(self, other):
        if isinstance(other, Field):
            require_same_torus(self, other)
            return other.values
        return other

    def __add__(self, other):
        return self.like(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.like(self.values - self._other(other))

    def __rsub__(self, other):
        return self.like(self._other(other) - self.values)

    def __mul__(self, other):
        return self.like(self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)


@dataclass(eq=False)
class SpectralField:
    torus: BravaisTorus
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.torus.shape:
            raise ShapeError(f"spectrum shape {self.values.shape} does not match torus {self.torus.shape}")


def require_same_torus(*fields) -> BravaisTorus:
    torus = fields[0].torus
    for f in fields[1:]:
        if f.torus != torus:
            raise ShapeError(f"torus mismatch: {f.torus!r} vs {torus!r}")
    return torus


@lru_cache(maxsize=64)
def _phase(torus: BravaisTorus) -> np.ndarray:
    parity = torus.mode_numbers().sum(axis=-1) % 2
    return np.where(parity == 0, 1.0, -1.0)


def _axes(torus: BravaisTorus) -> tuple[int, ...]:
    return tuple(range(-torus.d, 0))


def forward(f: Field) -> SpectralField:
    torus = f.torus
    values = torus.volume * _phase(torus) * np.fft.fftn(f.values)
    return SpectralField(torus, values)


def forward_batch(fields) -> np.ndarray:
    """Transforms of a sequence of fields on one torus, stacked along axis 0."""
    torus = require_same_torus(*fields)
    stack = np.stack([f.values for f in fields])
    return torus.volume * _phase(torus) * np.fft.fftn(stack, axes=_axes(torus))


def inverse_values(g: SpectralField) -> np.ndarray:
    """Complex samples of 𝓕^{-1}g on the torus (rectangle rule over the dual grid).

    This is the inverse for spectra without Hermitian symmetry: a single mode 1_{y=ν} comes back as
    the complex exponential dual_cell·e^{2πi x·ν}. `inverse` insists on a real result.
    """
    torus = g.torus
    return np.fft.ifftn(_phase(torus) * g.values) / torus.volume


def inverse(g: SpectralField) -> Field:
    values = inverse_values(g)
    return Field(g.torus, _real_part(values, "inverse transform"))


def _real_part(values: np.ndarray, what: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(values.real), initial=0.0)))
    residue = float(np.max(np.abs(values.imag), initial=0.0))
    if residue > IMAG_TOLERANCE * scale:
        raise NumericError(f"{what} is not real: imaginary residue {residue:.3e}")
    return values.real


Multiplier = Union[Callable[[np.ndarray], np.ndarray], np.ndarray]


def multiplier_table(m: Multiplier, torus: BravaisTorus) -> np.ndarray:
    """Values of a frequency multiplier on the dual grid (FFT order)."""
    freqs = torus.frequencies()
    table = np.asarray(m(freqs) if callable(m) else m)
    if table.shape != torus.shape:
        table = np.broadcast_to(table, torus.shape)
    bad = ~np.isfinite(table)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"multiplier is not finite at frequency {freqs[idx].tolist()!r}")
    return table


def filter_values(values: np.ndarray, table: np.ndarray, torus: BravaisTorus) -> np.ndarray:
    """inverse(table·forward(values)) for real arrays, batched over leading axes.

    The phase and the |𝒢^ε| normalization cancel between the two transforms.
    """
    axes = _axes(torus)
    out = np.fft.ifftn(np.fft.fftn(values, axes=axes) * table, axes=axes)
    return _real_part(out, "multiplier output")


def apply_multiplier(f: Field, m: Multiplier) -> Field:
    table = multiplier_table(m, f.torus)
    return f.like(filter_values(f.values, table, f.torus))


def convolve(f: Field, g: Field) -> Field:
    """f ∗ g (x) = Σ_k |𝒢^ε| f(k) g(x - k) on the torus."""
    require_same_torus(f, g)
    fg = SpectralField(f.torus, forward(f).values * forward(g).values)
    return inverse(fg)


@dataclass(frozen=True)
class SmearProfile:
    """Per-axis ψ built from exp(-1/(1-(t/R)²)) normalized over integer translates.

    Supported in |θ_i| < R, identically one for |θ_i| <= 1 - R; R must lie in (1/2, 1).
    """

    radius: float = 0.75

    @property
    def plateau(self) -> float:
        return 1.0 - self.radius

    def _bump(self, t: np.ndarray) -> np.ndarray:
        s = np.asarray(t, dtype=float) / self.radius
        out = np.zeros_like(s)
        inside = np.abs(s) < 1
        out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
        return out

    def axis_values(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        total = sum(self._bump(t - n) for n in range(-2, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self._bump(t) > 0, self._bump(t) / total, 0.0)

    def values(self, theta) -> np.ndarray:
        """ψ at reduced coordinates θ (last axis d)."""
        return np.prod(self.axis_values(theta), axis=-1)

    def validate(self, tol: float = 1e-8) -> None:
        t = np.linspace(-1.5, 1.5, 6001)
        h = self.axis_values(t)
        partition = sum(self.axis_values(t - n) for n in range(-3, 4))
        if not np.all(np.isfinite(partition)) or np.max(np.abs(partition - 1.0)) > tol:
            raise ConfigurationError(f"smear radius {self.radius!r} does not give a partition of unity", path="smear.radius")
        if self.plateau <= 0 or np.max(np.abs(h[np.abs(t) <= self.plateau] - 1.0)) > tol:
            raise ConfigurationError(f"smear radius {self.radius!r} leaves no plateau", path="smear.radius")
        if np.max(np.abs(h[np.abs(t) >= 1.0]), initial=0.0) > tol:
            raise ConfigurationError(f"smear radius {self.radius!r} reaches the next period", path="smear.radius")


def extend(f: Field, smear: SmearProfile, r: int = 1) -> Field:
    """𝓔^ε f sampled on the torus refined r times (same window, ε·2^-r)."""
    if r < 1:
        raise ConfigurationError(f"refinement must be >= 1, got {r!r}", path="extend.r")
    smear.validate()
    coarse = f.torus
    fine = coarse.refine(r)
    f_hat = forward(f).values
    m_fine = fine.mode_numbers()
    periodic = f_hat[tuple(np.moveaxis(m_fine % coarse.M, -1, 0))]
    psi = smear.values(m_fine / coarse.M)
    return inverse(SpectralField(fine, psi * periodic))


# field file format

def write_field(path, f: Field, **extras) -> Path:
    torus = f.torus
    header = {
        "d": torus.d,
        "M": torus.M,
        "N": torus.N,
        "basis": [list(v) for v in torus.basis.vectors],
        "kind": "field",
        "dtype": "f64le",
    }
    header.update(extras)
    path = Path(path)
    with open(path, "wb") as out:
        out.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        out.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C"))
    return path


def read_field(path) -> tuple[Field, dict]:
    with open(path, "rb") as src:
        header = json.loads(src.readline().decode("utf-8"))
        payload = src.read()
    if header.get("kind") != "field" or header.get("dtype") != "f64le":
        raise ConfigurationError(f"not a field file: {path!s}")
    torus = build_torus(BravaisBasis.from_vectors(header["basis"]), header["N"], header["M"])
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != torus.size:
        raise ShapeError(f"{path!s}: expected {torus.size} samples, found {values.size}")
    return Field(torus, values.reshape(torus.shape).astype(float)), header
