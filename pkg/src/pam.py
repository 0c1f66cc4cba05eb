"""Micro population model and macro renormalized PAM on the lattice, the scaling map between them
and the pathwise comparison with the linear model.

Both solvers integrate ∂u = L^ε_μ u + Fs(u)(ζ + offset) - drift·(Fs(u) - F'(0)u) - F'(0)·drift·u
by exponential Euler; the last term is constant-coefficient and goes into the propagator.
Macro: Fs = F^ε, ζ = ξ^ε, offset = 0, drift = F'(0)c. Micro: Fs = F, ζ = η^ε, offset = drift = F'(0)cε².
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from calculus import BesovParams, Exponent, Weight, besov_norm, lp_norm, modified_paraproduct
from diffusion import JumpMeasure, etd_propagators
from lattice import BravaisTorus, build_torus
from spectral import Field, require_same_torus, write_field
from stochastic import EnhancedNoise
from utils import ArgumentError, BlowUpError, ConfigurationError


logger = logging.getLogger(__name__)

STABILITY_LIMIT = 0.5
MAX_HALVINGS = 12
PAM_DIMENSION = 2


@dataclass(frozen=True)
class Nonlinearity:
    """F(u) = Σ_k coeffs[k-1] u^k, degree at most two so that F'' stays bounded."""

    kind: str
    coeffs: tuple[float, ...]

    def __post_init__(self):
        if len(self.coeffs) > 2:
            raise ConfigurationError(f"degree must be <= 2, got {len(self.coeffs)}", path="nonlinearity.coeffs")
        if not all(math.isfinite(c) for c in self.coeffs):
            raise ConfigurationError("coefficients must be finite", path="nonlinearity.coeffs")

    @classmethod
    def linear(cls, c: float = 1.0) -> "Nonlinearity":
        return cls("linear", (float(c),))

    @classmethod
    def logistic(cls, C: float) -> "Nonlinearity":
        """F(u) = u(C - u)."""
        return cls("logistic", (float(C), -1.0))

    @classmethod
    def polynomial(cls, coeffs) -> "Nonlinearity":
        return cls("polynomial", tuple(float(c) for c in coeffs))

    @property
    def _a(self) -> tuple[float, float]:
        padded = tuple(self.coeffs) + (0.0, 0.0)
        return padded[0], padded[1]

    def __call__(self, u):
        a1, a2 = self._a
        return a1 * u + a2 * u * u

    def derivative(self, u):
        a1, a2 = self._a
        return a1 + 2.0 * a2 * u

    def scaled(self, u, eps: float):
        """F^ε(u) = ε^{-2} F(ε² u)."""
        a1, a2 = self._a
        return a1 * u + a2 * eps**2 * u * u

    def scaled_derivative(self, u, eps: float):
        a1, a2 = self._a
        return a1 + 2.0 * a2 * eps**2 * u

    @property
    def f_prime_zero(self) -> float:
        return self._a[0]

    @property
    def second_derivative_bound(self) -> float:
        return abs(2.0 * self._a[1])

    def linearized(self) -> "Nonlinearity":
        return Nonlinearity.linear(self.f_prime_zero)


@dataclass(eq=False)
class PamRun:
    torus: BravaisTorus
    mu: JumpMeasure
    F: Nonlinearity
    potential: Field
    c_eps: float
    u0: Field
    T: float
    dt: float
    scale: str = "macro"
    eps: float = 1.0
    renormalize: bool = True
    snapshot_every: int = 1
    noise: EnhancedNoise | None = None
    snapshots: list[tuple[float, Field]] = field(default_factory=list)

    def __post_init__(self):
        if self.scale not in ("macro", "micro"):
            raise ConfigurationError(f"scale must be macro or micro, got {self.scale!r}", path="pam.scale")
        require_same_torus(self.potential, self.u0)
        if self.potential.torus != self.torus:
            raise ConfigurationError("potential lives on another torus", path="pam")
        if not (self.T > 0 and self.dt > 0):
            raise ConfigurationError(f"T and dt must be > 0, got T={self.T!r} dt={self.dt!r}", path="pam.dt")
        if abs(self.T / self.dt - self.steps) > 1e-9 * self.steps:
            raise ConfigurationError(f"T={self.T!r} is not a multiple of dt={self.dt!r}", path="pam.dt")
        if self.snapshot_every < 1 or self.steps % self.snapshot_every:
            raise ConfigurationError(
                f"snapshot_every={self.snapshot_every!r} must divide the {self.steps} steps", path="pam.snapshot_every"
            )

    @property
    def steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    @property
    def drift(self) -> float:
        if not self.renormalize:
            return 0.0
        a1 = self.F.f_prime_zero
        return a1 * self.c_eps * (self.eps**2 if self.scale == "micro" else 1.0)

    @property
    def offset(self) -> float:
        return self.drift if self.scale == "micro" else 0.0

    @property
    def solved(self) -> bool:
        return bool(self.snapshots) and self.snapshots[-1][0] >= self.T * (1 - 1e-12)

    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.snapshots])

    def fields(self) -> list[Field]:
        return [u for _, u in self.snapshots]


def macro_run(
    torus: BravaisTorus,
    mu: JumpMeasure,
    F: Nonlinearity,
    noise: EnhancedNoise,
    T: float,
    dt: float,
    u0: Field | None = None,
    renormalize: bool = True,
    snapshot_every: int = 1,
) -> PamRun:
    """Macro run; the initial condition defaults to |𝒢^ε|^{-1}·1_{x=0}."""
    return PamRun(
        torus, mu, F, noise.xi, noise.c_eps, u0 if u0 is not None else Field.delta(torus), T, dt,
        scale="macro", eps=torus.eps, renormalize=renormalize, snapshot_every=snapshot_every, noise=noise,
    )


def micro_noise_from_macro(xi: Field, eps: float, drift: float) -> Field:
    """η^ε(k) = ε²ξ^ε(εk) - F'(0)c ε², on the unit-scale torus with the same index set."""
    micro = build_torus(xi.torus.basis, 0, xi.torus.M)
    return Field(micro, eps**2 * xi.values - drift)


def macro_noise_from_micro(eta: Field, eps: float, drift: float) -> Field:
    """ξ^ε(x) = ε^{-2}(η^ε(x/ε) + F'(0)c ε²)."""
    macro = build_torus(eta.torus.basis, _scale_exponent(eps), eta.torus.M)
    return Field(macro, (eta.values + drift) / eps**2)


def _scale_exponent(eps: float) -> int:
    N = -math.log2(eps)
    if not (eps <= 1 and N == int(N)):
        raise ArgumentError(f"eps must be 2^-N with N >= 0, got {eps!r}")
    return int(N)


def micro_run_for(run: PamRun) -> PamRun:
    """The micro run whose rescaling is `run`: same noise realization, times τ = t/ε²."""
    if run.scale != "macro":
        raise ArgumentError("micro_run_for expects a macro run")
    if run.torus.d != PAM_DIMENSION:
        raise ConfigurationError("the micro/macro scaling is set up for d=2", path="lattice.basis")
    eps = run.torus.eps
    micro = build_torus(run.torus.basis, 0, run.torus.M)
    drift = run.F.f_prime_zero * run.c_eps * eps**2 if run.renormalize else 0.0
    eta = micro_noise_from_macro(run.potential, eps, drift)
    v0 = Field(micro, eps**2 * run.u0.values)
    return PamRun(
        micro, run.mu, run.F, eta, run.c_eps, v0, run.T / eps**2, run.dt / eps**2,
        scale="micro", eps=eps, renormalize=run.renormalize, snapshot_every=run.snapshot_every,
    )


def _reaction(u: np.ndarray, run: PamRun) -> tuple[np.ndarray, float]:
    """Explicit reaction and the largest diagonal entry of its Jacobian."""
    zeta = run.potential.values + run.offset
    a1 = run.F.f_prime_zero
    if run.scale == "macro":
        fs, dfs = run.F.scaled(u, run.eps), run.F.scaled_derivative(u, run.eps)
    else:
        fs, dfs = run.F(u), run.F.derivative(u)
    reaction = fs * zeta - run.drift * (fs - a1 * u)
    jacobian = dfs * zeta - run.drift * (dfs - a1)
    return reaction, float(np.max(np.abs(jacobian), initial=0.0))


def _substep(u: np.ndarray, run: PamRun, h: float) -> np.ndarray:
    decay, source = etd_propagators(run.mu, run.torus, h, run.F.f_prime_zero * run.drift)
    reaction, _ = _reaction(u, run)
    spec = np.fft.fftn(u) * decay + np.fft.fftn(reaction) * source
    return np.fft.ifftn(spec).real


def _advance(u: Field, run: PamRun, step: int) -> Field:
    t = step * run.dt
    _, rate = _reaction(u.values, run)
    halvings = 0
    while rate * run.dt / 2**halvings > STABILITY_LIMIT:
        halvings += 1
        if halvings > MAX_HALVINGS:
            logger.warning("step %d: stability needs more than %d halvings", step, MAX_HALVINGS)
            raise BlowUpError(step, t, f"reaction rate {rate:.3e} exceeds the step budget")
    if halvings:
        logger.debug("step %d: dt halved %d times", step, halvings)
    h = run.dt / 2**halvings
    values = u.values
    for _ in range(2**halvings):
        values = _substep(values, run, h)
        if not np.all(np.isfinite(values)):
            raise BlowUpError(step, t)
    return Field(run.torus, values)


def step_macro(u: Field, run: PamRun, step: int = 0) -> Field:
    if run.scale != "macro":
        raise ArgumentError("step_macro needs a macro run")
    return _advance(u, run, step)


def step_micro(v: Field, run: PamRun, step: int = 0) -> Field:
    if run.scale != "micro":
        raise ArgumentError("step_micro needs a micro run")
    return _advance(v, run, step)


def solve(run: PamRun) -> list[tuple[float, Field]]:
    """Advance u0 to T; snapshots every `snapshot_every` steps, including t=0 and t=T."""
    u = run.u0
    run.snapshots = [(0.0, u)]
    for n in range(run.steps):
        u = _advance(u, run, n)
        if (n + 1) % run.snapshot_every == 0:
            run.snapshots.append(((n + 1) * run.dt, u))
    logger.debug("%s run eps=%g finished %d steps", run.scale, run.eps, run.steps)
    return run.snapshots


def rescale_micro_to_macro(
    v_snapshots: list[tuple[float, Field]], eps: float, target: PamRun | None = None
) -> list[tuple[float, Field]]:
    """u^ε(t, x) = ε^{-2} v^ε(ε^{-2}t, ε^{-1}x); the index sets coincide.

    With a solved macro `target` the rescaled grid and snapshot times must match its own.
    """
    N = _scale_exponent(eps)
    if not v_snapshots:
        return []
    micro = v_snapshots[0][1].torus
    if micro.N != 0:
        raise ArgumentError(f"micro snapshots must live on the unit lattice, got N={micro.N}")
    macro = build_torus(micro.basis, N, micro.M)
    out = []
    for tau, v in v_snapshots:
        if v.torus != micro:
            raise ArgumentError(f"micro snapshots mix tori: {v.torus!r} vs {micro!r}")
        out.append((tau * eps**2, Field(macro, v.values / eps**2)))
    if target is not None:
        if target.torus != macro:
            raise ArgumentError(f"rescaled grid {macro!r} does not match the macro grid {target.torus!r}")
        times, expected = np.array([t for t, _ in out]), target.times()
        if times.shape != expected.shape or not np.allclose(times, expected, rtol=1e-12, atol=1e-12 * target.T):
            raise ArgumentError(f"snapshot times {times.tolist()} do not match the macro times {expected.tolist()}")
    return out


def mass(u: Field) -> float:
    return float(lp_norm(u.values, u.torus, 1.0))


def universality_gap(run_nonlinear: PamRun, run_linear: PamRun, kappa: float = 0.06) -> float:
    """‖u_nl(T) - u_lin(T)‖ / ‖u_lin(T)‖ in L²(𝒢^ε) with the polynomial weight p^κ.

    Both runs must share torus, generator, initial condition, horizon and noise; the second one must be linear.
    """
    require_same_torus(run_nonlinear.potential, run_linear.potential)
    if run_linear.F.second_derivative_bound != 0.0:
        raise ArgumentError(f"the comparison run must have a linear F, got {run_linear.F.kind} {run_linear.F.coeffs!r}")
    if run_nonlinear.F.f_prime_zero != run_linear.F.f_prime_zero:
        raise ArgumentError("runs must share F'(0)")
    if run_nonlinear.mu != run_linear.mu:
        raise ArgumentError("runs must share the jump measure")
    if (run_nonlinear.T, run_nonlinear.scale) != (run_linear.T, run_linear.scale):
        raise ArgumentError("runs must share the horizon and the scale")
    if not np.array_equal(run_nonlinear.u0.values, run_linear.u0.values):
        raise ArgumentError("runs must share the initial condition")
    if not np.array_equal(run_nonlinear.potential.values, run_linear.potential.values):
        raise ArgumentError("runs must share the noise realization")
    for run in (run_nonlinear, run_linear):
        if not run.solved:
            solve(run)
    weight = Weight.polynomial(kappa)
    u_nl = run_nonlinear.snapshots[-1][1].values
    u_lin = run_linear.snapshots[-1][1].values
    torus = run_linear.torus
    return float(lp_norm(u_nl - u_lin, torus, 2.0, weight)) / float(lp_norm(u_lin, torus, 2.0, weight))


def paracontrolled_decompose(
    u_snapshots: list[tuple[float, Field]], X: Field, f_prime_zero: float, alpha: float = 0.7, kappa: float = 0.06
) -> tuple[list[tuple[float, Field]], list[dict]]:
    """u♯ = u - (F'(0)u) ≺≺ X with the ratio ‖u♯‖_{𝒞^{2α}} / ‖u‖_{𝒞^α} per snapshot."""
    times = np.array([t for t, _ in u_snapshots])
    low = [f_prime_zero * u for _, u in u_snapshots]
    high = [X] * len(u_snapshots)
    weight = Weight.polynomial(kappa)
    sharp, diagnostics = [], []
    for k, (t, u) in enumerate(u_snapshots):
        u_sharp = u - modified_paraproduct(low, high, times, k)
        sharp.append((t, u_sharp))
        sharp_norm = besov_norm(u_sharp, BesovParams(2 * alpha, Exponent.INF, Exponent.INF, weight))
        u_norm = besov_norm(u, BesovParams(alpha, Exponent.INF, Exponent.INF, weight))
        diagnostics.append(
            {"t": float(t), "sharp_norm": sharp_norm, "u_norm": u_norm, "ratio": sharp_norm / u_norm if u_norm else 0.0}
        )
    return sharp, diagnostics


def write_snapshots(run: PamRun, directory, role: str | None = None) -> list[Path]:
    """Field files snap_00000.bin... with header extras t, eps, role, plus a run.json sidecar."""
    role = role or run.scale
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [
        write_field(directory / f"snap_{k:05d}.bin", u, t=float(t), eps=run.eps, role=role)
        for k, (t, u) in enumerate(run.snapshots)
    ]
    meta = {
        "role": role,
        "eps": run.eps,
        "M": run.torus.M,
        "N": run.torus.N,
        "T": run.T,
        "dt": run.dt,
        "nonlinearity": {"kind": run.F.kind, "coeffs": list(run.F.coeffs)},
        "c_eps": run.c_eps,
        "renormalize": run.renormalize,
        "atoms": [[list(g), k] for g, k in run.mu.atoms],
        "snapshots": [p.name for p in paths],
    }
    sidecar = directory / "run.json"
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return paths + [sidecar]
