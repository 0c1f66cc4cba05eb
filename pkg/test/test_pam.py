import json
import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

import numpy as np
import pytest

from analyzer import convergence_order
from diffusion import JumpMeasure, semigroup_apply
from lattice import BravaisBasis, build_torus
from pam import (
    Nonlinearity,
    PamRun,
    macro_noise_from_micro,
    macro_run,
    mass,
    micro_noise_from_macro,
    micro_run_for,
    paracontrolled_decompose,
    rescale_micro_to_macro,
    solve,
    step_macro,
    step_micro,
    universality_gap,
    write_snapshots,
)
from spectral import Field, read_field
from stochastic import NoiseSpec, build_enhanced, sample_noise
from utils import ArgumentError, BlowUpError, ConfigurationError


SRW = JumpMeasure.simple_random_walk(2)


@pytest.fixture(scope="module")
def enhanced():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    return build_enhanced(sample_noise(NoiseSpec(seed=3), torus), SRW)


def quiet_run(torus, F=None, T=0.25, dt=1 / 64, **kwargs):
    return PamRun(torus, SRW, F or Nonlinearity.linear(1.0), Field.zeros(torus), 0.0, Field.delta(torus), T, dt, **kwargs)


def test_nonlinearity_shapes():
    F = Nonlinearity.logistic(2.0)
    assert F(1.0) == pytest.approx(1.0)
    assert F.derivative(1.0) == pytest.approx(0.0)
    assert F.scaled(2.0, 0.5) == pytest.approx(4.0 - 0.25 * 4.0)
    assert F.scaled_derivative(2.0, 0.5) == pytest.approx(2.0 - 2 * 0.25 * 2.0)
    assert F.f_prime_zero == 2.0
    assert F.second_derivative_bound == 2.0
    assert F.linearized() == Nonlinearity.linear(2.0)
    with pytest.raises(ConfigurationError) as err:
        Nonlinearity.polynomial([1.0, 0.0, 1.0])
    assert err.value.path == "nonlinearity.coeffs"


def test_run_validation():
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    with pytest.raises(ConfigurationError) as err:
        quiet_run(torus, T=0.1, dt=0.03)
    assert err.value.path == "pam.dt"
    with pytest.raises(ConfigurationError) as err:
        quiet_run(torus, T=0.25, dt=1 / 64, snapshot_every=3)
    assert err.value.path == "pam.snapshot_every"
    with pytest.raises(ConfigurationError):
        quiet_run(torus, scale="meso")


def test_drift_and_offset(enhanced):
    torus = enhanced.xi.torus
    F = Nonlinearity.logistic(1.5)
    run = macro_run(torus, SRW, F, enhanced, T=1 / 64, dt=1 / 1024)
    assert run.drift == pytest.approx(1.5 * enhanced.c_eps)
    assert run.offset == 0.0
    micro = micro_run_for(run)
    assert micro.drift == pytest.approx(1.5 * enhanced.c_eps * torus.eps**2)
    assert micro.offset == micro.drift
    assert micro.torus.N == 0 and micro.torus.M == torus.M
    assert micro.T == pytest.approx(run.T / torus.eps**2)
    bare = macro_run(torus, SRW, F, enhanced, T=1 / 64, dt=1 / 1024, renormalize=False)
    assert bare.drift == 0.0


def test_heat_flow_without_potential():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    run = quiet_run(torus, snapshot_every=4)
    snapshots = solve(run)
    assert [t for t, _ in snapshots] == pytest.approx([0.0, 0.0625, 0.125, 0.1875, 0.25])
    expected = semigroup_apply(run.u0, 0.25, SRW)
    np.testing.assert_allclose(snapshots[-1][1].values, expected.values, atol=1e-10)
    assert mass(snapshots[-1][1]) == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("F", [Nonlinearity.linear(1.0), Nonlinearity.logistic(1.0)])
def test_micro_and_macro_runs_agree(enhanced, F):
    torus = enhanced.xi.torus
    run = macro_run(torus, SRW, F, enhanced, T=1 / 64, dt=1 / 1024, snapshot_every=4)
    solve(run)
    micro = micro_run_for(run)
    solve(micro)
    rescaled = rescale_micro_to_macro(micro.snapshots, torus.eps)
    assert len(rescaled) == len(run.snapshots)
    for (t_macro, u), (t_micro, v) in zip(run.snapshots, rescaled):
        assert t_micro == pytest.approx(t_macro)
        assert v.torus == u.torus
        np.testing.assert_allclose(v.values, u.values, atol=1e-9 * np.max(np.abs(u.values)))


def test_noise_scaling_is_invertible(enhanced):
    eps, drift = enhanced.xi.torus.eps, 0.3
    eta = micro_noise_from_macro(enhanced.xi, eps, drift)
    assert eta.torus.N == 0
    back = macro_noise_from_micro(eta, eps, drift)
    assert back.torus == enhanced.xi.torus
    np.testing.assert_allclose(back.values, enhanced.xi.values, atol=1e-12)


def test_blow_up_is_reported():
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    run = PamRun(torus, SRW, Nonlinearity.linear(1.0), Field.constant(torus, 1e6), 0.0, Field.delta(torus), 1.0, 1.0)
    with pytest.raises(BlowUpError) as err:
        solve(run)
    assert err.value.step == 0


def test_step_functions_check_scale(enhanced):
    torus = enhanced.xi.torus
    run = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, T=1 / 64, dt=1 / 1024)
    with pytest.raises(ArgumentError):
        step_micro(run.u0, run)
    micro = micro_run_for(run)
    with pytest.raises(ArgumentError):
        step_macro(micro.u0, micro)
    with pytest.raises(ArgumentError):
        micro_run_for(micro)
    assert step_macro(run.u0, run).torus == torus


def test_rescaling_needs_dyadic_eps_and_unit_lattice():
    unit = build_torus(BravaisBasis.square(2), 0, 8)
    with pytest.raises(ArgumentError):
        rescale_micro_to_macro([(0.0, Field.zeros(unit))], 0.3)
    with pytest.raises(ArgumentError):
        rescale_micro_to_macro([(0.0, Field.zeros(build_torus(BravaisBasis.square(2), 1, 8)))], 0.5)


def test_micro_scaling_needs_two_dimensions():
    torus = build_torus(BravaisBasis.square(1), 2, 16)
    mu = JumpMeasure.simple_random_walk(1)
    noise = build_enhanced(sample_noise(NoiseSpec(seed=1), torus), mu)
    run = PamRun(torus, mu, Nonlinearity.linear(1.0), noise.xi, noise.c_eps, Field.delta(torus), 1 / 64, 1 / 1024)
    with pytest.raises(ConfigurationError):
        micro_run_for(run)


def test_universality_gap(enhanced):
    torus = enhanced.xi.torus
    kwargs = dict(T=1 / 64, dt=1 / 1024)
    linear = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, **kwargs)
    same = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, **kwargs)
    logistic = macro_run(torus, SRW, Nonlinearity.logistic(1.0), enhanced, **kwargs)
    assert universality_gap(same, linear) == 0.0
    assert universality_gap(logistic, linear) > 0.0
    with pytest.raises(ArgumentError):
        universality_gap(macro_run(torus, SRW, Nonlinearity.linear(2.0), enhanced, **kwargs), linear)


def test_decomposition_without_feedback_is_identity(enhanced):
    torus = enhanced.xi.torus
    run = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, T=1 / 64, dt=1 / 1024, snapshot_every=4)
    snapshots = solve(run)
    sharp, diagnostics = paracontrolled_decompose(snapshots, enhanced.X, 0.0)
    assert len(sharp) == len(diagnostics) == len(snapshots)
    for (_, u), (_, u_sharp) in zip(snapshots, sharp):
        np.testing.assert_array_equal(u_sharp.values, u.values)
    assert set(diagnostics[0]) == {"t", "sharp_norm", "u_norm", "ratio"}
    _, diagnostics = paracontrolled_decompose(snapshots, enhanced.X, 1.0)
    assert all(np.isfinite(d["ratio"]) and d["ratio"] > 0 for d in diagnostics)


def test_write_snapshots(tmp_path):
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    run = quiet_run(torus, T=0.125, dt=1 / 64, snapshot_every=4)
    solve(run)
    *paths, sidecar = write_snapshots(run, tmp_path / "run", role="macro")
    assert [p.name for p in paths] == ["snap_00000.bin", "snap_00001.bin", "snap_00002.bin"]
    assert sidecar.name == "run.json"
    field, header = read_field(paths[-1])
    assert header["t"] == pytest.approx(0.125) and header["role"] == "macro"
    np.testing.assert_array_equal(field.values, run.snapshots[-1][1].values)
    meta = json.loads(sidecar.read_text())
    assert meta["snapshots"] == [p.name for p in paths]
    assert meta["nonlinearity"] == {"kind": "linear", "coeffs": [1.0]}


def test_rescaling_checks_grid_and_times(enhanced):
    torus = enhanced.xi.torus
    run = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, T=1 / 64, dt=1 / 1024, snapshot_every=4)
    solve(run)
    micro = micro_run_for(run)
    solve(micro)
    rescaled = rescale_micro_to_macro(micro.snapshots, torus.eps, target=run)
    assert [t for t, _ in rescaled] == pytest.approx(run.times().tolist())
    with pytest.raises(ArgumentError, match="snapshot times"):
        rescale_micro_to_macro(micro.snapshots[::2], torus.eps, target=run)
    with pytest.raises(ArgumentError, match="macro grid"):
        rescale_micro_to_macro(micro.snapshots, torus.eps / 2, target=run)
    wider = build_torus(torus.basis, 0, 2 * torus.M)
    with pytest.raises(ArgumentError, match="macro grid"):
        rescale_micro_to_macro([(0.0, Field.zeros(wider))], torus.eps, target=run)
    with pytest.raises(ArgumentError, match="mix tori"):
        rescale_micro_to_macro([(0.0, micro.u0), (1.0, Field.zeros(wider))], torus.eps)


def test_universality_gap_checks_its_inputs(enhanced):
    torus = enhanced.xi.torus
    kwargs = dict(T=1 / 64, dt=1 / 1024)
    logistic = macro_run(torus, SRW, Nonlinearity.logistic(1.0), enhanced, **kwargs)
    linear = macro_run(torus, SRW, Nonlinearity.linear(1.0), enhanced, **kwargs)
    with pytest.raises(ArgumentError, match="linear F"):
        universality_gap(linear, logistic)
    skewed = JumpMeasure.from_pairs([((1, 0), 1.0), ((0, 1), 0.5)])
    with pytest.raises(ArgumentError, match="jump measure"):
        universality_gap(macro_run(torus, skewed, Nonlinearity.logistic(1.0), enhanced, **kwargs), linear)
    spread = Field.constant(torus, 1.0)
    with pytest.raises(ArgumentError, match="initial condition"):
        universality_gap(macro_run(torus, SRW, Nonlinearity.logistic(1.0), enhanced, u0=spread, **kwargs), linear)
    with pytest.raises(ArgumentError, match="horizon"):
        universality_gap(macro_run(torus, SRW, Nonlinearity.logistic(1.0), enhanced, T=1 / 32, dt=1 / 1024), linear)
    assert not logistic.solved


@pytest.mark.parametrize("a1,c", [(1.0, 0.8), (1.5, 2.0)])
def test_renormalized_closed_form_without_noise(a1, c):
    torus = build_torus(BravaisBasis.hexagonal(), 2, 16)
    run = PamRun(torus, SRW, Nonlinearity.linear(a1), Field.zeros(torus), c, Field.delta(torus), 0.25, 1 / 64)
    u = solve(run)[-1][1]
    expected = np.exp(-a1**2 * c * 0.25) * semigroup_apply(run.u0, 0.25, SRW).values
    np.testing.assert_allclose(u.values, expected, rtol=1e-10, atol=1e-12 * np.max(expected))
    assert mass(u) == pytest.approx(np.exp(-a1**2 * c * 0.25), rel=1e-10)


def test_exponential_euler_is_first_order(enhanced):
    torus = enhanced.xi.torus
    runs = [
        macro_run(torus, SRW, Nonlinearity.logistic(1.0), enhanced, T=1 / 16, dt=1 / 256 / 2**level)
        for level in range(4)
    ]
    finals = [solve(run)[-1][1].values for run in runs]
    errors = [float(np.sqrt(np.mean((a - b) ** 2))) for a, b in zip(finals, finals[1:])]
    assert 0.8 < convergence_order(errors) < 1.3


def test_renormalization_rescales_the_linear_mass(enhanced):
    torus = enhanced.xi.torus
    a1, T = 2.0, 1 / 16
    kwargs = dict(T=T, dt=1 / 1024)
    renormalized = macro_run(torus, SRW, Nonlinearity.linear(a1), enhanced, **kwargs)
    bare = macro_run(torus, SRW, Nonlinearity.linear(a1), enhanced, renormalize=False, **kwargs)
    ratio = mass(solve(bare)[-1][1]) / mass(solve(renormalized)[-1][1])
    assert ratio == pytest.approx(np.exp(a1**2 * enhanced.c_eps * T), rel=1e-2)


def test_universality_gap_shrinks_as_eps_halves():
    medians = []
    for N in (2, 3, 4):
        torus = build_torus(BravaisBasis.square(2), N, 32)
        gaps = []
        for seed in range(1, 8):
            noise = build_enhanced(sample_noise(NoiseSpec(seed=seed), torus), SRW)
            kwargs = dict(T=1 / 16, dt=1 / 1024)
            gaps.append(universality_gap(macro_run(torus, SRW, Nonlinearity.logistic(1.0), noise, **kwargs),
                                         macro_run(torus, SRW, Nonlinearity.linear(1.0), noise, **kwargs)))
        medians.append(float(np.median(gaps)))
    assert medians[0] > medians[1] > medians[2] > 0
