import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

import numpy as np
import pytest
from scipy.integrate import quad

from calculus import (
    BesovParams,
    Exponent,
    TimeKernel,
    Weight,
    besov_blocks,
    besov_norm,
    build_partition,
    commutator,
    commutator_ratio,
    holder_norm,
    lp_block,
    lp_blocks,
    lp_norm,
    modified_paraproduct,
    parabolic_norm,
    paraproduct,
    paraproduct_constant,
    partial_sum,
    resonant,
    smooth_step,
    time_smoothing_weights,
)
from lattice import BravaisBasis, build_torus
from spectral import Field, SmearProfile, extend
from utils import ArgumentError, ConfigurationError


def random_field(torus, seed=0):
    return Field(torus, np.random.default_rng(seed).normal(size=torus.shape))


def test_smooth_step_limits():
    np.testing.assert_array_equal(smooth_step(np.array([-1.0, 0.0, 1.0, 2.0])), [0.0, 0.0, 1.0, 1.0])
    assert smooth_step(0.5) == pytest.approx(0.5)


@pytest.mark.parametrize("basis", [BravaisBasis.square(2), BravaisBasis.hexagonal()])
@pytest.mark.parametrize("N", [1, 3])
def test_partition_of_unity(basis, N):
    torus = build_torus(basis, N, 32)
    partition = build_partition(torus)
    assert partition.j_max == N + 1
    blocks = partition.blocks
    np.testing.assert_allclose(blocks.sum(axis=0), 1.0, atol=1e-12)
    for a in range(partition.count):
        for b in range(a + 2, partition.count):
            assert not np.any(blocks[a] * blocks[b])
    partition.check()


def test_partition_does_not_grow_with_window():
    small = build_partition(build_torus(BravaisBasis.square(2), 2, 16))
    large = build_partition(build_torus(BravaisBasis.square(2), 2, 64))
    assert small.j_max == large.j_max


def test_partition_too_coarse():
    with pytest.raises(ConfigurationError) as err:
        build_partition(build_torus(BravaisBasis.square(2), 0, 8), radius=2.0)
    assert err.value.path == "partition.radius"


def test_block_index_range():
    partition = build_partition(build_torus(BravaisBasis.square(2), 2, 16))
    partition.block(-1)
    partition.block(partition.j_max)
    with pytest.raises(ArgumentError):
        partition.block(partition.j_max + 1)
    with pytest.raises(ArgumentError):
        partition.block(-2)


def test_blocks_reconstruct_the_field():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 32)
    f = random_field(torus)
    np.testing.assert_allclose(lp_blocks(f).sum(axis=0), f.values, atol=1e-10)
    partition = build_partition(torus)
    np.testing.assert_allclose(
        partial_sum(f, partition.j_max).values + lp_block(f, partition.j_max).values, f.values, atol=1e-10
    )


def test_bony_decomposition_is_exact():
    torus = build_torus(BravaisBasis.square(2), 3, 32)
    for seed in range(10):
        f, g = random_field(torus, 2 * seed), random_field(torus, 2 * seed + 1)
        bony = paraproduct(f, g) + paraproduct(g, f) + resonant(f, g)
        scale = np.max(np.abs(f.values)) * np.max(np.abs(g.values))
        assert np.max(np.abs(f.values * g.values - bony.values)) < 1e-10 * scale


def test_resonant_is_symmetric():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 16)
    f, g = random_field(torus, 1), random_field(torus, 2)
    np.testing.assert_allclose(resonant(f, g).values, resonant(g, f).values, atol=1e-12)


def test_constant_paraproduct_drops_two_lowest_blocks():
    torus = build_torus(BravaisBasis.square(2), 3, 32)
    g = random_field(torus)
    expected = 2.0 * (g.values - lp_block(g, -1).values - lp_block(g, 0).values)
    np.testing.assert_allclose(paraproduct(Field.constant(torus, 2.0), g).values, expected, atol=1e-10)


def test_commutator_definition():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f1, f2, f3 = (random_field(torus, s) for s in range(3))
    expected = resonant(paraproduct(f1, f2), f3).values - f1.values * resonant(f2, f3).values
    np.testing.assert_allclose(commutator(f1, f2, f3).values, expected, atol=1e-12)


def test_besov_norm_of_constant():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    c = Field.constant(torus, 3.0)
    assert holder_norm(c, 0.5) == pytest.approx(3.0 * 2**-0.5, rel=1e-10)
    blocks = besov_blocks(c, BesovParams(0.5))
    np.testing.assert_allclose(blocks[1:], 0.0, atol=1e-12)
    assert besov_norm(c, BesovParams(0.5, Exponent.INF, 1.0)) == pytest.approx(3.0 * 2**-0.5, rel=1e-9)


def test_lp_norm_of_constant():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 8)
    values = np.full(torus.shape, 2.0)
    assert lp_norm(values, torus, 2.0) == pytest.approx(2.0 * np.sqrt(torus.window_volume))
    assert lp_norm(values, torus, Exponent.INF) == pytest.approx(2.0)


def test_weights():
    assert Weight.polynomial(0.5)(np.zeros(2)) == pytest.approx(1.0)
    assert Weight.polynomial(1.0)(np.array([3.0, 0.0])) == pytest.approx(0.25)
    assert Weight.subexponential(0.5, -1.0)(np.array([0.0, 0.0])) == pytest.approx(np.e)
    with pytest.raises(ConfigurationError):
        Weight.polynomial(-1.0)
    with pytest.raises(ConfigurationError):
        Weight.subexponential(1.5, -1.0)


def test_besov_exponent_validation():
    with pytest.raises(ConfigurationError):
        BesovParams(0.5, p=0.5)


def test_time_kernel_tables():
    kernel = TimeKernel()
    assert kernel.cdf(1.0) == pytest.approx(0.0)
    assert kernel.cdf(2.0) == pytest.approx(1.0)
    assert kernel.cdf(1.5) == pytest.approx(0.5, abs=1e-6)
    assert kernel.first_moment(2.0) == pytest.approx(1.5, abs=1e-6)


@pytest.mark.parametrize("clamp", [True, False])
def test_time_weights_mass(clamp):
    times = np.linspace(0.0, 1.0, 33)
    kernel = TimeKernel()
    w = time_smoothing_weights(times, 32, 2, kernel, clamp_initial=clamp)
    # at i=2 the kernel mass sits in [t - 2/16, t - 1/16], inside the grid
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[0] == pytest.approx(0.0)


def test_modified_paraproduct_of_time_constant_input():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f, g = random_field(torus, 1), random_field(torus, 2)
    times = np.linspace(0.0, 0.5, 6)
    out = modified_paraproduct([f] * 6, [g] * 6, times, 5)
    np.testing.assert_allclose(out.values, paraproduct(f, g).values, atol=1e-10)


def test_modified_paraproduct_with_zero_high_part():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f = random_field(torus)
    times = np.linspace(0.0, 0.3, 4)
    out = modified_paraproduct([f] * 4, [Field.zeros(torus)] * 4, times, 3)
    np.testing.assert_array_equal(out.values, 0.0)


def test_non_uniform_time_grid():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f = random_field(torus)
    with pytest.raises(ArgumentError):
        modified_paraproduct([f] * 3, [f] * 3, [0.0, 0.1, 0.3], 2)


def test_parabolic_norm_of_time_constant_field():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f = random_field(torus)
    times = np.linspace(0.0, 1.0, 5)
    expected = np.max(np.abs(f.values)) + holder_norm(f, 0.5)
    assert parabolic_norm([f] * 5, times, 0.0, 0.5) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ArgumentError):
        parabolic_norm([f] * 5, times, 1.0, 0.5)


def test_extension_commutes_with_low_blocks():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    f = random_field(torus, 21)
    extended = extend(f, SmearProfile())
    coarse, fine = build_partition(torus), build_partition(extended.torus)
    for j in range(-1, coarse.j_max - 1):
        np.testing.assert_allclose(
            lp_block(extended, j, fine).values, extend(lp_block(f, j, coarse), SmearProfile()).values, atol=1e-12
        )


def test_besov_norm_is_homogeneous():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 16)
    f = random_field(torus, 4)
    params = BesovParams(0.3, 2.0, 2.0, Weight.polynomial(0.5))
    base = besov_norm(f, params)
    for scale in (-3.0, 0.5):
        assert besov_norm(f.like(scale * f.values), params) == pytest.approx(abs(scale) * base, rel=1e-12)


def test_besov_norm_grows_with_alpha():
    torus = build_torus(BravaisBasis.square(2), 3, 32)
    f = random_field(torus, 5)
    high = f - partial_sum(f, 1)
    alphas = [-1.0, -0.5, 0.0, 0.5, 1.0]
    summed = [besov_norm(high, BesovParams(a, Exponent.INF, 2.0)) for a in alphas]
    sup = [holder_norm(high, a) for a in alphas]
    assert all(a < b for a, b in zip(summed, summed[1:]))
    assert all(a <= b for a, b in zip(sup, sup[1:]))


def test_paraproduct_constant_is_stable_across_eps():
    medians = []
    for N in (2, 3, 4):
        torus = build_torus(BravaisBasis.square(2), N, 32)
        partition = build_partition(torus)
        j_top = partition.j_max
        constants = [
            paraproduct_constant(
                lp_block(random_field(torus, 2 * k), j_top - 3, partition),
                lp_block(random_field(torus, 2 * k + 1), j_top - 1, partition),
                0.5, -0.5, partition,
            )
            for k in range(6)
        ]
        medians.append(float(np.median(constants)))
    assert min(medians) > 0
    assert max(medians) / min(medians) < 1.2


@pytest.mark.parametrize("N", [3, 4])
def test_commutator_ratio_stays_below_one(N):
    torus = build_torus(BravaisBasis.square(2), N, 32)
    partition = build_partition(torus)
    top = partition.j_max - 1
    f1 = lp_block(random_field(torus, 1), 0, partition)
    f2 = lp_block(random_field(torus, 2), top, partition)
    f3 = lp_block(random_field(torus, 3), top, partition)
    assert 0 <= commutator_ratio(f1, f2, f3, 0.5, -0.7, partition) < 1


def test_modified_paraproduct_matches_quadrature_for_one_block_pair():
    torus = build_torus(BravaisBasis.square(2), 2, 16)
    times = np.linspace(0.0, 0.5, 41)
    t_idx, t = 8, 0.1
    kernel = TimeKernel()

    def a(s):
        return 1.0 + 2.0 * s

    # constant in space: block -1 only; the mode (4, 0) sits inside block 2
    F = [Field.constant(torus, a(s)) for s in times]
    g = Field.mode(torus, (4, 0))
    out = modified_paraproduct(F, [g] * len(times), times, t_idx, kernel)

    lam = 4.0**2
    smoothed, _ = quad(
        lambda v: lam * float(kernel.density(np.array([lam * v]))[0]) * a(max(t - v, 0.0)),
        kernel.start / lam,
        kernel.stop / lam,
        points=[t],
        epsabs=1e-12,
    )
    np.testing.assert_allclose(out.values, smoothed * g.values, atol=1e-6)
