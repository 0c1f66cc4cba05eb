import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

import numpy as np
import pytest

from lattice import BravaisBasis, build_torus
from spectral import (
    Field,
    SmearProfile,
    SpectralField,
    apply_multiplier,
    convolve,
    extend,
    forward,
    forward_batch,
    inverse,
    inverse_values,
    read_field,
    write_field,
)
from utils import ConfigurationError, NumericError, ShapeError


def random_field(torus, seed=0):
    return Field(torus, np.random.default_rng(seed).normal(size=torus.shape))


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("M", [8, 64])
@pytest.mark.parametrize("N", [0, 3])
def test_parseval_and_round_trip(d, M, N):
    torus = build_torus(BravaisBasis.square(d), N, M)
    f = random_field(torus, seed=d * 100 + M + N)
    f_hat = forward(f)
    energy = torus.volume * np.sum(f.values**2)
    dual_energy = torus.dual_cell * np.sum(np.abs(f_hat.values) ** 2)
    assert abs(energy - dual_energy) <= 1e-10 * energy
    np.testing.assert_allclose(inverse(f_hat).values, f.values, atol=1e-10 * np.max(np.abs(f.values)))


def test_delta_has_flat_spectrum():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 16)
    np.testing.assert_allclose(forward(Field.delta(torus)).values, 1.0, atol=1e-12)


def test_constant_lives_on_zero_mode():
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    spectrum = forward(Field.constant(torus, 3.0)).values
    assert spectrum[0, 0] == pytest.approx(3.0 * torus.window_volume)
    spectrum[0, 0] = 0.0
    np.testing.assert_allclose(spectrum, 0.0, atol=1e-12)


def test_mode_spectrum_sits_at_plus_minus_m():
    torus = build_torus(BravaisBasis.square(2), 0, 16)
    spectrum = np.abs(forward(Field.mode(torus, (2, -3))).values)
    peak = 0.5 * torus.window_volume
    assert spectrum[2, -3] == pytest.approx(peak)
    assert spectrum[-2, 3] == pytest.approx(peak)
    assert np.sum(spectrum > 1e-9) == 2


def test_batch_transform_matches_single():
    torus = build_torus(BravaisBasis.square(2), 2, 8)
    fields = [random_field(torus, s) for s in range(3)]
    batch = forward_batch(fields)
    for k, f in enumerate(fields):
        np.testing.assert_allclose(batch[k], forward(f).values, atol=1e-12)


def test_convolution_matches_direct_sum():
    torus = build_torus(BravaisBasis.hexagonal(), 1, 8)
    f, g = random_field(torus, 1), random_field(torus, 2)
    half = torus.M // 2
    direct = np.zeros(torus.shape)
    for k in np.ndindex(*torus.shape):
        direct += f.values[k] * np.roll(g.values, (k[0] - half, k[1] - half), axis=(0, 1))
    direct *= torus.volume
    np.testing.assert_allclose(convolve(f, g).values, direct, atol=1e-10 * np.max(np.abs(direct)))


def test_convolution_with_delta_is_identity():
    torus = build_torus(BravaisBasis.square(1), 2, 16)
    f = random_field(torus, 4)
    np.testing.assert_allclose(convolve(f, Field.delta(torus)).values, f.values, atol=1e-12)


def test_multiplier_one_is_identity():
    torus = build_torus(BravaisBasis.square(2), 2, 8)
    f = random_field(torus)
    np.testing.assert_allclose(apply_multiplier(f, lambda x: np.ones(x.shape[:-1])).values, f.values, atol=1e-13)


def test_non_finite_multiplier_is_reported():
    torus = build_torus(BravaisBasis.square(2), 2, 8)
    with pytest.raises(NumericError, match="frequency"):
        apply_multiplier(random_field(torus), lambda x: 1.0 / np.linalg.norm(x, axis=-1))


def test_non_real_output_is_reported():
    torus = build_torus(BravaisBasis.square(2), 2, 8)
    with pytest.raises(NumericError):
        apply_multiplier(random_field(torus), np.full(torus.shape, 1j))


def test_single_mode_inverts_to_complex_exponential():
    torus = build_torus(BravaisBasis.hexagonal(), 2, 16)
    g = np.zeros(torus.shape, dtype=complex)
    g[2, -3] = 1.0
    nu = torus.frequencies()[2, -3]
    expected = torus.dual_cell * np.exp(2j * np.pi * (torus.points() @ nu))
    values = inverse_values(SpectralField(torus, g))
    np.testing.assert_allclose(values, expected, atol=1e-12 * torus.dual_cell)
    with pytest.raises(NumericError, match="imaginary"):
        inverse(SpectralField(torus, g))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_field_is_rejected(bad):
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    values = np.zeros(torus.shape)
    values[3, 5] = bad
    with pytest.raises(NumericError, match="non-finite"):
        Field(torus, values)


def test_torus_mismatch():
    a = build_torus(BravaisBasis.square(2), 2, 8)
    b = build_torus(BravaisBasis.square(2), 3, 8)
    with pytest.raises(ShapeError):
        random_field(a) + random_field(b)
    with pytest.raises(ShapeError):
        Field(a, np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        SpectralField(a, np.zeros(8))


def test_smear_profile_properties():
    smear = SmearProfile()
    smear.validate()
    t = np.linspace(-0.25, 0.25, 11)
    np.testing.assert_allclose(smear.axis_values(t), 1.0)
    assert np.all(smear.axis_values(np.array([0.75, 0.9, -1.0])) == 0.0)


@pytest.mark.parametrize("radius", [0.4, 1.2])
def test_bad_smear_radius(radius):
    with pytest.raises(ConfigurationError) as err:
        SmearProfile(radius).validate()
    assert err.value.path == "smear.radius"


@pytest.mark.parametrize("d,r", [(1, 1), (2, 1), (2, 2)])
def test_extension_restricts_to_original(d, r):
    torus = build_torus(BravaisBasis.square(d) if d == 1 else BravaisBasis.hexagonal(), 1, 8)
    f = random_field(torus, 7)
    extended = extend(f, SmearProfile(), r)
    assert extended.torus == torus.refine(r)
    np.testing.assert_allclose(extended.values[torus.coarse_slice(r)], f.values, atol=1e-10)


def test_extension_of_low_mode_is_the_mode():
    torus = build_torus(BravaisBasis.square(2), 1, 16)
    extended = extend(Field.mode(torus, (1, 2)), SmearProfile())
    np.testing.assert_allclose(extended.values, Field.mode(torus.refine(1), (1, 2)).values, atol=1e-10)


def test_extension_needs_refinement():
    torus = build_torus(BravaisBasis.square(2), 1, 8)
    with pytest.raises(ConfigurationError):
        extend(random_field(torus), SmearProfile(), 0)


def test_field_file_round_trip(tmp_path):
    torus = build_torus(BravaisBasis.hexagonal(), 1, 8)
    f = random_field(torus, 3)
    path = write_field(tmp_path / "f.bin", f, t=0.5, role="macro")
    raw = path.read_bytes()
    assert raw.startswith(b'{"d":2,"M":8,"N":1,"basis":')
    assert len(raw.split(b"\n", 1)[1]) == 8 * torus.size
    g, header = read_field(path)
    assert header["t"] == 0.5 and header["role"] == "macro"
    assert g.torus == torus
    np.testing.assert_array_equal(g.values, f.values)
