import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpdual.arithmetic import DiophantinePhaseParams, Frequency
from qpdual.cocycle import Cocycle, det2, grid_points, rotation, sl2_element, spectral_norm
from qpdual.errors import ConvergenceError, NotEllipticError, QPDualError, ResonanceError
from qpdual.potential import PotentialFourier
from qpdual.reducibility import (FourierConjugation, KamConfig, _fft, _ifft, cohomological_solve,
                                 constant_rotation, diagonalize_nearby, diagonalize_sl2,
                                 fft_modes, kam_reduce, verify_conjugation)
from qpdual.rmeasure import energy_of_phase

GOLDEN = Frequency.parse("golden")
AMO_DUAL = PotentialFourier.cosine(0.05)
M = np.array([[1, -1j], [1, 1j]]) / 2j


def elliptic(rho, shear=0.4):
    P = np.array([[1.0, shear], [0.0, 1.0]])
    return P @ rotation(rho) @ np.linalg.inv(P)


def linear_residual(A0, f, Y, C, alpha):
    # f + Y - A0^-1 Y(x + alpha) A0 - C, with the shift applied exactly in Fourier space
    n = f.shape[0]
    kdot = fft_modes(n, 1) @ alpha.values
    Yshift = _ifft(_fft(Y, 1) * np.exp(2j * np.pi * kdot)[..., None, None], 1).real
    return f + Y - np.linalg.inv(A0) @ Yshift @ A0 - C


def test_solve_zero_field():
    out = cohomological_solve(elliptic(0.2), np.zeros((64, 2, 2)), GOLDEN, 20)
    assert np.all(out["Y"] == 0) and out["report"].action == "none"


def test_solve_single_mode_closed_form():
    A0, n, k0, c = elliptic(0.23), 64, 3, 0.01 + 0.02j
    U = diagonalize_sl2(A0, constant_rotation(A0), 1e-6, 1.0)
    ghat = np.zeros((n, 2, 2), complex)
    ghat[k0, 0, 1] = c
    ghat[-k0, 1, 0] = np.conj(c)  # keeps f real
    f = (U @ _ifft(ghat, 1) @ np.linalg.inv(U)).real
    out = cohomological_solve(A0, f, GOLDEN, 20)
    rho = out["rho"]
    expect = c / (np.exp(2j * np.pi * (k0 * GOLDEN.values[0] - 2 * rho)) - 1)
    assert abs(out["Yhat_frame"][k0, 0, 1] - expect) < 1e-14


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.45))
def test_solve_random_field_exact(seed, rho):
    rng = np.random.default_rng(seed)
    n, cut = 64, 20
    A0 = elliptic(rho)
    hat = np.zeros((n, 2, 2), complex)
    k = fft_modes(n, 1)[:, 0]
    band = np.abs(k) <= cut
    coeffs = rng.normal(size=(band.sum(), 3)) + 1j * rng.normal(size=(band.sum(), 3))
    for i, (x, y, z) in zip(np.nonzero(band)[0], coeffs):
        hat[i] = sl2_element(0, 0, 0) + np.array([[x, y + z], [y - z, -x]])
    f = _ifft(hat, 1).real
    f *= 1e-4 / np.abs(f).max()
    out = cohomological_solve(A0, f, GOLDEN, cut)
    assert np.abs(out["Y"].imag if np.iscomplexobj(out["Y"]) else 0).max() == 0
    assert np.abs(np.trace(out["Y"], axis1=-2, axis2=-1)).max() < 1e-14
    res = linear_residual(A0, f, out["Y"], out["const"], GOLDEN)
    assert np.abs(res).max() <= 1e-12


def test_solve_skips_small_divisors():
    # 55 is a golden denominator: |exp(2 pi i 55 alpha) - 1| is about 0.051
    A0 = elliptic(0.2)
    n = 256
    x = np.arange(n) / n
    f = np.zeros((n, 2, 2))
    f[:, 0, 0] = 1e-4 * np.cos(2 * np.pi * 55 * x)
    f[:, 1, 1] = -f[:, 0, 0]
    out = cohomological_solve(A0, f, GOLDEN, 60, divisor_floor=0.06)
    rep = out["report"]
    assert rep.action == "mode_skipped"
    assert (55, "diag") in [(k, c) for k, c, _ in rep.resonant_modes]
    assert all(v < 0.06 for _, _, v in rep.resonant_modes)
    # the skipped mode stays in the residual, everything else is solved
    res = linear_residual(A0, f, out["Y"], out["const"], GOLDEN)
    hat = np.abs(_fft(res, 1)).max(axis=(1, 2))
    assert hat[55] > 1e-6 and np.delete(hat, [55, n - 55]).max() < 1e-12


def test_solve_aborts_on_constant_resonance():
    A0 = elliptic(0.5 - 1e-12)
    f = np.full((64, 2, 2), 0.0)
    with pytest.raises((ResonanceError, NotEllipticError)):
        cohomological_solve(A0, f, GOLDEN, 20)


def test_kam_constant_input():
    A0 = elliptic(0.3)
    res = kam_reduce(Cocycle.constant_map(A0, GOLDEN))
    assert res.iterations == 0
    assert np.allclose(res.A, A0, atol=1e-14)
    assert np.allclose(res.B(np.array([[0.3]])), np.eye(2), atol=1e-14)


@pytest.mark.parametrize("theta", [0.1234, 0.3, 0.41])
def test_kam_amo_dual(theta):
    e = energy_of_phase(theta, AMO_DUAL, GOLDEN, 100000, refine=KamConfig())
    c = Cocycle.schrodinger(AMO_DUAL, GOLDEN, e.energy)
    res = kam_reduce(c)
    assert res.residual <= 1e-10 and res.iterations <= 8
    v = verify_conjugation(c, res.B, res.A, 100000)
    assert v["residual"] <= 10 * max(res.residual, 1e-15)
    assert v["rho_shift_ok"]


def test_kam_resonant_target():
    # the energy at a gap edge has rho = alpha / 2: the phase condition fails at k = 1
    V = PotentialFourier.cosine(0.2)
    e = energy_of_phase(GOLDEN.values[0] / 2, V, GOLDEN, 100000)
    assert e.gap_flag
    c = Cocycle.schrodinger(V, GOLDEN, e.values[0])
    with pytest.raises(ResonanceError) as exc:
        kam_reduce(c, target_rho_params=DiophantinePhaseParams(1e-3, 2.0, 50))
    assert exc.value.report.resonant_modes[0][0] == 1


def test_kam_far_from_constant():
    c = Cocycle.schrodinger(PotentialFourier.cosine(2.0), GOLDEN, 0.3)
    with pytest.raises(ConvergenceError):
        kam_reduce(c)


def test_verify_identity():
    A = elliptic(0.17)
    v = verify_conjugation(Cocycle.constant_map(A, GOLDEN), FourierConjugation.identity(), A, 20000)
    assert v["residual"] < 1e-14 and v["rho_shift_ok"]


def test_verify_detects_perturbation():
    e = energy_of_phase(0.3, AMO_DUAL, GOLDEN, 100000, refine=KamConfig())
    c = Cocycle.schrodinger(AMO_DUAL, GOLDEN, e.energy)
    res = kam_reduce(c)
    coeffs = res.B.coeffs.copy()
    coeffs[np.argmax(np.all(res.B.modes == 1, axis=1)), 0, 1] += 1e-3
    bad = FourierConjugation(res.B.modes, coeffs, res.B.degree)
    assert verify_conjugation(c, bad, res.A, 20000)["residual"] >= 1e-4


def test_quadratic_convergence_and_strip():
    e = energy_of_phase(0.3, AMO_DUAL, GOLDEN, 100000, refine=KamConfig())
    res = kam_reduce(Cocycle.schrodinger(AMO_DUAL, GOLDEN, e.energy))
    h = res.history
    conv = [(a, b) for a, b in zip(h, h[1:]) if b > 1e-13]
    assert len(conv) >= 2
    for a, b in conv:
        assert b <= 10 * a ** 1.8
    # decay certificate: |B_k| <= C exp(-2 pi h |k|) over the stored coefficients
    B = res.B
    k = np.abs(B.modes).max(axis=1)
    mags = np.abs(B.coeffs).max(axis=(1, 2))
    assert np.all(mags <= B.strip_constant * np.exp(-2 * np.pi * B.strip * k) * (1 + 1e-9) + 1e-14)
    assert B.strip > 0.3


def test_det_of_conjugation():
    e = energy_of_phase(0.3, AMO_DUAL, GOLDEN, 100000, refine=KamConfig())
    res = kam_reduce(Cocycle.schrodinger(AMO_DUAL, GOLDEN, e.energy))
    vals = res.B(grid_points(256, 1).reshape(-1, 1))
    assert np.abs(det2(vals) - 1).max() <= 1e-8


def test_conjugation_json_round_trip():
    e = energy_of_phase(0.3, AMO_DUAL, GOLDEN, 100000, refine=KamConfig())
    res = kam_reduce(Cocycle.schrodinger(AMO_DUAL, GOLDEN, e.energy))
    back = FourierConjugation.from_json(res.B.to_json())
    x = np.array([[0.1], [0.77]])
    assert np.array_equal(back(x), res.B(x))
    assert back.strip == res.B.strip


def test_diagonalize_rotation():
    rho = 0.3
    U = diagonalize_sl2(rotation(rho), rho, 1e-3, 1.0)
    D = np.linalg.solve(U, rotation(rho) @ U)
    assert np.allclose(D, np.diag([np.exp(2j * np.pi * rho), np.exp(-2j * np.pi * rho)]), atol=1e-14)
    # columns are those of M^-1 in swapped order (M puts e^{-2 pi i rho} first), up to scaling
    Mi = np.linalg.inv(M)[:, ::-1]
    for j in range(2):
        ratio = U[:, j] / Mi[:, j]
        assert abs(ratio[0] - ratio[1]) < 1e-12


def test_diagonalize_errors():
    with pytest.raises(ResonanceError):
        diagonalize_sl2(rotation(1e-4), 1e-4, 1e-3, 1.0)
    with pytest.raises(NotEllipticError):
        diagonalize_sl2(np.array([[2.0, 0.0], [0.0, 0.5]]), 0.1, 1e-3, 1.0)
    with pytest.raises(NotEllipticError):
        diagonalize_sl2(np.eye(2), 0.0, 1e-3, 1.0)
    with pytest.raises(QPDualError, match="eigenvalues"):
        diagonalize_sl2(rotation(0.2), 0.25, 1e-3, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.02, 0.48), st.floats(-2, 2))
def test_diagonalize_random(rho, shear):
    A = elliptic(rho, shear)
    U = diagonalize_sl2(A, rho, 1e-3, 1.0)
    D = np.linalg.solve(U, A @ U)
    assert abs(D[0, 1]) < 1e-12 and abs(D[1, 0]) < 1e-12
    assert abs(D[0, 0] - np.exp(2j * np.pi * rho)) < 1e-12
    assert abs(np.linalg.det(U) - 1) < 1e-12


def test_nearby_identical():
    A = elliptic(0.3)
    out = diagonalize_nearby(A, A, 0.3, 0.3, 1e-3, 1.0)
    assert out["dist"] < 1e-14


def test_nearby_rotations():
    # epsilon = 0.2 puts the 2 pi 1e-8 gap below the epsilon^10 threshold
    out = diagonalize_nearby(rotation(0.3), rotation(0.3 + 1e-8), 0.3, 0.3 + 1e-8, 1e-3, 1.0,
                             epsilon=0.2)
    assert out["dist"] <= 1e-8 * 10


def test_nearby_generic():
    rng = np.random.default_rng(5)
    A = elliptic(0.23, 0.7)
    X = rng.normal(size=(2, 2))
    X[1, 1] = -X[0, 0]
    Ap = A @ (np.eye(2) + 1e-12 * X)
    Ap /= math.sqrt(det2(Ap))
    rp = constant_rotation(Ap)
    out = diagonalize_nearby(A, Ap, 0.23, rp, 1e-3, 1.0)
    assert out["dist"] <= out["delta"] ** 0.1


def test_nearby_threshold():
    with pytest.raises(QPDualError, match="required"):
        diagonalize_nearby(rotation(0.3), rotation(0.31), 0.3, 0.31, 1e-3, 1.0)
    out = diagonalize_nearby(rotation(0.3), rotation(0.31), 0.3, 0.31, 1e-3, 1.0, relaxed=True)
    assert out["relaxed"]


def test_config_validation():
    with pytest.raises(QPDualError):
        KamConfig(divisor_floor=0.0)
    with pytest.raises(QPDualError):
        KamConfig(strip_schedule=(0.5, 0.5))
    assert KamConfig().grid_size() == 256
    assert KamConfig.for_dim(2).grid_size() == 64


def test_twisted_conjugation_evaluation():
    B = FourierConjugation(np.array([[0]]), np.eye(2)[None].astype(complex), np.array([2]))
    x = np.array([[0.1]])
    assert np.allclose(B(x)[0], rotation(0.1))
    assert spectral_norm(B(x)[0]) == pytest.approx(1.0)
