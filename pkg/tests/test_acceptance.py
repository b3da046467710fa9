"""Acceptance criteria 1-11, one test each; every test prints a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from qpdual.arithmetic import (DiophantineFreqParams, DiophantinePhaseParams, Frequency,
                               check_freq_dc, check_phase_dc, homogeneity_estimate)
from qpdual.cocycle import Cocycle, lyapunov, rotation_number
from qpdual.duality import bloch_from_eigenvector, decay_fit, eigenfunction_from_conjugation
from qpdual.errors import NotEllipticError, RationalInputError
from qpdual.operators import build_truncation, eigensolve, ids_rotation_check
from qpdual.potential import PotentialFourier
from qpdual.reducibility import KamConfig, diagonalize_sl2, kam_reduce, verify_conjugation
from qpdual.rmeasure import (_refine_continuation, continuity_check, diophantine_ladder,
                             energy_of_phase, enumerate_eigensystem, r_measure, tail_check)

GOLDEN = Frequency.parse("golden")
GS = Frequency.parse("golden, silver")
AMO_DUAL = PotentialFourier.cosine(0.05)
THETA = 0.1234
CLASS = DiophantinePhaseParams(1e-3, 2.0, 200)


def verdict(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {k}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def enum_d1():
    assert check_phase_dc(THETA, GOLDEN, CLASS)["holds"]
    return enumerate_eigensystem(THETA, AMO_DUAL, GOLDEN, 25)


def test_criterion_01_free_cocycle(capsys):
    t0 = time.perf_counter()
    Ls = [lyapunov(Cocycle.schrodinger(PotentialFourier.zero(), GOLDEN, E), 100000, 4)["L"]
          for E in (-2.0, -1.3, 0.0, 0.7, 2.0)]
    L3 = lyapunov(Cocycle.schrodinger(PotentialFourier.zero(), GOLDEN, 3.0), 100000, 4)["L"]
    rho = {r0: rotation_number(Cocycle.schrodinger(PotentialFourier.zero(), GOLDEN,
                                                   2 * math.cos(2 * math.pi * r0)), 100000)["rho"]
           for r0 in (0.1, 0.2, 0.3, 0.4)}
    dt = time.perf_counter() - t0
    rho_err = max(abs(v - k) for k, v in rho.items())
    ok = max(Ls) <= 1e-3 and abs(L3 - math.acosh(1.5)) <= 1e-3 and rho_err <= 1e-3 and dt < 10
    verdict(capsys, 1, ok, f"max L on [-2,2] {max(Ls):.2e}, |L(3)-acosh 1.5| "
                           f"{abs(L3 - math.acosh(1.5)):.2e}, max rho error {rho_err:.2e}, {dt:.1f}s")


def test_criterion_02_ids_identity(capsys):
    t0 = time.perf_counter()
    E = np.linspace(-3.0, 3.0, 20)
    rep = ids_rotation_check(PotentialFourier.cosine(0.5), GOLDEN, E, 2000, 100000, 1e-2)
    dt = time.perf_counter() - t0
    defect = max(r["defect"] for r in rep["rows"])
    verdict(capsys, 2, defect <= 1e-2 and dt < 120, f"max |N - (1 - 2 rho)| {defect:.2e}, {dt:.1f}s")


def brute_lyapunov(V, alpha, energies, x0, n_marks):
    """Plain transfer recursion psi_{k+1} = (E - V_k) psi_k - psi_{k-1}, renormalized."""
    E = np.asarray(energies)[:, None]
    x = np.asarray(x0)[None, :]
    a, b = np.ones((E.shape[0], x.shape[1])), np.zeros((E.shape[0], x.shape[1]))
    logs = np.zeros_like(a)
    out, n_max = {}, max(n_marks)
    coef = dict(zip(map(tuple, V.modes.tolist()), V.values))
    c1 = coef.get((1,), 0.0)
    for k in range(n_max):
        v = 2 * c1 * np.cos(2 * np.pi * (x + k * alpha))
        a, b = (E - v) * a - b, a
        if k % 16 == 15:
            s = np.hypot(a, b)
            a, b, logs = a / s, b / s, logs + np.log(s)
        if k + 1 in n_marks:
            out[k + 1] = ((logs + np.log(np.hypot(a, b))) / (k + 1)).mean(axis=1)
    return out


def test_criterion_03_lyapunov_benchmark(capsys):
    t0 = time.perf_counter()
    V = PotentialFourier.cosine(2.0)  # lambda = 2
    sd = eigensolve(build_truncation(V, GOLDEN, [0.0], "schrodinger", 300))
    bulk = sd.eigenvalues[sd.boundary_mass < 1e-12]
    energies = bulk[np.linspace(0, len(bulk) - 1, 7).astype(int)[1:-1]]
    marks = (10**4, 10**5, 10**6)
    brute = brute_lyapunov(V, GOLDEN.values[0], energies, [0.1, 0.35, 0.6, 0.85], marks)
    richardson = (10 * brute[10**6] - brute[10**5]) / 9
    lib = np.array([lyapunov(Cocycle.schrodinger(V, GOLDEN, E), 100000, 8)["L"] for E in energies])
    dt = time.perf_counter() - t0
    err_o = np.abs(richardson - math.log(2)).max()
    err_l = np.abs(lib - math.log(2)).max()
    ok = err_o <= 1e-2 and err_l <= 1e-2 and dt < 120
    verdict(capsys, 3, ok, f"oracle (Richardson) max |L - ln 2| {err_o:.2e}, library {err_l:.2e}, {dt:.1f}s")


def test_criterion_04_kam_engine(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng([0, 4])
    targets = []
    while len(targets) < 10:
        t = float(0.02 + 0.46 * rng.random())
        if check_phase_dc(t, GOLDEN, CLASS)["holds"]:
            targets.append(t)
    n_rot = 100000
    rows = []
    for t in targets:
        eop = energy_of_phase(t, AMO_DUAL, GOLDEN, n_rot, refine=KamConfig())
        c = Cocycle.schrodinger(AMO_DUAL, GOLDEN, eop.energy)
        res = kam_reduce(c, target_rho_params=CLASS, rho=t)
        ver = verify_conjugation(c, res.B, res.A, n_rot)
        h = [x for x in res.history if x > 1e-14]
        # constant in r_{j+1} <= C r_j^1.8
        C = max(b / a ** 1.8 for a, b in zip(h, h[1:]))
        rows.append((t, ver["residual"], res.slope, ver["rho_A_defect"], ver["rho_shift_ok"], C))
    dt = time.perf_counter() - t0
    worst_res = max(r[1] for r in rows)
    slopes = [r[2] for r in rows]
    worst_rho = max(r[3] for r in rows)
    ok = (worst_res <= 1e-10 and all(s is not None and s >= 1.8 for s in slopes)
          and worst_rho <= 4 / n_rot and all(r[4] for r in rows) and dt < 300)
    verdict(capsys, 4, ok, f"max residual {worst_res:.2e}, slopes "
                           f"{[round(s, 3) if s else None for s in slopes]}, max C in "
                           f"r' <= C r^1.8: {max(r[5] for r in rows):.2f}, "
                           f"max rho defect {worst_rho:.2e}, {dt:.1f}s")


def test_criterion_05_duality_round_trip(capsys, enum_d1):
    worst = {"residual": 0.0, "rate_margin": math.inf, "bloch": 0.0}
    grid = np.linspace(0, 1, 16, endpoint=False)
    ok_runs = [r for r in enum_d1 if r.status == "ok"]
    for r in ok_runs:
        h = r.energy.kam.B.strip
        worst["residual"] = max(worst["residual"], r.residual)
        worst["rate_margin"] = min(worst["rate_margin"],
                                   decay_fit(r.pair)["rate"] - 2 * math.pi * 0.9 * h)
        b = bloch_from_eigenvector(r.pair, r.theta_m, AMO_DUAL, GOLDEN, grid)
        worst["bloch"] = max(worst["bloch"], b["schrodinger_residual"])
    ok = (len(ok_runs) > 0 and worst["residual"] <= 1e-8 and worst["rate_margin"] >= 0
          and worst["bloch"] <= 1e-6)
    verdict(capsys, 5, ok, f"{len(ok_runs)} reductions: max residual {worst['residual']:.2e}, "
                           f"min rate margin {worst['rate_margin']:.3f}, max Bloch {worst['bloch']:.2e}")


def test_criterion_06_uniqueness(capsys):
    worst = 0.0
    for th in (THETA, 0.3, 0.41):
        # route 1: direct reduction at the refined energy
        eop = energy_of_phase(th, AMO_DUAL, GOLDEN, refine=KamConfig())
        r1 = eop.kam
        # route 2: continuation in the coupling from the free cocycle
        _, r2 = _refine_continuation(AMO_DUAL, GOLDEN, th, KamConfig(fourier_cutoff=40, grid=512))
        us = []
        for r in (r1, r2):
            phi = th - 0.5 * float(r.B.degree @ GOLDEN.values)
            U = diagonalize_sl2(r.A, phi, 1e-6, 1.0)
            us.append(eigenfunction_from_conjugation(r.B, phi, GOLDEN, U=U))
        R = max(u.radius for u in us)
        worst = max(worst, max(abs(us[0].value(n) - us[1].value(n)) for n in range(-R, R + 1)))
    verdict(capsys, 6, worst <= 1e-10, f"max site difference between two conjugation routes {worst:.2e}")


def test_criterion_07_completeness(capsys, enum_d1):
    t0 = time.perf_counter()
    inside = [r for r in enum_d1 if max(abs(v) for v in r.m) <= 20]
    total1 = r_measure(THETA, 0, inside)["total"]
    theta2 = 0.1234
    assert check_phase_dc(theta2, GS, DiophantinePhaseParams(1e-3, 3.0, 50))["holds"]
    enum2 = enumerate_eigensystem(theta2, PotentialFourier.cosine(0.05, 2), GS, 6)
    total2 = r_measure(theta2, [0, 0], enum2)["total"]
    failed = [r.m for r in enum2 if r.status != "ok"]
    dt = time.perf_counter() - t0
    ok = total1 >= 0.999 and total2 >= 0.99 and dt < 1800
    verdict(capsys, 7, ok, f"d=1 N=20 total {total1:.12f}; d=2 N=6 total {total2:.12f} "
                           f"({len(failed)} of {len(enum2)} m failed: {failed}); d=2 took {dt:.0f}s")


def test_criterion_08_tail(capsys, enum_d1):
    t = tail_check(THETA, 0, [5, 10, 15, 20], 1e-3, enum_d1)
    target = 0.5 * 2 * math.pi * t["strip"]
    ok = t["rate"] is not None and t["rate"] >= target
    masses = ", ".join(f"N={r.N}: {r.mass_beyond_N:.2e}" for r in t["reports"])
    verdict(capsys, 8, ok, f"tail rate {t['rate']} from {t['fit_points']} points above the "
                           f"roundoff floor vs 0.5*2*pi*h = {target:.3f} ({masses})")


def test_criterion_09_continuity(capsys, enum_d1):
    neigh = diophantine_ladder(THETA, GOLDEN, CLASS, [1e-5, 1e-6, 1e-7])
    inside = [r for r in enum_d1 if max(abs(v) for v in r.m) <= 10]
    disc = []
    for tp in neigh:
        other = enumerate_eigensystem(tp, AMO_DUAL, GOLDEN, 10)
        disc.append(continuity_check(THETA, tp, 10, 10, inside, other).discrepancy)
    ok = all(b < a for a, b in zip(disc, disc[1:])) and disc[-1] <= 1e-3
    verdict(capsys, 9, ok, "discrepancies at 1e-5, 1e-6, 1e-7: " + ", ".join(f"{d:.2e}" for d in disc))


def test_criterion_10_homogeneity(capsys):
    kappa, tau = 0.38, 1.0
    assert check_freq_dc(GOLDEN, DiophantineFreqParams(kappa, tau, 10**4))["holds"]
    params = DiophantinePhaseParams.localization_class(0.003, tau, 1)
    rng = np.random.default_rng([0, 10])
    ratios, regimes = [], set()
    while len(ratios) < 20:
        th = float(rng.random())
        if not check_phase_dc(th, GOLDEN, DiophantinePhaseParams(0.003, params.tau_prime, 50))["holds"]:
            continue
        r = homogeneity_estimate(GOLDEN, params, th, 7e-33, 50, DiophantineFreqParams(kappa, tau))
        ratios.append(r["ratio"])
        regimes.add(r["regime"])
    ok = min(ratios) >= 0.5 and regimes == {"strict"}
    verdict(capsys, 10, ok, f"20 phases, tau' = {params.tau_prime:g}, sigma = 7e-33: "
                            f"min ratio {min(ratios)}, regimes {sorted(regimes)}")


def test_criterion_11_negative_controls(capsys):
    # resonant orbit: 2 theta = 47 alpha, so theta_m hits k = 47 + 2m
    theta = (47 * GOLDEN.values[0] / 2) % 1.0
    e = enumerate_eigensystem(theta, AMO_DUAL, GOLDEN, 3)
    predicted = {(m,) for m in range(-3, 4) if abs(47 + 2 * m) <= 50}
    flagged = {r.m for r in e if r.reason.startswith("resonant (k")}
    resonant_ok = flagged == predicted and all(
        r.reason == f"resonant (k = {47 + 2 * r.m[0]})" for r in e if r.m in predicted)
    half = Frequency.from_values([0.5], guard=None)
    rational_ok = True
    for call in (lambda: homogeneity_estimate(half, DiophantinePhaseParams(1e-3, 3.0), 0.1, 1e-3),
                 lambda: Frequency.parse("quad(1,0,5,2)")):
        try:
            call()
            rational_ok = False
        except RationalInputError:
            pass
    try:
        diagonalize_sl2(np.array([[2.0, 0.0], [0.0, 0.5]]), 0.1, 1e-6, 1.0)
        elliptic_ok = False
    except NotEllipticError:
        elliptic_ok = True
    ok = resonant_ok and rational_ok and elliptic_ok
    verdict(capsys, 11, ok, f"resonant m flagged {sorted(flagged)} (predicted {sorted(predicted)}); "
                            f"rational alpha aborts: {rational_ok}; hyperbolic rejected: {elliptic_ok}")
