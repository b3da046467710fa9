"""Energies along a phase orbit, the R-measure they carry, and its tail and continuity checks."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root_scalar

from . import __version__
from .arithmetic import (DiophantinePhaseParams, Frequency, check_phase_dc, homogeneity_estimate,
                         lattice_box, required_k_cut, sup_norm)
from .cocycle import Cocycle, rotation_number
from .duality import EigenPair, eigenfunction_from_conjugation, verify_long_range_eigen
from .errors import ConvergenceError, NotEllipticError, QPDualError, ResonanceError
from .potential import PotentialFourier
from .reducibility import FourierConjugation, KamConfig, KamResult, diagonalize_sl2, kam_reduce

SCHEMA_VERSION = 1


@dataclass
class EnergyOfPhase:
    theta: float
    values: tuple
    gap_flag: bool = False
    target: float = 0.0
    refined: bool = False
    kam: KamResult | None = field(default=None, repr=False)

    @property
    def energy(self) -> float:
        return self.values[0]

    def to_dict(self) -> dict:
        return {"theta": self.theta, "values": list(self.values), "gap_flag": self.gap_flag,
                "target": self.target, "refined": self.refined}


@dataclass(frozen=True)
class RMeasureAtom:
    m: tuple
    energy: float
    weight: float


@dataclass(frozen=True)
class PipelineConfig:
    n_rot: int = 100000
    rho_tol: float | None = None
    energy_tol: float = 1e-10
    kam: KamConfig | None = None
    resonance_gamma: float = 1e-8
    resonance_scan: int = 50
    diag_gamma: float = 1e-6
    diag_tau_prime: float = 1.0
    u_radius: int | None = None
    threads: int = 1

    def kam_for(self, d: int) -> KamConfig:
        return self.kam or KamConfig.for_dim(d)

    def rho_tolerance(self) -> float:
        return self.rho_tol if self.rho_tol is not None else 4.0 / self.n_rot


@dataclass
class MResult:
    m: tuple
    theta_m: float
    status: str
    reason: str = ""
    energy: EnergyOfPhase | None = None
    pair: EigenPair | None = None
    residual: float | None = None
    kam_residual: float | None = None


# ---------------------------------------------------------------- energy of a phase

def _rho(V, alpha, E, n_rot):
    return rotation_number(Cocycle.schrodinger(V, alpha, E), n_rot)["rho_raw"]


def _bisect(pred, lo, hi, tol):
    # pred(lo) True, pred(hi) False; returns the last True point
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi


def _refine(V, alpha, target, E0, cfg: KamConfig):
    """Pin E so that the KAM constant rotates by exactly `target`."""
    cache = {}

    def g(E):
        r = kam_reduce(Cocycle.schrodinger(V, alpha, E), config=cfg, rho_guess=target)
        cache[E] = r
        return r.rho_A + 0.5 * float(r.B.degree @ alpha.values) - target

    g0 = g(E0)
    if g0 == 0.0:
        return E0, cache[E0]
    # rho decreases with E at rate about 1/(4 pi)
    E1 = E0 + 4 * np.pi * g0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = root_scalar(g, x0=E0, x1=E1, method="secant", xtol=1e-15, maxiter=40)
    E = float(sol.root)
    if E not in cache:
        g(E)
    if abs(g(E)) > 1e-12:
        raise ConvergenceError(f"energy refinement stalled at rho defect {abs(g(E)):.2e}")
    return E, cache[E]


def _refine_continuation(V, alpha, target, cfg: KamConfig, steps: int = 8, min_step: float = 1 / 128):
    """Ramp the potential from 0 to V at fixed rotation, warm-starting each reduction."""
    E = 2 * math.cos(2 * np.pi * target)
    A = np.array([[E, -1.0], [1.0, 0.0]])
    B = FourierConjugation.identity(alpha.d)
    s, ds = 0.0, 1.0 / steps
    res = None
    while s < 1.0:
        s_new = min(1.0, s + ds)
        Vs = PotentialFourier(V.modes, V.values * s_new)
        cache = {}

        def g(x):
            r = kam_reduce(Cocycle.schrodinger(Vs, alpha, x), config=cfg, B0=B, A0=A)
            cache[x] = r
            return r.rho_A - target

        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sol = root_scalar(g, x0=E, x1=E + 1e-6, method="secant", xtol=1e-15, maxiter=40)
            x = float(sol.root)
            if x not in cache:
                g(x)
            if abs(g(x)) > 1e-12:
                raise ConvergenceError("secant stalled")
        except (ConvergenceError, NotEllipticError, ResonanceError, RuntimeError):
            ds /= 2
            if ds < min_step:
                raise ConvergenceError(f"continuation stalled at coupling fraction {s:.4f}")
            continue
        res = cache[x]
        E, A, B, s = x, res.A, res.B, s_new
        ds = min(2 * ds, 1.0 - s) if s < 1.0 else ds
    return E, res


def energy_of_phase(theta: float, V: PotentialFourier, alpha: Frequency, n_rot: int = 100000,
                    tol: float | None = None, energy_tol: float = 1e-10,
                    refine: KamConfig | None = None) -> EnergyOfPhase:
    """Invert E -> rho(E) at rho = theta (theta <= 1/2) or 1 - theta.

    Bisection on the Prüfer rotation number; a plateau wider than the
    resolution at the target is reported as a gap with both edges.  With
    `refine` the energy is then pinned by KAM reduction to about 1e-14.
    """
    th = float(theta) % 1.0
    target = th if th <= 0.5 else 1.0 - th
    if not 0.0 <= target <= 0.5:
        raise QPDualError(f"rotation target {target} outside [0, 1/2]")
    tol = 4.0 / n_rot if tol is None else tol
    span = 2.0 + V.l1() + 0.5
    lo, hi = -span, span
    rho = lambda E: _rho(V, alpha, E, n_rot)
    if target + tol >= 0.5:
        E, _ = _bisect(lambda E: rho(E) >= target - tol, lo, hi, energy_tol)
        return EnergyOfPhase(th, (E,), False, target)
    if target - tol <= 0.0:
        _, E = _bisect(lambda E: rho(E) > target + tol, lo, hi, energy_tol)
        return EnergyOfPhase(th, (E,), False, target)
    # crossing, stopping as soon as rho is within tol of the target
    E = None
    while hi - lo > energy_tol:
        mid = 0.5 * (lo + hi)
        r = rho(mid)
        if abs(r - target) <= tol:
            E = mid
            break
        if r > target:
            lo = mid
        else:
            hi = mid
    if E is None:
        E = 0.5 * (lo + hi)
    probe = max(10 * energy_tol, 100 * tol)
    if abs(rho(E - probe) - target) <= tol and abs(rho(E + probe) - target) <= tol:
        e_lo, _ = _bisect(lambda x: rho(x) > target + tol, lo, E, energy_tol)
        _, e_hi = _bisect(lambda x: rho(x) >= target - tol, E, hi, energy_tol)
        return EnergyOfPhase(th, (e_lo, e_hi), True, target)
    out = EnergyOfPhase(th, (E,), False, target)
    if refine is not None:
        for attempt in (lambda: _refine(V, alpha, target, E, refine),
                        lambda: _refine_continuation(V, alpha, target, refine)):
            try:
                E2, res = attempt()
            except (ConvergenceError, NotEllipticError, ResonanceError, RuntimeError):
                continue
            out = EnergyOfPhase(th, (E2,), False, target, True, res)
            break
    return out


# ---------------------------------------------------------------- enumeration

def _orbit_indices(N: int, d: int):
    return [tuple(int(v) for v in m) for m in lattice_box(N, d)]


def orbit_phase(theta, m, alpha: Frequency) -> float:
    return float((theta + np.dot(m, alpha.values)) % 1.0)


def _one_m(theta, m, V, alpha, cfg: PipelineConfig) -> MResult:
    th = orbit_phase(theta, m, alpha)
    res_params = DiophantinePhaseParams(cfg.resonance_gamma, 0.0, cfg.resonance_scan)
    chk = check_phase_dc(th, alpha, res_params)
    if not chk["holds"]:
        return MResult(m, th, "failed", f"resonant (k = {chk['worst'][0]})")
    kcfg = cfg.kam_for(alpha.d)
    eop = energy_of_phase(th, V, alpha, cfg.n_rot, cfg.rho_tolerance(), cfg.energy_tol, refine=kcfg)
    if eop.gap_flag:
        return MResult(m, th, "failed", "gap", eop)
    if not eop.refined:
        return MResult(m, th, "failed", "non-convergent", eop)
    r = eop.kam
    phi = th - 0.5 * float(r.B.degree @ alpha.values)
    try:
        U = diagonalize_sl2(r.A, phi, cfg.diag_gamma, cfg.diag_tau_prime)
    except (ResonanceError, NotEllipticError, QPDualError) as exc:
        return MResult(m, th, "failed", f"resonant ({exc})", eop)
    pair = eigenfunction_from_conjugation(r.B, phi, alpha, U=U, energy=eop.energy,
                                          radius=cfg.u_radius, provenance=f"orbit m={list(m)}")
    resid = verify_long_range_eigen(pair, V, alpha, th)
    return MResult(m, th, "ok", "", eop, pair, resid, r.residual)


def enumerate_eigensystem(theta: float, V: PotentialFourier, alpha: Frequency, N: int,
                          config: PipelineConfig | None = None) -> list:
    """Run energy_of_phase -> kam_reduce -> diagonalize_sl2 -> eigenfunction for every |m| <= N."""
    cfg = config or PipelineConfig()
    ms = _orbit_indices(N, alpha.d)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return list(pool.map(lambda m: _one_m(theta, m, V, alpha, cfg), ms))
    return [_one_m(theta, m, V, alpha, cfg) for m in ms]


# ---------------------------------------------------------------- the measure

def r_measure(theta: float, n, enumeration: list, window=None) -> dict:
    """Atoms |u_m(n - m)|^2 at E_m for the orbit phases theta + <m,alpha>.

    u_m solves the dual equation at theta + <m,alpha>, so its translate
    u_m(. - m) solves it at theta.
    """
    n = np.atleast_1d(n)
    atoms = []
    for r in enumeration:
        if r.status != "ok":
            continue
        E = r.pair.energy
        if window is not None and not (window[0] <= E <= window[1]):
            continue
        w = abs(r.pair.value(n - np.array(r.m))) ** 2
        atoms.append(RMeasureAtom(r.m, E, float(w)))
    return {"atoms": atoms, "total": float(sum(a.weight for a in atoms))}


@dataclass(frozen=True)
class TailReport:
    N: int
    mass_beyond_N: float
    passes: bool


@dataclass(frozen=True)
class ContinuityReport:
    theta: float
    theta_prime: float
    N: int
    discrepancy: float
    pair_distances: dict
    mismatches: list


def tail_check(theta: float, n, N_list, epsilon: float, enumeration: list,
               floor: float = 1e-30) -> dict:
    """Mass of atoms with |m| > N for each N, plus an exponential fit of the nonzero tail."""
    atoms = r_measure(theta, n, enumeration)["atoms"]
    N_enum = max(max(abs(v) for v in r.m) for r in enumeration)
    norms = np.array([max(abs(v) for v in a.m) for a in atoms])
    w = np.array([a.weight for a in atoms])
    reports = []
    for N in sorted(N_list):
        if N >= N_enum:
            raise QPDualError(f"N = {N} needs an enumeration beyond it (have {N_enum})")
        mass = float(w[norms > N].sum())
        reports.append(TailReport(int(N), mass, mass <= epsilon))
    N0 = None
    for i in range(len(reports)):
        if all(r.passes for r in reports[i:]):
            N0 = reports[i].N
            break
    pts = [(r.N, r.mass_beyond_N) for r in reports if r.mass_beyond_N > floor]
    rate = None
    if len(pts) >= 2:
        x, y = np.array(pts, dtype=float).T
        rate = float(-np.polyfit(x, np.log(y), 1)[0])
    strips = [r.energy.kam.B.strip for r in enumeration if r.status == "ok"]
    return {"reports": reports, "N0": N0, "rate": rate, "fit_points": len(pts), "N_enum": N_enum,
            "strip": float(np.median(strips)) if strips else None}


def continuity_check(theta: float, theta_prime: float, n, N: int, enum_theta: list,
                     enum_prime: list) -> ContinuityReport:
    """|nu_theta(T_N) - nu_theta'(T_N)| with per-m eigenfunction distances."""
    box = lambda e: [r for r in e if max(abs(v) for v in r.m) <= N]
    a, b = box(enum_theta), box(enum_prime)
    ta = r_measure(theta, n, a)["total"]
    tb = r_measure(theta_prime, n, b)["total"]
    ok_a = {r.m: r for r in a if r.status == "ok"}
    ok_b = {r.m: r for r in b if r.status == "ok"}
    dists = {}
    for m in sorted(set(ok_a) & set(ok_b)):
        ua, ub = ok_a[m].pair, ok_b[m].pair
        R = max(ua.radius, ub.radius)
        va = np.array([ua.value(s) for s in lattice_box(R, ua.d)])
        vb = np.array([ub.value(s) for s in lattice_box(R, ub.d)])
        dists[m] = float(np.linalg.norm(va - vb))
    mism = sorted(set(ok_a) ^ set(ok_b))
    return ContinuityReport(float(theta), float(theta_prime), int(N), abs(ta - tb), dists, mism)


def diophantine_ladder(theta: float, alpha: Frequency, params: DiophantinePhaseParams, steps,
                       tries: int = 16) -> list:
    """Neighbours theta + s (s from `steps`) nudged until they pass the phase condition."""
    out = []
    for s in steps:
        for j in range(tries):
            t = (theta + s * (1 + 0.0625 * j)) % 1.0
            if check_phase_dc(t, alpha, params)["holds"]:
                out.append(t)
                break
        else:
            raise QPDualError(f"no admissible neighbour at distance {s}")
    return out


def criteria_report(theta: float, n, V: PotentialFourier, alpha: Frequency, *, N: int = 20,
                    N_list=(5, 10, 15, 20), N_enum: int | None = None, epsilon: float = 1e-3,
                    class_params: DiophantinePhaseParams | None = None,
                    continuity_steps=(1e-5, 1e-6, 1e-7), continuity_N: int = 10,
                    continuity_tol: float = 1e-3, completeness_min: float = 0.999,
                    sigma: float = 1e-3, seed: int = 0, config: PipelineConfig | None = None) -> dict:
    """Uniformity (tail), continuity, density proxy and completeness at one phase."""
    cfg = config or PipelineConfig()
    class_params = class_params or DiophantinePhaseParams(1e-3, 1.0 + alpha.d, 200)
    N_enum = N_enum or max(N, max(N_list)) + 5
    enum = enumerate_eigensystem(theta, V, alpha, N_enum, cfg)
    inside = [r for r in enum if max(abs(v) for v in r.m) <= N]
    rm = r_measure(theta, n, inside)
    completeness = rm["total"]
    tail = tail_check(theta, n, N_list, epsilon, enum)
    uniform = tail["N0"] is not None
    neigh = diophantine_ladder(theta, alpha, class_params, continuity_steps)
    nedge = np.full(alpha.d, continuity_N)
    discrepancies = []
    for tp in neigh:
        other = enumerate_eigensystem(tp, V, alpha, continuity_N, cfg)
        rep = continuity_check(theta, tp, nedge, continuity_N, inside, other)
        discrepancies.append(rep.discrepancy)
    cont = discrepancies[-1] <= continuity_tol
    try:
        k_cut = required_k_cut(class_params, alpha.d, sigma)
        if (2 * k_cut + 1) ** alpha.d > 10**6:
            raise QPDualError(f"homogeneity needs k_cut = {k_cut}, too many resonances to scan")
        hom = homogeneity_estimate(alpha, class_params, theta, sigma, k_cut)
        density = hom["ratio"] >= 0.5
        hom_out = {"ratio": hom["ratio"], "regime": hom["regime"], "k_cut": k_cut}
    except QPDualError as exc:
        density, hom_out = False, {"error": str(exc)}
    failures = [{"m": list(r.m), "reason": r.reason} for r in enum if r.status != "ok"]
    return {
        "schema_version": SCHEMA_VERSION, "version": __version__, "seed": seed,
        "theta": theta, "n": np.atleast_1d(n).tolist(), "alpha": str(alpha),
        "tolerances": {"epsilon": epsilon, "continuity_tol": continuity_tol,
                       "completeness_min": completeness_min, "sigma": sigma,
                       "n_rot": cfg.n_rot, "energy_tol": cfg.energy_tol},
        "uniformity": "pass" if uniform else "fail",
        "continuity": "pass" if cont else "fail",
        "density_proxy": "pass" if density else "fail",
        "completeness": completeness,
        "completeness_pass": completeness >= completeness_min,
        "tail": {"N0": tail["N0"], "rate": tail["rate"], "strip": tail["strip"],
                 "mass": {str(r.N): r.mass_beyond_N for r in tail["reports"]}},
        "continuity_detail": {"neighbours": neigh, "discrepancies": discrepancies},
        "homogeneity": hom_out,
        "failures": failures,
        "atoms": [list(a.m) + [a.energy, a.weight] for a in rm["atoms"]],
    }


def atoms_csv(atoms: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = len(atoms[0].m) if atoms else 1
    w.writerow([f"m{i + 1}" for i in range(d)] + ["E", "weight"])
    for a in atoms:
        w.writerow(list(a.m) + [repr(a.energy), repr(a.weight)])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
