"""Continued fractions, Diophantine scans and homogeneity estimates.

Integer vectors are measured in the sup norm throughout, so that the box
|k| <= N holds (2N+1)^d points.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from mpmath import mp, mpf

from .errors import QPDualError, RationalInputError

RESONANCE_TOL = 1e-14
DEFAULT_GUARD = 20

_QUAD = re.compile(r"quad\(\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(\d+)\s*,\s*(-?\d+)\s*\)$")


def _literal_mp(lit: str):
    lit = lit.strip()
    if lit == "golden":
        return (mp.sqrt(5) - 1) / 2
    if lit == "silver":
        return mp.sqrt(2) - 1
    m = _QUAD.match(lit)
    if m:
        a, b, c, q = (int(g) for g in m.groups())
        if q == 0 or c < 0:
            raise QPDualError(f"bad quadratic literal {lit!r}")
        v = (a + b * mp.sqrt(c)) / q
        return v - mp.floor(v)
    try:
        v = mpf(lit)
    except (ValueError, TypeError):
        raise QPDualError(f"cannot parse frequency literal {lit!r}") from None
    return v


def split_literals(text: str) -> list[str]:
    """Split a comma separated vector literal, keeping quad(...) intact."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


@dataclass(frozen=True)
class Frequency:
    components: tuple
    literals: tuple = ()

    def __post_init__(self):
        comps = tuple(float(c) for c in self.components)
        if not comps:
            raise QPDualError("frequency needs at least one component")
        for c in comps:
            if not 0.0 <= c < 1.0:
                raise QPDualError(f"frequency component {c} outside [0,1)")
        object.__setattr__(self, "components", comps)
        if not self.literals:
            object.__setattr__(self, "literals", tuple(repr(c) for c in comps))

    @property
    def d(self) -> int:
        return len(self.components)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.components)

    def mp_values(self, dps: int = 50):
        with mp.workdps(dps):
            return [+_literal_mp(lit) for lit in self.literals]

    def __str__(self):
        return ",".join(self.literals)

    @classmethod
    def parse(cls, text, guard: int | None = DEFAULT_GUARD) -> "Frequency":
        if isinstance(text, Frequency):
            return text
        if isinstance(text, (int, float)):
            return cls.from_values([text], guard=guard)
        if isinstance(text, (list, tuple)):
            text = ",".join(str(t) for t in text)
        lits = split_literals(str(text))
        with mp.workdps(40):
            vals = [_literal_mp(lit) for lit in lits]
            comps = [float(v) for v in vals]
        freq = cls(tuple(comps), tuple(lits))
        if guard is not None:
            ensure_independent(freq, guard)
        return freq

    @classmethod
    def from_values(cls, values, guard: int | None = DEFAULT_GUARD) -> "Frequency":
        vals = [float(v) for v in np.atleast_1d(values)]
        freq = cls(tuple(vals), tuple(repr(v) for v in vals))
        if guard is not None:
            ensure_independent(freq, guard)
        return freq


def sup_norm(k) -> np.ndarray:
    return np.max(np.abs(np.atleast_2d(k)), axis=-1)


def lattice_box(bound: int, d: int) -> np.ndarray:
    """All integer vectors with sup norm <= bound, shape ((2*bound+1)**d, d)."""
    r = np.arange(-bound, bound + 1)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def half_box(bound: int, d: int) -> np.ndarray:
    """Nonzero vectors of the box up to sign (first nonzero entry positive)."""
    k = lattice_box(bound, d)
    keep = np.zeros(len(k), dtype=bool)
    for i in range(d):
        undecided = np.all(k[:, :i] == 0, axis=1)
        keep |= undecided & (k[:, i] > 0)
    return k[keep]


def dist_to_int(x):
    x = np.asarray(x, dtype=float)
    return np.abs(x - np.rint(x))


def rational_relation(alpha: Frequency, bound: int = DEFAULT_GUARD, tol: float = 1e-12):
    """Smallest nonzero n with <n, alpha> an integer, or None."""
    k = half_box(bound, alpha.d)
    dist = dist_to_int(k @ alpha.values)
    bad = np.nonzero(dist < tol)[0]
    if len(bad) == 0:
        return None
    order = np.argsort(sup_norm(k[bad]), kind="stable")
    return k[bad][order[0]]


def ensure_independent(alpha: Frequency, bound: int = DEFAULT_GUARD):
    n = rational_relation(alpha, bound)
    if n is not None:
        raise RationalInputError(
            f"frequency {alpha} is rationally dependent: <{n.tolist()}, alpha> is an integer",
            denominator=int(sup_norm(n)[0]))


GOLDEN = Frequency.parse("golden")
SILVER = Frequency.parse("silver")


@dataclass(frozen=True)
class DiophantineFreqParams:
    kappa: float
    tau: float
    scan_bound: int = 0

    def __post_init__(self):
        if self.kappa <= 0:
            raise QPDualError("kappa must be positive")

    def for_dim(self, d: int) -> "DiophantineFreqParams":
        if self.tau <= d - 1:
            raise QPDualError(f"tau must exceed d-1 = {d - 1}")
        bound = self.scan_bound or (10**4 if d == 1 else 10**2)
        return DiophantineFreqParams(self.kappa, self.tau, bound)


@dataclass(frozen=True)
class DiophantinePhaseParams:
    gamma: float
    tau_prime: float
    scan_bound: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise QPDualError("gamma must be positive")
        if self.scan_bound < 0:
            raise QPDualError("scan_bound must be nonnegative")

    @classmethod
    def localization_class(cls, gamma, tau, d, scan_bound=0):
        return cls(gamma, 100 * tau + d, scan_bound)


@dataclass
class ContinuedFraction:
    partial_quotients: list
    convergents: list = field(default_factory=list)
    integer_part: int = 0


def continued_fraction(x, depth: int, dps: int = 60) -> ContinuedFraction:
    """Partial quotients a_1..a_depth of x in (0,1) with their convergents.

    Floats are taken at face value and checked against double precision;
    literals and Frequency inputs are expanded in extended precision.
    """
    if depth < 1:
        raise QPDualError("depth must be >= 1")
    if isinstance(x, Frequency):
        if x.d != 1:
            raise QPDualError("continued fraction needs a scalar")
        x = x.literals[0]
    with mp.workdps(dps):
        if isinstance(x, str):
            val = _literal_mp(x)
            tol = mpf(10) ** (-(dps - 15))
        elif isinstance(x, Fraction):
            val = mpf(x.numerator) / x.denominator
            tol = mpf(10) ** (-(dps - 15))
        elif isinstance(x, mpf):
            val = mpf(x)
            tol = mpf(10) ** (-(dps - 15))
        else:
            val = mpf(float(x))
            tol = mpf(2) ** -50
        a0 = int(mp.floor(val))
        rem = val - a0
        quotients, convs = [], []
        p_prev, q_prev, p, q = 1, 0, a0, 1
        y = rem
        for _ in range(depth):
            if y == 0:
                raise RationalInputError(f"x is rational with denominator {q}", denominator=q)
            inv = 1 / y
            a = int(mp.floor(inv))
            y = inv - a
            p, p_prev = a * p + p_prev, p
            q, q_prev = a * q + q_prev, q
            quotients.append(a)
            convs.append((p, q))
            if abs(val - mpf(p) / q) < tol:
                raise RationalInputError(
                    f"x is rational to working precision with denominator {q}", denominator=q)
    return ContinuedFraction(quotients, convs, a0)


def _dc_scan_freq(alpha: np.ndarray, kappa, tau, bound):
    d = len(alpha)
    if d == 1:
        n = np.arange(1, bound + 1)[:, None]
    else:
        n = half_box(bound, d)
    dist = dist_to_int(n @ alpha)
    dist[dist < RESONANCE_TOL] = 0.0
    norms = sup_norm(n).astype(float)
    prod = dist * norms ** tau
    i = int(np.argmin(prod))
    return n[i], float(prod[i])


def check_freq_dc(alpha: Frequency, params: DiophantineFreqParams) -> dict:
    """Scan ||<n,alpha>|| > kappa/|n|^tau over 0 < |n| <= scan_bound."""
    d = alpha.d
    bound = params.scan_bound or (10**4 if d == 1 else 10**2)
    if bound < 1:
        raise QPDualError("scan_bound must be >= 1")
    n, margin = _dc_scan_freq(alpha.values, params.kappa, params.tau, bound)
    n = n.tolist()
    return {"holds": margin > params.kappa, "worst": (n[0] if d == 1 else n, margin),
            "scan_bound": bound}


def check_phase_dc(theta: float, alpha: Frequency, params: DiophantinePhaseParams) -> dict:
    """Scan ||2 theta - <k,alpha>|| >= gamma/(|k|+1)^tau' over |k| <= scan_bound, k = 0 included."""
    d = alpha.d
    bound = params.scan_bound if params.scan_bound else (10**4 if d == 1 else 10**2)
    if d == 1:
        k = np.arange(-bound, bound + 1)[:, None]
    else:
        k = lattice_box(bound, d)
    dist = dist_to_int(2.0 * theta - k @ alpha.values)
    dist[dist < RESONANCE_TOL] = 0.0
    with np.errstate(divide="ignore"):
        logm = np.log(dist) + params.tau_prime * np.log(sup_norm(k) + 1.0)
    i = int(np.argmin(logm))
    margin = float(np.exp(logm[i])) if np.isfinite(logm[i]) else 0.0
    holds = bool(np.isfinite(logm[i]) and logm[i] >= math.log(params.gamma))
    kv = k[i].tolist()
    return {"holds": holds, "worst": (kv[0] if d == 1 else kv, margin), "scan_bound": bound}


def shifted_phase_params(params: DiophantinePhaseParams, k) -> DiophantinePhaseParams:
    """Class of the shifted phase theta + <k,alpha>, with the (|k|+1)^-tau' loss."""
    nk = int(sup_norm(np.atleast_1d(k))[0])
    return DiophantinePhaseParams(params.gamma * (nk + 1.0) ** (-params.tau_prime),
                                  params.tau_prime, params.scan_bound)


def orbit_safe_params(params: DiophantinePhaseParams, k) -> DiophantinePhaseParams:
    """Provably valid class for theta + <k,alpha>: the index moves by 2k, so the loss is (2|k|+1)^-tau'."""
    nk = int(sup_norm(np.atleast_1d(k))[0])
    return DiophantinePhaseParams(params.gamma * (2.0 * nk + 1.0) ** (-params.tau_prime),
                                  params.tau_prime, params.scan_bound)


def _union_length(intervals):
    if not intervals:
        return mpf(0)
    intervals.sort(key=lambda t: t[0])
    total = mpf(0)
    lo, hi = intervals[0]
    for a, b in intervals[1:]:
        if a > hi:
            total += hi - lo
            lo, hi = a, b
        elif b > hi:
            hi = b
    return total + (hi - lo)


def excluded_in_window(alpha: Frequency, params: DiophantinePhaseParams, a, b, k_cut: int,
                       dps: int = 50):
    """Measure of the union of the exclusion intervals Theta_k, |k| <= k_cut, inside (a, b)."""
    with mp.workdps(dps):
        a, b = mpf(a), mpf(b)
        al = alpha.mp_values(dps)
        pieces = []
        for k in itertools.product(range(-k_cut, k_cut + 1), repeat=alpha.d):
            c = mp.fsum(ki * ai for ki, ai in zip(k, al))
            r = mpf(params.gamma) / (max(abs(ki) for ki in k) + 1) ** mpf(params.tau_prime)
            # 2 theta in (c + j - r, c + j + r)  <=>  theta in ((c+j-r)/2, (c+j+r)/2)
            jlo = int(mp.floor(2 * a - c - r)) - 1
            jhi = int(mp.ceil(2 * b - c + r)) + 1
            for j in range(jlo, jhi + 1):
                lo = max(a, (c + j - r) / 2)
                hi = min(b, (c + j + r) / 2)
                if hi > lo:
                    pieces.append((lo, hi))
        return _union_length(pieces)


def tail_bound(params: DiophantinePhaseParams, d: int, k_cut: int):
    """Upper bound on the total length of Theta_k with |k| > k_cut.

    Each Theta_k meets a window shorter than 1/4 in at most one interval of
    length gamma/(|k|+1)^tau'; the shell |k| = j holds at most 2d(2j+1)^(d-1)
    vectors, and the sum is bounded by its integral.
    """
    tp = params.tau_prime
    if tp <= d:
        return math.inf
    with mp.workdps(30):
        return (mpf(params.gamma) * 2 * d * mpf(3) ** (d - 1)
                * (k_cut + 1) ** (mpf(d) - tp) / (tp - d))


def required_k_cut(params: DiophantinePhaseParams, d: int, sigma, start: int = 50) -> int:
    """Smallest cutoff (by doubling from `start`) whose tail bound is below 1e-3 of the window."""
    tol = 2 * mpf(sigma) * mpf("1e-3")
    need = start
    while tail_bound(params, d, need) > tol:
        need = 2 * need + 1
        if need > 10**7:
            break
    return need


def homogeneity_estimate(alpha: Frequency, params: DiophantinePhaseParams, theta0, sigma,
                         k_cut: int = 50, freq_params: DiophantineFreqParams | None = None,
                         dps: int | None = None) -> dict:
    """Lower bound on the proportion of (theta0 - sigma, theta0 + sigma) left after excluding resonances."""
    if sigma <= 0:
        raise QPDualError("sigma must be positive")
    ensure_independent(alpha)
    d = alpha.d
    if dps is None:
        dps = max(50, int(-math.log10(sigma)) + 40)
    tb = tail_bound(params, d, k_cut)
    if not mp.isfinite(tb):
        raise QPDualError("tail bound diverges: need tau' > d")
    with mp.workdps(dps):
        two_sigma = 2 * mpf(sigma)
        if tb > two_sigma * mpf("1e-3"):
            need = required_k_cut(params, d, sigma, k_cut)
            raise QPDualError(f"k_cut={k_cut} too small for the tail bound; need k_cut >= {need}")
        pre = check_phase_dc(float(theta0), alpha,
                             DiophantinePhaseParams(params.gamma, params.tau_prime, k_cut))
        if not pre["holds"]:
            raise QPDualError(f"theta0 fails the phase condition at k={pre['worst'][0]}")
        th = mpf(theta0)
        inner = excluded_in_window(alpha, params, th - sigma, th + sigma, k_cut, dps)
        excluded = inner + tb
        ratio = (two_sigma - excluded) / two_sigma
        regime = "relaxed"
        if freq_params is not None:
            tau, kappa = freq_params.tau, freq_params.kappa
            bound = min(mpf(2) ** (-100 * tau), mpf(kappa) ** 2 / 16 * mpf(2) ** (-100 * tau),
                        mpf(params.gamma) / 4)
            if mpf(sigma) < bound:
                regime = "strict"
        return {"ratio": float(ratio), "excluded_measure": float(excluded),
                "tail_bound": float(tb), "k_cut": k_cut, "regime": regime}
