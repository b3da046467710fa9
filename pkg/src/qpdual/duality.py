"""Dual eigenfunctions from conjugations, their checks, and Bloch-wave reconstruction."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .arithmetic import Frequency, lattice_box, sup_norm
from .errors import QPDualError
from .potential import PotentialFourier
from .reducibility import FourierConjugation, _eigframe

SCHEMA_VERSION = 1
J = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(eq=False)
class EigenPair:
    """Complex vector u on the box |n| <= radius, stored as an array of shape (2 radius + 1,)*d."""

    energy: float
    u: np.ndarray
    phase_normalized: bool = False
    theta: float | None = None
    provenance: str = ""

    @property
    def d(self) -> int:
        return self.u.ndim

    @property
    def radius(self) -> int:
        return (self.u.shape[0] - 1) // 2

    def sites(self) -> np.ndarray:
        return lattice_box(self.radius, self.d)

    def flat(self) -> np.ndarray:
        return self.u.reshape(-1)

    def value(self, n) -> complex:
        n = np.atleast_1d(n)
        if np.any(np.abs(n) > self.radius):
            return 0.0
        return self.u[tuple(n + self.radius)]

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    @classmethod
    def from_vector(cls, vec, sites, energy, center=None, radius=None, **kw) -> "EigenPair":
        """Re-box a vector given on `sites` around `center` (default: its largest entry)."""
        vec = np.asarray(vec)
        sites = np.asarray(sites).reshape(len(vec), -1)
        d = sites.shape[1]
        c = sites[int(np.argmax(np.abs(vec)))] if center is None else np.atleast_1d(center)
        rel = sites - c
        if radius is None:
            radius = int(sup_norm(rel).max())
        u = np.zeros((2 * radius + 1,) * d, dtype=complex)
        ok = sup_norm(rel) <= radius
        u[tuple((rel[ok] + radius).T)] = vec[ok]
        return cls(float(energy), u, **kw)

    def to_json(self) -> str:
        vals = [[float(z.real), float(z.imag)] for z in self.flat()]
        return json.dumps({"schema_version": SCHEMA_VERSION, "energy": self.energy, "d": self.d,
                           "radius": self.radius, "theta": self.theta,
                           "phase_normalized": self.phase_normalized,
                           "provenance": self.provenance, "values": vals})

    @classmethod
    def from_json(cls, text: str) -> "EigenPair":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise QPDualError(f"unsupported schema_version {doc.get('schema_version')}")
        v = np.array(doc["values"], dtype=float)
        u = (v[:, 0] + 1j * v[:, 1]).reshape((2 * doc["radius"] + 1,) * doc["d"])
        return cls(doc["energy"], u, doc["phase_normalized"], doc.get("theta"), doc.get("provenance", ""))


@dataclass(frozen=True)
class GoodParams:
    gamma_tilde: float
    ell: tuple
    C: float
    C_ell: float

    def __post_init__(self):
        if self.gamma_tilde <= 0 or self.C <= 0:
            raise QPDualError("gamma_tilde and C must be positive")
        if not 0 < self.C_ell <= 1:
            raise QPDualError("C_ell must lie in (0, 1]")
        object.__setattr__(self, "ell", tuple(int(v) for v in np.atleast_1d(self.ell)))


@dataclass(eq=False)
class BlochWave:
    theta: float
    modes: np.ndarray
    coeffs: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.modes.shape[1] == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return np.exp(2j * np.pi * (x @ self.modes.T.astype(float))) @ self.coeffs


def normalize_phase(u: np.ndarray) -> np.ndarray:
    """Divide by the phase of u(0), or of the first entry above 1e-8 in shell order."""
    r = (u.shape[0] - 1) // 2
    d = u.ndim
    ref = u[(r,) * d]
    if abs(ref) <= 1e-8:
        sites = lattice_box(r, d)
        order = np.argsort(sup_norm(sites), kind="stable")
        for n in sites[order]:
            ref = u[tuple(n + r)]
            if abs(ref) > 1e-8:
                break
    return u * np.exp(-1j * np.angle(ref))


def eigenfunction_from_conjugation(B: FourierConjugation, rho_A: float, alpha: Frequency, A=None,
                                   U=None, energy: float = float("nan"), radius: int | None = None,
                                   provenance: str = "") -> EigenPair:
    """u(n) = Fourier coefficients of the (1,1) entry of B U, untwisted by the degree.

    U diagonalizes the constant with e^{2 pi i rho_A} first (computed from A
    when not given).  The result solves the dual equation at the phase
    rho_A + <degree, alpha>/2.
    """
    if U is None:
        if A is None:
            raise QPDualError("need the constant A or its diagonalizer U")
        U = _eigframe(np.asarray(A, dtype=float), rho_A)
    col = np.asarray(U)[:, 0]
    d = B.d
    deg = B.degree
    # e^{-pi i <deg,x>} R_{<deg,x>/2} = (I - iJ)/2 + e^{-2 pi i <deg,x>} (I + iJ)/2
    lo = B.coeffs @ ((np.eye(2) - 1j * J) @ col / 2)
    hi = B.coeffs @ ((np.eye(2) + 1j * J) @ col / 2)
    modes = np.concatenate([B.modes, B.modes - deg]) if np.any(deg) else B.modes
    vals = np.concatenate([lo[:, 0], hi[:, 0]]) if np.any(deg) else (lo + hi)[:, 0]
    if radius is None:
        radius = int(sup_norm(modes).max())
    u = np.zeros((2 * radius + 1,) * d, dtype=complex)
    ok = sup_norm(modes) <= radius
    np.add.at(u, tuple((modes[ok] + radius).T), vals[ok])
    nrm = np.linalg.norm(vals)
    if nrm < 1e-10:
        raise QPDualError(f"||b11||_L2 = {nrm:.2e}: degenerate conjugation")
    u = normalize_phase(u / nrm)
    theta = float((rho_A + 0.5 * deg @ alpha.values) % 1.0)
    return EigenPair(float(energy), u, True, theta, provenance)


def _apply_dual(u: np.ndarray, V: PotentialFourier, alpha: Frequency, theta: float, pad: int):
    # (L u)(n) on the box enlarged by pad, with u extended by zero
    d = u.ndim
    r = (u.shape[0] - 1) // 2
    R = r + pad
    big = np.zeros((2 * R + 1,) * d, dtype=complex)
    big[(slice(pad, pad + 2 * r + 1),) * d] = u
    out = np.zeros_like(big)
    for k, v in zip(V.modes, V.values):
        if v == 0.0:
            continue
        out += v * np.roll(big, tuple(k), axis=tuple(range(d)))
    n = lattice_box(R, d).reshape((2 * R + 1,) * d + (d,))
    out += 2 * np.cos(2 * np.pi * (theta + n @ alpha.values)) * big
    return out, R


def verify_long_range_eigen(u: EigenPair, V: PotentialFourier, alpha: Frequency, theta: float,
                            inner: float = 0.5) -> float:
    """l2 norm of (L_theta - E) u over the inner part of u's box."""
    pad = V.cutoff
    Lu, R = _apply_dual(u.u, V, alpha, theta, pad)
    res = Lu - u.energy * np.pad(u.u, pad)
    m = int(np.floor(inner * u.radius))
    sl = (slice(R - m, R + m + 1),) * u.d
    return float(np.linalg.norm(res[sl]))


def bloch_from_eigenvector(u: EigenPair, theta: float, V: PotentialFourier, alpha: Frequency,
                           x_grid, window: int = 20) -> dict:
    """psi = sum_n u(n) e^{2 pi i <n,x>}; w_n = e^{2 pi i n theta} psi(x + n alpha) should solve H w = E w."""
    d = u.d
    sites = u.sites()
    keep = np.abs(u.flat()) > 0
    wave = BlochWave(float(theta), sites[keep], u.flat()[keep])
    xs = np.asarray(x_grid, dtype=float).reshape(-1, d)
    n = np.arange(-window - 1, window + 2)
    res = []
    for x in xs:
        pts = x + n[:, None] * alpha.values
        w = np.exp(2j * np.pi * n * theta) * wave(pts)
        Hw = w[2:] + w[:-2] + V(pts[1:-1]) * w[1:-1]
        res.append(np.max(np.abs(Hw - u.energy * w[1:-1])))
    res = np.array(res)
    return {"wave": wave, "schrodinger_residual": float(res.mean()), "max_residual": float(res.max())}


def decay_fit(u: EigenPair, inner_fraction: float = 1.0, floor: float = 1e-15) -> dict:
    """Fit log(shell max of |u|) = log(prefactor) - rate * |n| over the inner shells.

    Only the leading run of shells above `floor` is used: once the envelope
    has dropped to the floor, later shells hold roundoff, not signal.
    """
    vals = np.abs(u.flat())
    shells = sup_norm(u.sites())
    m = int(np.floor(inner_fraction * u.radius))
    smax = np.zeros(m + 1)
    inside = shells <= m
    np.maximum.at(smax, shells[inside], vals[inside])
    low = np.nonzero(smax <= floor)[0]
    j = np.arange(low[0] if len(low) else m + 1)
    if len(j) < 10:
        raise QPDualError(f"only {len(j)} shells above {floor:g}; need at least 10")
    y = np.log(smax[j])
    slope, icept = np.polyfit(j, y, 1)
    fit = icept + slope * j
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - fit) ** 2) / ss if ss > 0 else 1.0
    return {"rate": float(-slope), "prefactor": float(np.exp(icept)), "r2": float(r2),
            "shells": int(len(j)), "localized": bool(-slope > 0.05 and r2 > 0.9)}


def good_check(u: EigenPair, params: GoodParams) -> dict:
    """Pointwise test of |u(n)| <= C (e^{-g|n|} + C_l e^{-g|n+l|})."""
    sites = u.sites()
    vals = np.abs(u.flat())
    ell = np.array(params.ell).reshape(1, -1)
    g = params.gamma_tilde
    bound = params.C * (np.exp(-g * sup_norm(sites)) + params.C_ell * np.exp(-g * sup_norm(sites + ell)))
    nz = vals > 0
    if not np.any(nz):
        return {"holds": True, "worst_n": None, "slack": float("inf")}
    ratio = np.full(len(vals), np.inf)
    ratio[nz] = bound[nz] / vals[nz]
    i = int(np.argmin(ratio))
    w = sites[i].tolist()
    return {"holds": bool(ratio[i] >= 1.0), "worst_n": w[0] if u.d == 1 else w,
            "slack": float(ratio[i])}
