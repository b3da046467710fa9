"""KAM reduction of near-constant cocycles on a Fourier grid, plus constant diagonalization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .arithmetic import DiophantinePhaseParams, Frequency, check_phase_dc, dist_to_int, sup_norm
from .cocycle import (Cocycle, conjugate, det2, grid_points, inv2, rotation, rotation_number,
                      sl2_exp, sl2_log, spectral_norm)
from .errors import ConvergenceError, NotEllipticError, QPDualError, ResonanceError

SCHEMA_VERSION = 1
COEFF_DROP = 1e-16
NOISE_FLOOR = 1e-14


# ---------------------------------------------------------------- grid helpers

def fft_modes(n: int, d: int) -> np.ndarray:
    """Integer frequencies of an n^d FFT grid, shape (n,)*d + (d,)."""
    f = np.rint(np.fft.fftfreq(n, 1.0 / n)).astype(np.int64)
    return np.stack(np.meshgrid(*([f] * d), indexing="ij"), axis=-1)


def _fft(vals, d):
    n = vals.shape[0]
    return np.fft.fftn(vals, axes=tuple(range(d))) / n ** d


def _ifft(hat, d):
    n = hat.shape[0]
    return np.fft.ifftn(hat, axes=tuple(range(d))) * n ** d


def _band(n, d, cutoff=None):
    k = sup_norm(fft_modes(n, d))
    ok = 2 * k < n
    if cutoff is not None:
        ok &= k <= cutoff
    return ok


# ---------------------------------------------------------------- conjugations

@dataclass(eq=False)
class FourierConjugation:
    """B(x) = C(x) R_{<degree,x>/2} with C(x) = sum_k coeffs[k] exp(2 pi i <k,x>) real-valued."""

    modes: np.ndarray
    coeffs: np.ndarray
    degree: np.ndarray
    strip: float = 0.0
    strip_constant: float = 0.0

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.int64).reshape(len(self.coeffs), -1)
        self.coeffs = np.asarray(self.coeffs, dtype=complex).reshape(-1, 2, 2)
        self.degree = np.asarray(self.degree, dtype=np.int64).ravel()

    @property
    def d(self) -> int:
        return self.modes.shape[1]

    @property
    def cutoff(self) -> int:
        return int(sup_norm(self.modes).max()) if len(self.modes) else 0

    @classmethod
    def identity(cls, d: int = 1) -> "FourierConjugation":
        return cls(np.zeros((1, d), dtype=np.int64), np.eye(2)[None], np.zeros(d, dtype=np.int64))

    @classmethod
    def from_grid(cls, values, degree=None, drop: float = COEFF_DROP) -> "FourierConjugation":
        """Build from samples of the periodic factor C on the uniform grid."""
        values = np.asarray(values, dtype=float)
        d = values.ndim - 2
        n = values.shape[0]
        hat = _fft(values, d)
        modes = fft_modes(n, d)
        keep = _band(n, d) & (np.abs(hat).max(axis=(-2, -1)) > drop)
        deg = np.zeros(d, dtype=np.int64) if degree is None else degree
        out = cls(modes[keep], hat[keep], deg)
        out.strip, out.strip_constant = out.fit_strip()
        return out

    def shell_max(self) -> np.ndarray:
        shells = sup_norm(self.modes)
        out = np.zeros(self.cutoff + 1)
        np.maximum.at(out, shells, np.abs(self.coeffs).max(axis=(-2, -1)))
        return out

    def fit_strip(self, floor: float = 1e-14):
        """Least-squares decay rate of the shell maxima, returned as (strip, constant)."""
        s = self.shell_max()
        j = np.nonzero(s > floor)[0]
        j = j[j >= 1]
        if len(j) >= 2:
            slope = np.polyfit(j, np.log(s[j]), 1)[0]
            h = max(-slope / (2 * np.pi), 0.0)
        else:
            # nothing but the constant term above the floor
            h = math.log(max(s[0], 1.0) / floor) / (2 * np.pi)
        jj = np.arange(len(s))
        return float(h), float(np.max(s * np.exp(2 * np.pi * h * jj)))

    def _twist(self, x):
        if not np.any(self.degree):
            return None
        return rotation(0.5 * (x @ self.degree.astype(float)))

    def periodic(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        ph = np.exp(2j * np.pi * (x @ self.modes.T.astype(float)))
        return np.einsum("...m,mij->...ij", ph, self.coeffs).real

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        out = self.periodic(x)
        tw = self._twist(x)
        return out if tw is None else out @ tw

    def on_grid(self, n: int, shift=None) -> np.ndarray:
        """B(x + shift) at the points of the uniform n^d grid (x not reduced mod 1)."""
        d = self.d
        if self.cutoff * 2 >= n:
            raise QPDualError(f"grid {n} too coarse for cutoff {self.cutoff}")
        hat = np.zeros((n,) * d + (2, 2), dtype=complex)
        idx = tuple((self.modes % n).T)
        c = self.coeffs
        if shift is not None:
            shift = np.atleast_1d(np.asarray(shift, dtype=float))
            c = c * np.exp(2j * np.pi * (self.modes @ shift))[:, None, None]
        hat[idx] = c
        vals = _ifft(hat, d).real
        if np.any(self.degree):
            x = grid_points(n, d)
            if shift is not None:
                x = x + shift
            vals = vals @ rotation(0.5 * (x @ self.degree.astype(float)))
        return vals

    def to_json(self) -> str:
        keep = np.abs(self.coeffs).max(axis=(-2, -1)) > COEFF_DROP
        rows = []
        for k, c in zip(self.modes[keep], self.coeffs[keep]):
            flat = c.ravel()
            rows.append([int(v) for v in k] + [float(v) for z in flat for v in (z.real, z.imag)])
        return json.dumps({"schema_version": SCHEMA_VERSION, "degree": self.degree.tolist(),
                           "strip": self.strip, "strip_constant": self.strip_constant,
                           "coeffs": rows})

    @classmethod
    def from_json(cls, text: str) -> "FourierConjugation":
        doc = json.loads(text)
        d = len(doc["degree"])
        rows = np.array(doc["coeffs"], dtype=float).reshape(len(doc["coeffs"]), d + 8)
        modes = rows[:, :d].astype(np.int64)
        vals = rows[:, d::2] + 1j * rows[:, d + 1::2]
        return cls(modes, vals.reshape(-1, 2, 2), doc["degree"], doc.get("strip", 0.0),
                   doc.get("strip_constant", 0.0))


# ---------------------------------------------------------------- config and reports

@dataclass(frozen=True)
class KamConfig:
    fourier_cutoff: int = 48
    divisor_floor: float = 1e-8
    tol_residual: float = 1e-10
    max_iters: int = 20
    strip_schedule: tuple = (0.5, 0.4, 0.3, 0.2, 0.15, 0.125)
    grid: int | None = None
    polish_iters: int = 2
    max_initial: float = 0.5
    n_rot: int = 100000

    def __post_init__(self):
        if self.divisor_floor <= 0:
            raise QPDualError("divisor_floor must be positive")
        s = tuple(float(h) for h in self.strip_schedule)
        if not s or any(b >= a for a, b in zip(s, s[1:])) or s[-1] <= 0:
            raise QPDualError("strip_schedule must be positive and strictly decreasing")
        object.__setattr__(self, "strip_schedule", s)

    @classmethod
    def for_dim(cls, d: int, **kw) -> "KamConfig":
        if d > 1 and "fourier_cutoff" not in kw:
            kw["fourier_cutoff"] = 12
        return cls(**kw)

    def grid_size(self) -> int:
        if self.grid:
            return int(self.grid)
        return 1 << int(math.ceil(math.log2(3 * self.fourier_cutoff + 1)))

    def cutoff_at(self, j: int) -> int:
        """Fourier cutoff of Newton step j, growing as the strip shrinks."""
        h = self.strip_schedule
        h0, hj = h[0], h[min(j, len(h) - 1)]
        k0 = max(1, math.ceil(self.fourier_cutoff * h[-1] / h0))
        return min(self.fourier_cutoff, math.ceil(k0 * h0 / hj))


@dataclass
class ResonanceReport:
    resonant_modes: list = field(default_factory=list)
    action: str = "none"

    def to_dict(self) -> dict:
        return {"resonant_modes": [[k, c, float(v)] for k, c, v in self.resonant_modes],
                "action": self.action}


@dataclass
class KamResult:
    B: FourierConjugation
    A: np.ndarray
    residual: float
    iterations: int
    history: list
    slope: float | None
    report: ResonanceReport
    rho_A: float
    grid: int

    @property
    def quadratic_ok(self):
        return None if self.slope is None else self.slope >= 1.8


# ---------------------------------------------------------------- constants

def constant_rotation(A) -> float:
    """Rotation number in (0,1) of a constant elliptic SL(2,R) matrix."""
    A = np.asarray(A, dtype=float)
    half = 0.5 * (A[0, 0] + A[1, 1])
    if abs(half) >= 1.0:
        raise NotEllipticError(f"|trace| = {2 * abs(half):.6g} >= 2")
    r = math.acos(half) / (2 * np.pi)
    return r if A[1, 0] > 0 else 1.0 - r


def _eigframe(A, rho):
    """U with U^-1 A U = diag(e^{2 pi i rho}, e^{-2 pi i rho}), A real elliptic."""
    lam = np.exp(2j * np.pi * rho)
    v = np.array([A[0, 1], lam - A[0, 0]], dtype=complex)
    U = np.stack([v, v.conj()], axis=1)
    return U / np.sqrt(U[0, 0] * U[1, 1] - U[0, 1] * U[1, 0])


def diagonalize_sl2(A, rho: float, gamma: float, tau_prime: float) -> np.ndarray:
    """Unimodular U with U^-1 A U = diag(e^{2 pi i rho}, e^{-2 pi i rho}).

    Either sign of rho is accepted; it selects which eigenvector goes first.
    """
    A = np.asarray(A, dtype=float)
    if abs(A[0, 0] + A[1, 1]) >= 2.0:
        raise NotEllipticError("constant is not elliptic (|trace| >= 2)")
    if abs(math.cos(2 * np.pi * rho) - 0.5 * (A[0, 0] + A[1, 1])) > 1e-8:
        raise QPDualError(f"rho = {rho} does not match the eigenvalues of A")
    if dist_to_int(2 * rho) < gamma:
        raise ResonanceError(f"||2 rho|| < gamma = {gamma}",
                             ResonanceReport([(0, "diag", float(dist_to_int(2 * rho)))], "aborted"))
    U = _eigframe(A, rho)
    bound = 2.0 ** tau_prime * math.sqrt(2 * spectral_norm(A) / gamma)
    if spectral_norm(U) > bound:
        raise QPDualError(f"||U|| = {spectral_norm(U):.3g} exceeds the bound {bound:.3g}")
    return U


def _log_sl2c(M, rho):
    # X with exp(X) = M and eigenvalues near +-2 pi i rho
    half = 0.5 * (M[0, 0] + M[1, 1])
    mu = np.arccosh(complex(half))
    if abs(mu) < 1e-12:
        return M - np.eye(2)
    return mu / np.sinh(mu) * (M - half * np.eye(2))


def diagonalize_nearby(A, A_prime, rho, rho_prime, gamma, tau_prime, epsilon: float = 0.1,
                       relaxed: bool = False) -> dict:
    """Diagonalize A and a nearby A' with U' = U P close to U.

    P is built from the log of U^-1 A' U = exp([[a, b], [c, -a]]) by the
    explicit eigenvector formula with denominator 2 pi (x + i y + i rho').
    """
    A, A_prime = np.asarray(A, dtype=float), np.asarray(A_prime, dtype=float)
    delta = float(spectral_norm(A - A_prime))
    threshold = min(1 / (1e6 * np.pi), (gamma / 2.0 ** tau_prime) ** 0.1, epsilon ** 10)
    if delta >= threshold and not relaxed:
        raise QPDualError(f"||A - A'|| = {delta:.3g} is not below the required {threshold:.3g}")
    U = diagonalize_sl2(A, rho, gamma, tau_prime)
    if abs(math.cos(2 * np.pi * rho_prime) - 0.5 * np.trace(A_prime)) > 1e-8:
        raise QPDualError(f"rho' = {rho_prime} does not match the eigenvalues of A'")
    r_ref = rho - round(rho)
    rp = rho_prime - round(rho_prime)
    # rho' must sit on the same side as rho for the eigenvalue labels to match
    if abs(rp - r_ref) > abs(-rp - r_ref):
        rp = -rp
    X = _log_sl2c(np.linalg.solve(U, A_prime @ U), r_ref)
    a, b, c = X[0, 0], X[0, 1], X[1, 0]
    den = a + 2j * np.pi * rp
    P = np.array([[1.0, -b / den], [c / den, 1.0]]) / np.sqrt(1.0 + b * c / den ** 2)
    U2 = U @ P
    D = np.linalg.solve(U2, A_prime @ U2)
    dist = float(spectral_norm(U - U2))
    off = max(abs(D[0, 1]), abs(D[1, 0]))
    if off > 1e-8 * max(1.0, spectral_norm(A_prime)):
        raise ConvergenceError(f"U'^-1 A' U' off-diagonal {off:.2e}", [off])
    if not relaxed and dist > delta ** 0.1 + 1e-14:
        raise QPDualError(f"||U - U'|| = {dist:.3g} exceeds delta^(1/10)")
    return {"U": U, "U_prime": U2, "dist": dist, "delta": delta, "threshold": threshold,
            "relaxed": bool(relaxed and delta >= threshold)}


# ---------------------------------------------------------------- cohomological equation

def divisors(kdot, rho):
    """Small divisors for the diagonal, (1,2) and (2,1) components in the eigenframe."""
    e = np.exp(2j * np.pi * kdot)
    return (e - 1.0, e * np.exp(-4j * np.pi * rho) - 1.0, e * np.exp(4j * np.pi * rho) - 1.0)


def _solve_hat(ghat, modes, kdot, rho, cutoff, floor, report):
    n = ghat.shape[0]
    d = modes.shape[-1]
    band = _band(n, d, cutoff)
    zero = np.all(modes == 0, axis=-1)
    dg, d12, d21 = divisors(kdot, rho)
    Y = np.zeros_like(ghat)
    for (i, j), div in (((0, 0), dg), ((1, 1), dg), ((0, 1), d12), ((1, 0), d21)):
        small = band & (np.abs(div) < floor)
        if i != j and np.any(small & zero):
            report.resonant_modes.append((0, "offdiag", float(np.abs(div[zero]).min())))
            report.action = "aborted"
            raise ResonanceError("k = 0 off-diagonal divisor below the floor: 2 rho is resonant", report)
        use = band & ~small & ~zero if i == j else band & ~small
        Y[..., i, j][use] = ghat[..., i, j][use] / div[use]
        if i <= j and np.any(small & ~zero):
            name = "diag" if i == j else "offdiag"
            for k, v in zip(modes[small & ~zero], np.abs(div[small & ~zero])):
                kk = int(k[0]) if d == 1 else k.tolist()
                if (kk, name) not in [(m[0], m[1]) for m in report.resonant_modes]:
                    report.resonant_modes.append((kk, name, float(v)))
            report.action = "mode_skipped"
    const = np.where(zero, ghat[..., 0, 0], 0.0).sum()
    return Y, const


def cohomological_solve(A0, f, alpha: Frequency, cutoff: int, divisor_floor: float = 1e-8) -> dict:
    """Solve f + Y - A0^-1 Y(. + alpha) A0 = [f]_0 for Y on a Fourier grid.

    f holds samples of a real sl(2,R) field on the uniform n^d grid.  The
    returned Y is real; `const` is the commuting mean left in the constant.
    Modes whose divisor falls below divisor_floor are left unsolved and
    listed in the report.
    """
    A0 = np.asarray(A0, dtype=float)
    f = np.asarray(f, dtype=float)
    d = f.ndim - 2
    n = f.shape[0]
    rho = constant_rotation(A0)
    U = _eigframe(A0, rho)
    Ui = np.linalg.inv(U)
    modes = fft_modes(n, d)
    kdot = modes @ alpha.values
    ghat = _fft(Ui @ f @ U, d)
    report = ResonanceReport()
    Yhat, const = _solve_hat(ghat, modes, kdot, rho, cutoff, divisor_floor, report)
    Y = (U @ _ifft(Yhat, d) @ Ui).real
    C = (U @ np.diag([const, -const]) @ Ui).real
    return {"Y": Y, "Yhat_frame": Yhat, "const": C, "frame": U, "rho": rho, "report": report}


# ---------------------------------------------------------------- KAM

def _shift_grid(vals, phase, band):
    d = phase.ndim
    hat = _fft(vals, d) * phase[..., None, None]
    hat[~band] = 0.0
    return _ifft(hat, d).real


def _truncate(vals, band):
    d = band.ndim
    hat = _fft(vals, d)
    hat[~band] = 0.0
    return _ifft(hat, d).real


def _slope(history):
    """Fitted order q in r_{j+1} ~ C r_j^q.

    The first step starts from the raw input, whose residual is the size of
    the perturbation rather than a Newton output, so it is left out of the
    fit whenever two later steps remain.
    """
    pairs = [(a, b) for a, b in zip(history, history[1:]) if b > NOISE_FLOOR and b < a]
    if len(pairs) > 2 and pairs[0][0] == history[0]:
        pairs = pairs[1:]
    if len(pairs) < 2:
        return None
    x, y = np.log([p[0] for p in pairs]), np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def kam_reduce(c: Cocycle, alpha: Frequency | None = None,
               target_rho_params: DiophantinePhaseParams | None = None,
               config: KamConfig | None = None, rho: float | None = None,
               rho_guess: float | None = None, B0: FourierConjugation | None = None,
               A0=None) -> KamResult:
    """Newton iteration B <- B exp(Y) until B(x+alpha)^-1 A(x) B(x) is constant.

    The input must already be close to a constant elliptic matrix.  When
    target_rho_params is given the fibered rotation number (computed unless
    `rho` is passed) must satisfy that phase condition.  For Schrödinger
    cocycles whose mean is not elliptic (energies just outside [-2, 2]),
    `rho_guess` supplies the starting constant [[2 cos 2 pi rho, -1], [1, 0]].
    B0 and A0 warm-start the iteration (degree-zero B0 only).
    """
    alpha = alpha or c.alpha
    d = alpha.d
    cfg = config or KamConfig.for_dim(d)
    if target_rho_params is not None:
        if rho is None:
            rho = rotation_number(c, cfg.n_rot)["rho"]
        chk = check_phase_dc(rho, alpha, target_rho_params)
        if not chk["holds"]:
            k, margin = chk["worst"]
            raise ResonanceError(f"rotation number {rho:.12g} fails the phase condition at k = {k}",
                                 ResonanceReport([(k, "target", margin)], "aborted"))
    n = cfg.grid_size()
    pts = grid_points(n, d)
    S = c.matrices(pts.reshape(-1, d)).reshape((n,) * d + (2, 2))
    modes = fft_modes(n, d)
    kdot = modes @ alpha.values
    Ac = S.reshape(-1, 2, 2).mean(axis=0)
    dA = det2(Ac)
    if dA <= 0:
        raise NotEllipticError("mean of the cocycle has non-positive determinant")
    Ac = Ac / math.sqrt(dA)
    if abs(np.trace(Ac)) >= 2.0 and c.kind == "schrodinger":
        guess = rho if rho_guess is None else rho_guess
        if guess is not None:
            Ac = np.array([[2 * math.cos(2 * np.pi * guess), -1.0], [1.0, 0.0]])
    if A0 is not None:
        Ac = np.array(A0, dtype=float)
    if B0 is None:
        B = np.broadcast_to(np.eye(2), S.shape).copy()
    else:
        if np.any(B0.degree):
            raise QPDualError("warm start needs a degree-zero conjugation")
        B = B0.on_grid(n)
    report = ResonanceReport()
    history = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        best = _newton(S, B, Ac, modes, kdot, _band(n, d, cfg.fourier_cutoff), cfg, report, history)
    r, B, Ac, its = best
    if r > cfg.tol_residual:
        raise ConvergenceError(f"no convergence: best residual {r:.3g} after {len(history) - 1} steps",
                               history)
    conj = FourierConjugation.from_grid(B)
    return KamResult(conj, Ac, r, its, history[:its + 1], _slope(history[:its + 1]), report,
                     constant_rotation(Ac), n)


def _newton(S, B, Ac, modes, kdot, full, cfg, report, history):
    d = modes.shape[-1]
    phase = np.exp(2j * np.pi * kdot)
    best, polished = None, 0
    for it in range(cfg.max_iters + 1):
        G = inv2(_shift_grid(B, phase, full)) @ S @ B
        r = float(spectral_norm(G - Ac).max())
        history.append(r)
        if not np.isfinite(r):
            break
        if best is None or r < best[0]:
            best = (r, B, Ac, it)
        if it == 0 and r > cfg.max_initial:
            raise ConvergenceError(f"initial residual {r:.3g} above max_initial {cfg.max_initial}",
                                   history)
        if r <= cfg.tol_residual:
            if it == 0:
                break  # already constant: nothing to reduce
            polished += 1
            if polished > cfg.polish_iters or (len(history) > 1 and r > history[-2] / 10):
                break
        elif it >= 3 and r > history[0]:
            break
        if it == cfg.max_iters:
            break
        f = sl2_log(inv2(Ac) @ G)
        sol_rho = constant_rotation(Ac)
        U = _eigframe(Ac, sol_rho)
        Ui = np.linalg.inv(U)
        ghat = _fft(Ui @ f @ U, d)
        Yhat, const = _solve_hat(ghat, modes, kdot, sol_rho, cfg.cutoff_at(it),
                                 cfg.divisor_floor, report)
        Y = (U @ _ifft(Yhat, d) @ Ui).real
        Ac = Ac @ (U @ np.diag(np.exp([const, -const])) @ Ui).real
        B = _truncate(B @ sl2_exp(Y), full)
    return best


def verify_conjugation(S: Cocycle, B: FourierConjugation, A, n_rot: int = 100000,
                       grid: int | None = None) -> dict:
    """Grid residual of B(x+alpha)^-1 S(x) B(x) - A and the rotation-number shift rule."""
    d = S.d
    A = np.asarray(A, dtype=float)
    n = grid or (1 << 10 if d == 1 else 1 << (20 // d))
    pts = grid_points(n, d)
    Sx = S.matrices(pts.reshape(-1, d)).reshape((n,) * d + (2, 2))
    G = inv2(B.on_grid(n, S.alpha.values)) @ Sx @ B.on_grid(n)
    residual = float(spectral_norm(G - A).max())
    rho_s = rotation_number(S, n_rot)["rho_raw"]
    rho_c = rotation_number(conjugate(S, B), n_rot)["rho_raw"]
    shift = 0.5 * float(B.degree @ S.alpha.values)
    defect = float(dist_to_int(rho_c - (rho_s - shift)))
    out = {"residual": residual, "rho_shift_ok": defect <= 4.0 / n_rot, "rho_defect": defect,
           "rho_input": rho_s, "rho_conjugated": rho_c, "grid": n}
    try:
        out["rho_A"] = constant_rotation(A)
        out["rho_A_defect"] = float(dist_to_int(out["rho_A"] - (rho_s - shift)))
    except NotEllipticError:
        pass
    return out
