"""Quasi-periodic SL(2,R) cocycles and their dynamical invariants."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .arithmetic import Frequency
from .errors import HomotopyError, QPDualError, ResolutionError
from .potential import PotentialFourier

CHUNK = 1 << 17
MAX_STEPS = 10**7

M_SU11 = np.array([[1, -1j], [1, 1j]]) / 2j
M_SU11_INV = np.linalg.inv(M_SU11)


def rotation(t) -> np.ndarray:
    """R_t = [[cos 2 pi t, -sin 2 pi t], [sin 2 pi t, cos 2 pi t]] (broadcasts over t)."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def sl2_element(x, y, z) -> np.ndarray:
    return np.array([[x, y + z], [y - z, -x]], dtype=float)


def inv2(m: np.ndarray) -> np.ndarray:
    """Inverse of (a stack of) 2x2 matrices via the adjugate."""
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1]
    adj[..., 1, 1] = m[..., 0, 0]
    adj[..., 0, 1] = -m[..., 0, 1]
    adj[..., 1, 0] = -m[..., 1, 0]
    return adj / det[..., None, None]


def det2(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def spectral_norm(m) -> np.ndarray:
    """Largest singular value of 2x2 matrices, closed form."""
    fro2 = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    det = np.abs(det2(m))
    return np.sqrt(0.5 * (fro2 + np.sqrt(np.maximum(fro2 ** 2 - 4 * det ** 2, 0.0))))


def sl2_exp(X) -> np.ndarray:
    """exp of traceless 2x2 matrices: X^2 = -det(X) I gives a closed form."""
    X = np.asarray(X)
    delta = -det2(X)
    s = np.sqrt(delta.astype(complex))
    small = np.abs(s) < 1e-8
    s_safe = np.where(small, 1.0, s)
    ch = np.where(small, 1 + delta / 2 + delta ** 2 / 24, np.cosh(s_safe))
    sh = np.where(small, 1 + delta / 6 + delta ** 2 / 120, np.sinh(s_safe) / s_safe)
    out = sh[..., None, None] * X + ch[..., None, None] * np.eye(2)
    if np.isrealobj(X):
        out = out.real
    return out


def sl2_log(M) -> np.ndarray:
    """Principal log of unimodular 2x2 matrices near the identity (trace > -2)."""
    M = np.asarray(M)
    half = 0.5 * (M[..., 0, 0] + M[..., 1, 1])
    s = np.arccosh(half.astype(complex))
    small = np.abs(s) < 1e-8
    s_safe = np.where(small, 1.0, s)
    delta = s ** 2
    fac = np.where(small, 1 - delta / 6 + 7 * delta ** 2 / 360, s_safe / np.sinh(s_safe))
    out = fac[..., None, None] * (M - half[..., None, None] * np.eye(2))
    if np.isrealobj(M):
        out = out.real
    return out


def to_su11(A) -> np.ndarray:
    """M A M^{-1}; sends sl(2,R) to su(1,1) and SL(2,R) to SU(1,1)."""
    return M_SU11 @ np.asarray(A) @ M_SU11_INV


def from_su11(C, real=True) -> np.ndarray:
    out = M_SU11_INV @ np.asarray(C) @ M_SU11
    return out.real if real else out


def polar_angle(m) -> np.ndarray:
    """Angle (radians) of the rotation factor in the polar decomposition of 2x2 matrices."""
    return np.arctan2(m[..., 1, 0] - m[..., 0, 1], m[..., 0, 0] + m[..., 1, 1])


def _split(a: float):
    hi = float(np.float32(a))
    return hi, a - hi


def orbit_points(x0, alpha: Frequency, start: int, count: int) -> np.ndarray:
    """Points x0 + j alpha mod 1 for j = start .. start+count-1, shape (count, d)."""
    j = np.arange(start, start + count, dtype=float)[:, None]
    out = np.empty((count, alpha.d))
    for i, a in enumerate(alpha.components):
        hi, lo = _split(a)
        out[:, i] = (x0[i] + np.mod(j[:, 0] * hi, 1.0) + j[:, 0] * lo) % 1.0
    return out


def grid_points(n: int, d: int) -> np.ndarray:
    """Uniform grid on the torus, shape (n,)*d + (d,)."""
    g = np.arange(n) / n
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    return np.stack(mesh, axis=-1)


class Cocycle:
    """A pair (alpha, A) with A evaluated pointwise on the torus."""

    def __init__(self, alpha: Frequency, func, analytic_strip=None, kind="general",
                 potential: PotentialFourier | None = None, energy=None, constant=None):
        self.alpha = alpha
        self.func = func
        self.analytic_strip = analytic_strip
        self.kind = kind
        self.potential = potential
        self.energy = energy
        self.constant = constant

    @property
    def d(self) -> int:
        return self.alpha.d

    def matrices(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return self.func(x)

    def __call__(self, x):
        return self.matrices(x)

    @classmethod
    def schrodinger(cls, V: PotentialFourier, alpha: Frequency, energy: float) -> "Cocycle":
        if V.d != alpha.d:
            raise QPDualError("potential and frequency dimensions differ")
        energy = float(energy)

        def f(x):
            v = V(x)
            out = np.zeros(v.shape + (2, 2))
            out[..., 0, 0] = energy - v
            out[..., 0, 1] = -1.0
            out[..., 1, 0] = 1.0
            return out

        return cls(alpha, f, V.claimed_strip, "schrodinger", V, energy)

    @classmethod
    def constant_map(cls, A, alpha: Frequency) -> "Cocycle":
        A = np.array(A, dtype=float)

        def f(x):
            return np.broadcast_to(A, x.shape[:-1] + (2, 2)).copy()

        return cls(alpha, f, np.inf, "constant", constant=A)


@dataclass
class Iterate:
    """A matrix product stored as matrix * 2**log2_scale."""

    matrix: np.ndarray
    log2_scale: int = 0

    def full(self) -> np.ndarray:
        return self.matrix * 2.0 ** self.log2_scale

    def log_norm(self) -> float:
        return float(np.log(spectral_norm(self.matrix)) + self.log2_scale * np.log(2.0))

    def __array__(self, dtype=None, copy=None):
        return self.full() if dtype is None else self.full().astype(dtype)


def _forward_product(c: Cocycle, x0, n: int) -> Iterate:
    m, s = np.eye(2), 0
    done = 0
    while done < n:
        cnt = min(CHUNK, n - done)
        pts = orbit_points(x0, c.alpha, done, cnt)
        if c.kind == "schrodinger":
            m, s = K.schrodinger_product(c.potential(pts), c.energy, m, s)
        else:
            m, s = K.chain_product(np.ascontiguousarray(c.matrices(pts)), m, s)
        done += cnt
    return Iterate(m, int(s))


def _adjugate(m: np.ndarray) -> np.ndarray:
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]])


def _unimodular(it: Iterate) -> Iterate:
    # det of the true product is 1, so det(matrix) * 4**s should be 1
    m, s = it.matrix, it.log2_scale
    det = det2(m)
    if det > 0:
        drift = math.log(det) + s * math.log(4.0)
        # a large drift means det(matrix) is cancellation noise: leave it alone
        if abs(drift) < 0.1:
            m = m * math.exp(-0.5 * drift)
    return Iterate(m, s)


def iterate(c: Cocycle, x, n: int) -> Iterate:
    """A_n(x) = A(x+(n-1)alpha) ... A(x) for n >= 0, and A(x+n alpha)^-1 ... A(x-alpha)^-1 for n < 0."""
    n = int(n)
    if abs(n) > MAX_STEPS:
        raise QPDualError(f"|n| = {abs(n)} exceeds the {MAX_STEPS} step guard")
    x0 = np.atleast_1d(np.asarray(x, dtype=float)) % 1.0
    if n == 0:
        return Iterate(np.eye(2), 0)
    if n > 0:
        return _unimodular(_forward_product(c, x0, n))
    back = _forward_product(c, (x0 + n * c.alpha.values) % 1.0, -n)
    # inverse of a unimodular product is its adjugate, at the same scale
    return _unimodular(Iterate(_adjugate(back.matrix), back.log2_scale))


def _sample_rng(seed, i):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, i])


def sample_points(d: int, count: int, seed) -> np.ndarray:
    """Deterministic points, one RNG stream per sample index."""
    return np.array([_sample_rng(seed, i).random(d) for i in range(count)])


def lyapunov(c: Cocycle, n: int, x_samples: int = 8, seed=0) -> dict:
    """Average of (1/n) log ||A_n(x)|| over sampled x."""
    if n < 1000:
        raise QPDualError("lyapunov needs n >= 1000")
    if x_samples < 1:
        raise QPDualError("x_samples must be >= 1")
    rates = np.array([iterate(c, x, n).log_norm() / n for x in sample_points(c.d, x_samples, seed)])
    rates = np.maximum(rates, 0.0)
    stderr = float(rates.std(ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else 0.0
    return {"L": float(rates.mean()), "stderr": stderr, "samples": rates}


def projective_angle(m) -> np.ndarray:
    return np.mod(np.arctan2(m[..., 1, 0], m[..., 0, 0]), np.pi)


def degree(B, resolution: int | None = None, d: int | None = None, lines: int = 3) -> np.ndarray:
    """Integer n with B homotopic to R_{<n,x>/2}.

    B is either an array of samples on the uniform grid, shape (r,)*d + (2, 2),
    or a callable evaluated on such a grid.
    """
    if callable(B):
        if d is None:
            d = B.alpha.d if hasattr(B, "alpha") else getattr(B, "d", 1)
        resolution = resolution or (256 if d == 1 else 48)
        pts = grid_points(resolution, d)
        samples = np.asarray(B(pts))
    else:
        samples = np.asarray(B)
    d = samples.ndim - 2
    r = samples.shape[0]
    ang = projective_angle(samples.real)
    out = np.zeros(d, dtype=np.int64)
    worst = 0.0
    for axis in range(d):
        diffs = np.diff(np.concatenate([ang, np.take(ang, [0], axis=axis)], axis=axis), axis=axis)
        diffs = (diffs + np.pi / 2) % np.pi - np.pi / 2
        worst = max(worst, float(np.max(np.abs(diffs))))
        total = diffs.sum(axis=axis) / np.pi
        wind = np.rint(total).astype(np.int64).ravel()
        picks = np.unique(np.linspace(0, wind.size - 1, min(lines, wind.size)).astype(int))
        vals = set(wind[picks].tolist())
        if len(vals) != 1:
            raise ResolutionError("winding differs between parallel lines; refine the grid",
                                  required=2 * r)
        out[axis] = vals.pop()
    if worst > np.pi / 4:
        need = int(np.ceil(r * worst / (np.pi / 4)))
        raise ResolutionError(f"direction moves {worst:.3f} rad per cell; need resolution >= {need}",
                              required=need)
    return out


class _PolarLift:
    """Continuous lift of the polar rotation angle of a degree-zero cocycle."""

    def __init__(self, c: Cocycle, resolution: int):
        self.res = resolution
        d = c.d
        pts = grid_points(resolution, d)
        mats = c.matrices(pts.reshape(-1, d)).reshape((resolution,) * d + (2, 2))
        if np.any(degree(mats) != 0):
            raise HomotopyError("cocycle is not homotopic to the identity; factor out its degree first")
        phi = polar_angle(mats)
        lifted = phi.copy()
        for axis in range(d):
            lifted = np.unwrap(lifted, axis=axis)
        self.grid = lifted
        self.d = d

    def __call__(self, pts, phi):
        idx = tuple(np.rint(pts[:, i] * self.res).astype(int) % self.res for i in range(self.d))
        ref = self.grid[idx]
        return phi + 2 * np.pi * np.rint((ref - phi) / (2 * np.pi))


def rotation_number(c: Cocycle, n: int = 100000, x0=None, resolution: int | None = None,
                    y0: float = 0.0) -> dict:
    """Fibered rotation number as the Birkhoff average of lifted angle increments.

    Schrödinger cocycles report a value in [0, 1/2]; other cocycles report
    the lift average mod 1.  `rho_half` is the same average over the first
    n/2 steps, and `error` their difference.
    """
    if n < 2:
        raise QPDualError("n must be >= 2")
    x0 = np.zeros(c.d) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float)) % 1.0
    v0, v1 = np.cos(y0), np.sin(y0)
    lift = None
    if c.kind not in ("schrodinger", "constant"):
        lift = _PolarLift(c, resolution or (512 if c.d == 1 else 48))
    elif c.kind == "constant":
        if det2(c.constant) <= 0:
            raise HomotopyError("constant map must have positive determinant")
    half = n // 2
    totals = []
    done, total = 0, 0.0
    for stop in (half, n):
        while done < stop:
            cnt = min(CHUNK, stop - done)
            pts = orbit_points(x0, c.alpha, done, cnt)
            if c.kind == "schrodinger":
                t, v0, v1 = K.schrodinger_prufer(c.potential(pts), c.energy, v0, v1)
            else:
                mats = np.ascontiguousarray(c.matrices(pts))
                phi = polar_angle(mats)
                if lift is not None:
                    phi = lift(pts, phi)
                t, v0, v1 = K.general_prufer(mats, np.ascontiguousarray(phi), v0, v1)
            total += t
            done += cnt
        totals.append(total / (2 * np.pi * stop))
    raw_half, raw = totals
    if c.kind == "schrodinger":
        rho = min(max(raw, 0.0), 0.5)
        rho_half = min(max(raw_half, 0.0), 0.5)
    else:
        rho, rho_half = raw % 1.0, raw_half % 1.0
    err = abs(raw - raw_half)
    return {"rho": float(rho), "rho_raw": float(raw), "rho_half": float(rho_half),
            "error": float(err), "n": n}


def _stable_direction(it: Iterate) -> np.ndarray:
    # right singular vector of the smallest singular value
    _, _, vt = np.linalg.svd(it.matrix)
    v = vt[1]
    return v if v[0] >= 0 else -v


def uh_test(c: Cocycle, n: int = 4000, x_samples: int = 64) -> dict:
    """Tri-state uniform hyperbolicity test: True, False or 'inconclusive'.

    Samples x on a line through the torus; requires uniform positive growth,
    agreement of the n and n/2 rates, convergence of the contracted direction
    and its continuity between neighbouring samples.
    """
    if n < 1000:
        raise QPDualError("uh_test needs n >= 1000")
    t = np.arange(x_samples) / x_samples
    xs = np.outer(t, np.ones(c.d)) + np.arange(c.d) * 0.1234
    rates, rates_half, angles, drift = [], [], [], []
    for x in xs % 1.0:
        full = iterate(c, x, n)
        part = iterate(c, x, n // 2)
        rates.append(full.log_norm() / n)
        rates_half.append(part.log_norm() / (n // 2))
        s_full, s_half = _stable_direction(full), _stable_direction(part)
        drift.append(1.0 - abs(float(s_full @ s_half)))
        angles.append(np.arctan2(s_full[1], s_full[0]) % np.pi)
    rates, rates_half = np.array(rates), np.array(rates_half)
    rate = float(rates.mean())
    stderr = float(rates.std(ddof=1) / np.sqrt(len(rates))) + float(np.max(np.abs(rates - rates_half)))
    angles = np.array(angles)
    jumps = np.abs((np.diff(np.append(angles, angles[0])) + np.pi / 2) % np.pi - np.pi / 2)
    if rate * n < 5 * np.log(n):
        status = False
    elif (rates.min() > 10 * stderr and max(drift) < 1e-8 and jumps.max() < np.pi / 8):
        status = True
    else:
        status = "inconclusive"
    return {"uniformly_hyperbolic": status, "rate": rate, "stderr": stderr,
            "min_rate": float(rates.min()), "max_jump": float(jumps.max())}


def conjugate(c: Cocycle, B, check_resolution: int = 64) -> Cocycle:
    """The cocycle x -> B(x+alpha)^-1 A(x) B(x)."""
    pts = grid_points(check_resolution if c.d == 1 else 16, c.d).reshape(-1, c.d)
    dets = np.abs(det2(np.asarray(_eval(B, pts, c.d))))
    i = int(np.argmin(dets))
    if dets[i] < 1e-12:
        raise QPDualError(f"conjugation is singular near x = {pts[i].tolist()}")
    alpha = c.alpha.values

    def f(x):
        bx = _eval(B, x, c.d)
        # no reduction mod 1: PSL-valued B changes sign across the seam
        bxa = _eval(B, x + alpha, c.d)
        out = inv2(bxa) @ c.matrices(x) @ bx
        return out.real if np.iscomplexobj(out) and np.max(np.abs(out.imag)) < 1e-10 else out

    return Cocycle(c.alpha, f, None, "general")


def _eval(B, x, d):
    x = np.asarray(x, dtype=float)
    if callable(B):
        return np.asarray(B(x))
    return np.broadcast_to(np.asarray(B), x.shape[:-1] + (2, 2))
