"""Finite boxes of the Schrödinger operator and of its long-range dual."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels as K
from .arithmetic import Frequency, lattice_box, sup_norm
from .cocycle import Cocycle, orbit_points, rotation_number
from .errors import ConvergenceError, QPDualError, SizeGuardError
from .potential import PotentialFourier

SCHEMA_VERSION = 1
MAX_DIM = 20000

__all__ = ["PotentialFourier", "TruncatedOperator", "SpectralData", "build_truncation",
           "eigensolve", "ids", "ids_rotation_check", "spectral_measure"]


@dataclass(eq=False)
class TruncatedOperator:
    kind: str
    phase: object
    N: int
    alpha: Frequency
    sites: np.ndarray
    diag: np.ndarray
    offdiag: np.ndarray | None = None
    dense: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.sites)

    @property
    def matrix(self) -> np.ndarray:
        if self.dense is None:
            m = np.diag(self.diag)
            i = np.arange(self.dim - 1)
            m[i, i + 1] = self.offdiag
            m[i + 1, i] = self.offdiag
            self.dense = m
        return self.dense

    def index(self, n) -> int:
        n = np.atleast_1d(n)
        hit = np.nonzero(np.all(self.sites == n, axis=1))[0]
        if len(hit) == 0:
            raise QPDualError(f"site {n.tolist()} outside the box")
        return int(hit[0])


@dataclass(eq=False)
class SpectralData:
    eigenvalues: np.ndarray
    vectors: np.ndarray
    sites: np.ndarray
    N: int
    boundary_mass: np.ndarray = field(default=None)

    def weights_at(self, n) -> np.ndarray:
        n = np.atleast_1d(n)
        i = np.nonzero(np.all(self.sites == n, axis=1))[0][0]
        return np.abs(self.vectors[i]) ** 2


def build_truncation(V: PotentialFourier, alpha: Frequency, phase, kind: str, N: int) -> TruncatedOperator:
    """Dirichlet box of H_{V,alpha,x} (kind 'schrodinger', phase = x) or L_{V,alpha,theta} (kind 'longrange')."""
    if N < 1:
        raise QPDualError("box radius must be >= 1")
    if V.d != alpha.d:
        raise QPDualError("potential and frequency dimensions differ")
    if kind in ("schrodinger", "schrodinger1d"):
        if 2 * N + 1 > MAX_DIM:
            raise SizeGuardError(f"box of {2 * N + 1} sites exceeds the {MAX_DIM} guard")
        x = np.atleast_1d(np.asarray(phase, dtype=float))
        if x.size != alpha.d:
            raise QPDualError("phase x must have one entry per frequency")
        n = np.arange(-N, N + 1)
        pts = orbit_points(x, alpha, -N, 2 * N + 1)
        return TruncatedOperator("schrodinger", x, N, alpha, n[:, None], V(pts), np.ones(2 * N))
    if kind != "longrange":
        raise QPDualError(f"unknown operator kind {kind!r}")
    d = alpha.d
    dim = (2 * N + 1) ** d
    if dim > MAX_DIM:
        raise SizeGuardError(f"box of {dim} sites exceeds the {MAX_DIM} guard "
                             f"(dense matrix would need {dim * dim * 8 / 1e9:.1f} GB)")
    theta = float(phase)
    sites = lattice_box(N, d)
    diag = 2 * np.cos(2 * np.pi * (theta + sites @ alpha.values))
    m = np.diag(diag)
    strides = (2 * N + 1) ** np.arange(d - 1, -1, -1)
    index = (sites + N) @ strides
    for k, v in zip(V.modes, V.values):
        if v == 0.0:
            continue
        tgt = sites - k
        ok = np.all(np.abs(tgt) <= N, axis=1)
        m[index[ok], (tgt[ok] + N) @ strides] += v
    return TruncatedOperator("longrange", theta, N, alpha, sites, diag, dense=m)


def eigensolve(op: TruncatedOperator) -> SpectralData:
    """Full symmetric eigendecomposition through LAPACK, with a residual check."""
    if op.dim > MAX_DIM:
        raise SizeGuardError("matrix exceeds the dimension guard")
    if op.kind == "schrodinger":
        w, vecs = scipy.linalg.eigh_tridiagonal(op.diag, op.offdiag)
    else:
        w, vecs = np.linalg.eigh(op.matrix)
    mat = op.matrix
    scale = max(np.abs(w).max(), 1.0)
    res = np.linalg.norm(mat @ vecs - vecs * w, axis=0)
    if res.max() > 1e-10 * scale:
        raise ConvergenceError(f"eigen-residual {res.max():.2e} above 1e-10 * ||M||",
                               history=[float(res.max())])
    shell = sup_norm(op.sites) == op.N
    bmass = np.sum(np.abs(vecs[shell]) ** 2, axis=0)
    return SpectralData(w, vecs, op.sites, op.N, bmass)


def ids(V: PotentialFourier, alpha: Frequency, E, N: int, x_samples: int = 16, seed=0):
    """Integrated density of states by Sturm counts on consecutive disjoint boxes of one orbit."""
    scalar = np.ndim(E) == 0
    energies = np.atleast_1d(np.asarray(E, dtype=float))
    x0 = np.random.default_rng([int(seed), 0]).random(alpha.d)
    L = 2 * N + 1
    pts = orbit_points(x0, alpha, 0, L * x_samples)
    diag = np.ascontiguousarray(V(pts).reshape(x_samples, L))
    counts = K.sturm_counts(diag, energies)
    out = counts.mean(axis=0) / L
    return float(out[0]) if scalar else out


def ids_rotation_check(V: PotentialFourier, alpha: Frequency, E_grid, N: int, n_rot: int,
                       tol: float, x_samples: int = 16, seed=0) -> dict:
    """Compare the IDS with 1 - 2 rho(E) on a grid of energies."""
    E_grid = np.asarray(E_grid, dtype=float)
    nvals = ids(V, alpha, E_grid, N, x_samples, seed)
    rows = []
    for E, nv in zip(E_grid, nvals):
        rho = rotation_number(Cocycle.schrodinger(V, alpha, E), n_rot)["rho"]
        rows.append({"E": float(E), "ids": float(nv), "rho": rho, "defect": abs(nv - (1 - 2 * rho))})
    worst = max(r["defect"] for r in rows)
    return {"rows": rows, "max_defect": worst, "passed": worst <= tol,
            "failures": [r["E"] for r in rows if r["defect"] > tol]}


def spectral_measure(op: TruncatedOperator, n, spectra: SpectralData | None = None) -> dict:
    """Atoms (E_j, |<delta_n, phi_j>|^2) of the spectral measure of the box at site n."""
    sd = spectra or eigensolve(op)
    w = sd.weights_at(n)
    return {"energies": sd.eigenvalues, "weights": w, "total": float(w.sum()),
            "boundary_mass": float(w @ sd.boundary_mass)}


def spectra_to_json(op: TruncatedOperator, sd: SpectralData, weights_site=None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": op.kind, "alpha": str(op.alpha),
           "phase": np.atleast_1d(op.phase).tolist(), "N": op.N,
           "eigenvalues": sd.eigenvalues.tolist()}
    if weights_site is not None:
        doc["weights"] = {"site": np.atleast_1d(weights_site).tolist(),
                          "values": sd.weights_at(weights_site).tolist()}
    return json.dumps(doc, indent=1)


def spectra_from_json(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise QPDualError(f"unsupported schema_version {doc.get('schema_version')}")
    doc["eigenvalues"] = np.array(doc["eigenvalues"])
    return doc
