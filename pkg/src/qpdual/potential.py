"""Trigonometric-polynomial potentials on the torus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QPDualError


@dataclass(frozen=True, eq=False)
class PotentialFourier:
    """V(x) = sum_k V_k exp(2 pi i <k,x>) with real, even coefficients."""

    modes: np.ndarray
    values: np.ndarray
    claimed_strip: float | None = None

    def __post_init__(self):
        modes = np.atleast_2d(np.asarray(self.modes, dtype=np.int64))
        values = np.asarray(self.values, dtype=float).ravel()
        if modes.shape[0] != values.shape[0]:
            raise QPDualError("modes and values differ in length")
        table = {}
        for k, v in zip(map(tuple, modes), values):
            table[k] = table.get(k, 0.0) + v
        for k, v in table.items():
            mk = tuple(-x for x in k)
            if mk not in table or abs(table[mk] - v) > 1e-14 * max(1.0, abs(v)):
                raise QPDualError(f"coefficient at {k} has no matching coefficient at {mk}")
        keys = sorted(table)
        object.__setattr__(self, "modes", np.array(keys, dtype=np.int64).reshape(len(keys), -1))
        object.__setattr__(self, "values", np.array([table[k] for k in keys]))

    @property
    def d(self) -> int:
        return self.modes.shape[1]

    @property
    def cutoff(self) -> int:
        return int(np.max(np.abs(self.modes))) if len(self.modes) else 0

    def coefficient(self, k) -> float:
        k = tuple(np.atleast_1d(k).tolist())
        hit = np.all(self.modes == np.array(k), axis=1)
        return float(self.values[hit][0]) if hit.any() else 0.0

    def l1(self) -> float:
        return float(np.sum(np.abs(self.values)))

    def as_dict(self) -> dict:
        return {tuple(k.tolist()): float(v) for k, v in zip(self.modes, self.values)}

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        phase = 2 * np.pi * (x @ self.modes.T.astype(float))
        return np.cos(phase) @ self.values

    @classmethod
    def zero(cls, d: int = 1) -> "PotentialFourier":
        return cls(np.zeros((1, d), dtype=np.int64), [0.0])

    @classmethod
    def cosine(cls, coupling: float, d: int = 1) -> "PotentialFourier":
        """sum_i 2 c cos(2 pi x_i): V_k = c at k = +-e_i."""
        modes, vals = [], []
        for i in range(d):
            e = np.zeros(d, dtype=np.int64)
            e[i] = 1
            modes += [e, -e]
            vals += [coupling, coupling]
        return cls(np.array(modes), vals, claimed_strip=np.inf)

    @classmethod
    def from_dict(cls, coeffs: dict, claimed_strip=None) -> "PotentialFourier":
        keys = [tuple(np.atleast_1d(k).tolist()) for k in coeffs]
        return cls(np.array(keys), list(coeffs.values()), claimed_strip)

    @classmethod
    def load(cls, path) -> "PotentialFourier":
        """Text file, one coefficient per line: `k1 [k2 ... kd] value`."""
        modes, vals = [], []
        with open(path) as fh:
            for line in fh:
                line = line.split("#")[0].strip()
                if not line:
                    continue
                parts = line.split()
                modes.append([int(p) for p in parts[:-1]])
                vals.append(float(parts[-1]))
        if not modes:
            raise QPDualError(f"no coefficients in {path}")
        return cls(np.array(modes), vals)

    def dump(self, path):
        with open(path, "w") as fh:
            for k, v in zip(self.modes, self.values):
                fh.write(" ".join(str(int(x)) for x in k) + f" {v!r}\n")
