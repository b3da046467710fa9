"""Command-line experiment runner: YAML config in, JSON (and CSV) records out."""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .arithmetic import (DiophantineFreqParams, DiophantinePhaseParams, Frequency, check_phase_dc,
                         homogeneity_estimate)
from .cocycle import Cocycle, lyapunov, rotation_number
from .duality import bloch_from_eigenvector, decay_fit
from .errors import ConfigError, QPDualError
from .operators import ids_rotation_check
from .potential import PotentialFourier
from .reducibility import KamConfig, kam_reduce, verify_conjugation
from .rmeasure import (PipelineConfig, _one_m, criteria_report, enumerate_eigensystem,
                       r_measure)

SCHEMA_VERSION = 1
THREADS_ENV = "QPDUAL_THREADS"
SUBCOMMANDS = ("lyapunov", "rotation", "ids-check", "reduce", "duality", "rmeasure",
               "homogeneity", "census")

DEFAULTS = {
    "lyapunov": {"energies": [0.0], "n": 100000, "x_samples": 8, "expected": None, "tol": 1e-2},
    "rotation": {"energies": [0.0], "n": 100000, "expected": None, "tol": 1e-3},
    "ids-check": {"energies": {"start": -2.5, "stop": 2.5, "num": 20}, "N": 2000,
                  "n_rot": 100000, "tol": 1e-2, "x_samples": 16},
    "reduce": {"energy": None, "kam": {}, "n_rot": 100000, "verify_grid": None},
    "duality": {"kam": {}, "n_rot": 100000, "tol": 1e-8, "bloch_tol": 1e-6, "x_grid": 16},
    "rmeasure": {"n": None, "N": 20, "N_list": [5, 10, 15, 20], "N_enum": None,
                 "epsilon": 1e-3, "continuity_steps": [1e-5, 1e-6, 1e-7], "continuity_N": 10,
                 "continuity_tol": 1e-3, "completeness_min": 0.999, "sigma": 1e-3,
                 "class_gamma": 1e-3, "class_tau_prime": None, "n_rot": 100000},
    "homogeneity": {"gamma": 0.003, "tau_prime": 101.0, "sigma": 7e-33, "k_cut": 50,
                    "kappa": 0.38, "tau": 1.0},
    "census": {"couplings": [0.05], "thetas": None, "N": 10, "n": None,
               "completeness_min": 0.999, "n_rot": 100000},
}


@dataclass
class ExperimentConfig:
    frequency: str = "golden"
    potential: dict = field(default_factory=lambda: {"cosine": 0.05})
    phase: dict = field(default_factory=lambda: {"value": 0.1234})
    params: dict = field(default_factory=dict)
    output: str = "results"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping", key="<root>")
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}", key=sorted(unknown)[0])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def dump(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)

    def resolved(self, subcommand: str) -> "ExperimentConfig":
        """Copy with every default written out explicitly."""
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}", key="subcommand")
        out = copy.deepcopy(self)
        p = copy.deepcopy(DEFAULTS[subcommand])
        unknown = set(out.params) - set(p)
        if unknown:
            raise ConfigError(f"unknown parameters for {subcommand}: {sorted(unknown)}",
                              key=f"params.{sorted(unknown)[0]}")
        p.update(out.params)
        out.params = p
        return out

    # -- typed views

    def alpha(self) -> Frequency:
        try:
            return Frequency.parse(self.frequency)
        except QPDualError as exc:
            raise ConfigError(f"frequency: {exc}", key="frequency") from exc

    def V(self, d: int) -> PotentialFourier:
        p = self.potential
        try:
            if "cosine" in p:
                return PotentialFourier.cosine(float(p["cosine"]), d)
            if "file" in p:
                return PotentialFourier.load(p["file"])
            if "coefficients" in p:
                rows = np.array(p["coefficients"], dtype=float)
                return PotentialFourier(rows[:, :-1].astype(np.int64), rows[:, -1])
            if "zero" in p:
                return PotentialFourier.zero(d)
        except (QPDualError, OSError, ValueError, IndexError) as exc:
            raise ConfigError(f"potential: {exc}", key="potential") from exc
        raise ConfigError("potential needs one of cosine/file/coefficients/zero", key="potential")

    def thetas(self, alpha: Frequency) -> list:
        ph = self.phase
        if "value" in ph:
            return [float(ph["value"])]
        if "values" in ph:
            return [float(v) for v in ph["values"]]
        if "sampler" in ph:
            s = ph["sampler"]
            params = DiophantinePhaseParams(float(s.get("gamma", 1e-3)),
                                            float(s.get("tau_prime", 2.0)), int(s.get("scan", 200)))
            rng = np.random.default_rng([int(self.seed), 1])
            out = []
            while len(out) < int(s.get("count", 1)):
                t = float(rng.random())
                if check_phase_dc(t, alpha, params)["holds"]:
                    out.append(t)
            return out
        raise ConfigError("phase needs value, values or sampler", key="phase")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


@dataclass
class ResultRecord:
    subcommand: str
    config: dict
    outputs: dict
    passed: bool
    timings: dict = field(default_factory=dict)
    csv_rows: list = field(default_factory=list, repr=False)
    schema_version: int = SCHEMA_VERSION
    provenance: str = f"qpdual {__version__}"

    def to_json(self) -> str:
        doc = {"schema_version": self.schema_version, "subcommand": self.subcommand,
               "provenance": self.provenance, "config": self.config,
               "outputs": _jsonable(self.outputs), "passed": self.passed,
               "timings": self.timings}
        return json.dumps(doc, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.csv_rows:
            w = csv.DictWriter(buf, fieldnames=list(self.csv_rows[0]), lineterminator="\n")
            w.writeheader()
            for row in self.csv_rows:
                w.writerow(_jsonable(row))
        return buf.getvalue()


# ---------------------------------------------------------------- subcommands

def _energies(spec):
    if isinstance(spec, dict):
        return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"])).tolist()
    return [float(e) for e in np.atleast_1d(spec)]


def _pipeline(p, threads):
    return PipelineConfig(n_rot=int(p.get("n_rot", 100000)), threads=threads)


def _run_lyapunov(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    rows = []
    for E in _energies(p["energies"]):
        r = lyapunov(Cocycle.schrodinger(V, alpha, E), int(p["n"]), int(p["x_samples"]), cfg.seed)
        rows.append({"E": E, "L": r["L"], "stderr": r["stderr"]})
    ok = True
    if p["expected"] is not None:
        ok = all(abs(r["L"] - float(p["expected"])) <= float(p["tol"]) for r in rows)
    return {"rows": rows}, ok, rows


def _run_rotation(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    rows = []
    for E in _energies(p["energies"]):
        r = rotation_number(Cocycle.schrodinger(V, alpha, E), int(p["n"]))
        rows.append({"E": E, "rho": r["rho"], "error": r["error"]})
    ok = True
    if p["expected"] is not None:
        exp = np.atleast_1d(p["expected"])
        ok = all(abs(r["rho"] - e) <= float(p["tol"]) for r, e in zip(rows, exp))
    return {"rows": rows}, ok, rows


def _run_ids(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    rep = ids_rotation_check(V, alpha, _energies(p["energies"]), int(p["N"]), int(p["n_rot"]),
                             float(p["tol"]), int(p["x_samples"]), cfg.seed)
    return rep, rep["passed"], rep["rows"]


def _kam_config(p, d):
    return KamConfig.for_dim(d, **p.get("kam", {}))


def _run_reduce(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    kc = _kam_config(p, alpha.d)
    rows = []
    if p["energy"] is not None:
        jobs = [(None, float(E)) for E in np.atleast_1d(p["energy"])]
    else:
        jobs = []
        for th in cfg.thetas(alpha):
            from .rmeasure import energy_of_phase
            e = energy_of_phase(th, V, alpha, int(p["n_rot"]), refine=kc)
            jobs.append((th, e.energy))
    ok = True
    for th, E in jobs:
        c = Cocycle.schrodinger(V, alpha, E)
        try:
            r = kam_reduce(c, config=kc)
        except QPDualError as exc:
            rows.append({"theta": th, "E": E, "error": str(exc)})
            ok = False
            continue
        v = verify_conjugation(c, r.B, r.A, int(p["n_rot"]), p["verify_grid"])
        good = v["residual"] <= kc.tol_residual and v["rho_shift_ok"]
        ok &= bool(good)
        rows.append({"theta": th, "E": E, "iterations": r.iterations, "residual": r.residual,
                     "verify_residual": v["residual"], "slope": r.slope, "rho_A": r.rho_A,
                     "rho_defect": v["rho_defect"], "strip": r.B.strip,
                     "resonance": r.report.action})
    return {"rows": rows}, ok, rows


def _run_duality(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    pc = PipelineConfig(n_rot=int(p["n_rot"]), kam=_kam_config(p, alpha.d))
    xs = np.random.default_rng([int(cfg.seed), 2]).random((int(p["x_grid"]), alpha.d))
    rows, ok = [], True
    for th in cfg.thetas(alpha):
        r = _one_m(th, tuple([0] * alpha.d), V, alpha, pc)
        if r.status != "ok":
            rows.append({"theta": th, "error": r.reason})
            ok = False
            continue
        b = bloch_from_eigenvector(r.pair, th, V, alpha, xs)
        try:
            fit = decay_fit(r.pair)
        except QPDualError as exc:
            fit = {"rate": None, "error": str(exc)}
        good = r.residual <= float(p["tol"]) and b["schrodinger_residual"] <= float(p["bloch_tol"])
        ok &= bool(good)
        rows.append({"theta": th, "E": r.pair.energy, "residual": r.residual,
                     "bloch_residual": b["schrodinger_residual"], "decay_rate": fit.get("rate"),
                     "strip": r.energy.kam.B.strip})
    return {"rows": rows}, ok, rows


def _run_rmeasure(cfg, p, threads):
    alpha = cfg.alpha()
    V = cfg.V(alpha.d)
    n = p["n"] if p["n"] is not None else [0] * alpha.d
    tp = p["class_tau_prime"] if p["class_tau_prime"] is not None else 1.0 + alpha.d
    out, rows, ok = {}, [], True
    for th in cfg.thetas(alpha):
        rep = criteria_report(th, n, V, alpha, N=int(p["N"]), N_list=tuple(p["N_list"]),
                              N_enum=p["N_enum"], epsilon=float(p["epsilon"]),
                              class_params=DiophantinePhaseParams(float(p["class_gamma"]), tp, 200),
                              continuity_steps=tuple(p["continuity_steps"]),
                              continuity_N=int(p["continuity_N"]),
                              continuity_tol=float(p["continuity_tol"]),
                              completeness_min=float(p["completeness_min"]),
                              sigma=float(p["sigma"]), seed=cfg.seed, config=_pipeline(p, threads))
        out[repr(th)] = rep
        ok &= all(rep[k] == "pass" for k in ("uniformity", "continuity", "density_proxy"))
        ok &= bool(rep["completeness_pass"])
        for a in rep["atoms"]:
            rows.append({"theta": th, **{f"m{i + 1}": v for i, v in enumerate(a[:-2])},
                         "E": a[-2], "weight": a[-1]})
    return out, ok, rows


def _run_homogeneity(cfg, p, threads):
    alpha = cfg.alpha()
    params = DiophantinePhaseParams(float(p["gamma"]), float(p["tau_prime"]))
    fp = DiophantineFreqParams(float(p["kappa"]), float(p["tau"]))
    rows = []
    for th in cfg.thetas(alpha):
        r = homogeneity_estimate(alpha, params, th, float(p["sigma"]), int(p["k_cut"]), fp)
        rows.append({"theta0": th, **r})
    ok = all(r["ratio"] >= 0.5 for r in rows)
    return {"rows": rows}, ok, rows


def _run_census(cfg, p, threads):
    alpha = cfg.alpha()
    base = cfg.V(alpha.d)
    thetas = p["thetas"] if p["thetas"] is not None else cfg.thetas(alpha)
    n = p["n"] if p["n"] is not None else [0] * alpha.d
    rows = []
    for lam in p["couplings"]:
        s = float(lam) / max(abs(base.values).max(), 1e-300)
        V = PotentialFourier(base.modes, base.values * s)
        for th in thetas:
            en = enumerate_eigensystem(float(th), V, alpha, int(p["N"]), _pipeline(p, threads))
            total = r_measure(float(th), n, en)["total"]
            succ = sum(r.status == "ok" for r in en)
            rows.append({"coupling": float(lam), "theta": float(th), "completeness": total,
                         "success_fraction": succ / len(en),
                         "failures": ";".join(f"{list(r.m)}:{r.reason}" for r in en
                                              if r.status != "ok")})
    ok = all(r["completeness"] >= float(p["completeness_min"]) for r in rows)
    return {"rows": rows}, ok, rows


RUNNERS = {"lyapunov": _run_lyapunov, "rotation": _run_rotation, "ids-check": _run_ids,
           "reduce": _run_reduce, "duality": _run_duality, "rmeasure": _run_rmeasure,
           "homogeneity": _run_homogeneity, "census": _run_census}


def run(subcommand: str, config: ExperimentConfig, threads: int = 1) -> ResultRecord:
    """Execute one subcommand; the record embeds the fully resolved config."""
    cfg = config.resolved(subcommand)
    t0 = time.perf_counter()
    outputs, passed, rows = RUNNERS[subcommand](cfg, cfg.params, threads)
    elapsed = time.perf_counter() - t0
    return ResultRecord(subcommand, asdict(cfg), outputs, bool(passed),
                        {"seconds": round(elapsed, 3)}, rows)


def _threads(flag):
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qpdual", description=__doc__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed (u64)")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"worker threads (default: ${THREADS_ENV} or 1)")
    ap.add_argument("--out", default=None, help="output directory (overrides config)")
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must fit in 64 bits", key="seed")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output = args.out
        rec = run(args.subcommand, cfg, _threads(args.threads))
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 1
    except (QPDualError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error in {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.subcommand.replace("-", "_")
    (out / f"{stem}.json").write_text(rec.to_json())
    if args.format == "csv":
        (out / f"{stem}.csv").write_text(rec.to_csv())
    status = "PASS" if rec.passed else "FAIL"
    print(f"{args.subcommand}: {status} -> {out / (stem + '.json')}")
    return 0 if rec.passed else 2


if __name__ == "__main__":
    sys.exit(main())
