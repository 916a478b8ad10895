"""Config-driven experiments: expansions, allocation sweeps, joint selection and reports."""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import scipy

from . import __version__
from .alloc import (AllocationPlan, RateParams, allocate, allocate_l2, balanced_n_hat, fixed_space_baseline,
                    predict_rate, wavelet_predicted_rates)
from .coeff_model import (AffineModel, LognormalModel, PiecewiseField, WaveletFamily, build_wavelet_model,
                          tune_wavelet_weights, wavelet_family_for_theta, wavelet_weights)
from .fem import FeSpace, HierarchicalBasis, energy_sq, project_coeffs, solve_dirichlet
from .fitting import FitError, RateFit, decades, fit_rate
from .multiindex import (DownwardClosedSet, MultiIndex, WeightSequence, box_index_set, generate_envelope,
                         total_degree_set)
from .ortho import OrthoExpansion, OrthoFamily, TensorQuadrature, compute_coeffs
from .taylor import (TaylorExpansion, monomials, compute_laplacians, compute_taylor, layer_sums, lp_quasinorm,
                     weighted_l2)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "fem": {"degree": 1, "ref_elements": 1024},
    "expansion": {"kind": "legendre", "alpha_j": 0.0, "beta_j": 0.0, "index_set": "box",
                  "max_degree": 3, "budget": 64, "laplacians": True},
    "allocation": {"mode": "optimal", "spatial": "linear", "metric": "W", "t": 1.0, "n_hat_c": 1.0},
    "sweep": {"n": [2, 4, 8, 16, 32, 64, 128, 256], "min_decades": 1.5, "tolerance": 0.2, "one_sided": False},
    "error": {"M": 64, "seed": 0},
    "output": {"dir": "out", "prefix": "run"},
}


# ----------------------------------------------------------------------------- configuration

def _schema(name: str) -> dict:
    return json.loads(resources.files("parampde").joinpath("schemas", name).read_text())


def load_config(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    """Validate against the schema, apply defaults and check cross-field consistency."""
    try:
        jsonschema.validate(raw, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    cfg = copy.deepcopy(raw)
    for section, values in DEFAULTS.items():
        cfg[section] = {**values, **cfg.get(section, {})}
    mkind = cfg["model"]["kind"]
    ekind = cfg["expansion"]["kind"]
    if ekind == "hermite" and mkind != "lognormal":
        raise ConfigError("hermite expansions need a lognormal model")
    if ekind != "hermite" and mkind == "lognormal":
        raise ConfigError("lognormal models need a hermite expansion")
    if mkind == "wavelet":
        m = cfg["model"]
        if "alpha" not in m or "L" not in m:
            raise ConfigError("wavelet models need alpha and L")
        if ("C" in m) == ("theta" in m):
            raise ConfigError("wavelet models need exactly one of C and theta")
    if mkind in ("affine", "lognormal") and "psi" not in cfg["model"]:
        raise ConfigError(f"{mkind} models need a psi list")
    alloc = cfg["allocation"]
    alloc.setdefault("setting", "sup" if ekind == "taylor" else "l2")
    cfg["error"].setdefault("estimator", "sup-mc" if ekind == "taylor" else "l2-quadrature")
    est = cfg["error"]["estimator"]
    if ekind == "taylor" and est != "sup-mc":
        raise ConfigError("taylor expansions use the sup-mc error estimator")
    if ekind != "taylor" and est == "sup-mc":
        raise ConfigError("sup-mc applies to taylor expansions only")
    ref = cfg["fem"]["ref_elements"]
    if alloc["mode"] == "joint" or alloc["spatial"] == "nonlinear":
        if cfg["fem"]["degree"] != 1 or ref & (ref - 1):
            raise ConfigError("hierarchical spatial approximation needs P1 and a power-of-two reference mesh")
        if alloc["mode"] == "joint" and ekind == "taylor":
            raise ConfigError("joint selection needs an orthonormal expansion")
    if ekind != "taylor":
        cfg["expansion"].setdefault("q", cfg["expansion"]["max_degree"] + 1)
    return cfg


def _field(fdef, n_cells: int | None = None) -> PiecewiseField:
    if isinstance(fdef, (int, float)):
        return PiecewiseField.constant(float(fdef))
    if "nodal" in fdef:
        return PiecewiseField.from_nodal(fdef["nodal"])
    if "cells" in fdef and "hat" not in fdef:
        return PiecewiseField.from_cells(fdef["cells"])
    start, width, height = fdef["hat"]
    return PiecewiseField.hat(start, width, height, fdef.get("cells", n_cells or 64))


def build_model(cfg: dict):
    """Model and, for wavelet models, the family."""
    m = cfg["model"]
    if m["kind"] == "wavelet":
        if "theta" in m:
            fam = wavelet_family_for_theta(m["alpha"], m["L"], m["theta"], m.get("dims"))
        else:
            fam = WaveletFamily(m["alpha"], m["C"], m["L"])
        return build_wavelet_model(fam, m.get("dims")), fam
    psi = [_field(p) for p in m["psi"]]
    if m["kind"] == "affine":
        return AffineModel(_field(m.get("abar", 1.0)), psi), None
    return LognormalModel(psi), None


def build_index_set(cfg: dict, model) -> DownwardClosedSet:
    e = cfg["expansion"]
    d = model.dims
    if e["index_set"] == "box":
        return box_index_set(d, e["max_degree"])
    if e["index_set"] == "total":
        return total_degree_set(d, e["max_degree"])
    rho = e.get("rho")
    if rho is None:
        raise ConfigError("envelope index sets need expansion.rho")
    return generate_envelope(WeightSequence(tuple(rho)), e["budget"], e["max_degree"], dims=d)


def reference_space(cfg: dict) -> FeSpace:
    return FeSpace(cfg["fem"]["ref_elements"], cfg["fem"]["degree"])


def ortho_family(cfg: dict) -> OrthoFamily:
    e = cfg["expansion"]
    if e["kind"] == "hermite":
        return OrthoFamily.hermite()
    if e["kind"] == "legendre":
        return OrthoFamily.legendre()
    return OrthoFamily.jacobi(e["alpha_j"], e["beta_j"])


# ----------------------------------------------------------------------------- expansions

@dataclass
class ExpansionData:
    """Uniform view on Taylor and orthonormal expansions computed on the reference space."""

    kind: str
    model: Any
    family: WaveletFamily | None
    space: FeSpace
    raw: TaylorExpansion | OrthoExpansion
    load: float

    @property
    def indices(self) -> list[MultiIndex]:
        return self.raw.indices

    @property
    def coeffs(self) -> np.ndarray:
        return self.raw.coeffs

    @property
    def norms_V(self) -> np.ndarray:
        return self.raw.norms_V

    def norms(self, metric: str) -> np.ndarray:
        return self.raw.metric(metric)

    def best_n_rows(self, n: int) -> np.ndarray:
        v = self.norms_V
        keys = [nu.sort_key() for nu in self.indices]
        order = sorted(range(len(v)), key=lambda i: (-v[i], keys[i]))
        return np.asarray(order[:n], dtype=np.int64)


def compute_expansion(cfg: dict) -> ExpansionData:
    model, fam = build_model(cfg)
    space = reference_space(cfg)
    S = build_index_set(cfg, model)
    e = cfg["expansion"]
    load = float(cfg["model"].get("load", 1.0))
    if e["kind"] == "taylor":
        if not isinstance(model, AffineModel):
            raise ConfigError("taylor expansions need an affine model")
        raw = compute_taylor(model, space, S, load)
        if e["laplacians"]:
            compute_laplacians(raw)
    else:
        quad = TensorQuadrature(ortho_family(cfg), model.dims, e["q"])
        raw = compute_coeffs(model, space, S, quad, load, with_laplacians=e["laplacians"])
    return ExpansionData(e["kind"], model, fam, space, raw, load)


# ----------------------------------------------------------------------------- rates

def tail_slope(norms: np.ndarray, setting: str, ranks: tuple[int, int] = (8, 256)) -> float:
    """Decay rate of the best n-term tail of sorted norms: l1 tail (sup) or l2 tail (l2)."""
    a = np.sort(np.asarray(norms, dtype=float))[::-1]
    a = a[a > 0]
    lo, hi = ranks
    hi = min(hi, a.size - 1)
    lo = min(lo, max(1, hi // 4))
    if hi - lo + 1 < 4:
        raise FitError("too few coefficients to measure a tail slope")
    k = np.arange(lo, hi + 1)
    if setting == "sup":
        tail = np.cumsum(a[::-1])[::-1]
    else:
        tail = np.sqrt(np.cumsum((a**2)[::-1])[::-1])
    return fit_rate(k, tail[k]).rate


def default_s(cfg: dict, exp: ExpansionData) -> tuple[float, str]:
    """Parametric rate: configured, derived from the wavelet decay, or measured."""
    alloc = cfg["allocation"]
    if "s" in alloc:
        return float(alloc["s"]), "config"
    c = 1.0 if alloc["setting"] == "sup" else 0.5
    if exp.family is not None and exp.family.alpha - c > 0:
        return exp.family.alpha - c, "derived from p_V = 1/alpha"
    return tail_slope(exp.norms_V, alloc["setting"]), "measured tail slope"


def predicted_rate(cfg: dict, exp: ExpansionData | None, s: float | None = None) -> tuple[float, str]:
    sw = cfg["sweep"]
    if "predicted" in sw:
        return float(sw["predicted"]), "config"
    mode = "nonlinear" if cfg["allocation"]["mode"] == "joint" or cfg["allocation"]["spatial"] == "nonlinear" \
        else "linear"
    if exp is not None and exp.family is not None:
        return wavelet_predicted_rates(exp.family.alpha, 1, mode), f"wavelet {mode}"
    r = cfg.get("rates", {})
    t = float(cfg["allocation"]["t"])
    if "p_X" in r and "p_V" in r:
        setting = cfg["allocation"]["setting"]
        params = RateParams(s if s is not None else RateParams.derived(t, r["p_V"], r["p_X"], setting).s,
                            t, r["p_V"], r["p_X"], setting)
        return predict_rate(params).rate, "predict_rate"
    return t, "spatial rate (coefficients summable for every p)"


# ----------------------------------------------------------------------------- realization

class _Realizer:
    """Spatial approximations of expansion coefficients, cached by (row, size)."""

    def __init__(self, exp: ExpansionData, spatial: str) -> None:
        self.exp = exp
        self.spatial = spatial
        self.ref = exp.space
        self._cache: dict[tuple[int, int], tuple[float, int, np.ndarray | None]] = {}
        if spatial == "nonlinear":
            self.basis = HierarchicalBasis(int(round(math.log2(self.ref.n_el))))
            self.hier = self.basis.to_hierarchical(exp.coeffs)
            self.energy = (self.hier * self.basis.energy_scale) ** 2
            self.order = [np.lexsort((self.basis.position, self.basis.level, -self.energy[i]))
                          for i in range(len(exp.indices))]

    def space_for(self, dofs: int) -> FeSpace | None:
        """Smallest nested uniform space with at least ``dofs`` dofs, or ``None`` if above ref/4."""
        k = self.ref.degree
        n_el = 1 if k == 2 else 2
        while k * n_el - 1 < dofs:
            n_el *= 2
        if 4 * n_el > self.ref.n_el:
            return None
        return FeSpace(n_el, k)

    def realize(self, row: int, dofs: int, need_grad: bool) -> tuple[float, int, np.ndarray | None] | None:
        """(squared V error, dofs used, fine-Gauss derivative of the approximation)."""
        key = (row, int(dofs))
        hit = self._cache.get(key)
        if hit is not None and (hit[2] is not None or not need_grad):
            return hit
        c = self.exp.coeffs[row]
        if self.spatial == "linear":
            sp_ = self.space_for(dofs)
            if sp_ is None:
                return None
            p = project_coeffs(c, self.ref, sp_)
            grad_c = sp_.derivative_matrix(self.ref.gauss_x.ravel()) @ p
            diff = self.ref.grad_op @ c - grad_c
            err = float(diff**2 @ self.ref.gauss_w.ravel())
            out = (err, sp_.ndof, grad_c if need_grad else None)
        else:
            keep = self.order[row][: int(dofs)]
            err = float(self.energy[row].sum() - self.energy[row][keep].sum())
            err = max(err, 0.0)
            g = None
            if need_grad:
                h = np.zeros_like(self.hier[row])
                h[keep] = self.hier[row][keep]
                g = self.ref.grad_op @ self.basis.to_nodal(h)
            out = (err, min(int(dofs), self.basis.size), g)
        self._cache[key] = out
        return out


class _ErrorModel:
    """Fully discrete error of ``sum_{Lambda} (approx v_nu) phi_nu`` against reference solves."""

    def __init__(self, cfg: dict, exp: ExpansionData, seed: int) -> None:
        self.exp = exp
        self.estimator = cfg["error"]["estimator"]
        self.seed = seed
        ref = exp.space
        self.w = ref.gauss_w.ravel()
        self.parseval = False
        if self.estimator == "l2-quadrature":
            raw: OrthoExpansion = exp.raw
            self.Y = raw.quad.points()
            self.weights = raw.quad.weights()
            self.U = raw.node_solutions
            Phi = raw.quad.basis_matrix(raw.indices)
            gram = (Phi * self.weights) @ Phi.T
            self.parseval = bool(np.allclose(gram, np.eye(len(raw.indices)), atol=1e-10))
            self.total = float(self.weights @ energy_sq(ref, self.U))
        else:
            M = cfg["error"]["M"]
            rng = np.random.default_rng(seed)
            if self.estimator == "sup-mc":
                self.Y = rng.uniform(-1.0, 1.0, size=(M, exp.model.dims))
            else:
                self.Y = exp.raw.family.sample(rng, (M, exp.model.dims))
            self.weights = np.full(M, 1.0 / M)
            self.U = np.stack([solve_dirichlet(ref, exp.model.evaluate(y, ref.gauss_x), exp.load,
                                               check_residual=False).coeffs for y in self.Y])
        self._Ug = None

    @property
    def needs_grad(self) -> bool:
        return not self.parseval

    def _basis_at_samples(self, rows: np.ndarray) -> np.ndarray:
        idx = [self.exp.indices[i] for i in rows]
        if self.exp.kind == "taylor":
            return np.stack([monomials(idx, y) for y in self.Y], axis=1)
        raw: OrthoExpansion = self.exp.raw
        K = max(nu.max_exponent for nu in idx)
        table = raw.family.eval_all(K, self.Y)
        Phi = np.ones((len(idx), len(self.Y)))
        for i, nu in enumerate(idx):
            for j, k in nu:
                Phi[i] *= table[k, :, j - 1]
        return Phi

    def error(self, rows: np.ndarray, errs: np.ndarray, grads: list[np.ndarray] | None) -> float:
        if self.parseval:
            kept = float(np.sum(self.exp.norms_V[rows] ** 2))
            return math.sqrt(max(self.total - kept + float(np.sum(errs)), 0.0))
        if self._Ug is None:
            self._Ug = (self.exp.space.grad_op @ self.U.T).T
        Phi = self._basis_at_samples(rows)
        approx = Phi.T @ np.stack(grads)
        e2 = ((self._Ug - approx) ** 2) @ self.w
        if self.estimator == "sup-mc":
            return math.sqrt(float(e2.max()))
        return math.sqrt(float(self.weights @ e2))


# ----------------------------------------------------------------------------- reports

def environment_fingerprint() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "parampde": __version__, "platform": platform.platform()}


@dataclass
class RateReport:
    kind: str
    points: list[dict]
    fit: RateFit | None
    predicted: float | None
    predicted_source: str
    tolerance: float | None
    expected_range: tuple[float, float] | None
    config: dict
    seed: int | None
    flags: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    one_sided: bool = False
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    @property
    def slope(self) -> float | None:
        return None if self.fit is None else self.fit.rate

    @property
    def passed(self) -> bool | None:
        if self.fit is None:
            return None if not self.flags else False
        if self.expected_range is not None:
            lo, hi = self.expected_range
            return lo <= self.slope <= hi
        if self.predicted is None or self.tolerance is None:
            return None
        if self.one_sided:
            return self.slope >= self.predicted - self.tolerance
        return abs(self.slope - self.predicted) <= self.tolerance

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        N = np.array([p["N"] for p in self.points], dtype=float)
        e = np.array([p["error"] for p in self.points], dtype=float)
        return N, e

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "seed": self.seed,
            "points": self.points,
            "summary": {
                "slope": self.slope,
                "intercept": None if self.fit is None else self.fit.intercept,
                "residual": None if self.fit is None else self.fit.residual,
                "predicted": self.predicted,
                "predicted_source": self.predicted_source,
                "tolerance": self.tolerance,
                "one_sided": self.one_sided,
                "expected_range": None if self.expected_range is None else list(self.expected_range),
                "passed": self.passed,
                "flags": self.flags,
                **self.extras,
            },
            "environment": environment_fingerprint(),
            "timestamp": self.timestamp,
        }


def _finalize(kind: str, cfg: dict, points: list[dict], predicted: float | None, source: str,
              seed: int | None, flags: list[str], extras: dict) -> RateReport:
    sw = cfg["sweep"]
    fit = None
    if len(points) < 4:
        flags.append(f"only {len(points)} sweep point(s); no fit")
    else:
        N = np.array([p["N"] for p in points], dtype=float)
        e = np.array([p["error"] for p in points], dtype=float)
        if np.any(e <= 0):
            flags.append("zero error at some sweep point; no fit")
        elif decades(N) < sw["min_decades"]:
            flags.append(f"N spans {decades(N):.2f} decades < {sw['min_decades']}; no fit")
        else:
            fit = fit_rate(N, e)
    rng = tuple(sw["expected_range"]) if "expected_range" in sw else None
    return RateReport(kind, points, fit, predicted, source, sw["tolerance"], rng, cfg, seed, flags, extras,
                      one_sided=bool(sw.get("one_sided", False)))


def write_report(report: RateReport, out_dir: str | os.PathLike, prefix: str = "run") -> dict[str, Path]:
    """Sweep table CSV, JSON summary and plot-data CSV."""
    out = Path(out_dir)
    ensure_writable(out)
    paths = {"csv": out / f"{prefix}_sweep.csv", "json": out / f"{prefix}_report.json",
             "plot": out / f"{prefix}_plot.csv"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "N", "error"])
        for p in report.points:
            w.writerow([p["n"], p["N"], repr(float(p["error"]))])
    data = report.to_dict()
    jsonschema.validate(data, _schema("report.schema.json"))
    paths["json"].write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    with open(paths["plot"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log_N", "log_error", "log_predicted"])
        N, e = report.arrays()
        pos = (N > 0) & (e > 0)
        logN, loge = np.log(N[pos]), np.log(e[pos])
        if report.predicted is not None and logN.size:
            logC = float(np.mean(loge + report.predicted * logN))
            pred = logC - report.predicted * logN
        else:
            pred = np.full(logN.shape, np.nan)
        for a, b, c in zip(logN, loge, pred):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])
    return paths


def ensure_writable(out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ----------------------------------------------------------------------------- sweeps

def _plan(cfg: dict, norms: np.ndarray, n: int, s: float, t: float, rows: np.ndarray,
          indices: list[MultiIndex]) -> AllocationPlan:
    alloc = cfg["allocation"]
    idx = [indices[i] for i in rows]
    if alloc["mode"] == "fixed":
        n_hat = balanced_n_hat(n, s, t, alloc["n_hat_c"])
        return fixed_space_baseline(norms, n, n_hat, s, t, alloc["setting"], idx)
    fn = allocate if alloc["setting"] == "sup" else allocate_l2
    if not np.any(norms > 0):
        return fixed_space_baseline(norms, n, 1, s, t, alloc["setting"], idx)
    return fn(norms, s, t, n, idx)


def run_sweep(cfg: dict, seed: int | None = None, exp: ExpansionData | None = None,
              threads: int = 1) -> RateReport:
    """Error against total dofs ``N`` over the configured schedule of best-n selections."""
    if cfg["allocation"]["mode"] == "joint":
        return run_joint(cfg, exp=exp)
    seed = cfg["error"]["seed"] if seed is None else seed
    exp = compute_expansion(cfg) if exp is None else exp
    s, s_source = default_s(cfg, exp)
    t = float(cfg["allocation"]["t"])
    predicted, source = predicted_rate(cfg, exp, s)
    metric = cfg["allocation"]["metric"]
    xnorms = exp.norms(metric)
    realizer = _Realizer(exp, cfg["allocation"]["spatial"])
    errmodel = _ErrorModel(cfg, exp, seed)
    max_total = cfg["sweep"].get("max_total", math.inf)
    flags: list[str] = []

    def point(n: int):
        n_eff = min(n, len(exp.indices))
        rows = exp.best_n_rows(n_eff)
        plan = _plan(cfg, xnorms[rows], n_eff, s, t, rows, exp.indices)
        errs, grads, used = [], [], 0
        for r, d in zip(rows, plan.n_int):
            res = realizer.realize(int(r), int(d), errmodel.needs_grad)
            if res is None:
                return None, f"n={n}: allocation exceeds a quarter of the reference mesh"
            errs.append(res[0])
            used += res[1]
            grads.append(res[2])
        err = errmodel.error(rows, np.array(errs), grads if errmodel.needs_grad else None)
        return {"n": int(n_eff), "N": int(used), "error": err, "N_plan": plan.N_int,
                "max_dofs": int(plan.n_int.max())}, None

    schedule = sorted(set(cfg["sweep"]["n"]))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(point, schedule))
    else:
        results = [point(n) for n in schedule]
    points = []
    for res, msg in results:
        if res is None:
            flags.append(msg)
            break
        if res["N"] > max_total:
            break
        if points and res["n"] == points[-1]["n"]:
            continue
        points.append(res)
    extras = {"s": s, "s_source": s_source, "t": t, "metric": metric, "setting": cfg["allocation"]["setting"],
              "estimator": errmodel.estimator, "discrete_parseval": errmodel.parseval,
              "mode": cfg["allocation"]["mode"], "spatial": cfg["allocation"]["spatial"],
              "expansion_size": len(exp.indices)}
    return _finalize("sweep", cfg, points, predicted, source, seed, flags, extras)


def compare_allocations(cfg: dict, seed: int | None = None, exp: ExpansionData | None = None) -> tuple[RateReport, RateReport]:
    """Optimal and balanced fixed allocations over the same range of total dofs."""
    exp = compute_expansion(cfg) if exp is None else exp
    opt_cfg = copy.deepcopy(cfg)
    opt_cfg["allocation"]["mode"] = "optimal"
    opt = run_sweep(opt_cfg, seed, exp)
    fix_cfg = copy.deepcopy(cfg)
    fix_cfg["allocation"]["mode"] = "fixed"
    if opt.points:
        fix_cfg["sweep"]["max_total"] = max(p["N"] for p in opt.points)
    fix = run_sweep(fix_cfg, seed, exp)
    return opt, fix


@dataclass
class JointSelection:
    selected: list[tuple[tuple[int, int], MultiIndex]]
    error: float
    N: int


class JointDictionary:
    """Hierarchical hats times orthonormal polynomials, with energy-normalized coefficients."""

    def __init__(self, exp: ExpansionData, basis: HierarchicalBasis) -> None:
        if exp.space != basis.space:
            raise ValueError("expansion must live on the hierarchical basis' P1 mesh")
        if exp.kind == "taylor":
            raise ValueError("joint selection needs an orthonormal polynomial factor")
        self.exp = exp
        self.basis = basis
        E = np.abs(basis.energy_coefficients(exp.coeffs))
        n_nu, n_lam = E.shape
        nu_rank = np.empty(n_nu, dtype=np.int64)
        nu_rank[np.array(sorted(range(n_nu), key=lambda i: exp.indices[i].sort_key()))] = np.arange(n_nu)
        flat = E.ravel()
        nu_of = np.repeat(np.arange(n_nu), n_lam)
        lam_of = np.tile(np.arange(n_lam), n_nu)
        self.order = np.lexsort((basis.position[lam_of], basis.level[lam_of], nu_rank[nu_of], -flat))
        self.sorted_sq = flat[self.order] ** 2
        # tail[N] = sum of squared energies beyond the first N
        self.tail = np.concatenate([np.cumsum(self.sorted_sq[::-1])[::-1], [0.0]])
        self.nu_of, self.lam_of = nu_of, lam_of

    @property
    def size(self) -> int:
        return self.sorted_sq.size

    def error(self, N: int) -> float:
        return math.sqrt(float(self.tail[min(max(N, 0), self.size)]))

    def select(self, N: int) -> JointSelection:
        N = min(max(N, 0), self.size)
        picks = self.order[:N]
        sel = [((int(self.basis.level[self.lam_of[k]]), int(self.basis.position[self.lam_of[k]])),
                self.exp.indices[self.nu_of[k]]) for k in picks]
        return JointSelection(sel, self.error(N), N)


def joint_best_N(exp: ExpansionData, basis: HierarchicalBasis, N: int) -> JointSelection:
    """Best ``N``-term selection from the tensor dictionary; error is the dropped energy."""
    return JointDictionary(exp, basis).select(N)


def run_joint(cfg: dict, exp: ExpansionData | None = None) -> RateReport:
    exp = compute_expansion(cfg) if exp is None else exp
    basis = HierarchicalBasis(int(round(math.log2(exp.space.n_el))))
    dic = JointDictionary(exp, basis)
    predicted, source = predicted_rate(cfg, exp)
    sw = cfg["sweep"]
    Ns = sorted(set(sw["N"])) if "N" in sw else default_joint_schedule(dic.size)
    points = [{"n": int(N), "N": int(N), "error": dic.error(N)} for N in Ns if N <= dic.size]
    extras = {"dictionary_size": dic.size, "mode": "joint", "expansion_size": len(exp.indices)}
    return _finalize("joint", cfg, points, predicted, source, None, [], extras)


def default_joint_schedule(size: int, margin: int = 256) -> list[int]:
    """Powers of two up to ``size / margin``, staying clear of dictionary exhaustion."""
    top = max(1, size // margin)
    return [2**k for k in range(int(math.log2(top)) + 1)]


# ----------------------------------------------------------------------------- summaries

def taylor_summary(cfg: dict, exp: ExpansionData) -> dict:
    raw: TaylorExpansion = exp.raw
    rho = None
    out: dict[str, Any] = {}
    m = cfg["model"]
    if exp.family is not None and "beta" in m:
        if "c" in m:
            rho = wavelet_weights(exp.family, m["beta"], m["c"], dims=exp.model.dims)
            out["c"] = m["c"]
        else:
            rho, c = tune_wavelet_weights(exp.family, m["beta"], exp.model)
            out["c"] = c
        out["theta_weighted"] = exp.model.theta_weighted(rho)
    rep = layer_sums(raw, rho)
    out.update(rep.to_dict())
    out["weighted_l2_V"] = weighted_l2(raw, rho, "V")
    out["tail_slope_l2"] = tail_slope(raw.norms_V, "l2") if len(raw) >= 8 else None
    out["l1"] = lp_quasinorm(raw.norms_V, 1.0).value
    return out
