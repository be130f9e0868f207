"""Experiment orchestration: configuration, seeding, replica-parallel runs,
persistence and plot-data emission.

A replica is the unit of parallelism; replica i always draws from the
counter-based stream (master_seed, i) no matter how many workers run or in
which order, so a run is bit-reproducible from its config alone.  Records
are flushed per replica; a killed run loses at most the in-flight replica.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats as sstats

from . import __version__
from .balls import ball_mean_at, dyadic_radii, max_radius
from .correctors import (
    CorrectorSet,
    compute_corrector_set,
    ellipticity_bounds,
    estimate_ahom,
    reconstruction_residual,
)
from .errors import (
    ConfigError,
    ExperimentFailure,
    MixedKinds,
    SaturatedRadius,
)
from .field import (
    CovarianceSpec,
    LatticeGrid,
    covariance_eval,
    exp_field,
    lognormal_moment,
    sample_gaussian_field,
    truncate_coefficient,
)
from .fluctuations import (
    ScalingFit,
    TestFunction,
    avg_gradient_observable,
    basis_test_functions,
    build_commutator,
    bump_cell_field,
    bump_edge_field,
    commutator_observable,
    corrector_growth_observable,
    estimate_Q,
    mu_d,
    q_diagonal_report,
    pairing_inner,
)
from .pde import cell_gradient, edge_coefficients, solve_constant_divform_spectral, solve_divform
from .radii import (
    compute_r_club,
    compute_r_diamond,
    compute_r_spade,
    compute_r_star,
    fit_log2_tail,
    fit_power_tail,
    hole_filling_experiment,
    mean_value_experiment,
    p_diamond,
)
from .twoscale import compare_rate_models, solve_two_scale_level

EXPERIMENT_KINDS = (
    "sample-field",
    "correctors",
    "radii",
    "clt-scaling",
    "corrector-growth",
    "commutator",
    "pathwise",
    "two-scale",
    "hole-filling",
    "mean-value",
)

E3 = math.exp(3.0)
E4 = math.exp(4.0)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "correctors"
    dim: int = 2
    n_per_side: int = 64
    side_length: Optional[float] = None
    cov_family: str = "gaussian_kernel"
    amplitude: float = 1.0
    corr_length: float = 2.0
    holder_gamma: float = 0.25
    trunc_M: Optional[float] = E4
    edge_rule: str = "geometric"
    tol: float = 1e-10
    max_iter_factor: int = 50
    psd_tol: float = 1e-8
    c_diamond: float = 2.0
    c_star: float = 10.0
    c_spade: float = 10.0
    club_eps: float = 0.5
    club_R_list: tuple = (16.0, 32.0)
    radius_kinds: tuple = ("diamond", "star", "club", "spade")
    moment_source: str = "exact"
    sigma_mean: str = "sample"
    R_list: tuple = (8.0, 16.0, 32.0, 64.0)
    eps_levels: tuple = (0.25, 0.125, 0.0625)
    growth_offsets: tuple = (4, 8, 16, 32, 64)
    tail_fraction: float = 0.1
    replicas: int = 50
    master_seed: int = 2028
    out_dir: Optional[str] = None
    threads: int = 1
    save_fields: bool = False

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for name in ("amplitude", "corr_length", "tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.replicas < 0:
            raise ConfigError("replicas must be >= 0")
        if self.trunc_M is not None and self.trunc_M < 1:
            raise ConfigError("trunc_M must be >= 1 (or omitted)")

    @property
    def grid(self) -> LatticeGrid:
        side = self.side_length if self.side_length is not None else float(self.n_per_side)
        return LatticeGrid(self.dim, self.n_per_side, side)

    @property
    def covariance(self) -> CovarianceSpec:
        return CovarianceSpec(self.cov_family, self.amplitude, self.corr_length,
                              self.holder_gamma)

    @property
    def max_iter(self) -> int:
        return self.max_iter_factor * self.n_per_side

    def config_hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items()
                   if k not in ("out_dir", "threads", "save_fields")}
        canon = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        import configparser

        parser = configparser.ConfigParser()
        parser.optionxform = str
        sections = {
            "experiment": ("kind", "replicas", "master_seed", "out_dir", "threads",
                           "save_fields", "tail_fraction"),
            "grid": ("dim", "n_per_side", "side_length"),
            "covariance": ("cov_family", "amplitude", "corr_length", "holder_gamma"),
            "coefficient": ("trunc_M", "edge_rule"),
            "solver": ("tol", "max_iter_factor", "psd_tol"),
            "radii": ("c_diamond", "c_star", "c_spade", "club_eps", "club_R_list",
                      "radius_kinds", "moment_source", "sigma_mean"),
            "scales": ("R_list", "eps_levels", "growth_offsets"),
        }
        data = asdict(self)
        for section, keys in sections.items():
            parser[section] = {}
            for key in keys:
                value = data[key]
                if value is None:
                    continue
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                parser[section][key] = str(value)
        import io

        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, **overrides) -> "ExperimentConfig":
        import configparser

        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_string(text)
        kwargs: dict = {}
        fields = {f.name: f.type for f in cls.__dataclass_fields__.values()}  # type: ignore
        for section in parser.sections():
            for key, raw in parser[section].items():
                if key not in fields:
                    raise ConfigError(f"unknown config key {key!r}")
                kwargs[key] = _parse_config_value(key, raw)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


_TUPLE_KEYS = {"club_R_list", "R_list", "eps_levels", "growth_offsets", "radius_kinds"}
_INT_KEYS = {"dim", "n_per_side", "max_iter_factor", "replicas", "master_seed", "threads"}
_STR_KEYS = {"kind", "cov_family", "edge_rule", "moment_source", "sigma_mean", "out_dir"}
_BOOL_KEYS = {"save_fields"}


def _parse_config_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        items = [s for s in raw.split(",") if s.strip()]
        if key == "radius_kinds":
            return tuple(s.strip() for s in items)
        if key == "growth_offsets":
            return tuple(int(float(s)) for s in items)
        return tuple(float(s) for s in items)
    if key in _INT_KEYS:
        return int(raw)
    if key in _BOOL_KEYS:
        return raw.lower() in ("1", "true", "yes", "on")
    if key in _STR_KEYS:
        return raw
    if raw.lower() in ("none", ""):
        return None
    return float(raw)


@dataclass
class ExperimentRecord:
    config_hash: str
    kind: str
    replica: int
    seed: tuple
    observables: dict
    arrays: dict = dc_field(default_factory=dict)
    error: Optional[str] = None
    wall_clock: float = 0.0
    version: str = __version__

    @property
    def failed(self) -> bool:
        return self.error is not None


# ---------------------------------------------------------------------------
# shared per-replica building blocks
# ---------------------------------------------------------------------------

def _sample_coefficient(config: ExperimentConfig, replica: int, truncate: bool = True):
    grid = config.grid
    g = sample_gaussian_field(grid, config.covariance,
                              (config.master_seed, replica), config.psd_tol)
    g.meta["config_hash"] = config.config_hash()
    a = exp_field(g)
    a_solve = a
    if truncate and config.trunc_M is not None:
        a_solve = truncate_coefficient(a, config.trunc_M)
    return g, a, a_solve


def _corrector_pipeline(config: ExperimentConfig, replica: int):
    _, a, a_solve = _sample_coefficient(config, replica)
    aE = edge_coefficients(a_solve, config.edge_rule)
    cset = compute_corrector_set(a_solve, aE, tol=config.tol, max_iter=config.max_iter)
    return a, a_solve, aE, cset


def _flatten_reports(cset: CorrectorSet, out: dict):
    for i, rep in enumerate(cset.reports):
        out[f"solve_iterations[phi{i}]"] = float(rep.iterations)
        out[f"solve_residual[phi{i}]"] = rep.relative_residual


# ---------------------------------------------------------------------------
# replica functions, one per experiment kind
# ---------------------------------------------------------------------------

def _replica_sample_field(config: ExperimentConfig, replica: int):
    grid = config.grid
    g, a, _ = _sample_coefficient(config, replica, truncate=False)
    gv, av = g.scalar, a.scalar
    obs = {"var_G": float(np.mean(gv**2)), "max_abs_G": float(np.abs(gv).max())}
    lag = max(1, int(round(config.corr_length / grid.spacing)))
    shifted = np.roll(gv, -lag, axis=0)
    obs["cov_lag"] = float(np.mean(gv * shifted))
    obs["lag_distance"] = lag * grid.spacing
    for p in (1, 2, 3):
        obs[f"mean_a_pow[{p}]"] = float(np.mean(av**p))
        obs[f"mean_a_pow[{-p}]"] = float(np.mean(av ** (-p)))
    if config.trunc_M is not None:
        clipped = (av > config.trunc_M) | (av < 1.0 / config.trunc_M)
        obs["clamp_fraction"] = float(clipped.mean())
    return obs, {}


def _replica_correctors(config: ExperimentConfig, replica: int):
    a, a_solve, aE, cset = _corrector_pipeline(config, replica)
    obs: dict = {}
    d = config.dim
    for i in range(d):
        for j in range(d):
            obs[f"ahom[{i},{j}]"] = float(cset.ahom_sample[i, j])
        obs[f"reconstruction_residual[{i}]"] = reconstruction_residual(cset, i)
    av = a.scalar
    obs["mean_a"] = float(av.mean())
    obs["mean_inv_a"] = float((1.0 / av).mean())
    obs["K_sample"] = ellipticity_bounds(a)
    _flatten_reports(cset, obs)
    if config.save_fields and config.out_dir:
        from .field import save_field

        path = Path(config.out_dir) / f"phi_replica{replica:05d}.bin"
        from .field import LatticeField

        bundle = LatticeField(cset.grid, cset.bundle_components(),
                              {"seed": config.master_seed})
        save_field(bundle, path)
    return obs, {}


def _tail_subsample(values: np.ndarray, seed, limit: int = 70000) -> np.ndarray:
    if values.size <= limit:
        return values.astype(float)
    from . import rng as _rng

    gen = _rng.generator(*seed)
    idx = gen.choice(values.size, size=limit, replace=False)
    return values[np.sort(idx)].astype(float)


def _replica_radii(config: ExperimentConfig, replica: int):
    grid = config.grid
    _, a, a_solve = _sample_coefficient(config, replica)
    obs: dict = {}
    arrays: dict = {}
    p = p_diamond(config.dim)
    if config.moment_source == "exact":
        moments = (lognormal_moment(config.amplitude, p),
                   lognormal_moment(config.amplitude, -p))
    else:
        av = a.scalar
        moments = (float(np.mean(av**p)), float(np.mean(av ** (-p))))

    r_dia = compute_r_diamond(a, moments, comparison=config.c_diamond)
    obs["r_diamond_censored_fraction"] = float(r_dia.saturated.mean())
    obs["r_diamond_origin"] = float(r_dia.values[(0,) * config.dim])
    arrays["r_diamond"] = _tail_subsample(
        r_dia.tail_samples(), (config.master_seed, replica, 11))

    if "club" in config.radius_kinds:
        for R in config.club_R_list:
            if R <= max_radius(grid) + 1e-12:
                obs[f"r_club[R={R:g}]"] = compute_r_club(a, R, config.club_eps)

    need_correctors = any(k in config.radius_kinds for k in ("star", "spade"))
    if need_correctors:
        aE = edge_coefficients(a_solve, config.edge_rule)
        cset = compute_corrector_set(a_solve, aE, tol=config.tol, max_iter=config.max_iter)
        _flatten_reports(cset, obs)
        if "star" in config.radius_kinds:
            r_star = compute_r_star(cset, r_dia, config.c_star)
            obs["r_star_censored_fraction"] = float(r_star.saturated.mean())
            arrays["r_star"] = _tail_subsample(
                r_star.tail_samples(), (config.master_seed, replica, 12))
        if "spade" in config.radius_kinds:
            try:
                obs["r_spade"] = compute_r_spade(
                    a_solve, aE, cset.phi, config.c_spade,
                    r_floor=float(r_dia.values[(0,) * config.dim]))
                obs["r_spade_censored"] = 0.0
            except SaturatedRadius:
                obs["r_spade_censored"] = 1.0
    return obs, arrays


def _replica_clt_scaling(config: ExperimentConfig, replica: int):
    _, _, _, cset = _corrector_pipeline(config, replica)
    obs: dict = {}
    for R in config.R_list:
        for ob in avg_gradient_observable(cset, R, replica):
            obs[ob.name] = ob.value
    d = config.dim
    for i in range(d):
        for j in range(d):
            obs[f"ahom[{i},{j}]"] = float(cset.ahom_sample[i, j])
    _flatten_reports(cset, obs)
    return obs, {}


def _growth_points(config: ExperimentConfig):
    pts = []
    for r in config.growth_offsets:
        steps = int(round(r / config.grid.spacing))
        for ax in range(config.dim):
            for sign in (1, -1):
                x = [0] * config.dim
                x[ax] = sign * steps
                pts.append((float(r), tuple(x)))
    return pts


def _replica_corrector_growth(config: ExperimentConfig, replica: int):
    _, _, _, cset = _corrector_pipeline(config, replica)
    obs: dict = {}
    for k, (r, x) in enumerate(_growth_points(config)):
        ob = corrector_growth_observable(cset, x, replica)
        obs[f"growth[r={r:g},k={k}]"] = ob.value
    _flatten_reports(cset, obs)
    return obs, {}


def _commutator_test_functions(dim: int) -> list[TestFunction]:
    return basis_test_functions(dim) + [TestFunction(0, 0, "bump_sq")]


def _replica_commutator(config: ExperimentConfig, replica: int, ahom: np.ndarray):
    a, _, _, cset = (_corrector_pipeline(config, replica))
    xi = build_commutator(a, cset, ahom, replica)
    obs: dict = {}
    d = config.dim
    rm = xi.row_means()
    for i in range(d):
        for j in range(d):
            obs[f"xi_row_mean[{i},{j}]"] = float(rm[i, j])
            obs[f"ahom[{i},{j}]"] = float(cset.ahom_sample[i, j])
    for eps in config.eps_levels:
        for F in _commutator_test_functions(d):
            ob = commutator_observable(xi, F, eps, replica)
            obs[ob.name] = ob.value
    _flatten_reports(cset, obs)
    return obs, {}


def _replica_pathwise(config: ExperimentConfig, replica: int, ahom: np.ndarray):
    a, a_solve, aE, cset = _corrector_pipeline(config, replica)
    grid = config.grid
    d = config.dim
    amap = np.asarray(ahom).T
    xi_std = build_commutator(a_solve, cset, ahom, replica)
    obs: dict = {}
    f_dir, g_dir = 0, min(1, d - 1)
    for eps in config.eps_levels:
        window = int(round(1.0 / eps))
        if window * 4 > grid.n_per_side:
            raise ConfigError(f"window {window} exceeds middle quarter")
        f_edges = bump_edge_field(grid, window, f_dir)
        g_cells = bump_cell_field(grid, window, g_dir)
        u_eps, _ = solve_divform(aE, h=f_edges, tol=config.tol, max_iter=config.max_iter)
        u_bar = solve_constant_divform_spectral(grid, amap, f_edges)
        g_edges_hom = bump_edge_field(grid, window, g_dir)
        v_bar = solve_constant_divform_spectral(grid, amap.T, g_edges_hom)
        grad_u = cell_gradient(u_eps.scalar, grid)
        a_cells = a_solve.scalar
        xi_eps = np.empty((d, *grid.shape))
        for j in range(d):
            xi_eps[j] = a_cells * grad_u[j] - sum(amap[j, l] * grad_u[l] for l in range(d))
        X = eps**d * float(np.sum(g_cells * xi_eps))
        grad_ub = cell_gradient(u_bar.scalar, grid)
        grad_vb = cell_gradient(v_bar.scalar, grid)
        Y = eps**d * float(
            sum(np.sum(grad_vb[j] * xi_std.xi[i, j] * grad_ub[i])
                for i in range(d) for j in range(d))
        )
        obs[f"pathwise_X[eps={eps:g}]"] = X
        obs[f"pathwise_Y[eps={eps:g}]"] = Y
    return obs, {}


def _replica_two_scale_phase1(config: ExperimentConfig, replica: int):
    _, _, _, cset = _corrector_pipeline(config, replica)
    obs = {}
    d = config.dim
    for i in range(d):
        for j in range(d):
            obs[f"ahom[{i},{j}]"] = float(cset.ahom_sample[i, j])
    return obs, {}


def _replica_two_scale(config: ExperimentConfig, replica: int, ahom: np.ndarray):
    a, a_solve, aE, cset = _corrector_pipeline(config, replica)
    amap = np.asarray(ahom).T
    obs: dict = {}
    for eps in config.eps_levels:
        cell = solve_two_scale_level(a_solve, aE, cset, amap, eps,
                                     direction=0, tol=config.tol,
                                     max_iter=config.max_iter)
        obs[f"two_scale_error[eps={eps:g}]"] = cell["error"]
        obs[f"two_scale_iters[eps={eps:g}]"] = float(cell["iterations"])
        obs[f"energy_defect[eps={eps:g}]"] = cell["energy_defect"]
    return obs, {}


def _replica_hole_filling(config: ExperimentConfig, replica: int):
    grid = config.grid
    _, a, a_solve = _sample_coefficient(config, replica)
    aE = edge_coefficients(a_solve, config.edge_rule)
    p = p_diamond(config.dim)
    moments = (lognormal_moment(config.amplitude, p),
               lognormal_moment(config.amplitude, -p))
    r_dia = compute_r_diamond(a, moments, comparison=config.c_diamond)
    r0 = float(r_dia.values[(0,) * config.dim])
    phi, _ = solve_divform(aE, g=_unit_edges(grid, 0), tol=config.tol,
                           max_iter=config.max_iter)
    R = max_radius(grid)
    r_list = [r for r in dyadic_radii(grid) if r >= r0 - 1e-12 and r < R]
    if len(r_list) < 2:
        r_list = dyadic_radii(grid)[:-1]
    result = hole_filling_experiment(a_solve, aE, phi, 0, r_list, R)
    obs = {"r_diamond_origin": r0,
           "beta_hat": result["beta_hat"],
           "c_hat": result["c_hat"],
           "alpha_reverse_holder": result["alpha_reverse_holder"]}
    for r, e in zip(result["radii"], result["energies"]):
        obs[f"energy[r={r:g}]"] = float(e)
    return obs, {}


def _replica_mean_value(config: ExperimentConfig, replica: int):
    grid = config.grid
    _, a, a_solve = _corrector_free_sample(config, replica)
    aE = edge_coefficients(a_solve, config.edge_rule)
    p = p_diamond(config.dim)
    moments = (lognormal_moment(config.amplitude, p),
               lognormal_moment(config.amplitude, -p))
    r_dia = compute_r_diamond(a, moments, comparison=config.c_diamond)
    cset = compute_corrector_set(a_solve, aE, tol=config.tol,
                                 max_iter=config.max_iter, with_sigma=config.dim > 1)
    r_star = compute_r_star(cset, r_dia, config.c_star)
    r0 = float(r_star.values[(0,) * config.dim])
    R = max_radius(grid)
    obs: dict = {"r_star_origin": r0}
    for R_test in (R / 2, R):
        res = mean_value_experiment(a_solve, aE, cset.phi[0], 0, r0, R_test)
        obs[f"worst_restricted[R={R_test:g}]"] = res["worst_restricted"]
        obs[f"worst_all[R={R_test:g}]"] = res["worst_all"]
    return obs, {}


def _corrector_free_sample(config, replica):
    return _sample_coefficient(config, replica)


def _unit_edges(grid: LatticeGrid, direction: int) -> np.ndarray:
    from .pde import unit_edge_field

    return unit_edge_field(grid, direction)


# ---------------------------------------------------------------------------
# the orchestrator
# ---------------------------------------------------------------------------

_SIMPLE_KINDS: dict[str, Callable] = {
    "sample-field": _replica_sample_field,
    "correctors": _replica_correctors,
    "radii": _replica_radii,
    "clt-scaling": _replica_clt_scaling,
    "corrector-growth": _replica_corrector_growth,
    "hole-filling": _replica_hole_filling,
    "mean-value": _replica_mean_value,
}

_POOLED_AHOM_KINDS: dict[str, Callable] = {
    "commutator": _replica_commutator,
    "pathwise": _replica_pathwise,
    "two-scale": _replica_two_scale,
}


def _run_one(config: ExperimentConfig, replica: int, extra=None) -> ExperimentRecord:
    start = time.perf_counter()
    seed = (config.master_seed, replica)
    try:
        if config.kind in _SIMPLE_KINDS:
            obs, arrays = _SIMPLE_KINDS[config.kind](config, replica)
        else:
            obs, arrays = _POOLED_AHOM_KINDS[config.kind](config, replica, extra)
        return ExperimentRecord(config.config_hash(), config.kind, replica, seed,
                                obs, arrays, None, time.perf_counter() - start)
    except Exception as exc:  # noqa: BLE001 - per-replica failures are data
        return ExperimentRecord(config.config_hash(), config.kind, replica, seed,
                                {}, {}, f"{type(exc).__name__}: {exc}",
                                time.perf_counter() - start)


def _run_phase1(config: ExperimentConfig, replica: int) -> ExperimentRecord:
    start = time.perf_counter()
    seed = (config.master_seed, replica)
    try:
        obs, arrays = _replica_two_scale_phase1(config, replica)
        return ExperimentRecord(config.config_hash(), config.kind, replica, seed,
                                obs, arrays, None, time.perf_counter() - start)
    except Exception as exc:  # noqa: BLE001
        return ExperimentRecord(config.config_hash(), config.kind, replica, seed,
                                {}, {}, f"{type(exc).__name__}: {exc}",
                                time.perf_counter() - start)


def _map_replicas(config: ExperimentConfig, fn, indices, extra=None,
                  writer=None) -> list[ExperimentRecord]:
    records: list[ExperimentRecord] = []
    if config.threads > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            futures = {pool.submit(fn, config, r, *(() if extra is None else (extra,))): r
                       for r in indices}
            for fut in as_completed(futures):
                rec = fut.result()
                records.append(rec)
                if writer is not None:
                    writer(rec)
    else:
        for r in indices:
            rec = fn(config, r) if extra is None else fn(config, r, extra)
            records.append(rec)
            if writer is not None:
                writer(rec)
    records.sort(key=lambda rec: rec.replica)
    return records


def pooled_ahom_matrix(records: list[ExperimentRecord], dim: int) -> np.ndarray:
    good = [r for r in records if not r.failed]
    mats = []
    for rec in good:
        m = np.array([[rec.observables[f"ahom[{i},{j}]"] for j in range(dim)]
                      for i in range(dim)])
        mats.append(m)
    return np.mean(mats, axis=0)


def run_experiment(config: ExperimentConfig):
    """Execute all replicas, persist records, return (records, summary)."""
    out_dir = Path(config.out_dir) if config.out_dir else None
    writer = None
    csv_handle = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": __version__,
            "config_hash": config.config_hash(),
            "config": asdict(config),
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
        csv_handle = open(out_dir / "records.csv", "w", newline="", encoding="utf-8")
        csv_writer = csv.writer(csv_handle)
        csv_writer.writerow(["config_hash", "kind", "replica", "seed_master",
                             "name", "value", "wall_clock", "version"])

        def writer(rec: ExperimentRecord):  # noqa: F811
            if rec.failed:
                csv_writer.writerow([rec.config_hash, rec.kind, rec.replica,
                                     rec.seed[0], "__error__", rec.error,
                                     f"{rec.wall_clock:.3f}", rec.version])
            for name, value in sorted(rec.observables.items()):
                csv_writer.writerow([rec.config_hash, rec.kind, rec.replica,
                                     rec.seed[0], name, repr(value),
                                     f"{rec.wall_clock:.3f}", rec.version])
            csv_handle.flush()

    indices = list(range(config.replicas))
    try:
        if config.kind in _POOLED_AHOM_KINDS:
            phase1 = _map_replicas(config, _run_phase1, indices)
            ok = [r for r in phase1 if not r.failed]
            if config.replicas > 0 and not ok:
                raise ExperimentFailure("every phase-1 replica failed")
            ahom = pooled_ahom_matrix(phase1, config.dim) if ok else np.eye(config.dim)
            records = _map_replicas(config, _run_one, indices, extra=ahom, writer=writer)
        else:
            records = _map_replicas(config, _run_one, indices, writer=writer)
    finally:
        if csv_handle is not None:
            csv_handle.close()

    failures = [r for r in records if r.failed]
    if config.replicas > 0 and len(failures) > 0.05 * config.replicas:
        raise ExperimentFailure(
            f"{len(failures)} of {config.replicas} replicas failed: "
            f"{failures[0].error}"
        )
    summary = summarize(config, records)
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
        emit_plot_data(records, config.kind, out_dir, config)
    return records, summary


# ---------------------------------------------------------------------------
# pooling and summaries
# ---------------------------------------------------------------------------

def collect(records: list[ExperimentRecord], name: str) -> np.ndarray:
    vals = [r.observables[name] for r in records
            if not r.failed and name in r.observables]
    return np.asarray(vals, dtype=float)


def pooled_mean_stderr(records, name: str) -> tuple[float, float]:
    v = collect(records, name)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.inf
    return float(v.mean()), se


def collect_array(records: list[ExperimentRecord], name: str) -> np.ndarray:
    chunks = [r.arrays[name] for r in records if not r.failed and name in r.arrays]
    if not chunks:
        return np.empty(0)
    return np.concatenate(chunks)


def summarize(config: ExperimentConfig, records: list[ExperimentRecord]) -> dict:
    good = [r for r in records if not r.failed]
    base = {
        "kind": config.kind,
        "config_hash": config.config_hash(),
        "replicas": config.replicas,
        "completed": len(good),
        "failed": len(records) - len(good),
    }
    if not good:
        return base
    fn = _SUMMARIES.get(config.kind)
    if fn is not None:
        base.update(fn(config, good))
    return base


def _summary_sample_field(config: ExperimentConfig, records) -> dict:
    out: dict = {"moments": {}}
    for p in (1, 2, 3, -1, -2, -3):
        mean, se = pooled_mean_stderr(records, f"mean_a_pow[{p}]")
        exact = lognormal_moment(config.amplitude, p)
        out["moments"][str(p)] = {
            "pooled": mean, "stderr": se, "exact": exact,
            "z": (mean - exact) / se if se > 0 else math.nan,
        }
    var_mean, var_se = pooled_mean_stderr(records, "var_G")
    out["variance"] = {"pooled": var_mean, "stderr": var_se, "target": config.amplitude}
    cov_mean, cov_se = pooled_mean_stderr(records, "cov_lag")
    lag = collect(records, "lag_distance")
    lag_d = float(lag[0]) if lag.size else config.corr_length
    x = np.zeros(config.dim)
    x[0] = lag_d
    out["lag_covariance"] = {
        "pooled": cov_mean, "stderr": cov_se,
        "target": covariance_eval(config.covariance, x),
    }
    return out


def _summary_correctors(config: ExperimentConfig, records) -> dict:
    d = config.dim
    mean = np.array([[pooled_mean_stderr(records, f"ahom[{i},{j}]")[0]
                      for j in range(d)] for i in range(d)])
    se = np.array([[pooled_mean_stderr(records, f"ahom[{i},{j}]")[1]
                    for j in range(d)] for i in range(d)])
    harm_m, harm_se = pooled_mean_stderr(records, "mean_inv_a")
    arith_m, arith_se = pooled_mean_stderr(records, "mean_a")
    K_m, K_se = pooled_mean_stderr(records, "K_sample")
    recon = max(collect(records, f"reconstruction_residual[{i}]").max()
                for i in range(d))
    sym = mean + mean.T
    eigs = np.linalg.eigvalsh(0.5 * sym)
    out = {
        "ahom": mean.tolist(),
        "ahom_stderr": se.tolist(),
        "voigt_reuss": {
            "harmonic": 1.0 / harm_m,
            "harmonic_stderr": harm_se / harm_m**2,
            "arithmetic": arith_m,
            "arithmetic_stderr": arith_se,
        },
        "ellipticity": {
            "K": K_m, "K_stderr": K_se,
            "min_eig": float(eigs.min()),
            "max_norm": float(np.linalg.norm(mean.T, 2)),
        },
        "max_reconstruction_residual": float(recon),
    }
    return out


def _summary_radii(config: ExperimentConfig, records) -> dict:
    out: dict = {}
    for name in ("r_diamond", "r_star"):
        values = collect_array(records, name)
        if values.size == 0:
            continue
        entry: dict = {"n": int(values.size)}
        cens = collect(records, f"{name}_censored_fraction")
        entry["censored_fraction"] = float(cens.mean()) if cens.size else 0.0
        try:
            log2fit = fit_log2_tail(values, config.tail_fraction)
            powfit = fit_power_tail(values, config.tail_fraction)
            entry["log2_fit"] = log2fit.as_dict()
            entry["power_fit"] = powfit.as_dict()
        except Exception as exc:  # noqa: BLE001 - degenerate tails are data
            entry["fit_error"] = str(exc)
        out[name] = entry
    for R in config.club_R_list:
        vals = collect(records, f"r_club[R={R:g}]")
        if vals.size >= 50:
            try:
                fit = fit_log2_tail(vals, tail_fraction=0.5, min_samples=30)
                out[f"r_club[R={R:g}]"] = fit.as_dict()
            except Exception as exc:  # noqa: BLE001
                out[f"r_club[R={R:g}]"] = {"fit_error": str(exc)}
    spade = collect(records, "r_spade")
    if spade.size:
        out["r_spade"] = {"n": int(spade.size),
                          "median": float(np.median(spade)),
                          "max": float(spade.max())}
    return out


def _grad_component_names(config: ExperimentConfig, prefix: str) -> list[str]:
    d = config.dim
    return [f"{prefix}{i}_d{ax}" for i in range(d) for ax in range(d)]


def clt_variance_table(config: ExperimentConfig, records) -> list[tuple[float, float, float]]:
    """(R, log total variance of grad-phi ball averages, stderr of the log)."""
    rows = []
    for R in config.R_list:
        total = 0.0
        rel_vars = []
        for name in _grad_component_names(config, "phi"):
            v = collect(records, f"grad_phi_avg[{name},R={R:g}]")
            if v.size < 2:
                continue
            total += float(v.var(ddof=1))
            rel_vars.append(2.0 / (v.size - 1))
        log_se = math.sqrt(max(rel_vars)) if rel_vars else math.inf
        rows.append((R, math.log(total), log_se))
    return rows


def _summary_clt_scaling(config: ExperimentConfig, records) -> dict:
    rows = clt_variance_table(config, records)
    fit = ScalingFit.from_log_ordinates([r[0] for r in rows], [r[1] for r in rows])
    d = config.dim
    ahom = np.array([[pooled_mean_stderr(records, f"ahom[{i},{j}]")[0]
                      for j in range(d)] for i in range(d)])
    ahom_se = np.array([[pooled_mean_stderr(records, f"ahom[{i},{j}]")[1]
                         for j in range(d)] for i in range(d)])
    centering = {}
    for name in _grad_component_names(config, "phi"):
        v = collect(records, f"grad_phi_avg[{name},R={config.R_list[0]:g}]")
        se = v.std(ddof=1) / math.sqrt(v.size)
        centering[name] = {"mean": float(v.mean()), "stderr": float(se)}
    return {
        "variance_table": rows,
        "slope": fit.slope,
        "slope_stderr": fit.slope_stderr,
        "expected_slope": -float(config.dim),
        "ahom": ahom.tolist(),
        "ahom_stderr": ahom_se.tolist(),
        "centering": centering,
    }


def growth_second_moments(config: ExperimentConfig, records):
    """Pooled second moment of the increment observable per offset radius."""
    rows = []
    for r in sorted(set(float(r) for r in config.growth_offsets)):
        vals = []
        for k, (rr, _) in enumerate(_growth_points(config)):
            if rr == r:
                vals.append(collect(records, f"growth[r={r:g},k={k}]"))
        v = np.concatenate(vals)
        m2 = float(np.mean(v**2))
        se = float(np.std(v**2, ddof=1) / math.sqrt(v.size))
        rows.append((r, m2, se))
    return rows


def _summary_corrector_growth(config: ExperimentConfig, records) -> dict:
    rows = growth_second_moments(config, records)
    r = np.array([row[0] for row in rows])
    m2 = np.array([row[1] for row in rows])
    if config.dim == 1:
        u = r
        model = "linear"
    elif config.dim == 2:
        u = np.log(r + 2.0)
        model = "log"
    else:
        u = np.ones_like(r)
        model = "constant"
    if config.dim >= 3:
        fit = {"model": model, "spread": float(m2.max() / m2.min())}
    else:
        slope, intercept = np.polyfit(u, m2, 1)
        pred = slope * u + intercept
        ss_res = float(np.sum((m2 - pred) ** 2))
        ss_tot = float(np.sum((m2 - m2.mean()) ** 2))
        fit = {
            "model": model,
            "B": float(slope),
            "A": float(intercept),
            "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        }
    return {"second_moments": rows, "fit": fit}


def _summary_commutator(config: ExperimentConfig, records) -> dict:
    d = config.dim
    eps_sorted = sorted(config.eps_levels, reverse=True)
    out: dict = {"variance": {}, "variance_ratios": {}}
    fns = _commutator_test_functions(d)
    for F in fns:
        variances = {}
        for eps in eps_sorted:
            v = collect(records, f"commutator_pairing[{F.descriptor},eps={eps:g}]")
            variances[eps] = float(v.var(ddof=1))
        out["variance"][F.descriptor] = variances
        ratios = [variances[a] / variances[b]
                  for a, b in zip(eps_sorted, eps_sorted[1:])]
        out["variance_ratios"][F.descriptor] = ratios
    eps_min = min(config.eps_levels)
    samples = {F: collect(records, f"commutator_pairing[{F.descriptor},eps={eps_min:g}]")
               for F in fns}
    v00 = samples[fns[0]]
    standardized = (v00 - v00.mean()) / v00.std(ddof=1)
    ks = sstats.kstest(standardized, "norm")
    out["ks"] = {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue),
                 "n": int(v00.size), "eps": eps_min}
    try:
        Q, Q_se = estimate_Q(config.grid, samples, eps_min)
        out["Q_diag"] = q_diagonal_report(Q, Q_se)
        out["Q"] = Q.tolist()
        out["Q_stderr"] = Q_se.tolist()
        inner00 = pairing_inner(config.grid, fns[0], fns[0], eps_min)
        var_se = v00.var(ddof=1) * math.sqrt(2.0 / (v00.size - 1))
        out["coherence"] = {
            "direct_var": float(v00.var(ddof=1)),
            "direct_var_stderr": float(var_se),
            "Q_pairing": float(Q[0, 0, 0, 0] * inner00),
            "Q_pairing_stderr": float(Q_se[0, 0, 0, 0] * inner00),
        }
    except Exception as exc:  # noqa: BLE001
        out["Q_error"] = str(exc)
    centering = {}
    for i in range(d):
        for j in range(d):
            m, se = pooled_mean_stderr(records, f"xi_row_mean[{i},{j}]")
            centering[f"{i}{j}"] = {"mean": m, "stderr": se}
    out["xi_centering"] = centering
    return out


def _summary_pathwise(config: ExperimentConfig, records) -> dict:
    d = config.dim
    out: dict = {"residual": {}, "variance": {}}
    for eps in sorted(config.eps_levels, reverse=True):
        X = collect(records, f"pathwise_X[eps={eps:g}]")
        Y = collect(records, f"pathwise_Y[eps={eps:g}]")
        scale = eps ** (-d / 2.0)
        residual = scale * np.abs(X - X.mean() - Y)
        pooled = float(np.sqrt(np.mean(residual**2)))
        out["residual"][str(eps)] = {
            "pooled_l2": pooled,
            "mean_inflation": float(scale * X.std(ddof=1) / math.sqrt(X.size)),
            "envelope": float(eps * mu_d(1.0 / eps, d)),
        }
        out["variance"][str(eps)] = float(np.var(scale * X, ddof=1))
    eps_sorted = sorted(config.eps_levels, reverse=True)
    out["residual_ratios"] = [
        out["residual"][str(a)]["pooled_l2"] / out["residual"][str(b)]["pooled_l2"]
        for a, b in zip(eps_sorted, eps_sorted[1:])
    ]
    out["variance_ratios"] = [
        max(out["variance"][str(a)], out["variance"][str(b)])
        / min(out["variance"][str(a)], out["variance"][str(b)])
        for a, b in zip(eps_sorted, eps_sorted[1:])
    ]
    return out


def _summary_two_scale(config: ExperimentConfig, records) -> dict:
    eps_sorted = sorted(config.eps_levels, reverse=True)
    pooled = []
    for eps in eps_sorted:
        v = collect(records, f"two_scale_error[eps={eps:g}]")
        pooled.append(float(np.sqrt(np.mean(v**2))))
    defects = np.concatenate([collect(records, f"energy_defect[eps={e:g}]")
                              for e in eps_sorted])
    out = {
        "pooled_errors": dict(zip(map(str, eps_sorted), pooled)),
        "max_energy_defect": float(defects.max()),
    }
    if len(eps_sorted) >= 3:
        fit = ScalingFit.from_log_ordinates(eps_sorted, np.log(pooled))
        out["slope"] = fit.slope
        out["slope_stderr"] = fit.slope_stderr
        out["models"] = compare_rate_models(eps_sorted, pooled, config.dim)
    return out


def _summary_hole_filling(config: ExperimentConfig, records) -> dict:
    radii_names = sorted(
        {name for r in records for name in r.observables if name.startswith("energy[r=")}
    )
    radii_vals = np.array([float(n[len("energy[r="):-1]) for n in radii_names])
    order = np.argsort(radii_vals)
    radii_vals = radii_vals[order]
    radii_names = [radii_names[k] for k in order]
    R = radii_vals[-1]
    xs, ys = [], []
    per_replica = []
    for rec in records:
        if rec.failed or radii_names[0] not in rec.observables:
            continue
        energies = np.array([rec.observables[n] for n in radii_names])
        e_ref = energies[-1]
        per_replica.append(energies / e_ref)
        for r, e in zip(radii_vals[:-1], energies[:-1]):
            xs.append(math.log(R / r))
            ys.append(math.log(e / e_ref))
    slope, intercept = np.polyfit(xs, ys, 1)
    beta = float(np.clip(config.dim - slope, 1e-6, config.dim))
    c_values = []
    for ratios in per_replica:
        bound = (R / radii_vals) ** (config.dim - beta)
        c_values.append(float((ratios / bound).max()))
    c_hat = max(c_values)
    coverage = float(np.mean([c <= 1.1 * c_hat for c in c_values]))
    return {
        "beta_hat": beta,
        "c_hat": c_hat,
        "coverage_with_slack": coverage,
        "pooled_slope": float(slope),
        "alpha_reverse_holder": records[0].observables.get("alpha_reverse_holder"),
        "beta_hat_per_replica": [float(b) for b in collect(records, "beta_hat")],
    }


def _summary_mean_value(config: ExperimentConfig, records) -> dict:
    R = max_radius(config.grid)
    out = {}
    for key in (f"worst_restricted[R={R / 2:g}]", f"worst_restricted[R={R:g}]",
                f"worst_all[R={R:g}]"):
        v = collect(records, key)
        if v.size:
            out[key] = {"p95": float(np.percentile(v, 95)),
                        "max": float(v.max()), "median": float(np.median(v))}
    return out


_SUMMARIES = {
    "sample-field": _summary_sample_field,
    "correctors": _summary_correctors,
    "radii": _summary_radii,
    "clt-scaling": _summary_clt_scaling,
    "corrector-growth": _summary_corrector_growth,
    "commutator": _summary_commutator,
    "pathwise": _summary_pathwise,
    "two-scale": _summary_two_scale,
    "hole-filling": _summary_hole_filling,
    "mean-value": _summary_mean_value,
}


# ---------------------------------------------------------------------------
# plot data emission
# ---------------------------------------------------------------------------

def emit_plot_data(records: list[ExperimentRecord], kind: str, out_dir,
                   config: Optional[ExperimentConfig] = None) -> list[Path]:
    """Write tabular files shaped for the standard plots of each experiment."""
    kinds = {r.kind for r in records}
    if kinds and kinds != {kind}:
        raise MixedKinds(f"records of kinds {kinds} passed to emitter for {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    good = [r for r in records if not r.failed]
    written: list[Path] = []

    def table(name: str, header: list[str], rows: list) -> None:
        path = out_dir / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    if kind == "clt-scaling" and config is not None:
        rows = clt_variance_table(config, good) if good else []
        table("clt_scaling.csv", ["R", "log_var", "stderr"],
              [(f"{r:g}", f"{lv:.8e}", f"{se:.3e}") for r, lv, se in rows])
    elif kind == "radii":
        for name in ("r_diamond", "r_star"):
            values = collect_array(good, name)
            rows = []
            if values.size:
                values = np.sort(values)
                n = values.size
                distinct = np.unique(values)
                counts_ge = n - np.searchsorted(values, distinct, side="left")
                censored = collect(good, f"{name}_censored_fraction")
                cens_n = int(round(censored.mean() * n)) if censored.size else 0
                for x, cge in zip(distinct, counts_ge):
                    surv = cge / n
                    rows.append((f"{x:.6g}", f"{np.log1p(x) ** 2:.6g}",
                                 f"{-math.log(surv):.6g}" if surv > 0 else "inf",
                                 cens_n))
            table(f"tail_{name}.csv",
                  ["x", "log1p_sq", "neg_log_survival", "censored_n"], rows)
    elif kind == "corrector-growth" and config is not None:
        rows = growth_second_moments(config, good) if good else []
        table("growth.csv", ["abs_x", "second_moment", "stderr"],
              [(f"{r:g}", f"{m:.8e}", f"{se:.3e}") for r, m, se in rows])
    elif kind == "two-scale" and config is not None:
        rows = []
        if good:
            for eps in sorted(config.eps_levels, reverse=True):
                v = collect(good, f"two_scale_error[eps={eps:g}]")
                pooled = float(np.sqrt(np.mean(v**2)))
                se = float(np.std(v, ddof=1) / math.sqrt(v.size))
                rows.append((f"{eps:g}", f"{pooled:.8e}", f"{se:.3e}"))
        table("two_scale.csv", ["eps", "pooled_error", "stderr"], rows)
    elif kind == "commutator" and config is not None:
        rows = []
        if good:
            eps_min = min(config.eps_levels)
            F = _commutator_test_functions(config.dim)[0]
            v = collect(good, f"commutator_pairing[{F.descriptor},eps={eps_min:g}]")
            v = np.sort((v - v.mean()) / v.std(ddof=1))
            qs = sstats.norm.ppf((np.arange(v.size) + 0.5) / v.size)
            rows = [(f"{s:.6g}", f"{q:.6g}") for s, q in zip(v, qs)]
        table("commutator_qq.csv", ["standardized_sample", "normal_quantile"], rows)
    else:
        rows = []
        for rec in good:
            for name, value in sorted(rec.observables.items()):
                rows.append((rec.replica, name, repr(value)))
        table(f"{kind.replace('-', '_')}_records.csv", ["replica", "name", "value"], rows)
    return written
