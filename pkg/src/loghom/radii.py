"""Random regularity radii and the stretched log^2 tail law.

All four radii are deterministic functionals of one sample:

* r_diamond: smallest dyadic scale from which ball averages of
  a^p + a^-p (p = d + 1) stay within the two-sided comparison bound of
  their expectation, then the smallest 1/8-Lipschitz majorant.
* r_club(R): ellipticity-ratio radius (R^(-eps/2) sup_{B_R}(a + 1/a))^2.
* r_star: smallest dyadic scale above r_diamond from which the corrector
  bundle (phi, sigma) is sublinear in the prescribed ball norm, enveloped.
* r_spade: smallest dyadic scale at the origin from which the corrector
  energy density is dominated by averages of a, maximized over directions.

Sites whose search exceeds side_length / 4 saturate: they are assigned the
cap, flagged, and excluded from tail fits (right censoring).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .balls import (
    ball_count,
    ball_mean_all,
    ball_mean_at,
    ball_max_at,
    ball_offsets,
    dyadic_radii,
    lipschitz_envelope,
    max_radius,
)
from .correctors import CorrectorSet
from .errors import BallTooLarge, InsufficientTail, SaturatedRadius
from .field import LatticeField, LatticeGrid
from .pde import EdgeCoefficient, edge_to_cell, gradient_edges

LIPSCHITZ_SLOPE = 0.125


def p_diamond(dim: int) -> int:
    return dim + 1


def oscillation_exponent(dim: int) -> float:
    """Exponent 2 p_diamond / (p_diamond - 1) of the minimal-radius ball norm."""
    p = p_diamond(dim)
    return 2.0 * p / (p - 1.0)


def appendix_comparison_constant(dim: int) -> float:
    """C_d solving (1 - 1/C_d) 2^d = 9^-d / 2 (recorded in radius metadata).

    This is the dyadic pre-envelope constant of the construction; it is far
    too tight to witness non-saturated radii at desk scale, so the active
    two-sided bound defaults to the factor 2 of the statement itself.
    """
    return 1.0 / (1.0 - 9.0 ** (-dim) / 2.0 ** (dim + 1))


def reverse_holder_alpha(dim: int) -> float:
    """alpha = 2d(d+1) / (d^2 + d + 2), the reverse-Hoelder exponent."""
    return 2.0 * dim * (dim + 1) / (dim**2 + dim + 2)


@dataclass
class RadiusField:
    """Per-site random radius plus its saturation (right-censoring) mask."""

    grid: LatticeGrid
    values: np.ndarray
    kind: str
    params: dict = dc_field(default_factory=dict)
    saturated: np.ndarray | None = None

    def __post_init__(self):
        if self.saturated is None:
            self.saturated = np.zeros(self.grid.shape, dtype=bool)

    def saturated_sites(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in site) for site in np.argwhere(self.saturated)]

    def tail_samples(self) -> np.ndarray:
        """Uncensored values, the input to tail fits."""
        return self.values[~self.saturated]


def _smallest_admissible(conditions: list[np.ndarray], radii: list[float],
                         floor: np.ndarray | float, grid: LatticeGrid):
    """Per site: smallest dyadic radius >= floor whose suffix of conditions all hold.

    conditions[k][x] says the bound holds at scale radii[k] centered at x.
    Returns (values, saturated) before enveloping.
    """
    cap = max_radius(grid)
    suffix_ok = np.ones(grid.shape, dtype=bool)
    best = np.full(grid.shape, np.nan)
    floor_arr = np.asarray(floor, dtype=float)
    for k in range(len(radii) - 1, -1, -1):
        suffix_ok &= conditions[k]
        admissible = suffix_ok & (radii[k] >= floor_arr - 1e-12)
        best = np.where(admissible, radii[k], best)
    saturated = np.isnan(best)
    values = np.where(saturated, cap, best)
    return values, saturated


def compute_r_diamond(a_field: LatticeField, moments: tuple[float, float],
                      comparison: float = 2.0, r_min: float = 1.0) -> RadiusField:
    """Per-site minimal scale at which averages of a^p + a^-p track E[a^p + a^-p].

    moments supplies (E[a^p], E[a^-p]) (exact formula or pooled Monte Carlo);
    the two-sided bound is mean / comparison <= ball average <= comparison * mean
    over every dyadic scale from the candidate up to side_length / 4.
    """
    grid = a_field.grid
    p = p_diamond(grid.dim)
    target = float(moments[0]) + float(moments[1])
    a = a_field.scalar
    x_field = a**p + a ** (-p)
    radii = dyadic_radii(grid, r_min)
    conditions = []
    for rho in radii:
        m = ball_mean_all(x_field, grid, rho)
        conditions.append((m >= target / comparison) & (m <= target * comparison))
    values, saturated = _smallest_admissible(conditions, radii, r_min, grid)
    enveloped = lipschitz_envelope(values, grid, LIPSCHITZ_SLOPE)
    return RadiusField(
        grid, enveloped, "diamond",
        params={
            "p_diamond": p,
            "comparison": comparison,
            "C_d_appendix": appendix_comparison_constant(grid.dim),
            "dyadic_base": 2,
        },
        saturated=saturated,
    )


def compute_r_club(a_field: LatticeField, R: float, eps: float) -> float:
    """(R^(-eps/2) sup_{B_R}(a + 1/a))^2 with the sup over lattice sites."""
    grid = a_field.grid
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if R > max_radius(grid) + 1e-12:
        raise BallTooLarge(f"R = {R} exceeds side_length / 4")
    a = a_field.scalar
    sup = ball_max_at(a + 1.0 / a, grid, R)
    return float((R ** (-eps / 2.0) * sup) ** 2)


try:  # optional jit for the oscillation gather, the one hot loop in the package
    import warnings as _warnings

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        from numba import njit

    # single threaded on purpose: replicas are the unit of parallelism
    @njit(fastmath=True, cache=True)
    def _osc_accumulate_2d(v, means, offsets, half):  # pragma: no cover - jitted
        n_comp, n0, n1 = v.shape
        acc = np.zeros((n0, n1))
        for x0 in range(n0):
            for x1 in range(n1):
                total = 0.0
                for k in range(offsets.shape[0]):
                    y0 = (x0 + offsets[k, 0]) % n0
                    y1 = (x1 + offsets[k, 1]) % n1
                    z = 0.0
                    for c in range(n_comp):
                        diff = v[c, y0, y1] - means[c, x0, x1]
                        z += diff * diff
                    total += z**half
                acc[x0, x1] = total
        return acc

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def ball_oscillation_norm(components: np.ndarray, grid: LatticeGrid,
                          radius: float, exponent: float) -> np.ndarray:
    """T(x) = (avg_{y in B(x)} |v(y) - ball mean at x|^s)^(1/s) for all x.

    components has shape (C, *grid.shape); |.| is the Euclidean norm across
    components.  The mean subtraction depends on the center, so this is a
    gather over ball offsets rather than one convolution; the 2-d gather is
    jitted when numba is available, with a vectorized numpy fallback.
    """
    means = np.stack([ball_mean_all(c, grid, radius) for c in components])
    offsets = ball_offsets(grid, radius)
    count = ball_count(grid, radius)
    half = exponent / 2.0
    if _HAVE_NUMBA and grid.dim == 2:
        acc = _osc_accumulate_2d(np.ascontiguousarray(components),
                                 np.ascontiguousarray(means),
                                 offsets.astype(np.int64), half)
        return (acc / count) ** (1.0 / exponent)
    spatial_axes = tuple(range(1, grid.dim + 1))
    acc = np.zeros(grid.shape)
    for delta in offsets:
        shifted = np.roll(components, shift=tuple(-delta), axis=spatial_axes)
        z = np.sum((shifted - means) ** 2, axis=0)
        if half == 1.5:
            acc += z * np.sqrt(z)
        elif half == 2.0:
            acc += z * z
        else:
            acc += z**half
    return (acc / count) ** (1.0 / exponent)


def compute_r_star(cset: CorrectorSet, r_diamond: RadiusField, C: float = 10.0) -> RadiusField:
    """Minimal radius of sublinear corrector oscillation, above r_diamond.

    Tests (1/rho) (avg_{B_rho} |(phi, sigma) - ball mean|^s)^(1/s) <= 1/C over
    dyadic rho, s = 2 p_diamond / (p_diamond - 1), then envelopes.
    """
    grid = cset.grid
    bundle = cset.bundle_components()
    s = oscillation_exponent(grid.dim)
    radii = dyadic_radii(grid)
    conditions = []
    for rho in radii:
        osc = ball_oscillation_norm(bundle, grid, rho, s) / rho
        conditions.append(osc <= 1.0 / C)
    values, saturated = _smallest_admissible(conditions, radii, r_diamond.values, grid)
    enveloped = lipschitz_envelope(values, grid, LIPSCHITZ_SLOPE)
    # the envelope of a field bounded below by the (already Lipschitz)
    # r_diamond stays above it
    enveloped = np.maximum(enveloped, r_diamond.values)
    return RadiusField(
        grid, enveloped, "star",
        params={"p_diamond": p_diamond(grid.dim), "C": C, "dyadic_base": 2},
        saturated=saturated,
    )


def corrector_energy_density(a_field: LatticeField, aE: EdgeCoefficient,
                             phi: LatticeField) -> np.ndarray:
    """Cell field a |grad phi|^2 with the per-axis edge-square average."""
    grid = a_field.grid
    d_edges = gradient_edges(phi.scalar, grid)
    grad_sq = edge_to_cell(d_edges**2, grid).sum(axis=0)
    return a_field.scalar * grad_sq


def compute_r_spade(a_field: LatticeField, aE: EdgeCoefficient,
                    phis: list[LatticeField], C: float = 10.0,
                    r_floor: float = 1.0) -> float:
    """Minimal dyadic scale (at the origin) of energy comparability.

    Requires avg_{B_R} a |grad phi_e|^2 <= C avg_{B_2R} a for every dyadic R
    from the candidate up to side_length / 4, maximized over the coordinate
    directions.  Raises SaturatedRadius when some direction never passes.
    """
    grid = a_field.grid
    a = a_field.scalar
    radii = [r for r in dyadic_radii(grid) if r >= r_floor - 1e-12]
    if not radii:
        raise SaturatedRadius("origin")
    worst = 0.0
    for phi in phis:
        energy = corrector_energy_density(a_field, aE, phi)
        ok = [
            ball_mean_at(energy, grid, R) <= C * ball_mean_at(a, grid, 2 * R)
            for R in radii
        ]
        value = None
        good = True
        for k in range(len(radii) - 1, -1, -1):
            good = good and ok[k]
            if good:
                value = radii[k]
        if value is None:
            raise SaturatedRadius("origin")
        worst = max(worst, value)
    return worst


# ---------------------------------------------------------------------------
# tail fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    c_hat: float
    intercept: float
    r_squared: float
    sample_count: int

    def as_dict(self) -> dict:
        return {
            "c_hat": self.c_hat,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "sample_count": self.sample_count,
        }


def _tail_points(samples: np.ndarray, tail_fraction: float, min_samples: int):
    x = np.sort(np.asarray(samples, dtype=float))
    above = x[x > 1.0]
    if above.size < min_samples:
        raise InsufficientTail(f"only {above.size} samples above 1 (need {min_samples})")
    n = x.size
    threshold = np.quantile(x, 1.0 - tail_fraction)
    threshold = max(threshold, 1.0)
    values = np.unique(x[x >= threshold])
    if values.size < 4:
        raise InsufficientTail(f"only {values.size} distinct tail values")
    # exact empirical survival on the distinct-value grid
    counts_ge = n - np.searchsorted(x, values, side="left")
    survival = counts_ge / n
    keep = survival > 0
    return values[keep], -np.log(survival[keep])


def _linear_fit(u: np.ndarray, y: np.ndarray, n: int) -> TailFit:
    if np.ptp(u) < 1e-12:
        raise InsufficientTail("degenerate abscissa (constant tail values)")
    slope, intercept = np.polyfit(u, y, 1)
    pred = slope * u + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return TailFit(float(slope), float(intercept), float(r2), int(n))


def fit_log2_tail(samples, tail_fraction: float = 0.1, min_samples: int = 50) -> TailFit:
    """Least squares of -log(empirical survival) on log^2(1 + x), upper tail only.

    A positive slope c_hat with high r^2 on this abscissa is the computable
    shadow of survival ~ exp(-c log^2(1 + x)).
    """
    values, y = _tail_points(np.asarray(samples), tail_fraction, min_samples)
    u = np.log1p(values) ** 2
    return _linear_fit(u, y, len(np.asarray(samples)))


def fit_power_tail(samples, tail_fraction: float = 0.1, min_samples: int = 50) -> TailFit:
    """Same regression against log(x): the pure power-law alternative."""
    values, y = _tail_points(np.asarray(samples), tail_fraction, min_samples)
    u = np.log(values)
    return _linear_fit(u, y, len(np.asarray(samples)))


# ---------------------------------------------------------------------------
# regularity experiments on one sample
# ---------------------------------------------------------------------------

def harmonic_energy_profile(a_field: LatticeField, aE: EdgeCoefficient,
                            phi: LatticeField, direction: int,
                            radii: list[float]) -> np.ndarray:
    """Ball averages at the origin of a |grad u|^2 for u = phi_e + x_e."""
    grid = a_field.grid
    d_edges = gradient_edges(phi.scalar, grid)
    d_edges[direction] += 1.0
    grad_sq = edge_to_cell(d_edges**2, grid).sum(axis=0)
    energy = a_field.scalar * grad_sq
    return np.array([ball_mean_at(energy, grid, r) for r in radii])


def hole_filling_fit(energies: np.ndarray, radii: np.ndarray, dim: int):
    """beta_hat from the slope of log energy vs log r, clamped into (0, d].

    The fitted pair (beta_hat, C_hat) re-asserts the bound
    E_r <= C_hat (R/r)^(d - beta_hat) E_R with E_R the largest-scale average.
    """
    radii = np.asarray(radii, dtype=float)
    energies = np.asarray(energies, dtype=float)
    slope, _ = np.polyfit(np.log(radii), np.log(energies), 1)
    beta = float(np.clip(dim + slope, 1e-6, dim))
    e_ref = energies[-1]
    ratios = (energies / e_ref) / ((radii[-1] / radii) ** (dim - beta))
    return beta, float(ratios.max()), float(slope)


def hole_filling_experiment(a_field: LatticeField, aE: EdgeCoefficient,
                            phi: LatticeField, direction: int,
                            r_list, R: float) -> dict:
    grid = a_field.grid
    if R > max_radius(grid) + 1e-12:
        raise BallTooLarge(f"R = {R} exceeds side_length / 4")
    radii = sorted(set(list(r_list) + [R]))
    energies = harmonic_energy_profile(a_field, aE, phi, direction, radii)
    beta, c_worst, slope = hole_filling_fit(energies, np.asarray(radii), grid.dim)
    return {
        "radii": np.asarray(radii),
        "energies": energies,
        "beta_hat": beta,
        "c_hat": c_worst,
        "slope": slope,
        "alpha_reverse_holder": reverse_holder_alpha(grid.dim),
    }


def mean_value_experiment(a_field: LatticeField, aE: EdgeCoefficient,
                          phi: LatticeField, direction: int,
                          r_star_origin: float, R: float) -> dict:
    """Energy ratios avg_{B_r} / avg_{B_R} for u = phi_e + x_e.

    Reports the worst ratio over r >= r_star(0) (the mean-value diagnostic)
    and over all r >= 1 (the comparison that shows what r_star buys).
    """
    grid = a_field.grid
    radii = [r for r in dyadic_radii(grid) if r <= R + 1e-12]
    energies = harmonic_energy_profile(a_field, aE, phi, direction, radii + [R])
    e_ref = energies[-1]
    ratios = {r: float(e / e_ref) for r, e in zip(radii, energies[:-1])}
    restricted = [v for r, v in ratios.items() if r >= r_star_origin - 1e-12]
    worst_restricted = max(restricted) if restricted else float(energies[-2] / e_ref)
    return {
        "ratios": ratios,
        "worst_restricted": worst_restricted,
        "worst_all": max(ratios.values()),
        "r_star_origin": r_star_origin,
        "R": R,
    }
