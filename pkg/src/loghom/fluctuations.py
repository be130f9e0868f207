"""Fluctuation observables: averaged gradients, corrector growth, commutators.

Scale separation is emulated on a fixed sample: the lattice is the
microstructure (one correlation cell per O(1) lattice cells) and test
functions live on windows of 1/eps cells, so eps = (unit correlation cell)
/ (window size).  One sample therefore serves every eps level, identically
in law to rescaling the coefficient field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .balls import ball_mean_at, ball_offsets, max_radius
from .correctors import CorrectorSet
from .errors import BallTooLarge, GridMismatch, RankDeficient, ScaleMismatch
from .field import LatticeField, LatticeGrid
from .pde import cell_gradient, edge_to_cell
from .radii import oscillation_exponent

OBSERVABLE_KINDS = (
    "grad_phi_avg",
    "grad_sigma_avg",
    "corrector_increment",
    "commutator_pairing",
    "pathwise_residual",
)


@dataclass(frozen=True)
class Observable:
    kind: str
    descriptor: str
    value: float
    replica: Optional[int] = None

    @property
    def name(self) -> str:
        return f"{self.kind}[{self.descriptor}]"


@dataclass
class ScalingFit:
    """log-log regression record: ordinates are logs, abscissae raw scales."""

    abscissae: np.ndarray
    ordinates: np.ndarray
    slope: float
    slope_stderr: float
    intercept: float
    r_squared: float

    @classmethod
    def from_log_ordinates(cls, abscissae, log_values) -> "ScalingFit":
        x = np.log(np.asarray(abscissae, dtype=float))
        y = np.asarray(log_values, dtype=float)
        if x.size < 3:
            raise ValueError("need at least 3 abscissae for a scaling fit")
        slope, intercept = np.polyfit(x, y, 1)
        pred = slope * x + intercept
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        dof = max(x.size - 2, 1)
        denom = float(np.sum((x - x.mean()) ** 2))
        stderr = float(np.sqrt(ss_res / dof / denom)) if denom > 0 else np.inf
        return cls(np.asarray(abscissae, dtype=float), y, float(slope), stderr,
                   float(intercept), float(r2))


# ---------------------------------------------------------------------------
# gradient averages and corrector growth
# ---------------------------------------------------------------------------

def corrector_cell_gradients(cset: CorrectorSet) -> dict[str, np.ndarray]:
    """Cell-centered gradient components of phi (and of sigma when present)."""
    grid = cset.grid
    out = {}
    for i, phi in enumerate(cset.phi):
        g = cell_gradient(phi.scalar, grid)
        for ax in range(grid.dim):
            out[f"phi{i}_d{ax}"] = g[ax]
    for (i, j, k), sig in sorted(cset.sigma.items()):
        g = cell_gradient(sig, grid)
        for ax in range(grid.dim):
            out[f"sigma{i}{j}{k}_d{ax}"] = g[ax]
    return out


def avg_gradient_observable(cset: CorrectorSet, R: float,
                            replica: Optional[int] = None) -> list[Observable]:
    """Ball averages at the origin of every gradient component of (phi, sigma)."""
    grid = cset.grid
    if R > max_radius(grid) + 1e-12:
        raise BallTooLarge(f"R = {R} exceeds side_length / 4")
    out = []
    for name, comp in corrector_cell_gradients(cset).items():
        kind = "grad_phi_avg" if name.startswith("phi") else "grad_sigma_avg"
        value = ball_mean_at(comp, grid, R)
        out.append(Observable(kind, f"{name},R={R:g}", value, replica))
    return out


def corrector_growth_observable(cset: CorrectorSet, x,
                                replica: Optional[int] = None) -> Observable:
    """Unit-ball L^s increment of (phi, sigma) between x and the origin.

    value = (avg_{B_1(x)} |(phi, sigma)(y) - c0|^s)^(1/s) with c0 the
    componentwise unit-ball average at 0 and s the minimal-radius exponent.
    """
    grid = cset.grid
    bundle = cset.bundle_components()
    s = oscillation_exponent(grid.dim)
    offsets = ball_offsets(grid, grid.spacing)
    x = np.asarray(x, dtype=int)
    n = grid.n_per_side
    sites0 = tuple(((offsets + 0) % n).T)
    sites_x = tuple(((offsets + x) % n).T)
    c0 = np.stack([comp[sites0].mean() for comp in bundle])
    diffs = np.stack([comp[sites_x] for comp in bundle]) - c0[:, None]
    norms = np.sqrt((diffs**2).sum(axis=0))
    value = float(np.mean(norms**s) ** (1.0 / s))
    dist = float(np.sqrt(((x * grid.spacing) ** 2).sum()))
    return Observable("corrector_increment", f"|x|={dist:g}", value, replica)


def mu_d(t, dim: int):
    """Dimension-dependent corrector growth rate."""
    t = np.asarray(t, dtype=float)
    if dim == 1:
        return np.sqrt(t + 1.0)
    if dim == 2:
        return np.log(t + 2.0) ** 0.5
    return np.ones_like(t)


# ---------------------------------------------------------------------------
# homogenization commutator
# ---------------------------------------------------------------------------

@dataclass
class CommutatorField:
    """[Xi]_i = (a - ahom)(grad phi_i + e_i) on cell-centered gradients.

    xi has shape (d, d, *grid.shape); xi[i, j] is the j component of the
    direction-i commutator row.
    """

    grid: LatticeGrid
    xi: np.ndarray
    ahom_used: np.ndarray
    source: Optional[int] = None

    def row_means(self) -> np.ndarray:
        d = self.grid.dim
        return self.xi.reshape(d, d, -1).mean(axis=2)


def build_commutator(a_field: LatticeField, cset: CorrectorSet,
                     ahom: np.ndarray, replica: Optional[int] = None) -> CommutatorField:
    """Assemble Xi from one sample and a (pooled) homogenized matrix.

    Both the flux a (grad phi + e) and the gradient are reconstructed at
    cell centers by averaging the two adjacent edge values, so their lattice
    means are exactly the edge-based ones and the rows of Xi center on zero
    when ahom is the pooled flux mean.  ahom follows the row convention of
    estimate_ahom (row i = mean flux of direction i).
    """
    grid = a_field.grid
    if cset.grid != grid:
        raise GridMismatch("commutator inputs live on different grids")
    d = grid.dim
    amap = np.asarray(ahom, dtype=float).T
    xi = np.empty((d, d, *grid.shape))
    for i in range(d):
        q_cell = edge_to_cell(cset.flux[i], grid)
        g = cell_gradient(cset.phi[i].scalar, grid)
        g[i] += 1.0
        for j in range(d):
            xi[i, j] = q_cell[j] - sum(amap[j, l] * g[l] for l in range(d))
    return CommutatorField(grid, xi, np.asarray(ahom, dtype=float), replica)


# ---------------------------------------------------------------------------
# test functions on windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Compactly supported matrix test function F = chi(x) e_i (x) e_j.

    profile selects the scalar bump; the window places chi in the middle of
    the torus with support diameter (1/eps) lattice cells.
    """

    i: int = 0
    j: int = 0
    profile: str = "bump"

    @property
    def descriptor(self) -> str:
        return f"F[{self.i},{self.j}],{self.profile}"


def bump_profile(rho2: np.ndarray, profile: str = "bump") -> np.ndarray:
    """Radial C-infinity bump on the unit ball, evaluated at squared radius."""
    inside = rho2 < 1.0
    safe = np.where(inside, rho2, 0.0)
    chi = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)
    if profile == "bump":
        return chi
    if profile == "bump_sq":
        return chi**2
    raise ValueError(f"unknown profile {profile!r}")


def window_cells(grid: LatticeGrid, window: int) -> tuple[slice, ...]:
    offset = (grid.n_per_side - window) // 2
    return tuple(slice(offset, offset + window) for _ in range(grid.dim))


def sample_bump_window(grid: LatticeGrid, window: int, profile: str = "bump") -> np.ndarray:
    """chi sampled at the cell centers of a centered window of `window` cells."""
    coords = [(np.arange(window) + 0.5) * 2.0 / window - 1.0 for _ in range(grid.dim)]
    mesh = np.meshgrid(*coords, indexing="ij")
    rho2 = sum(c**2 for c in mesh)
    return bump_profile(rho2, profile)


def bump_edge_field(grid: LatticeGrid, window: int, direction: int,
                    profile: str = "bump") -> np.ndarray:
    """Vector bump chi e_dir sampled at edge midpoints (for divergence-form data)."""
    n = grid.n_per_side
    offset = (n - window) // 2
    out = np.zeros((grid.dim, *grid.shape))
    axes_idx = np.meshgrid(*[np.arange(n) for _ in range(grid.dim)], indexing="ij")
    shift = [0.0] * grid.dim
    shift[direction] = 0.5
    rho2 = sum(
        ((axes_idx[ax] + 0.5 + shift[ax] - offset) * 2.0 / window - 1.0) ** 2
        for ax in range(grid.dim)
    )
    out[direction] = bump_profile(rho2, profile)
    return out


def bump_cell_field(grid: LatticeGrid, window: int, direction: int,
                    profile: str = "bump") -> np.ndarray:
    n = grid.n_per_side
    offset = (n - window) // 2
    out = np.zeros((grid.dim, *grid.shape))
    axes_idx = np.meshgrid(*[np.arange(n) for _ in range(grid.dim)], indexing="ij")
    rho2 = sum(
        ((axes_idx[ax] + 0.5 - offset) * 2.0 / window - 1.0) ** 2
        for ax in range(grid.dim)
    )
    out[direction] = bump_profile(rho2, profile)
    return out


def window_from_eps(grid: LatticeGrid, eps: float) -> int:
    """Window size 1/eps cells; errors when the torus holds fewer than 8 windows."""
    window = int(round(1.0 / eps))
    if eps * grid.n_per_side < 8 - 1e-9:
        raise ScaleMismatch(
            f"eps * side_length = {eps * grid.n_per_side:g} lattice cells (< 8): "
            f"window of {window} cells too large for n = {grid.n_per_side}"
        )
    return window


def commutator_observable(xi: CommutatorField, F: TestFunction, eps: float,
                          replica: Optional[int] = None) -> Observable:
    """I_eps(F) = eps^(-d/2) integral of Xi(./eps) : F, realized on a window."""
    grid = xi.grid
    d = grid.dim
    window = window_from_eps(grid, eps)
    chi = sample_bump_window(grid, window, F.profile)
    cells = window_cells(grid, window)
    value = eps ** (d / 2.0) * float(np.sum(xi.xi[(F.i, F.j, *cells)] * chi))
    return Observable("commutator_pairing", f"{F.descriptor},eps={eps:g}", value, replica)


def profile_overlap(grid: LatticeGrid, a: TestFunction, b: TestFunction,
                    eps: float) -> float:
    """Quadrature of chi_a chi_b in macro units (shared window)."""
    window = window_from_eps(grid, eps)
    chi_a = sample_bump_window(grid, window, a.profile)
    chi_b = sample_bump_window(grid, window, b.profile)
    return float(eps**grid.dim * np.sum(chi_a * chi_b))


def pairing_inner(grid: LatticeGrid, a: TestFunction, b: TestFunction,
                  eps: float) -> float:
    """Quadrature of F_a : F_b in macro units (shared window)."""
    if (a.i, a.j) != (b.i, b.j):
        return 0.0
    return profile_overlap(grid, a, b, eps)


def basis_test_functions(dim: int) -> list[TestFunction]:
    return [TestFunction(i, j) for i in range(dim) for j in range(dim)]


def estimate_Q(grid: LatticeGrid, samples: dict[TestFunction, np.ndarray],
               eps: float):
    """Least-squares inversion of Cov[I(F_a), I(F_b)] against the F pairings.

    samples maps each test function to its replica vector of I_eps values.
    Returns (Q, stderr) as (d, d, d, d) arrays with the pairing symmetry
    Q[ijkl] = Q[klij] imposed by construction; stderr is a delete-one
    jackknife over replicas.
    """
    d = grid.dim
    fns = list(samples)
    n_rep = len(next(iter(samples.values())))
    if n_rep < 3:
        raise RankDeficient("need at least 3 replicas")

    comp_index = {}
    for a_i in range(d):
        for a_j in range(d):
            for b_i in range(d):
                for b_j in range(d):
                    key = tuple(sorted([(a_i, a_j), (b_i, b_j)]))
                    comp_index.setdefault(key, len(comp_index))

    pairs = []
    for ia, fa in enumerate(fns):
        for fb in fns[ia:]:
            # Cov[I(F_a), I(F_b)] = Q[(a.i, a.j), (b.i, b.j)] * int(chi_a chi_b)
            weight = profile_overlap(grid, fa, fb, eps)
            key = tuple(sorted([(fa.i, fa.j), (fb.i, fb.j)]))
            pairs.append((fa, fb, key, weight))

    def solve(indices) -> np.ndarray:
        design = np.zeros((len(pairs), len(comp_index)))
        rhs = np.zeros(len(pairs))
        for row, (fa, fb, key, weight) in enumerate(pairs):
            va = samples[fa][indices]
            vb = samples[fb][indices]
            cov = float(np.mean((va - va.mean()) * (vb - vb.mean())))
            cov *= len(indices) / max(len(indices) - 1, 1)
            design[row, comp_index[key]] = weight
            rhs[row] = cov
        observed = np.abs(design).sum(axis=0) > 0
        if not observed.all():
            missing = [k for k, v in comp_index.items() if not observed[v]]
            raise RankDeficient(f"basis does not identify components {missing}")
        coef, *_ = np.linalg.lstsq(design, rhs, rcond=None)
        return coef

    full_idx = np.arange(n_rep)
    coef = solve(full_idx)
    jack = np.stack([solve(np.delete(full_idx, r)) for r in range(n_rep)])
    jack_mean = jack.mean(axis=0)
    coef_se = np.sqrt((n_rep - 1) / n_rep * ((jack - jack_mean) ** 2).sum(axis=0))

    def unpack(flat) -> np.ndarray:
        Q = np.zeros((d, d, d, d))
        for key, col in comp_index.items():
            (i, j), (k, l) = key
            Q[i, j, k, l] = flat[col]
            Q[k, l, i, j] = flat[col]
        return Q

    return unpack(coef), unpack(coef_se)


def q_diagonal_report(Q: np.ndarray, Q_se: np.ndarray) -> list[tuple[str, float, float]]:
    """Rank-one pairings (e_i x e_j) : Q : (e_i x e_j) and their stderr."""
    d = Q.shape[0]
    return [(f"Q[{i}{j}{i}{j}]", float(Q[i, j, i, j]), float(Q_se[i, j, i, j]))
            for i in range(d) for j in range(d)]
