"""Discrete periodic divergence-form operators and solvers.

Discrete calculus conventions (everything else in the package builds on
these, do not change one without the others):

* forward difference  (D u)[ax](x)   = (u(x + e_ax) - u(x)) / h     (lives on edges)
* edge divergence     (div F)(x)     = sum_ax (F[ax](x) - F[ax](x - e_ax)) / h
* operator            A u            = -div(aE * D u)

div is minus the adjoint of D, so A is symmetric positive semidefinite with
kernel the constants.  The equation -div(aE (Du + g)) = div h becomes
A u = div(h + aE g).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, GridMismatch, NoConvergence, SingularCoefficient
from .field import LatticeField, LatticeGrid, scalar_field

EDGE_RULES = ("geometric", "harmonic")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    relative_residual: float
    converged: bool
    truncation_M: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "relative_residual": self.relative_residual,
            "converged": self.converged,
            "truncation_M": self.truncation_M,
        }


@dataclass
class EdgeCoefficient:
    """Coefficient on the edge from site x to x + spacing * e_axis.

    values has shape (dim, *grid.shape); values[ax][x] is the edge leaving x
    in direction ax.
    """

    grid: LatticeGrid
    values: np.ndarray
    meta: dict

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.dim, *self.grid.shape):
            raise GridMismatch(f"edge values shape {v.shape} invalid for grid {self.grid.shape}")
        self.values = v

    def check_positive(self):
        if self.values.min() <= 0:
            raise SingularCoefficient("nonpositive edge coefficient")


def edge_coefficients(a_field: LatticeField, rule: str = "geometric") -> EdgeCoefficient:
    """Cell field -> edge field by the declared edge rule.

    The geometric mean exp((G_x + G_y)/2) preserves log-normality of edge
    coefficients; the harmonic mean is exposed for sensitivity studies.
    """
    if rule not in EDGE_RULES:
        raise ConfigError(f"unknown edge rule {rule!r}")
    a = a_field.scalar
    edges = np.empty((a_field.grid.dim, *a.shape))
    for ax in range(a_field.grid.dim):
        neighbor = np.roll(a, -1, axis=ax)
        if rule == "geometric":
            edges[ax] = np.sqrt(a * neighbor)
        else:
            edges[ax] = 2.0 / (1.0 / a + 1.0 / neighbor)
    return EdgeCoefficient(a_field.grid, edges, dict(a_field.meta, edge_rule=rule))


def unit_edge_field(grid: LatticeGrid, direction: int) -> np.ndarray:
    """Constant edge vector field e_i."""
    g = np.zeros((grid.dim, *grid.shape))
    g[direction] = 1.0
    return g


def forward_diff(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(u, -1, axis=axis) - u) / h


def gradient_edges(u: np.ndarray, grid: LatticeGrid) -> np.ndarray:
    h = grid.spacing
    return np.stack([forward_diff(u, ax, h) for ax in range(grid.dim)])


def divergence_edges(F: np.ndarray, grid: LatticeGrid) -> np.ndarray:
    h = grid.spacing
    out = np.zeros(grid.shape)
    for ax in range(grid.dim):
        out += (F[ax] - np.roll(F[ax], 1, axis=ax)) / h
    return out


def cell_gradient(u: np.ndarray, grid: LatticeGrid) -> np.ndarray:
    """Cell-centered gradient: average of the two adjacent edge differences."""
    h = grid.spacing
    out = np.empty((grid.dim, *grid.shape))
    for ax in range(grid.dim):
        d = forward_diff(u, ax, h)
        out[ax] = 0.5 * (d + np.roll(d, 1, axis=ax))
    return out


def edge_to_cell(F: np.ndarray, grid: LatticeGrid) -> np.ndarray:
    """Per-axis average of the two edges adjacent to each cell."""
    out = np.empty_like(F)
    for ax in range(grid.dim):
        out[ax] = 0.5 * (F[ax] + np.roll(F[ax], 1, axis=ax))
    return out


def apply_operator(aE: EdgeCoefficient, u: LatticeField | np.ndarray) -> np.ndarray:
    """-div(aE D u), the standard 2*dim+1 point stencil with periodic wrap."""
    grid = aE.grid
    if isinstance(u, LatticeField):
        if u.grid != grid:
            raise GridMismatch("operand grid differs from coefficient grid")
        u = u.scalar
    flux = aE.values * gradient_edges(u, grid)
    return -divergence_edges(flux, grid)


def operator_matrix(aE: EdgeCoefficient) -> sp.csr_matrix:
    """Assemble A = -div(aE D .) as sparse CSR (for fast repeated matvecs)."""
    grid = aE.grid
    n = grid.n_sites
    h2 = grid.spacing**2
    idx = np.arange(n).reshape(grid.shape)
    diag = np.zeros(grid.shape)
    rows, cols, vals = [], [], []
    for ax in range(grid.dim):
        w = aE.values[ax] / h2
        fwd = np.roll(idx, -1, axis=ax)
        # edge x -> x+e contributes -w to (x, x+e) and (x+e, x), +w to both diagonals
        rows.append(idx.ravel())
        cols.append(fwd.ravel())
        vals.append(-w.ravel())
        rows.append(fwd.ravel())
        cols.append(idx.ravel())
        vals.append(-w.ravel())
        diag += w + np.roll(w, 1, axis=ax)
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A.tocsr()


def default_max_iter(grid: LatticeGrid, factor: int = 50) -> int:
    return factor * grid.n_per_side


def solve_divform(aE: EdgeCoefficient, g: Optional[np.ndarray] = None,
                  h: Optional[np.ndarray] = None, tol: float = 1e-10,
                  max_iter: Optional[int] = None,
                  collect_history: bool = False):
    """Solve -div(aE (Du + g)) = div h on the torus; u has zero lattice mean.

    g and h are edge vector fields of shape (dim, *grid.shape) or None.
    Preconditioned (Jacobi) conjugate gradients on the mean-zero subspace;
    the ill-conditioning of degenerate coefficients is the phenomenon under
    study, so iteration counts are surfaced in the report instead of being
    hidden behind a direct solver.

    Returns (u: LatticeField, SolveReport) or (u, report, history) when
    collect_history is set.
    """
    grid = aE.grid
    aE.check_positive()
    if max_iter is None:
        max_iter = default_max_iter(grid)

    rhs_edges = None
    if h is not None:
        rhs_edges = np.asarray(h, dtype=float).copy()
    if g is not None:
        contrib = aE.values * np.asarray(g, dtype=float)
        rhs_edges = contrib if rhs_edges is None else rhs_edges + contrib
    trunc = aE.meta.get("truncation_M")

    if rhs_edges is None:
        b = np.zeros(grid.shape)
    else:
        b = divergence_edges(rhs_edges, grid)
    b = b.ravel()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        u = scalar_field(grid, np.zeros(grid.shape), **_solver_meta(aE))
        report = SolveReport(0, 0.0, True, trunc)
        return (u, report, [0.0]) if collect_history else (u, report)

    A = operator_matrix(aE)
    inv_diag = 1.0 / A.diagonal()

    x = np.zeros_like(b)
    r = b.copy()
    z = inv_diag * r
    z -= z.mean()
    p = z.copy()
    rz = float(r @ z)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r) / b_norm)
        if collect_history:
            history.append(rel)
        if rel <= tol:
            converged = True
            break
        z = inv_diag * r
        z -= z.mean()
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    rel = float(np.linalg.norm(r) / b_norm)
    if not converged:
        raise NoConvergence(it, rel, history)
    x -= x.mean()
    u = scalar_field(grid, x.reshape(grid.shape), **_solver_meta(aE))
    report = SolveReport(it, rel, True, trunc)
    return (u, report, history) if collect_history else (u, report)


def _solver_meta(aE: EdgeCoefficient) -> dict:
    keep = {}
    for key in ("seed", "truncation_M", "config_hash"):
        if key in aE.meta:
            keep[key] = aE.meta[key]
    return keep


# ---------------------------------------------------------------------------
# spectral constant-coefficient solves
# ---------------------------------------------------------------------------

def forward_symbol(grid: LatticeGrid, axis: int) -> np.ndarray:
    """Fourier symbol of the forward difference along one axis."""
    n = grid.n_per_side
    h = grid.spacing
    omega = 2.0 * np.pi * np.fft.fftfreq(n)
    shape = [1] * grid.dim
    shape[axis] = n
    s = (np.exp(1j * omega) - 1.0) / h
    return s.reshape(shape)


def laplace_symbol(grid: LatticeGrid) -> np.ndarray:
    """Symbol of -div(D .): sum_ax (2 - 2 cos w_ax) / h^2 on the full grid."""
    n = grid.n_per_side
    h = grid.spacing
    omega = 2.0 * np.pi * np.fft.fftfreq(n)
    one_d = (2.0 - 2.0 * np.cos(omega)) / h**2
    out = np.zeros(grid.shape)
    for ax in range(grid.dim):
        shape = [1] * grid.dim
        shape[ax] = n
        out = out + one_d.reshape(shape)
    return out


def solve_poisson_spectral(rhs: LatticeField | np.ndarray,
                           grid: Optional[LatticeGrid] = None) -> LatticeField:
    """-Delta u = rhs discretely to machine precision; u mean-zero.

    The lattice mean of rhs is subtracted (the zero mode is not invertible on
    the torus).
    """
    if isinstance(rhs, LatticeField):
        grid = rhs.grid
        rhs = rhs.scalar
    if grid is None:
        raise ConfigError("grid required when rhs is a bare array")
    lam = laplace_symbol(grid)
    lam_flat = lam.copy()
    lam_flat[(0,) * grid.dim] = 1.0
    u_hat = np.fft.fftn(rhs) / lam_flat
    u_hat[(0,) * grid.dim] = 0.0
    return scalar_field(grid, np.fft.ifftn(u_hat).real)


def solve_constant_divform_spectral(grid: LatticeGrid, a_matrix: np.ndarray,
                                    h_edges: np.ndarray) -> LatticeField:
    """Solve -div(a_const D u) = div h for a constant symmetric matrix a_const.

    Used for the homogenized problems; removes macro-discretization error
    from two-scale comparisons by sharing the lattice calculus with the
    heterogeneous solves.
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    d = grid.dim
    s = [forward_symbol(grid, ax) for ax in range(d)]
    symbol = np.zeros(grid.shape, dtype=complex)
    for j in range(d):
        for l in range(d):
            symbol = symbol + a_matrix[j, l] * np.conj(s[j]) * s[l]
    symbol = symbol.real
    symbol[(0,) * d] = 1.0
    # b = div h, with the edge-divergence symbol -conj(s)
    b_hat = np.zeros(grid.shape, dtype=complex)
    for j in range(d):
        b_hat = b_hat + (-np.conj(s[j])) * np.fft.fftn(h_edges[j])
    u_hat = b_hat / symbol
    u_hat[(0,) * d] = 0.0
    return scalar_field(grid, np.fft.ifftn(u_hat).real)


def energy_identity_residual(aE: EdgeCoefficient, u: LatticeField,
                             g: Optional[np.ndarray] = None,
                             h: Optional[np.ndarray] = None) -> float:
    """Relative defect of sum aE (Du + g) . Du = -sum h . Du (discrete weak form)."""
    grid = aE.grid
    du = gradient_edges(u.scalar, grid)
    total = du + (0 if g is None else g)
    lhs = float(np.sum(aE.values * total * du))
    rhs = 0.0 if h is None else -float(np.sum(np.asarray(h) * du))
    scale = float(np.sum(aE.values * total * total)) + 1e-300
    return abs(lhs - rhs) / scale
