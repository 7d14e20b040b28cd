"""P1 finite elements: assembly, Dirichlet solves, and the Matern field law.

Matrices are assembled over all vertices; homogeneous Dirichlet conditions
are applied by restricting to interior rows and columns, which keeps the
systems symmetric positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gamma as _gamma

from .mesh import SimplicialMesh, cell_volumes, vertex_injection_map

__all__ = [
    "MaternParams",
    "ConvergenceError",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_helmholtz",
    "assemble_lognormal_diffusion",
    "assemble_load",
    "restrict_interior",
    "embed_interior",
    "factorized_spd",
    "solve_spd",
    "matern_field_from_noise",
    "functional_l2sq",
    "cell_midpoint_values",
    "transfer_field",
]

DIRECT_SOLVE_MAX_DOFS = 5000
RESIDUAL_RTOL = 1e-10


class ConvergenceError(RuntimeError):
    """An iterative solve stopped short of the requested tolerance."""


@dataclass(frozen=True)
class MaternParams:
    """Parameters of the stationary Matern field driven by white noise.

    `eta` scales the noise so that the solution field has pointwise
    variance sigma^2; `mean_shift` is added when forming the log-normal
    coefficient, not to the Gaussian field itself.
    """

    sigma: float
    lam: float
    dim: int
    nu: float
    kappa: float
    eta: float
    mean_shift: float = 0.0

    @classmethod
    def create(
        cls, dim: int, sigma: float, lam: float, mean_shift: float = 0.0
    ) -> "MaternParams":
        """One application of the Helmholtz operator; nu = 2 - dim/2."""
        if dim not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if sigma <= 0 or lam <= 0:
            raise ValueError("sigma and lam must be positive")
        nu = 2.0 - dim / 2.0
        kappa = math.sqrt(8.0 * nu) / lam
        eta = (
            sigma
            * kappa ** (-dim / 2.0)
            * (4.0 * math.pi) ** (dim / 4.0)
            * math.sqrt(_gamma(nu + dim / 2.0) / _gamma(nu))
        )
        return cls(sigma, lam, dim, nu, kappa, eta, mean_shift)

    @classmethod
    def lognormal_matched(
        cls, dim: int, lam: float, mean: float = 1.0, variance: float = 0.2
    ) -> "MaternParams":
        """Choose sigma and mean_shift so exp(field + shift) has the given
        first two moments."""
        s2 = math.log(1.0 + variance / mean**2)
        shift = math.log(mean) - 0.5 * s2
        base = cls.create(dim, math.sqrt(s2), lam)
        return cls(base.sigma, lam, dim, base.nu, base.kappa, base.eta, shift)


def _local_arrays(mesh: SimplicialMesh):
    d = mesh.dim
    V = mesh.vertices[mesh.cells]  # (n_cells, d+1, d)
    vols = cell_volumes(mesh)
    if d == 1:
        e = V[:, 1, 0] - V[:, 0, 0]
        grads = np.stack([-1.0 / e, 1.0 / e], axis=1)[:, :, None]
    else:
        # grad of barycentric i: rotated opposite edge / (2 * area)
        e0 = V[:, 2] - V[:, 1]
        e1 = V[:, 0] - V[:, 2]
        e2 = V[:, 1] - V[:, 0]
        rot = lambda a: np.stack([-a[:, 1], a[:, 0]], axis=1)
        det = 2.0 * vols
        grads = np.stack([rot(e0), rot(e1), rot(e2)], axis=1) / det[:, None, None]
    return vols, grads


def _scatter(mesh: SimplicialMesh, local: np.ndarray) -> sp.csr_matrix:
    d1 = mesh.dim + 1
    rows = np.repeat(mesh.cells, d1, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, d1)).ravel()
    A = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    )
    return A.tocsr()


def assemble_mass(mesh: SimplicialMesh) -> sp.csr_matrix:
    d = mesh.dim
    vols = cell_volumes(mesh)
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return _scatter(mesh, vols[:, None, None] * ref[None])


def assemble_stiffness(
    mesh: SimplicialMesh, coeff: Optional[np.ndarray] = None
) -> sp.csr_matrix:
    """Stiffness matrix, optionally weighted by piecewise-constant cell
    values `coeff`."""
    vols, grads = _local_arrays(mesh)
    w = vols if coeff is None else vols * np.asarray(coeff, dtype=float)
    local = w[:, None, None] * np.einsum("cik,cjk->cij", grads, grads)
    return _scatter(mesh, local)


def assemble_helmholtz(mesh: SimplicialMesh, kappa: float) -> sp.csr_matrix:
    """Mass plus kappa^{-2} stiffness, restricted to interior dofs (the
    homogeneous Dirichlet rows and columns are eliminated symmetrically)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    full = assemble_mass(mesh) + assemble_stiffness(mesh) / kappa**2
    return restrict_interior(full, mesh)


def assemble_lognormal_diffusion(mesh: SimplicialMesh, u: np.ndarray) -> sp.csr_matrix:
    """Interior stiffness matrix with coefficient exp(u) evaluated at cell
    midpoints (one-point quadrature)."""
    coeff = np.exp(cell_midpoint_values(mesh, u))
    if not np.all(np.isfinite(coeff)):
        raise ValueError("diffusion coefficient is not finite")
    return restrict_interior(assemble_stiffness(mesh, coeff), mesh)


def assemble_load(mesh: SimplicialMesh, value: float = 1.0) -> np.ndarray:
    """Load vector of the constant source `value`."""
    d = mesh.dim
    vols = cell_volumes(mesh)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.cells.ravel(), np.repeat(vols * value / (d + 1), d + 1))
    return out


def restrict_interior(A: sp.spmatrix, mesh: SimplicialMesh) -> sp.csr_matrix:
    idx = mesh.interior_vertices
    return A.tocsr()[idx][:, idx]


def embed_interior(x: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """Pad an interior vector with homogeneous boundary values."""
    x = np.asarray(x)
    out = np.zeros(x.shape[:-1] + (mesh.n_vertices,))
    out[..., mesh.interior_vertices] = x
    return out


def factorized_spd(A: sp.spmatrix, tol: float = 1e-12) -> Callable:
    """Return solve(b) for the SPD matrix A; b may be a vector or a matrix
    of right-hand sides (columns).

    Small systems are factorized once (sparse LU); larger ones use conjugate
    gradients with Jacobi preconditioning. Every solve checks its residual.
    """
    n = A.shape[0]
    A = A.tocsc()
    if n < DIRECT_SOLVE_MAX_DOFS:
        lu = spla.splu(A)

        def solve(b):
            b = np.asarray(b, dtype=float)
            x = lu.solve(b)
            _check_residual(A, x, b)
            return x

        return solve

    Acsr = A.tocsr()
    inv_diag = 1.0 / Acsr.diagonal()
    precond = spla.LinearOperator((n, n), matvec=lambda v: inv_diag * v)
    maxiter = 10 * n

    def solve(b):
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            x, info = spla.cg(Acsr, b, rtol=tol, atol=0.0, M=precond, maxiter=maxiter)
            if info != 0:
                raise ConvergenceError(f"cg stopped with status {info}")
        else:
            x = np.empty_like(b)
            for j in range(b.shape[1]):
                col, info = spla.cg(
                    Acsr, b[:, j], rtol=tol, atol=0.0, M=precond, maxiter=maxiter
                )
                if info != 0:
                    raise ConvergenceError(f"cg stopped with status {info}")
                x[:, j] = col
        _check_residual(Acsr, x, b)
        return x

    return solve


def _check_residual(A, x, b):
    r = A @ x - b
    nb = np.linalg.norm(b, axis=0) if b.ndim > 1 else np.linalg.norm(b)
    scale = np.maximum(nb, 1e-300)
    nr = np.linalg.norm(r, axis=0) if b.ndim > 1 else np.linalg.norm(r)
    if np.any(nr > RESIDUAL_RTOL * scale):
        raise ConvergenceError("linear solve residual above tolerance")


def solve_spd(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return factorized_spd(A, tol)(b)


def matern_field_from_noise(
    mesh: SimplicialMesh,
    params: MaternParams,
    b: np.ndarray,
    solve: Optional[Callable] = None,
) -> np.ndarray:
    """Nodal values of the Matern field on `mesh` given the noise pairings b
    (full-length, one vector or rows of a batch).

    Pass a prefactorized interior solve to amortize repeated sampling.
    """
    if solve is None:
        solve = factorized_spd(assemble_helmholtz(mesh, params.kappa))
    b = np.asarray(b, dtype=float)
    rhs = params.eta * b[..., mesh.interior_vertices]
    x = solve(rhs.T if b.ndim > 1 else rhs)
    return embed_interior(x.T if b.ndim > 1 else x, mesh)


def functional_l2sq(mesh: SimplicialMesh, p: np.ndarray, M: Optional[sp.spmatrix] = None) -> float:
    """Squared L2 norm of the P1 function with nodal values p."""
    if M is None:
        M = assemble_mass(mesh)
    p = np.asarray(p, dtype=float)
    if p.ndim > 1:
        return np.einsum("bi,bi->b", p, (M @ p.T).T)
    return float(p @ (M @ p))


def cell_midpoint_values(mesh: SimplicialMesh, u: np.ndarray) -> np.ndarray:
    """Per-cell value of a P1 function at cell midpoints: the vertex mean."""
    u = np.asarray(u, dtype=float)
    return u[..., mesh.cells].mean(axis=-1)


def transfer_field(
    u: np.ndarray, sup: SimplicialMesh, sub: SimplicialMesh
) -> np.ndarray:
    """Restrict nodal values from a mesh to a nested submesh by exact vertex
    injection; raises if the submesh vertices are not all present."""
    inj = vertex_injection_map(sub, sup)
    return np.asarray(u, dtype=float)[..., inj]
