"""P1 assembly, solvers, field transfer, and the output functional."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from haarmc.fem import (
    ConvergenceError,
    MaternParams,
    assemble_helmholtz,
    assemble_load,
    assemble_lognormal_diffusion,
    assemble_mass,
    assemble_stiffness,
    embed_interior,
    factorized_spd,
    functional_l2sq,
    matern_field_from_noise,
    restrict_interior,
    solve_spd,
    transfer_field,
)
from haarmc.mesh import Box, build_uniform_mesh
import oracles

G2 = Box((-0.5, -0.5), (0.5, 0.5))
UNIT1 = Box((0.0,), (1.0,))
UNIT2 = Box((0.0, 0.0), (1.0, 1.0))


def test_helmholtz_single_interior_dof():
    # two elements of size 1/2 on [0,1], kappa = 1: mass contributes
    # 2 * (2h/6) = 1/3, stiffness contributes 2/h = 4, so A = [[13/3]]
    mesh = build_uniform_mesh(UNIT1, 1, 2)
    A = assemble_helmholtz(mesh, 1.0)
    assert A.shape == (1, 1)
    assert A[0, 0] == pytest.approx(13.0 / 3.0, rel=1e-14)


def test_helmholtz_rejects_bad_kappa():
    mesh = build_uniform_mesh(UNIT1, 1, 2)
    with pytest.raises(ValueError):
        assemble_helmholtz(mesh, 0.0)


@pytest.mark.parametrize("dim,n", [(1, 6), (2, 3)])
def test_mass_matrix_against_oracle(dim, n):
    box = Box((-1.0, -1.0), (1.0, 1.0)) if dim == 2 else Box((-1.0,), (1.0,))
    mesh = build_uniform_mesh(box, dim, n)
    M = assemble_mass(mesh).toarray()
    np.testing.assert_allclose(M, oracles.mass_matrix(mesh), atol=1e-14)
    assert M.sum() == pytest.approx(box.volume, rel=1e-12)


def test_stiffness_row_sums_vanish():
    mesh = build_uniform_mesh(UNIT2, 2, 3)
    K = assemble_stiffness(mesh)
    np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 0.0, atol=1e-13)


def test_load_vector_is_basis_integrals():
    mesh = build_uniform_mesh(UNIT2, 2, 4)
    np.testing.assert_allclose(
        assemble_load(mesh, 2.0), 2.0 * oracles.mass_matrix(mesh).sum(axis=1), atol=1e-14
    )


def test_lognormal_diffusion_scaling():
    mesh = build_uniform_mesh(G2, 2, 4)
    K0 = assemble_lognormal_diffusion(mesh, np.zeros(mesh.n_vertices))
    plain = restrict_interior(assemble_stiffness(mesh), mesh)
    np.testing.assert_allclose(K0.toarray(), plain.toarray(), atol=1e-14)
    Kc = assemble_lognormal_diffusion(mesh, np.full(mesh.n_vertices, 0.7))
    np.testing.assert_allclose(Kc.toarray(), math.exp(0.7) * plain.toarray(), rtol=1e-13)
    assert np.linalg.eigvalsh(Kc.toarray()).min() > 0


def test_lognormal_diffusion_rejects_nonfinite():
    mesh = build_uniform_mesh(G2, 2, 2)
    u = np.zeros(mesh.n_vertices)
    u[0] = np.inf
    with pytest.raises(ValueError):
        assemble_lognormal_diffusion(mesh, u)


def test_solve_identity():
    b = np.arange(5, dtype=float)
    x = solve_spd(sp.eye(5, format="csr"), b)
    np.testing.assert_allclose(x, b, atol=1e-14)


def test_solve_against_dense_oracle():
    rng = np.random.default_rng(4)
    Q = rng.standard_normal((10, 10))
    A = Q @ Q.T + 10 * np.eye(10)
    b = rng.standard_normal(10)
    x = solve_spd(sp.csr_matrix(A), b)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-10)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


def test_factorized_solver_reuse():
    mesh = build_uniform_mesh(UNIT2, 2, 8)
    A = assemble_helmholtz(mesh, 2.0)
    solve = factorized_spd(A)
    rng = np.random.default_rng(7)
    for _ in range(3):
        b = rng.standard_normal(A.shape[0])
        x = solve(b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


def _l2_error(mesh, approx, exact_fn):
    diff = approx - exact_fn(mesh.vertices)
    return math.sqrt(functional_l2sq(mesh, diff))


def test_manufactured_convergence_1d():
    # (I - Delta) u = (1 + pi^2) sin(pi x) with u = sin(pi x) on [0, 1]
    errs = []
    for n in (8, 16, 32, 64):
        mesh = build_uniform_mesh(UNIT1, 1, n)
        rhs_fn = lambda v: (1.0 + np.pi**2) * np.sin(np.pi * v[:, 0])
        M = assemble_mass(mesh)
        A = assemble_helmholtz(mesh, 1.0)
        b = (M @ rhs_fn(mesh.vertices))[mesh.interior_vertices]
        u = embed_interior(solve_spd(A, b), mesh)
        errs.append(_l2_error(mesh, u, lambda v: np.sin(np.pi * v[:, 0])))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8) and np.all(rates < 2.2)


def test_manufactured_convergence_2d():
    # -Laplace p = 2 pi^2 sin(pi x) sin(pi y), p = sin(pi x) sin(pi y)
    errs = []
    for n in (8, 16, 32):
        mesh = build_uniform_mesh(UNIT2, 2, n)
        exact = lambda v: np.sin(np.pi * v[:, 0]) * np.sin(np.pi * v[:, 1])
        rhs = 2.0 * np.pi**2 * exact(mesh.vertices)
        K = assemble_lognormal_diffusion(mesh, np.zeros(mesh.n_vertices))
        b = (assemble_mass(mesh) @ rhs)[mesh.interior_vertices]
        p = embed_interior(solve_spd(K, b), mesh)
        errs.append(_l2_error(mesh, p, exact))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8) and np.all(rates < 2.2)


def test_transfer_exact_for_linears():
    g = build_uniform_mesh(G2, 2, 4, diagonal="right")
    d = build_uniform_mesh(Box((-1.0, -1.0), (1.0, 1.0)), 2, 8, diagonal="right")
    const = np.full(d.n_vertices, 2.5)
    np.testing.assert_array_equal(transfer_field(const, d, g), np.full(g.n_vertices, 2.5))
    lin = d.vertices[:, 0] + d.vertices[:, 1]
    np.testing.assert_allclose(
        transfer_field(lin, d, g), g.vertices[:, 0] + g.vertices[:, 1], atol=1e-14
    )


def test_transfer_rejects_non_nested():
    g = build_uniform_mesh(G2, 2, 3)
    d = build_uniform_mesh(Box((-1.0, -1.0), (1.0, 1.0)), 2, 8)
    with pytest.raises(ValueError):
        transfer_field(np.zeros(d.n_vertices), d, g)


def test_functional_pins():
    mesh = build_uniform_mesh(G2, 2, 4)
    assert functional_l2sq(mesh, np.zeros(mesh.n_vertices)) == 0.0
    assert functional_l2sq(mesh, np.ones(mesh.n_vertices)) == pytest.approx(1.0, rel=1e-12)
    # x is linear, so its interpolant is exact and the quadrature is exact
    assert functional_l2sq(mesh, mesh.vertices[:, 0].copy()) == pytest.approx(
        1.0 / 12.0, rel=1e-12
    )


def test_functional_batch_rows():
    mesh = build_uniform_mesh(G2, 2, 2)
    batch = np.vstack([np.ones(mesh.n_vertices), mesh.vertices[:, 0]])
    vals = functional_l2sq(mesh, batch)
    np.testing.assert_allclose(vals, [1.0, 1.0 / 12.0], rtol=1e-12)


def test_matern_params_derivations():
    p1 = MaternParams.create(1, 0.9, 0.25)
    assert p1.nu == pytest.approx(1.5)
    assert p1.kappa == pytest.approx(math.sqrt(12.0) / 0.25, rel=1e-14)
    p2 = MaternParams.create(2, 0.9, 0.25)
    assert p2.nu == pytest.approx(1.0)
    assert p2.kappa == pytest.approx(math.sqrt(8.0) / 0.25, rel=1e-14)
    # nu = 1 makes the gamma ratio 1, leaving sigma * sqrt(4 pi) / kappa
    assert p2.eta == pytest.approx(0.9 * math.sqrt(4.0 * math.pi) / p2.kappa, rel=1e-14)


def test_matern_params_validation():
    with pytest.raises(ValueError):
        MaternParams.create(3, 1.0, 0.25)
    with pytest.raises(ValueError):
        MaternParams.create(2, -1.0, 0.25)
    with pytest.raises(ValueError):
        MaternParams.create(2, 1.0, 0.0)


def test_lognormal_moment_matching():
    pars = MaternParams.lognormal_matched(2, 0.25, mean=1.0, variance=0.2)
    s2 = pars.sigma**2
    assert s2 == pytest.approx(math.log(1.2), rel=1e-14)
    assert pars.mean_shift == pytest.approx(-0.5 * math.log(1.2), rel=1e-14)
    # moments of exp(N(shift, sigma^2)) recover the requested mean/variance
    mean = math.exp(pars.mean_shift + s2 / 2)
    var = (math.exp(s2) - 1.0) * math.exp(2 * pars.mean_shift + s2)
    assert mean == pytest.approx(1.0, rel=1e-14)
    assert var == pytest.approx(0.2, rel=1e-14)


def test_matern_field_zero_noise():
    mesh = build_uniform_mesh(Box((-1.0, -1.0), (1.0, 1.0)), 2, 4)
    pars = MaternParams.create(2, 1.0, 0.25)
    u = matern_field_from_noise(mesh, pars, np.zeros(mesh.n_vertices))
    np.testing.assert_array_equal(u, np.zeros(mesh.n_vertices))


def test_matern_field_batch_matches_single():
    mesh = build_uniform_mesh(Box((-1.0, -1.0), (1.0, 1.0)), 2, 4)
    pars = MaternParams.create(2, 1.0, 0.25)
    rng = np.random.default_rng(12)
    B = rng.standard_normal((3, mesh.n_vertices))
    batch = matern_field_from_noise(mesh, pars, B)
    for i in range(3):
        np.testing.assert_allclose(
            batch[i], matern_field_from_noise(mesh, pars, B[i]), atol=1e-13
        )
    # homogeneous Dirichlet data on the outer boundary
    np.testing.assert_array_equal(batch[:, mesh.boundary_vertices], 0.0)
