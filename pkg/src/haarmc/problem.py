"""The log-normal diffusion test problem on a mesh hierarchy.

Ties together the hierarchy, supermesh tables, noise sampling, and the PDE
solves into per-level sampler closures: level 0 evaluates the output
functional itself, higher levels the coupled fine/coarse difference driven
by one shared noise event.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import fem
from .fem import MaternParams
from .lowdisc import (
    PURPOSE_SHIFT,
    DigitalShift,
    RandomStream,
    SobolGenerator,
    inverse_normal_cdf,
    normal_vector,
    safe_uniform,
    shifted_point,
    sobol_points,
)
from .mesh import Box, MeshHierarchy, build_hierarchy
from .mlqmc import LevelSampler
from .supermesh import build_supermesh, build_three_way_supermesh
from .whitenoise import (
    CellGeometryTables,
    HaarLayout,
    WhiteNoiseDraw,
    apply_noise_maps,
    build_layout,
    build_tables,
    sample_white_noise,
)

__all__ = [
    "LevelContext",
    "build_level_contexts",
    "make_level_samplers",
    "sample_fields",
    "sample_field_batch",
    "sample_noise",
    "default_g_box",
    "default_d_box",
]

# batch size is chosen so one chunk stays within this many scratch floats
CHUNK_FLOAT_BUDGET = 4_000_000


def default_g_box(dim: int) -> Box:
    return Box((-0.5,) * dim, (0.5,) * dim)


def default_d_box(dim: int) -> Box:
    return Box((-1.0,) * dim, (1.0,) * dim)


@dataclass
class LevelContext:
    """Precomputed state for one hierarchy position.

    position 0 has no coarse half; every context owns its supermesh tables,
    wavelet layout, and prefactorized Helmholtz solves.
    """

    position: int
    params: MaternParams
    g_mesh: object
    d_mesh: object
    haar: object
    layout: HaarLayout
    tables: CellGeometryTables
    solve_fine: Callable
    inj_fine: np.ndarray  # D -> G vertex injection
    g_coarse: object = None
    d_coarse: object = None
    solve_coarse: Optional[Callable] = None
    inj_coarse: Optional[np.ndarray] = None
    dof_cost: float = 0.0

    @property
    def coupled(self) -> bool:
        return self.d_coarse is not None

    @property
    def chunk_size(self) -> int:
        per_sample = (
            self.layout.total_dim
            + self.tables.cell_block_size
            + 4 * self.d_mesh.n_vertices
        )
        return max(1, CHUNK_FLOAT_BUDGET // per_sample)


def build_level_contexts(
    dim: int,
    mesh_levels: List[int],
    haar_levels: List[int],
    params: MaternParams,
    g_box: Optional[Box] = None,
    d_box: Optional[Box] = None,
) -> List[LevelContext]:
    """One context per hierarchy position; mesh_levels are the dyadic
    refinement indices (mesh level k: 2^k cells per axis on G) and
    haar_levels the per-position wavelet truncation levels."""
    if len(mesh_levels) != len(haar_levels):
        raise ValueError("mesh_levels and haar_levels must have equal length")
    if any(b > a for a, b in zip(haar_levels[1:], haar_levels)):
        raise ValueError("haar_levels must be non-decreasing")
    g_box = g_box or default_g_box(dim)
    d_box = d_box or default_d_box(dim)
    hier = build_hierarchy(g_box, d_box, dim, mesh_levels, haar_levels)
    solves = {}
    for pos, (g, d, _) in enumerate(hier.levels):
        solves[pos] = fem.factorized_spd(fem.assemble_helmholtz(d, params.kappa))
    contexts = []
    for pos, (g, d, haar) in enumerate(hier.levels):
        layout = build_layout(dim, haar.level)
        inj = hier.injections[pos]
        if pos == 0:
            sm = build_supermesh(d, haar)
            tables = build_tables(d, haar, sm)
            ctx = LevelContext(
                pos, params, g, d, haar, layout, tables, solves[pos], inj
            )
            ctx.dof_cost = float(
                d.interior_vertices.size + g.interior_vertices.size
            )
        else:
            gc, dc, _ = hier.levels[pos - 1]
            sm = build_three_way_supermesh(d, dc, haar)
            tables = build_tables(d, haar, sm, coarse=dc)
            ctx = LevelContext(
                pos,
                params,
                g,
                d,
                haar,
                layout,
                tables,
                solves[pos],
                inj,
                g_coarse=gc,
                d_coarse=dc,
                solve_coarse=solves[pos - 1],
                inj_coarse=hier.injections[pos - 1],
            )
            ctx.dof_cost = float(
                d.interior_vertices.size
                + dc.interior_vertices.size
                + g.interior_vertices.size
                + gc.interior_vertices.size
            )
        contexts.append(ctx)
    return contexts


def _draw_inputs(
    ctx: LevelContext,
    seed: int,
    m: int,
    n0: int,
    n1: int,
    use_qmc: bool,
    gen: Optional[SobolGenerator],
    shift: Optional[DigitalShift],
):
    """Coefficient and cell-block draws for samples n0..n1-1, honoring the
    fixed per-sample order: QMC block, MC wavelet block, cell block."""
    B = n1 - n0
    lay = ctx.layout
    z = np.empty((B, lay.total_dim))
    zc = np.empty((B, ctx.tables.cell_block_size))
    if use_qmc:
        pts = shifted_point(sobol_points(gen, np.arange(n0, n1)), shift)
        z[:, : lay.qmc_dim] = inverse_normal_cdf(safe_uniform(pts))
        n_mc = lay.total_dim - lay.qmc_dim
        for i in range(B):
            stream = RandomStream(seed, ctx.position, m, n0 + i)
            if n_mc:
                z[i, lay.qmc_dim :] = normal_vector(stream, n_mc)
            zc[i] = normal_vector(stream, zc.shape[1])
    else:
        for i in range(B):
            stream = RandomStream(seed, ctx.position, m, n0 + i)
            z[i] = normal_vector(stream, lay.total_dim)
            zc[i] = normal_vector(stream, zc.shape[1])
    return z, zc.reshape(B, ctx.tables.n_cells, ctx.tables.dim + 1)


def _matern_batch(ctx: LevelContext, z: np.ndarray, z_cells: np.ndarray):
    """Gaussian fields on G for each draw: (fields_fine, fields_coarse)."""
    bs, _, _ = apply_noise_maps(ctx.tables, ctx.layout, z, z_cells)
    u_f = fem.matern_field_from_noise(ctx.d_mesh, ctx.params, bs[0], ctx.solve_fine)
    out_f = u_f[:, ctx.inj_fine]
    if not ctx.coupled:
        return out_f, None
    u_c = fem.matern_field_from_noise(
        ctx.d_coarse, ctx.params, bs[1], ctx.solve_coarse
    )
    return out_f, u_c[:, ctx.inj_coarse]


def _functional(g_mesh, M_int, u_g: np.ndarray, shift: float) -> np.ndarray:
    """P = squared L2 norm of the pressure for each coefficient field."""
    out = np.empty(u_g.shape[0])
    load = fem.assemble_load(g_mesh)[g_mesh.interior_vertices]
    for i in range(u_g.shape[0]):
        K = fem.assemble_lognormal_diffusion(g_mesh, u_g[i] + shift)
        p = fem.solve_spd(K, load)
        out[i] = p @ (M_int @ p)
    return out


def _y_batch(
    ctx: LevelContext,
    seed: int,
    m: int,
    n0: int,
    n1: int,
    use_qmc: bool,
    gen,
    shift,
    mass_int,
    mass_int_coarse,
) -> np.ndarray:
    out = np.empty(n1 - n0)
    step = ctx.chunk_size
    for a in range(n0, n1, step):
        b = min(a + step, n1)
        z, zc = _draw_inputs(ctx, seed, m, a, b, use_qmc, gen, shift)
        u_f, u_c = _matern_batch(ctx, z, zc)
        y = _functional(ctx.g_mesh, mass_int, u_f, ctx.params.mean_shift)
        if ctx.coupled:
            y = y - _functional(
                ctx.g_coarse, mass_int_coarse, u_c, ctx.params.mean_shift
            )
        out[a - n0 : b - n0] = y
    return out


def make_level_samplers(
    contexts: List[LevelContext],
    seed: int,
    use_qmc: bool = True,
    cost_model: str = "dofs",
) -> List[LevelSampler]:
    """Sampler closures for the estimator drivers.

    With cost_model="dofs" the per-sample cost is the fixed interior dof
    count over the systems each sample solves; "wall" starts from that and
    is replaced by the measured running mean seconds per sample.
    """
    if cost_model not in ("dofs", "wall"):
        raise ValueError("cost_model must be 'dofs' or 'wall'")
    gens: dict = {}
    samplers = []
    for ctx in contexts:
        samplers.append(_make_sampler(ctx, seed, use_qmc, cost_model, gens))
    return samplers


def _make_sampler(ctx, seed, use_qmc, cost_model, gens):
    qd = ctx.layout.qmc_dim
    if use_qmc and qd not in gens:
        gens[qd] = SobolGenerator(qd)
    gen = gens.get(qd)
    mass_int = fem.restrict_interior(fem.assemble_mass(ctx.g_mesh), ctx.g_mesh)
    mass_int_c = (
        fem.restrict_interior(fem.assemble_mass(ctx.g_coarse), ctx.g_coarse)
        if ctx.coupled
        else None
    )
    sampler = LevelSampler(level=ctx.position, cost=ctx.dof_cost, batch=None)
    timing = {"seconds": 0.0, "samples": 0}

    def batch(m: int, n0: int, n1: int) -> np.ndarray:
        shift = None
        if use_qmc:
            shift = DigitalShift.from_stream(
                RandomStream(seed, ctx.position, m, 0, PURPOSE_SHIFT), qd
            )
        t0 = time.perf_counter()
        y = _y_batch(
            ctx, seed, m, n0, n1, use_qmc, gen, shift, mass_int, mass_int_c
        )
        if cost_model == "wall":
            timing["seconds"] += time.perf_counter() - t0
            timing["samples"] += n1 - n0
            sampler.cost = timing["seconds"] / timing["samples"]
        return y

    sampler.batch = batch
    return sampler


def sample_field_batch(
    ctx: LevelContext, seed: int, m: int, n0: int, n1: int, use_qmc: bool = False
) -> np.ndarray:
    """Matern fields on G for samples n0..n1-1 (rows), mean shift applied."""
    gen = SobolGenerator(ctx.layout.qmc_dim) if use_qmc else None
    shift = (
        DigitalShift.from_stream(
            RandomStream(seed, ctx.position, m, 0, PURPOSE_SHIFT), ctx.layout.qmc_dim
        )
        if use_qmc
        else None
    )
    out = np.empty((n1 - n0, ctx.g_mesh.n_vertices))
    step = ctx.chunk_size
    for a in range(n0, n1, step):
        b = min(a + step, n1)
        z, zc = _draw_inputs(ctx, seed, m, a, b, use_qmc, gen, shift)
        u_f, _ = _matern_batch(ctx, z, zc)
        out[a - n0 : b - n0] = u_f + ctx.params.mean_shift
    return out


def sample_fields(ctx: LevelContext, seed: int, m: int, n: int, use_qmc: bool = False):
    """Matern field(s) on G for a single sample, mean shift applied.

    Returns (field_fine, field_coarse_or_None); used by the field dump
    command and the statistical validation tests.
    """
    gen = SobolGenerator(ctx.layout.qmc_dim) if use_qmc else None
    shift = (
        DigitalShift.from_stream(
            RandomStream(seed, ctx.position, m, 0, PURPOSE_SHIFT), ctx.layout.qmc_dim
        )
        if use_qmc
        else None
    )
    z, zc = _draw_inputs(ctx, seed, m, n, n + 1, use_qmc, gen, shift)
    u_f, u_c = _matern_batch(ctx, z, zc)
    shift_c = ctx.params.mean_shift
    if ctx.coupled:
        return u_f[0] + shift_c, u_c[0] + shift_c
    return u_f[0] + shift_c, None


def sample_noise(
    ctx: LevelContext, seed: int, m: int, n: int, use_qmc: bool = False
) -> WhiteNoiseDraw:
    """White-noise pairings for a single sample, for inspection dumps."""
    gen = SobolGenerator(ctx.layout.qmc_dim) if use_qmc else None
    shift = (
        DigitalShift.from_stream(
            RandomStream(seed, ctx.position, m, 0, PURPOSE_SHIFT), ctx.layout.qmc_dim
        )
        if use_qmc
        else None
    )

    def stream_for(k):
        return RandomStream(seed, ctx.position, m, k)

    return sample_white_noise(ctx.tables, ctx.layout, gen, shift, n, stream_for)
