"""Configuration-driven command line front end.

Four commands over one JSON config: `field` (dump single samples), `screen`
(level-by-level bias/variance/cost tables), `nvar` (N * variance tables),
and `estimate` (run an estimator over a tolerance sweep). All outputs are
CSV plus a manifest; reruns with the same manifest are byte-identical under
the deterministic cost model.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy

from . import __version__
from .fem import MaternParams
from .mesh import Box, write_mesh
from .mlqmc import (
    ConvergenceFailure,
    LevelSampler,
    mlmc_run,
    mlqmc_run,
    nvar_diagnostic,
    qmc_estimate,
    screening_run,
    write_estimate_csv,
    write_nvar_csv,
    write_screening_csv,
)
from .problem import (
    build_level_contexts,
    default_d_box,
    default_g_box,
    make_level_samplers,
    sample_fields,
    sample_noise,
)
from .supermesh import build_supermesh, build_three_way_supermesh, write_supermesh_csv

MAX_QMC_DOUBLINGS = 24


class ConfigError(ValueError):
    """Invalid configuration; `path` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class MaternConfig:
    mode: str = "match-lognormal"  # or "explicit"
    lam: float = 0.25
    mean: float = 1.0
    variance: float = 0.2
    sigma: Optional[float] = None
    mean_shift: float = 0.0


@dataclass
class RunConfig:
    dim: int = 2
    mesh_levels: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    haar_levels: List[int] = field(default_factory=lambda: [3, 3, 3, 3, 3])
    g_box: Optional[List[List[float]]] = None
    d_box: Optional[List[List[float]]] = None
    matern: MaternConfig = field(default_factory=MaternConfig)
    estimator: str = "mlqmc"
    eps: List[float] = field(default_factory=lambda: [2e-4])
    theta: float = 0.5
    M: int = 32
    seed: int = 0
    out: str = "out"
    cost_model: str = "dofs"
    L_min: int = 2
    L_max: Optional[int] = None
    N_init: int = 64
    N_screen: int = 128
    N_list: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    synthetic: bool = False


_MATERN_KEYS = {"mode", "lambda", "mean", "variance", "sigma", "mean_shift"}
_TOP_KEYS = {
    "dim",
    "mesh_levels",
    "haar_levels",
    "g_box",
    "d_box",
    "matern",
    "estimator",
    "eps",
    "theta",
    "M",
    "seed",
    "out",
    "cost_model",
    "L_min",
    "L_max",
    "N_init",
    "N_screen",
    "N_list",
    "synthetic",
}


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def parse_config(data: dict) -> RunConfig:
    """Dict (parsed JSON) to a validated RunConfig."""
    _require(isinstance(data, dict), "config", "must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    _require(not unknown, sorted(unknown)[0] if unknown else "", "unknown field")
    cfg = RunConfig()
    md = data.get("matern", {})
    _require(isinstance(md, dict), "matern", "must be an object")
    unknown = set(md) - _MATERN_KEYS
    _require(
        not unknown, "matern." + (sorted(unknown)[0] if unknown else ""), "unknown field"
    )
    mat = MaternConfig(
        mode=md.get("mode", "match-lognormal"),
        lam=md.get("lambda", 0.25),
        mean=md.get("mean", 1.0),
        variance=md.get("variance", 0.2),
        sigma=md.get("sigma"),
        mean_shift=md.get("mean_shift", 0.0),
    )
    for key in _TOP_KEYS - {"matern"}:
        if key in data:
            setattr(cfg, key, data[key])
    cfg.matern = mat
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    _require(cfg.dim in (1, 2), "dim", "must be 1 or 2")
    _require(
        isinstance(cfg.mesh_levels, list) and len(cfg.mesh_levels) > 0,
        "mesh_levels",
        "must be a non-empty list",
    )
    _require(
        all(isinstance(v, int) and v >= 1 for v in cfg.mesh_levels),
        "mesh_levels",
        "entries must be integers >= 1",
    )
    _require(
        all(b > a for a, b in zip(cfg.mesh_levels, cfg.mesh_levels[1:])),
        "mesh_levels",
        "must be strictly increasing",
    )
    _require(
        isinstance(cfg.haar_levels, list)
        and len(cfg.haar_levels) == len(cfg.mesh_levels),
        "haar_levels",
        "must match mesh_levels in length",
    )
    _require(
        all(isinstance(v, int) and v >= -1 for v in cfg.haar_levels),
        "haar_levels",
        "entries must be integers >= -1",
    )
    _require(
        all(b >= a for a, b in zip(cfg.haar_levels, cfg.haar_levels[1:])),
        "haar_levels",
        "must be non-decreasing",
    )
    for name in ("g_box", "d_box"):
        box = getattr(cfg, name)
        if box is None:
            continue
        ok = (
            isinstance(box, list)
            and len(box) == 2
            and all(isinstance(side, list) and len(side) == cfg.dim for side in box)
            and all(b > a for a, b in zip(box[0], box[1]))
        )
        _require(ok, name, "must be [lo, hi] coordinate lists with lo < hi")
    _require(
        cfg.matern.mode in ("match-lognormal", "explicit"),
        "matern.mode",
        "must be 'match-lognormal' or 'explicit'",
    )
    _require(cfg.matern.lam > 0, "matern.lambda", "must be positive")
    if cfg.matern.mode == "match-lognormal":
        _require(cfg.matern.mean > 0, "matern.mean", "must be positive")
        _require(cfg.matern.variance > 0, "matern.variance", "must be positive")
    else:
        _require(cfg.matern.sigma is not None, "matern.sigma", "required")
        _require(cfg.matern.sigma >= 0, "matern.sigma", "must be non-negative")
    _require(
        cfg.estimator in ("qmc", "mlmc", "mlqmc"),
        "estimator",
        "must be 'qmc', 'mlmc' or 'mlqmc'",
    )
    _require(isinstance(cfg.eps, list) and cfg.eps, "eps", "must be a non-empty list")
    for i, e in enumerate(cfg.eps):
        _require(
            isinstance(e, (int, float)) and e > 0, f"eps[{i}]", "must be positive"
        )
    _require(0.0 < cfg.theta < 1.0, "theta", "must lie in (0, 1)")
    _require(isinstance(cfg.M, int) and cfg.M >= 2, "M", "must be an integer >= 2")
    _require(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be >= 0")
    _require(cfg.cost_model in ("dofs", "wall"), "cost_model", "'dofs' or 'wall'")
    _require(isinstance(cfg.L_min, int) and cfg.L_min >= 1, "L_min", "must be >= 1")
    if cfg.L_max is not None:
        _require(
            isinstance(cfg.L_max, int) and cfg.L_max >= cfg.L_min,
            "L_max",
            "must be >= L_min",
        )
    _require(cfg.N_init >= 2, "N_init", "must be >= 2")
    _require(cfg.N_screen >= 16, "N_screen", "must be >= 16")
    _require(
        isinstance(cfg.N_list, list)
        and all(isinstance(n, int) and n >= 1 and not (n & (n - 1)) for n in cfg.N_list),
        "N_list",
        "entries must be powers of two",
    )
    _require(isinstance(cfg.synthetic, bool), "synthetic", "must be a boolean")


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    md = d.pop("matern")
    md["lambda"] = md.pop("lam")
    d["matern"] = {k: v for k, v in md.items() if v is not None}
    return d


def config_hash(cfg: RunConfig) -> str:
    d = config_to_dict(cfg)
    d.pop("out", None)  # where results land does not affect what they contain
    text = json.dumps(d, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _matern_params(cfg: RunConfig) -> MaternParams:
    m = cfg.matern
    if m.mode == "match-lognormal":
        return MaternParams.lognormal_matched(cfg.dim, m.lam, m.mean, m.variance)
    if m.sigma == 0:
        base = MaternParams.create(cfg.dim, 1.0, m.lam, m.mean_shift)
        return replace(base, sigma=0.0, eta=0.0)
    return MaternParams.create(cfg.dim, m.sigma, m.lam, m.mean_shift)


def _boxes(cfg: RunConfig):
    g = Box(*map(tuple, cfg.g_box)) if cfg.g_box else default_g_box(cfg.dim)
    d = Box(*map(tuple, cfg.d_box)) if cfg.d_box else default_d_box(cfg.dim)
    return g, d


def _build_contexts(cfg: RunConfig):
    g_box, d_box = _boxes(cfg)
    return build_level_contexts(
        cfg.dim, cfg.mesh_levels, cfg.haar_levels, _matern_params(cfg), g_box, d_box
    )


def _synthetic_samplers(n_levels: int) -> List[LevelSampler]:
    """Deterministic stand-ins with exact geometric decay: Y = 4^-level,
    cost = 4^level. The screening fit recovers alpha = gamma = 2 exactly."""

    def make(ell):
        return LevelSampler(
            level=ell,
            cost=4.0**ell,
            batch=lambda m, n0, n1: np.full(n1 - n0, 4.0**-ell),
        )

    return [make(ell) for ell in range(n_levels)]


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _replay_samplers(samplers, N: int, M: int, threads: int):
    """Precompute batch(m, 0, N) for every (level, m) pair, in parallel, and
    wrap the results in samplers that replay prefix slices. Output-identical
    to using the originals directly, whatever the thread count."""
    tasks = [(li, m) for li in range(len(samplers)) for m in range(M)]
    results = _pool_map(lambda t: samplers[t[0]].batch(t[1], 0, N), tasks, threads)
    cache = {}
    for (li, m), ys in zip(tasks, results):
        cache.setdefault(li, {})[m] = ys

    def make(li, s):
        return LevelSampler(
            level=s.level,
            cost=s.cost,
            batch=lambda m, n0, n1, c=cache[li]: c[m][n0:n1],
        )

    return [make(li, s) for li, s in enumerate(samplers)]


# --------------------------------------------------------------------------
# dumps


def _write_field_csv(path, mesh, values, header_line: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(header_line + "\n")
        f.write("vertex_index,x,y,value\n")
        for i, v in enumerate(values):
            x = float(mesh.vertices[i, 0])
            y = float(mesh.vertices[i, 1]) if mesh.dim > 1 else 0.0
            f.write(f"{i},{x!r},{y!r},{float(v)!r}\n")


def _write_noise_csv(path, values) -> None:
    with open(path, "w", newline="") as f:
        f.write("dof_index,value\n")
        for i, v in enumerate(values):
            f.write(f"{i},{float(v)!r}\n")


def _dump_static(cfg: RunConfig, ctxs, out: Path, args) -> None:
    for ctx in ctxs:
        if args.dump_mesh:
            write_mesh(ctx.g_mesh, out / f"mesh_g_l{ctx.position}.txt")
            write_mesh(ctx.d_mesh, out / f"mesh_d_l{ctx.position}.txt")
        if args.dump_supermesh:
            if ctx.coupled:
                sm = build_three_way_supermesh(ctx.d_mesh, ctx.d_coarse, ctx.haar)
            else:
                sm = build_supermesh(ctx.d_mesh, ctx.haar)
            write_supermesh_csv(sm, out / f"supermesh_l{ctx.position}.csv")


def _dump_noise(cfg: RunConfig, ctxs, out: Path, n: int) -> None:
    for ctx in ctxs:
        draw = sample_noise(ctx, cfg.seed, 0, n)
        _write_noise_csv(out / f"noise_l{ctx.position}.csv", draw.b_fine)
        if draw.b_coarse is not None:
            _write_noise_csv(out / f"noise_l{ctx.position}_coarse.csv", draw.b_coarse)


def _dump_fields(cfg: RunConfig, ctxs, out: Path, n: int, threads: int) -> None:
    pairs = _pool_map(
        lambda ctx: sample_fields(ctx, cfg.seed, 0, n), ctxs, threads
    )
    for ctx, (f_fine, f_coarse) in zip(ctxs, pairs):
        head = f"# seed={cfg.seed} level={ctx.position} sample={n}"
        _write_field_csv(out / f"field_l{ctx.position}.csv", ctx.g_mesh, f_fine, head)
        if f_coarse is not None:
            _write_field_csv(
                out / f"field_l{ctx.position}_coarse.csv", ctx.g_coarse, f_coarse, head
            )


# --------------------------------------------------------------------------
# commands


def cmd_field(cfg: RunConfig, args) -> int:
    ctxs = _build_contexts(cfg)
    out = _prepare_out(cfg, "field")
    _dump_static(cfg, ctxs, out, args)
    _dump_fields(cfg, ctxs, out, args.sample, args.threads)
    if args.dump_noise:
        _dump_noise(cfg, ctxs, out, args.sample)
    return 0


def cmd_screen(cfg: RunConfig, args) -> int:
    if cfg.synthetic:
        samplers = _synthetic_samplers(len(cfg.mesh_levels))
    else:
        ctxs = _build_contexts(cfg)
        out_pre = _build_samplers_for(cfg, ctxs)
        samplers = _replay_samplers(out_pre, cfg.N_screen, cfg.M, args.threads)
        _post_build_dumps(cfg, ctxs, args)
    report = screening_run(samplers, cfg.N_screen, cfg.M)
    out = _prepare_out(cfg, "screen")
    write_screening_csv(out / "screen.csv", report)
    print(
        f"alpha={report.alpha:.3f} beta={report.beta:.3f} gamma={report.gamma:.3f}"
    )
    return 0


def cmd_nvar(cfg: RunConfig, args) -> int:
    if cfg.synthetic:
        samplers = _synthetic_samplers(len(cfg.mesh_levels))
    else:
        ctxs = _build_contexts(cfg)
        raw = _build_samplers_for(cfg, ctxs)
        samplers = _replay_samplers(raw, max(cfg.N_list), cfg.M, args.threads)
        _post_build_dumps(cfg, ctxs, args)
    rows = nvar_diagnostic(samplers, cfg.N_list, cfg.M)
    out = _prepare_out(cfg, "nvar")
    write_nvar_csv(out / "nvar.csv", rows)
    return 0


def cmd_estimate(cfg: RunConfig, args) -> int:
    if cfg.synthetic:
        raise ConfigError("synthetic", "estimate needs the PDE problem")
    rows = []
    any_failed = False
    if cfg.estimator == "qmc":
        finest = _single_level_config(cfg)
        ctxs = _build_contexts(finest)
        _post_build_dumps(cfg, ctxs, args)
        sampler = make_level_samplers(
            ctxs, cfg.seed, use_qmc=True, cost_model=cfg.cost_model
        )[0]
        for eps in cfg.eps:
            budget = (1.0 - cfg.theta) * eps**2
            N = 1
            mean, vom, _ = qmc_estimate(sampler, N, cfg.M)
            while vom > budget and N < 2**MAX_QMC_DOUBLINGS:
                N *= 2
                mean, vom, _ = qmc_estimate(sampler, N, cfg.M)
            row = (float(eps), N * cfg.M * sampler.cost, mean)
            if vom > budget:
                row = row + ("failed",)
                any_failed = True
            rows.append(row)
            _log_eps(rows[-1])
    else:
        ctxs = _build_contexts(cfg)
        _post_build_dumps(cfg, ctxs, args)
        use_qmc = cfg.estimator == "mlqmc"
        samplers = make_level_samplers(
            ctxs, cfg.seed, use_qmc=use_qmc, cost_model=cfg.cost_model
        )
        for eps in cfg.eps:
            try:
                if use_qmc:
                    est, state = mlqmc_run(
                        samplers, eps, cfg.theta, cfg.L_min, cfg.L_max, cfg.M
                    )
                else:
                    est, state = mlmc_run(
                        samplers, eps, cfg.theta, cfg.L_min, cfg.L_max, cfg.N_init
                    )
                rows.append((float(eps), state.total_cost(), est))
            except ConvergenceFailure as exc:
                state = exc.state
                rows.append(
                    (float(eps), state.total_cost(), state.estimate(), "failed")
                )
                any_failed = True
            _log_eps(rows[-1])
    out = _prepare_out(cfg, "estimate")
    write_estimate_csv(out / "estimate.csv", rows)
    return 3 if any_failed else 0


def _log_eps(row) -> None:
    status = row[3] if len(row) > 3 else "ok"
    print(f"eps={row[0]:.3e} cost={row[1]:.6g} estimate={row[2]:.6e} [{status}]")


def _single_level_config(cfg: RunConfig) -> RunConfig:
    one = replace(cfg)
    one.mesh_levels = [cfg.mesh_levels[-1]]
    one.haar_levels = [cfg.haar_levels[-1]]
    return one


def _build_samplers_for(cfg: RunConfig, ctxs):
    use_qmc = cfg.estimator in ("qmc", "mlqmc")
    return make_level_samplers(ctxs, cfg.seed, use_qmc=use_qmc, cost_model=cfg.cost_model)


def _post_build_dumps(cfg: RunConfig, ctxs, args) -> None:
    if args.dump_mesh or args.dump_supermesh or args.dump_noise or args.dump_field:
        out = _prepare_out(cfg, "dumps")
        _dump_static(cfg, ctxs, out, args)
        if args.dump_noise:
            _dump_noise(cfg, ctxs, out, 0)
        if args.dump_field:
            _dump_fields(cfg, ctxs, out, 0, args.threads)


def _prepare_out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "haarmc": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": "%d.%d" % sys.version_info[:2],
        },
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haarmc")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("field", "screen", "nvar", "estimate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=None)
        p.add_argument("--dump-mesh", action="store_true")
        p.add_argument("--dump-supermesh", action="store_true")
        p.add_argument("--dump-noise", action="store_true")
        p.add_argument("--dump-field", action="store_true")
        if name == "field":
            p.add_argument("--sample", type=int, default=0)
    return parser


def load_config(path, overrides: dict) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    cfg = parse_config(data)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    validate_config(cfg)
    return cfg


_COMMANDS = {
    "field": cmd_field,
    "screen": cmd_screen,
    "nvar": cmd_nvar,
    "estimate": cmd_estimate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        if args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
