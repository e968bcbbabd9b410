"""Command-line front end: one subcommand per experiment, flat key=value
configs, seeded reproducibility, full-precision CSV output.

Exit codes: 0 success, 1 property violation, 2 configuration error.
Set ROPESLR_THREADS to parallelize independent sweep points; output order and
bytes are identical either way because every point derives its own seed.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import analysis, decomposition, flops, lowrank, mechanism, rope3d

THREADS_ENV = "ROPESLR_THREADS"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config plumbing


def _load_config_file(path: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _merge(defaults: Dict[str, str], args: argparse.Namespace) -> Dict[str, str]:
    cfg = dict(defaults)
    if args.config:
        file_cfg = _load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = str(value)
    return cfg


def _as_int(cfg: Dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from exc


def _as_float(cfg: Dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be a real number, got {cfg[key]!r}") from exc


def _as_bool(cfg: Dict[str, str], key: str) -> bool:
    text = cfg[key].lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be true or false, got {cfg[key]!r}")


def _as_triple(text: str, what: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{what} must be three comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{what} must be integers, got {text!r}") from exc


def _as_grid(cfg: Dict[str, str], key: str = "grid") -> rope3d.GridShape:
    t, h, w = _as_triple(cfg[key], key)
    try:
        return rope3d.GridShape(t, h, w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _as_grids(cfg: Dict[str, str], key: str = "grids") -> List[rope3d.GridShape]:
    grids = []
    for chunk in cfg[key].split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        t, h, w = _as_triple(chunk, key)
        try:
            grids.append(rope3d.GridShape(t, h, w))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not grids:
        raise ConfigError(f"{key} must list at least one grid")
    return grids


def _as_rope(cfg: Dict[str, str]) -> rope3d.RopeConfig:
    d_t, d_x, d_y = _as_triple(cfg["rope"], "rope")
    try:
        return rope3d.RopeConfig(d_t, d_x, d_y, base=_as_float(cfg, "base"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _as_int_list(cfg: Dict[str, str], key: str) -> List[int]:
    try:
        values = [int(p) for p in cfg[key].split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key} must be comma-separated integers") from exc
    if not values:
        raise ConfigError(f"{key} must list at least one value")
    return values


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.16e}"


def _write_csv(out: Optional[str], header: Sequence[str], rows: Sequence[Sequence]) -> None:
    text = ",".join(header) + "\n"
    for row in rows:
        text += ",".join(_fmt(v) for v in row) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


def _pmap(fn: Callable, items: Sequence) -> List:
    """Order-preserving map, threaded when ROPESLR_THREADS > 1. Every item
    carries its own derived seed, so scheduling cannot change results."""
    n = _thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands


FOURIER_DEFAULTS = {
    "grid": "4,4,4", "rope": "4,4,4", "base": "10000", "seed": "0",
    "pairs": "4096", "tol": "1e-9", "corrupt_freq": "false",
}


def cmd_fourier_verify(cfg: Dict[str, str], out: Optional[str]) -> int:
    grid = _as_grid(cfg)
    rope_cfg = _as_rope(cfg)
    seed = _as_int(cfg, "seed")
    n_pairs = _as_int(cfg, "pairs")
    tol = _as_float(cfg, "tol")
    if n_pairs < 1 or tol <= 0:
        raise ConfigError("pairs must be positive and tol must be > 0")
    # test hook: evaluates the trig expansion on a perturbed schedule, which
    # must trip the exactness check
    corrupt = _as_bool(cfg, "corrupt_freq")

    q_mat, k_mat = decomposition.synthetic_qk(grid, rope_cfg, seed)
    ell = grid.size
    if ell * ell <= n_pairs:
        pairs = [(p, q) for p in range(ell) for q in range(ell)]
    else:
        rng = np.random.default_rng(seed + 1)
        idx = rng.integers(0, ell, size=(n_pairs, 2))
        pairs = [(int(a), int(b)) for a, b in idx]

    coords = grid.coords()
    rows = []
    max_err = 0.0
    for p, qpos in pairs:
        direct = rope3d.logit_direct(q_mat[p], k_mat[qpos], p, qpos, grid, rope_cfg)
        coeffs = rope3d.fourier_coeffs(q_mat[p], k_mat[qpos], rope_cfg)
        delta = coords[p] - coords[qpos]
        if corrupt:
            delta = delta * (1.0 + 1e-3)
        four = rope3d.logit_fourier(coeffs, tuple(delta), rope_cfg)
        err = abs(direct - four)
        max_err = max(max_err, err)
        rows.append((f"{p}-{qpos}", direct, four, err))
    _write_csv(out, ["pair", "direct", "fourier", "abs_err"],
               [(lbl, d, f, e) for lbl, d, f, e in rows])
    return 0 if max_err <= tol else 1


DECOMPOSE_DEFAULTS = {
    "grids": "4,4,4;8,8,8;12,12,12", "rope": "4,4,4", "base": "10000",
    "c": "0.5", "seed": "0",
}


def cmd_decompose_sweep(cfg: Dict[str, str], out: Optional[str]) -> int:
    grids = _as_grids(cfg)
    rope_cfg = _as_rope(cfg)
    c = _as_float(cfg, "c")
    seed = _as_int(cfg, "seed")
    sizes = [g.size for g in grids]
    if sizes != sorted(sizes):
        raise ConfigError("grids must be sorted ascending in token count")
    if max(sizes) > decomposition.DESK_CAP:
        raise ConfigError(f"largest grid exceeds the desk cap {decomposition.DESK_CAP}")
    if not (0.0 < c < math.sqrt(sizes[0])):
        raise ConfigError(f"c={c} must satisfy 0 < c < sqrt(L_min)={math.sqrt(sizes[0]):.4f}")

    points = _pmap(
        lambda item: decomposition.scaling_sweep_point(item[1], rope_cfg, c, seed + item[0]),
        list(enumerate(grids)))
    rows = [(r["L"], r["tau"], r["nnz"], r["nnz_bound"], r["bg_inf_norm"], r["holds"])
            for r in points]
    _write_csv(out, ["L", "tau", "nnz", "nnz_bound", "bg_inf_norm", "holds"], rows)
    return 0 if all(r["holds"] for r in points) else 1


RECONSTRUCT_DEFAULTS = {
    "grid": "6,6,6", "rope": "4,4,4", "base": "10000", "tau": "0.05",
    "e_tol": "0.02", "favor_r": "1024", "seed": "0",
}


def cmd_reconstruct(cfg: Dict[str, str], out: Optional[str]) -> int:
    grid = _as_grid(cfg)
    rope_cfg = _as_rope(cfg)
    tau = _as_float(cfg, "tau")
    e_tol = _as_float(cfg, "e_tol")
    favor_rs = _as_int_list(cfg, "favor_r")
    seed = _as_int(cfg, "seed")
    if not (e_tol > 0 and 2.0 * e_tol <= tau < 1.0):
        raise ConfigError(f"need 0 < 2*e_tol <= tau < 1, got tau={tau}, e_tol={e_tol}")
    if grid.size > decomposition.DESK_CAP:
        raise ConfigError(f"grid exceeds the desk cap {decomposition.DESK_CAP}")
    if min(favor_rs) < 1:
        raise ConfigError("favor_r values must be positive")

    q_mat, k_mat = decomposition.synthetic_qk(grid, rope_cfg, seed)

    def run(r_dim: int) -> lowrank.Reconstruction:
        return lowrank.reconstruct(q_mat, k_mat, grid, rope_cfg, tau, e_tol, r_dim, seed)

    recs = _pmap(run, favor_rs)
    rows = [(grid.size, rec.tau, rec.e_tol, rec.favor_dim, rec.rank_lowrank,
             rec.nnz_sparse, rec.max_err_spike, rec.max_err_bg) for rec in recs]
    _write_csv(out, ["L", "tau", "E_tol", "favor_R", "rank", "nnz",
                     "max_err_spike", "max_err_bg"], rows)
    ok = all(rec.max_err_spike == 0.0 and rec.support_matches_spikes for rec in recs)
    return 0 if ok else 1


SPECTRAL_DEFAULTS = {
    "grid": "4,4,4", "rope": "4,4,4", "base": "10000", "pairs": "10000", "seed": "0",
}


def cmd_spectral(cfg: Dict[str, str], out: Optional[str]) -> int:
    grid = _as_grid(cfg)
    rope_cfg = _as_rope(cfg)
    pairs = _as_int(cfg, "pairs")
    seed = _as_int(cfg, "seed")
    if pairs < 100:
        raise ConfigError("pairs must be at least 100")
    q_mat, k_mat = decomposition.synthetic_qk(grid, rope_cfg, seed)
    report = analysis.spectral_decay_report(q_mat, k_mat, grid, rope_cfg, pairs, seed)
    rows = []
    for axis in rope3d.AXES:
        for m in range(1, rope_cfg.n_freqs(axis) + 1):
            rows.append((axis, m, report.magnitude[axis][m - 1], report.tail[axis][m - 1]))
    _write_csv(out, ["axis", "m", "magnitude", "tail"],
               [(a, m, mag, tail) for a, m, mag, tail in rows])
    return 0


STABLE_RANK_DEFAULTS = {
    "grids": "5,5,5;8,8,8;10,10,10", "rope": "4,4,4", "base": "10000",
    "energy": "0.9", "seed": "0",
}


def cmd_stable_rank_sweep(cfg: Dict[str, str], out: Optional[str]) -> int:
    grids = _as_grids(cfg)
    rope_cfg = _as_rope(cfg)
    energy = _as_float(cfg, "energy")
    seed = _as_int(cfg, "seed")
    if not (0.0 < energy < 1.0):
        raise ConfigError(f"energy must lie in (0, 1), got {energy}")
    sizes = [g.size for g in grids]
    if sizes != sorted(sizes):
        raise ConfigError("grids must be sorted ascending in token count")
    if max(sizes) > decomposition.DESK_CAP:
        raise ConfigError(f"largest grid exceeds the desk cap {decomposition.DESK_CAP}")

    def run(item):
        i, grid = item
        rows = analysis.residual_stable_rank_sweep([grid], rope_cfg, energy, seed + i)
        return rows[0]

    points = _pmap(run, list(enumerate(grids)))
    _write_csv(out, ["L", "retained_fraction", "residual_stable_rank"],
               [(r["L"], r["retained_fraction"], r["residual_stable_rank"]) for r in points])
    return 0


TASK_DEFAULTS = {
    "grid": "5,5,5", "rope": "4,2,2", "base": "10000", "heads": "2", "rank": "4",
    "block": "1,5,5", "keep": "0.5", "samples": "2", "seed": "0",
}


def _task_pieces(cfg: Dict[str, str]):
    grid = _as_grid(cfg)
    rope_cfg = _as_rope(cfg)
    heads = _as_int(cfg, "heads")
    rank = _as_int(cfg, "rank")
    samples = _as_int(cfg, "samples")
    seed = _as_int(cfg, "seed")
    if heads < 1 or rank < 1 or samples < 1:
        raise ConfigError("heads, rank and samples must be positive")
    block = _as_triple(cfg["block"], "block")
    keep = _as_float(cfg, "keep")
    try:
        sparse = mechanism.SparseSettings(block=block, keep=keep)
        task = mechanism.make_alignment_task(grid, rope_cfg, heads, samples, seed)
        # fail fast on indivisible blocks before any training starts
        mechanism._block_ids(grid, block)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return task, sparse, rank, seed


TRAIN_DEFAULTS = dict(TASK_DEFAULTS, steps="500", lr="2.0")

TRAIN_VARIANTS = (
    ("lowrank_3dpe", "lowrank", True),
    ("lowrank_nope", "lowrank", False),
    ("linear_nope", "linear", False),
    ("linear_3dpe", "linear", True),
)


def cmd_train_align(cfg: Dict[str, str], out: Optional[str]) -> int:
    task, sparse, rank, seed = _task_pieces(cfg)
    steps = _as_int(cfg, "steps")
    lr = _as_float(cfg, "lr")
    if steps < 0 or lr < 0:
        raise ConfigError("steps and lr must be non-negative")

    def run(variant):
        name, compensator, use_pe = variant
        settings = mechanism.ForwardSettings(sparse=sparse, compensator=compensator,
                                             use_pe=use_pe)
        params = mechanism.init_params(task.backbone.n_heads, task.backbone.d_h,
                                       rank, seed)
        result = mechanism.train_stage1(task.dataset, task.grid, task.cfg,
                                        task.backbone, params, settings, lr, steps)
        return name, result

    results = _pmap(run, TRAIN_VARIANTS)
    for name, result in results:
        rows = [(step, loss) for step, loss in enumerate(result.losses)]
        if out is None:
            sys.stdout.write(f"# variant={name}\n")
            _write_csv(None, ["step", "loss"], rows)
        else:
            _write_csv(f"{out}.{name}.csv", ["step", "loss"], rows)
    return 0


GRAM_DEFAULTS = dict(TASK_DEFAULTS, steps="0", lr="2.0", use_pe="true", modes="4")


def cmd_gram_spectral(cfg: Dict[str, str], out: Optional[str],
                      modes_out: Optional[str] = None) -> int:
    task, sparse, rank, seed = _task_pieces(cfg)
    steps = _as_int(cfg, "steps")
    lr = _as_float(cfg, "lr")
    n_modes = _as_int(cfg, "modes")
    if steps < 0 or lr < 0 or n_modes < 1:
        raise ConfigError("steps and lr must be non-negative and modes positive")
    settings = mechanism.ForwardSettings(sparse=sparse, compensator="lowrank",
                                         use_pe=_as_bool(cfg, "use_pe"))
    params = mechanism.init_params(task.backbone.n_heads, task.backbone.d_h, rank, seed)
    if steps > 0:
        mechanism.train_stage1(task.dataset, task.grid, task.cfg, task.backbone,
                               params, settings, lr, steps)
    x = task.dataset[0][0]
    trace = mechanism.forward(x, task.grid, task.cfg, task.backbone, params, settings)
    spectrum = analysis.gram_spectral(trace.o_lowrank[0], task.grid, n_modes)
    rows = [(i + 1, spectrum.sigma[i], spectrum.ratio[i], spectrum.energy_fraction[i])
            for i in range(spectrum.sigma.size)]
    _write_csv(out, ["i", "sigma", "ratio", "energy_fraction"], rows)
    if modes_out is not None:
        mode_rows = []
        for k in range(spectrum.modes.shape[0]):
            for t in range(task.grid.t):
                for xx in range(task.grid.h):
                    for yy in range(task.grid.w):
                        mode_rows.append((k + 1, t, xx, yy, spectrum.modes[k, t, xx, yy]))
        _write_csv(modes_out, ["mode", "t", "x", "y", "value"], mode_rows)
    return 0


GATE_MAP_DEFAULTS = dict(TASK_DEFAULTS, steps="0", lr="2.0")


def cmd_gate_map(cfg: Dict[str, str], out: Optional[str]) -> int:
    task, sparse, rank, seed = _task_pieces(cfg)
    steps = _as_int(cfg, "steps")
    lr = _as_float(cfg, "lr")
    if steps < 0 or lr < 0:
        raise ConfigError("steps and lr must be non-negative")
    settings = mechanism.ForwardSettings(sparse=sparse)
    params = mechanism.init_params(task.backbone.n_heads, task.backbone.d_h, rank, seed)
    if steps > 0:
        mechanism.train_stage1(task.dataset, task.grid, task.cfg, task.backbone,
                               params, settings, lr, steps)
    x = task.dataset[0][0]
    trace = mechanism.forward(x, task.grid, task.cfg, task.backbone, params, settings)
    gmap = analysis.gate_map(trace.g, task.grid)
    rows = []
    for t in range(task.grid.t):
        for xx in range(task.grid.h):
            for yy in range(task.grid.w):
                rows.append((t, xx, yy, gmap.values[t, xx, yy], gmap.frame_means[t]))
    _write_csv(out, ["t", "x", "y", "g", "frame_mean"], rows)
    return 0


GRAD_CHECK_DEFAULTS = {
    "grid": "2,2,2", "rope": "2,2,0", "base": "10000", "heads": "2", "rank": "2",
    "block": "1,2,2", "keep": "0.5", "instances": "20", "epsilon": "1e-5",
    "tol": "1e-4", "seed": "0",
}


def cmd_grad_check(cfg: Dict[str, str], out: Optional[str]) -> int:
    grid = _as_grid(cfg)
    rope_cfg = _as_rope(cfg)
    heads = _as_int(cfg, "heads")
    rank = _as_int(cfg, "rank")
    instances = _as_int(cfg, "instances")
    epsilon = _as_float(cfg, "epsilon")
    tol = _as_float(cfg, "tol")
    seed = _as_int(cfg, "seed")
    if heads < 1 or rank < 1 or instances < 1 or tol <= 0:
        raise ConfigError("heads, rank, instances must be positive and tol > 0")
    if not (1e-7 <= epsilon <= 1e-4):
        raise ConfigError("epsilon must lie in [1e-7, 1e-4]")
    block = _as_triple(cfg["block"], "block")
    keep = _as_float(cfg, "keep")
    try:
        sparse = mechanism.SparseSettings(block=block, keep=keep)
        mechanism._block_ids(grid, block)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    settings = mechanism.ForwardSettings(sparse=sparse)

    def run(i: int) -> float:
        task = mechanism.make_alignment_task(grid, rope_cfg, heads, 1, seed + i)
        params = mechanism.init_params(heads, rope_cfg.d_h, rank, seed + 1000 + i)
        x, target = task.dataset[0]
        return mechanism.grad_check(params, x, target, grid, rope_cfg, task.backbone,
                                    settings, epsilon)

    devs = _pmap(run, list(range(instances)))
    _write_csv(out, ["instance", "deviation"], [(i, d) for i, d in enumerate(devs)])
    return 0 if all(d <= tol for d in devs) else 1


FLOPS_DEFAULTS = {
    "b": "1", "h": "1", "l": "118800", "d_h": "128", "s": "0.9", "r": "64",
}


def cmd_flops(cfg: Dict[str, str], out: Optional[str]) -> int:
    try:
        fc = flops.FlopsConfig(b=_as_int(cfg, "b"), h=_as_int(cfg, "h"),
                               l=_as_int(cfg, "l"), d_h=_as_int(cfg, "d_h"),
                               s=_as_float(cfg, "s"), r=_as_int(cfg, "r"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    row = (fc.b, fc.h, fc.l, fc.d_h, fc.s, fc.r,
           flops.c_full(fc), flops.c_sparse(fc), flops.c_lowrank(fc),
           flops.c_fusion(fc), flops.c_linear_branch(fc), flops.total_ropeslr(fc),
           flops.lowrank_vs_linear_ratio(fc), flops.overhead_eta(fc))
    _write_csv(out, ["B", "H", "L", "d_h", "S", "r", "c_full", "c_sparse",
                     "c_lowrank", "c_fusion", "c_linear_branch", "c_total",
                     "lowrank_vs_linear_ratio", "overhead_eta"], [row])
    return 0


# ---------------------------------------------------------------------------
# Parser


_COMMANDS = {
    "fourier-verify": (FOURIER_DEFAULTS, cmd_fourier_verify),
    "decompose-sweep": (DECOMPOSE_DEFAULTS, cmd_decompose_sweep),
    "reconstruct": (RECONSTRUCT_DEFAULTS, cmd_reconstruct),
    "spectral": (SPECTRAL_DEFAULTS, cmd_spectral),
    "stable-rank-sweep": (STABLE_RANK_DEFAULTS, cmd_stable_rank_sweep),
    "gram-spectral": (GRAM_DEFAULTS, cmd_gram_spectral),
    "gate-map": (GATE_MAP_DEFAULTS, cmd_gate_map),
    "train-align": (TRAIN_DEFAULTS, cmd_train_align),
    "grad-check": (GRAD_CHECK_DEFAULTS, cmd_grad_check),
    "flops": (FLOPS_DEFAULTS, cmd_flops),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropeslr",
                                     description="sparse-plus-low-rank attention laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (defaults, _) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="CSV output path (stdout when omitted)")
        if name == "gram-spectral":
            p.add_argument("--modes-out", dest="modes_out",
                           help="optional CSV of the leading spatial modes")
        for key in defaults:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                           help=f"override {key} (default {defaults[key]})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    defaults, handler = _COMMANDS[args.command]
    try:
        cfg = _merge(defaults, args)
        if args.command == "gram-spectral":
            return handler(cfg, args.out, getattr(args, "modes_out", None))
        return handler(cfg, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
