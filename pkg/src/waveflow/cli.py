"""Command-line front end: train, oracle, evaluate-grid, sample, check.

Exit codes: 0 on success, 2 for configuration/checkpoint problems (bad
files, bad fields, malformed headers), 1 for runtime failures (solver
non-convergence, node-guard exhaustion, and other computational errors).
The ``WAVEFLOW_LOG`` environment variable (``error``, ``info`` or
``debug``) controls diagnostic verbosity on stderr.
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import checks as ck
from . import config as cf
from . import flow as fl
from . import oracle as orc
from . import physics as ph
from . import vqmc as vq
from .errors import CheckpointError, ConfigurationError, WaveflowError

__all__ = ["main", "build_parser", "save_run_checkpoint",
           "load_run_checkpoint", "render_heatmap_svg"]

_LOG = logging.getLogger("waveflow")
_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}
_RUN_FORMAT = "waveflow-run"
_RUN_VERSION = 1
_EVAL_CHUNK = 16384


def _setup_logging():
    name = os.environ.get("WAVEFLOW_LOG", "info").lower()
    if name not in _LOG_LEVELS:
        raise ConfigurationError(
            f"WAVEFLOW_LOG must be one of error, info, debug; got {name!r}")
    if not _LOG.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        _LOG.addHandler(handler)
    _LOG.setLevel(_LOG_LEVELS[name])
    _LOG.propagate = False


# ---------------------------------------------------------------------------
# Atomic file output
# ---------------------------------------------------------------------------

def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_write_json(path, payload):
    _atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Run checkpoints
# ---------------------------------------------------------------------------

def save_run_checkpoint(path, cfg, model, epoch):
    """Atomically write architecture, system, and parameters as JSON."""
    payload = {
        "format": _RUN_FORMAT,
        "version": _RUN_VERSION,
        "epoch": int(epoch),
        "system": asdict(cfg.system),
        "model": asdict(cfg.model),
        "params": [float(v) for v in model.flow.net.flat_params()],
    }
    _atomic_write_json(path, payload)


def load_run_checkpoint(path):
    """Rebuild (config, model, epoch) from a run checkpoint file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path} is not a run checkpoint: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != _RUN_FORMAT:
        raise CheckpointError(f"{path} is not a run checkpoint")
    if blob.get("version") != _RUN_VERSION:
        raise CheckpointError(
            f"unsupported run checkpoint version {blob.get('version')!r}")
    try:
        system = cf.SystemConfig(**blob["system"])
        model_cfg = cf.ModelConfig(**blob["model"])
        params = np.asarray(blob["params"], dtype=float)
        epoch = int(blob["epoch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed run checkpoint {path}: {exc}") from exc
    cfg = cf.RunConfig(system=system, model=model_cfg)
    model = cfg.build_model(seed=0)
    expected = model.flow.net.flat_params().size
    if params.shape != (expected,):
        raise CheckpointError(
            f"checkpoint holds {params.size} parameters but the declared "
            f"architecture needs {expected}")
    model.flow.net.set_flat_params(params)
    return cfg, model, epoch


# ---------------------------------------------------------------------------
# SVG heatmap
# ---------------------------------------------------------------------------

_MID = (247, 247, 247)
_NEG = (33, 102, 172)
_POS = (178, 24, 43)


def _diverging_color(t):
    """Blue-white-red map for t in [-1, 1], white exactly at zero."""
    other, frac = (_NEG, -t) if t < 0.0 else (_POS, t)
    channels = tuple(round(m + (o - m) * frac) for m, o in zip(_MID, other))
    return "#%02x%02x%02x" % channels


def render_heatmap_svg(values, half_length):
    """Deterministic cell-grid SVG of a square field, diverging about 0.

    ``values[i, j]`` is the field at (x0_i, x1_j); x0 runs rightward and
    x1 upward.  Equal-colored horizontal runs are merged into single cells.
    """
    res = values.shape[0]
    vmax = float(np.abs(values).max())
    if vmax == 0.0:
        vmax = 1.0
    scaled = np.clip(values / vmax, -1.0, 1.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{res}" '
        f'height="{res}" viewBox="0 0 {res} {res}" '
        'shape-rendering="crispEdges">',
        f"<desc>field on [{-float(half_length)!r}, {float(half_length)!r}]^2;"
        f" white at zero, saturated at |value| = {vmax!r}</desc>",
    ]
    for row in range(res):
        j = res - 1 - row
        colors = [_diverging_color(t) for t in scaled[:, j]]
        i = 0
        while i < res:
            run = 1
            while i + run < res and colors[i + run] == colors[i]:
                run += 1
            parts.append(f'<rect x="{i}" y="{row}" width="{run}" '
                         f'height="1" fill="{colors[i]}"/>')
            i += run
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = cf.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, training=replace(cfg.training, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, output=replace(cfg.output, directory=args.out))
    out_dir = cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write_text(os.path.join(out_dir, "config.toml"),
                       cf.serialize_config(cfg))
    spec = cfg.system.hamiltonian_spec()
    model = cfg.build_model()
    train_cfg = cfg.training
    adam = vq.AdamState(model.flow.net.flat_params().size)
    tracker = vq.EnergyTracker(train_cfg.baseline_window,
                               train_cfg.variance_window)
    rng = np.random.default_rng(train_cfg.seed)
    _LOG.info("training %s (%d particles) for %d epochs, seed %d -> %s",
              cfg.system.hamiltonian, cfg.system.n_particles,
              train_cfg.epochs, train_cfg.seed, out_dir)
    report_every = max(1, train_cfg.epochs // 120)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(1, train_cfg.epochs + 1):
            start = time.perf_counter()
            energy, grad_norm = vq.epoch_step(model, spec, train_cfg, adam,
                                              tracker, rng)
            wall_ms = (time.perf_counter() - start) * 1e3
            record = {"epoch": epoch, "energy": energy,
                      "baseline": tracker.baseline(),
                      "running_variance": tracker.running_variance(),
                      "grad_norm": grad_norm, "wall_ms": round(wall_ms, 3)}
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            if epoch % cfg.output.checkpoint_every == 0:
                save_run_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{epoch:06d}.json"),
                    cfg, model, epoch)
            if epoch % report_every == 0:
                _LOG.info("epoch %d/%d: window mean %.6f, grad norm %.3f",
                          epoch, train_cfg.epochs, tracker.baseline(),
                          grad_norm)
            else:
                _LOG.debug("epoch %d: energy %.6f, grad norm %.3f",
                           epoch, energy, grad_norm)
    save_run_checkpoint(os.path.join(out_dir, "checkpoint_final.json"),
                        cfg, model, train_cfg.epochs)
    summary = {
        "energy_mean": tracker.mean(),
        "energy_std": math.sqrt(tracker.running_variance()),
        "window_epochs": min(train_cfg.variance_window, train_cfg.epochs),
        "total_epochs": train_cfg.epochs,
    }
    _atomic_write_json(os.path.join(out_dir, "summary.json"), summary)
    print(f"final energy {summary['energy_mean']:.6f} "
          f"+/- {summary['energy_std']:.6f} "
          f"over the last {summary['window_epochs']} epochs")
    return 0


def cmd_oracle(args):
    cfg = cf.load_config(args.config)
    spec = cfg.system.hamiltonian_spec()
    seed = args.seed if args.seed is not None else 0
    out_dir = args.out if args.out is not None else cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    if args.richardson_from and args.richardson_from >= args.grid_points:
        raise ConfigurationError(
            "--richardson-from must be coarser than --grid-points")
    _LOG.info("grid eigensolve: %s, %d^%d points, %d states",
              cfg.system.hamiltonian, args.grid_points, spec.n_particles,
              args.n_states)
    h = orc.build_hamiltonian(spec, cfg.system.half_length, args.grid_points)
    result = orc.lowest_eigenpairs(h, args.n_states, seed=seed)
    if spec.n_particles == 2:
        index, energy = orc.select_antisymmetric(result)
        label = "selected antisymmetric energy"
    else:
        index, energy = 0, float(result.eigenvalues[0])
        label = "ground-state energy"
    payload = {
        "eigenvalues": [float(v) for v in result.eigenvalues],
        "antisymmetry_scores": [float(s) for s in result.antisymmetry_scores],
        "selected_index": index,
        "selected_energy": energy,
        "grid_points": args.grid_points,
        "grid_spacing": result.grid_spacing,
        "half_length": cfg.system.half_length,
    }
    if args.richardson_from:
        _LOG.info("coarse eigensolve for Richardson extrapolation: %d points",
                  args.richardson_from)
        coarse_h = orc.build_hamiltonian(spec, cfg.system.half_length,
                                         args.richardson_from)
        coarse = orc.lowest_eigenpairs(coarse_h, args.n_states, seed=seed)
        if spec.n_particles == 2:
            coarse_energy = orc.select_antisymmetric(coarse)[1]
        else:
            coarse_energy = float(coarse.eigenvalues[0])
        payload["richardson_energy"] = orc.richardson_extrapolate(
            coarse_energy, coarse.grid_spacing, energy, result.grid_spacing)
        payload["coarse_grid_points"] = args.richardson_from
    _atomic_write_json(os.path.join(out_dir, "eigenvalues.json"), payload)

    vec = result.eigenvectors[index]
    axis = h.axis
    if spec.n_particles == 2:
        grid_vals = vec.reshape(args.grid_points, args.grid_points)
        lines = ["x0,x1,psi"]
        for i in range(args.grid_points):
            xi = repr(float(axis[i]))
            row = grid_vals[i]
            lines.extend(f"{xi},{float(axis[j])!r},{float(row[j])!r}"
                         for j in range(args.grid_points))
    else:
        lines = ["x0,psi"]
        lines.extend(f"{float(axis[i])!r},{float(vec[i])!r}"
                     for i in range(args.grid_points))
    _atomic_write_text(os.path.join(out_dir, "eigenvector.csv"),
                       "\n".join(lines) + "\n")
    if "richardson_energy" in payload:
        print(f"{label}: {energy:.6f} "
              f"(Richardson-extrapolated: {payload['richardson_energy']:.6f})")
    else:
        print(f"{label}: {energy:.6f}")
    return 0


def cmd_evaluate_grid(args):
    _, model, epoch = load_run_checkpoint(args.checkpoint)
    if model.flow.n_dims != 2:
        raise ConfigurationError(
            "grid evaluation is defined for two-particle systems")
    res = args.resolution
    if res < 2:
        raise ConfigurationError("--resolution must be at least 2")
    big_l = model.geometry.half_length
    axis = np.linspace(-big_l, big_l, res)
    x0, x1 = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([x0.ravel(), x1.ravel()], axis=1)
    values = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], _EVAL_CHUNK):
        block = pts[lo:lo + _EVAL_CHUNK]
        values[lo:lo + block.shape[0]] = ph.psi_batch(model, block)[0]
    grid_vals = values.reshape(res, res)
    out_dir = (args.out if args.out is not None
               else os.path.dirname(os.path.abspath(args.checkpoint)))
    os.makedirs(out_dir, exist_ok=True)
    lines = ["x0,x1,psi"]
    for i in range(res):
        xi = repr(float(axis[i]))
        row = grid_vals[i]
        lines.extend(f"{xi},{float(axis[j])!r},{float(row[j])!r}"
                     for j in range(res))
    _atomic_write_text(os.path.join(out_dir, "wavefunction.csv"),
                       "\n".join(lines) + "\n")
    _atomic_write_text(os.path.join(out_dir, "wavefunction.svg"),
                       render_heatmap_svg(grid_vals, big_l))
    print(f"evaluated a {res}x{res} grid from epoch {epoch}; "
          f"wrote wavefunction.csv and wavefunction.svg in {out_dir}")
    return 0


def cmd_sample(args):
    _, model, _ = load_run_checkpoint(args.checkpoint)
    if args.n < 1:
        raise ConfigurationError("--n must be positive")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    u = fl.sample_batch(model.flow, args.n, rng)
    x = ph.from_relative_batch(model.coord, u, model.geometry.half_length)
    out_dir = (args.out if args.out is not None
               else os.path.dirname(os.path.abspath(args.checkpoint)))
    os.makedirs(out_dir, exist_ok=True)
    header = ",".join(f"x{d}" for d in range(x.shape[1]))
    lines = [header]
    lines.extend(",".join(repr(float(v)) for v in row) for row in x)
    path = os.path.join(out_dir, "samples.csv")
    _atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"wrote {args.n} samples to {path}")
    return 0


def cmd_check(args):
    if args.config is not None:
        cf.load_config(args.config)  # surface config problems as exit 2
    seed = args.seed if args.seed is not None else 0
    results = ck.run_property_suite(seed=seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}  [{r.seconds:.2f}s]")
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed "
              f"in {total:.1f}s: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed in {total:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (train: overrides the config)")
    common.add_argument("--workers", type=int, default=1,
                        help="worker count hint (computation is single-process)")
    common.add_argument("--out", default=None,
                        help="output directory (overrides the default)")

    parser = argparse.ArgumentParser(
        prog="waveflow",
        description="Spline-flow variational Monte Carlo for interacting "
                    "fermions on a line, with a grid eigensolver reference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common],
                             help="run the variational training loop")
    p_train.add_argument("--config", required=True,
                         help="run configuration file")
    p_train.set_defaults(func=cmd_train)

    p_oracle = sub.add_parser("oracle", parents=[common],
                              help="solve the grid Hamiltonian eigenproblem")
    p_oracle.add_argument("--config", required=True,
                          help="run configuration file (system section)")
    p_oracle.add_argument("--grid-points", type=int, default=301,
                          help="grid points per axis (default 301)")
    p_oracle.add_argument("--n-states", type=int, default=4,
                          help="number of eigenstates to compute (default 4)")
    p_oracle.add_argument("--richardson-from", type=int, default=0,
                          help="coarse grid size for Richardson extrapolation "
                               "(0 disables)")
    p_oracle.set_defaults(func=cmd_oracle)

    p_grid = sub.add_parser("evaluate-grid", parents=[common],
                            help="evaluate the wavefunction on a square grid")
    p_grid.add_argument("--checkpoint", required=True,
                        help="run checkpoint written by train")
    p_grid.add_argument("--resolution", type=int, default=101,
                        help="grid points per axis (default 101)")
    p_grid.set_defaults(func=cmd_evaluate_grid)

    p_sample = sub.add_parser("sample", parents=[common],
                              help="draw exact samples from the model")
    p_sample.add_argument("--checkpoint", required=True,
                          help="run checkpoint written by train")
    p_sample.add_argument("--n", type=int, default=1000,
                          help="number of samples (default 1000)")
    p_sample.set_defaults(func=cmd_sample)

    p_check = sub.add_parser("check", parents=[common],
                             help="run the fast property suite")
    p_check.add_argument("--config", default=None,
                         help="optional config file to validate first")
    p_check.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.workers < 1:
            raise ConfigurationError("--workers must be at least 1")
        if args.workers > 1:
            _LOG.debug("worker count %d requested; computation is "
                       "single-process", args.workers)
        return args.func(args)
    except (ConfigurationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except WaveflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
