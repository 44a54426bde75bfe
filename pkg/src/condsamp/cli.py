"""Command-line entry point.

Every subcommand reads an optional JSON config, applies command-line
overrides, validates the result and writes its artifacts plus a
``manifest.json`` under ``--out``.  Exit codes: 0 success, 1 usage or config
error, 2 numerical failure.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__, density, io, report
from .bias import BiasSpec, run_umbrella
from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .manifold import DmapModel, fit_dmap, local_covariances
from .neural import GanModel, HvdlParams, TrainConfig, TrainingDiverged, default_hvdl
from .neural import sample_ccgan, train_ccgan
from .pipeline import (CouplingConfig, ExtrapolationError, convergence_benchmark,
                       integrate_effective_ode, run_coupled_sampling, tabulate_closure,
                       umbrella_sampler)
from .samples import SampleSet
from .sde import DomainError, IntegrationDiverged, integrate, make_benchmark

log = logging.getLogger("condsamp")

NUMERICAL_ERRORS = (IntegrationDiverged, TrainingDiverged, ExtrapolationError, DomainError,
                    FloatingPointError, np.linalg.LinAlgError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _cols(n):
    return [f"x{i + 1}" for i in range(n)]


def _load_points(path):
    header, data = io.read_matrix_csv(path)
    data = np.atleast_2d(data)
    if header and header[0] == "t":
        data = data[:, 1:]
    return data


def _set(d, path, value):
    if value is None:
        return
    *head, last = path.split(".")
    for key in head:
        d = d.setdefault(key, {})
    d[last] = value


def _parse_params(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = float(v)
        except ValueError:
            raise UsageError(f"--param {k}: {v!r} is not a number") from None
    return out


def _effective_config(args, overrides) -> ExperimentConfig:
    base = load_config(args.config).to_dict() if args.config else {}
    for path, value in overrides.items():
        _set(base, path, value)
    return validate_config(base)


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")


def _system_flags(p):
    p.add_argument("--system", choices=["ou2d", "halfmoon", "doublewell", "caps3d"])
    p.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="override a system parameter (repeatable)")


def _system_overrides(args):
    o = {"system.id": args.system}
    params = _parse_params(args.param)
    if params:
        o["system.params"] = params
    return o


def build_parser():
    parser = _Parser(prog="condsamp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="integrate one trajectory")
    _common(p)
    _system_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--x0", type=float, nargs="+")

    p = sub.add_parser("dmap-fit", help="fit a diffusion map to trajectory data")
    _common(p)
    _system_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["euclidean", "mahalanobis"], default="euclidean")
    p.add_argument("--n-points", type=int, help="use the last N rows")
    p.add_argument("--n-eigs", type=int, default=5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eps", type=float, help="kernel bandwidth (default: median heuristic)")
    p.add_argument("--eps-scale", type=float, default=1.0)
    p.add_argument("--burst", type=int, default=200, help="bursts per local covariance")
    p.add_argument("--burst-dt", type=float, default=1e-5)

    p = sub.add_parser("dmap-eval", help="evaluate a learned coordinate and its gradient")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--coord", type=int, default=1)

    p = sub.add_parser("umbrella", help="restrained sampling on a raw or learned coordinate")
    _common(p)
    _system_flags(p)
    p.add_argument("--k-spring", type=float)
    p.add_argument("--target", type=float)
    p.add_argument("--cv-index", type=int)
    p.add_argument("--dmap", help="diffusion-map model; restrains its coordinate --coord")
    p.add_argument("--coord", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--fast-index", type=int, default=1)
    p.add_argument("--bins", type=int, default=100)

    p = sub.add_parser("gan-train", help="train a conditional generator")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", type=int)
    p.add_argument("--arch", choices=["pyramid", "wide", "small"])
    p.add_argument("--noise-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--kappa", type=float, help="vicinity radius on normalised labels")
    p.add_argument("--sigma", type=float, help="label perturbation scale on normalised labels")

    p = sub.add_parser("gan-sample", help="draw samples at one label")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--label", type=float, required=True)
    p.add_argument("--n", type=int, required=True)

    p = sub.add_parser("couple", help="generator-seeded parallel umbrella sampling")
    _common(p)
    _system_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--target-label", type=float)
    p.add_argument("--k-spring", type=float)
    p.add_argument("--cv-index", type=int)
    p.add_argument("--n-chains", type=int)
    p.add_argument("--steps-per-chain", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--range", type=float, nargs=2, dest="hist_range")

    p = sub.add_parser("bench-converge", help="L1 error against budget on the double well")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--h", type=float)
    p.add_argument("--budgets", type=int, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--n-chains", type=int)

    p = sub.add_parser("closure", help="tabulate the averaged slow drift and integrate it")
    _common(p)
    _system_flags(p)
    p.add_argument("--model", help="generator used as the conditional sampler")
    p.add_argument("--k-spring", type=float, default=1.0,
                   help="restraint for the umbrella sampler when --model is absent")
    p.add_argument("--sampler-steps", type=int, default=200)
    p.add_argument("--grid", type=float, nargs=3, metavar=("LO", "HI", "N"), required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--z0", type=float, default=0.0)
    p.add_argument("--T", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=1.0)
    return parser


def _cmd_simulate(args, out):
    cfg = _effective_config(args, {**_system_overrides(args), "seed": args.seed,
                                   "simulate.steps": args.steps, "simulate.dt": args.dt,
                                   "simulate.x0": args.x0})
    system = make_benchmark(cfg.system.id, cfg.system.params)
    dt = cfg.simulate.dt or system.default_dt
    x0 = cfg.simulate.x0 or [0.0] * system.dim
    if len(x0) != system.dim:
        raise UsageError(f"--x0 needs {system.dim} values")
    traj = integrate(system, np.asarray(x0), cfg.simulate.steps, dt, cfg.seed)
    traj.save(os.path.join(out, "trajectory.csv"))
    if not args.no_plots:
        report.plot_samples(traj.states, os.path.join(out, "trajectory.png"), color=traj.times)
    return cfg


def _cmd_dmap_fit(args, out):
    cfg = _effective_config(args, {**_system_overrides(args), "seed": args.seed})
    pts = _load_points(args.data)
    if args.n_points:
        pts = pts[-args.n_points:]
    covs = None
    if args.metric == "mahalanobis":
        system = make_benchmark(cfg.system.id, cfg.system.params)
        covs = local_covariances(system, pts, args.burst, args.burst_dt, cfg.seed)
    model = fit_dmap(pts, args.metric, args.eps, args.alpha, args.n_eigs, covs, cfg.seed,
                     eps_scale=args.eps_scale)
    model.save(os.path.join(out, "dmap.bin"))
    k = model.eigvecs.shape[1]
    io.write_matrix_csv(os.path.join(out, "dmap_coords.csv"),
                        _cols(pts.shape[1]) + [f"phi{j}" for j in range(k)],
                        np.column_stack([pts, model.eigvecs]))
    io.write_matrix_csv(os.path.join(out, "dmap_eigvals.csv"), ["index", "eigval"],
                        np.column_stack([np.arange(k), model.eigvals]))
    if not args.no_plots and k > 1:
        report.plot_samples(pts, os.path.join(out, "dmap_coords.png"), color=model.eigvecs[:, 1])
    return cfg


def _cmd_dmap_eval(args, out):
    cfg = _effective_config(args, {"seed": args.seed})
    model = DmapModel.load(args.model)
    pts = _load_points(args.data)
    val, grad = model.interpolant(args.coord).value_and_grad(pts)
    d = pts.shape[1]
    io.write_matrix_csv(os.path.join(out, "dmap_eval.csv"),
                        _cols(d) + ["phi"] + [f"dphi_dx{i + 1}" for i in range(d)],
                        np.column_stack([pts, val, grad]))
    return cfg


def _bias_spec(bias_cfg):
    if bias_cfg.kind == "learned_cv":
        interp = DmapModel.load(bias_cfg.dmap_model_path).interpolant(bias_cfg.coord_index)
        return BiasSpec("learned_cv", bias_cfg.k, bias_cfg.target, interpolant=interp)
    return BiasSpec("raw_coordinate", bias_cfg.k, bias_cfg.target,
                    cv_index=bias_cfg.cv_index)


def _cmd_umbrella(args, out):
    o = {**_system_overrides(args), "seed": args.seed, "bias.k": args.k_spring,
         "bias.target": args.target, "bias.cv_index": args.cv_index,
         "umbrella.steps": args.steps, "umbrella.warmup": args.warmup, "umbrella.dt": args.dt,
         "umbrella.x0": args.x0}
    if args.dmap:
        o.update({"bias.kind": "learned_cv", "bias.dmap_model_path": args.dmap,
                  "bias.coord_index": args.coord})
    if args.steps is not None and args.warmup is None:
        o["umbrella.warmup"] = args.steps // 10
    cfg = _effective_config(args, o)
    system = make_benchmark(cfg.system.id, cfg.system.params)
    x0 = cfg.umbrella.x0 or [0.0] * system.dim
    if len(x0) != system.dim:
        raise UsageError(f"--x0 needs {system.dim} values")
    res = run_umbrella(system, _bias_spec(cfg.bias), np.asarray(x0), cfg.umbrella.steps,
                       cfg.umbrella.warmup, cfg.umbrella.dt, cfg.seed)
    io.write_matrix_csv(os.path.join(out, "umbrella_samples.csv"), _cols(system.dim), res.points)
    fast = res.column(args.fast_index)
    est = density.histogram(fast, args.bins, density.default_range(fast))
    est.save(os.path.join(out, "umbrella_histogram.csv"))
    if not args.no_plots:
        report.plot_density(est, os.path.join(out, "umbrella_histogram.png"))
        report.plot_samples(res.points, os.path.join(out, "umbrella_samples.png"))
    return cfg


def _cmd_gan_train(args, out):
    cfg = _effective_config(args, {
        "seed": args.seed, "gan.label_column": args.label_column, "gan.arch": args.arch,
        "gan.noise_dim": args.noise_dim, "gan.epochs": args.epochs,
        "gan.batch_size": args.batch_size, "gan.lr": args.lr, "gan.kappa": args.kappa,
        "gan.sigma": args.sigma})
    g = cfg.gan
    pts = _load_points(args.data)
    if g.label_column >= pts.shape[1]:
        raise UsageError(f"label column {g.label_column} out of range")
    data = SampleSet(pts, labels=pts[:, g.label_column].copy())
    hv = default_hvdl(data.labels)
    hv = HvdlParams(g.kappa or hv.kappa_vicinity,
                    hv.sigma_label if g.sigma is None else g.sigma)
    tc = TrainConfig(g.epochs, g.batch_size, g.lr, g.beta1, g.beta2, cfg.seed,
                     g.d_steps_per_g_step)
    model = train_ccgan(data, g.arch, tc, hv, g.noise_dim)
    model.save(os.path.join(out, "gan.bin"))
    io.write_matrix_csv(os.path.join(out, "training_log.csv"), ["epoch", "d_loss", "g_loss"],
                        np.column_stack([np.arange(len(model.history["d_loss"])),
                                         model.history["d_loss"], model.history["g_loss"]]))
    if not args.no_plots:
        report.plot_training(model.history, os.path.join(out, "training_log.png"))
    return cfg


def _cmd_gan_sample(args, out):
    cfg = _effective_config(args, {"seed": args.seed})
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = GanModel.load(args.model)
    res = sample_ccgan(model, args.label, args.n, cfg.seed)
    io.write_matrix_csv(os.path.join(out, "gan_samples.csv"), _cols(model.data_dim), res.points)
    if not args.no_plots and model.data_dim >= 2:
        report.plot_samples(res.points, os.path.join(out, "gan_samples.png"))
    return cfg


def _cmd_couple(args, out):
    cfg = _effective_config(args, {
        **_system_overrides(args), "seed": args.seed, "bias.k": args.k_spring,
        "bias.cv_index": args.cv_index, "coupling.target_label": args.target_label,
        "coupling.n_chains": args.n_chains, "coupling.steps_per_chain": args.steps_per_chain,
        "coupling.warmup": args.warmup, "coupling.bins": args.bins,
        "coupling.hist_range": args.hist_range})
    c = cfg.coupling
    if cfg.bias.kind != "raw_coordinate":
        raise UsageError("couple restrains a raw coordinate at the target label")
    spec = BiasSpec("raw_coordinate", cfg.bias.k, c.target_label,
                    cv_index=cfg.bias.cv_index)
    system = make_benchmark(cfg.system.id, cfg.system.params)
    fast = 1 if system.dim > 1 and cfg.bias.cv_index == 0 else 0
    model = GanModel.load(args.model)
    hist_range = tuple(c.hist_range) if c.hist_range else None
    if hist_range is None:
        probe = sample_ccgan(model, c.target_label, 2000, cfg.seed).column(fast)
        hist_range = density.default_range(probe)
    cc = CouplingConfig(cfg.system.id, spec, c.n_chains, c.steps_per_chain, c.target_label,
                        c.warmup, None, cfg.seed, args.model, dict(cfg.system.params), fast,
                        c.bins, hist_range)
    samples, est = run_coupled_sampling(cc, model)
    io.write_matrix_csv(os.path.join(out, "coupled_samples.csv"), _cols(system.dim),
                        samples.points)
    est.save(os.path.join(out, "coupled_histogram.csv"))
    ref = None
    if cfg.system.id in ("ou2d", "doublewell") and fast == 1:
        ref = density.true_fast_pdf(cfg.system.id, c.target_label, dict(cfg.system.params))
        io.write_json(os.path.join(out, "coupled_summary.json"),
                      {"l1_error": density.l1_error(est, ref), "n_samples": len(samples)})
    if not args.no_plots:
        report.plot_density(est, os.path.join(out, "coupled_histogram.png"), ref)
        report.plot_samples(samples.points, os.path.join(out, "coupled_samples.png"))
    return cfg


def _cmd_bench(args, out):
    cfg = _effective_config(args, {"seed": args.seed, "benchmark.h": args.h,
                                   "benchmark.budgets": args.budgets,
                                   "benchmark.n_trials": args.trials,
                                   "benchmark.n_chains": args.n_chains})
    b = cfg.benchmark
    model = GanModel.load(args.model)
    _, summary = convergence_benchmark(b.h, b.budgets, b.n_trials, model, seed=cfg.seed,
                                       n_chains=b.n_chains, min_chain_steps=b.min_chain_steps,
                                       coupled_warmup=b.coupled_warmup, k_spring=b.k_spring,
                                       out_csv=os.path.join(out, "convergence.csv"))
    io.write_csv(os.path.join(out, "convergence_summary.csv"),
                 ["budget", "method", "mean_l1", "std_l1", "wall_s", "gan_wall_s"],
                 [(bud, m, v["mean"], v["std"], v["wall_s"], v["gan_wall_s"])
                  for (m, bud), v in sorted(summary.items(), key=lambda kv: (kv[0][1], kv[0][0]))])
    if not args.no_plots:
        report.plot_convergence(summary, os.path.join(out, "convergence.png"))
    return cfg


def _cmd_closure(args, out):
    cfg = _effective_config(args, {**_system_overrides(args), "seed": args.seed})
    system = make_benchmark(cfg.system.id, cfg.system.params)
    lo, hi, n = args.grid
    if not lo < hi or n < 2:
        raise UsageError("--grid needs LO < HI and N >= 2")
    grid = np.linspace(lo, hi, int(n))
    if args.model:
        sampler = GanModel.load(args.model)
    else:
        sampler = umbrella_sampler(system, args.k_spring, args.sampler_steps)
    res = tabulate_closure(sampler, system, grid, args.n, cfg.seed)
    io.write_matrix_csv(os.path.join(out, "closure.csv"), ["z", "B", "std_error"],
                        np.column_stack([res.grid, res.B_values, res.std_errors]))
    if args.T > 0:
        t, path = integrate_effective_ode(res, args.z0, args.T, args.dt)
        io.write_matrix_csv(os.path.join(out, "effective_path.csv"), ["t", "z"],
                            np.column_stack([t, path]))
        if not args.no_plots:
            report.plot_path(t, path, os.path.join(out, "effective_path.png"))
    return cfg


COMMANDS = {
    "simulate": _cmd_simulate, "dmap-fit": _cmd_dmap_fit, "dmap-eval": _cmd_dmap_eval,
    "umbrella": _cmd_umbrella, "gan-train": _cmd_gan_train, "gan-sample": _cmd_gan_sample,
    "couple": _cmd_couple, "bench-converge": _cmd_bench, "closure": _cmd_closure,
}


def _write_manifest(args, out, cfg, wall):
    io.write_json(os.path.join(out, "manifest.json"), {
        "command": args.command,
        "config_path": os.path.abspath(args.config) if args.config else None,
        "output_dir": os.path.abspath(out),
        "seed": cfg.seed,
        "tool_version": __version__,
        "wall_time_s": wall,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
    })


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
    except UsageError as err:
        print(err, file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    t0 = time.perf_counter()
    try:
        os.makedirs(out, exist_ok=True)
        cfg = COMMANDS[args.command](args, out)
        _write_manifest(args, out, cfg, time.perf_counter() - t0)
    except NUMERICAL_ERRORS as err:
        print(f"condsamp {args.command}: numerical failure: {err}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, OSError, KeyError, ValueError) as err:
        print(f"condsamp {args.command}: {err}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
