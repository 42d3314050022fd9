"""Command-line pipeline: data generation, training, fine-tuning, simulation, evaluation, plots.

Exit codes: 0 success, 2 validation error (bad flags, schema or config), 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("cld")

VAE_KEYS = {"epochs": int, "learning_rate": float, "seed": int, "batch_size": int, "latent_dim": int,
            "hidden_units": int, "kl_weight": float, "kl_warmup_fraction": float, "horizon_steps": int,
            "window_stride_steps": int, "dt_seconds": float}
DM_KEYS = {"epochs": int, "learning_rate": float, "final_learning_rate": float, "seed": int, "batch_size": int,
           "diffusion_steps": int, "beta_min": float, "beta_max": float, "hidden_units": int, "ema_decay": float}
RL_KEYS = {"iterations": int, "rollouts_per_iteration": int, "samples_per_context": int, "inner_epochs": int,
           "clip_ratio": float, "learning_rate": float, "seed": int, "ratio_guard": float,
           "pool_refresh_iterations": int, "focus_fraction": float, "focus_window_seconds": float,
           "max_grad_norm": float, "collision_threshold_m": float, "target_reduction": float}


def _set_threads(n: int):
    # BLAS pools are already initialised once numpy is imported, so limit them at runtime
    from threadpoolctl import threadpool_limits
    threadpool_limits(max(1, n))
    os.environ["NUMBA_NUM_THREADS"] = str(max(1, n))


def _seed(args, cfg):
    """An explicit --seed wins over the config's seed; one of them must be present."""
    from .errors import InvalidInputError
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return cfg["seed"]
    raise InvalidInputError("a seed is required: pass --seed or set 'seed' in the config")


def _epochs(args, cfg, default: int) -> int:
    """An explicit --epochs wins over the config's "epochs"."""
    return args.epochs if args.epochs is not None else cfg.get("epochs", default)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_gen_data(args):
    from .io import save_scenarios
    from .scenarios import generate_scenarios
    scenarios, demos = generate_scenarios(args.spec, args.count, args.seed, args.preset)
    save_scenarios(args.out, scenarios, demos)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")


def _dataset_from_file(path, stride):
    from .errors import InvalidInputError
    from .io import load_scenarios
    from .scenarios import build_dataset
    scenarios, demos = load_scenarios(path)
    if any(d is None for d in demos):
        raise InvalidInputError(f"{path}: every scenario needs a 'demonstration' field for training")
    return build_dataset(scenarios, demos, stride=stride)


def cmd_train_vae(args):
    from .io import read_config
    from .vae import VaeConfig, VaeModel, reconstruction_rmse, train_vae
    cfg = read_config(args.config, VAE_KEYS)
    d = VaeConfig()
    vcfg = VaeConfig(latent_dim=cfg.get("latent_dim", d.latent_dim), horizon=cfg.get("horizon_steps", d.horizon),
                     hidden=cfg.get("hidden_units", d.hidden), kl_weight=cfg.get("kl_weight", d.kl_weight),
                     kl_warmup_frac=cfg.get("kl_warmup_fraction", d.kl_warmup_frac), dt=cfg.get("dt_seconds", d.dt),
                     batch_size=cfg.get("batch_size", d.batch_size))
    seed = _seed(args, cfg)
    ds = _dataset_from_file(args.data, cfg.get("window_stride_steps", 10))
    model = VaeModel(vcfg, seed=seed)
    report = train_vae(ds, model, _epochs(args, cfg, 200), cfg.get("learning_rate", 1e-3), seed)
    model.save(args.out)
    _jsonl(str(args.out) + ".log.jsonl", report)
    print(f"vae trained on {len(ds)} windows; reconstruction RMSE {reconstruction_rmse(ds, model):.4f} m")


def cmd_encode_latents(args):
    from .diffusion import LatentDataset
    from .io import save_latents
    from .vae import VaeModel, encode_batch
    vae = VaeModel.load(args.vae)
    ds = _dataset_from_file(args.data, args.stride)
    mu, _ = encode_batch(ds.states, ds.contexts, vae)
    save_latents(args.out, LatentDataset(mu, ds.contexts, ds.scenario_ids),
                 {"latent_dim": int(mu.shape[1]), "source": Path(args.data).name})
    print(f"wrote {len(mu)} latents to {args.out}")


def cmd_train_dm(args):
    from .diffusion import DenoiserModel, DiffusionConfig, fit_normalization, train_dm
    from .errors import InvalidInputError
    from .io import load_latents, read_config
    from .vae import VaeModel
    cfg = read_config(args.config, DM_KEYS)
    data, _ = load_latents(args.latents)
    vae = VaeModel.load(args.vae)
    if data.latents.shape[1] != vae.config.latent_dim:
        raise InvalidInputError(f"latent file has dim {data.latents.shape[1]}, vae expects {vae.config.latent_dim}")
    d = DiffusionConfig()
    dcfg = DiffusionConfig(latent_dim=vae.config.latent_dim, K=cfg.get("diffusion_steps", d.K),
                           beta_min=cfg.get("beta_min", d.beta_min), beta_max=cfg.get("beta_max", d.beta_max),
                           hidden=cfg.get("hidden_units", d.hidden), batch_size=cfg.get("batch_size", d.batch_size))
    seed = _seed(args, cfg)
    model = DenoiserModel(dcfg, seed=seed)
    fit_normalization(model, data.latents)
    sched = dcfg.schedule()
    ema = cfg.get("ema_decay", 0.999)
    report = train_dm(data, model, sched, _epochs(args, cfg, 600), cfg.get("learning_rate", 1e-3), seed,
                      lr_final=cfg.get("final_learning_rate", 1e-5), ema_decay=ema if ema > 0 else None)
    model.save(args.out)
    _jsonl(str(args.out) + ".log.jsonl", report)
    print(f"denoiser trained; loss {report[0]['loss']:.4f} -> {report[-1]['loss']:.4f}")


def cmd_finetune_rl(args):
    from .diffusion import DenoiserModel
    from .io import load_scenarios, read_config
    from .reward import RewardConfig
    from .rlft import FinetuneConfig, finetune
    from .vae import VaeModel
    cfg = read_config(args.config, RL_KEYS)
    dm = DenoiserModel.load(args.dm)
    vae = VaeModel.load(args.vae)
    scenarios, _ = load_scenarios(args.scenarios)
    fcfg = FinetuneConfig(
        n_rollouts=cfg.get("rollouts_per_iteration", 64), samples_per_context=cfg.get("samples_per_context", 4),
        inner_epochs=cfg.get("inner_epochs", 2), clip_ratio=cfg.get("clip_ratio", 0.1),
        lr=cfg.get("learning_rate", FinetuneConfig.lr), iterations=cfg.get("iterations", 200),
        reward_mode=args.reward, ratio_guard=cfg.get("ratio_guard", 0.5),
        max_grad_norm=cfg.get("max_grad_norm", 1.0), pool_refresh=cfg.get("pool_refresh_iterations", 50),
        focus_frac=cfg.get("focus_fraction", 0.5), focus_window_s=cfg.get("focus_window_seconds", 3.0),
        target_reduction=cfg.get("target_reduction"))
    seed = _seed(args, cfg)
    rcfg = RewardConfig(collision_threshold=cfg.get("collision_threshold_m", 2.0), mode=args.reward)
    report = finetune(dm, vae, dm.config.schedule(), scenarios, fcfg, seed, reward_config=rcfg)
    dm.save(args.out, {"finetune": fcfg.to_dict()})
    _jsonl(str(args.out) + ".log.jsonl", report)
    print(f"fine-tuned {len(report)} iterations; mean reward {report[0]['mean_reward']:.3f} -> "
          f"{report[-1]['mean_reward']:.3f}")


def cmd_simulate(args):
    from .diffusion import DenoiserModel
    from .errors import InvalidInputError
    from .io import load_scenarios, save_runs
    from .simulation import ModelPlanner, run_in_batches
    from .vae import VaeModel
    dm = DenoiserModel.load(args.dm)
    vae = VaeModel.load(args.vae)
    scenarios, _ = load_scenarios(args.scenarios)
    if args.runs < 1:
        raise InvalidInputError("--runs must be >= 1")
    chosen = [scenarios[i % len(scenarios)] for i in range(args.runs)] if scenarios else []
    if not chosen:
        raise InvalidInputError(f"{args.scenarios}: no scenarios")
    runs = run_in_batches(ModelPlanner(vae, dm, dm.config.schedule()), chosen, args.seed)
    save_runs(args.out, runs, {"seed": args.seed, "scenarios": Path(args.scenarios).name})
    print(f"wrote {len(runs)} runs to {args.out}; collisions {sum(r.collided for r in runs)}, "
          f"off-road {sum(r.went_offroad for r in runs)}")


def cmd_evaluate(args):
    from .io import load_runs, load_scenarios
    from .metrics import evaluation_report
    from .scenarios import Horizon
    runs, _ = load_runs(args.runs)
    _, demos = load_scenarios(args.reference)
    h = Horizon()
    ref = [(d.states[h.start:h.start + h.control_steps + 1], d.actions[h.start:h.start + h.control_steps])
           for d in demos if d is not None]
    dt = runs[0].trajectory.dt if runs else h.dt
    rep = evaluation_report(runs, ref, args.task, dt)
    _write_json(args.out, rep)
    print(json.dumps(rep, sort_keys=True))


def _svg(run, path):
    pts = [run.trajectory.states[:, :2]] + [t[:, :2] for t in run.neighbor_tracks]
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0) - 5.0, allp.max(axis=0) + 5.0
    scale = 800.0 / max(hi[0] - lo[0], hi[1] - lo[1])
    w, h = (hi - lo) * scale

    def poly(p, color, width):
        xy = " ".join(f"{(x - lo[0]) * scale:.2f},{(hi[1] - y) * scale:.2f}" for x, y in p)
        return f'<polyline points="{xy}" fill="none" stroke="{color}" stroke-width="{width}"/>'

    body = [poly(t, "#888888", 1.5) for t in pts[1:]]
    body.append(poly(pts[0], "#d62728", 3))
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}">\n'
        + "\n".join(body) + "\n</svg>\n")


def cmd_export_plot(args):
    from .io import load_runs
    runs, _ = load_runs(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(runs):
        with open(out / f"run_{i:03d}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "x", "y", "v", "theta"])
            for k, st in enumerate(r.trajectory.states):
                wr.writerow([k] + [repr(float(v)) for v in st])
        with open(out / f"run_{i:03d}_neighbors.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "neighbor", "x", "y", "v", "theta"])
            for j, tr in enumerate(r.neighbor_tracks):
                for k, st in enumerate(tr):
                    wr.writerow([k, j] + [repr(float(v)) for v in st])
        _svg(r, out / f"run_{i:03d}.svg")
    print(f"exported {len(runs)} runs to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cld", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker threads for numeric libraries (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate scenarios with reference demonstrations")
    s.add_argument("--spec", required=True, help="straight-road, curved-road, four-way-intersection or mixed")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--preset", default="nominal", help="generator preset: nominal or stress")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-vae")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="overrides the config's seed; required if the config has none")
    s.add_argument("--epochs", type=int, help="overrides the config's epochs (default 200)")
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("encode-latents")
    s.add_argument("--data", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=10)
    s.set_defaults(func=cmd_encode_latents)

    s = sub.add_parser("train-dm")
    s.add_argument("--latents", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="overrides the config's seed; required if the config has none")
    s.add_argument("--epochs", type=int, help="overrides the config's epochs (default 600)")
    s.set_defaults(func=cmd_train_dm)

    s = sub.add_parser("finetune-rl")
    s.add_argument("--dm", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--scenarios", required=True)
    s.add_argument("--reward", required=True, choices=["collision", "offroad", "combined"])
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="overrides the config's seed; required if the config has none")
    s.set_defaults(func=cmd_finetune_rl)

    s = sub.add_parser("simulate")
    s.add_argument("--dm", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--scenarios", required=True)
    s.add_argument("--runs", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate")
    s.add_argument("--runs", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--task", required=True, choices=["no-collision", "no-offroad"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-plot")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_plot)
    return p


def main(argv=None) -> int:
    from .errors import InvalidInputError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        args.func(args)
    except (InvalidInputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
