"""Command-line front door.

Every command reads a JSON run config (``--config``), writes its outputs into
``--out`` (default: the config's ``out``) and leaves a manifest there that can
be fed back as ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .baselines import FixedTimeProgram, fixed_program_for
from .config import RunConfig, load_config
from .ehh import anova_decompose
from .env import TrafficEnv
from .errors import ConfigError, DataError, NumericError, PwlTscError, ShapeError
from .forecast import SeriesDataset, forecast_all, ingest_csv, synthetic_series
from .marl import (
    InfluenceModule,
    MarlAgent,
    collect_rollouts,
    episode_seeds,
    evaluate_policy,
    influence_weights,
    pretrain_ehh,
    train,
    write_curve,
)
from .plotting import plot_curves
from .pwlnet import load_json, save_json
from .trafficsim import N_STAGES

log = logging.getLogger("pwltsc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: List[Path], started: float,
                   method: Optional[str] = None) -> Path:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "method": method,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "duration_s": round(time.time() - started, 3),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    name = f"manifest_{command}" + (f"_{method}" if method else "") + ".json"
    path = out / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _influence_path(out: Path) -> Path:
    return out / "influence.json"


def _checkpoint_path(out: Path, method: str) -> Path:
    return out / f"checkpoint_{method}.json"


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> List[Path]:
    graph = cfg.graph()
    p = cfg.pretrain
    module = pretrain_ehh(graph, cfg.mdp.env_config(), p.episodes, cfg.seed, p.d_ehh, p.lam,
                          min_samples=cfg.trainer.batch, cap=p.cap, joint_steps=p.steps)
    ckpt = _influence_path(out)
    save_json(module.to_dict(), ckpt)
    report = out / "pretrain_report.json"
    report.write_text(json.dumps(module.report, indent=2, sort_keys=True))
    log.info("pretrain: holdout R2 %.3f, %d nonzero weights", module.report.get("holdout_r2", float("nan")),
             module.report["nonzero_weights"])
    return [ckpt, report]


def _load_influence(out: Path) -> InfluenceModule:
    path = _influence_path(out)
    if not path.exists():
        raise DataError(f"no pre-trained influence module at {path}; run 'pwltsc pretrain' with the same config first")
    return InfluenceModule.from_dict(load_json(path))


def cmd_train(cfg: RunConfig, out: Path, args) -> List[Path]:
    method = args.method or "ours"
    graph = cfg.graph()
    env_cfg = cfg.mdp.env_config()
    curve_path = out / f"curve_{method}.csv"
    ckpt = _checkpoint_path(out, method)
    if method == "fixed":
        program = fixed_program_for(env_cfg, cfg.fixed.green_s)
        seeds = episode_seeds(cfg.seed, cfg.trainer.episodes, 0)
        res = evaluate_policy(graph, env_cfg, program, seeds)
        rows = [
            {**{k: e[k] for k in ("AVE", "STA", "global_reward")}, "episode": k,
             "actor_loss": float("nan"), "critic_loss": float("nan")}
            for k, e in enumerate(res["episodes"])
        ]
        write_curve(rows, curve_path)
        save_json({"method": "fixed", "program": dataclasses.asdict(program)}, ckpt)
        return [curve_path, ckpt]
    if method not in ("ours", "ippo"):
        raise ConfigError(f"--method: unknown method {method!r} (ours, ippo, fixed)")
    influence = _load_influence(out) if method == "ours" else None
    result = train(graph, cfg.trainer_config(), env_cfg, influence, method,
                   progress=lambda r: log.info("episode %d: reward %.1f AVE %.3f", r["episode"], r["global_reward"], r["AVE"]))
    result.write_curve(curve_path)
    save_json(result.agent.to_dict(), ckpt)
    return [curve_path, ckpt]


def _load_policy(path: Path, graph):
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run 'pwltsc train' first")
    doc = load_json(path)
    if doc.get("method") == "fixed":
        return FixedTimeProgram(**doc["program"])
    return MarlAgent.from_dict(doc, graph).greedy_policy()


def cmd_eval(cfg: RunConfig, out: Path, args) -> List[Path]:
    method = args.method or "ours"
    graph = cfg.graph()
    env_cfg = cfg.mdp.env_config()
    ckpt = Path(args.checkpoint) if args.checkpoint else _checkpoint_path(out, method)
    policy = _load_policy(ckpt, graph)
    res = evaluate_policy(graph, env_cfg, policy, episode_seeds(cfg.seed, cfg.eval.episodes, 1))
    path = out / f"eval_{method}.json"
    path.write_text(json.dumps({"method": method, "checkpoint": ckpt.name, **res}, indent=2, sort_keys=True))
    log.info("eval %s: AVE %.3f STA %.3f", method, res["AVE"], res["STA"])
    return [path]


def _dataset(cfg: RunConfig) -> SeriesDataset:
    f = cfg.forecast
    if f.csv:
        return ingest_csv(f.csv)
    return synthetic_series(f.n_nodes, f.length, seed=cfg.seed)


def cmd_forecast(cfg: RunConfig, out: Path, args) -> List[Path]:
    results = forecast_all(_dataset(cfg), cfg.forecast.horizons, cfg.forecast.model_config(cfg.seed), cfg.workers)
    written = []
    for r in results:
        m, a = out / f"forecast_h{r.horizon}.json", out / f"forecast_anova_h{r.horizon}.csv"
        r.write(m, a)
        log.info("horizon %d: R2 %.4f RMSE %.4f (persistence %.4f)", r.horizon, r.test["R2"], r.test["RMSE"],
                 r.persistence["RMSE"])
        written += [m, a]
    return written


def cmd_anova(cfg: RunConfig, out: Path, args) -> List[Path]:
    """Importances of the pre-trained influence module on fresh random-policy rollouts."""
    graph = cfg.graph()
    module = _load_influence(out)
    env_cfg = cfg.mdp.env_config()
    X, _ = collect_rollouts(TrafficEnv(graph, env_cfg), 1, cfg.seed + 1)
    rep = anova_decompose(module.ehh, module.transform(X))
    reduced = out / "anova_reduced.csv"
    rep.write_csv(reduced, [f"z{m}" for m in range(module.W.shape[0])])
    sigma_in = module.importance(X)
    D = graph.max_in_degree
    feats = [f"stage{s}" for s in range(N_STAGES)] + [f"q{j}" for j in range(D)] + [f"density{j}" for j in range(D)]
    names = [f"{node}:{f}" for node in graph.intersections for f in feats]
    inputs = out / "anova_inputs.csv"
    with open(inputs, "w") as fh:
        fh.write("component,sigma\n")
        for n, s in zip(names, sigma_in):
            fh.write(f"{n},{float(s)!r}\n")
    w = influence_weights(sigma_in, graph.N)
    weights = out / "influence_weights.json"
    weights.write_text(json.dumps(dict(zip(graph.intersections, w.tolist())), indent=2, sort_keys=True))
    return [reduced, inputs, weights]


def cmd_plot(cfg: Optional[RunConfig], out: Path, args) -> List[Path]:
    return plot_curves(args.curves, out, args.labels)


def _plot_from_manifest(args) -> None:
    """Fill curve paths and labels from a plot manifest given as ``--config``."""
    doc = json.loads(Path(args.config).read_text())
    if doc.get("command") != "plot":
        raise ConfigError(f"{args.config}: plot takes curve files or a plot manifest")
    args.curves = doc["curves"]
    if args.labels is None:
        args.labels = doc.get("labels")


def write_plot_manifest(out: Path, args, outputs: List[Path], started: float) -> Path:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": "plot",
        "version": __version__,
        "curves": [str(Path(c).resolve()) for c in args.curves],
        "labels": args.labels,
        "inputs": {Path(c).name: _sha256(Path(c)) for c in args.curves},
        "duration_s": round(time.time() - started, 3),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out / "manifest_plot.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "anova": cmd_anova,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwltsc", description="Traffic signal control with BReLU actor-critic and EHH influence.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config or a run manifest")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--method", choices=["ours", "ippo", "fixed"], help="controller (train/eval)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--workers", type=int, help="worker processes where supported")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint JSON (default: <out>/checkpoint_<method>.json)")
        if name == "plot":
            p.add_argument("curves", nargs="*", help="learning-curve CSV files")
            p.add_argument("--labels", nargs="*", help="series labels (default: file stems)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.config and args.method is None:
        doc = json.loads(Path(args.config).read_text())
        if isinstance(doc, dict) and doc.get("manifest_version"):
            args.method = doc.get("method")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        changes["workers"] = args.workers
    return dataclasses.replace(cfg, **changes)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        if args.command == "plot":
            if args.config and not args.curves:
                _plot_from_manifest(args)
            out = Path(args.out or ".")
            out.mkdir(parents=True, exist_ok=True)
            outputs = cmd_plot(None, out, args)
            write_plot_manifest(out, args, outputs, started)
        else:
            cfg = resolve_config(args)
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            outputs = COMMANDS[args.command](cfg, out, args)
            method = args.method if args.command in ("train", "eval") else None
            if args.command in ("train", "eval") and method is None:
                method = "ours"
            write_manifest(out, args.command, cfg, outputs, started, method)
        for p in outputs:
            print(p)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PwlTscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
