"""Command-line front end: ``covgnn <verb> [flags]``.

Verbs: generate-maps, collect, train, eval, compare. Every run is a pure
function of (config file, seed); metric tables are written as CSV. Wall-clock
controller times go to ``timing.csv`` so the reward tables stay byte-stable.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import GreedyController, OpenLoopExpert, OracleController, RecedingHorizonExpert
from .config import ConfigError, ExperimentConfig, load_config, parse_controller
from .env import MODES, node_feature_dim
from .gnn import LINEAR, NONLINEAR, GnnController, PolicyParams, load_checkpoint, save_checkpoint
from .imitation import (
    EvalResult,
    TrainingDivergedError,
    collect_dataset,
    evaluate,
    load_dataset,
    mean_sem,
    save_dataset,
    train_bc,
)
from .scenarios import Scenario
from .spatial_graph import MapFormatError, build_lattice, graph_diameter, random_city, save_map

log = logging.getLogger("covgnn")

METRIC_FIELDS = ["controller", "variant", "k", "mode", "map_size", "n_robots", "episode", "reward"]


# --- configuration ---------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.mode is not None:
        cfg = replace(cfg, episode=replace(cfg.episode, mode=args.mode))
    arch = replace(cfg.arch, node_dim=node_feature_dim(cfg.episode.mode))
    if args.k is not None:
        arch = replace(arch, k=args.k)
    if args.variant is not None:
        arch = replace(arch, variant=args.variant)
    cfg = replace(cfg, arch=arch)
    if getattr(args, "controller", None):
        cfg = replace(cfg, eval=replace(cfg.eval, controllers=tuple(args.controller.split(","))))
    if getattr(args, "checkpoint", None):
        cfg = replace(cfg, eval=replace(cfg.eval, checkpoint=args.checkpoint))
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    if getattr(args, "episodes", None) is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, n_episodes=args.episodes))
    return cfg.validate(controllers=args.verb in ("eval", "compare"))


def out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def fmt(x: float) -> str:
    return f"{x:.6f}"


# --- controllers -------------------------------------------------------------


class ControllerSpec:
    """A named controller factory plus the labels that go into metric rows."""

    def __init__(self, spec: str, cfg: ExperimentConfig, k_override: int | None = None):
        self.spec = spec
        self.name, arg = parse_controller(spec)
        self.variant = "-"
        self.k = "-"
        self.params: PolicyParams | None = None
        self.greedy_k: int | None = None
        if self.name == "gnn":
            path = arg or cfg.eval.checkpoint
            self.params = load_checkpoint(path)
            arch = self.params.arch
            if arch.node_dim != node_feature_dim(cfg.episode.mode):
                raise ConfigError(f"{path} was trained for a different mode than {cfg.episode.mode!r}")
            if k_override is not None and k_override != arch.k:
                raise ConfigError(f"--k {k_override} disagrees with checkpoint {path} (K={arch.k})")
            self.variant, self.k = arch.variant, str(arch.k)
        elif self.name == "greedy":
            self.greedy_k = int(arg) if arg else (k_override if k_override is not None else cfg.eval.greedy_k)
            self.k = "all" if self.greedy_k is None else str(self.greedy_k)
        elif self.name == "expert-rh":
            self.k = str(cfg.expert.plan_horizon)
        self.cfg = cfg

    def make(self):
        cfg = self.cfg
        if self.name == "gnn":
            return GnnController(self.params, cfg.eval.selection, seed=cfg.seed)
        if self.name == "greedy":
            return GreedyController(self.greedy_k)
        if self.name == "expert-rh":
            return RecedingHorizonExpert(cfg.expert, seed=cfg.seed)
        if self.name == "expert-openloop":
            return OpenLoopExpert(cfg.expert, seed=cfg.seed)
        return OracleController()

    def rows(self, result: EvalResult, mode: str, n_robots: int) -> list[dict]:
        return [
            {
                "controller": self.spec,
                "variant": self.variant,
                "k": self.k,
                "mode": mode,
                "map_size": size,
                "n_robots": n_robots,
                "episode": ep,
                "reward": reward,
            }
            for ep, (reward, size) in enumerate(zip(result.rewards, result.map_sizes))
        ]


def run_eval(spec: ControllerSpec, scenario: Scenario, cfg: ExperimentConfig, n_robots: int | None = None):
    n = cfg.episode.n_robots if n_robots is None else n_robots
    log.info("evaluating %s on %d episodes (%d robots)", spec.spec, cfg.eval.n_episodes, n)
    res = evaluate(spec.make, scenario, cfg.eval.n_episodes, cfg.seed, n_robots=n, workers=cfg.eval.workers)
    return res, spec.rows(res, cfg.episode.mode, n)


def summary_row(spec: ControllerSpec, res: EvalResult, extra: dict | None = None) -> dict:
    row = {"controller": spec.spec, "variant": spec.variant, "k": spec.k}
    row.update(extra or {})
    row.update({"episodes": len(res.rewards), "mean": fmt(res.mean), "sem": fmt(res.sem)})
    return row


def timing_rows(spec: ControllerSpec, res: EvalResult, n_robots: int) -> list[dict]:
    return [
        {"controller": spec.spec, "n_robots": n_robots, "episode": ep, "time_ms": f"{t:.3f}"}
        for ep, t in enumerate(res.times_ms)
    ]


# --- verbs -----------------------------------------------------------------


def cmd_generate_maps(cfg: ExperimentConfig) -> None:
    m = cfg.map
    folder = out_dir(cfg) / "maps"
    folder.mkdir(exist_ok=True)
    for i in range(cfg.generate.count):
        rng = np.random.default_rng([cfg.seed, i])
        om = random_city(rng, m.width, m.height, m.n_rects, m.rect_size, m.n_discs, m.disc_radius)
        graph = build_lattice(om, m.spacing)
        path = folder / f"map_{i:03d}.json"
        save_map(graph, path)
        print(f"{path.name}: nodes={graph.n} edges={graph.n_edges} diameter={graph_diameter(graph)}")


def cmd_collect(cfg: ExperimentConfig) -> None:
    scenario = Scenario(cfg.map, cfg.episode)
    n = cfg.collect.n_trajectories
    ds = collect_dataset(
        scenario, n, cfg.expert, cfg.seed, progress=lambda ep: log.info("trajectory %d/%d", ep + 1, n)
    )
    ds.header.update({"mode": cfg.episode.mode, "n_robots": cfg.episode.n_robots, "horizon": cfg.episode.horizon})
    path = out_dir(cfg) / "dataset.jsonl"
    save_dataset(ds, path)
    labeled = sum(int((r.labels >= 0).sum()) for r in ds.records)
    print(f"wrote {path}: {len(ds)} records, {labeled} labeled robot moves")


def cmd_train(cfg: ExperimentConfig) -> None:
    out = out_dir(cfg)
    path = Path(cfg.dataset) if cfg.dataset else out / "dataset.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run 'collect' first or pass --dataset")
    ds = load_dataset(path)
    if ds.header.get("mode", cfg.episode.mode) != cfg.episode.mode:
        raise ConfigError(f"dataset {path} was collected in {ds.header['mode']!r} mode")
    tcfg = replace(cfg.train, seed=cfg.seed)

    def report(epoch: int, train: float, val: float) -> None:
        log.info("epoch %d/%d train %.4f val %.4f", epoch + 1, tcfg.epochs, train, val)

    result = train_bc(ds, cfg.arch, tcfg, on_epoch=report)
    save_checkpoint(result.params, out / "checkpoint.json", extra={"train": tcfg.__dict__, "dataset": str(path)})
    write_csv(
        out / "loss.csv",
        ["epoch", "train_loss", "val_loss"],
        [
            {"epoch": e, "train_loss": fmt(t), "val_loss": fmt(v)}
            for e, (t, v) in enumerate(zip(result.epoch_train, result.epoch_val))
        ],
    )
    val = result.epoch_val[-1]
    print(
        f"wrote {out / 'checkpoint.json'} ({result.params.n_parameters()} parameters, "
        f"{cfg.arch.variant} K={cfg.arch.k}); final train loss {result.epoch_train[-1]:.4f}, "
        + ("no validation episodes" if np.isnan(val) else f"val loss {val:.4f}")
    )


def cmd_eval(cfg: ExperimentConfig, k_override: int | None) -> None:
    out = out_dir(cfg)
    scenario = Scenario(cfg.map, cfg.episode)
    specs = [ControllerSpec(s, cfg, k_override) for s in cfg.eval.controllers]
    metrics, timing, summary = [], [], []
    n = cfg.episode.n_robots
    for spec in specs:
        res, rows = run_eval(spec, scenario, cfg)
        metrics += rows
        timing += timing_rows(spec, res, n)
        summary.append(summary_row(spec, res))
        print(
            f"{spec.spec:>24s}  mean {res.mean:8.3f}  sem {res.sem:6.3f}  "
            f"time/episode {np.mean(res.times_ms):9.2f} ms"
        )
    write_csv(out / "metrics.csv", METRIC_FIELDS, metrics)
    write_csv(out / "summary.csv", ["controller", "variant", "k", "episodes", "mean", "sem"], summary)

    sweep = []
    for k in cfg.eval.k_sweep:
        spec = ControllerSpec(f"greedy@{k}", cfg)
        res, _ = run_eval(spec, scenario, cfg)
        sweep.append(summary_row(spec, res))
    for path in cfg.eval.sweep_checkpoints:
        spec = ControllerSpec(f"gnn@{path}", cfg)
        res, _ = run_eval(spec, scenario, cfg)
        sweep.append(summary_row(spec, res))
    if sweep:
        write_csv(out / "sweep.csv", ["controller", "variant", "k", "episodes", "mean", "sem"], sweep)

    teams = []
    for size in cfg.eval.team_sizes:
        for spec in specs:
            res, _ = run_eval(spec, scenario, cfg, n_robots=size)
            teams.append(summary_row(spec, res, {"n_robots": size}))
            timing += timing_rows(spec, res, size)
    if teams:
        write_csv(out / "teams.csv", ["controller", "variant", "k", "n_robots", "episodes", "mean", "sem"], teams)
    write_csv(out / "timing.csv", ["controller", "n_robots", "episode", "time_ms"], timing)
    print(f"wrote {out / 'metrics.csv'} ({len(metrics)} rows) and {out / 'summary.csv'}")


def cmd_compare(cfg: ExperimentConfig, k_override: int | None) -> None:
    out = out_dir(cfg)
    scenario = Scenario(cfg.map, cfg.episode)
    specs = [ControllerSpec(s, cfg, k_override) for s in cfg.eval.controllers]
    if len(specs) < 2:
        raise ConfigError("compare needs at least two controllers")
    rewards = []
    metrics = []
    for spec in specs:
        res, rows = run_eval(spec, scenario, cfg)
        rewards.append(np.asarray(res.rewards))
        metrics += rows
    report = []
    for i, a in enumerate(specs):
        for j in range(i + 1, len(specs)):
            b = specs[j]
            diff = rewards[i] - rewards[j]
            mean, sem = mean_sem(diff)
            report.append(
                {
                    "controller_a": a.spec,
                    "controller_b": b.spec,
                    "episodes": len(diff),
                    "mean_diff": fmt(mean),
                    "sem_diff": fmt(sem),
                    "a_wins": int((diff > 0).sum()),
                    "ties": int((diff == 0).sum()),
                    "b_wins": int((diff < 0).sum()),
                }
            )
            print(f"{a.spec} - {b.spec}: {mean:+.3f} +- {sem:.3f} over {len(diff)} paired episodes")
    write_csv(out / "metrics.csv", METRIC_FIELDS, metrics)
    write_csv(out / "compare.csv", list(report[0]), report)


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="unsigned 64-bit run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--k", type=int, help="receptive field / greedy hop limit")
    common.add_argument("--variant", choices=(LINEAR, NONLINEAR))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="covgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("generate-maps", parents=[common], help="write random obstacle-city maps")
    sub.add_parser("collect", parents=[common], help="roll out the expert and save a dataset")
    p = sub.add_parser("train", parents=[common], help="behavior-clone a GNN policy")
    p.add_argument("--dataset")
    for verb in ("eval", "compare"):
        p = sub.add_parser(verb, parents=[common], help=f"{verb} controllers on matched-seed episodes")
        p.add_argument("--controller", help="comma-separated controller specs, e.g. gnn,greedy@3,expert-rh")
        p.add_argument("--checkpoint")
        p.add_argument("--episodes", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        if args.verb == "generate-maps":
            cmd_generate_maps(cfg)
        elif args.verb == "collect":
            cmd_collect(cfg)
        elif args.verb == "train":
            cmd_train(cfg)
        elif args.verb == "eval":
            cmd_eval(cfg, args.k)
        else:
            cmd_compare(cfg, args.k)
    except (ConfigError, MapFormatError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"covgnn {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
