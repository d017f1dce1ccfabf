"""Reward tables behind the coverage, exploration, diameter and transfer trends.

Datasets and models come from the same content-addressed cache as the
acceptance suite, so running this after ``pytest`` only evaluates.

    python3 scripts/trends.py --episodes 100 --out runs/trends
"""

import argparse
import csv
import dataclasses
import logging
from pathlib import Path

from covgnn.baselines import ExpertConfig, GreedyController, RecedingHorizonExpert
from covgnn.env import COVERAGE, EXPLORATION
from covgnn.gnn import LINEAR, NONLINEAR, ArchConfig, GnnController
from covgnn.imitation import TrainConfig, evaluate
from covgnn.scenarios import EpisodeConfig, MapConfig, Scenario
from covgnn.study import ArtifactCache, Setup

DESK_MAP = MapConfig()
DESK_EPISODE = EpisodeConfig(n_robots=2, horizon=25)
WIDE_MAP = dataclasses.replace(DESK_MAP, submap_size=150, min_diameter=20)
LARGE_MAP = dataclasses.replace(DESK_MAP, width=300.0, height=300.0, n_rects=60, n_discs=20, submap_size=None)
RH = ExpertConfig(replan_moves=300, plan_horizon=10)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--transfer-episodes", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--ks", default="1,3,7", help="receptive fields to train")
    ap.add_argument("--seed", type=int, default=2024, help="evaluation seed")
    ap.add_argument("--cache", default=".cache/acceptance")
    ap.add_argument("--out", default="runs/trends")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cache = ArtifactCache(args.cache)
    train = TrainConfig(epochs=args.epochs)
    ks = [int(k) for k in args.ks.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def run(study, label, make, scenario, n, **kw):
        res = evaluate(make, scenario, n, args.seed, **kw)
        rows.append({"study": study, "controller": label, "n_robots": kw.get("n_robots", scenario.ep_cfg.n_robots),
                     "episodes": n, "mean": f"{res.mean:.6f}", "sem": f"{res.sem:.6f}"})
        print(f"{study:12s} {label:22s} {res.mean:7.2f} +- {res.sem:.2f}")

    for mode in (COVERAGE, EXPLORATION):
        setup = Setup(DESK_MAP, dataclasses.replace(DESK_EPISODE, mode=mode), ExpertConfig(max_moves=3000), 200, 1)
        sc = setup.scenario()
        run(f"desk-{mode}", "greedy", GreedyController, sc, args.episodes)
        run(f"desk-{mode}", "expert-rh", lambda: RecedingHorizonExpert(RH), sc, args.episodes)
        models = {k: cache.policy(setup, ArchConfig(variant=NONLINEAR, k=k), train) for k in ks}
        for k, params in models.items():
            run(f"desk-{mode}", f"gnn K={k}", lambda p=params: GnnController(p), sc, args.episodes)
        lin = cache.policy(setup, ArchConfig(variant=LINEAR, k=max(ks)), train)
        run(f"desk-{mode}", f"gnn-linear K={max(ks)}", lambda: GnnController(lin), sc, args.episodes)
        if mode == COVERAGE:
            wide = Scenario(WIDE_MAP, DESK_EPISODE)
            for k, params in models.items():
                run("diameter>=20", f"gnn K={k}", lambda p=params: GnnController(p), wide, args.episodes)
        big = Scenario(LARGE_MAP, dataclasses.replace(DESK_EPISODE, mode=mode, horizon=50))
        k = max(ks)
        params = models[k]
        for n_robots in (10, 20):
            run(f"transfer-{mode}", f"gnn K={k}", lambda: GnnController(params), big, args.transfer_episodes,
                n_robots=n_robots)
            run(f"transfer-{mode}", f"greedy@{k}", lambda: GreedyController(k), big, args.transfer_episodes,
                n_robots=n_robots)

    with open(out / "trends.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out / 'trends.csv'}")


if __name__ == "__main__":
    main()
