"""Expert dataset collection, behavior cloning, and policy evaluation."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .baselines import ExpertConfig, OpenLoopExpert
from .env import STAY, Controller, GraphSignal, WorldState, batch_signals, observe, rollout, step
from .gnn import ArchConfig, PolicyParams, action_logits, forward, init_params
from .scenarios import EVAL_STREAM, Scenario

log = logging.getLogger(__name__)

DATASET_FORMAT = "covgnn-dataset"
DATASET_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class Record:
    signal: GraphSignal
    labels: np.ndarray  # candidate slot per robot, -1 for stay/blocked
    episode: int
    timestep: int
    seed: int


@dataclass
class Dataset:
    records: list[Record] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def episodes(self) -> list[int]:
        return sorted({r.episode for r in self.records})


def label_actions(signal: GraphSignal, action) -> np.ndarray:
    labels = np.full(signal.n_robots, -1, dtype=np.int64)
    for r, target in enumerate(action):
        if target == STAY:
            continue
        hit = np.flatnonzero(signal.action_mask[r] & (signal.action_targets[r] == target))
        if len(hit):
            labels[r] = hit[0]
    return labels


def collect_dataset(
    scenario: Scenario,
    n_trajectories: int,
    expert: ExpertConfig = ExpertConfig(),
    seed: int = 0,
    progress: Callable[[int], None] | None = None,
) -> Dataset:
    """Roll out the open-loop expert and log (observation, expert move) pairs.

    The expert always plans on the full map; in exploration mode the stored
    observation is the partial one.
    """
    ds = Dataset(header={"n_trajectories": n_trajectories, "seed": seed, "expert": asdict(expert)})
    nbrs = None
    for ep in range(n_trajectories):
        state = scenario.episode(seed, ep)
        nbrs = state.graph.neighbors
        ctrl = OpenLoopExpert(expert, seed=seed * 1_000_003 + ep)
        ctrl.reset(state)
        ctrl.plan.check(state)
        while state.timestep < state.horizon:
            sig = observe(state)
            action = ctrl(state)
            for i, (p, t) in enumerate(zip(state.robot_at, action)):
                if t != STAY and t not in nbrs[p]:
                    raise AssertionError(f"expert moved robot {i} from {p} to non-adjacent {t}")
            ds.records.append(Record(sig, label_actions(sig, action), ep, state.timestep, seed))
            state, _ = step(state, action)
        if progress is not None:
            progress(ep)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION, **ds.header}) + "\n")
        for r in ds.records:
            fh.write(
                json.dumps(
                    {
                        "episode": r.episode,
                        "timestep": r.timestep,
                        "seed": r.seed,
                        "labels": r.labels.tolist(),
                        "signal": r.signal.to_dict(),
                    }
                )
                + "\n"
            )


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset schema {header.get('format')} v{header.get('version')}")
        header = {k: v for k, v in header.items() if k not in ("format", "version")}
        records = []
        for n, line in enumerate(fh, start=2):
            try:
                d = json.loads(line)
                sig = GraphSignal.from_dict(d["signal"])
                labels = np.asarray(d["labels"], dtype=np.int64)
                rec = Record(sig, labels, int(d["episode"]), int(d["timestep"]), int(d["seed"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad record ({exc})") from exc
            if len(labels) != sig.n_robots:
                raise ValueError(f"{path}:{n}: label count does not match robots")
            ok = labels < 0
            ok[~ok] = sig.action_mask[np.flatnonzero(~ok), labels[~ok]]
            if not ok.all():
                raise ValueError(f"{path}:{n}: label on a masked slot")
            records.append(rec)
    return Dataset(records, header)


# --- training ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 200
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.decay_every) <= 0 or self.lr <= 0 or self.decay <= 0:
            raise ValueError("training hyperparameters must be positive")


@dataclass
class TrainResult:
    params: PolicyParams
    batch_loss: list[float]
    epoch_train: list[float]
    epoch_val: list[float]


def batch_loss(params: PolicyParams, records: list[Record]) -> ad.Tensor:
    """Mean over records of the mean cross-entropy over that record's labeled robots."""
    big = batch_signals([r.signal for r in records])
    labels = np.concatenate([r.labels for r in records])
    weights = np.concatenate(
        [np.full(len(r.labels), 1.0 / max(1, int((r.labels >= 0).sum()))) for r in records]
    )
    keep = labels >= 0
    weights = weights[keep] / len(records)
    ids = np.where(big.action_mask, big.action_edge_ids, 0)[keep]
    # only candidate edges of labeled robots need logits
    wanted, inverse = np.unique(ids, return_inverse=True)
    logits = forward(params, big, output_edges=wanted)
    slots = ad.take(logits, inverse.reshape(ids.shape))
    return ad.masked_cross_entropy(slots, big.action_mask[keep], labels[keep], weights)


def _labeled(records: Iterable[Record]) -> list[Record]:
    return [r for r in records if (r.labels >= 0).any()]


def split_dataset(ds: Dataset, val_fraction: float, seed: int) -> tuple[list[Record], list[Record]]:
    eps = ds.episodes()
    rng = np.random.default_rng(seed)
    n_val = int(round(val_fraction * len(eps)))
    val_eps = set(rng.permutation(eps)[:n_val].tolist()) if n_val else set()
    train = _labeled(r for r in ds.records if r.episode not in val_eps)
    val = _labeled(r for r in ds.records if r.episode in val_eps)
    return train, val


def mean_loss(params: PolicyParams, records: list[Record], batch_size: int = 256) -> float:
    if not records:
        return float("nan")
    frozen = params.frozen()
    tot = 0.0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        tot += float(batch_loss(frozen, chunk).value) * len(chunk)
    return tot / len(records)


def train_bc(
    ds: Dataset,
    arch: ArchConfig,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    train, val = split_dataset(ds, cfg.val_fraction, cfg.seed)
    if not train:
        raise ValueError("dataset has no labeled training records")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, rng)
    named = params.named_tensors()
    opt = ad.AdamState(lr=cfg.lr, decay=cfg.decay, decay_every=cfg.decay_every)
    result = TrainResult(params, [], [], [])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        seen = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            for t in named.values():
                t.zero_grad()
            try:
                loss = batch_loss(params, batch)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite forward pass at epoch {epoch}, step {opt.step}, lr {opt.current_lr():.3g}"
                ) from exc
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss {value} at epoch {epoch}, step {opt.step}")
            loss.backward()
            ad.adam_step(opt, named, {k: t.grad for k, t in named.items() if t.grad is not None})
            result.batch_loss.append(value)
            seen += value * len(batch)
        result.epoch_train.append(seen / len(train))
        result.epoch_val.append(mean_loss(params, val))
        if on_epoch is not None:
            on_epoch(epoch, result.epoch_train[-1], result.epoch_val[-1])
        log.debug("epoch %d train %.4f val %.4f", epoch, result.epoch_train[-1], result.epoch_val[-1])
    return result


def prediction_accuracy(params: PolicyParams, records: list[Record]) -> tuple[float, float]:
    """(argmax accuracy on labeled robots, accuracy of always picking the most common slot)."""
    frozen = params.frozen()
    hits = total = 0
    slot_counts = np.zeros(4, dtype=np.int64)
    for r in records:
        a = action_logits(forward(frozen, r.signal).value, r.signal)
        for robot, lab in enumerate(r.labels):
            if lab < 0:
                continue
            total += 1
            hits += int(np.argmax(a[robot]) == lab)
            slot_counts[lab] += 1
    if total == 0:
        return float("nan"), float("nan")
    return hits / total, slot_counts.max() / total


# --- evaluation ----------------------------------------------------------


@dataclass
class EvalResult:
    mean: float
    sem: float
    rewards: list[int]
    times_ms: list[float]
    map_sizes: list[int] = field(default_factory=list)


def mean_sem(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    sem = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), sem


class _Timed:
    def __init__(self, inner: Controller):
        self.inner = inner
        self.elapsed = 0.0

    def reset(self, state: WorldState) -> None:
        t = time.perf_counter()
        if hasattr(self.inner, "reset"):
            self.inner.reset(state)
        self.elapsed += time.perf_counter() - t

    def __call__(self, state: WorldState):
        t = time.perf_counter()
        out = self.inner(state)
        self.elapsed += time.perf_counter() - t
        return out


def _episode(make_controller, scenario: Scenario, seed: int, ep: int, n_robots, horizon) -> tuple[int, float, int]:
    state = scenario.episode(seed, ep, n_robots=n_robots, stream=EVAL_STREAM)
    if horizon is not None:
        state.horizon = horizon
    ctrl = _Timed(make_controller())
    total, _ = rollout(state, ctrl)
    return int(total), ctrl.elapsed * 1000.0, state.graph.n


def evaluate(
    make_controller: Callable[[], Controller],
    scenario: Scenario,
    n_episodes: int,
    seed: int = 0,
    n_robots: int | None = None,
    horizon: int | None = None,
    workers: int = 1,
) -> EvalResult:
    """Mean reward and SEM over matched-seed episodes; times cover controller calls only.

    With ``workers > 1`` episodes run in a process pool (``make_controller``
    must then be picklable). Results are gathered in episode order, so rewards
    do not depend on the worker count.
    """
    eps = range(n_episodes)
    args = (make_controller, scenario, seed)
    if workers > 1 and n_episodes > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_episode, *zip(*[(*args, ep, n_robots, horizon) for ep in eps])))
    else:
        out = [_episode(*args, ep, n_robots, horizon) for ep in eps]
    rewards = [r for r, _, _ in out]
    mean, sem = mean_sem(rewards)
    return EvalResult(mean, sem, rewards, [t for _, t, _ in out], [n for _, _, n in out])
