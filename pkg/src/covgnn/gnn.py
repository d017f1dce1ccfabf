"""Aggregation GNN controller: encode, K graph-network blocks, decode, linear edge head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor
from .env import STAY, GraphSignal, WorldState, observe

LINEAR = "linear"
NONLINEAR = "nonlinear"
CHECKPOINT_FORMAT = "covgnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    variant: str = NONLINEAR
    k: int = 7
    latent: int = 16
    hidden: int = 16
    node_dim: int = 3
    edge_dim: int = 1
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in (LINEAR, NONLINEAR):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.k < 0:
            raise ValueError("receptive field must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class PolicyParams:
    arch: ArchConfig
    mlps: dict[str, MlpParams] = field(default_factory=dict)
    out_w: Tensor | None = None
    out_b: Tensor | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, mlp in self.mlps.items():
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}.w{i}"] = w
                out[f"{name}.b{i}"] = b
        out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        return out

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.named_tensors().values())

    def frozen(self) -> "PolicyParams":
        """Copy whose tensors do not record gradients (fast inference)."""
        mlps = {
            k: MlpParams([Tensor(w.value) for w in m.weights], [Tensor(b.value) for b in m.biases])
            for k, m in self.mlps.items()
        }
        return PolicyParams(self.arch, mlps, Tensor(self.out_w.value), Tensor(self.out_b.value))


def init_params(arch: ArchConfig, rng: np.random.Generator) -> PolicyParams:
    h, d = arch.hidden, arch.latent
    mlps = {"enc_node": ad.init_mlp(rng, arch.node_dim, d, h)}
    if arch.variant == NONLINEAR:
        mlps["enc_edge"] = ad.init_mlp(rng, arch.edge_dim, d, h)
        for i in range(arch.k):
            mlps[f"gn{i}_edge"] = ad.init_mlp(rng, 3 * d, d, h)
            mlps[f"gn{i}_node"] = ad.init_mlp(rng, 2 * d, d, h)
    mlps["dec_edge"] = ad.init_mlp(rng, d, d, h)
    width = (arch.k + 1) * d
    out_w = Tensor(ad.glorot(rng, width, 1), requires_grad=True)
    out_b = Tensor(np.zeros(1), requires_grad=True)
    return PolicyParams(arch, mlps, out_w, out_b)


def gn_block(
    nodes: Tensor,
    edges: Tensor,
    senders,
    receivers,
    variant: str,
    edge_mlp: MlpParams | None = None,
    node_mlp: MlpParams | None = None,
    update_nodes: bool = True,
) -> tuple[Tensor | None, Tensor]:
    """One edge update, receiver-mean aggregation, and node update.

    The linear variant copies sender features onto edges and replaces each
    node by the mean of its incoming edges; the nonlinear variant runs MLPs on
    ``[edge, receiver, sender]`` and ``[aggregate, node]``.
    """
    n = nodes.shape[0]
    snd = ad._as_index(senders, n)
    rcv = ad._as_index(receivers, n)
    if variant == LINEAR:
        new_edges = ad.gather_rows(nodes, snd)
        new_nodes = ad.segment_mean(new_edges, rcv, n) if update_nodes else None
        return new_nodes, new_edges
    d = edges.shape[1]
    w0, b0 = edge_mlp.weights[0], edge_mlp.biases[0]
    # [e, v_r, v_s] @ W0 split by row blocks so node terms are projected before the gather
    pre = ad.linear(edges, ad.slice_rows(w0, 0, d), b0)
    pre = ad.add(pre, ad.gather_rows(ad.matmul(nodes, ad.slice_rows(w0, d, 2 * d)), rcv))
    pre = ad.add(pre, ad.gather_rows(ad.matmul(nodes, ad.slice_rows(w0, 2 * d, 3 * d)), snd))
    new_edges = ad.mlp_forward(edge_mlp, None, first=pre)
    if not update_nodes:
        return None, new_edges
    agg = ad.segment_mean(new_edges, rcv, n)
    new_nodes = ad.mlp_forward(node_mlp, ad.concat([agg, nodes]))
    return new_nodes, new_edges


def forward(
    params: PolicyParams,
    signal: GraphSignal,
    edge_input: np.ndarray | Tensor | None = None,
    node_input: np.ndarray | Tensor | None = None,
    output_edges: np.ndarray | None = None,
) -> Tensor:
    """Edge logits, shape (n_edges, 1), or (len(output_edges), 1) when a subset is requested.

    ``edge_input``/``node_input`` override the spacing-normalized edge features
    and the node features (gradient checks feed Tensors through here).
    """
    arch = params.arch
    n = signal.n_nodes
    snd = ad.Index(signal.senders, n)
    rcv = ad.Index(signal.receivers, n)
    x = signal.node_features if node_input is None else node_input
    nodes = ad.mlp_forward(params.mlps["enc_node"], x if isinstance(x, Tensor) else Tensor(x))
    if arch.variant == NONLINEAR:
        e_in = signal.normalized_edge_features() if edge_input is None else edge_input
        edges = ad.mlp_forward(params.mlps["enc_edge"], e_in if isinstance(e_in, Tensor) else Tensor(e_in))
    else:
        # the linear block never reads edge inputs; stage 0 contributes a constant
        edges = Tensor(np.zeros((signal.n_edges, arch.latent)))
    pick = None if output_edges is None else ad.Index(output_edges, signal.n_edges)
    dec = params.mlps["dec_edge"]

    def decode(e: Tensor) -> Tensor:
        return ad.mlp_forward(dec, e if pick is None else ad.gather_rows(e, pick))

    stages = [decode(edges)]
    for i in range(arch.k):
        nodes, edges = gn_block(
            nodes, edges, snd, rcv, arch.variant,
            params.mlps.get(f"gn{i}_edge"), params.mlps.get(f"gn{i}_node"),
            update_nodes=i < arch.k - 1,
        )
        stages.append(decode(edges))
    feats = ad.concat(stages) if len(stages) > 1 else stages[0]
    return ad.linear(feats, params.out_w, params.out_b)


def action_logits(logits: np.ndarray, signal: GraphSignal) -> np.ndarray:
    """(n_robots, 4) logits of each robot's candidate moves; padding is -inf."""
    flat = np.asarray(logits).reshape(-1)
    out = np.full(signal.action_mask.shape, -np.inf)
    out[signal.action_mask] = flat[signal.action_edge_ids[signal.action_mask]]
    return out


def select_actions(
    logits: np.ndarray,
    signal: GraphSignal,
    mode: str = "argmax",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Pick one candidate waypoint per robot, or STAY when it has none.

    Argmax ties resolve to the smallest target id since slots are sorted.
    """
    a = action_logits(logits, signal)
    out = []
    for r in range(signal.n_robots):
        valid = signal.action_mask[r]
        if not valid.any():
            out.append(STAY)
            continue
        if mode == "argmax":
            slot = int(np.argmax(a[r]))
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            z = a[r][valid] / temperature
            p = np.exp(z - z.max())
            p /= p.sum()
            slot = int(np.flatnonzero(valid)[rng.choice(len(p), p=p)])
        else:
            raise ValueError(f"unknown selection mode {mode!r}")
        out.append(int(signal.action_targets[r, slot]))
    return out


class GnnController:
    """Closed-loop controller wrapping a trained policy."""

    def __init__(self, params: PolicyParams, mode: str = "argmax", seed: int = 0):
        self.params = params.frozen()
        self.mode = mode
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, state: WorldState) -> None:
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, state: WorldState) -> list[int]:
        sig = observe(state)
        logits = forward(self.params, sig).value
        return select_actions(logits, sig, self.mode, self.params.arch.temperature, self.rng)


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(params: PolicyParams, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "tensors": {
            name: {"shape": list(t.value.shape), "values": t.value.ravel().tolist()}
            for name, t in params.named_tensors().items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    arch = ArchConfig(**doc["arch"])
    params = init_params(arch, np.random.default_rng(0))
    expected = params.named_tensors()
    stored = doc["tensors"]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unknown = sorted(set(stored) - set(expected))
        raise ValueError(f"{path}: tensor names disagree with arch (missing {missing}, unknown {unknown})")
    for name, t in expected.items():
        shape = tuple(stored[name]["shape"])
        if shape != t.value.shape:
            raise ValueError(f"{path}: {name} has shape {shape}, arch expects {t.value.shape}")
        t.value = np.asarray(stored[name]["values"], dtype=np.float64).reshape(shape)
    return params
