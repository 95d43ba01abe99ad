"""Attention encoder-decoder construction policy.

The batched environment here mirrors :mod:`clvrp.routing` masking rules on
tensors: rows are laid out as ``(instances, starts)`` and every instance in a
batch has the same size.
"""
from __future__ import annotations

import copy
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import instances as inst_mod
from .instances import Problem, VrpInstance

CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericError(FloatingPointError):
    pass


class InvalidConfigError(ValueError):
    pass


class InfeasibleReplayError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class PolicyConfig:
    problem: str = "tsp"
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 3
    feedforward_dim: int = 256
    logit_clip: float = 10.0
    dtype: str = "float32"

    def __post_init__(self):
        self.problem = Problem.parse(self.problem).value
        if self.embed_dim % self.n_heads:
            raise InvalidConfigError("embed_dim must be divisible by n_heads")
        if self.dtype not in _DTYPES:
            raise InvalidConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def kind(self) -> Problem:
        return Problem(self.problem)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


# --- batched instances and construction state -------------------------------

@dataclass
class InstanceBatch:
    """Tensor view of same-size instances. ``demands`` is 0 at the depot."""

    kind: Problem
    coords: torch.Tensor  # (B, n, 2)
    demands: torch.Tensor | None = None  # (B, n)
    capacity: torch.Tensor | None = None  # (B,)
    source: list | None = None

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[1]

    @property
    def n_customers(self) -> int:
        return self.n_nodes - (1 if self.kind is Problem.CVRP else 0)

    @classmethod
    def from_arrays(cls, kind, coords, demands=None, capacity=None, dtype=torch.float64, source=None):
        kind = Problem.parse(kind)
        c = torch.as_tensor(np.asarray(coords), dtype=dtype)
        if kind is Problem.TSP:
            return cls(kind, c, source=source)
        d = torch.as_tensor(np.asarray(demands), dtype=dtype)
        cap = torch.as_tensor(np.broadcast_to(np.asarray(capacity), (c.shape[0],)).copy(), dtype=dtype)
        return cls(kind, c, d, cap, source=source)

    @classmethod
    def from_instances(cls, instances: Sequence[VrpInstance], dtype=torch.float64):
        coords, demands, capacity = inst_mod.stack(instances)
        return cls.from_arrays(instances[0].kind, coords, demands, capacity, dtype, list(instances))

    def to_instances(self) -> list[VrpInstance]:
        if self.source is not None:
            return list(self.source)
        out = []
        for b in range(self.batch_size):
            coords = self.coords[b].detach().double().numpy()
            if self.kind is Problem.TSP:
                out.append(VrpInstance(Problem.TSP, coords))
            else:
                dem = self.demands[b, 1:].detach().round().long().numpy()
                out.append(VrpInstance(Problem.CVRP, coords, dem, int(round(float(self.capacity[b])))))
        return out

    def augmented(self, t: int) -> "InstanceBatch":
        return InstanceBatch(self.kind, inst_mod.transform_coords(self.coords, t),
                             self.demands, self.capacity, None)

    def repeat(self, times: int) -> "InstanceBatch":
        """Tile the batch ``times`` times along the instance axis (block-major)."""
        rep = lambda t: None if t is None else t.repeat((times,) + (1,) * (t.dim() - 1))
        return InstanceBatch(self.kind, rep(self.coords), rep(self.demands), rep(self.capacity))


class BatchEnv:
    """Construction state for ``(B, S)`` rows; same rules as :mod:`clvrp.routing`."""

    def __init__(self, batch: InstanceBatch, starts: torch.Tensor):
        self.batch = batch
        B, S = starts.shape
        n = batch.n_nodes
        self.B, self.S, self.n = B, S, n
        self.rows = torch.arange(B)[:, None].expand(B, S)
        self.cols = torch.arange(S)[None, :].expand(B, S)
        self.visited = torch.zeros(B, S, n, dtype=torch.bool)
        self.done = torch.zeros(B, S, dtype=torch.bool)
        self.first = starts.clone()
        self.current = starts.clone()
        self.visited[self.rows, self.cols, starts] = True
        if batch.kind is Problem.CVRP:
            self.visited[..., 0] = False
            cap = batch.capacity[:, None].expand(B, S)
            self.remaining = cap - batch.demands[self.rows, starts]
            self.n_visited = torch.ones(B, S, dtype=torch.long)
        else:
            self.remaining = None
            self.done |= n == 1

    def mask(self) -> torch.Tensor:
        """Feasible actions; finished CVRP rows may only idle at the depot."""
        if self.batch.kind is Problem.TSP:
            return ~self.visited
        dem = self.batch.demands[:, None, :]
        m = (~self.visited) & (dem <= self.remaining[..., None] + 1e-9)
        m[..., 0] = self.current != 0
        m[..., 0] |= self.done
        m[..., 1:] &= ~self.done[..., None]
        return m

    def step(self, action: torch.Tensor) -> torch.Tensor:
        """Apply actions; returns the boolean of rows for which this was a real decision."""
        active = ~self.done
        self.visited[self.rows, self.cols, action] |= active
        self.current = torch.where(active, action, self.current)
        if self.batch.kind is Problem.TSP:
            self.done = self.visited.all(-1)
        else:
            self.visited[..., 0] = False
            at_depot = action == 0
            cap = self.batch.capacity[:, None].expand(self.B, self.S)
            used = self.batch.demands[self.rows, action]
            self.remaining = torch.where(at_depot, cap, self.remaining - used)
            self.n_visited = self.n_visited + (active & ~at_depot).long()
            self.done = self.done | (at_depot & (self.n_visited == self.n - 1))
        return active

    def all_done(self) -> bool:
        return bool(self.done.all())


def start_nodes(batch: InstanceBatch, n_starts: int) -> torch.Tensor:
    """First-node choices for each row: the first ``n_starts`` customers."""
    n_cust = batch.n_customers
    if n_starts < 1 or n_starts > n_cust:
        raise InvalidConfigError(f"n_starts must be in 1..{n_cust}, got {n_starts}")
    offset = 1 if batch.kind is Problem.CVRP else 0
    return (torch.arange(n_starts) + offset)[None, :].expand(batch.batch_size, n_starts).clone()


# --- network ----------------------------------------------------------------

class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.heads = heads
        self.Wq = nn.Linear(d, d, bias=False)
        self.Wk = nn.Linear(d, d, bias=False)
        self.Wv = nn.Linear(d, d, bias=False)
        self.Wo = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, h):
        B, n, d = h.shape
        H = self.heads
        q = self.Wq(h).view(B, n, H, -1)
        k = self.Wk(h).view(B, n, H, -1)
        v = self.Wv(h).view(B, n, H, -1)
        att = torch.einsum("bihk,bjhk->bhij", q, k) / math.sqrt(q.shape[-1])
        out = torch.einsum("bhij,bjhk->bihk", att.softmax(-1), v).reshape(B, n, d)
        h = self.norm1(h + self.Wo(out))
        return self.norm2(h + self.ff2(F.relu(self.ff1(h))))


@dataclass
class Encoded:
    nodes: torch.Tensor  # (B, n, d)
    graph: torch.Tensor  # (B, d)
    glimpse_k: torch.Tensor  # (B, n, H, dk)
    glimpse_v: torch.Tensor
    pointer_k: torch.Tensor  # (B, n, d)
    # context query split per input block: graph (B, d); per-node blocks (B, n, d)
    q_graph: torch.Tensor
    q_first: torch.Tensor | None
    q_current: torch.Tensor


class AttentionPolicy(nn.Module):
    def __init__(self, config: PolicyConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d, H = config.embed_dim, config.n_heads
        if config.kind is Problem.TSP:
            self.embed = nn.Linear(2, d)
            ctx = 3 * d
        else:
            self.embed_depot = nn.Linear(2, d)
            self.embed = nn.Linear(3, d)
            ctx = 2 * d + 1
        self.layers = nn.ModuleList(
            EncoderLayer(d, H, config.feedforward_dim) for _ in range(config.n_encoder_layers)
        )
        self.Wq_context = nn.Linear(ctx, d, bias=False)
        self.Wk_glimpse = nn.Linear(d, d, bias=False)
        self.Wv_glimpse = nn.Linear(d, d, bias=False)
        self.Wo_glimpse = nn.Linear(d, d)
        self.Wk_pointer = nn.Linear(d, d, bias=False)
        self.to(config.torch_dtype)
        self.reset_parameters(seed)

    @property
    def kind(self) -> Problem:
        return self.config.kind

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def reset_parameters(self, seed: int) -> None:
        """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight; norms start at (1, 0)."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, mod in self.named_modules():
                if isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                elif isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    for p in mod.parameters():
                        p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)

    def encode(self, batch: InstanceBatch) -> Encoded:
        if batch.kind is not self.kind:
            raise InvalidConfigError(f"policy solves {self.kind.value}, got {batch.kind.value}")
        coords = batch.coords.to(self.dtype)
        if self.kind is Problem.TSP:
            h = self.embed(coords)
        else:
            feat = torch.cat([coords, (batch.demands / batch.capacity[:, None])[..., None].to(self.dtype)], -1)
            h = torch.cat([self.embed_depot(coords[:, :1]), self.embed(feat[:, 1:])], 1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
        B, n, d = h.shape
        H = self.config.n_heads
        graph = h.mean(1)
        W = self.Wq_context.weight
        if self.kind is Problem.TSP:
            q_first, q_current = h @ W[:, d : 2 * d].T, h @ W[:, 2 * d :].T
        else:
            q_first, q_current = None, h @ W[:, d : 2 * d].T
        return Encoded(
            nodes=h,
            graph=graph,
            glimpse_k=self.Wk_glimpse(h).view(B, n, H, -1),
            glimpse_v=self.Wv_glimpse(h).view(B, n, H, -1),
            pointer_k=self.Wk_pointer(h),
            q_graph=graph @ W[:, :d].T,
            q_first=q_first,
            q_current=q_current,
        )

    def _query(self, enc: Encoded, env: BatchEnv) -> torch.Tensor:
        """Wq_context applied to the decoder context, assembled from per-node pieces.

        TSP context is graph | first | current; CVRP is graph | current | remaining/capacity.
        """
        q = enc.q_graph[:, None, :] + enc.q_current[env.rows, env.current]
        if self.kind is Problem.TSP:
            return q + enc.q_first[env.rows, env.first]
        rem = (env.remaining / env.batch.capacity[:, None]).to(self.dtype)
        return q + rem[..., None] * self.Wq_context.weight[:, -1]

    def log_probs(self, enc: Encoded, env: BatchEnv, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Masked log-softmax over nodes for every row; -inf at masked actions."""
        if mask is None:
            mask = env.mask()
        if not mask.any(-1).all():
            raise RuntimeError("decoder called on a state with no feasible action")
        B, S = env.B, env.S
        H = self.config.n_heads
        q = self._query(enc, env).view(B, S, H, -1)
        score = torch.einsum("bshk,bnhk->bhsn", q, enc.glimpse_k) / math.sqrt(q.shape[-1])
        score = score.masked_fill(~mask[:, None], float("-inf"))
        glimpse = torch.einsum("bhsn,bnhk->bshk", score.softmax(-1), enc.glimpse_v).reshape(B, S, -1)
        glimpse = self.Wo_glimpse(glimpse)
        logits = torch.einsum("bsd,bnd->bsn", glimpse, enc.pointer_k) / math.sqrt(glimpse.shape[-1])
        logits = self.config.logit_clip * torch.tanh(logits)
        return logits.masked_fill(~mask, float("-inf")).log_softmax(-1)

    def decode_step(self, enc: Encoded, env: BatchEnv) -> torch.Tensor:
        """Probability vectors over nodes, shape (B, S, n)."""
        return self.log_probs(enc, env).exp()


# --- rollouts and teacher forcing -------------------------------------------

@dataclass
class RolloutBatch:
    """Tours for ``B`` instances x ``S`` starts.

    ``actions[b, s, t]`` is the node chosen at decision ``t``; positions where
    ``active`` is False are depot padding after a CVRP row finished.
    """

    batch: InstanceBatch
    starts: torch.Tensor  # (B, S)
    actions: torch.Tensor  # (B, S, T)
    active: torch.Tensor  # (B, S, T)
    step_logprobs: torch.Tensor  # (B, S, T), zero where inactive
    costs: torch.Tensor  # (B, S)
    full_logprobs: torch.Tensor | None = None  # (B, S, T, n)

    @property
    def n_starts(self) -> int:
        return self.starts.shape[1]

    @property
    def instances(self) -> list[VrpInstance]:
        return self.batch.to_instances()

    def tour_logprob(self) -> torch.Tensor:
        return self.step_logprobs.sum(-1)

    def node_sequences(self) -> torch.Tensor:
        """(B, S, L) full node sequences including the start and CVRP depot legs."""
        if self.batch.kind is Problem.TSP:
            return torch.cat([self.starts[..., None], self.actions], -1)
        zeros = torch.zeros_like(self.starts)[..., None]
        return torch.cat([zeros, self.starts[..., None], self.actions], -1)

    def tour(self, b: int, s: int) -> list[int]:
        seq = self.node_sequences()[b, s].tolist()
        if self.batch.kind is Problem.TSP:
            return seq
        n_real = 2 + int(self.active[b, s].sum())
        return seq[:n_real]

    def tours(self) -> list[list[list[int]]]:
        return [[self.tour(b, s) for s in range(self.n_starts)] for b in range(self.batch.batch_size)]

    def decision_counts(self) -> torch.Tensor:
        return self.active.sum(-1)


def sequence_costs(coords: torch.Tensor, seq: torch.Tensor) -> torch.Tensor:
    """Closed-walk lengths of node sequences ``seq`` (B, S, L) over ``coords`` (B, n, 2)."""
    B, S, L = seq.shape
    pts = torch.gather(coords[:, None].expand(B, S, -1, -1), 2, seq[..., None].expand(B, S, L, 2))
    nxt = torch.roll(pts, -1, dims=2)
    return (pts - nxt).norm(dim=-1).sum(-1)


def _max_steps(batch: InstanceBatch) -> int:
    n = batch.n_customers
    return n - 1 if batch.kind is Problem.TSP else 2 * n + 1


def rollout(
    policy: AttentionPolicy,
    batch: InstanceBatch,
    mode: str = "sample",
    n_starts: int | None = None,
    generator: torch.Generator | None = None,
    keep_full: bool = False,
) -> RolloutBatch:
    """Multi-start construction; greedy picks argmax with smallest-index ties."""
    if mode not in ("sample", "greedy"):
        raise InvalidConfigError(f"mode must be sample or greedy, got {mode!r}")
    n_starts = batch.n_customers if n_starts is None else n_starts
    starts = start_nodes(batch, n_starts)
    env = BatchEnv(batch, starts)
    enc = policy.encode(batch)
    actions, actives, logps, fulls = [], [], [], []
    for _ in range(_max_steps(batch)):
        if env.all_done():
            break
        lp = policy.log_probs(enc, env)
        if mode == "greedy":
            a = lp.argmax(-1)
        else:
            probs = lp.detach().exp().reshape(-1, env.n)
            a = torch.multinomial(probs, 1, generator=generator).view(env.B, env.S)
        active = env.step(a)
        chosen = lp.gather(-1, a[..., None]).squeeze(-1)
        logps.append(torch.where(active, chosen, torch.zeros_like(chosen)))
        actions.append(a)
        actives.append(active)
        if keep_full:
            fulls.append(lp)
    if not env.all_done():
        raise RuntimeError("construction did not terminate")
    return _assemble(batch, starts, actions, actives, logps, fulls)


def _assemble(batch, starts, actions, actives, logps, fulls) -> RolloutBatch:
    B, S = starts.shape
    if actions:
        A = torch.stack(actions, -1)
        act = torch.stack(actives, -1)
        lp = torch.stack(logps, -1)
    else:
        A = torch.zeros(B, S, 0, dtype=torch.long)
        act = torch.zeros(B, S, 0, dtype=torch.bool)
        lp = torch.zeros(B, S, 0, dtype=batch.coords.dtype)
    full = torch.stack(fulls, 2) if fulls else None
    out = RolloutBatch(batch, starts, A, act, lp, None, full)  # type: ignore[arg-type]
    out.costs = sequence_costs(batch.coords, out.node_sequences())
    return out


def replay(
    policy: AttentionPolicy,
    rollout_batch: RolloutBatch,
    keep_full: bool = False,
) -> RolloutBatch:
    """Teacher-forced pass of ``policy`` along the tours in ``rollout_batch``."""
    batch = rollout_batch.batch
    env = BatchEnv(batch, rollout_batch.starts)
    enc = policy.encode(batch)
    actions, actives, logps, fulls = [], [], [], []
    for t in range(rollout_batch.actions.shape[-1]):
        a = rollout_batch.actions[..., t]
        mask = env.mask()
        ok = mask.gather(-1, a[..., None]).squeeze(-1)
        if not ok.all():
            raise InfeasibleReplayError(f"tour takes a masked action at decision {t}")
        lp = policy.log_probs(enc, env, mask)
        active = env.step(a)
        chosen = lp.gather(-1, a[..., None]).squeeze(-1)
        logps.append(torch.where(active, chosen, torch.zeros_like(chosen)))
        actions.append(a)
        actives.append(active)
        if keep_full:
            fulls.append(lp)
    if not env.all_done():
        raise InfeasibleReplayError("replayed tour stops before construction is complete")
    return _assemble(batch, rollout_batch.starts, actions, actives, logps, fulls)


def tours_to_rollout(instance: VrpInstance, tours: Sequence[Sequence[int]], dtype=torch.float64) -> RolloutBatch:
    """Wrap explicit tours of one instance as a (1, S) batch for replay."""
    batch = InstanceBatch.from_instances([instance], dtype)
    cvrp = instance.kind is Problem.CVRP
    starts, rows = [], []
    for tour in tours:
        tour = [int(v) for v in tour]
        if cvrp:
            if len(tour) < 3 or tour[0] != 0:
                raise InfeasibleReplayError("CVRP tours must start at the depot")
            starts.append(tour[1])
            rows.append(tour[2:])
        else:
            starts.append(tour[0])
            rows.append(tour[1:])
    T = max(len(r) for r in rows)
    A = torch.zeros(1, len(rows), T, dtype=torch.long)
    for s, r in enumerate(rows):
        A[0, s, : len(r)] = torch.tensor(r, dtype=torch.long)
    act = torch.zeros_like(A, dtype=torch.bool)
    lp = torch.zeros(A.shape, dtype=dtype)
    return RolloutBatch(batch, torch.tensor([starts]), A, act, lp, torch.zeros(1, len(rows)))


def log_probs_of_tour(policy: AttentionPolicy, instance: VrpInstance, tour: Sequence[int]) -> torch.Tensor:
    """Probabilities this policy assigns to each decision of ``tour`` (start given)."""
    rb = replay(policy, tours_to_rollout(instance, [tour]))
    return rb.step_logprobs[0, 0][rb.active[0, 0]].exp()


# --- gradients and checkpoints ----------------------------------------------

def gradient(policy: AttentionPolicy, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss`` w.r.t. every parameter."""
    names, params = zip(*policy.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=False)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        out[name] = g
    return out


def clone_policy(policy: AttentionPolicy, frozen: bool = True) -> AttentionPolicy:
    twin = copy.deepcopy(policy)
    if frozen:
        twin.requires_grad_(False)
        twin.eval()
    return twin


def params_equal(a: AttentionPolicy, b: AttentionPolicy) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def save_checkpoint(path: str | Path, policy: AttentionPolicy, **extra) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "policy_config": asdict(policy.config),
        "state_dict": policy.state_dict(),
        **extra,
    }
    torch.save(payload, Path(path))


def checkpoint_bytes(policy: AttentionPolicy, **extra) -> bytes:
    buf = io.BytesIO()
    torch.save({"version": CHECKPOINT_VERSION, "policy_config": asdict(policy.config),
                "state_dict": policy.state_dict(), **extra}, buf)
    return buf.getvalue()


def load_checkpoint(path_or_bytes, expect: PolicyConfig | None = None) -> tuple[AttentionPolicy, dict]:
    src = io.BytesIO(path_or_bytes) if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes)
    try:
        payload = torch.load(src, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - torch raises many types on corrupt files
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    config = PolicyConfig(**payload["policy_config"])
    if expect is not None and asdict(expect) != asdict(config):
        raise CheckpointError(f"architecture mismatch: checkpoint has {asdict(config)}")
    policy = AttentionPolicy(config)
    try:
        policy.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not match the architecture: {exc}") from exc
    return policy, payload
