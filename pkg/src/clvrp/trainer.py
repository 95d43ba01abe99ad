"""Continual-learning trainer over an ascending size schedule.

Each epoch belongs to one task (size). Every step picks a training size
(current size, or with experience replay a uniformly chosen earlier size half
of the time), generates a fresh batch, samples multi-start tours, and applies
``alpha * KL(exemplar || current) + (1 - alpha) * REINFORCE``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import instances as inst_mod
from .instances import Problem
from .policy import (
    AttentionPolicy,
    InstanceBatch,
    InvalidConfigError,
    NumericError,
    PolicyConfig,
    RolloutBatch,
    clone_policy,
    load_checkpoint,
    replay,
    rollout,
)

log = logging.getLogger(__name__)

REG_MODES = ("inter", "intra", "none")


class ScheduleError(ValueError):
    pass


@dataclass
class SizeSchedule:
    sizes: list[int] = field(default_factory=lambda: list(range(60, 151, 10)))
    epochs: int = 2000
    steps_per_epoch: int = 100
    batch_size: int = 64
    batch_threshold: int = 100  # sizes above this train with half the batch

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if not self.sizes:
            raise ScheduleError("size schedule is empty")
        if any(s < 2 for s in self.sizes):
            raise ScheduleError("every size must be >= 2")
        gaps = {b - a for a, b in zip(self.sizes, self.sizes[1:])}
        if len(gaps) > 1 or (gaps and min(gaps) <= 0):
            raise ScheduleError(f"sizes must ascend with equal spacing, got {self.sizes}")
        if self.epochs <= 0 or self.epochs % len(self.sizes):
            raise ScheduleError(f"epochs ({self.epochs}) must be a positive multiple of K={len(self.sizes)}")
        if self.steps_per_epoch <= 0 or self.batch_size <= 0:
            raise ScheduleError("steps_per_epoch and batch_size must be positive")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def spacing(self) -> int:
        return self.sizes[1] - self.sizes[0] if self.K > 1 else 0

    @property
    def task_interval(self) -> int:
        return self.epochs // self.K

    def task_index(self, epoch: int) -> int:
        if not 1 <= epoch <= self.epochs:
            raise ScheduleError(f"epoch {epoch} outside 1..{self.epochs}")
        return (epoch - 1) // self.task_interval + 1

    def batch_size_for(self, size: int) -> int:
        return self.batch_size if size <= self.batch_threshold else max(1, self.batch_size // 2)


def current_task_size(epoch: int, schedule: SizeSchedule) -> int:
    return schedule.sizes[0] + schedule.spacing * (schedule.task_index(epoch) - 1)


def sample_training_size(task_index: int, rng, sizes: list[int], replay_enabled: bool = True) -> int:
    """Current size with probability 0.5, else uniform over the earlier sizes."""
    if not 1 <= task_index <= len(sizes):
        raise ScheduleError(f"task index {task_index} outside 1..{len(sizes)}")
    if task_index == 1 or not replay_enabled:
        return sizes[task_index - 1]
    if rng.random() < 0.5:
        return sizes[task_index - 1]
    return sizes[int(rng.integers(0, task_index - 1))]


@dataclass
class TrainConfig:
    problem: str = "tsp"
    schedule: SizeSchedule = field(default_factory=SizeSchedule)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    alpha: float = 0.1
    replay: bool = True
    regularization: str = "inter"
    intra_interval: int = 25
    kl_form: str = "chosen"  # "chosen": sum over taken actions; "full": whole per-step distributions
    n_starts: int | None = None  # None: one start per customer
    optimizer: str = "sgd"
    lr: float = 1e-4
    seed: int = 0
    warmup_epochs: int = 1
    initial_exemplar: str | None = None
    capacity: int | None = None

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = SizeSchedule(**self.schedule)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)
        self.problem = Problem.parse(self.problem).value
        self.policy.problem = self.problem
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.regularization not in REG_MODES:
            raise InvalidConfigError(f"regularization must be one of {REG_MODES}")
        if self.kl_form not in ("chosen", "full"):
            raise InvalidConfigError("kl_form must be 'chosen' or 'full'")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfigError("optimizer must be 'sgd' or 'adam'")
        if self.n_starts is not None and self.n_starts < 2:
            raise InvalidConfigError("training needs n_starts >= 2 for the shared baseline")
        E_p = self.schedule.task_interval
        if self.regularization == "intra" and (self.intra_interval <= 0 or E_p % self.intra_interval):
            raise InvalidConfigError(
                f"intra_interval ({self.intra_interval}) must divide the task interval ({E_p})"
            )
        if self.initial_exemplar is None and not 0 <= self.warmup_epochs <= E_p:
            raise InvalidConfigError("warmup_epochs must lie within the first task interval")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- losses -----------------------------------------------------------------

def advantages(costs: torch.Tensor) -> torch.Tensor:
    """Cost minus the per-instance mean over starts."""
    return costs - costs.mean(dim=1, keepdim=True)


def task_loss(batch: RolloutBatch) -> torch.Tensor:
    """REINFORCE surrogate for expected cost with the multi-start mean as baseline.

    Its gradient is ``mean((C - b) * grad log p)``, so descending it lowers cost.
    """
    if batch.n_starts < 2:
        raise InvalidConfigError("the shared baseline needs at least 2 starts per instance")
    adv = advantages(batch.costs.detach()).to(batch.step_logprobs.dtype)
    return (adv * batch.tour_logprob()).mean()


def kl_regularization_loss(
    current: AttentionPolicy,
    exemplar: AttentionPolicy,
    batch: RolloutBatch,
    form: str = "chosen",
    current_batch: RolloutBatch | None = None,
) -> torch.Tensor:
    """KL of the exemplar against the current policy along the batch's tours.

    ``current_batch`` may carry the current policy's own rollout (with graph)
    to avoid a second forward pass. Exemplar terms are constants.
    """
    full = form == "full"
    with torch.no_grad():
        ex = replay(exemplar, batch, keep_full=full)
    if current_batch is None or (full and current_batch.full_logprobs is None):
        current_batch = replay(current, batch, keep_full=full)
    n_tours = batch.active.shape[0] * batch.active.shape[1]
    if not full:
        lp_ex = ex.step_logprobs.to(current_batch.step_logprobs.dtype)
        terms = lp_ex.exp() * (lp_ex - current_batch.step_logprobs)
        terms = torch.where(ex.active, terms, torch.zeros_like(terms))
    else:
        lp_ex = ex.full_logprobs.to(current_batch.full_logprobs.dtype)
        finite = torch.isfinite(lp_ex)
        safe_ex = torch.where(finite, lp_ex, torch.zeros_like(lp_ex))
        safe_cur = torch.where(finite, current_batch.full_logprobs, torch.zeros_like(lp_ex))
        terms = (safe_ex.exp() * (safe_ex - safe_cur) * finite).sum(-1)
        terms = torch.where(ex.active, terms, torch.zeros_like(terms))
    loss = terms.sum() / n_tours
    if not torch.isfinite(loss):
        raise NumericError("non-finite KL regularization loss")
    return loss


def blend(task: torch.Tensor, reg: torch.Tensor | None, alpha: float) -> torch.Tensor:
    if reg is None:
        return task
    return alpha * reg + (1.0 - alpha) * task


def combined_update(policy: AttentionPolicy, optimizer: torch.optim.Optimizer,
                    task: torch.Tensor, reg: torch.Tensor | None, alpha: float) -> torch.Tensor:
    """One optimizer step on ``alpha * reg + (1 - alpha) * task``; ``reg=None`` means plain REINFORCE."""
    loss = blend(task, reg, alpha)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in policy.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite combined gradient for {name}")
    optimizer.step()
    return loss.detach()


def make_optimizer(policy: AttentionPolicy, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(policy.parameters(), lr=config.lr)
    return torch.optim.SGD(policy.parameters(), lr=config.lr)


# --- exemplar management ----------------------------------------------------

@dataclass
class ExemplarStore:
    mode: str
    snapshot: AttentionPolicy | None
    update_interval: int
    updates_per_task: int
    last_update_epoch: int | None = None


def make_exemplar_store(config: TrainConfig, initial: AttentionPolicy | None = None) -> ExemplarStore:
    E_p = config.schedule.task_interval
    if config.regularization == "intra":
        interval = config.intra_interval
    else:
        interval = E_p
    snap = clone_policy(initial) if initial is not None else None
    return ExemplarStore(config.regularization, snap, interval, E_p // interval,
                         0 if initial is not None else None)


def exemplar_update_epochs(store: ExemplarStore, schedule: SizeSchedule, warmup: int | None = None) -> list[int]:
    """Epochs at whose end the snapshot is refreshed."""
    if store.mode == "none":
        return []
    out = [e for e in range(store.update_interval, schedule.epochs, store.update_interval)]
    if warmup and warmup not in out:
        out = sorted(out + [warmup])
    return out


def maybe_update_exemplar(store: ExemplarStore, epoch: int, current: AttentionPolicy,
                          schedule: SizeSchedule, warmup: int | None = None) -> ExemplarStore:
    """Snapshot ``current`` if ``epoch`` ends an update interval (or the warmup)."""
    if store.mode == "none":
        return store
    due = epoch % store.update_interval == 0 and epoch < schedule.epochs
    if store.snapshot is None and warmup is not None and epoch >= warmup:
        due = True
    if not due:
        return store
    return dataclasses.replace(store, snapshot=clone_policy(current), last_update_epoch=epoch)


# --- training loop ----------------------------------------------------------

@dataclass
class CheckpointRecord:
    epoch: int
    task_index: int
    path: Path | None = None
    blob: bytes | None = None

    def load(self) -> tuple[AttentionPolicy, dict]:
        return load_checkpoint(self.path if self.path is not None else self.blob)


@dataclass
class TrainResult:
    policy: AttentionPolicy
    checkpoints: list[CheckpointRecord]
    log: list[dict]
    config: TrainConfig


def _rng_streams(seed: int):
    size_ss, data_ss, torch_ss = np.random.SeedSequence(seed).spawn(3)
    gen = torch.Generator().manual_seed(int(torch_ss.generate_state(1, dtype=np.uint64)[0] >> 1))
    return np.random.default_rng(size_ss), np.random.default_rng(data_ss), gen


def _snapshot_state(policy: AttentionPolicy | None):
    return None if policy is None else policy.state_dict()


def _checkpoint_payload(policy, optimizer, store, epoch, config, size_rng, data_rng, gen) -> dict:
    return {
        "version": 1,
        "policy_config": asdict(policy.config),
        "state_dict": policy.state_dict(),
        "epoch": epoch,
        "task_index": config.schedule.task_index(epoch),
        "train_config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "optimizer": optimizer.state_dict(),
        "exemplar": _snapshot_state(store.snapshot),
        "exemplar_last_update": store.last_update_epoch,
        "rng": {
            "size": size_rng.bit_generator.state,
            "data": data_rng.bit_generator.state,
            "torch": gen.get_state(),
        },
    }


def run_training(
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | bytes | None = None,
    timestamps: bool = True,
    on_record: Callable[[dict], None] | None = None,
    max_epoch: int | None = None,
) -> TrainResult:
    """Run the ascending-size schedule; checkpoints land at every task boundary.

    ``max_epoch`` stops early (used to produce resumable partial runs).
    """
    sched = config.schedule
    kind = Problem(config.problem)
    size_rng, data_rng, gen = _rng_streams(config.seed)
    policy = AttentionPolicy(config.policy, seed=config.seed)
    initial = None
    if config.initial_exemplar is not None:
        initial, _ = load_checkpoint(config.initial_exemplar, expect=config.policy)
        policy.load_state_dict(initial.state_dict())
    optimizer = make_optimizer(policy, config)
    store = make_exemplar_store(config, initial)
    warmup = None if initial is not None else config.warmup_epochs
    start_epoch = 1

    if resume_from is not None:
        policy, payload = load_checkpoint(resume_from, expect=config.policy)
        if payload.get("config_hash") != config.hash():
            raise InvalidConfigError("checkpoint was produced by a different config")
        optimizer = make_optimizer(policy, config)
        optimizer.load_state_dict(payload["optimizer"])
        if payload["exemplar"] is not None:
            snap = AttentionPolicy(config.policy)
            snap.load_state_dict(payload["exemplar"])
            store = dataclasses.replace(store, snapshot=clone_policy(snap),
                                        last_update_epoch=payload["exemplar_last_update"])
        size_rng.bit_generator.state = payload["rng"]["size"]
        data_rng.bit_generator.state = payload["rng"]["data"]
        gen.set_state(payload["rng"]["torch"])
        start_epoch = payload["epoch"] + 1

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume_from is not None else "w")
    records: list[dict] = []
    checkpoints: list[CheckpointRecord] = []
    last = sched.epochs if max_epoch is None else min(max_epoch, sched.epochs)
    try:
        for epoch in range(start_epoch, last + 1):
            task_i = sched.task_index(epoch)
            for step_i in range(1, sched.steps_per_epoch + 1):
                size = sample_training_size(task_i, size_rng, sched.sizes, config.replay)
                bsz = sched.batch_size_for(size)
                coords, dem, cap = inst_mod.generate_arrays(kind, size, bsz, data_rng, config.capacity)
                batch = InstanceBatch.from_arrays(kind, coords, dem, cap)
                n_starts = size if config.n_starts is None else min(config.n_starts, size)
                use_reg = (store.mode != "none" and store.snapshot is not None and config.alpha > 0)
                full = use_reg and config.kl_form == "full"
                rb = rollout(policy, batch, "sample", n_starts, gen, keep_full=full)
                lt = task_loss(rb)
                lr_ = None
                if use_reg:
                    lr_ = kl_regularization_loss(policy, store.snapshot, rb, config.kl_form, current_batch=rb)
                try:
                    combined_update(policy, optimizer, lt, lr_, config.alpha)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} step {step_i}: {exc}") from exc
                rec = {
                    "epoch": epoch,
                    "step": step_i,
                    "sampled_size": size,
                    "task_loss": float(lt.detach()),
                    "kl_loss": None if lr_ is None else float(lr_.detach()),
                    "mean_cost": float(rb.costs.mean()),
                }
                if timestamps:
                    rec["time"] = time.time()
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if on_record is not None:
                    on_record(rec)
            store = maybe_update_exemplar(store, epoch, policy, sched, warmup)
            if epoch % sched.task_interval == 0 or epoch == last:
                payload = _checkpoint_payload(policy, optimizer, store, epoch, config, size_rng, data_rng, gen)
                rec = CheckpointRecord(epoch, task_i)
                if out is not None:
                    rec.path = out / f"checkpoint_e{epoch:05d}_t{task_i:02d}.pt"
                    torch.save(payload, rec.path)
                else:
                    buf = io.BytesIO()
                    torch.save(payload, buf)
                    rec.blob = buf.getvalue()
                checkpoints.append(rec)
                log.info("epoch %d (task %d, size %d): checkpoint", epoch, task_i,
                         current_task_size(epoch, sched))
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(policy, checkpoints, records, config)
