"""Greedy multi-start evaluation with x8 augmentation, gap tables and forgetting curves."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import routing
from .instances import N_AUGMENTATIONS, VrpInstance
from .policy import AttentionPolicy, InstanceBatch, rollout, sequence_costs
from .routing import cross_size_objective

CHUNK_ROWS = 20_000  # decoder rows (instances x starts) per forward pass


def gap(obj: float, ref: float) -> float:
    """Relative excess over ``ref`` in percent."""
    if ref <= 0:
        raise ValueError(f"reference objective must be positive, got {ref}")
    return 100.0 * (obj - ref) / ref


@dataclass
class InstanceResult:
    costs: np.ndarray  # best cost per instance
    tours: list[list[int]]


@torch.no_grad()
def solve(policy: AttentionPolicy, instances: Sequence[VrpInstance], n_starts: int | None = None,
          use_augmentation: bool = True) -> InstanceResult:
    """Best greedy tour per instance over starts (and the 8 symmetries)."""
    n_aug = N_AUGMENTATIONS if use_augmentation else 1
    size = instances[0].n_customers
    S = size if n_starts is None else n_starts
    # chunking ignores n_aug so the identity pass is computed exactly as without augmentation
    per_chunk = max(1, CHUNK_ROWS // S)
    costs = np.empty(len(instances))
    tours: list[list[int]] = []
    for lo in range(0, len(instances), per_chunk):
        chunk = list(instances[lo : lo + per_chunk])
        base = InstanceBatch.from_instances(chunk)
        best_cost = torch.full((base.batch_size,), float("inf"), dtype=torch.float64)
        best_tour: list = [None] * base.batch_size
        for t in range(n_aug):
            rb = rollout(policy, base.augmented(t), "greedy", S)
            # score on the original coordinates so the identity pass is compared exactly
            c, s = sequence_costs(base.coords, rb.node_sequences()).min(1)
            # ties within float noise keep the earlier (identity) tour, so aug never reports worse
            better = c < best_cost - routing.TIE_TOL
            for b in torch.nonzero(better).flatten().tolist():
                best_cost[b] = c[b]
                best_tour[b] = rb.tour(b, int(s[b]))
        for b, inst in enumerate(chunk):
            tours.append(best_tour[b])
            costs[lo + b] = routing.tour_length(inst, best_tour[b])
    return InstanceResult(costs, tours)


@dataclass
class SizeRecord:
    size: int
    instance_count: int
    mean_obj: float
    mean_gap: float | None
    wall_time: float
    reference: str | None = None
    dataset: str | None = None


@dataclass
class EvalReport:
    method: str
    checkpoint: str | None
    records: list[SizeRecord] = field(default_factory=list)

    @property
    def average(self) -> float:
        return cross_size_objective({r.size: r.mean_obj for r in self.records})

    def by_size(self) -> dict[int, SizeRecord]:
        return {r.size: r for r in self.records}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"method": self.method, "checkpoint": self.checkpoint, **asdict(r)})
                 for r in self.records]
        lines.append(json.dumps({"method": self.method, "checkpoint": self.checkpoint,
                                 "average_total_cost": self.average}))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "checkpoint", "size", "instances", "obj", "gap_percent",
                    "time_s", "reference", "dataset"])
        for r in self.records:
            w.writerow([self.method, self.checkpoint or "", r.size, r.instance_count,
                        f"{r.mean_obj:.4f}", "" if r.mean_gap is None else f"{r.mean_gap:.2f}",
                        f"{r.wall_time:.2f}", r.reference or "", r.dataset or ""])
        w.writerow([self.method, self.checkpoint or "", "average", "", f"{self.average:.4f}",
                    "", "", "", ""])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'Method':<24}"
        row = f"{self.method:<24}"
        for r in self.records:
            head += f" | {'N=' + str(r.size) + ' Obj.':>12} {'Gap':>7} {'Time':>7}"
            g = "-" if r.mean_gap is None else f"{r.mean_gap:.2f}%"
            row += f" | {r.mean_obj:>12.4f} {g:>7} {r.wall_time:>6.1f}s"
        head += f" | {'Average of Total costs':>22}"
        row += f" | {self.average:>22.4f}"
        return head + "\n" + "-" * len(head) + "\n" + row + "\n"


def reference_costs(instances: Sequence[VrpInstance]) -> tuple[np.ndarray, str]:
    """Oracle costs when every instance fits the brute-force limit, else 2-opt(NN)."""
    if all(routing.oracle_available(i) for i in instances):
        return np.array([routing.brute_force_optimal(i)[1] for i in instances]), "brute-force"
    costs = [routing.tour_length(i, routing.two_opt(i, routing.nearest_neighbor(i))) for i in instances]
    return np.array(costs), "2opt-nn"


def evaluate(
    policy: AttentionPolicy,
    instance_sets: Mapping[int, Sequence[VrpInstance]],
    n_starts: int | None = None,
    use_augmentation: bool = True,
    references: Mapping[int, tuple[np.ndarray, str]] | None = None,
    method: str = "policy",
    checkpoint: str | None = None,
    datasets: Mapping[int, str] | None = None,
) -> EvalReport:
    """Per-size mean of per-instance best costs; gaps against ``references`` when given."""
    kinds = {inst.kind for insts in instance_sets.values() for inst in insts}
    if len(kinds) > 1:
        raise ValueError("all evaluation instances must share one problem kind")
    report = EvalReport(method, checkpoint)
    for size in sorted(instance_sets):
        insts = instance_sets[size]
        if not insts:
            raise ValueError(f"no instances for size {size}")
        t0 = time.perf_counter()
        starts = None if n_starts is None else min(n_starts, insts[0].n_customers)
        res = solve(policy, insts, starts, use_augmentation)
        wall = time.perf_counter() - t0
        mean_gap, ref_name = None, None
        if references is not None and size in references:
            ref, ref_name = references[size]
            mean_gap = float(np.mean([gap(o, r) for o, r in zip(res.costs, ref)]))
        report.records.append(SizeRecord(size, len(insts), float(res.costs.mean()), mean_gap, wall,
                                         ref_name, None if datasets is None else datasets.get(size)))
    return report


def heuristic_report(instance_sets: Mapping[int, Sequence[VrpInstance]], method: str = "nearest-neighbor",
                     improve: bool = False, references=None) -> EvalReport:
    report = EvalReport(method, None)
    for size in sorted(instance_sets):
        insts = instance_sets[size]
        t0 = time.perf_counter()
        costs = []
        for inst in insts:
            tour = routing.nearest_neighbor(inst)
            if improve:
                tour = routing.two_opt(inst, tour)
            costs.append(routing.tour_length(inst, tour))
        mean_gap, ref_name = None, None
        if references is not None and size in references:
            ref, ref_name = references[size]
            mean_gap = float(np.mean([gap(o, r) for o, r in zip(costs, ref)]))
        report.records.append(SizeRecord(size, len(insts), float(np.mean(costs)), mean_gap,
                                         time.perf_counter() - t0, ref_name))
    return report


@dataclass
class ForgettingCurve:
    checkpoints: list[str]
    curves: dict[int, list[float]]  # size -> mean objective after each checkpoint

    @property
    def forgetting(self) -> dict[int, float]:
        """Final mean objective minus the best reached at any checkpoint."""
        return {size: vals[-1] - min(vals) for size, vals in self.curves.items()}


def forgetting_curve(
    checkpoints: Sequence[tuple[str, AttentionPolicy]],
    instance_sets: Mapping[int, Sequence[VrpInstance]],
    n_starts: int | None = None,
    use_augmentation: bool = True,
) -> ForgettingCurve:
    if not checkpoints:
        raise ValueError("forgetting_curve needs at least one checkpoint")
    curves: dict[int, list[float]] = {size: [] for size in sorted(instance_sets)}
    for label, policy in checkpoints:
        rep = evaluate(policy, instance_sets, n_starts, use_augmentation, checkpoint=label)
        for r in rep.records:
            curves[r.size].append(r.mean_obj)
    return ForgettingCurve([label for label, _ in checkpoints], curves)
