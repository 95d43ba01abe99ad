"""Tours, feasibility, the construction MDP, and small-instance oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .instances import Problem, VrpInstance

Tour = list  # ordered node indices; CVRP tours include depot (0) visits

TIE_TOL = 1e-9
TSP_ORACLE_LIMIT = 10
CVRP_ORACLE_LIMIT = 8


class FeasibilityError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("infeasible tour: " + "; ".join(self.violations))


class NoActionError(RuntimeError):
    pass


class InvalidActionError(ValueError):
    pass


class OracleTooLargeError(ValueError):
    pass


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def validate_tour(instance: VrpInstance, tour: Sequence[int]) -> list[str]:
    """All constraint violations of ``tour``; an empty list means feasible."""
    tour = [int(v) for v in tour]
    problems: list[str] = []
    n = instance.n_nodes
    bad = [v for v in tour if not 0 <= v < n]
    if bad:
        return [f"node indices out of range: {bad}"]

    if instance.kind is Problem.TSP:
        seen: dict[int, int] = {}
        for v in tour:
            seen[v] = seen.get(v, 0) + 1
        dup = sorted(v for v, c in seen.items() if c > 1)
        missing = sorted(set(range(n)) - set(seen))
        if dup:
            problems.append(f"duplicate customers: {dup}")
        if missing:
            problems.append(f"missing customers: {missing}")
        return problems

    if len(tour) < 2 or tour[0] != 0 or tour[-1] != 0:
        problems.append("tour must start and end at the depot")
    for a, b in zip(tour, tour[1:]):
        if a == 0 and b == 0:
            problems.append("consecutive depot visits")
            break
    customers = [v for v in tour if v != 0]
    counts: dict[int, int] = {}
    for v in customers:
        counts[v] = counts.get(v, 0) + 1
    dup = sorted(v for v, c in counts.items() if c > 1)
    missing = sorted(set(range(1, n)) - set(counts))
    if dup:
        problems.append(f"duplicate customers: {dup}")
    if missing:
        problems.append(f"missing customers: {missing}")
    for r, route in enumerate(split_routes(tour)):
        load = int(sum(instance.demands[v - 1] for v in route))
        if load > instance.capacity:
            problems.append(
                f"route {r} {route} carries {load} > capacity {instance.capacity}"
            )
    return problems


def split_routes(tour: Sequence[int]) -> list[list[int]]:
    routes, cur = [], []
    for v in tour:
        if v == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(v))
    if cur:
        routes.append(cur)
    return routes


def join_routes(routes: Sequence[Sequence[int]]) -> list[int]:
    tour = [0]
    for r in routes:
        tour += list(r) + [0]
    return tour


def _cycle_length(coords: np.ndarray, seq: Sequence[int]) -> float:
    pts = coords[np.asarray(seq)]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(-1)).sum())


def tour_length(instance: VrpInstance, tour: Sequence[int], check: bool = True) -> float:
    """Euclidean length including the closing edge (TSP) or the depot legs (CVRP)."""
    if check:
        violations = validate_tour(instance, tour)
        if violations:
            raise FeasibilityError(violations)
    if instance.kind is Problem.TSP:
        return _cycle_length(instance.coords, tour)
    pts = instance.coords[np.asarray(tour)]
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1)).sum())


def raw_tour_length(instance: VrpInstance, tour: Sequence[int]) -> float:
    """Tour length in the instance's original (pre-normalization) units."""
    return instance.scale * tour_length(instance, tour)


def tour_to_json(instance: VrpInstance, tour: Sequence[int]) -> str:
    return json.dumps(
        {"instance": instance.id, "nodes": [int(v) for v in tour],
         "cost": tour_length(instance, tour)}
    )


def cross_size_objective(costs_by_size: Mapping[int, float]) -> float:
    """Unweighted mean of per-size mean costs."""
    if not costs_by_size:
        raise ValueError("cross_size_objective needs at least one size")
    return float(sum(costs_by_size.values()) / len(costs_by_size))


# --- construction MDP -------------------------------------------------------

@dataclass(frozen=True)
class ConstructionState:
    instance: VrpInstance
    partial: tuple
    visited: frozenset
    current_node: int
    remaining_capacity: int | None
    done: bool

    @property
    def first_node(self) -> int:
        return self.partial[0] if self.instance.kind is Problem.TSP else 0


def initial_state(instance: VrpInstance, start: int = 0) -> ConstructionState:
    """TSP: the tour already holds ``start``. CVRP: the vehicle sits at the depot."""
    if instance.kind is Problem.TSP:
        if not 0 <= start < instance.n_nodes:
            raise InvalidActionError(f"start node {start} out of range")
        return ConstructionState(instance, (start,), frozenset([start]), start, None, False)
    return ConstructionState(instance, (0,), frozenset(), 0, instance.capacity, False)


def feasible_actions(state: ConstructionState) -> np.ndarray:
    if state.done:
        raise NoActionError("construction is complete; no action is available")
    inst = state.instance
    mask = np.ones(inst.n_nodes, dtype=bool)
    if inst.kind is Problem.TSP:
        mask[list(state.visited)] = False
        return mask
    mask[0] = state.current_node != 0
    for v in range(1, inst.n_nodes):
        if v in state.visited or inst.demands[v - 1] > state.remaining_capacity:
            mask[v] = False
    return mask


def step(state: ConstructionState, action: int) -> ConstructionState:
    action = int(action)
    mask = feasible_actions(state)
    if not 0 <= action < len(mask) or not mask[action]:
        raise InvalidActionError(f"action {action} is masked in the current state")
    inst = state.instance
    visited = state.visited
    remaining = state.remaining_capacity
    if inst.kind is Problem.TSP:
        visited = visited | {action}
        done = len(visited) == inst.n_nodes
    else:
        if action == 0:
            remaining = inst.capacity
        else:
            visited = visited | {action}
            remaining = remaining - int(inst.demands[action - 1])
        done = action == 0 and len(visited) == inst.n_customers
    return ConstructionState(inst, state.partial + (action,), visited, action, remaining, done)


def rollout_with(instance: VrpInstance, select, start: int | None = None) -> list[int]:
    """Drive the MDP with ``select(state, mask) -> action`` until done."""
    if instance.kind is Problem.TSP:
        state = initial_state(instance, 0 if start is None else start)
    else:
        state = initial_state(instance)
        if start is not None:
            state = step(state, start)
    while not state.done:
        state = step(state, select(state, feasible_actions(state)))
    return list(state.partial)


# --- heuristics -------------------------------------------------------------

def nearest_neighbor(instance: VrpInstance, start: int | None = None) -> list[int]:
    """Greedy nearest feasible node; ties go to the smallest index.

    For CVRP the vehicle returns to the depot only when no unvisited customer fits.
    """
    dist = distance_matrix(instance.coords)

    def select(state, mask):
        if instance.kind is Problem.CVRP and state.current_node != 0:
            customers = mask.copy()
            customers[0] = False
            if customers.any():
                mask = customers
        d = np.where(mask, dist[state.current_node], np.inf)
        return int(np.argmin(d))

    return rollout_with(instance, select, start)


def _two_opt_path(dist: np.ndarray, seq: list[int], closed: bool) -> list[int]:
    """First-improvement 2-opt on a cycle (closed) or on a path with fixed endpoints."""
    seq = list(seq)
    n = len(seq)
    improved = True
    while improved:
        improved = False
        last = n if closed else n - 1
        for i in range(0, n - 2):
            a, b = seq[i], seq[i + 1]
            for j in range(i + 2, last):
                c, d = seq[j], seq[(j + 1) % n]
                if closed and i == 0 and j == n - 1:
                    continue
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    seq[i + 1 : j + 1] = seq[i + 1 : j + 1][::-1]
                    improved = True
                    break
            if improved:
                break
    return seq


def two_opt(instance: VrpInstance, tour: Sequence[int]) -> list[int]:
    """2-opt to local optimality; CVRP moves stay inside each route."""
    dist = distance_matrix(instance.coords)
    if instance.kind is Problem.TSP:
        if len(tour) < 4:
            return list(tour)
        return _two_opt_path(dist, list(tour), closed=True)
    routes = []
    for route in split_routes(tour):
        path = [0] + route + [0]
        routes.append(_two_opt_path(dist, path, closed=False)[1:-1] if len(route) > 2 else route)
    return join_routes(routes)


# --- exact oracle -----------------------------------------------------------

def _tsp_cost_to_go(dist: np.ndarray) -> np.ndarray:
    """h[S, j]: cheapest completion from node j after visiting the set S (node 0 in S)."""
    n = len(dist)
    full = (1 << n) - 1
    h = np.full((1 << n, n), np.inf)
    h[full, :] = dist[:, 0]
    bits = np.array([1 << k for k in range(n)])
    for S in range(full - 1, 0, -1):
        if not S & 1:
            continue
        free = np.nonzero((S & bits) == 0)[0]
        nxt = h[S | bits[free], free]  # (len(free),)
        h[S] = (dist[:, free] + nxt[None, :]).min(axis=1)
    return h


def _exact_tsp(instance: VrpInstance) -> tuple[list[int], float]:
    dist = distance_matrix(instance.coords)
    n = len(dist)
    h = _tsp_cost_to_go(dist)
    best = float(h[1, 0])
    tour, S, cur, spent = [0], 1, 0, 0.0
    for _ in range(n - 1):
        for k in range(1, n):
            if S >> k & 1:
                continue
            if spent + dist[cur, k] + h[S | 1 << k, k] <= best + TIE_TOL:
                tour.append(k)
                spent += dist[cur, k]
                S |= 1 << k
                cur = k
                break
    return tour, best


def _exact_cvrp(instance: VrpInstance) -> tuple[list[int], float]:
    dist = distance_matrix(instance.coords)
    n = instance.n_customers
    demand = [0] + [int(d) for d in instance.demands]
    cap = int(instance.capacity)
    full = (1 << (n + 1)) - 2

    @lru_cache(maxsize=None)
    def cost_to_go(S: int, cur: int, rem: int) -> float:
        if S == full:
            return dist[cur, 0]
        best = np.inf
        if cur != 0:
            best = dist[cur, 0] + cost_to_go(S, 0, cap)
        for k in range(1, n + 1):
            if not S >> k & 1 and demand[k] <= rem:
                c = dist[cur, k] + cost_to_go(S | 1 << k, k, rem - demand[k])
                if c < best:
                    best = c
        return best

    best = cost_to_go(0, 0, cap)
    tour, S, cur, rem, spent = [0], 0, 0, cap, 0.0
    while not (S == full and cur == 0):
        options = ([0] if cur != 0 else []) + [
            k for k in range(1, n + 1) if not S >> k & 1 and demand[k] <= rem
        ]
        for k in options:
            if k == 0:
                nS, nrem = S, cap
                tail = cost_to_go(S, 0, cap) if S != full else 0.0
            else:
                nS, nrem = S | 1 << k, rem - demand[k]
                tail = cost_to_go(nS, k, nrem)
            if spent + dist[cur, k] + tail <= best + TIE_TOL:
                tour.append(k)
                spent += dist[cur, k]
                S, cur, rem = nS, k, nrem
                break
    return tour, float(best)


def brute_force_optimal(instance: VrpInstance) -> tuple[list[int], float]:
    """Globally optimal tour by exhaustive dynamic programming over the construction MDP.

    Among optimal tours the lexicographically smallest node sequence wins
    (TSP tours start at node 0).
    """
    if instance.kind is Problem.TSP:
        if instance.n_customers > TSP_ORACLE_LIMIT:
            raise OracleTooLargeError(
                f"TSP oracle handles at most {TSP_ORACLE_LIMIT} nodes, got {instance.n_customers}"
            )
        tour, cost = _exact_tsp(instance)
    else:
        if instance.n_customers > CVRP_ORACLE_LIMIT:
            raise OracleTooLargeError(
                f"CVRP oracle handles at most {CVRP_ORACLE_LIMIT} customers, got {instance.n_customers}"
            )
        tour, cost = _exact_cvrp(instance)
    return tour, tour_length(instance, tour)


def oracle_available(instance: VrpInstance) -> bool:
    limit = TSP_ORACLE_LIMIT if instance.kind is Problem.TSP else CVRP_ORACLE_LIMIT
    return instance.n_customers <= limit


def reference_solution(instance: VrpInstance) -> tuple[list[int], float, str]:
    """Brute force where it is tractable, otherwise 2-opt on nearest neighbor."""
    if oracle_available(instance):
        tour, cost = brute_force_optimal(instance)
        return tour, cost, "brute-force"
    tour = two_opt(instance, nearest_neighbor(instance))
    return tour, tour_length(instance, tour), "2opt-nn"
