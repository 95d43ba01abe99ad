"""Random and benchmark VRP instances.

Coordinates live in the unit square. Benchmark files are normalized on load
with a single scale factor so that tour lengths can be mapped back to the
original units.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class InvalidSizeError(ValueError):
    pass


class ParseError(ValueError):
    pass


class DegenerateInstanceError(ValueError):
    pass


class Problem(str, enum.Enum):
    TSP = "tsp"
    CVRP = "cvrp"

    @classmethod
    def parse(cls, value: "str | Problem") -> "Problem":
        if isinstance(value, Problem):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown problem kind {value!r} (expected tsp or cvrp)") from None


MAX_DEMAND = 9
CAPACITY_ANCHORS = ((20, 30), (50, 40), (100, 50))


@dataclass(frozen=True, eq=False)
class VrpInstance:
    """One routing instance.

    For CVRP node 0 is the depot and ``demands[i - 1]`` belongs to node ``i``.
    ``scale`` and ``offset`` map normalized coordinates back to raw ones:
    ``raw = coords * scale + offset``.
    """

    kind: Problem
    coords: np.ndarray
    demands: np.ndarray | None = None
    capacity: int | None = None
    id: str = ""
    scale: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)
    raw_coords: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        object.__setattr__(self, "coords", coords)
        if self.kind is Problem.TSP:
            if self.demands is not None or self.capacity is not None:
                raise ValueError("TSP instances carry no demands or capacity")
        else:
            if self.demands is None or self.capacity is None:
                raise ValueError("CVRP instances need demands and capacity")
            demands = np.asarray(self.demands, dtype=np.int64)
            object.__setattr__(self, "demands", demands)
            if len(demands) != len(coords) - 1:
                raise ValueError(
                    f"{len(demands)} demands for {len(coords) - 1} customers"
                )
            if self.capacity <= 0:
                raise ValueError("capacity must be positive")
            if demands.size and (demands.min() <= 0 or demands.max() > self.capacity):
                raise ValueError("every demand must lie in [1, capacity]")
        if self.n_customers < 2:
            raise InvalidSizeError(f"need at least 2 customers, got {self.n_customers}")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_customers(self) -> int:
        return len(self.coords) - (1 if self.kind is Problem.CVRP else 0)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "kind": self.kind.value,
            "coords": self.coords.tolist(),
            "demands": None if self.demands is None else self.demands.tolist(),
            "capacity": self.capacity,
            "seed": self.seed,
        }
        if self.scale != 1.0 or self.offset != (0.0, 0.0):
            rec["scale"] = self.scale
            rec["offset"] = list(self.offset)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "VrpInstance":
        return cls(
            kind=Problem.parse(rec["kind"]),
            coords=np.asarray(rec["coords"], dtype=np.float64),
            demands=None if rec.get("demands") is None else np.asarray(rec["demands"]),
            capacity=rec.get("capacity"),
            id=rec.get("id", ""),
            scale=float(rec.get("scale", 1.0)),
            offset=tuple(rec.get("offset", (0.0, 0.0))),
            seed=rec.get("seed"),
        )


def capacity_for(n: int) -> int:
    """Vehicle capacity for ``n`` customers.

    Linear between the anchors (20, 30), (50, 40), (100, 50); 10 more per
    100 customers past 100; held at 30 below 20.
    """
    if n <= CAPACITY_ANCHORS[0][0]:
        return CAPACITY_ANCHORS[0][1]
    for (n0, c0), (n1, c1) in zip(CAPACITY_ANCHORS, CAPACITY_ANCHORS[1:]):
        if n <= n1:
            value = c0 + (c1 - c0) * (n - n0) / (n1 - n0)
            return int(math.floor(value + 0.5))
    n_last, c_last = CAPACITY_ANCHORS[-1]
    return int(math.floor(c_last + 10.0 * (n - n_last) / 100.0 + 0.5))


def _check_size(n: int) -> None:
    if n < 2:
        raise InvalidSizeError(f"instance size must be >= 2, got {n}")


def generate_tsp(n: int, rng: np.random.Generator, id: str = "") -> VrpInstance:
    _check_size(n)
    return VrpInstance(Problem.TSP, rng.random((n, 2)), id=id or f"tsp{n}")


def generate_cvrp(
    n: int, rng: np.random.Generator, capacity: int | None = None, id: str = ""
) -> VrpInstance:
    _check_size(n)
    coords = rng.random((n + 1, 2))
    demands = rng.integers(1, MAX_DEMAND + 1, size=n)
    cap = capacity_for(n) if capacity is None else capacity
    return VrpInstance(Problem.CVRP, coords, demands, cap, id=id or f"cvrp{n}")


def generate(kind: Problem | str, n: int, rng: np.random.Generator, **kw) -> VrpInstance:
    kind = Problem.parse(kind)
    if kind is Problem.TSP:
        return generate_tsp(n, rng, **kw)
    return generate_cvrp(n, rng, **kw)


def generate_arrays(kind: Problem | str, n: int, count: int, rng: np.random.Generator,
                    capacity: int | None = None):
    """Vectorized generation for training batches.

    Returns ``(coords, demands, capacity)``; demands has a leading zero for
    the depot and is None for TSP. Draw order matches ``count`` sequential
    calls of :func:`generate` on the same generator.
    """
    kind = Problem.parse(kind)
    _check_size(n)
    if kind is Problem.TSP:
        return rng.random((count, n, 2)), None, None
    coords = np.empty((count, n + 1, 2))
    demands = np.zeros((count, n + 1), dtype=np.int64)
    for b in range(count):
        coords[b] = rng.random((n + 1, 2))
        demands[b, 1:] = rng.integers(1, MAX_DEMAND + 1, size=n)
    cap = capacity_for(n) if capacity is None else capacity
    return coords, demands, cap


# --- unit-square symmetries -------------------------------------------------

_SYMMETRIES = (
    lambda x, y: (x, y),
    lambda x, y: (1 - y, x),  # rotate 90
    lambda x, y: (1 - x, 1 - y),  # rotate 180
    lambda x, y: (y, 1 - x),  # rotate 270
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, x),
    lambda x, y: (1 - y, 1 - x),
)
N_AUGMENTATIONS = len(_SYMMETRIES)


def transform_coords(coords, t: int):
    """Apply symmetry ``t`` to an array (numpy or torch) whose last axis is (x, y)."""
    if not 0 <= t < N_AUGMENTATIONS:
        raise ValueError(f"augmentation index must be in 0..7, got {t}")
    x, y = coords[..., 0], coords[..., 1]
    nx, ny = _SYMMETRIES[t](x, y)
    if isinstance(coords, np.ndarray):
        return np.stack([np.broadcast_to(nx, x.shape), np.broadcast_to(ny, y.shape)], axis=-1)
    import torch

    return torch.stack([nx, ny], dim=-1)


def augment(instance: VrpInstance, t: int) -> VrpInstance:
    if t == 0:
        return instance
    return replace(instance, coords=transform_coords(instance.coords, t), raw_coords=None)


# --- normalization ----------------------------------------------------------

def normalize_coords(instance: VrpInstance) -> VrpInstance:
    pts = instance.coords
    lo = pts.min(axis=0)
    span = float((pts.max(axis=0) - lo).max())
    if span <= 0.0:
        raise DegenerateInstanceError(f"{instance.id or 'instance'}: all points coincide")
    raw = instance.raw_coords if instance.raw_coords is not None else pts
    return replace(
        instance,
        coords=(pts - lo) / span,
        scale=instance.scale * span,
        offset=(
            instance.offset[0] + instance.scale * float(lo[0]),
            instance.offset[1] + instance.scale * float(lo[1]),
        ),
        raw_coords=raw,
    )


# --- TSPLIB / CVRPLIB -------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


def parse_benchmark(path: str | Path, format: str | None = None) -> VrpInstance:
    """Read a TSPLIB (``.tsp``) or CVRPLIB (``.vrp``) file with EUC_2D weights."""
    path = Path(path)
    text = path.read_text()
    header: dict[str, str] = {}
    sections: dict[str, list[list[str]]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split(":")[0].strip().upper()
        if key in _SECTIONS or line.upper() in _SECTIONS:
            current = line.split(":")[0].strip().upper()
            sections[current] = []
            continue
        if ":" in line and not line[0].isdigit() and not line[0] == "-":
            current = None
            k, v = line.split(":", 1)
            header[k.strip().upper()] = v.strip()
            continue
        if current is None:
            raise ParseError(f"{path.name}: unexpected line {line!r}")
        sections[current].append(line.split())

    fmt = (format or "").upper()
    if not fmt:
        declared = header.get("TYPE", "").upper()
        fmt = "CVRPLIB" if declared.startswith("CVRP") or "CAPACITY" in header else "TSPLIB"
    if fmt not in ("TSPLIB", "CVRPLIB"):
        raise ParseError(f"unknown benchmark format {format!r}")

    ewt = header.get("EDGE_WEIGHT_TYPE", "EUC_2D").upper()
    if ewt != "EUC_2D":
        raise ParseError(f"{path.name}: EDGE_WEIGHT_TYPE {ewt} is not supported (EUC_2D only)")
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError(f"{path.name}: missing NODE_COORD_SECTION")

    ids, pts = [], []
    for row in sections["NODE_COORD_SECTION"]:
        if len(row) < 3:
            raise ParseError(f"{path.name}: NODE_COORD_SECTION row {row!r} is malformed")
        ids.append(int(row[0]))
        pts.append((float(row[1]), float(row[2])))
    if "DIMENSION" in header and int(header["DIMENSION"]) != len(ids):
        raise ParseError(
            f"{path.name}: DIMENSION {header['DIMENSION']} but {len(ids)} coordinates"
        )
    name = header.get("NAME", path.stem)

    if fmt == "TSPLIB":
        inst = VrpInstance(Problem.TSP, np.array(pts), id=name)
        return normalize_coords(inst)

    if "CAPACITY" not in header:
        raise ParseError(f"{path.name}: missing CAPACITY")
    capacity = int(float(header["CAPACITY"]))
    if capacity <= 0:
        raise ParseError(f"{path.name}: CAPACITY must be positive, got {capacity}")
    if "DEMAND_SECTION" not in sections:
        raise ParseError(f"{path.name}: missing DEMAND_SECTION")
    demand_by_id = {int(r[0]): int(r[1]) for r in sections["DEMAND_SECTION"]}
    depot_ids = [int(r[0]) for r in sections.get("DEPOT_SECTION", []) if int(r[0]) >= 0]
    depot = depot_ids[0] if depot_ids else ids[0]
    if depot not in ids:
        raise ParseError(f"{path.name}: DEPOT_SECTION names unknown node {depot}")
    order = [depot] + [i for i in ids if i != depot]
    pos = {i: k for k, i in enumerate(ids)}
    coords = np.array([pts[pos[i]] for i in order])
    demands = []
    for i in order[1:]:
        if i not in demand_by_id:
            raise ParseError(f"{path.name}: DEMAND_SECTION has no entry for node {i}")
        d = demand_by_id[i]
        if d <= 0 or d > capacity:
            raise ParseError(
                f"{path.name}: DEMAND_SECTION node {i} has demand {d} outside [1, CAPACITY={capacity}]"
            )
        demands.append(d)
    inst = VrpInstance(Problem.CVRP, coords, np.array(demands), capacity, id=name)
    return normalize_coords(inst)


def write_benchmark(instance: VrpInstance, path: str | Path, precision: int = 10) -> None:
    """Write ``instance`` in TSPLIB/CVRPLIB syntax (node ids are 1-based)."""
    tsp = instance.kind is Problem.TSP
    lines = [
        f"NAME : {instance.id or 'instance'}",
        f"TYPE : {'TSP' if tsp else 'CVRP'}",
        f"DIMENSION : {instance.n_nodes}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
    ]
    if not tsp:
        lines.append(f"CAPACITY : {instance.capacity}")
    lines.append("NODE_COORD_SECTION")
    for i, (x, y) in enumerate(instance.coords, start=1):
        lines.append(f"{i} {x:.{precision}f} {y:.{precision}f}")
    if not tsp:
        lines.append("DEMAND_SECTION")
        lines.append("1 0")
        for i, d in enumerate(instance.demands, start=2):
            lines.append(f"{i} {int(d)}")
        lines += ["DEPOT_SECTION", "1", "-1"]
    lines.append("EOF")
    Path(path).write_text("\n".join(lines) + "\n")


# --- cached instance sets ---------------------------------------------------

def instance_seed(seed: int, size: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, size, index])


def generate_set(kind: Problem | str, size: int, count: int, seed: int) -> list[VrpInstance]:
    """``count`` instances of one size; instance ``i`` depends only on (seed, size, i)."""
    kind = Problem.parse(kind)
    out = []
    for i in range(count):
        inst = generate(kind, size, instance_seed(seed, size, i), id=f"{kind.value}{size}-{seed}-{i}")
        out.append(replace(inst, seed=seed, meta={"index": i}))
    return out


def save_set(instances: Iterable[VrpInstance], path: str | Path) -> str:
    """Write one JSON record per line; returns the file's sha256."""
    payload = "".join(json.dumps(inst.to_record(), sort_keys=True) + "\n" for inst in instances)
    Path(path).write_text(payload)
    return hashlib.sha256(payload.encode()).hexdigest()


def load_set(path: str | Path) -> list[VrpInstance]:
    with open(path) as fh:
        return [VrpInstance.from_record(json.loads(line)) for line in fh if line.strip()]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def desk_eval_count(size: int) -> int:
    if size <= 20:
        return 1000
    if size <= 50:
        return 200
    return 64


def stack(instances: Sequence[VrpInstance]):
    """Stack same-size instances into ``(coords, demands, capacity)`` arrays."""
    sizes = {inst.n_nodes for inst in instances}
    kinds = {inst.kind for inst in instances}
    if len(sizes) != 1 or len(kinds) != 1:
        raise ValueError("a batch must contain instances of one size and one kind")
    coords = np.stack([inst.coords for inst in instances])
    if instances[0].kind is Problem.TSP:
        return coords, None, None
    demands = np.zeros((len(instances), coords.shape[1]), dtype=np.int64)
    for b, inst in enumerate(instances):
        demands[b, 1:] = inst.demands
    capacity = np.array([inst.capacity for inst in instances], dtype=np.int64)
    return coords, demands, capacity
