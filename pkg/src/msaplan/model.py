"""Min-max performance model for splitting a homogeneous workload across device classes.

Cost is measured in element-timesteps and performance in element-timesteps per
second. A device class aggregates ``count`` identical devices; the model assumes
perfect scaling inside a class, so a class behaves like one device with
``count * p_opt`` performance and ``count * c_max`` capacity.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

INF = math.inf

# Relative slack used when comparing equal-time levels against capacities.
_REL_EPS = 1e-12
_MAX_GRID_POINTS = 20_000_000


class ModelError(ValueError):
    """Invalid input to the performance model."""


@dataclass(frozen=True)
class Workload:
    """A flow case: ``elements`` hexahedral elements of polynomial order ``poly_order``."""

    elements: int
    poly_order: int = 7
    mem_per_element: Optional[float] = 0.001  # GB
    bytes_per_point_output: float = 32.0

    def __post_init__(self):
        if int(self.elements) != self.elements or self.elements < 1:
            raise ModelError(f"elements must be a positive integer, got {self.elements!r}")
        if int(self.poly_order) != self.poly_order or self.poly_order < 1:
            raise ModelError(f"poly_order must be a positive integer, got {self.poly_order!r}")
        if self.mem_per_element is not None and self.mem_per_element < 0:
            raise ModelError("mem_per_element must be non-negative")
        if self.bytes_per_point_output < 0:
            raise ModelError("bytes_per_point_output must be non-negative")

    @property
    def total_memory(self) -> float:
        if self.mem_per_element is None:
            raise ModelError("workload has no mem_per_element")
        return self.elements * self.mem_per_element


@dataclass(frozen=True)
class DeviceClass:
    """A homogeneous group of computing devices.

    ``c_max`` is the per-device capacity in elements (``math.inf`` when
    unbounded). :meth:`derive_capacity` computes it from device memory.
    """

    name: str
    p_opt: float
    c_max: float = INF
    mem_per_device: Optional[float] = None  # GB
    io_bw_per_device: float = 0.0  # GB/s
    count: int = 1

    def __post_init__(self):
        if not self.p_opt > 0:
            raise ModelError(f"{self.name}: p_opt must be > 0, got {self.p_opt!r}")
        if not self.c_max > 0:
            raise ModelError(f"{self.name}: c_max must be > 0 or unbounded, got {self.c_max!r}")
        if int(self.count) != self.count or self.count < 1:
            raise ModelError(f"{self.name}: count must be a positive integer, got {self.count!r}")
        if self.io_bw_per_device < 0:
            raise ModelError(f"{self.name}: io_bw_per_device must be >= 0")
        if self.mem_per_device is not None and self.mem_per_device < 0:
            raise ModelError(f"{self.name}: mem_per_device must be >= 0")

    @property
    def aggregate_p(self) -> float:
        return self.count * self.p_opt

    @property
    def aggregate_cap(self) -> float:
        return self.count * self.c_max

    def derive_capacity(self, mem_per_element: float) -> "DeviceClass":
        """Return a copy whose ``c_max`` is the number of elements that fit in memory."""
        if self.mem_per_device is None:
            raise ModelError(f"{self.name}: mem_per_device not set")
        return replace(self, c_max=capacity_from_memory(self.mem_per_device, mem_per_element))

    def with_count(self, count: int) -> "DeviceClass":
        return replace(self, count=count)

    def scaled(self, k: float) -> "DeviceClass":
        return replace(self, p_opt=self.p_opt * k)


def capacity_from_memory(mem_gb: float, mem_per_element: float) -> int:
    """Elements that fit in ``mem_gb`` gigabytes; guards against 32/0.001 = 31999.999..."""
    if mem_per_element <= 0:
        raise ModelError("mem_per_element must be > 0 to derive a capacity")
    return int(math.floor(mem_gb / mem_per_element + 1e-9))


@dataclass(frozen=True)
class Allocation:
    per_class_cost: dict
    per_device_cost: dict
    t_min: float
    saturated: frozenset = field(default_factory=frozenset)
    feasible: bool = True

    def time_of(self, cls: DeviceClass) -> float:
        return self.per_class_cost[cls.name] / cls.aggregate_p


class OperationDomain(enum.Enum):
    COMMUNICATION = "Communication"
    SCALING = "Scaling"
    EXTREME_SCALING = "ExtremeScaling"

    def __str__(self):
        return self.value


def total_cost(w: Workload) -> int:
    return w.elements


def grid_points(w: Workload) -> int:
    return w.elements * w.poly_order**3


def _check_classes(classes: Sequence[DeviceClass]) -> None:
    if not classes:
        raise ModelError("at least one device class is required")
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ModelError(f"device class names must be unique: {names}")


def tmin_unconstrained(cost: float, classes: Sequence[DeviceClass]) -> float:
    """Additive-performance lower bound, ignoring capacities."""
    _check_classes(classes)
    if cost < 0:
        raise ModelError("cost must be non-negative")
    return cost / sum(c.aggregate_p for c in classes)


def _infeasible(classes: Sequence[DeviceClass]) -> Allocation:
    return Allocation(
        per_class_cost={},
        per_device_cost={},
        t_min=INF,
        saturated=frozenset(),
        feasible=False,
    )


def solve_allocation(cost: float, classes: Sequence[DeviceClass]) -> Allocation:
    """Split ``cost`` to minimise the slowest class's time under capacity limits.

    Water-filling: share the remaining cost in proportion to aggregate
    performance, pin every class whose share exceeds its capacity, and repeat
    over the rest. Pinning only raises the common level, so a class that
    violates once stays pinned; at most ``len(classes)`` rounds are needed.
    """
    _check_classes(classes)
    if cost < 0:
        raise ModelError("cost must be non-negative")
    if cost > sum(c.aggregate_cap for c in classes):
        return _infeasible(classes)

    share = {c.name: 0.0 for c in classes}
    saturated: list[str] = []
    active = list(classes)
    remaining = float(cost)
    level = 0.0
    while active:
        perf = sum(c.aggregate_p for c in active)
        level = remaining / perf
        over = [c for c in active if c.aggregate_p * level > c.aggregate_cap * (1 + _REL_EPS)]
        if not over:
            for c in active:
                share[c.name] = c.aggregate_p * level
            break
        for c in over:
            share[c.name] = float(c.aggregate_cap)
            remaining -= c.aggregate_cap
            saturated.append(c.name)
        active = [c for c in active if c not in over]
        remaining = max(remaining, 0.0)

    t_min = max(share[c.name] / c.aggregate_p for c in classes)
    return Allocation(
        per_class_cost=share,
        per_device_cost={c.name: share[c.name] / c.count for c in classes},
        t_min=t_min,
        saturated=frozenset(saturated),
        feasible=True,
    )


def _compositions(k: int, steps: int) -> np.ndarray:
    if k == 1:
        return np.array([[steps]], dtype=np.int64)
    if k == 2:
        a = np.arange(steps + 1, dtype=np.int64)
        return np.stack([a, steps - a], axis=1)
    parts = []
    for first in range(steps + 1):
        rest = _compositions(k - 1, steps - first)
        parts.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.concatenate(parts)


@lru_cache(maxsize=8)
def _simplex_grid(k: int, steps: int) -> np.ndarray:
    """All non-negative integer k-vectors summing to ``steps``, as an (m, k) array."""
    out = _compositions(k, steps)
    out.setflags(write=False)
    return out


def _class_times(cost: float, classes: Sequence[DeviceClass], steps: int) -> np.ndarray:
    """(k, steps+1) time of class i holding g grid units; ``inf`` beyond capacity."""
    units = np.arange(steps + 1) * (cost / steps)
    out = np.empty((len(classes), steps + 1))
    for i, c in enumerate(classes):
        out[i] = np.where(units <= c.aggregate_cap * (1 + _REL_EPS), units / c.aggregate_p, np.inf)
    return out


def _grid_by_enumeration(times: np.ndarray, steps: int) -> tuple:
    grid = _simplex_grid(times.shape[0], steps)
    t = np.max(times[np.arange(times.shape[0]), grid], axis=1)
    best = int(np.argmin(t))
    return float(t[best]), grid[best].tolist()


def _grid_by_folding(times: np.ndarray, steps: int) -> tuple:
    """Same minimum as enumeration, one class at a time.

    ``best[r]`` is the lowest max-time for the classes folded so far sharing
    ``r`` units; adding class j takes ``min_b max(best[r-b], t_j[b])`` over
    every b, so all grid points are still covered. The last class only needs
    ``r = steps``.
    """
    k = times.shape[0]
    best = times[0]
    picks = []
    inf_pad = np.full(steps, np.inf)
    for j in range(1, k):
        padded = np.concatenate([inf_pad, best])
        rev = times[j][::-1]  # rev[i] is class j holding b = steps - i units
        if j == k - 1:
            cand = np.maximum(padded[steps:], rev)  # prior classes hold i units
            i = int(np.argmin(cand))
            picks.append(steps - i)
            best = np.array([cand[i]])
            break
        # window[r, i] = best[r - (steps - i)], inf where that index is negative
        window = np.lib.stride_tricks.sliding_window_view(padded, steps + 1)
        cand = np.maximum(window, rev)
        i = np.argmin(cand, axis=1)
        best = cand[np.arange(steps + 1), i]
        picks.append(steps - i)

    shares = [0] * k
    r = steps
    for j in range(k - 1, 0, -1):
        shares[j] = int(picks[j - 1] if j == k - 1 else picks[j - 1][r])
        r -= shares[j]
    shares[0] = r
    return float(best[-1]), shares


def brute_force_allocation(
    cost: float, classes: Sequence[DeviceClass], grid_steps: int = 1000, method: str = "fold"
) -> Allocation:
    """Exhaustive search over the simplex of splits at resolution ``cost/grid_steps``.

    Verification oracle for :func:`solve_allocation`; only meant for tests.
    ``method="enumerate"`` materialises every grid point; ``"fold"`` reaches
    the same minimum in O(k * grid_steps**2) without the full grid.
    """
    _check_classes(classes)
    if len(classes) > 4:
        raise ModelError("brute force supports at most 4 device classes")
    if grid_steps < 10:
        raise ModelError("grid_steps must be >= 10")
    if cost < 0:
        raise ModelError("cost must be non-negative")
    if method not in ("fold", "enumerate"):
        raise ModelError(f"unknown method {method!r}")
    if method == "enumerate" and math.comb(grid_steps + len(classes) - 1, len(classes) - 1) > _MAX_GRID_POINTS:
        raise ModelError(f"grid too large for {len(classes)} classes at {grid_steps} steps")

    names = [c.name for c in classes]
    if cost == 0:
        zero = {n: 0.0 for n in names}
        return Allocation(zero, dict(zero), 0.0, frozenset(), True)

    times = _class_times(cost, classes, grid_steps)
    search = _grid_by_folding if method == "fold" else _grid_by_enumeration
    t_best, units = search(times, grid_steps)
    if not math.isfinite(t_best):
        return _infeasible(classes)

    per_class = {n: units[i] * (cost / grid_steps) for i, n in enumerate(names)}
    sat = frozenset(
        c.name for c in classes if math.isfinite(c.aggregate_cap) and per_class[c.name] >= c.aggregate_cap * (1 - 1e-9)
    )
    return Allocation(
        per_class_cost=per_class,
        per_device_cost={c.name: per_class[c.name] / c.count for c in classes},
        t_min=t_best,
        saturated=sat,
        feasible=True,
    )


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    required_gb: float
    available_gb: float


def feasibility(w: Workload, classes: Iterable[DeviceClass]) -> Feasibility:
    if w.mem_per_element is None:
        raise ModelError("feasibility needs mem_per_element")
    required = w.total_memory
    available = 0.0
    for c in classes:
        if c.mem_per_device is None:
            raise ModelError(f"{c.name}: mem_per_device not set")
        available += c.count * c.mem_per_device
    return Feasibility(required <= available + 1e-9, required, available)


def classify_domain(
    t_a: float, t_c: float, c: float, c_max_total: float, extreme_fill_ratio: float = 0.5
) -> OperationDomain:
    if c_max_total == 0:
        raise ModelError("c_max_total must be non-zero")
    if t_a < 0 or t_c < 0:
        raise ModelError("times must be non-negative")
    if t_a <= t_c:
        return OperationDomain.COMMUNICATION
    if c / c_max_total >= extreme_fill_ratio:
        return OperationDomain.EXTREME_SCALING
    return OperationDomain.SCALING


def calibrate_popt(runs: Sequence[dict]) -> float:
    """Best measured per-device throughput over a set of runs.

    Each run is a mapping with ``device_count``, ``elements`` and
    ``seconds_per_timestep``.
    """
    if not runs:
        raise ModelError("need at least one run")
    best = 0.0
    for r in runs:
        d, e, s = r["device_count"], r["elements"], r["seconds_per_timestep"]
        if not (d > 0 and e > 0 and s > 0):
            raise ModelError(f"run fields must be positive: {r!r}")
        best = max(best, e / (s * d))
    return best


def allocation_by_weight(cost: float, classes: Sequence[DeviceClass], weights: dict) -> Allocation:
    """Split ``cost`` in proportion to per-device ``weights`` instead of performance.

    The returned ``t_min`` is still evaluated with each class's ``p_opt``.
    Capacities are enforced the same way as in :func:`solve_allocation`.
    """
    pseudo = [replace(c, p_opt=float(weights[c.name])) for c in classes]
    alloc = solve_allocation(cost, pseudo)
    if not alloc.feasible:
        return alloc
    t = max(alloc.per_class_cost[c.name] / c.aggregate_p for c in classes)
    return replace(alloc, t_min=t)

