"""Per-timestep runtime estimates for partitioned runs on mixed CPU/GPU machines.

A run is a set of device groups (one per machine module). Each device hosts
``ranks_per_device`` MPI ranks: one per logical GPU, one per core on a CPU
node. Elements are apportioned to devices from the model allocation (or a
fixed GPU:core weight), split evenly over each device's ranks, laid out with
recursive coordinate bisection, and timed rank by rank as compute plus
gather-scatter plus optional output.
"""

from __future__ import annotations

import csv
import io as _io
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .mesh import BoxMesh, CommPlan, Partition, comm_plan, largest_remainder, partition_rcb
from .model import (
    Allocation,
    DeviceClass,
    OperationDomain,
    Workload,
    allocation_by_weight,
    classify_domain,
    solve_allocation,
    tmin_unconstrained,
)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class PerfCurve:
    """Sustained throughput ``p_opt * c / (c + eff_half_load)`` at load ``c``."""

    p_opt: float
    eff_half_load: float = 0.0

    def __post_init__(self):
        if not self.p_opt > 0:
            raise SimulationError("p_opt must be > 0")
        if self.eff_half_load < 0:
            raise SimulationError("eff_half_load must be >= 0")

    def rate(self, count: float) -> float:
        if self.eff_half_load == 0:
            return self.p_opt
        if count <= 0:
            return 0.0
        return self.p_opt * count / (count + self.eff_half_load)


@dataclass(frozen=True)
class NetworkParams:
    alpha: float = 0.0  # s per message
    beta: float = 0.0  # s per point
    gs_rounds_per_step: float = 1.0

    def __post_init__(self):
        for k in ("alpha", "beta", "gs_rounds_per_step"):
            if getattr(self, k) < 0:
                raise SimulationError(f"network.{k} >= 0 violated")


@dataclass(frozen=True)
class IoParams:
    enabled: bool = False
    bytes_per_point: float = 32.0
    node_io_bw: float = 2.0  # GB/s
    output_every: int = 1

    def __post_init__(self):
        if self.bytes_per_point < 0:
            raise SimulationError("io.bytes_per_point >= 0 violated")
        if self.node_io_bw < 0:
            raise SimulationError("io.node_io_bw >= 0 violated")
        if int(self.output_every) != self.output_every or self.output_every < 1:
            raise SimulationError("io.output_every >= 1 violated")


@dataclass(frozen=True)
class TimestepEstimate:
    t_a: np.ndarray = field(repr=False)
    t_c: np.ndarray = field(repr=False)
    t_io: np.ndarray = field(repr=False)
    total: float
    dominant_rank: int
    domain: OperationDomain


def estimate_ta(count: float, curve: PerfCurve) -> float:
    if count < 0:
        raise SimulationError("count must be non-negative")
    if count == 0:
        return 0.0
    return count / curve.rate(count)


def estimate_tc(plan: CommPlan, rank: int, net: NetworkParams) -> float:
    msgs = plan.messages(rank)
    return net.gs_rounds_per_step * sum(net.alpha + net.beta * pts for _, pts in msgs)


@dataclass(frozen=True)
class IoReport:
    node_seconds: np.ndarray
    imbalance: float


def io_phase(
    partition: Partition,
    rank_node: Sequence[int],
    io: IoParams,
    poly_order: int,
    node_io_bw: Optional[Sequence[float]] = None,
) -> IoReport:
    """Write time per node for one output step, and the max/min node ratio."""
    if not io.enabled:
        raise SimulationError("I/O is disabled")
    rank_node = np.asarray(rank_node, dtype=np.int64)
    if rank_node.size != partition.n_ranks:
        raise SimulationError("rank_node length does not match partition")
    n_nodes = int(rank_node.max()) + 1
    bw = np.full(n_nodes, io.node_io_bw, dtype=float) if node_io_bw is None else np.asarray(node_io_bw, float)
    if np.any(bw <= 0):
        raise SimulationError("node I/O bandwidth must be > 0")
    points = np.bincount(rank_node, weights=np.asarray(partition.counts, float), minlength=n_nodes)
    points *= poly_order**3
    seconds = points * io.bytes_per_point / (bw * 1e9)
    hi, lo = seconds.max(), seconds.min()
    if hi == 0:
        ratio = 1.0
    elif lo == 0:
        ratio = math.inf
    else:
        ratio = float(hi / lo)
    return IoReport(seconds, ratio)


def estimate_timestep(
    partition: Partition,
    plan: CommPlan,
    rank_class: Sequence[str],
    curves: Mapping[str, PerfCurve],
    net: Union[NetworkParams, Mapping[str, NetworkParams]],
    io: Optional[IoParams] = None,
    rank_node: Optional[Sequence[int]] = None,
    poly_order: int = 7,
    c_max_total: float = math.inf,
    node_io_bw: Optional[Sequence[float]] = None,
    extreme_fill_ratio: float = 0.5,
) -> TimestepEstimate:
    """Time one step as the slowest rank's compute + exchange (+ amortised output).

    ``curves`` and ``net`` are keyed by the class names in ``rank_class`` and
    describe a single rank. ``c_max_total`` is the summed device capacity used
    to classify the operation domain.
    """
    n = partition.n_ranks
    if len(rank_class) != n or plan.n_ranks != n:
        raise SimulationError("rank maps disagree with the partition")
    missing = set(rank_class) - set(curves)
    if missing:
        raise SimulationError(f"no performance curve for {sorted(missing)}")
    if isinstance(net, NetworkParams):
        net = {name: net for name in curves}
    if set(rank_class) - set(net):
        raise SimulationError("no network parameters for some rank classes")

    t_a = np.array([estimate_ta(partition.counts[r], curves[rank_class[r]]) for r in range(n)])
    msgs = plan.rank_messages
    pts = plan.rank_points
    alpha = np.array([net[c].alpha for c in rank_class])
    beta = np.array([net[c].beta for c in rank_class])
    rounds = np.array([net[c].gs_rounds_per_step for c in rank_class])
    t_c = rounds * (alpha * msgs + beta * pts)

    t_io = np.zeros(n)
    if io is not None and io.enabled:
        if rank_node is None:
            raise SimulationError("rank_node map required when I/O is enabled")
        rep = io_phase(partition, rank_node, io, poly_order, node_io_bw)
        t_io = rep.node_seconds[np.asarray(rank_node)] / io.output_every

    per_rank = t_a + t_c + t_io
    dom = int(np.argmax(per_rank))
    domain = classify_domain(
        float(t_a[dom]), float(t_c[dom]), partition.n_elements, c_max_total, extreme_fill_ratio
    )
    return TimestepEstimate(t_a, t_c, t_io, float(per_rank[dom]), dom, domain)


@dataclass(frozen=True)
class CI95:
    mean: float
    half_width: float


def ci95(samples: Sequence[float]) -> CI95:
    """Normal band for a single time step: mean +- 1.96 population std."""
    x = [float(v) for v in samples]
    if len(x) < 2:
        raise SimulationError("need at least two samples")
    # statistics works in exact arithmetic, so identical samples give exactly 0
    return CI95(statistics.fmean(x), 1.96 * statistics.pstdev(x))


def jittered_samples(estimate: TimestepEstimate, n: int, rel_sigma: float = 0.0, seed: int = 0) -> list:
    if n < 1 or rel_sigma < 0:
        raise SimulationError("need n >= 1 and rel_sigma >= 0")
    if rel_sigma == 0:
        return [estimate.total] * n
    rng = np.random.default_rng(seed)
    return rng.normal(estimate.total, rel_sigma * estimate.total, size=n).tolist()


# -- machine layout ---------------------------------------------------------


@dataclass(frozen=True)
class DeviceGroup:
    """One machine module as seen by the simulator.

    ``device.p_opt`` and ``eff_half_load`` describe a whole device;
    ``device.c_max`` is the usable capacity, ``c_max_theoretical`` the
    memory-derived one used for the extreme-scaling fill ratio.
    """

    device: DeviceClass
    kind: str  # "gpu" or "cpu"
    ranks_per_device: int = 1
    devices_per_node: int = 1
    eff_half_load: float = 0.0
    net: NetworkParams = NetworkParams()
    node_io_bw: Optional[float] = None
    c_max_theoretical: Optional[float] = None

    @property
    def name(self) -> str:
        return self.device.name

    @property
    def capacity_for_fill(self) -> float:
        return self.c_max_theoretical if self.c_max_theoretical is not None else self.device.c_max

    def rank_curve(self) -> PerfCurve:
        r = self.ranks_per_device
        return PerfCurve(self.device.p_opt / r, self.eff_half_load / r)


@dataclass(frozen=True)
class Machine:
    name: str
    groups: tuple
    io: IoParams = IoParams()

    def group(self, name: str) -> DeviceGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def of_kind(self, kind: str) -> list:
        return [g for g in self.groups if g.kind == kind]


def split_devices(machine: Machine, devices: int, mix: str) -> dict:
    """Device count per group for ``devices`` total.

    ``mix`` is ``"gpu"`` or ``"cpu"`` (first group of that kind), ``"mixed"``
    (1:1 between the first GPU and first CPU group), or a group name.
    """
    if devices < 1:
        raise SimulationError("device count must be positive")
    if mix in ("gpu", "cpu"):
        gs = machine.of_kind(mix)
        if not gs:
            raise SimulationError(f"machine {machine.name} has no {mix} module")
        return {gs[0].name: devices}
    if mix == "mixed":
        gpu, cpu = machine.of_kind("gpu"), machine.of_kind("cpu")
        if not gpu or not cpu:
            raise SimulationError(f"machine {machine.name} cannot run a mixed job")
        if devices % 2:
            raise SimulationError("a 1:1 mix needs an even device count")
        return {gpu[0].name: devices // 2, cpu[0].name: devices // 2}
    machine.group(mix)
    return {mix: devices}


@dataclass(frozen=True)
class RunLayout:
    groups: tuple  # (DeviceGroup with count set, ...)
    device_counts: tuple  # elements per device, group-major
    rank_counts: tuple
    rank_class: tuple
    rank_node: tuple
    node_io_bw: tuple


def layout_run(
    machine: Machine,
    counts: Mapping[str, int],
    elements: int,
    allocation: Allocation,
    default_io_bw: float,
) -> RunLayout:
    """Round an allocation to whole elements per device, then per rank, and place ranks on nodes."""
    groups = []
    for g in machine.groups:
        n = counts.get(g.name, 0)
        if n > g.device.count:
            raise SimulationError(f"{g.name}: {n} devices requested, {g.device.count} available")
        if n > 0:
            groups.append(replace(g, device=g.device.with_count(n)))
    quotas = []
    for g in groups:
        quotas += [allocation.per_device_cost[g.name]] * g.device.count
    dev_counts = largest_remainder(quotas, elements)

    rank_counts, rank_class, rank_node, node_bw = [], [], [], []
    d = 0
    node = 0
    for g in groups:
        per_node = g.devices_per_node
        for i in range(g.device.count):
            rc = largest_remainder([dev_counts[d] / g.ranks_per_device] * g.ranks_per_device, dev_counts[d])
            rank_counts += rc
            rank_class += [g.name] * g.ranks_per_device
            rank_node += [node + i // per_node] * g.ranks_per_device
            d += 1
        n_nodes = -(-g.device.count // per_node)
        bw = g.node_io_bw if g.node_io_bw else default_io_bw
        node_bw += [bw] * n_nodes
        node += n_nodes
    return RunLayout(
        tuple(groups), tuple(dev_counts), tuple(rank_counts), tuple(rank_class), tuple(rank_node), tuple(node_bw)
    )


@dataclass(frozen=True)
class SimResult:
    devices: int
    counts: dict
    feasible: bool
    model: Allocation
    model_tmin: float
    bound: float
    allocation: Optional[Allocation] = None
    layout: Optional[RunLayout] = None
    partition: Optional[Partition] = None
    plan: Optional[CommPlan] = None
    estimate: Optional[TimestepEstimate] = None

    def elements_per(self, kind: str, per: str = "device") -> float:
        if self.layout is None:
            return math.nan
        tot, n = 0, 0
        d = 0
        for g in self.layout.groups:
            c = g.device.count
            if g.kind == kind:
                tot += sum(self.layout.device_counts[d : d + c])
                n += c * (g.ranks_per_device if per == "rank" else 1)
            d += c
        return tot / n if n else 0.0


def simulate(
    workload: Workload,
    mesh: BoxMesh,
    machine: Machine,
    counts: Mapping[str, int],
    weight: Optional[float] = None,
    io: Optional[IoParams] = None,
    extreme_fill_ratio: float = 0.5,
) -> SimResult:
    """Model allocation, rounding, partitioning and timing for one configuration.

    With ``weight`` set, each GPU device gets ``weight`` times the elements
    of one CPU rank; a weight that overflows a device's capacity makes the
    configuration infeasible rather than being clipped.
    """
    if mesh.n_elements != workload.elements:
        raise SimulationError(f"mesh has {mesh.n_elements} elements, workload {workload.elements}")
    counts = {k: int(v) for k, v in counts.items() if v > 0}
    if not counts:
        raise SimulationError("no devices selected")
    classes = [machine.group(k).device.with_count(v) for k, v in counts.items()]
    classes.sort(key=lambda c: [g.name for g in machine.groups].index(c.name))
    E = workload.elements
    model = solve_allocation(E, classes)
    bound = tmin_unconstrained(E, classes)
    devices = sum(counts.values())
    base = SimResult(devices, dict(counts), model.feasible, model, model.t_min, bound)
    if not model.feasible:
        return base

    if weight is None:
        alloc = model
    else:
        if weight <= 0:
            raise SimulationError("weight must be positive")
        w = {}
        for c in classes:
            g = machine.group(c.name)
            w[c.name] = weight if g.kind == "gpu" else float(g.ranks_per_device)
        uncapped = [replace(c, c_max=math.inf) for c in classes]
        alloc = allocation_by_weight(E, uncapped, w)
        if any(alloc.per_device_cost[c.name] > c.c_max * (1 + 1e-12) for c in classes):
            return replace(base, feasible=False, allocation=alloc)

    io = io if io is not None else machine.io
    layout = layout_run(machine, counts, E, alloc, io.node_io_bw)
    partition = partition_rcb(mesh, layout.rank_counts)
    plan = comm_plan(mesh, partition, workload.poly_order)
    curves = {g.name: g.rank_curve() for g in layout.groups}
    nets = {g.name: g.net for g in layout.groups}
    c_max_total = sum(g.device.count * g.capacity_for_fill for g in layout.groups)
    est = estimate_timestep(
        partition,
        plan,
        layout.rank_class,
        curves,
        nets,
        io=io,
        rank_node=layout.rank_node,
        poly_order=workload.poly_order,
        c_max_total=c_max_total,
        node_io_bw=layout.node_io_bw,
        extreme_fill_ratio=extreme_fill_ratio,
    )
    return replace(base, allocation=alloc, layout=layout, partition=partition, plan=plan, estimate=est)


# -- sweeps -----------------------------------------------------------------

SCALING_COLUMNS = (
    "devices",
    "gpu_devices",
    "cpu_cores",
    "elements_per_gpu",
    "elements_per_core",
    "t_a_max",
    "t_c_max",
    "t_io_max",
    "t_total",
    "speedup",
    "parallel_efficiency",
    "model_tmin",
    "domain",
)


@dataclass(frozen=True)
class ScalingRow:
    devices: int
    gpu_devices: int
    cpu_cores: int
    elements_per_gpu: float
    elements_per_core: float
    t_a_max: float
    t_c_max: float
    t_io_max: float
    t_total: float
    speedup: float
    parallel_efficiency: float
    model_tmin: float
    domain: str

    @property
    def feasible(self) -> bool:
        return self.domain != "infeasible"


@dataclass(frozen=True)
class ScalingTable:
    rows: tuple

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def linear_ref(self) -> list:
        base = next((r for r in self.rows if r.feasible), None)
        if base is None:
            return [math.nan] * len(self.rows)
        return [base.t_total * base.devices / r.devices for r in self.rows]

    def to_csv(self, extra: Optional[Mapping[str, Sequence]] = None) -> str:
        extra = dict(extra or {})
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(SCALING_COLUMNS) + list(extra))
        for i, r in enumerate(self.rows):
            vals = [getattr(r, c) for c in SCALING_COLUMNS] + [extra[k][i] for k in extra]
            w.writerow([format_value(v) for v in vals])
        return buf.getvalue()


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v) if math.isinf(v) else f"{v:.9g}"
    return str(v)


def _row(res: SimResult, machine: Machine) -> dict:
    gpu = sum(v for k, v in res.counts.items() if machine.group(k).kind == "gpu")
    cores = sum(v * machine.group(k).ranks_per_device for k, v in res.counts.items() if machine.group(k).kind == "cpu")
    row = dict(devices=res.devices, gpu_devices=gpu, cpu_cores=cores, model_tmin=res.model_tmin)
    if not res.feasible or res.estimate is None:
        nan = math.nan
        row.update(
            elements_per_gpu=nan,
            elements_per_core=nan,
            t_a_max=nan,
            t_c_max=nan,
            t_io_max=nan,
            t_total=nan,
            domain="infeasible",
        )
        return row
    e = res.estimate
    row.update(
        elements_per_gpu=res.elements_per("gpu") if gpu else 0.0,
        elements_per_core=res.elements_per("cpu", per="rank") if cores else 0.0,
        t_a_max=float(e.t_a.max()),
        t_c_max=float(e.t_c.max()),
        t_io_max=float(e.t_io.max()),
        t_total=e.total,
        domain=str(e.domain),
    )
    return row


def sweep_strong_scaling(
    workload: Workload,
    mesh: BoxMesh,
    machine: Machine,
    device_counts: Sequence[int],
    mix: str = "mixed",
    weight: Optional[float] = None,
    io: Optional[IoParams] = None,
    workers: int = 1,
) -> ScalingTable:
    """Simulate each device count; speedup and efficiency are relative to the first feasible point."""
    device_counts = list(device_counts)
    if any(b <= a for a, b in zip(device_counts, device_counts[1:])):
        raise SimulationError("device counts must be strictly ascending")

    def one(d):
        return simulate(workload, mesh, machine, split_devices(machine, d, mix), weight=weight, io=io)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, device_counts))
    else:
        results = [one(d) for d in device_counts]

    raw = [_row(r, machine) for r in results]
    base = next((r for r in raw if r["domain"] != "infeasible"), None)
    rows = []
    for r in raw:
        if base is None or r["domain"] == "infeasible":
            r.update(speedup=math.nan, parallel_efficiency=math.nan)
        else:
            s = base["t_total"] / r["t_total"]
            r.update(speedup=s, parallel_efficiency=s * base["devices"] / r["devices"])
        rows.append(ScalingRow(**r))
    return ScalingTable(tuple(rows))


@dataclass(frozen=True)
class WeightSearch:
    best_weight: float
    best_time: float
    table: tuple  # ((weight, t_total), ...)


def search_weight(
    workload: Workload,
    mesh: BoxMesh,
    machine: Machine,
    counts: Mapping[str, int],
    weight_grid: Sequence[float],
    io: Optional[IoParams] = None,
    workers: int = 1,
) -> WeightSearch:
    """Try each GPU:core weight; infeasible weights score ``inf``; ties keep the smaller weight."""
    grid = list(weight_grid)
    if not grid:
        raise SimulationError("weight grid is empty")

    def one(w):
        r = simulate(workload, mesh, machine, counts, weight=w, io=io)
        return r.estimate.total if r.feasible and r.estimate is not None else math.inf

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            times = list(pool.map(one, grid))
    else:
        times = [one(w) for w in grid]
    table = tuple(zip(grid, times))
    best_w, best_t = min(table, key=lambda wt: (wt[1], wt[0]))
    return WeightSearch(best_w, best_t, table)

