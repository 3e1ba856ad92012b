"""Command line front end: ``msaplan plan|sweep|partition|io-report|presets``.

Exit status is 0 on success, 1 on usage or scenario errors and 2 when the
requested plan does not fit in the selected devices.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional


from . import __version__
from .mesh import (
    BoxMesh,
    PartitionError,
    RankWeights,
    auto_box_dims,
    build_box_mesh,
    check_unit_depth,
    partition_stats,
)
from .model import Feasibility, ModelError, feasibility, grid_points, solve_allocation
from .perfsim import (
    CI95,
    SCALING_COLUMNS,
    IoReport,
    ScalingTable,
    SimResult,
    SimulationError,
    WeightSearch,
    ci95,
    format_value,
    io_phase,
    jittered_samples,
    search_weight,
    simulate,
    split_devices,
    sweep_strong_scaling,
)
from .scenario import (
    Scenario,
    ScenarioError,
    builtin_presets,
    load_scenario,
    preset_scenario,
    validate,
    with_run,
)

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunReport:
    scenario: Scenario
    counts: dict = field(default_factory=dict)
    allocation: Optional[object] = None
    theoretical_allocation: Optional[object] = None
    feasibility: Optional[Feasibility] = None
    sim: Optional[SimResult] = None
    band: Optional[CI95] = None
    scaling: Optional[ScalingTable] = None
    weights: Optional[WeightSearch] = None
    io: Optional[IoReport] = None
    notes: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        ok = self.feasibility is None or self.feasibility.feasible
        return ok and (self.allocation is None or self.allocation.feasible)


def mesh_for(scenario: Scenario) -> BoxMesh:
    dims = scenario.case.dims
    if dims is None:
        dims = auto_box_dims(scenario.case.workload.elements)
    return build_box_mesh(*dims)


def _table(header, rows, fmt: str) -> str:
    rows = [[format_value(v) for v in r] for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]
    lines = ["  ".join(str(h).rjust(wd) for h, wd in zip(header, widths))]
    lines += ["  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


# -- plan -------------------------------------------------------------------


def build_plan(scenario: Scenario) -> RunReport:
    run = scenario.run
    machine = scenario.simulator_machine()
    counts = split_devices(machine, run.devices, run.mix)
    classes = [machine.group(k).device.with_count(v) for k, v in counts.items()]
    w = scenario.case.workload
    rep = RunReport(scenario, counts)
    rep.feasibility = feasibility(w, classes)
    rep.allocation = solve_allocation(w.elements, classes)
    if run.capacity == "usable":
        theo = scenario.machine.to_machine(w.mem_per_element, mpi=run.mpi, capacity="theoretical")
        t_classes = [theo.group(k).device.with_count(v) for k, v in counts.items()]
        if [c.c_max for c in t_classes] != [c.c_max for c in classes]:
            rep.theoretical_allocation = solve_allocation(w.elements, t_classes)
    if w.poly_order != 7:
        rep.notes.append("mem_per_element default of 0.001 GB/element is calibrated for polynomial order 7")
    if not rep.feasible:
        return rep
    try:
        mesh = mesh_for(scenario)
    except PartitionError as e:
        rep.notes.append(f"no timestep estimate: {e}")
        return rep
    rep.sim = simulate(w, mesh, machine, counts, weight=run.weight, extreme_fill_ratio=run.extreme_fill_ratio)
    if rep.sim.estimate is not None:
        samples = jittered_samples(rep.sim.estimate, run.samples, run.rel_sigma, run.seed)
        rep.band = ci95(samples)
    return rep


def render_plan(rep: RunReport, fmt: str) -> str:
    s = rep.scenario
    w = s.case.workload
    out = []
    if fmt == "text":
        out.append(f"machine: {s.machine.name}  case: {s.case.name}  mix: {s.run.mix}  devices: {s.run.devices}")
        out.append(f"workload: E={w.elements} N={w.poly_order} n={grid_points(w)}")
        f = rep.feasibility
        verdict = "feasible" if f.feasible else "INFEASIBLE"
        out.append(f"memory: required {format_value(f.required_gb)} GB, available {format_value(f.available_gb)} GB -> {verdict}")
    header = ["variant", "class", "devices", "c_max", "elements", "per_device", "per_rank", "time", "saturated"]
    rows = []
    variants = [("usable" if s.run.capacity == "usable" else "theoretical", rep.allocation)]
    if rep.theoretical_allocation is not None:
        variants.append(("theoretical", rep.theoretical_allocation))
    machine = s.simulator_machine()
    for label, alloc in variants:
        if not alloc.feasible:
            continue
        caps = _caps(s, label)
        for name, n in rep.counts.items():
            g = machine.group(name)
            per_dev = alloc.per_device_cost[name]
            rows.append(
                [
                    label,
                    name,
                    n,
                    caps[name],
                    alloc.per_class_cost[name],
                    per_dev,
                    per_dev / g.ranks_per_device,
                    alloc.per_class_cost[name] / (n * g.device.p_opt),
                    "yes" if name in alloc.saturated else "no",
                ]
            )
    if rows:
        out.append(_table(header, rows, fmt).rstrip("\n"))
    if fmt == "text":
        for label, alloc in variants:
            if alloc.feasible:
                out.append(f"t_min ({label} capacity): {alloc.t_min:.9g} s/step")
            else:
                out.append(f"t_min ({label} capacity): infeasible, devices cannot hold {w.elements} elements")
        if rep.sim is not None and rep.sim.estimate is not None:
            e = rep.sim.estimate
            out.append(
                f"simulated: {e.total:.9g} s/step (t_a {e.t_a[e.dominant_rank]:.6g}, t_c {e.t_c[e.dominant_rank]:.6g})"
                f"  domain: {e.domain}"
            )
            if rep.band is not None:
                out.append(
                    f"95% band: {rep.band.mean:.9g} +- {rep.band.half_width:.6g} s "
                    f"({s.run.samples} samples, rel_sigma {s.run.rel_sigma:g}, seed {s.run.seed})"
                )
        elif rep.sim is not None:
            out.append("simulated: infeasible with the fixed weight")
        out.append("verdict: " + ("feasible" if rep.feasible else "INFEASIBLE"))
        out += [f"note: {n}" for n in rep.notes]
    return "\n".join(out) + "\n"


def _caps(s: Scenario, label: str) -> dict:
    m = s.machine.to_machine(s.case.workload.mem_per_element, mpi=s.run.mpi, capacity=label)
    return {g.name: g.device.c_max for g in m.groups}


# -- sweep ------------------------------------------------------------------


def build_sweep(scenario: Scenario, counts, workers: int = 1) -> RunReport:
    rep = RunReport(scenario)
    rep.scaling = sweep_strong_scaling(
        scenario.case.workload,
        mesh_for(scenario),
        scenario.simulator_machine(),
        counts,
        mix=scenario.run.mix,
        weight=scenario.run.weight,
        workers=workers,
    )
    return rep


def render_sweep(rep: RunReport, fmt: str) -> str:
    tab = rep.scaling
    if fmt == "csv":
        return tab.to_csv({"linear_ref": tab.linear_ref()})
    header = list(SCALING_COLUMNS) + ["linear_ref"]
    rows = [[getattr(r, c) for c in SCALING_COLUMNS] + [lr] for r, lr in zip(tab.rows, tab.linear_ref())]
    return _table(header, rows, "text")


# -- partition --------------------------------------------------------------


def build_partition(scenario: Scenario, out_dir: Path) -> tuple:
    mesh = mesh_for(scenario)
    machine = scenario.simulator_machine()
    counts = split_devices(machine, scenario.run.devices, scenario.run.mix)
    res = simulate(scenario.case.workload, mesh, machine, counts, weight=scenario.run.weight)
    if not res.feasible:
        return res, None, None
    out_dir.mkdir(parents=True, exist_ok=True)
    res.partition.write_csv(out_dir / "partition.csv")
    res.plan.write_csv(out_dir / "comm.csv")
    quotas = _rank_quotas(res)
    stats = partition_stats(res.partition, RankWeights(tuple(quotas)))
    unit_depth = check_unit_depth(mesh, res.partition, res.plan)
    return res, stats, unit_depth


def _rank_quotas(res: SimResult) -> list:
    out = []
    for g in res.layout.groups:
        per_rank = res.allocation.per_device_cost[g.name] / g.ranks_per_device
        out += [per_rank] * (g.device.count * g.ranks_per_device)
    return out


# -- io-report --------------------------------------------------------------


def build_io_report(scenario: Scenario) -> tuple:
    io_params = scenario.machine.io
    if not io_params.enabled:
        raise UsageError("I/O is disabled in this scenario; set [io] enabled = true")
    mesh = mesh_for(scenario)
    machine = scenario.simulator_machine()
    counts = split_devices(machine, scenario.run.devices, scenario.run.mix)
    res = simulate(scenario.case.workload, mesh, machine, counts, weight=scenario.run.weight, io=io_params)
    if not res.feasible:
        return res, None
    rep = io_phase(
        res.partition, res.layout.rank_node, io_params, scenario.case.workload.poly_order, res.layout.node_io_bw
    )
    return res, rep


def render_io(res: SimResult, rep: IoReport, fmt: str) -> str:
    node_module, node_elements = {}, {}
    for r, node in enumerate(res.layout.rank_node):
        node_module[node] = res.layout.rank_class[r]
        node_elements[node] = node_elements.get(node, 0) + res.partition.counts[r]
    rows = [
        [n, node_module[n], node_elements[n], float(rep.node_seconds[n])] for n in range(len(rep.node_seconds))
    ]
    out = _table(["node", "module", "elements", "write_seconds"], rows, fmt)
    if fmt == "text":
        flag = "  IMBALANCED (> 2)" if rep.imbalance > 2 else ""
        out += f"node I/O imbalance (max/min): {rep.imbalance:.6g}{flag}\n"
    return out


# -- presets ----------------------------------------------------------------


def render_presets(fmt: str) -> str:
    machines, cases = builtin_presets()
    rows = []
    for m in machines:
        for mod in m.modules:
            rows.append(
                [
                    m.name,
                    mod.name,
                    mod.kind,
                    mod.nodes,
                    mod.devices_per_node,
                    mod.cores_per_node,
                    mod.mem_per_device,
                    mod.c_max(0.001),
                    mod.usable_c_max if mod.usable_c_max is not None else "",
                    mod.p_opt,
                    mod.device_model,
                ]
            )
    head = ["machine", "module", "kind", "nodes", "dev_per_node", "cores_per_node", "mem_gb", "c_max", "usable_c_max", "p_opt", "device"]
    out = _table(head, rows, fmt)
    crow = [[c.name, c.workload.poly_order, c.workload.elements, grid_points(c.workload), c.description] for c in cases]
    out += ("\n" if fmt == "text" else "") + _table(["case", "N", "E", "n", "description"], crow, fmt)
    return out


# -- entry point ------------------------------------------------------------


def _counts(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="TOML scenario file")
    common.add_argument("--preset-machine", help="deep, juwels or lumi-g")
    common.add_argument("--preset-case", help="pipe, tgv or rbc")
    common.add_argument("--seed", type=int, help="seed for timestep jitter")
    common.add_argument("--out", type=Path, help="output directory for files")
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--mix", help="gpu, cpu, mixed or a module name")
    common.add_argument("--devices", type=int, help="total computing devices")
    common.add_argument("--weight", type=float, help="elements per GPU relative to one CPU core")
    common.add_argument("--mpi", choices=("host", "device"))

    p = argparse.ArgumentParser(prog="msaplan", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="model allocation, feasibility and domain")
    sp = sub.add_parser("sweep", parents=[common], help="strong-scaling table")
    sp.add_argument("--counts", type=_counts, help="device counts, e.g. 1,2,4,8")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--search-weights", type=_counts, help="also run a GPU:core weight search at --devices")
    pp = sub.add_parser("partition", parents=[common], help="write partition and gather-scatter CSVs")
    pp.add_argument("--dims", type=_counts, help="mesh dimensions nx,ny,nz")
    sub.add_parser("io-report", parents=[common], help="per-node output time and imbalance")
    sub.add_parser("presets", parents=[common], help="list built-in machines and cases")
    return p


def resolve_scenario(args) -> Scenario:
    if args.scenario is not None:
        s = load_scenario(args.scenario)
        if args.preset_machine or args.preset_case:
            raise UsageError("--scenario cannot be combined with --preset-machine/--preset-case")
    else:
        if not (args.preset_machine and args.preset_case):
            raise UsageError("give --scenario or both --preset-machine and --preset-case")
        s = preset_scenario(args.preset_machine, args.preset_case)
    changes = {}
    for k in ("seed", "mix", "devices", "weight", "mpi"):
        v = getattr(args, k, None)
        if v is not None:
            changes[k] = v
    if getattr(args, "counts", None):
        changes["counts"] = args.counts
    if changes:
        s = with_run(s, **changes)
    if getattr(args, "dims", None):
        if len(args.dims) != 3:
            raise UsageError("--dims needs three integers")
        s = replace(s, case=replace(s.case, dims=tuple(args.dims)))
    problems = validate(s)
    if problems:
        raise ScenarioError("invalid scenario:\n  " + "\n  ".join(problems))
    return s


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "presets":
            stdout.write(render_presets(args.format))
            return EXIT_OK
        s = resolve_scenario(args)
        if args.command == "plan":
            rep = build_plan(s)
            stdout.write(render_plan(rep, args.format))
            return EXIT_OK if rep.feasible else EXIT_INFEASIBLE
        if args.command == "sweep":
            counts = s.run.counts or (s.run.devices,)
            rep = build_sweep(s, counts, workers=args.workers)
            text = render_sweep(rep, args.format)
            if args.search_weights:
                machine = s.simulator_machine()
                ws = search_weight(
                    s.case.workload, mesh_for(s), machine, split_devices(machine, s.run.devices, s.run.mix),
                    args.search_weights, workers=args.workers,
                )
                rows = [[w, t] for w, t in ws.table]
                text += ("\n" if args.format == "text" else "") + _table(["weight", "t_total"], rows, args.format)
                if args.format == "text":
                    text += f"best weight: {format_value(float(ws.best_weight))} ({ws.best_time:.9g} s/step)\n"
            _emit(text, args, "sweep.csv", stdout)
            return EXIT_OK
        if args.command == "partition":
            out_dir = args.out or Path(".")
            res, stats, unit_depth = build_partition(s, out_dir)
            if stats is None:
                stdout.write("partition: infeasible with these devices\n")
                return EXIT_INFEASIBLE
            stdout.write(
                f"mesh: {'x'.join(str(d) for d in mesh_for(s).dims)}  ranks: {res.partition.n_ranks}\n"
                f"wrote {out_dir / 'partition.csv'} and {out_dir / 'comm.csv'}\n"
                f"imbalance: {stats.imbalance:.6g} (max {stats.max_count}, min {stats.min_count})\n"
                f"inter-rank faces: {res.plan.inter_rank_faces}  exchanged points: {res.plan.total_exchanged_points}"
                " (face points only, upper bound)\n"
                f"unit-depth check: {'ok' if unit_depth else 'FAILED'}\n"
            )
            return EXIT_OK
        if args.command == "io-report":
            res, rep = build_io_report(s)
            if rep is None:
                stdout.write("io-report: infeasible with these devices\n")
                return EXIT_INFEASIBLE
            _emit(render_io(res, rep, args.format), args, "io.csv", stdout)
            return EXIT_OK
    except (ScenarioError, UsageError, PartitionError, SimulationError, ModelError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


def _emit(text: str, args, filename: str, stdout) -> None:
    stdout.write(text)
    if args.out is not None and args.format == "csv":
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / filename).write_text(text)


def main() -> None:
    sys.exit(run())
