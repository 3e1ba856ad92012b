"""Machine and flow-case descriptions, built-in presets, and TOML scenario files.

A scenario file has up to five tables::

    [machine]            # preset = "deep" | "juwels" | "lumi-g", or name = "..." with full modules
    [machine.modules.booster]
    usable_c_max = 28000 # any module field may be overridden

    [case]               # preset = "pipe" | "tgv" | "rbc", or elements = ...
    dims = [64, 64, 64]

    [network]
    mpi = "host"         # which path GPU ranks use; CPU ranks always use host
    [network.host]
    alpha = 2e-6

    [io]
    enabled = true

    [run]
    mix = "mixed"
    devices = 32

Unknown keys are errors. ``serialize`` writes a fully expanded file with no
preset references, which loads back to an equal scenario.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli
import tomli_w

from .model import DeviceClass, ModelError, Workload, capacity_from_memory
from .perfsim import DeviceGroup, IoParams, Machine, NetworkParams, SimulationError


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ModuleSpec:
    """One module of a machine.

    A computing device is one logical GPU on GPU modules and one whole node on
    CPU modules, so ``p_opt``, ``mem_per_device`` and ``eff_half_load`` are per
    GPU or per node respectively. ``count`` defaults to
    ``nodes * devices_per_node``.
    """

    name: str
    kind: str
    nodes: int
    devices_per_node: int
    cores_per_node: int
    mem_per_device: float
    p_opt: float
    eff_half_load: float = 0.0
    usable_c_max: Optional[float] = None
    io_bw_per_node: float = 0.0
    host_mem_per_node: float = 0.0
    device_model: str = ""
    count: int = 0

    def __post_init__(self):
        if self.count == 0:
            object.__setattr__(self, "count", self.nodes * self.devices_per_node)

    @property
    def ranks_per_device(self) -> int:
        return 1 if self.kind == "gpu" else self.cores_per_node

    def c_max(self, mem_per_element: float) -> int:
        return capacity_from_memory(self.mem_per_device, mem_per_element)

    def device_class(self, mem_per_element: float, capacity: str = "usable") -> DeviceClass:
        cap = self.c_max(mem_per_element)
        if capacity == "usable" and self.usable_c_max is not None:
            cap = min(cap, self.usable_c_max)
        return DeviceClass(
            name=self.name,
            p_opt=self.p_opt,
            c_max=cap,
            mem_per_device=self.mem_per_device,
            io_bw_per_device=self.io_bw_per_node / self.devices_per_node,
            count=self.count,
        )


@dataclass(frozen=True)
class MachineSpec:
    name: str
    modules: tuple
    network: dict = field(default_factory=dict)  # "host" / "device" -> NetworkParams
    io: IoParams = IoParams()
    description: str = ""

    def module(self, name: str) -> ModuleSpec:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_machine(self, mem_per_element: float, mpi: str = "host", capacity: str = "usable") -> Machine:
        """Simulator view; GPU modules communicate over the ``mpi`` path."""
        groups = []
        for m in self.modules:
            path = mpi if m.kind == "gpu" else "host"
            groups.append(
                DeviceGroup(
                    device=m.device_class(mem_per_element, capacity),
                    kind=m.kind,
                    ranks_per_device=m.ranks_per_device,
                    devices_per_node=m.devices_per_node,
                    eff_half_load=m.eff_half_load,
                    net=self.network[path],
                    node_io_bw=m.io_bw_per_node or None,
                    c_max_theoretical=m.c_max(mem_per_element),
                )
            )
        return Machine(self.name, tuple(groups), self.io)


@dataclass(frozen=True)
class CaseSpec:
    name: str
    workload: Workload
    dims: Optional[tuple] = None
    description: str = ""


@dataclass(frozen=True)
class RunOptions:
    mix: str = "mixed"
    devices: int = 2
    counts: tuple = ()
    weight: Optional[float] = None
    weight_grid: tuple = ()
    mpi: str = "host"
    capacity: str = "usable"
    extreme_fill_ratio: float = 0.5
    seed: int = 0
    samples: int = 100
    rel_sigma: float = 0.0


@dataclass(frozen=True)
class Scenario:
    machine: MachineSpec
    case: CaseSpec
    run: RunOptions = RunOptions()

    def simulator_machine(self) -> Machine:
        return self.machine.to_machine(
            self.case.workload.mem_per_element, mpi=self.run.mpi, capacity=self.run.capacity
        )


# -- presets ----------------------------------------------------------------
#
# Node counts, core counts and memory sizes are the published hardware
# figures. Throughputs (p_opt, element-timesteps/s per device), saturation
# loads, network and I/O rates are not published; they are calibration
# choices that reproduce the reported efficiency bands:
#   CPU cores ~300 el-steps/s (Skylake class), V100 = 100 cores, A100 = 1.6 V100,
#   MI250X GCD = 1.3 V100; eff_half_load sets the GPU strong-scaling falloff.
#   200 gather-scatter rounds per step stand in for the CG/GMRES iterations
#   of one step, whose count is not published.

_GS_ROUNDS = 200


def _deep() -> MachineSpec:
    return MachineSpec(
        name="deep",
        description="DEEP prototype: ESB booster (V100) + DAM-style cluster",
        modules=(
            ModuleSpec(
                name="booster",
                kind="gpu",
                nodes=75,
                devices_per_node=1,
                cores_per_node=16,
                mem_per_device=32.0,
                p_opt=30000.0,
                eff_half_load=2500.0,
                usable_c_max=30000,
                io_bw_per_node=0.0,
                host_mem_per_node=48.0,
                device_model="Nvidia V100",
            ),
            ModuleSpec(
                name="cluster",
                kind="cpu",
                nodes=50,
                devices_per_node=1,
                cores_per_node=24,
                mem_per_device=192.0,
                p_opt=24 * 300.0,
                device_model="2 x 12 core Intel Xeon 6146",
            ),
        ),
        network={
            "host": NetworkParams(alpha=2e-6, beta=6.4e-10, gs_rounds_per_step=_GS_ROUNDS),
            "device": NetworkParams(alpha=1.5e-6, beta=6.4e-10, gs_rounds_per_step=_GS_ROUNDS),
        },
        io=IoParams(enabled=False, bytes_per_point=32.0, node_io_bw=2.0, output_every=1),
    )


def _juwels() -> MachineSpec:
    return MachineSpec(
        name="juwels",
        description="JUWELS Booster (4 x A100 per node) + JUWELS Cluster",
        modules=(
            ModuleSpec(
                name="booster",
                kind="gpu",
                nodes=936,
                devices_per_node=4,
                cores_per_node=48,
                mem_per_device=40.0,
                p_opt=48000.0,
                eff_half_load=2200.0,
                host_mem_per_node=512.0,
                device_model="Nvidia A100",
            ),
            ModuleSpec(
                name="cluster",
                kind="cpu",
                nodes=2271,
                devices_per_node=1,
                cores_per_node=48,
                mem_per_device=96.0,
                p_opt=48 * 300.0,
                device_model="2 x 24 core Intel Xeon 8168",
            ),
        ),
        network={
            "host": NetworkParams(alpha=2e-6, beta=3.2e-10, gs_rounds_per_step=_GS_ROUNDS),
            "device": NetworkParams(alpha=1.9e-6, beta=3.2e-10, gs_rounds_per_step=_GS_ROUNDS),
        },
        io=IoParams(enabled=False, bytes_per_point=32.0, node_io_bw=2.0, output_every=1),
    )


def _lumi_g() -> MachineSpec:
    return MachineSpec(
        name="lumi-g",
        description="LUMI-G: 4 x MI250X per node, one GCD per device",
        modules=(
            ModuleSpec(
                name="lumi-g",
                kind="gpu",
                nodes=2560,
                devices_per_node=8,
                cores_per_node=64,
                mem_per_device=64.0,
                p_opt=39000.0,
                eff_half_load=2500.0,
                host_mem_per_node=512.0,
                device_model="AMD Instinct MI250X GCD",
            ),
        ),
        network={
            "host": NetworkParams(alpha=2.5e-5, beta=2.5e-9, gs_rounds_per_step=_GS_ROUNDS),
            "device": NetworkParams(alpha=2e-6, beta=2e-10, gs_rounds_per_step=_GS_ROUNDS),
        },
        io=IoParams(enabled=False, bytes_per_point=32.0, node_io_bw=2.0, output_every=1),
    )


MACHINE_PRESETS = {"deep": _deep, "juwels": _juwels, "lumi-g": _lumi_g}

CASE_PRESETS = {
    "pipe": lambda: CaseSpec("pipe", Workload(36480, 7), None, "Turbulent pipe, Re_b = 5300"),
    "tgv": lambda: CaseSpec("tgv", Workload(262144, 7), (64, 64, 64), "Taylor-Green vortex, Re = 1600"),
    "rbc": lambda: CaseSpec(
        "rbc", Workload(2097152, 7), (128, 128, 128), "Rayleigh-Benard convection, Ra = 1e11"
    ),
}


def machine_preset(name: str) -> MachineSpec:
    try:
        return MACHINE_PRESETS[name]()
    except KeyError:
        raise ScenarioError(f"unknown machine preset {name!r}; choose from {sorted(MACHINE_PRESETS)}") from None


def case_preset(name: str) -> CaseSpec:
    try:
        return CASE_PRESETS[name]()
    except KeyError:
        raise ScenarioError(f"unknown case preset {name!r}; choose from {sorted(CASE_PRESETS)}") from None


def builtin_presets() -> tuple:
    """``(machines, cases)`` as lists of specs."""
    return [f() for f in MACHINE_PRESETS.values()], [f() for f in CASE_PRESETS.values()]


# -- validation ----------------------------------------------------------------


def validate(spec) -> list:
    """Violations as ``"<field>: <rule>"`` strings; empty when everything holds."""
    if isinstance(spec, Scenario):
        out = validate(spec.machine) + validate(spec.case)
        out += _validate_run(spec.run, spec.machine)
        return out
    if isinstance(spec, MachineSpec):
        return _validate_machine(spec)
    if isinstance(spec, CaseSpec):
        return _validate_case(spec)
    raise TypeError(f"cannot validate {type(spec).__name__}")


def _validate_machine(m: MachineSpec) -> list:
    out = []
    names = [mod.name for mod in m.modules]
    if not m.modules:
        out.append("machine.modules: at least one module")
    if len(set(names)) != len(names):
        out.append("machine.modules: names must be unique")
    for mod in m.modules:
        p = f"machine.modules.{mod.name}"
        if mod.kind not in ("gpu", "cpu"):
            out.append(f"{p}.kind: must be 'gpu' or 'cpu'")
        for k in ("nodes", "devices_per_node", "cores_per_node"):
            if getattr(mod, k) < 1:
                out.append(f"{p}.{k}: must be >= 1")
        if mod.count != mod.nodes * mod.devices_per_node:
            out.append(f"{p}.count: must equal nodes * devices_per_node")
        if mod.kind == "cpu" and mod.devices_per_node != 1:
            out.append(f"{p}.devices_per_node: a CPU device is one node, must be 1")
        if not mod.p_opt > 0:
            out.append(f"{p}.p_opt: must be > 0")
        if not mod.mem_per_device > 0:
            out.append(f"{p}.mem_per_device: must be > 0")
        if mod.eff_half_load < 0:
            out.append(f"{p}.eff_half_load: must be >= 0")
        if mod.usable_c_max is not None and not mod.usable_c_max > 0:
            out.append(f"{p}.usable_c_max: must be > 0")
        if mod.io_bw_per_node < 0:
            out.append(f"{p}.io_bw_per_node: must be >= 0")
    for path in ("host", "device"):
        net = m.network.get(path)
        if net is None:
            out.append(f"network.{path}: missing")
            continue
        for k in ("alpha", "beta", "gs_rounds_per_step"):
            if getattr(net, k) < 0:
                out.append(f"network.{k} ≥ 0" if path == "host" else f"network.{path}.{k} ≥ 0")
    io = m.io
    if io.bytes_per_point < 0:
        out.append("io.bytes_per_point ≥ 0")
    if io.node_io_bw < 0:
        out.append("io.node_io_bw ≥ 0")
    if io.output_every < 1:
        out.append("io.output_every ≥ 1")
    return out


def _validate_case(c: CaseSpec) -> list:
    out = []
    w = c.workload
    if w.elements < 1:
        out.append("case.elements: must be >= 1")
    if w.poly_order < 1:
        out.append("case.poly_order: must be >= 1")
    if w.mem_per_element is not None and not w.mem_per_element > 0:
        out.append("case.mem_per_element: must be > 0")
    if c.dims is not None:
        if len(c.dims) != 3 or any(d < 1 for d in c.dims):
            out.append("case.dims: three positive integers")
        elif math.prod(c.dims) != w.elements:
            out.append("case.dims: product must equal elements")
    return out


def _validate_run(r: RunOptions, m: MachineSpec) -> list:
    out = []
    if r.mix not in ("gpu", "cpu", "mixed") and r.mix not in [mod.name for mod in m.modules]:
        out.append("run.mix: 'gpu', 'cpu', 'mixed' or a module name")
    if r.devices < 1:
        out.append("run.devices: must be >= 1")
    if list(r.counts) != sorted(set(r.counts)) or any(c < 1 for c in r.counts):
        out.append("run.counts: strictly ascending positive integers")
    if r.weight is not None and not r.weight > 0:
        out.append("run.weight: must be > 0")
    if any(not w > 0 for w in r.weight_grid):
        out.append("run.weight_grid: weights must be > 0")
    if r.mpi not in ("host", "device"):
        out.append("run.mpi: 'host' or 'device'")
    if r.capacity not in ("usable", "theoretical"):
        out.append("run.capacity: 'usable' or 'theoretical'")
    if not 0 < r.extreme_fill_ratio <= 1:
        out.append("run.extreme_fill_ratio: in (0, 1]")
    if r.samples < 2:
        out.append("run.samples: must be >= 2")
    if r.rel_sigma < 0:
        out.append("run.rel_sigma: must be >= 0")
    if r.seed < 0:
        out.append("run.seed: must be >= 0")
    return out


# -- file format ------------------------------------------------------------

_MODULE_KEYS = {f.name for f in fields(ModuleSpec)} - {"name"}
_NET_KEYS = {f.name for f in fields(NetworkParams)}
_IO_KEYS = {f.name for f in fields(IoParams)}
_CASE_KEYS = {"preset", "name", "elements", "poly_order", "mem_per_element", "bytes_per_point_output", "dims", "description"}
_RUN_KEYS = {f.name for f in fields(RunOptions)} - {"mpi"}
_SECTIONS = {"machine", "case", "network", "io", "run"}


def _reject_unknown(table: dict, allowed: set, where: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown key(s) {', '.join(extra)}")


def _machine_to_dict(m: MachineSpec) -> dict:
    mods = {}
    for mod in m.modules:
        d = asdict(mod)
        del d["name"]
        if d["usable_c_max"] is None:
            del d["usable_c_max"]
        mods[mod.name] = d
    return {"name": m.name, "description": m.description, "modules": mods}


def _build_machine(table: dict, network: dict, io: dict) -> MachineSpec:
    table = dict(table)
    _reject_unknown(table, {"preset", "name", "description", "modules"}, "machine")
    preset = table.pop("preset", None)
    if preset is not None:
        base = machine_preset(preset)
        data = _machine_to_dict(base)
        net = {k: asdict(v) for k, v in base.network.items()}
        io_d = asdict(base.io)
    else:
        if "name" not in table or "modules" not in table:
            raise ScenarioError("machine: give either preset or name + modules")
        data = {"name": table["name"], "description": "", "modules": {}}
        net = {"host": asdict(NetworkParams()), "device": asdict(NetworkParams())}
        io_d = asdict(IoParams())
    for k in ("name", "description"):
        if k in table:
            data[k] = table[k]
    for mname, over in table.get("modules", {}).items():
        if not isinstance(over, dict):
            raise ScenarioError(f"machine.modules.{mname}: expected a table")
        _reject_unknown(over, _MODULE_KEYS, f"machine.modules.{mname}")
        merged = dict(data["modules"].get(mname, {}))
        merged.update(over)
        if "count" not in over and ("nodes" in over or "devices_per_node" in over):
            merged["count"] = 0
        data["modules"][mname] = merged

    network = dict(network)
    _reject_unknown(network, {"mpi", "host", "device"}, "network")
    problems = []
    for path in ("host", "device"):
        if path in network:
            _reject_unknown(network[path], _NET_KEYS, f"network.{path}")
            net[path].update(network[path])
        prefix = "network" if path == "host" else "network.device"
        problems += [f"{prefix}.{k} ≥ 0" for k, v in net[path].items() if v < 0]
    _reject_unknown(io, _IO_KEYS, "io")
    io_d.update(io)
    problems += [f"io.{k} ≥ 0" for k in ("bytes_per_point", "node_io_bw") if io_d[k] < 0]
    if io_d["output_every"] < 1:
        problems.append("io.output_every ≥ 1")
    if problems:
        raise ScenarioError("invalid scenario:\n  " + "\n  ".join(problems))

    try:
        modules = []
        for mname, d in data["modules"].items():
            missing = {"kind", "nodes", "devices_per_node", "cores_per_node", "mem_per_device", "p_opt"} - set(d)
            if missing:
                raise ScenarioError(f"machine.modules.{mname}: missing {', '.join(sorted(missing))}")
            modules.append(ModuleSpec(name=mname, **d))
        return MachineSpec(
            name=data["name"],
            modules=tuple(modules),
            network={k: NetworkParams(**v) for k, v in net.items()},
            io=IoParams(**io_d),
            description=data.get("description", ""),
        )
    except (TypeError, SimulationError, ModelError) as e:
        raise ScenarioError(str(e)) from None


def _build_case(table: dict) -> CaseSpec:
    table = dict(table)
    _reject_unknown(table, _CASE_KEYS, "case")
    preset = table.pop("preset", None)
    if preset is not None:
        base = case_preset(preset)
        d = {
            "name": base.name,
            "description": base.description,
            "dims": base.dims,
            **asdict(base.workload),
        }
    elif "elements" in table:
        d = {"name": table.get("name", "custom"), "description": "", "dims": None, **asdict(Workload(1))}
    else:
        raise ScenarioError("case: give either preset or elements")
    if "elements" in table and "dims" not in table and preset is not None:
        d["dims"] = None
    d.update(table)
    w_keys = {f.name for f in fields(Workload)}
    try:
        workload = Workload(**{k: d[k] for k in w_keys})
    except ModelError as e:
        raise ScenarioError(f"case: {e}") from None
    dims = tuple(int(x) for x in d["dims"]) if d.get("dims") is not None else None
    return CaseSpec(d["name"], workload, dims, d.get("description", ""))


def _build_run(table: dict, network: dict) -> RunOptions:
    _reject_unknown(table, _RUN_KEYS, "run")
    d = dict(table)
    for k in ("counts", "weight_grid"):
        if k in d:
            d[k] = tuple(d[k])
    if "mpi" in network:
        d["mpi"] = network["mpi"]
    try:
        return RunOptions(**d)
    except TypeError as e:
        raise ScenarioError(f"run: {e}") from None


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    if not text.strip():
        raise ScenarioError(f"{source}: parse error: empty scenario file (at line 1, column 1)")
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ScenarioError(f"{source}: parse error: {e}") from None
    _reject_unknown(doc, _SECTIONS, source)
    for k, v in doc.items():
        if not isinstance(v, dict):
            raise ScenarioError(f"{source}: [{k}] must be a table")
    if "machine" not in doc or "case" not in doc:
        raise ScenarioError(f"{source}: both [machine] and [case] are required")
    network = doc.get("network", {})
    scenario = Scenario(
        machine=_build_machine(doc["machine"], network, doc.get("io", {})),
        case=_build_case(doc["case"]),
        run=_build_run(doc.get("run", {}), network),
    )
    problems = validate(scenario)
    if problems:
        raise ScenarioError(f"{source}: invalid scenario:\n  " + "\n  ".join(problems))
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"{path}: {e.strerror}") from None
    return parse_scenario(text, str(path))


def preset_scenario(machine: str, case: str, **run) -> Scenario:
    s = Scenario(machine_preset(machine), case_preset(case), RunOptions(**run))
    problems = validate(s)
    if problems:
        raise ScenarioError("invalid scenario:\n  " + "\n  ".join(problems))
    return s


def scenario_to_dict(s: Scenario) -> dict:
    m = _machine_to_dict(s.machine)
    case = {"name": s.case.name, "description": s.case.description, **asdict(s.case.workload)}
    if case["mem_per_element"] is None:
        del case["mem_per_element"]
    if s.case.dims is not None:
        case["dims"] = list(s.case.dims)
    run = {k: v for k, v in asdict(s.run).items() if v is not None and k != "mpi"}
    run["counts"] = list(s.run.counts)
    run["weight_grid"] = list(s.run.weight_grid)
    network = {"mpi": s.run.mpi, **{k: asdict(v) for k, v in s.machine.network.items()}}
    return {
        "machine": m,
        "case": case,
        "network": network,
        "io": asdict(s.machine.io),
        "run": run,
    }


def serialize(s: Scenario) -> str:
    return tomli_w.dumps(copy.deepcopy(scenario_to_dict(s)))


def with_run(s: Scenario, **changes) -> Scenario:
    return replace(s, run=replace(s.run, **changes))
