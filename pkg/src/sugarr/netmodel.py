"""Network data model for the restoration engine.

Holds the single source of truth for buses, branches, generators and loads,
tracks which elements are energized as the crank path advances, and builds
the nodal admittance matrix over the currently energized subgraph.

All electrical quantities are per-unit on the network MVA base; frequency
quantities are in Hz. The network object is treated as a value: mutating
operations return a new copy and never touch the snapshot handed in.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
import yaml

from .bigload import BigLoad

CASE_FORMAT_VERSION = 1
CRANKPATH_FORMAT_VERSION = 1


class CaseError(ValueError):
    """Raised for malformed or inconsistent case / crank-path input."""


class OrderingError(RuntimeError):
    """Raised when crank steps are applied out of order."""


@dataclass
class Bus:
    id: int
    base_kv: float
    v_min: float | None = None  # per-unit bounds; None defers to step-level defaults
    v_max: float | None = None
    energized: bool = False
    v_real: float | None = None
    v_imag: float | None = None

    def vmag(self) -> float:
        if self.v_real is None or self.v_imag is None:
            raise ValueError(f"bus {self.id} carries no voltage state")
        return float(np.hypot(self.v_real, self.v_imag))


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    status: bool = True


@dataclass
class Generator:
    id: int
    bus: int
    p_set: float = 0.0
    q_set: float = 0.0
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    droop_gain: float = 0.0
    v_set: float = 1.0
    ramp_min: float = -0.5
    ramp_max: float = 0.5
    participates_in_sync: bool = False
    is_reference: bool = False
    energized: bool = False


@dataclass
class LoadRecord:
    bus: int
    kind: str = "constant-power"  # "constant-power" | "big"
    p_d: float | None = None
    q_d: float | None = None
    big: BigLoad | None = None
    energized: bool = False

    def __post_init__(self):
        if self.kind == "constant-power":
            if self.p_d is None or self.q_d is None or self.big is not None:
                raise CaseError(
                    f"load at bus {self.bus}: constant-power record must carry p/q only")
        elif self.kind == "big":
            if self.big is None or self.p_d is not None or self.q_d is not None:
                raise CaseError(f"load at bus {self.bus}: big record must carry a BigLoad only")
        else:
            raise CaseError(f"load at bus {self.bus}: unknown kind {self.kind!r}")


@dataclass
class DispatchTarget:
    p: float
    q: float = 0.0
    v_set: float | None = None


@dataclass
class CrankStep:
    sequence: int
    buses_to_energize: list[int] = field(default_factory=list)
    generators_to_energize: list[int] = field(default_factory=list)
    dispatch: dict[int, DispatchTarget] = field(default_factory=dict)
    loading_factor: float = 1.0
    position: int = 0  # 1-based index within its path; 0 for free-standing steps

    def __post_init__(self):
        if self.position == 0:
            self.position = self.sequence


@dataclass
class CrankPath:
    steps: list[CrankStep]

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, sequence: int) -> CrankStep:
        for s in self.steps:
            if s.sequence == sequence:
                return s
        raise KeyError(f"no crank step with sequence {sequence}")


@dataclass
class Network:
    buses: dict[int, Bus]
    branches: list[Branch]
    generators: dict[int, Generator]
    loads: list[LoadRecord]
    frequency_base: float = 60.0
    mva_base: float = 100.0
    reference_bus: int | None = None
    steps_applied: int = 0

    # -- accessors over the energized subgraph -------------------------------

    def energized_buses(self) -> list[int]:
        return sorted(b.id for b in self.buses.values() if b.energized)

    def energized_generators(self) -> list[Generator]:
        return [g for g in sorted(self.generators.values(), key=lambda g: g.id) if g.energized]

    def energized_loads(self) -> list[LoadRecord]:
        return [d for d in self.loads if d.energized]

    def in_service_branches(self) -> list[Branch]:
        out = []
        for br in self.branches:
            if not br.status:
                continue
            if self.buses[br.from_bus].energized and self.buses[br.to_bus].energized:
                out.append(br)
        return out

    def reference_generator(self) -> Generator:
        refs = [g for g in self.energized_generators() if g.is_reference]
        if len(refs) != 1:
            raise CaseError(f"expected exactly one energized reference generator, found {len(refs)}")
        return refs[0]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# case file handling
# ---------------------------------------------------------------------------

def _require(mapping, key, locus):
    if not isinstance(mapping, dict) or key not in mapping:
        raise CaseError(f"{locus}: missing field {key!r}")
    return mapping[key]


def load_case(text: str) -> Network:
    """Parse a structured-text case file into a fully de-energized Network."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CaseError(f"case file is not valid structured text: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError("case file: expected a mapping at top level")
    version = doc.get("format_version")
    if version != CASE_FORMAT_VERSION:
        raise CaseError(f"case file: unsupported format_version {version!r}")

    bases = doc.get("bases") or {}
    mva_base = float(bases.get("mva", 100.0))
    f_base = float(bases.get("frequency_hz", 60.0))

    raw_buses = doc.get("buses") or []
    if not raw_buses:
        raise CaseError("case file: no buses")
    buses: dict[int, Bus] = {}
    for i, rb in enumerate(raw_buses):
        locus = f"buses[{i}]"
        bid = int(_require(rb, "id", locus))
        if bid in buses:
            raise CaseError(f"{locus}: duplicate bus id {bid}")
        bus = Bus(
            id=bid,
            base_kv=float(_require(rb, "base_kv", locus)),
            v_min=float(rb["v_min"]) if "v_min" in rb else None,
            v_max=float(rb["v_max"]) if "v_max" in rb else None,
        )
        if bus.base_kv <= 0:
            raise CaseError(f"{locus}: base_kv must be positive")
        if bus.v_min is not None and bus.v_max is not None and not bus.v_min < bus.v_max:
            raise CaseError(f"{locus}: requires v_min < v_max")
        buses[bid] = bus

    branches: list[Branch] = []
    for i, rb in enumerate(doc.get("branches") or []):
        locus = f"branches[{i}]"
        fb = int(_require(rb, "from", locus))
        tb = int(_require(rb, "to", locus))
        for end in (fb, tb):
            if end not in buses:
                raise CaseError(f"{locus}: unknown bus {end}")
        br = Branch(
            from_bus=fb,
            to_bus=tb,
            r=float(rb.get("r", 0.0)),
            x=float(_require(rb, "x", locus)),
            b=float(rb.get("b", 0.0)),
            tap=float(rb.get("tap", 1.0)),
            status=bool(rb.get("status", True)),
        )
        if br.r == 0.0 and br.x == 0.0:
            raise CaseError(f"{locus}: branch needs nonzero impedance")
        branches.append(br)

    generators: dict[int, Generator] = {}
    for i, rg in enumerate(doc.get("generators") or []):
        locus = f"generators[{i}]"
        gid = int(_require(rg, "id", locus))
        if gid in generators:
            raise CaseError(f"{locus}: duplicate generator id {gid}")
        gbus = int(_require(rg, "bus", locus))
        if gbus not in buses:
            raise CaseError(f"{locus}: unknown bus {gbus}")
        gen = Generator(
            id=gid,
            bus=gbus,
            p_set=float(rg.get("p_set", 0.0)),
            q_set=float(rg.get("q_set", 0.0)),
            p_min=float(rg.get("p_min", 0.0)),
            p_max=float(_require(rg, "p_max", locus)),
            q_min=float(rg.get("q_min", 0.0)),
            q_max=float(rg.get("q_max", 0.0)),
            droop_gain=float(rg.get("droop_gain", 0.0)),
            v_set=float(rg.get("v_set", 1.0)),
            ramp_min=float(rg.get("ramp_min", -0.5)),
            ramp_max=float(rg.get("ramp_max", 0.5)),
            participates_in_sync=bool(rg.get("participates_in_sync", False)),
            is_reference=bool(rg.get("is_reference", False)),
        )
        if gen.droop_gain < 0:
            raise CaseError(f"{locus}: droop_gain must be >= 0")
        if not gen.ramp_min <= 0.0 <= gen.ramp_max:
            raise CaseError(f"{locus}: ramp bounds must straddle zero")
        generators[gid] = gen

    loads: list[LoadRecord] = []
    for i, rl in enumerate(doc.get("loads") or []):
        locus = f"loads[{i}]"
        lbus = int(_require(rl, "bus", locus))
        if lbus not in buses:
            raise CaseError(f"{locus}: unknown bus {lbus}")
        kind = rl.get("kind", "constant-power")
        if kind == "constant-power":
            rec = LoadRecord(bus=lbus, kind=kind,
                             p_d=float(_require(rl, "p", locus)),
                             q_d=float(rl.get("q", 0.0)))
        elif kind == "big":
            rec = LoadRecord(bus=lbus, kind=kind, big=BigLoad(
                alpha_r=float(rl.get("alpha_r", 0.0)),
                alpha_i=float(rl.get("alpha_i", 0.0)),
                g=float(_require(rl, "g", locus)),
                b=float(rl.get("b", 0.0))))
        else:
            raise CaseError(f"{locus}: unknown load kind {kind!r}")
        loads.append(rec)

    reference_bus = doc.get("reference_bus")
    ref_gens = [g for g in generators.values() if g.is_reference]
    if reference_bus is None and ref_gens:
        reference_bus = ref_gens[0].bus
    if len(ref_gens) > 1:
        raise CaseError("case file: more than one generator flagged is_reference")
    if reference_bus is not None and ref_gens and ref_gens[0].bus != int(reference_bus):
        raise CaseError("case file: reference_bus disagrees with is_reference flag")

    return Network(buses=buses, branches=branches, generators=generators, loads=loads,
                   frequency_base=f_base, mva_base=mva_base,
                   reference_bus=int(reference_bus) if reference_bus is not None else None)


def serialize_case(net: Network) -> str:
    """Emit the case-file form of a network (element data, no energization state)."""
    doc: dict = {
        "format_version": CASE_FORMAT_VERSION,
        "bases": {"mva": net.mva_base, "frequency_hz": net.frequency_base},
    }
    if net.reference_bus is not None:
        doc["reference_bus"] = net.reference_bus
    doc["buses"] = [
        {"id": b.id, "base_kv": b.base_kv,
         **({"v_min": b.v_min} if b.v_min is not None else {}),
         **({"v_max": b.v_max} if b.v_max is not None else {})}
        for b in sorted(net.buses.values(), key=lambda b: b.id)
    ]
    doc["branches"] = [
        {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b,
         "tap": br.tap, "status": br.status}
        for br in net.branches
    ]
    doc["generators"] = [
        {"id": g.id, "bus": g.bus, "p_set": g.p_set, "q_set": g.q_set,
         "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min, "q_max": g.q_max,
         "droop_gain": g.droop_gain, "v_set": g.v_set,
         "ramp_min": g.ramp_min, "ramp_max": g.ramp_max,
         "participates_in_sync": g.participates_in_sync, "is_reference": g.is_reference}
        for g in sorted(net.generators.values(), key=lambda g: g.id)
    ]
    out_loads = []
    for d in net.loads:
        if d.kind == "constant-power":
            out_loads.append({"bus": d.bus, "kind": d.kind, "p": d.p_d, "q": d.q_d})
        else:
            out_loads.append({"bus": d.bus, "kind": d.kind,
                              "alpha_r": d.big.alpha_r, "alpha_i": d.big.alpha_i,
                              "g": d.big.g, "b": d.big.b})
    doc["loads"] = out_loads
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# matrix-style case import (common bus/gen/branch table layout)
# ---------------------------------------------------------------------------

_MATRIX_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([0-9.eE+-]+)\s*;")


def load_matrix_case(text: str) -> Network:
    """Import a matrix-style case (bus/gen/branch tables, MW/MVAR units).

    Generators are numbered by table row order. Droop gains, ramps and sync
    flags are not part of the layout and are left at defaults; bus shunts are
    carried as linear-circuit loads.
    """
    scalars = {m.group(1): float(m.group(2)) for m in _SCALAR.finditer(text)}
    base = scalars.get("baseMVA", 100.0)
    blocks = {}
    for m in _MATRIX_BLOCK.finditer(text):
        rows = []
        for line in m.group(2).strip().splitlines():
            line = line.split("%")[0].strip().rstrip(";")
            if not line:
                continue
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        blocks[m.group(1)] = rows
    if "bus" not in blocks or not blocks["bus"]:
        raise CaseError("matrix case: no buses")

    buses: dict[int, Bus] = {}
    loads: list[LoadRecord] = []
    reference_bus = None
    for row in blocks["bus"]:
        bid = int(row[0])
        buses[bid] = Bus(id=bid, base_kv=row[9], v_min=row[12], v_max=row[11])
        if row[1] == 3:
            reference_bus = bid
        if row[2] != 0.0 or row[3] != 0.0:
            loads.append(LoadRecord(bus=bid, kind="constant-power",
                                    p_d=row[2] / base, q_d=row[3] / base))
        if row[4] != 0.0 or row[5] != 0.0:
            # bus shunt: admittance fixed on the bus, carried as a linear load
            loads.append(LoadRecord(bus=bid, kind="big",
                                    big=BigLoad(0.0, 0.0, row[4] / base, row[5] / base)))

    branches: list[Branch] = []
    for i, row in enumerate(blocks.get("branch", [])):
        fb, tb = int(row[0]), int(row[1])
        for end in (fb, tb):
            if end not in buses:
                raise CaseError(f"matrix case branch {i}: unknown bus {end}")
        branches.append(Branch(from_bus=fb, to_bus=tb, r=row[2], x=row[3], b=row[4],
                               tap=row[8] if row[8] != 0.0 else 1.0,
                               status=bool(row[10]) if len(row) > 10 else True))

    generators: dict[int, Generator] = {}
    for i, row in enumerate(blocks.get("gen", []), start=1):
        gbus = int(row[0])
        if gbus not in buses:
            raise CaseError(f"matrix case gen {i}: unknown bus {gbus}")
        generators[i] = Generator(
            id=i, bus=gbus, p_set=row[1] / base, q_set=row[2] / base,
            q_max=row[3] / base, q_min=row[4] / base, v_set=row[5],
            p_max=row[8] / base, p_min=row[9] / base,
            is_reference=(gbus == reference_bus))

    return Network(buses=buses, branches=branches, generators=generators, loads=loads,
                   mva_base=base, reference_bus=reference_bus)


# ---------------------------------------------------------------------------
# crank path
# ---------------------------------------------------------------------------

def load_crankpath(text: str, net: Network) -> CrankPath:
    """Parse an ordered crank-path file and validate ids against a network."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CaseError(f"crank path is not valid structured text: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError("crank path: expected a mapping at top level")
    if doc.get("format_version") != CRANKPATH_FORMAT_VERSION:
        raise CaseError(f"crank path: unsupported format_version {doc.get('format_version')!r}")
    raw_steps = doc.get("steps") or []
    if not raw_steps:
        raise CaseError("crank path: empty path")

    steps: list[CrankStep] = []
    last_seq = None
    ever_energized_buses: set[int] = set()
    for i, rs in enumerate(raw_steps):
        locus = f"steps[{i}]"
        seq = int(_require(rs, "sequence", locus))
        if last_seq is not None and seq <= last_seq:
            raise CaseError(f"{locus}: sequence numbers must be strictly increasing")
        last_seq = seq
        bus_ids = [int(b) for b in rs.get("buses", [])]
        for b in bus_ids:
            if b not in net.buses:
                raise CaseError(f"{locus}: unknown bus {b}")
        ever_energized_buses.update(bus_ids)
        gen_ids = [int(g) for g in rs.get("generators", [])]
        dispatch: dict[int, DispatchTarget] = {}
        for j, rd in enumerate(rs.get("dispatch", [])):
            dlocus = f"{locus}.dispatch[{j}]"
            gid = int(_require(rd, "generator", dlocus))
            if gid not in net.generators:
                raise CaseError(f"{dlocus}: unknown generator {gid}")
            dispatch[gid] = DispatchTarget(p=float(_require(rd, "p", dlocus)),
                                           q=float(rd.get("q", 0.0)),
                                           v_set=(float(rd["v_set"]) if "v_set" in rd else None))
        for g in gen_ids:
            if g not in net.generators:
                raise CaseError(f"{locus}: unknown generator {g}")
            gbus = net.generators[g].bus
            if gbus not in ever_energized_buses:
                raise CaseError(
                    f"{locus}: generator {g} sits on bus {gbus} which is never energized by then")
        steps.append(CrankStep(sequence=seq, buses_to_energize=bus_ids,
                               generators_to_energize=gen_ids, dispatch=dispatch,
                               loading_factor=float(rs.get("loading_factor", 1.0)),
                               position=i + 1))

    ref_gens = [g for g in net.generators.values() if g.is_reference]
    if ref_gens and ref_gens[0].id not in steps[0].generators_to_energize:
        raise CaseError("crank path: step 1 must energize the reference generator")
    return CrankPath(steps=steps)


def serialize_crankpath(path: CrankPath) -> str:
    doc = {"format_version": CRANKPATH_FORMAT_VERSION, "steps": []}
    for s in path.steps:
        entry = {
            "sequence": s.sequence,
            "buses": list(s.buses_to_energize),
            "generators": list(s.generators_to_energize),
            "dispatch": [
                {"generator": gid, "p": t.p, "q": t.q,
                 **({"v_set": t.v_set} if t.v_set is not None else {})}
                for gid, t in sorted(s.dispatch.items())
            ],
        }
        if s.loading_factor != 1.0:
            entry["loading_factor"] = s.loading_factor
        doc["steps"].append(entry)
    return yaml.safe_dump(doc, sort_keys=False)


def apply_energization(net: Network, step: CrankStep) -> Network:
    """Return a copy of the network with the step's elements energized.

    Steps must be applied in path order; re-applying an already applied step
    is a no-op. Branches come in service implicitly once both endpoints are
    energized and their status flag is set.
    """
    if step.position > net.steps_applied + 1:
        raise OrderingError(
            f"crank step at position {step.position} applied before position {net.steps_applied + 1}")
    out = net.copy()
    if step.position <= net.steps_applied:
        return out  # already applied
    for b in step.buses_to_energize:
        if b not in out.buses:
            raise CaseError(f"crank step {step.sequence}: unknown bus {b}")
        out.buses[b].energized = True
    for gid in step.generators_to_energize:
        if gid not in out.generators:
            raise CaseError(f"crank step {step.sequence}: unknown generator {gid}")
        gen = out.generators[gid]
        if not out.buses[gen.bus].energized:
            raise CaseError(f"crank step {step.sequence}: generator {gid} bus {gen.bus} not energized")
        gen.energized = True
    for d in out.loads:
        if out.buses[d.bus].energized:
            d.energized = True
    out.steps_applied = step.position
    return out


# ---------------------------------------------------------------------------
# admittance assembly and island detection
# ---------------------------------------------------------------------------

def bus_index(net: Network) -> dict[int, int]:
    """Map energized bus ids to contiguous solver indices."""
    return {bid: i for i, bid in enumerate(net.energized_buses())}


def branch_admittances(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Two-port admittance stamp (Yff, Yft, Ytf, Ytt) with the tap on the from side."""
    ys = 1.0 / complex(br.r, br.x)
    ysh = 0.5j * br.b
    t = br.tap
    return (ys + ysh) / (t * t), -ys / t, -ys / t, ys + ysh


def assemble_ybus(net: Network) -> tuple[sp.csr_matrix, dict[int, int]]:
    """Nodal admittance matrix over the energized buses.

    Returns the complex sparse matrix and the bus id -> row index map.
    """
    idx = bus_index(net)
    if not idx:
        raise CaseError("no energized buses")
    n = len(idx)
    rows, cols, vals = [], [], []
    for br in net.in_service_branches():
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = branch_admittances(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    # keep an explicit (possibly zero) diagonal so isolated buses stay addressable
    rows += list(range(n))
    cols += list(range(n))
    vals += [0.0] * n
    y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    return y, idx


def islands(net: Network) -> list[list[int]]:
    """Connected components of the energized subgraph, as sorted bus-id lists."""
    energized = net.energized_buses()
    adj: dict[int, set[int]] = {b: set() for b in energized}
    for br in net.in_service_branches():
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen: set[int] = set()
    comps: list[list[int]] = []
    for start in energized:
        if start in seen:
            continue
        comp = []
        stack = [start]
        seen.add(start)
        while stack:
            b = stack.pop()
            comp.append(b)
            for nb in adj[b]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        comps.append(sorted(comp))
    return comps


# ---------------------------------------------------------------------------
# state serialization / hashing
# ---------------------------------------------------------------------------

def network_state_dict(net: Network) -> dict:
    """Full JSON-friendly state snapshot, including energization and voltages."""
    d = {
        "bases": {"mva": net.mva_base, "frequency_hz": net.frequency_base},
        "reference_bus": net.reference_bus,
        "steps_applied": net.steps_applied,
        "buses": [asdict(b) for b in sorted(net.buses.values(), key=lambda b: b.id)],
        "branches": [asdict(br) for br in net.branches],
        "generators": [asdict(g) for g in sorted(net.generators.values(), key=lambda g: g.id)],
        "loads": [asdict(d) for d in net.loads],
    }
    return d


def content_hash(net: Network) -> str:
    payload = json.dumps(network_state_dict(net), sort_keys=True, default=float)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
