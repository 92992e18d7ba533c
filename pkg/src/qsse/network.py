"""Network description, case-file parsing and bus admittance assembly.

Two text formats are understood:

* MATPOWER-style ``.m`` files (``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``,
  ``mpc.branch`` matrices), the canonical format used for the bundled cases.
* IEEE Common Data Format (CDF) files.

Loads are kept in MW/MVAr, everything else in per unit; angles are radians.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class CaseError(ValueError):
    """Raised for malformed or physically invalid case data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "PV"
    PQ = "PQ"


_MATPOWER_TYPE = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
_MATPOWER_CODE = {v: k for k, v in _MATPOWER_TYPE.items()}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_kv: float = 0.0
    load_p: float = 0.0  # MW
    load_q: float = 0.0  # MVAr
    shunt_g: float = 0.0  # p.u.
    shunt_b: float = 0.0  # p.u.
    v_setpoint: float | None = None


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    phase_shift: float = 0.0  # rad
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p: float  # MW
    q: float = 0.0  # MVAr
    v_setpoint: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class NetworkCase:
    """Validated, immutable network description."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    name: str = "case"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def index_of(self, bus_id: int) -> int:
        """Position of ``bus_id`` in file order."""
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus id {bus_id}") from None

    @property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    def indices_of_kind(self, kind: BusKind) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind is kind], dtype=int)

    def base_loads(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus (P, Q) load in p.u. on ``base_mva``."""
        p = np.array([b.load_p for b in self.buses]) / self.base_mva
        q = np.array([b.load_q for b in self.buses]) / self.base_mva
        return p, q

    def generation(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus scheduled (P, Q) generation in p.u. from in-service units."""
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.generators:
            if g.in_service:
                i = self.index_of(g.bus)
                pg[i] += g.p
                qg[i] += g.q
        return pg / self.base_mva, qg / self.base_mva

    def voltage_setpoints(self) -> np.ndarray:
        """Setpoints at slack/PV buses, 1.0 elsewhere."""
        return np.array([b.v_setpoint if b.v_setpoint is not None else 1.0 for b in self.buses])


def validate_case(case: NetworkCase) -> None:
    if case.base_mva <= 0:
        raise CaseError(f"base MVA must be positive, got {case.base_mva}")
    if len(case._index) != len(case.buses):
        seen = set()
        for b in case.buses:
            if b.id in seen:
                raise CaseError(f"duplicate bus id {b.id}")
            seen.add(b.id)
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        if b.id <= 0:
            raise CaseError(f"bus id must be positive, got {b.id}")
        if not (math.isfinite(b.load_p) and math.isfinite(b.load_q)):
            raise CaseError(f"non-finite load at bus {b.id}")
        if b.v_setpoint is not None and not b.v_setpoint > 0:
            raise CaseError(f"non-positive voltage setpoint at bus {b.id}")
        if b.kind is not BusKind.PQ and b.v_setpoint is None:
            raise CaseError(f"{b.kind.value} bus {b.id} has no voltage setpoint")
    for k, br in enumerate(case.branches, start=1):
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {k} connects bus {br.from_bus} to itself")
        for end in (br.from_bus, br.to_bus):
            if end not in case._index:
                raise CaseError(f"branch {k} references unknown bus {end}")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {k} has zero impedance")
        if br.tap_ratio <= 0:
            raise CaseError(f"branch {k} has non-positive tap ratio")
    for g in case.generators:
        if g.bus not in case._index:
            raise CaseError(f"generator references unknown bus {g.bus}")
    _check_connected(case)


def _check_connected(case: NetworkCase) -> None:
    n = case.n_bus
    rows, cols = [], []
    for br in case.branches:
        if br.in_service:
            rows.append(case._index[br.from_bus])
            cols.append(case._index[br.to_bus])
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, labels = sp.csgraph.connected_components(graph, directed=False)
    if n_comp > 1:
        island = [case.buses[i].id for i in np.flatnonzero(labels != labels[case.slack_index])]
        raise CaseError(f"network has {n_comp} islands; buses cut off from the slack: {island[:10]}")


# --------------------------------------------------------------------------
# MATPOWER-style text


_ASSIGN = re.compile(r"^\s*(?:mpc|ppc)\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # MATPOWER strings use single quotes; '%' inside them is not a comment
    out, quoted = [], False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _parse_matpower_tables(text: str) -> tuple[dict[str, float | str], dict[str, list[tuple[int, list[float]]]]]:
    scalars: dict[str, float | str] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip_comment(lines[i]).strip()
        i += 1
        if not line or line.startswith("function"):
            continue
        m = _ASSIGN.match(line)
        if not m:
            raise CaseError(f"unexpected statement: {line!r}", lineno)
        key, rhs = m.group(1), m.group(2).strip()
        if not rhs.startswith("["):
            rhs = rhs.rstrip(";").strip()
            if rhs.startswith("'") and rhs.endswith("'"):
                scalars[key] = rhs[1:-1]
            else:
                try:
                    scalars[key] = float(rhs)
                except ValueError:
                    raise CaseError(f"cannot parse value for {key}: {rhs!r}", lineno) from None
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        row_line = lineno
        while True:
            closed = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                tokens = piece.replace(",", " ").split()
                if tokens:
                    try:
                        rows.append((row_line, [float(t) for t in tokens]))
                    except ValueError:
                        raise CaseError(f"non-numeric entry in {key}: {piece.strip()!r}", row_line) from None
            if closed:
                break
            if i >= len(lines):
                raise CaseError(f"unterminated matrix {key}", lineno)
            row_line = i + 1
            body = _strip_comment(lines[i])
            i += 1
        tables[key] = rows
    return scalars, tables


def _check_width(rows, width, name):
    for lineno, row in rows:
        if len(row) < width:
            raise CaseError(f"{name} row has {len(row)} columns, need at least {width}", lineno)


def parse_matpower(text: str, name: str | None = None) -> NetworkCase:
    scalars, tables = _parse_matpower_tables(text)
    if "baseMVA" not in scalars:
        raise CaseError("missing baseMVA")
    for key in ("bus", "branch", "gen"):
        if key not in tables:
            raise CaseError(f"missing {key} matrix")
    base = float(scalars["baseMVA"])
    _check_width(tables["bus"], 13, "bus")
    _check_width(tables["branch"], 11, "branch")
    _check_width(tables["gen"], 8, "gen")

    gens = []
    for lineno, row in tables["gen"]:
        gens.append(Generator(bus=int(row[0]), p=row[1], q=row[2], v_setpoint=row[5], in_service=row[7] > 0))
    vg: dict[int, float] = {}
    for g in gens:
        if g.in_service:
            vg.setdefault(g.bus, g.v_setpoint)

    buses = []
    seen = set()
    for lineno, row in tables["bus"]:
        bid = int(row[0])
        if bid in seen:
            raise CaseError(f"duplicate bus id {bid}", lineno)
        seen.add(bid)
        code = int(row[1])
        if code not in _MATPOWER_TYPE:
            raise CaseError(f"unsupported bus type {code} at bus {bid}", lineno)
        kind = _MATPOWER_TYPE[code]
        if kind is BusKind.PV and bid not in vg:
            kind = BusKind.PQ  # PV bus without in-service units regulates nothing
        vset = None
        if kind is not BusKind.PQ:
            vset = vg.get(bid, row[7])
        buses.append(
            Bus(id=bid, kind=kind, base_kv=row[9], load_p=row[2], load_q=row[3],
                shunt_g=row[4] / base, shunt_b=row[5] / base, v_setpoint=vset)
        )

    branches = []
    for lineno, row in tables["branch"]:
        tap = row[8] if row[8] != 0 else 1.0
        branches.append(
            Branch(from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3], b_charging=row[4],
                   tap_ratio=tap, phase_shift=math.radians(row[9]), in_service=row[10] > 0)
        )
    cname = name or str(scalars.get("name", "case"))
    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), name=cname)


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) or abs(x) > 1e15 else str(int(x))


def to_matpower(case: NetworkCase) -> str:
    """Serialize to MATPOWER-style text; ``parse_matpower`` inverts it exactly."""
    out = [f"function mpc = {re.sub(r'[^0-9A-Za-z_]', '_', case.name)}",
           f"mpc.name = '{case.name}';",
           "mpc.version = '2';",
           f"mpc.baseMVA = {_fmt(case.base_mva)};",
           "",
           "%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin",
           "mpc.bus = ["]
    for b in case.buses:
        vm = b.v_setpoint if b.v_setpoint is not None else 1.0
        row = [b.id, _MATPOWER_CODE[b.kind], b.load_p, b.load_q, b.shunt_g * case.base_mva,
               b.shunt_b * case.base_mva, 1, vm, 0, b.base_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin", "mpc.gen = ["]
    for g in case.generators:
        row = [g.bus, g.p, g.q, 9999, -9999, g.v_setpoint, case.base_mva, int(g.in_service), 9999, 0]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax",
            "mpc.branch = ["]
    for br in case.branches:
        tap = 0 if br.tap_ratio == 1.0 else br.tap_ratio
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0, 0, 0, tap,
               math.degrees(br.phase_shift), int(br.in_service), -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", ""]
    return "\n".join(out)


# --------------------------------------------------------------------------
# IEEE Common Data Format

_CDF_TYPE = {0: BusKind.PQ, 1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def parse_cdf(text: str, name: str | None = None) -> NetworkCase:
    lines = text.splitlines()
    if not lines:
        raise CaseError("empty file", 1)
    title = lines[0]
    try:
        base = float(title[30:37])
    except ValueError:
        raise CaseError("cannot read base MVA from title card (columns 32-37)", 1) from None
    cname = name or (title[45:].strip() or "case")

    section = None
    buses, branches, gens = [], [], []
    seen = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip()
        if not line.strip():
            continue
        head = line.strip().upper()
        if section is None:
            if head.startswith("BUS DATA FOLLOWS"):
                section = "bus"
            elif head.startswith("BRANCH DATA FOLLOWS"):
                section = "branch"
            elif head.startswith("END OF DATA"):
                break
            elif "FOLLOWS" in head:
                section = "skip"
            else:
                raise CaseError(f"unexpected card {line.strip()!r}", lineno)
            continue
        if head.startswith("-9"):
            section = None
            continue
        if section == "skip":
            continue
        if section == "bus":
            try:
                bid = int(line[0:4])
                f = line[18:].split()
                area, zone, code = int(f[0]), int(f[1]), int(f[2])
                vm, _va, pd, qd, pg, qg, kv, vdes = (float(v) for v in f[3:11])
                gs, bs = float(f[13]), float(f[14])
            except (ValueError, IndexError):
                raise CaseError("malformed bus card", lineno) from None
            del area, zone
            if bid in seen:
                raise CaseError(f"duplicate bus id {bid}", lineno)
            seen.add(bid)
            if code not in _CDF_TYPE:
                raise CaseError(f"unsupported bus type {code}", lineno)
            kind = _CDF_TYPE[code]
            vset = None
            if kind is not BusKind.PQ:
                vset = vdes if vdes > 0 else vm
                gens.append(Generator(bus=bid, p=pg, q=qg, v_setpoint=vset))
            elif pg != 0 or qg != 0:
                gens.append(Generator(bus=bid, p=pg, q=qg, v_setpoint=1.0))
            buses.append(Bus(id=bid, kind=kind, base_kv=kv, load_p=pd, load_q=qd,
                             shunt_g=gs, shunt_b=bs, v_setpoint=vset))
        elif section == "branch":
            try:
                f = line.split()
                fb, tb = int(f[0]), int(f[1])
                r, x, b = float(f[6]), float(f[7]), float(f[8])
                ratio, angle = float(f[14]), float(f[15])
            except (ValueError, IndexError):
                raise CaseError("malformed branch card", lineno) from None
            branches.append(Branch(from_bus=fb, to_bus=tb, r=r, x=x, b_charging=b,
                                   tap_ratio=ratio if ratio != 0 else 1.0,
                                   phase_shift=math.radians(angle)))
    if not buses:
        raise CaseError("no BUS DATA section")
    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), name=cname)


def to_cdf(case: NetworkCase) -> str:
    """Serialize to IEEE CDF (bus/branch cards only)."""
    gen_at: dict[int, tuple[float, float]] = {}
    for g in case.generators:
        if g.in_service:
            p, q = gen_at.get(g.bus, (0.0, 0.0))
            gen_at[g.bus] = (p + g.p, q + g.q)
    code = {BusKind.PQ: 0, BusKind.PV: 2, BusKind.SLACK: 3}
    out = [f" 01/01/00 {'QSSE':<20} {case.base_mva:6.1f} 2000 W {case.name}",
           f"BUS DATA FOLLOWS                            {case.n_bus} ITEMS"]
    for b in case.buses:
        pg, qg = gen_at.get(b.id, (0.0, 0.0))
        vm = b.v_setpoint if b.v_setpoint is not None else 1.0
        vdes = b.v_setpoint if b.v_setpoint is not None else 0.0
        name = f"Bus {b.id}"[:12]
        out.append(f"{b.id:4d} {name:<12} 1  1 {code[b.kind]:2d} {vm!r} 0 {b.load_p!r} {b.load_q!r} "
                   f"{pg!r} {qg!r} {b.base_kv!r} {vdes!r} 0 0 {b.shunt_g!r} {b.shunt_b!r} 0")
    out.append("-999")
    out.append(f"BRANCH DATA FOLLOWS                         {case.n_branch} ITEMS")
    for br in case.branches:
        kind = 0 if br.tap_ratio == 1.0 and br.phase_shift == 0 else 1
        ratio = 0.0 if br.tap_ratio == 1.0 else br.tap_ratio
        out.append(f"{br.from_bus:4d} {br.to_bus:4d} 1 1 1 {kind} {br.r!r} {br.x!r} {br.b_charging!r} "
                   f"0 0 0 0 0 {ratio!r} {math.degrees(br.phase_shift)!r} 0 0 0 0 0")
    out.append("-999")
    out.append("END OF DATA")
    return "\n".join(out) + "\n"


def parse_case(text: str, format: str = "matpower", name: str | None = None) -> NetworkCase:
    """Parse case-file content in ``format`` ('matpower' or 'cdf')."""
    if format == "matpower":
        return parse_matpower(text, name)
    if format == "cdf":
        return parse_cdf(text, name)
    raise ValueError(f"unknown case format {format!r}")


BUNDLED = {"ieee14": "case14.m", "ieee300": "case300.m"}


def load_case(source: str | Path) -> NetworkCase:
    """Load a bundled case by name ('ieee14', 'ieee300') or a file path.

    Files ending in ``.cdf`` or ``.txt`` are read as IEEE CDF, anything else as
    MATPOWER-style text.
    """
    key = str(source)
    if key in BUNDLED:
        text = resources.files("qsse.data").joinpath(BUNDLED[key]).read_text(encoding="utf-8")
        return parse_matpower(text, name=key)
    path = Path(source)
    fmt = "cdf" if path.suffix.lower() in (".cdf", ".txt") else "matpower"
    return parse_case(path.read_text(encoding="utf-8"), fmt)


# --------------------------------------------------------------------------
# Admittance matrix


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Bus admittance matrix plus the branch-end admittances used for flows.

    ``yf @ V`` and ``yt @ V`` give the complex currents entering each
    in-service branch at its from and to end; ``branch_rows[k]`` maps case
    branch ``k`` to its row (or -1 when out of service).
    """

    ybus: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    f_idx: np.ndarray
    t_idx: np.ndarray
    branch_rows: np.ndarray

    @property
    def n(self) -> int:
        return self.ybus.shape[0]

    def dense(self) -> np.ndarray:
        return self.ybus.toarray()


def branch_admittances(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Pi-model two-port terms (Yff, Yft, Ytf, Ytt) with the tap on the from side."""
    ys = 1.0 / complex(br.r, br.x)
    tap = br.tap_ratio * complex(math.cos(br.phase_shift), math.sin(br.phase_shift))
    ytt = ys + 0.5j * br.b_charging
    yff = ytt / (tap * tap.conjugate())
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    n = case.n_bus
    live = [k for k, br in enumerate(case.branches) if br.in_service]
    nl = len(live)
    f_idx = np.array([case.index_of(case.branches[k].from_bus) for k in live], dtype=int)
    t_idx = np.array([case.index_of(case.branches[k].to_bus) for k in live], dtype=int)
    terms = np.array([branch_admittances(case.branches[k]) for k in live], dtype=complex).reshape(nl, 4)
    yff, yft, ytf, ytt = terms.T

    rows = np.arange(nl)
    yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[f_idx, t_idx])), shape=(nl, n))
    yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f_idx, t_idx])), shape=(nl, n))
    ysh = np.array([complex(b.shunt_g, b.shunt_b) for b in case.buses])
    cf = sp.csr_matrix((np.ones(nl), (rows, f_idx)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (rows, t_idx)), shape=(nl, n))
    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh)).tocsr()
    ybus.sum_duplicates()
    ybus.sort_indices()

    branch_rows = np.full(case.n_branch, -1, dtype=int)
    branch_rows[live] = rows
    return AdmittanceMatrix(ybus=ybus, yf=yf, yt=yt, f_idx=f_idx, t_idx=t_idx, branch_rows=branch_rows)
