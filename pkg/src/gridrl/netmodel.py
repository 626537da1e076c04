"""Static network data, Y-bus assembly, Newton-Raphson power flow and case modifiers.

All quantities are per unit on ``GridCase.base_mva`` (100 MVA for the bundled
cases).  Cases are immutable; modifiers return new objects.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import MatrixRankWarning, spsolve

import warnings

BUS_KINDS = ("slack", "pv", "pq")
SHUNT_KINDS = ("fixed", "brake", "fault")

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 50


class CaseError(ValueError):
    """Structural problem with a case: unknown ids, islands, bad sections."""


class ModifierError(ValueError):
    """A case modifier would produce an invalid operating point."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    voltage_setpoint: float = 1.0
    load_p: float = 0.0
    load_q: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_r: float
    series_x: float
    shunt_b: float = 0.0
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    inertia_h: float
    damping_d: float
    xd_prime: float
    p_set: float
    area: int = 1


@dataclass(frozen=True)
class ShuntDevice:
    id: str
    bus: int
    g: float
    b: float = 0.0
    kind: str = "fixed"


@dataclass(frozen=True)
class StallParams:
    v_stall: float = 0.6
    t_stall: float = 0.033
    stall_g: float = 4.0
    stall_b: float = 6.0
    t_trip: float = 5.0


@dataclass(frozen=True)
class MotorLoad:
    bus: int
    fraction_of_bus_load: float
    stall: StallParams = field(default_factory=StallParams)


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    shunt_devices: tuple[ShuntDevice, ...] = ()
    motor_loads: tuple[MotorLoad, ...] = ()
    name: str = "case"

    def __post_init__(self):
        # normalise list inputs so the dataclass stays hashable/immutable
        for f in ("buses", "branches", "generators", "shunt_devices", "motor_loads"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        self.validate()

    # -- lookups -------------------------------------------------------
    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise CaseError(f"unknown bus {bus_id}")

    def shunt(self, shunt_id: str) -> ShuntDevice:
        for s in self.shunt_devices:
            if s.id == shunt_id:
                return s
        raise CaseError(f"unknown shunt {shunt_id!r}")

    def motor_at(self, bus_id: int) -> MotorLoad | None:
        for m in self.motor_loads:
            if m.bus == bus_id:
                return m
        return None

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("bus ids are not unique")
        known = set(ids)
        kinds = [b.kind for b in self.buses]
        for k in kinds:
            if k not in BUS_KINDS:
                raise CaseError(f"bad bus kind {k!r}")
        if kinds.count("slack") != 1:
            raise CaseError(f"expected exactly one slack bus, found {kinds.count('slack')}")
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.in_service and br.series_r == 0.0 and br.series_x == 0.0:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
            if br.tap <= 0:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} has nonpositive tap")
        for g in self.generators:
            if g.bus not in known:
                raise CaseError(f"generator references unknown bus {g.bus}")
            if g.xd_prime <= 0 or g.inertia_h <= 0:
                raise CaseError(f"generator at bus {g.bus}: H and xd' must be positive")
        shunt_ids = [s.id for s in self.shunt_devices]
        if len(set(shunt_ids)) != len(shunt_ids):
            raise CaseError("shunt ids are not unique")
        for s in self.shunt_devices:
            if s.bus not in known:
                raise CaseError(f"shunt {s.id} references unknown bus {s.bus}")
            if s.kind not in SHUNT_KINDS:
                raise CaseError(f"bad shunt kind {s.kind!r}")
        seen = set()
        for m in self.motor_loads:
            if m.bus not in known:
                raise CaseError(f"motor load references unknown bus {m.bus}")
            if not 0.0 <= m.fraction_of_bus_load <= 1.0:
                raise CaseError(f"motor fraction at bus {m.bus} outside [0, 1]")
            if m.bus in seen:
                raise CaseError(f"two motor loads at bus {m.bus}")
            seen.add(m.bus)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse nodal admittance matrix with its bus ordering."""

    matrix: sp.csr_matrix
    bus_ids: tuple[int, ...]

    @property
    def dimension(self) -> int:
        return len(self.bus_ids)

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def entry(self, i_bus: int, j_bus: int) -> complex:
        return complex(self.matrix[self.index(i_bus), self.index(j_bus)])


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    voltage_magnitude: np.ndarray
    voltage_angle: np.ndarray
    slack_injection: complex
    converged: bool
    iterations: int
    max_mismatch: float
    injections: np.ndarray = field(repr=False, default=None)  # complex S at each bus

    @property
    def voltage(self) -> np.ndarray:
        return self.voltage_magnitude * np.exp(1j * self.voltage_angle)


# ---------------------------------------------------------------------------
# Y-bus
# ---------------------------------------------------------------------------

def _branch_stamps(case: GridCase):
    idx = case.bus_index
    rows, cols, vals = [], [], []
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.series_r, br.series_x)
        bc = 0.5j * br.shunt_b
        a = br.tap
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [(ys + bc) / a**2, -ys / a, -ys / a, ys + bc]
    return rows, cols, vals


def build_admittance_matrix(case: GridCase, active_shunts: Iterable[str] = (),
                            extra_shunts: Sequence[ShuntDevice] = ()) -> AdmittanceMatrix:
    """Assemble Y-bus from in-service branches, fixed shunts and the listed switchable shunts.

    ``active_shunts`` names brake/fault devices from ``case.shunt_devices``;
    ``extra_shunts`` adds ad-hoc devices (fault shunts from an event schedule).
    """
    idx = case.bus_index
    rows, cols, vals = _branch_stamps(case)
    active = set(active_shunts)
    known = {s.id for s in case.shunt_devices}
    unknown = active - known
    if unknown:
        raise CaseError(f"unknown shunt ids {sorted(unknown)}")
    for s in case.shunt_devices:
        if s.kind == "fixed" or s.id in active:
            rows.append(idx[s.bus]); cols.append(idx[s.bus]); vals.append(complex(s.g, s.b))
    for s in extra_shunts:
        if s.bus not in idx:
            raise CaseError(f"shunt {s.id} references unknown bus {s.bus}")
        rows.append(idx[s.bus]); cols.append(idx[s.bus]); vals.append(complex(s.g, s.b))
    n = case.n_bus
    Y = sp.csr_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n))
    Y.sum_duplicates()
    return AdmittanceMatrix(Y, tuple(case.bus_ids))


def bus_shunt_totals(case: GridCase, active_shunts: Iterable[str] = ()) -> np.ndarray:
    """Total shunt admittance per bus: line charging halves, fixed and active devices."""
    idx = case.bus_index
    out = np.zeros(case.n_bus, dtype=complex)
    for br in case.branches:
        if br.in_service:
            out[idx[br.from_bus]] += 0.5j * br.shunt_b
            out[idx[br.to_bus]] += 0.5j * br.shunt_b
    active = set(active_shunts)
    for s in case.shunt_devices:
        if s.kind == "fixed" or s.id in active:
            out[idx[s.bus]] += complex(s.g, s.b)
    return out


def check_connected(case: GridCase) -> None:
    Y = build_admittance_matrix(case).matrix
    pattern = (abs(Y) > 0).astype(int)
    n_comp, _ = connected_components(pattern, directed=False)
    if n_comp != 1:
        raise CaseError(f"network has {n_comp} islands")


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------

def specified_injections(case: GridCase) -> np.ndarray:
    """Net complex injection (generation minus load) per bus in p.u."""
    idx = case.bus_index
    s = np.array([complex(-b.load_p, -b.load_q) for b in case.buses])
    for g in case.generators:
        s[idx[g.bus]] += g.p_set
    return s


def _dS_dV(Y, V):
    """Partial derivatives of bus injections w.r.t. voltage angle and magnitude."""
    Ibus = Y @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVn = sp.diags(V / np.abs(V))
    dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
    dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
    return dS_dVa, dS_dVm


def solve_power_flow(case: GridCase, tol: float = PF_TOLERANCE,
                     max_iter: int = PF_MAX_ITER) -> PowerFlowSolution:
    """Full Newton-Raphson in polar coordinates from a flat start.

    Non-convergence (iteration limit, singular Jacobian, non-finite iterate) is
    reported through ``converged=False``; islands raise :class:`CaseError`.
    """
    check_connected(case)
    Y = build_admittance_matrix(case).matrix.tocsc()
    kinds = np.array([b.kind for b in case.buses])
    ref = np.flatnonzero(kinds == "slack")
    pv = np.flatnonzero(kinds == "pv")
    pq = np.flatnonzero(kinds == "pq")
    pvpq = np.r_[pv, pq]
    Sspec = specified_injections(case)

    vm = np.array([b.voltage_setpoint if b.kind != "pq" else 1.0 for b in case.buses])
    va = np.zeros(case.n_bus)
    V = vm * np.exp(1j * va)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - Sspec
        return np.r_[mis[pvpq].real, mis[pq].imag]

    F = mismatch(V)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    converged = norm < tol
    while not converged and it < max_iter:
        it += 1
        dVa, dVm = _dS_dV(Y, V)
        J = sp.vstack([
            sp.hstack([dVa[pvpq][:, pvpq].real, dVm[pvpq][:, pq].real]),
            sp.hstack([dVa[pq][:, pvpq].imag, dVm[pq][:, pq].imag]),
        ], format="csc")
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = spsolve(J, -F)
            except (MatrixRankWarning, RuntimeError, ValueError):
                break
        if not np.all(np.isfinite(dx)):
            break
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(norm):
            break
        converged = norm < tol

    S = V * np.conj(Y @ V)
    return PowerFlowSolution(
        bus_ids=tuple(case.bus_ids),
        voltage_magnitude=np.abs(V),
        voltage_angle=np.angle(V),
        slack_injection=complex(S[ref[0]] + complex(case.buses[ref[0]].load_p,
                                                    case.buses[ref[0]].load_q)),
        converged=bool(converged),
        iterations=it,
        max_mismatch=norm,
        injections=S,
    )


# ---------------------------------------------------------------------------
# Case modifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadDelta:
    """Add ``mw`` to the active load of every listed bus (all loaded buses if None)."""
    mw: float
    buses: tuple[int, ...] | None = None


@dataclass(frozen=True)
class LoadScale:
    """Scale P and Q load (and, by default, generator set points) by ``factor``."""
    factor: float
    buses: tuple[int, ...] | None = None
    scale_generation: bool = True


@dataclass(frozen=True)
class TieFlowDelta:
    """Shift ``mw`` of generation from ``to_area`` into ``from_area``."""
    mw: float
    from_area: int = 1
    to_area: int = 2


@dataclass(frozen=True)
class MotorParamScale:
    factor: float
    params: tuple[str, ...] = ("t_stall", "v_stall")


CaseModifier = LoadDelta | LoadScale | TieFlowDelta | MotorParamScale


def _loaded_buses(case: GridCase, buses):
    if buses is None:
        return {b.id for b in case.buses if b.load_p != 0.0 or b.load_q != 0.0}
    for bid in buses:
        case.bus(bid)
    return set(buses)


def apply_case_modifier(case: GridCase, modifier: CaseModifier) -> GridCase:
    """Return a modified copy of ``case``; the input is never touched."""
    if isinstance(modifier, LoadDelta):
        targets = _loaded_buses(case, modifier.buses)
        dp = modifier.mw / case.base_mva
        buses = []
        for b in case.buses:
            if b.id in targets:
                if b.load_p + dp < 0:
                    raise ModifierError(f"load at bus {b.id} would become negative")
                b = replace(b, load_p=b.load_p + dp)
            buses.append(b)
        return replace(case, buses=tuple(buses))

    if isinstance(modifier, LoadScale):
        if modifier.factor < 0:
            raise ModifierError("negative load scale")
        targets = _loaded_buses(case, modifier.buses)
        buses = tuple(replace(b, load_p=b.load_p * modifier.factor, load_q=b.load_q * modifier.factor)
                      if b.id in targets else b for b in case.buses)
        gens = case.generators
        if modifier.scale_generation:
            gens = tuple(replace(g, p_set=g.p_set * modifier.factor) for g in gens)
        return replace(case, buses=buses, generators=gens)

    if isinstance(modifier, TieFlowDelta):
        if modifier.mw == 0.0:
            return case
        up = [i for i, g in enumerate(case.generators) if g.area == modifier.from_area]
        down = [i for i, g in enumerate(case.generators) if g.area == modifier.to_area]
        if not up or not down:
            raise CaseError("tie-flow modifier needs generators in both areas")
        dp = modifier.mw / case.base_mva
        gens = list(case.generators)
        for i in up:
            gens[i] = replace(gens[i], p_set=gens[i].p_set + dp / len(up))
        for i in down:
            gens[i] = replace(gens[i], p_set=gens[i].p_set - dp / len(down))
        return replace(case, generators=tuple(gens))

    if isinstance(modifier, MotorParamScale):
        bad = set(modifier.params) - {f.name for f in dataclasses.fields(StallParams)}
        if bad:
            raise ModifierError(f"unknown motor parameters {sorted(bad)}")
        motors = tuple(
            replace(m, stall=replace(m.stall, **{p: getattr(m.stall, p) * modifier.factor
                                                 for p in modifier.params}))
            for m in case.motor_loads)
        return replace(case, motor_loads=motors)

    raise TypeError(f"unsupported modifier {modifier!r}")


# ---------------------------------------------------------------------------
# Case files
# ---------------------------------------------------------------------------

_SECTIONS = {
    # name: (min fields, max fields)
    "BUS": (3, 5),
    "BRANCH": (4, 6),
    "GEN": (5, 6),
    "SHUNT": (4, 5),
    "MOTORLOAD": (2, 7),
}


def parse_case(text: str, name: str = "case") -> GridCase:
    """Parse the line-oriented case format (see ``docs/case_format.md``)."""
    base_mva = 100.0
    section = None
    rows: dict[str, list[list[str]]] = {k: [] for k in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head = parts[0].upper()
        if head == "BASE_MVA":
            base_mva = float(parts[1])
            continue
        if head == "NAME":
            name = parts[1]
            continue
        if len(parts) == 1 and parts[0].isalpha():
            if head not in _SECTIONS:
                raise CaseError(f"line {lineno}: unknown section {parts[0]!r}")
            section = head
            continue
        if section is None:
            raise CaseError(f"line {lineno}: data outside of a section")
        lo, hi = _SECTIONS[section]
        if not lo <= len(parts) <= hi:
            raise CaseError(f"line {lineno}: {section} row needs {lo}..{hi} fields, got {len(parts)}")
        rows[section].append(parts)

    try:
        buses = [Bus(int(r[0]), r[1].lower(), *map(float, r[2:])) for r in rows["BUS"]]
        branches = [Branch(int(r[0]), int(r[1]), *map(float, r[2:])) for r in rows["BRANCH"]]
        gens = [Generator(int(r[0]), *map(float, r[1:5]), *(int(v) for v in r[5:6]))
                for r in rows["GEN"]]
        shunts = [ShuntDevice(r[0], int(r[1]), float(r[2]), float(r[3]), *(v.lower() for v in r[4:5]))
                  for r in rows["SHUNT"]]
        motors = [MotorLoad(int(r[0]), float(r[1]), StallParams(*map(float, r[2:])))
                  for r in rows["MOTORLOAD"]]
    except ValueError as exc:
        raise CaseError(f"bad numeric field: {exc}") from None
    return GridCase(base_mva, buses, branches, gens, shunts, motors, name=name)


def load_case(path: str | Path) -> GridCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def format_case(case: GridCase) -> str:
    out = [f"NAME {case.name}", f"BASE_MVA {case.base_mva!r}", "BUS"]
    out += [f"{b.id} {b.kind} {b.voltage_setpoint!r} {b.load_p!r} {b.load_q!r}" for b in case.buses]
    out.append("BRANCH")
    out += [f"{r.from_bus} {r.to_bus} {r.series_r!r} {r.series_x!r} {r.shunt_b!r} {r.tap!r}"
            for r in case.branches if r.in_service]
    out.append("GEN")
    out += [f"{g.bus} {g.inertia_h!r} {g.damping_d!r} {g.xd_prime!r} {g.p_set!r} {g.area}"
            for g in case.generators]
    if case.shunt_devices:
        out.append("SHUNT")
        out += [f"{s.id} {s.bus} {s.g!r} {s.b!r} {s.kind}" for s in case.shunt_devices]
    if case.motor_loads:
        out.append("MOTORLOAD")
        for m in case.motor_loads:
            p = m.stall
            out.append(f"{m.bus} {m.fraction_of_bus_load!r} {p.v_stall!r} {p.t_stall!r} "
                       f"{p.stall_g!r} {p.stall_b!r} {p.t_trip!r}")
    return "\n".join(out) + "\n"


DATA_DIR = Path(__file__).resolve().parent / "data"


def bundled_case(name: str) -> GridCase:
    """Load ``two_area`` or ``ieee39_fidvr`` (or any file under data/cases)."""
    return load_case(DATA_DIR / "cases" / f"{name}.case")
