"""Power-network data model, MATPOWER case I/O and flexible-line configuration.

All electrical quantities are stored in per-unit on the case MVA base.  Cost
coefficients stay in $/h with active power measured in MW.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable

logger = logging.getLogger(__name__)

INF = math.inf

BUS_KINDS = {1: "PQ", 2: "PV", 3: "slack"}
_KIND_CODES = {v: k for k, v in BUS_KINDS.items()}


class CaseError(ValueError):
    """Raised for malformed or inconsistent case / configuration data."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    P_load: float
    Q_load: float
    shunt_g: float
    shunt_b: float
    V_min: float
    V_max: float

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise CaseError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.V_min > 0:
            raise CaseError(f"bus {self.id}: V_min must be positive")
        if self.V_min > self.V_max:
            raise CaseError(f"bus {self.id}: V_min > V_max")


@dataclass(frozen=True)
class Generator:
    bus: int
    P_min: float
    P_max: float
    Q_min: float
    Q_max: float
    # $/h polynomial in MW: c2*P^2 + c1*P + c0
    cost_c2: float = 0.0
    cost_c1: float = 1.0
    cost_c0: float = 0.0

    def __post_init__(self):
        if self.P_min > self.P_max:
            raise CaseError(f"generator at bus {self.bus}: P_min > P_max")
        if self.Q_min > self.Q_max:
            raise CaseError(f"generator at bus {self.bus}: Q_min > Q_max")
        if self.cost_c2 < 0:
            raise CaseError(f"generator at bus {self.bus}: negative quadratic cost")

    def cost(self, P_mw: float) -> float:
        return self.cost_c2 * P_mw * P_mw + self.cost_c1 * P_mw + self.cost_c0


@dataclass(frozen=True)
class Branch:
    """A pi-model branch.  ``tap`` is the off-nominal ratio at the from end."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    charging_b: float = 0.0
    P_flow_max: float = INF
    tap: float = 1.0
    in_service: bool = True

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.in_service and self.r == 0 and self.x == 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")
        if not self.P_flow_max > 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: P_flow_max must be > 0")
        if not self.tap > 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: tap must be > 0")

    @property
    def admittance(self) -> complex:
        """Series admittance of the equivalent pi model (tap folded in)."""
        return 1.0 / complex(self.r, self.x) / self.tap

    @property
    def series_g(self) -> float:
        return self.admittance.real

    @property
    def series_b(self) -> float:
        return self.admittance.imag

    def terminal_shunts(self) -> tuple[complex, complex]:
        """Shunt admittances at (from, to) ends: half charging plus tap terms.

        Charging at the tapped end is referred through the tap, as MATPOWER does.
        """
        y = 1.0 / complex(self.r, self.x)
        t = self.tap
        half = 0.5j * self.charging_b
        return half / t**2 + y * (1 / t**2 - 1 / t), half + y * (1 - 1 / t)

    @property
    def endpoints(self) -> tuple[int, int]:
        return self.from_bus, self.to_bus


@dataclass(frozen=True)
class FlexLineSpec:
    """A flexible-impedance line bound to branch ``branch_index`` of a case.

    ``g_rated`` is nonzero only in proportional mode, where the whole series
    admittance ``g_rated + j*b_rated`` is scaled by the tuning ratio.
    """

    from_bus: int
    to_bus: int
    b_rated: float
    k_min: float
    k_max: float
    g_rated: float = 0.0
    branch_index: int = -1
    circuit: int = 1

    def __post_init__(self):
        if not self.b_rated < 0:
            raise CaseError(f"flex line {self.key}: b_rated must be negative")
        if self.g_rated < 0:
            raise CaseError(f"flex line {self.key}: g_rated must be >= 0")
        if not self.k_min > 0:
            raise CaseError(f"flex line {self.key}: k_min must be positive")
        if self.k_min > self.k_max:
            raise CaseError(f"flex line {self.key}: k_min > k_max")
        if self.k_min > 1 or self.k_max < 1:
            raise CaseError(f"flex line {self.key}: bounds must satisfy k_min <= 1 <= k_max")

    @property
    def key(self) -> tuple[int, int]:
        return self.from_bus, self.to_bus

    @property
    def label(self) -> str:
        base = f"{self.from_bus}-{self.to_bus}"
        return base if self.circuit == 1 else f"{base}#{self.circuit}"

    @property
    def rated_admittance(self) -> complex:
        return complex(self.g_rated, self.b_rated)


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    flex_lines: tuple[FlexLineSpec, ...] = ()
    name: str = "case"

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        known = set(ids)
        if sum(b.kind == "slack" for b in self.buses) != 1:
            raise CaseError("case must have exactly one slack bus")
        for g in self.generators:
            if g.bus not in known:
                raise CaseError(f"generator references unknown bus {g.bus}")
        for br in self.branches:
            for end in br.endpoints:
                if end not in known:
                    raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        seen = set()
        for fl in self.flex_lines:
            if not 0 <= fl.branch_index < len(self.branches):
                raise CaseError(f"flex line {fl.key} is not bound to a branch")
            br = self.branches[fl.branch_index]
            if {br.from_bus, br.to_bus} != set(fl.key) or not br.in_service:
                raise CaseError(f"flex line {fl.key} does not match in-service branch {fl.branch_index}")
            if fl.branch_index in seen:
                raise CaseError(f"flex line {fl.key} listed twice")
            seen.add(fl.branch_index)

    # --- lookups -------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    def active_branches(self) -> list[tuple[int, Branch]]:
        return [(k, br) for k, br in enumerate(self.branches) if br.in_service]

    def flex_branch_indices(self) -> set[int]:
        return {fl.branch_index for fl in self.flex_lines}


# ---------------------------------------------------------------------------
# MATPOWER parsing
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")
_IGNORED = ("bus: area, Vm, Va, baseKV, zone; gen: Pg, Qg, Vg, mBase and capability "
            "curve columns; branch: rateB, rateC, angle limits")
_warned_ignored = False


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_matrix(name: str, body: str, min_cols: int) -> list[list[float]]:
    rows = []
    # rows are separated by ';' or newlines
    for raw in re.split(r"[;\n]", "\n".join(_strip_comment(l) for l in body.splitlines())):
        fields = raw.replace(",", " ").split()
        if not fields:
            continue
        try:
            vals = [float(v) for v in fields]
        except ValueError as exc:
            raise CaseError(f"{name} row {len(rows) + 1}: non-numeric entry ({exc})") from None
        if len(vals) < min_cols:
            raise CaseError(f"{name} row {len(rows) + 1}: expected >= {min_cols} columns, got {len(vals)}")
        rows.append(vals)
    return rows


def parse_matpower_case(text: str, name: str = "case") -> NetworkCase:
    """Parse MATPOWER (version 2) case text into a per-unit ``NetworkCase``."""
    global _warned_ignored
    m = _SCALAR_RE.search(text)
    if not m:
        raise CaseError("missing mpc.baseMVA")
    base = float(m.group(1))
    mats = {key: body for key, body in _MATRIX_RE.findall(text)}
    for required in ("bus", "gen", "branch"):
        if required not in mats:
            raise CaseError(f"missing mpc.{required} matrix")
    bus_rows = _parse_matrix("bus", mats["bus"], 13)
    gen_rows = _parse_matrix("gen", mats["gen"], 10)
    br_rows = _parse_matrix("branch", mats["branch"], 11)
    cost_rows = _parse_matrix("gencost", mats["gencost"], 4) if "gencost" in mats else None
    if not _warned_ignored:
        logger.info("MATPOWER fields not used by the formulation are ignored: %s", _IGNORED)
        _warned_ignored = True

    buses = []
    for k, row in enumerate(bus_rows):
        code = int(row[1])
        if code == 4:
            raise CaseError(f"bus row {k + 1}: isolated buses are not supported")
        if code not in BUS_KINDS:
            raise CaseError(f"bus row {k + 1}: unknown bus type {code}")
        buses.append(Bus(
            id=int(row[0]), kind=BUS_KINDS[code],
            P_load=row[2] / base, Q_load=row[3] / base,
            shunt_g=row[4] / base, shunt_b=row[5] / base,
            V_min=row[12], V_max=row[11],
        ))

    if cost_rows is not None and len(cost_rows) < len(gen_rows):
        raise CaseError(f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    gens = []
    for k, row in enumerate(gen_rows):
        if row[7] <= 0:
            continue
        c2, c1, c0 = 0.0, 1.0, 0.0
        if cost_rows is not None:
            c2, c1, c0 = _quadratic_cost(cost_rows[k], k)
        gens.append(Generator(
            bus=int(row[0]),
            P_min=row[9] / base, P_max=row[8] / base,
            Q_min=row[4] / base, Q_max=row[3] / base,
            cost_c2=c2, cost_c1=c1, cost_c0=c0,
        ))

    branches = []
    for k, row in enumerate(br_rows):
        if len(row) > 9 and row[9] != 0:
            raise CaseError(f"branch row {k + 1}: phase-shifting transformers are not supported")
        status = row[10] > 0
        rate = row[5]
        try:
            branches.append(Branch(
                from_bus=int(row[0]), to_bus=int(row[1]),
                r=row[2], x=row[3], charging_b=row[4],
                P_flow_max=rate / base if rate > 0 else INF,
                tap=row[8] if row[8] != 0 else 1.0,
                in_service=status,
            ))
        except CaseError as exc:
            raise CaseError(f"branch row {k + 1}: {exc}") from None
    return NetworkCase(base_mva=base, buses=tuple(buses), generators=tuple(gens),
                       branches=tuple(branches), name=name)


def _quadratic_cost(row: list[float], k: int) -> tuple[float, float, float]:
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise CaseError(f"gencost row {k + 1}: only polynomial (model 2) costs are supported")
    coeffs = row[4:4 + ncost]
    if len(coeffs) != ncost:
        raise CaseError(f"gencost row {k + 1}: expected {ncost} coefficients, got {len(coeffs)}")
    if ncost > 3 and any(c != 0 for c in coeffs[:ncost - 3]):
        raise CaseError(f"gencost row {k + 1}: cost polynomial above degree 2")
    padded = [0.0] * max(0, 3 - ncost) + list(coeffs[-3:])
    return padded[0], padded[1], padded[2]


def load_case(path) -> NetworkCase:
    from pathlib import Path

    path = Path(path)
    return parse_matpower_case(path.read_text(), name=path.stem)


def _fmt(v: float) -> str:
    if v == INF:
        return "0"
    return repr(float(v)) if v != int(v) else str(int(v))


def write_matpower_case(case: NetworkCase) -> str:
    """Serialize to MATPOWER text; ``parse_matpower_case`` inverts it."""
    base = case.base_mva
    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "",
           "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin", "mpc.bus = ["]
    for b in case.buses:
        vals = [b.id, _KIND_CODES[b.kind], b.P_load * base, b.Q_load * base, b.shunt_g * base,
                b.shunt_b * base, 1, 1, 0, 0, 1, b.V_max, b.V_min]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for g in case.generators:
        vals = [g.bus, 0, 0, g.Q_max * base, g.Q_min * base, 1, base, 1, g.P_max * base, g.P_min * base]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
    for br in case.branches:
        rate = br.P_flow_max * base if br.P_flow_max != INF else 0
        vals = [br.from_bus, br.to_bus, br.r, br.x, br.charging_b, rate, 0, 0,
                0 if br.tap == 1.0 else br.tap, 0, int(br.in_service)]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "", "mpc.gencost = ["]
    for g in case.generators:
        vals = [2, 0, 0, 3, g.cost_c2, g.cost_c1, g.cost_c0]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Flexible-line configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseModifications:
    """Set-to-value / scaling edits applied to a case before solving."""

    pmax_scale: float = 1.0
    flow_limit: float | None = None  # p.u., applied to every in-service branch
    zero_flex_resistance: bool = False
    zero_flex_charging: bool = False

    @property
    def is_identity(self) -> bool:
        return self == CaseModifications()


@dataclass(frozen=True)
class FlexConfig:
    lines: tuple[FlexLineSpec, ...]
    epsilon: float = 0.04
    wq: float = 0.2
    q_penalty_scale: float | None = None
    proportional: bool = False
    modifications: CaseModifications = field(default_factory=CaseModifications)


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def parse_flex_config(text: str, case: NetworkCase) -> FlexConfig:
    """Parse a flexible-line configuration and bind its lines to ``case``.

    The format is line oriented; ``#`` starts a comment.  Before a ``[lines]``
    header, lines are ``key = value`` options.  After it, each line is
    ``from to k_min k_max [circuit]``.  See ``docs/flex-config.md``.
    """
    opts: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    in_lines = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "[lines]":
            in_lines = True
            continue
        if in_lines:
            rows.append((lineno, line.split()))
        else:
            if "=" not in line:
                raise CaseError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            opts[key.lower()] = value

    def num(key, default):
        if key not in opts:
            return default
        try:
            return float(opts.pop(key))
        except ValueError:
            raise CaseError(f"config option {key}: not a number") from None

    def flag(key, default):
        if key not in opts:
            return default
        value = opts.pop(key).lower()
        if value not in _BOOL:
            raise CaseError(f"config option {key}: expected a boolean, got {value!r}")
        return _BOOL[value]

    epsilon = num("epsilon", 0.04)
    wq = num("wq", 0.2)
    q_scale = num("q_penalty_scale", None)
    flow_mw = num("pmax_flow_mw", None)
    mods = CaseModifications(
        pmax_scale=num("scale_pgmax", 1.0),
        flow_limit=None if flow_mw is None else flow_mw / case.base_mva,
        zero_flex_resistance=flag("zero_flex_resistance", False),
        zero_flex_charging=flag("zero_flex_charging", False),
    )
    mode = opts.pop("mode", "susceptance").lower()
    if mode not in ("susceptance", "proportional"):
        raise CaseError(f"config option mode: unknown value {mode!r}")
    default_kmin = num("k_min", None)
    default_kmax = num("k_max", None)
    if opts:
        raise CaseError(f"unknown config options: {', '.join(sorted(opts))}")

    specs = []
    for lineno, fields in rows:
        if len(fields) not in (2, 4, 5):
            raise CaseError(f"config line {lineno}: expected 'from to [k_min k_max [circuit]]'")
        try:
            f, t = int(fields[0]), int(fields[1])
            kmin = float(fields[2]) if len(fields) > 2 else default_kmin
            kmax = float(fields[3]) if len(fields) > 3 else default_kmax
            circuit = int(fields[4]) if len(fields) > 4 else None
        except ValueError:
            raise CaseError(f"config line {lineno}: malformed entry") from None
        if kmin is None or kmax is None:
            raise CaseError(f"config line {lineno}: k bounds missing and no defaults given")
        # without a circuit number every parallel circuit becomes flexible
        circuits = [circuit] if circuit is not None else range(1, len(_parallel(case, f, t)) + 1)
        if not circuits:
            raise CaseError(f"flex line ({f}, {t}) does not match any in-service branch")
        for c in circuits:
            specs.append(_bind(case, f, t, kmin, kmax, c, mode == "proportional"))
    keys = [s.branch_index for s in specs]
    if len(set(keys)) != len(keys):
        raise CaseError("the same flexible line is listed twice")
    return FlexConfig(lines=tuple(specs), epsilon=epsilon, wq=wq, q_penalty_scale=q_scale,
                      proportional=mode == "proportional", modifications=mods)


def _parallel(case: NetworkCase, f: int, t: int) -> list[int]:
    return [k for k, br in case.active_branches() if {br.from_bus, br.to_bus} == {f, t}]


def _bind(case: NetworkCase, f: int, t: int, kmin: float, kmax: float,
          circuit: int, proportional: bool) -> FlexLineSpec:
    matches = _parallel(case, f, t)
    if not matches:
        raise CaseError(f"flex line ({f}, {t}) does not match any in-service branch")
    if not 1 <= circuit <= len(matches):
        raise CaseError(f"flex line ({f}, {t}): circuit {circuit} of {len(matches)}")
    k = matches[circuit - 1]
    br = case.branches[k]
    if br.tap != 1.0:
        raise CaseError(f"flex line ({f}, {t}) is a tap-changing transformer")
    y = br.admittance
    if y.imag >= 0:
        raise CaseError(f"flex line ({f}, {t}): series susceptance must be negative")
    return FlexLineSpec(from_bus=br.from_bus, to_bus=br.to_bus, b_rated=y.imag,
                        g_rated=y.real if proportional else 0.0,
                        k_min=kmin, k_max=kmax, branch_index=k, circuit=circuit)


def with_flex_lines(case: NetworkCase, lines: Iterable[FlexLineSpec]) -> NetworkCase:
    return dataclasses.replace(case, flex_lines=tuple(lines))


def apply_case_modifications(case: NetworkCase, mods: CaseModifications) -> NetworkCase:
    """Return a modified copy of ``case``; flex lines are re-bound afterwards."""
    if mods.is_identity:
        return case
    gens = tuple(dataclasses.replace(g, P_max=g.P_max * mods.pmax_scale) for g in case.generators)
    flex_idx = case.flex_branch_indices()
    branches = []
    for k, br in enumerate(case.branches):
        changes = {}
        if mods.flow_limit is not None and br.in_service:
            changes["P_flow_max"] = mods.flow_limit
        if k in flex_idx:
            if mods.zero_flex_resistance:
                changes["r"] = 0.0
            if mods.zero_flex_charging:
                changes["charging_b"] = 0.0
        branches.append(dataclasses.replace(br, **changes) if changes else br)
    out = dataclasses.replace(case, generators=gens, branches=tuple(branches), flex_lines=())
    rebound = [
        _bind(out, fl.from_bus, fl.to_bus, fl.k_min, fl.k_max, fl.circuit, fl.g_rated > 0)
        for fl in case.flex_lines
    ]
    return with_flex_lines(out, rebound)


def conventional_case(case: NetworkCase) -> NetworkCase:
    """Replace every flex line by a constant branch at its rated admittance."""
    branches = list(case.branches)
    for fl in case.flex_lines:
        br = branches[fl.branch_index]
        z = 1.0 / fl.rated_admittance
        branches[fl.branch_index] = dataclasses.replace(br, r=z.real, x=z.imag)
    return dataclasses.replace(case, branches=tuple(branches), flex_lines=())


def prepare_case(case: NetworkCase, config: FlexConfig) -> NetworkCase:
    """Attach the configured flex lines and apply the configured modifications."""
    out = apply_case_modifications(with_flex_lines(case, config.lines), config.modifications)
    for fl in out.flex_lines:
        g = out.branches[fl.branch_index].series_g
        if fl.g_rated == 0 and g != 0:
            logger.warning("flex line %s: series conductance %.4g dropped in susceptance mode", fl.key, g)
    return out
