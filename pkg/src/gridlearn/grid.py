"""Per-unit network model and a reader for MATPOWER-style case files.

Only the subset needed for the AC-OPF model used throughout the package is
supported: bus, gen, branch and polynomial (degree <= 2) gencost tables.
Branch line charging, transformer taps, phase shifts and bus shunts are read
but dropped, with a warning when any of them is nonzero.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS = 0, 1, 2, 3, 4, 5
BASE_KV, VMAX, VMIN = 9, 11, 12
GEN_BUS, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A = 0, 1, 2, 3, 4, 5
TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX = 8, 9, 10, 11, 12

MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)


class NetworkError(CaseError):
    """The case parsed but does not describe a usable network."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    base_kv: float
    is_reference: bool = False


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (c2, c1, c0) on MW


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    s_max: float | None = None  # None means unlimited
    theta_delta: float = 2 * math.pi


@dataclass(frozen=True)
class Load:
    bus: int
    p0: float
    q0: float


@dataclass(frozen=True)
class Network:
    """Immutable per-unit network.

    ``Generator.bus``, ``Branch.from_bus/to_bus`` and ``Load.bus`` are dense
    internal bus indices (0..n-1); ``Bus.id`` keeps the id from the case file.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @cached_property
    def ref_bus(self) -> int:
        refs = [i for i, bus in enumerate(self.buses) if bus.is_reference]
        if not refs:
            raise NetworkError("network has no reference bus")
        return refs[0]

    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(bus.id for bus in self.buses)

    @cached_property
    def arrays(self) -> "NetworkArrays":
        return NetworkArrays.build(self)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [asdict(b) for b in self.buses],
            "generators": [dict(asdict(g), cost=list(g.cost)) for g in self.generators],
            "branches": [asdict(br) for br in self.branches],
            "loads": [asdict(ld) for ld in self.loads],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise CaseError(f"unsupported network schema version {version!r}")
        return cls(
            base_mva=float(data["base_mva"]),
            buses=tuple(Bus(**b) for b in data["buses"]),
            generators=tuple(
                Generator(**dict(g, cost=tuple(g["cost"]))) for g in data["generators"]
            ),
            branches=tuple(Branch(**br) for br in data["branches"]),
            loads=tuple(Load(**ld) for ld in data["loads"]),
            name=data.get("name", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))

    @cached_property
    def case_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def nominal_load(self) -> tuple[np.ndarray, np.ndarray]:
        return self.arrays.load_p0.copy(), self.arrays.load_q0.copy()


def _readonly(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NetworkArrays:
    """Vectorised view of a Network; directed branch arrays have length 2e
    (forward directions first, then the reverses)."""

    v_min: np.ndarray
    v_max: np.ndarray
    base_kv: np.ndarray
    gen_bus: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    cost: np.ndarray  # (m, 3): c2, c1, c0
    br_from: np.ndarray
    br_to: np.ndarray
    br_g: np.ndarray
    br_b: np.ndarray
    br_smax: np.ndarray  # inf where unlimited
    br_theta_delta: np.ndarray
    load_bus: np.ndarray
    load_p0: np.ndarray
    load_q0: np.ndarray
    dir_from: np.ndarray = field(repr=False)
    dir_to: np.ndarray = field(repr=False)
    dir_g: np.ndarray = field(repr=False)
    dir_b: np.ndarray = field(repr=False)
    dir_smax: np.ndarray = field(repr=False)
    # one-hot maps gen->bus (m, n), load->bus (l, n), directed origin->bus (2e, n)
    gen_inc: np.ndarray = field(repr=False)
    load_inc: np.ndarray = field(repr=False)
    from_inc: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, net: Network) -> "NetworkArrays":
        f = np.array([br.from_bus for br in net.branches], dtype=np.intp)
        t = np.array([br.to_bus for br in net.branches], dtype=np.intp)
        g = np.array([br.g for br in net.branches], dtype=float)
        b = np.array([br.b for br in net.branches], dtype=float)
        smax = np.array(
            [math.inf if br.s_max is None else br.s_max for br in net.branches], dtype=float
        )
        cost = np.array([gen.cost for gen in net.generators], dtype=float).reshape(-1, 3)
        n = net.n_bus

        def onehot(idx):
            mat = np.zeros((len(idx), n))
            mat[np.arange(len(idx)), idx] = 1.0
            return mat

        gen_bus = np.array([gen.bus for gen in net.generators], dtype=np.intp)
        load_bus = np.array([ld.bus for ld in net.loads], dtype=np.intp)
        fields = dict(
            v_min=[bus.v_min for bus in net.buses],
            v_max=[bus.v_max for bus in net.buses],
            base_kv=[bus.base_kv for bus in net.buses],
            gen_bus=gen_bus,
            p_min=[gen.p_min for gen in net.generators],
            p_max=[gen.p_max for gen in net.generators],
            q_min=[gen.q_min for gen in net.generators],
            q_max=[gen.q_max for gen in net.generators],
            cost=cost,
            br_from=f,
            br_to=t,
            br_g=g,
            br_b=b,
            br_smax=smax,
            br_theta_delta=[br.theta_delta for br in net.branches],
            load_bus=load_bus,
            load_p0=[ld.p0 for ld in net.loads],
            load_q0=[ld.q0 for ld in net.loads],
            dir_from=np.concatenate([f, t]),
            dir_to=np.concatenate([t, f]),
            dir_g=np.concatenate([g, g]),
            dir_b=np.concatenate([b, b]),
            dir_smax=np.concatenate([smax, smax]),
            gen_inc=onehot(gen_bus),
            load_inc=onehot(load_bus),
            from_inc=onehot(np.concatenate([f, t])),
        )
        return cls(**{k: _readonly(np.asarray(v, dtype=float) if isinstance(v, list) else v)
                      for k, v in fields.items()})

    @property
    def n_bus(self) -> int:
        return len(self.v_min)


# ---------------------------------------------------------------------------
# MATPOWER reader


_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:Inf|inf|NaN|nan)")


def _strip_comment(line: str) -> str:
    # '%' starts a comment unless inside a quoted string
    quote = False
    for k, ch in enumerate(line):
        if ch == "'":
            quote = not quote
        elif ch == "%" and not quote:
            return line[:k]
    return line


def _read_tables(text: str) -> tuple[dict, dict]:
    """Return ({name: (rows, first_line)}, {name: (value, line)}) for numeric
    matrices and scalar assignments found in the text."""
    tables: dict[str, tuple[list[list[float]], int]] = {}
    scalars: dict[str, tuple[str, int]] = {}
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        raw = _strip_comment(lines[k])
        lineno = k + 1
        m = _ASSIGN.match(raw)
        k += 1
        if not m:
            continue
        name, rest = m.group(1), raw[m.end():]
        opener = rest.lstrip()[:1]
        if opener == "[":
            col0 = len(raw) - len(rest.lstrip()) + 1
            body: list[tuple[int, int, str]] = []
            rest = rest[rest.index("[") + 1:]
            offset = raw.index("[") + 1
            cur_line = lineno
            while True:
                if "]" in rest:
                    body.append((cur_line, offset, rest[: rest.index("]")]))
                    break
                body.append((cur_line, offset, rest))
                if k >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix 'mpc.{name}'", lineno, col0)
                rest = _strip_comment(lines[k])
                cur_line, offset = k + 1, 0
                k += 1
            tables[name] = (_parse_rows(name, body), lineno)
        elif opener == "{":
            # cell arrays (bus names etc.) are skipped
            depth = rest.count("{") - rest.count("}")
            while depth > 0 and k < len(lines):
                seg = _strip_comment(lines[k])
                depth += seg.count("{") - seg.count("}")
                k += 1
        else:
            value = rest.strip().rstrip(";").strip()
            scalars[name] = (value, lineno)
    return tables, scalars


def _parse_rows(name: str, body) -> list[list[float]]:
    rows: list[list[float]] = []
    current: list[float] = []
    for lineno, offset, segment in body:
        pos = 0
        for part in re.split(r"(;)", segment):
            if part == ";":
                if current:
                    rows.append(current)
                current = []
                pos += 1
                continue
            for tok in re.finditer(r"[^\s,]+", part):
                s = tok.group(0)
                if not _NUMBER.fullmatch(s):
                    col = offset + pos + tok.start() + 1
                    raise CaseSyntaxError(
                        f"non-numeric entry {s!r} in 'mpc.{name}'", lineno, col
                    )
                current.append(float(s))
            pos += len(part)
        # a newline also terminates a row
        if current:
            rows.append(current)
            current = []
    if current:
        rows.append(current)
    return rows


def _check_table(name: str, tables: dict) -> tuple[list[list[float]], int]:
    if name not in tables:
        raise CaseSyntaxError(f"missing table 'mpc.{name}'")
    rows, lineno = tables[name]
    need = MIN_COLS[name]
    for k, row in enumerate(rows):
        if len(row) < need:
            raise CaseSyntaxError(
                f"'mpc.{name}' row {k + 1} has {len(row)} columns, expected at least {need}",
                lineno,
                1,
            )
    return rows, lineno


def parse_case(
    text: str, name: str = "", *, strict: bool = True, default_base_kv: float = 1.0
) -> Network:
    """Parse MATPOWER-dialect case text into a per-unit Network.

    Raises CaseSyntaxError for malformed input and NetworkError for an
    unknown bus reference, a non-positive baseMVA or piecewise-linear costs.
    With ``strict`` (the default) a missing reference bus or a disconnected
    graph also raise NetworkError; otherwise they are left for validate().
    """
    tables, scalars = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing scalar 'mpc.baseMVA'")
    raw, lineno = scalars["baseMVA"]
    try:
        base_mva = float(raw)
    except ValueError:
        raise CaseSyntaxError(f"baseMVA is not a number: {raw!r}", lineno, 1) from None
    if not base_mva > 0:
        raise NetworkError(f"baseMVA must be positive, got {base_mva}")

    bus_rows, _ = _check_table("bus", tables)
    gen_rows, _ = _check_table("gen", tables)
    br_rows, _ = _check_table("branch", tables)
    cost_rows, _ = _check_table("gencost", tables)
    if not name and "function" in text[:200]:
        m = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
        name = m.group(1) if m else ""

    buses: list[Bus] = []
    index: dict[int, int] = {}
    loads: list[tuple[int, float, float]] = []
    have_ref = False
    dropped_shunts = 0
    for row in bus_rows:
        bus_id, btype = int(row[BUS_I]), int(row[BUS_TYPE])
        if btype == 4:
            log.warning("bus %d is isolated (type 4) and is dropped", bus_id)
            continue
        if bus_id in index:
            raise NetworkError(f"duplicate bus id {bus_id}")
        is_ref = btype == 3 and not have_ref
        have_ref |= is_ref
        kv = row[BASE_KV]
        if kv <= 0:
            kv = default_base_kv
        index[bus_id] = len(buses)
        buses.append(Bus(bus_id, row[VMIN], row[VMAX], kv, is_ref))
        if row[PD] != 0 or row[QD] != 0:
            loads.append((index[bus_id], row[PD] / base_mva, row[QD] / base_mva))
        if row[GS] != 0 or row[BS] != 0:
            dropped_shunts += 1
    if dropped_shunts:
        log.warning("%d bus shunt(s) ignored", dropped_shunts)
    if any(row[BASE_KV] <= 0 for row in bus_rows):
        log.warning("baseKV missing for some buses; using %g kV", default_base_kv)

    def bus_index(bus_id: float, what: str) -> int:
        try:
            return index[int(bus_id)]
        except KeyError:
            raise NetworkError(f"{what} references unknown bus {int(bus_id)}") from None

    if len(cost_rows) < len(gen_rows):
        raise NetworkError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators"
        )
    if len(cost_rows) > len(gen_rows):
        log.warning("reactive power cost rows in gencost are ignored")
    generators: list[Generator] = []
    for k, (row, crow) in enumerate(zip(gen_rows, cost_rows)):
        if row[GEN_STATUS] <= 0:
            continue
        generators.append(
            Generator(
                bus=bus_index(row[GEN_BUS], f"gen row {k + 1}"),
                p_min=row[PMIN] / base_mva,
                p_max=row[PMAX] / base_mva,
                q_min=row[QMIN] / base_mva,
                q_max=row[QMAX] / base_mva,
                cost=_poly_cost(crow, k),
            )
        )

    branches: list[Branch] = []
    dropped = 0
    for k, row in enumerate(br_rows):
        if row[BR_STATUS] <= 0:
            continue
        f = bus_index(row[F_BUS], f"branch row {k + 1}")
        t = bus_index(row[T_BUS], f"branch row {k + 1}")
        r, x = row[BR_R], row[BR_X]
        z2 = r * r + x * x
        if z2 == 0:
            raise NetworkError(f"branch row {k + 1} has zero impedance")
        tap = row[TAP] if len(row) > TAP else 0.0
        shift = row[SHIFT] if len(row) > SHIFT else 0.0
        if row[BR_B] != 0 or tap not in (0.0, 1.0) or shift != 0:
            dropped += 1
        rate = row[RATE_A]
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                g=r / z2,
                b=-x / z2,
                s_max=rate / base_mva if rate > 0 else None,
                theta_delta=_angle_limit(row),
            )
        )
    if dropped:
        log.warning(
            "line charging / tap ratio / phase shift ignored on %d branch(es)", dropped
        )

    net = Network(
        base_mva=base_mva,
        buses=tuple(buses),
        generators=tuple(generators),
        branches=tuple(branches),
        loads=tuple(Load(*ld) for ld in loads),
        name=name,
    )
    if strict:
        problems = [d for d in validate(net) if d.startswith(("reference", "graph"))]
        if problems:
            raise NetworkError(problems)
    return net


def _poly_cost(crow: list[float], k: int) -> tuple[float, float, float]:
    model = int(crow[0])
    if model == 1:
        raise NetworkError(
            f"gencost row {k + 1}: piecewise-linear costs are not supported"
        )
    if model != 2:
        raise NetworkError(f"gencost row {k + 1}: unknown cost model {model}")
    n = int(crow[3])
    coeffs = crow[4 : 4 + n]
    if len(coeffs) < n:
        raise NetworkError(f"gencost row {k + 1}: expected {n} coefficients")
    if n > 3 and any(coeffs[: n - 3]):
        raise NetworkError(f"gencost row {k + 1}: polynomial degree above 2")
    padded = [0.0, 0.0, 0.0] + list(coeffs)
    c2, c1, c0 = padded[-3:]
    return (float(c2), float(c1), float(c0))


def _angle_limit(row: list[float]) -> float:
    """Symmetric angle-difference bound in radians; 0 or |limit| >= 360 deg
    means unconstrained and maps to 2*pi."""
    if len(row) <= ANGMAX:
        return 2 * math.pi
    lims = [abs(row[ANGMIN]), abs(row[ANGMAX])]
    lims = [a for a in lims if 0 < a < 360]
    if not lims:
        return 2 * math.pi
    return math.radians(min(lims))


def load_case(name_or_path: str | Path, **kwargs) -> Network:
    """Load a bundled case by name (``case14``) or a case file by path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return Network.from_json(path.read_text())
    if not path.exists():
        stem = str(name_or_path).removesuffix(".m")
        res = resources.files("gridlearn") / "cases" / f"{stem}.m"
        if not res.is_file():
            raise FileNotFoundError(f"no case file or bundled case named {name_or_path!r}")
        return parse_case(res.read_text(), name=stem, **kwargs)
    return parse_case(path.read_text(), name=path.stem, **kwargs)


def bundled_cases() -> list[str]:
    folder = resources.files("gridlearn") / "cases"
    return sorted(p.name.removesuffix(".m") for p in folder.iterdir() if p.name.endswith(".m"))


# ---------------------------------------------------------------------------
# Validation and writing


def validate(net: Network) -> list[str]:
    """Return every invariant breach as a human-readable diagnostic."""
    out: list[str] = []
    n = net.n_bus
    if not net.base_mva > 0:
        out.append(f"base_mva must be positive, got {net.base_mva}")
    refs = [bus.id for bus in net.buses if bus.is_reference]
    if not refs:
        out.append("reference bus missing: exactly one bus must be the reference")
    elif len(refs) > 1:
        out.append(f"reference bus must be unique, found buses {refs}")
    for bus in net.buses:
        if not 0 < bus.v_min <= bus.v_max:
            out.append(
                f"bus {bus.id}: voltage bounds out of order (v_min={bus.v_min}, v_max={bus.v_max})"
            )
        if not bus.base_kv > 0:
            out.append(f"bus {bus.id}: base_kv must be positive, got {bus.base_kv}")
    for k, gen in enumerate(net.generators):
        if not 0 <= gen.bus < n:
            out.append(f"generator {k}: unknown bus index {gen.bus}")
        if gen.p_min > gen.p_max:
            out.append(f"generator {k}: p_min > p_max")
        if gen.q_min > gen.q_max:
            out.append(f"generator {k}: q_min > q_max")
        if gen.cost[0] < 0:
            out.append(f"generator {k}: negative quadratic cost coefficient")
    for k, br in enumerate(net.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            out.append(f"branch {k}: unknown bus index")
        elif br.from_bus == br.to_bus:
            out.append(f"branch {k}: from_bus equals to_bus")
        if br.s_max is not None and not br.s_max > 0:
            out.append(f"branch {k}: s_max must be positive or absent")
        if not br.theta_delta > 0:
            out.append(f"branch {k}: theta_delta must be positive")
    for k, ld in enumerate(net.loads):
        if not 0 <= ld.bus < n:
            out.append(f"load {k}: unknown bus index {ld.bus}")
        if ld.p0 < 0:
            out.append(f"load {k} at bus index {ld.bus}: negative active demand")
    values = [net.base_mva] + [
        x
        for obj in (*net.buses, *net.generators, *net.branches, *net.loads)
        for x in asdict(obj).values()
        if isinstance(x, float)
    ]
    if not all(math.isfinite(x) for x in values):
        out.append("non-finite numeric field")
    if n and not _connected(net):
        out.append("graph is disconnected")
    return out


def _connected(net: Network) -> bool:
    n = net.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in net.branches:
        if 0 <= br.from_bus < n and 0 <= br.to_bus < n:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def to_case_text(net: Network) -> str:
    """Write a Network back as MATPOWER text (dropped features written as 0)."""
    base = net.base_mva
    load_at = {ld.bus: ld for ld in net.loads}
    lines = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
             f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for i, bus in enumerate(net.buses):
        ld = load_at.get(i)
        pd, qd = (ld.p0 * base, ld.q0 * base) if ld else (0.0, 0.0)
        btype = 3 if bus.is_reference else 1
        lines.append(
            f"\t{bus.id}\t{btype}\t{pd!r}\t{qd!r}\t0\t0\t1\t1\t0\t{bus.base_kv!r}\t1"
            f"\t{bus.v_max!r}\t{bus.v_min!r};"
        )
    lines += ["];", "mpc.gen = ["]
    for gen in net.generators:
        lines.append(
            f"\t{net.buses[gen.bus].id}\t0\t0\t{gen.q_max * base!r}\t{gen.q_min * base!r}"
            f"\t1\t{base!r}\t1\t{gen.p_max * base!r}\t{gen.p_min * base!r};"
        )
    lines += ["];", "mpc.branch = ["]
    for br in net.branches:
        y2 = br.g * br.g + br.b * br.b
        r, x = br.g / y2, -br.b / y2
        rate = 0.0 if br.s_max is None else br.s_max * base
        ang = math.degrees(br.theta_delta) if br.theta_delta < 2 * math.pi else 360.0
        lines.append(
            f"\t{net.buses[br.from_bus].id}\t{net.buses[br.to_bus].id}\t{r!r}\t{x!r}\t0"
            f"\t{rate!r}\t0\t0\t0\t0\t1\t{-ang!r}\t{ang!r};"
        )
    lines += ["];", "mpc.gencost = ["]
    for gen in net.generators:
        c2, c1, c0 = gen.cost
        lines.append(f"\t2\t0\t0\t3\t{c2!r}\t{c1!r}\t{c0!r};")
    lines += ["];", ""]
    return "\n".join(lines)
