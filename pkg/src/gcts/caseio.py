"""Case files, stitching configs, bid books, scenarios and report output.

Config grammar (TOML, or JSON with the same structure), ``version = 1``::

    # stitch config
    version = 1
    cost_model = "quadratic"       # or "linear"
    weighted_area = 1              # area whose costs the factor w scales
    line_limit_mw = 100.0          # optional cap on every internal branch rating
    [[area]]
    id = 1
    case = "case14"                # bundled case name or a path
    offset = 0                     # added to every bus id of the case
    [[tie]]
    from = [1, 5]                  # [area, global bus id]
    to = [2, 15]
    reactance_pu = 0.1
    limit_mw = 100.0

    # bid book
    version = 1
    [[bid]]
    id = 1
    sell_to = [2, 15]
    buy_from = [1, 5]
    dpi = 1.0
    s_max = 30.0

    # scenario
    version = 1
    n_samples = 100
    load_sigma_fraction = 0.05
    rng_seed = 7
    w = 1.0
    uniform_dpi = 0.1              # optional

Tie-line and bid bus ids are global, i.e. after the area offset.
"""
from __future__ import annotations

import csv
import json
import math
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import tomli_w

from .bids import BidBook, BidValidationError, InterfaceBid, validate_bids
from .netmodel import AreaPartition, Branch, Bus, CostCurve, Generator, PowerNetwork

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1
FLOAT_FMT = "%.6g"


class CaseParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


class ConfigError(ValueError):
    pass


# -- MATPOWER-style case files ---------------------------------------------

_BLOCK_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^;\[]+);")


def bundled_case(name: str) -> Path:
    return Path(str(resources.files("gcts") / "data" / "cases" / f"{name}.m"))


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("gcts") / "data" / "configs" / name))


def _read_matrices(path: Path):
    text = path.read_text(encoding="utf-8")
    scalars: dict[str, float] = {}
    blocks: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            m = _BLOCK_RE.match(line)
            if m:
                current = m.group(1)
                blocks[current] = []
                line = line[m.end():].strip()
            else:
                m = _SCALAR_RE.match(line)
                if m:
                    val = m.group(2).strip().strip("'\"")
                    try:
                        scalars[m.group(1)] = float(val)
                    except ValueError:
                        scalars[m.group(1)] = val
                continue
        closing = "]" in line
        body = line.split("]", 1)[0]
        for chunk in body.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                row = [float(tok) for tok in chunk.replace(",", " ").split()]
            except ValueError as exc:
                raise CaseParseError(path, lineno, f"malformed row in mpc.{current}: {chunk!r}") from exc
            blocks[current].append((lineno, row))
        if closing:
            current = None
    if current is not None:
        raise CaseParseError(path, None, f"unterminated matrix mpc.{current}")
    return scalars, blocks


def _need(row, n, path, lineno, what):
    if len(row) < n:
        raise CaseParseError(path, lineno, f"{what} row has {len(row)} columns, need {n}")


def _cost_curve(row, path, lineno) -> CostCurve:
    _need(row, 4, path, lineno, "gencost")
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise CaseParseError(path, lineno, f"unsupported gencost model {model} (only polynomial model 2)")
    coef = row[4:4 + ncost]
    if len(coef) != ncost:
        raise CaseParseError(path, lineno, f"gencost row declares {ncost} coefficients, found {len(coef)}")
    coef = coef[::-1]  # ascending order: c0, c1, c2, ...
    if any(c != 0 for c in coef[3:]):
        raise CaseParseError(path, lineno, "polynomial costs above degree 2 are not supported")
    coef = list(coef[:3]) + [0.0] * (3 - min(3, len(coef)))
    if coef[2] < 0:
        raise CaseParseError(path, lineno, "gencost quadratic coefficient must be >= 0")
    return CostCurve(coef[0], coef[1], coef[2])


def parse_case(path, area: int = 1, offset: int = 0) -> PowerNetwork:
    """Read a MATPOWER-style case into a single-area :class:`PowerNetwork`.

    Only DC-relevant columns are used.  Out-of-service branches and
    generators and isolated buses are dropped; ``rateA = 0`` means no
    limit; off-nominal taps scale the series reactance.
    """
    path = Path(path)
    if not path.exists() and not path.suffix:
        path = bundled_case(str(path))
    if not path.exists():
        raise CaseParseError(path, None, "file not found")
    scalars, blocks = _read_matrices(path)
    for name in ("bus", "gen", "branch"):
        if not blocks.get(name):
            raise CaseParseError(path, None, f"missing or empty mpc.{name}")
    base = float(scalars.get("baseMVA", 100.0))

    buses, isolated = [], set()
    for lineno, row in blocks["bus"]:
        _need(row, 3, path, lineno, "bus")
        bid = int(row[0])
        if int(row[1]) == 4:
            isolated.add(bid)
            continue
        buses.append(Bus(bid + offset, area, float(row[2])))
    known = {b.id - offset for b in buses}

    branches = []
    for lineno, row in blocks["branch"]:
        _need(row, 4, path, lineno, "branch")
        f, t = int(row[0]), int(row[1])
        if len(row) > 10 and row[10] <= 0:
            continue
        if f in isolated or t in isolated:
            continue
        if f not in known or t not in known:
            raise CaseParseError(path, lineno, f"branch {f}-{t} references an unknown bus")
        x = float(row[3])
        tap = float(row[8]) if len(row) > 8 and row[8] != 0 else 1.0
        rate = float(row[5]) if len(row) > 5 else 0.0
        if x <= 0:
            raise CaseParseError(path, lineno, f"branch {f}-{t} has non-positive reactance {x}")
        branches.append(Branch(f + offset, t + offset, x * tap, rate if rate > 0 else math.inf))

    cost_rows = blocks.get("gencost", [])
    if len(cost_rows) < len(blocks["gen"]):
        raise CaseParseError(path, None, "fewer gencost rows than generators")
    gens = []
    for (lineno, row), (clineno, crow) in zip(blocks["gen"], cost_rows):
        _need(row, 10, path, lineno, "gen")
        if row[7] <= 0:
            continue
        bus = int(row[0])
        if bus not in known:
            raise CaseParseError(path, lineno, f"generator at unknown bus {bus}")
        gens.append(Generator(bus + offset, float(row[9]), float(row[8]), _cost_curve(crow, path, clineno)))
    return PowerNetwork(tuple(buses), tuple(branches), tuple(gens), base)


# -- config files -----------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(raw) if path.suffix.lower() == ".json" else tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    version = data.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {version!r} (expected {CONFIG_VERSION})")
    return data


def dump_config(data: Mapping, path) -> None:
    path = Path(path)
    data = {"version": CONFIG_VERSION, **{k: v for k, v in data.items() if k != "version"}}
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    else:
        path.write_bytes(tomli_w.dumps(data).encode("utf-8"))


@dataclass(frozen=True)
class AreaCase:
    area: int
    case: str
    offset: int = 0


@dataclass(frozen=True)
class TieSpec:
    area_a: int
    bus_a: int
    area_b: int
    bus_b: int
    reactance_pu: float
    limit_mw: float = math.inf


@dataclass(frozen=True)
class StitchConfig:
    areas: tuple[AreaCase, ...]
    ties: tuple[TieSpec, ...]
    cost_model: str = "quadratic"
    weighted_area: int | None = None
    base_dir: Path | None = field(default=None, compare=False)
    line_limit_mw: float | None = None

    def __post_init__(self):
        if self.cost_model not in ("quadratic", "linear"):
            raise ConfigError(f"unknown cost_model {self.cost_model!r}")

    def case_path(self, case: str) -> Path:
        p = Path(case)
        if not p.suffix and not p.exists() and bundled_case(case).exists():
            return bundled_case(case)
        if not p.is_absolute() and self.base_dir is not None:
            return self.base_dir / p
        return p


def parse_stitch(path) -> StitchConfig:
    data = load_config(path)
    try:
        areas = tuple(AreaCase(int(a["id"]), str(a["case"]), int(a.get("offset", 0))) for a in data["area"])
        ties = tuple(
            TieSpec(int(t["from"][0]), int(t["from"][1]), int(t["to"][0]), int(t["to"][1]),
                    float(t["reactance_pu"]), float(t.get("limit_mw", math.inf)))
            for t in data.get("tie", []))
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed stitch config ({exc})") from exc
    wa, cap = data.get("weighted_area"), data.get("line_limit_mw")
    return StitchConfig(areas, ties, data.get("cost_model", "quadratic"),
                        None if wa is None else int(wa), Path(path).parent,
                        None if cap is None else float(cap))


def write_stitch(config: StitchConfig, path) -> None:
    data: dict[str, Any] = {"cost_model": config.cost_model}
    if config.weighted_area is not None:
        data["weighted_area"] = config.weighted_area
    if config.line_limit_mw is not None:
        data["line_limit_mw"] = config.line_limit_mw
    data["area"] = [{"id": a.area, "case": a.case, "offset": a.offset} for a in config.areas]
    data["tie"] = [{"from": [t.area_a, t.bus_a], "to": [t.area_b, t.bus_b],
                    "reactance_pu": t.reactance_pu, "limit_mw": t.limit_mw}
                   for t in config.ties]
    for t in data["tie"]:
        if math.isinf(t["limit_mw"]):
            del t["limit_mw"]
    dump_config(data, path)


def _linearise(cost: CostCurve, g_min: float, g_max: float) -> CostCurve:
    """Secant of the quadratic over [g_min, g_max], so the total cost at both ends is kept."""
    return CostCurve(cost.c0 - cost.c2 * g_min * g_max, cost.c1 + cost.c2 * (g_min + g_max), 0.0)


def stitch(config: StitchConfig, w: float = 1.0) -> tuple[PowerNetwork, AreaPartition]:
    """Join per-area cases with tie-lines into one partitioned interconnection.

    ``w`` scales the energy cost terms of ``config.weighted_area`` (the first
    area by default).
    """
    if not config.areas:
        raise ConfigError("stitch config lists no areas")
    ids = [a.area for a in config.areas]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate area id in stitch config")
    weighted = config.areas[0].area if config.weighted_area is None else config.weighted_area
    buses, branches, gens, bases = [], [], [], set()
    for ac in config.areas:
        net = parse_case(config.case_path(ac.case), area=ac.area, offset=ac.offset)
        bases.add(net.base_mva)
        buses.extend(net.buses)
        if config.line_limit_mw is None:
            branches.extend(net.branches)
        else:
            branches.extend(Branch(b.from_bus, b.to_bus, b.reactance_pu, min(b.limit_mw, config.line_limit_mw))
                            for b in net.branches)
        for g in net.generators:
            cost = g.cost
            if config.cost_model == "linear":
                cost = _linearise(cost, g.g_min_mw, g.g_max_mw)
            if ac.area == weighted and w != 1.0:
                cost = cost.scaled(w)
            gens.append(Generator(g.bus, g.g_min_mw, g.g_max_mw, cost))
    if len(bases) > 1:
        raise ConfigError(f"cases use different MVA bases: {sorted(bases)}")
    area_of = {}
    for b in buses:
        if b.id in area_of:
            raise ConfigError(f"bus id {b.id} appears in two areas; adjust the offsets")
        area_of[b.id] = b.area
    boundary = set()
    for t in config.ties:
        for area, bus in ((t.area_a, t.bus_a), (t.area_b, t.bus_b)):
            if area_of.get(bus) != area:
                raise ConfigError(f"tie-line endpoint bus {bus} does not exist in area {area}")
        if t.area_a == t.area_b:
            raise ConfigError(f"tie-line {t.bus_a}-{t.bus_b} joins two buses of area {t.area_a}")
        branches.append(Branch(t.bus_a, t.bus_b, t.reactance_pu, t.limit_mw, is_tie_line=True))
        boundary.update((t.bus_a, t.bus_b))
    buses = [Bus(b.id, b.area, b.load_mw, b.id in boundary) for b in buses]
    net = PowerNetwork(tuple(buses), tuple(branches), tuple(gens), bases.pop())
    return net, AreaPartition.from_network(net)


# -- bid books ----------------------------------------------------------------

def parse_bids(path, part: AreaPartition | None = None) -> BidBook:
    data = load_config(path)
    bids = []
    try:
        for row in data.get("bid", []):
            bids.append(InterfaceBid(int(row["id"]), tuple(row["sell_to"]), tuple(row["buy_from"]),
                                     float(row["dpi"]), float(row["s_max"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BidValidationError):
            raise
        raise ConfigError(f"{path}: malformed bid ({exc})") from exc
    book = BidBook(tuple(bids))
    if part is not None:
        validate_bids(book, part)
    return book


def write_bids(book: BidBook, path) -> None:
    rows = [{"id": b.id, "sell_to": list(b.sell_to), "buy_from": list(b.buy_from),
             "dpi": b.dpi, "s_max": b.s_max} for b in book]
    dump_config({"bid": rows}, path)


# -- scenarios ------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    n_samples: int = 100
    load_sigma_fraction: float = 0.05
    rng_seed: int = 0
    w: float = 1.0
    uniform_dpi: float | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.load_sigma_fraction < 0:
            raise ConfigError("load_sigma_fraction must be >= 0")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must fit in 64 bits")


def parse_scenario(path) -> ScenarioConfig:
    data = load_config(path)
    try:
        dpi = data.get("uniform_dpi")
        return ScenarioConfig(int(data.get("n_samples", 100)), float(data.get("load_sigma_fraction", 0.05)),
                              int(data.get("rng_seed", 0)), float(data.get("w", 1.0)),
                              None if dpi is None else float(dpi))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: malformed scenario ({exc})") from exc


def write_scenario(sc: ScenarioConfig, path) -> None:
    data = {"n_samples": sc.n_samples, "load_sigma_fraction": sc.load_sigma_fraction,
            "rng_seed": sc.rng_seed, "w": sc.w}
    if sc.uniform_dpi is not None:
        data["uniform_dpi"] = sc.uniform_dpi
    dump_config(data, path)


# -- reports --------------------------------------------------------------------

def _records(report) -> list[dict]:
    if hasattr(report, "records"):
        report = report.records()
    rows = list(report)
    return [dict(r) if isinstance(r, Mapping) else dict(vars(r)) for r in rows]


def _columns(rows: Iterable[Mapping]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        out = FLOAT_FMT % v
        return "0" if out == "-0" else out
    return str(v)


def _json_value(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return _fmt(v)
        return float(FLOAT_FMT % v) + 0.0
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def emit_report(report, fmt: str, path) -> None:
    """Write rows as CSV or JSON with a stable column order and 6 significant digits."""
    rows = _records(report)
    cols = _columns(rows)
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in rows:
                wr.writerow([_fmt(r.get(c)) for c in cols])
    elif fmt == "json":
        out = {"version": CONFIG_VERSION, "columns": cols,
               "rows": [{c: _json_value(r.get(c)) for c in cols} for r in rows]}
        path.write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
