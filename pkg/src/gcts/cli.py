"""Command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 infeasible case.
Every command that writes output also writes ``manifest.json`` listing
the inputs (with SHA-256 hashes), seed, mechanisms and produced files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bids import BidBook, BidValidationError, bid_rank_check, cleared_status, stacked_incidence
from .caseio import (
    CaseParseError,
    ConfigError,
    ScenarioConfig,
    bundled_config,
    emit_report,
    parse_bids,
    parse_scenario,
    parse_stitch,
    stitch,
)
from .experiments import (
    MECHANISMS,
    compare_mechanisms,
    look_ahead,
    run_dpi_sweep,
    run_w_sweep,
    w_sweep_records,
)
from .market.program import InfeasibleError
from .netmodel import NetworkStructureError, SingularMatrixError, build_susceptance
from .settlement import revenue_adequacy_audit, settle

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2
DEFAULT_DPI_GRID = (10.0, 1.0, 0.5, 0.1, 0.01, 0.0)
DEFAULT_W_GRID = (0.1, 0.15, 0.2, 1.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the config-error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _resolve(path: str | None) -> Path | None:
    """A path as given, or a bundled config of that name."""
    if path is None:
        return None
    p = Path(path)
    if p.exists():
        return p
    b = bundled_config(p.name if p.suffix else p.name + ".toml")
    if b.exists():
        return b
    raise ConfigError(f"no such config file: {path}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _proxies(text: str | None) -> dict[int, int] | None:
    """``"1:5,2:15"`` -> {1: 5, 2: 15}."""
    if not text:
        return None
    out = {}
    try:
        for item in text.split(","):
            a, b = item.split(":")
            out[int(a)] = int(b)
    except ValueError as exc:
        raise UsageError(f"--proxy expects area:bus pairs, got {text!r}") from exc
    return out


def _mechanisms(text: str | None) -> list[str]:
    if not text:
        return list(MECHANISMS)
    names = [m.strip().upper() for m in text.split(",") if m.strip()]
    for m in names:
        if m not in MECHANISMS:
            raise UsageError(f"unknown mechanism {m.lower()!r} (choose from jed, cts, gcts)")
    return names


def _write_manifest(out: Path, inputs: dict[str, Path | None], outputs: Sequence[Path], **extra) -> Path:
    manifest = {
        "tool": "gcts",
        "version": __version__,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items() if p is not None},
        "output_dir": str(out),
        "outputs": {p.name: _sha256(p) for p in outputs},
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _scenario(args) -> tuple[ScenarioConfig, Path | None]:
    path = _resolve(args.scenario)
    sc = parse_scenario(path) if path else ScenarioConfig()
    fields = dict(n_samples=sc.n_samples, load_sigma_fraction=sc.load_sigma_fraction, rng_seed=sc.rng_seed,
                  w=sc.w, uniform_dpi=sc.uniform_dpi)
    for key, val in (("rng_seed", args.seed), ("n_samples", args.samples), ("load_sigma_fraction", args.sigma),
                     ("w", args.w), ("uniform_dpi", args.dpi)):
        if val is not None:
            fields[key] = val
    return ScenarioConfig(**fields), path


# -- commands ---------------------------------------------------------------

def cmd_solve(args) -> int:
    mech = args.mechanism.upper()
    if mech not in MECHANISMS:
        raise UsageError(f"unknown mechanism {args.mechanism!r} (choose from jed, cts, gcts)")
    stitch_path, bids_path = _resolve(args.stitch), _resolve(args.bids)
    net, part = stitch(parse_stitch(stitch_path), 1.0 if args.w is None else args.w)
    if mech != "JED" and bids_path is None:
        raise UsageError(f"--bids is required for {mech}")
    book = parse_bids(bids_path, part) if bids_path else BidBook()
    if args.dpi is not None:
        book = book.with_uniform(args.dpi)
    blocks = build_susceptance(net, part)
    sol = look_ahead(net, part, book, mech, blocks=blocks, proxy=_proxies(args.proxy))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = args.format
    files = []

    buses = [{"bus": int(b), "area": net.bus_area[int(b)], "load_mw": d, "lmp": lam}
             for b, d, lam in zip(sol.bus_ids, sol.loads, sol.lmp)]
    gens = [{"gen": k + 1, "bus": net.generators[k].bus, "g_mw": x} for k, x in zip(sol.gen_index, sol.g)]
    branches = [{"from": net.branches[k].from_bus, "to": net.branches[k].to_bus,
                 "tie_line": net.branches[k].is_tie_line, "flow_mw": f, "limit_mw": lim, "eta": e}
                for k, f, lim, e in zip(sol.branch_index, sol.flow_mw, sol.limit_mw, sol.eta)]
    summary = [{"mechanism": mech, "generation_cost": sol.internal_cost, "interface_cost": sol.interface_cost,
                "total_cost": sol.total_cost}]
    tables = {"buses": buses, "generators": gens, "branches": branches, "summary": summary}
    if sol.s is not None:
        # CTS clears bids against an interface proxy and has no boundary price
        gaps = sol.price_gap if sol.price_gap is not None else [float("nan")] * len(book)
        tables["bids"] = [{"bid": b.id, "cleared_mw": x, "s_max": b.s_max, "dpi": b.dpi, "price_gap": gap,
                           "status": st}
                          for b, x, gap, st in zip(book, sol.s, gaps, cleared_status(sol.s, book.s_max))]
    if mech == "GCTS":
        report = settle(sol, blocks)
        audit = revenue_adequacy_audit(report, raise_on_failure=False)
        tables["settlement"] = report.records()
        tables["revenue_audit"] = [{"area": a, **v} for a, v in audit.items()]
    for name, rows in tables.items():
        path = out / f"{name}.{fmt}"
        emit_report(rows, fmt, path)
        files.append(path)
    _write_manifest(out, {"stitch": stitch_path, "bids": bids_path}, files, command="solve", mechanisms=[mech],
                    seed=None, w=args.w, dpi=args.dpi)
    print(f"{mech}: total cost {sol.total_cost:.6g} $/h; wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    stitch_path, bids_path = _resolve(args.stitch), _resolve(args.bids)
    if bids_path is None:
        raise UsageError("--bids is required for compare")
    scenario, scenario_path = _scenario(args)
    mechs = _mechanisms(args.mechanism)
    net, part = stitch(parse_stitch(stitch_path), scenario.w)
    book = parse_bids(bids_path, part)
    if scenario.uniform_dpi is not None:
        book = book.with_uniform(scenario.uniform_dpi)
    res = compare_mechanisms(net, part, book, scenario, mechs, proxy=_proxies(args.proxy), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"comparison.{args.format}"
    emit_report(res.records(), args.format, path)
    _write_manifest(out, {"stitch": stitch_path, "bids": bids_path, "scenario": scenario_path}, [path],
                    command="compare", mechanisms=mechs, seed=scenario.rng_seed, n_samples=scenario.n_samples,
                    load_sigma_fraction=scenario.load_sigma_fraction, w=scenario.w, dpi=scenario.uniform_dpi)
    for r in res.rows:
        print(f"{r.mechanism}: average real-time cost {r.avg_realtime_total_cost:.6g} $/h, "
              f"{r.overflow_scenarios}/{r.n_samples} scenarios with overflow")
    return EXIT_OK


def cmd_sweep(args) -> int:
    stitch_path, bids_path = _resolve(args.stitch), _resolve(args.bids)
    if bids_path is None:
        raise UsageError("--bids is required for sweep")
    config = parse_stitch(stitch_path)
    _, part = stitch(config)
    book = parse_bids(bids_path, part)
    dpis = _floats(args.dpi_grid) or list(DEFAULT_DPI_GRID)
    ws = _floats(args.w_grid) or list(DEFAULT_W_GRID)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / f"dpi_sweep.{args.format}", out / f"w_sweep.{args.format}"]
    emit_report([p.record() for p in run_dpi_sweep(config, book, dpis, ws)], args.format, files[0])
    emit_report(w_sweep_records(run_w_sweep(config, book, ws), book, part), args.format, files[1])
    _write_manifest(out, {"stitch": stitch_path, "bids": bids_path}, files, command="sweep", mechanisms=["GCTS"],
                    seed=None, dpi_grid=dpis, w_grid=ws)
    print(f"wrote {files[0]} and {files[1]}")
    return EXIT_OK


def cmd_validate(args) -> int:
    stitch_path = _resolve(args.stitch)
    net, part = stitch(parse_stitch(stitch_path))
    net.check_connected()
    print(f"{stitch_path}: {net.n_bus} buses, {len(net.branches)} branches, {len(net.generators)} generators, "
          f"{len(part.areas)} areas, {len(part.tie_lines)} tie-lines")
    if args.bids:
        book = parse_bids(_resolve(args.bids), part)
        blocks = build_susceptance(net, part)
        full = bid_rank_check(stacked_incidence(book, part), blocks.boundary_reference_index())
        print(f"{args.bids}: {len(book)} bids, incidence {'spans' if full else 'does NOT span'} the boundary state")
    if args.scenario:
        sc = parse_scenario(_resolve(args.scenario))
        print(f"{args.scenario}: {sc.n_samples} samples, sigma {sc.load_sigma_fraction}, seed {sc.rng_seed}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcts", description="Multi-area interchange scheduling: JED, CTS and GCTS clearing.")
    p.add_argument("--version", action="version", version=f"gcts {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver diagnostics")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, bids=True):
        sp.add_argument("--stitch", required=True, help="stitch config (path or bundled name, e.g. two_area.toml)")
        if bids:
            sp.add_argument("--bids", help="interface bid book (path or bundled name)")

    def output(sp):
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv", help="report format (default: csv)")

    s = sub.add_parser("solve", help="clear one mechanism and write solution and settlement files")
    common(s)
    s.add_argument("--mechanism", required=True, help="jed, cts or gcts")
    s.add_argument("--w", type=float, help="cost weight applied to the weighted area (default 1)")
    s.add_argument("--dpi", type=float, help="override every bid price ($/MWh)")
    s.add_argument("--proxy", help="CTS proxy buses as area:bus pairs, e.g. 1:5,2:15")
    output(s)
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("compare", help="Monte-Carlo comparison of mechanisms")
    common(c)
    c.add_argument("--scenario", help="scenario config (samples, sigma, seed, w, uniform dpi)")
    c.add_argument("--mechanism", help="comma-separated subset of jed,cts,gcts (default: all)")
    c.add_argument("--seed", type=int, help="override the scenario RNG seed")
    c.add_argument("--samples", type=int, help="override the number of load samples")
    c.add_argument("--sigma", type=float, help="override the load standard deviation (fraction of forecast)")
    c.add_argument("--w", type=float, help="override the cost weight")
    c.add_argument("--dpi", type=float, help="override every bid price ($/MWh)")
    c.add_argument("--proxy", help="CTS proxy buses as area:bus pairs")
    c.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")
    output(c)
    c.set_defaults(func=cmd_compare)

    w = sub.add_parser("sweep", help="bid-price and cost-weight sweeps of GCTS against JED")
    common(w)
    w.add_argument("--dpi-grid", help=f"comma-separated bid prices (default {','.join(map(str, DEFAULT_DPI_GRID))})")
    w.add_argument("--w-grid", help=f"comma-separated cost weights (default {','.join(map(str, DEFAULT_W_GRID))})")
    output(w)
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="check configs without solving")
    common(v)
    v.add_argument("--scenario", help="scenario config to check")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        for k, v in sorted((exc.report or {}).items()):
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, ConfigError, CaseParseError, BidValidationError, NetworkStructureError,
            SingularMatrixError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
