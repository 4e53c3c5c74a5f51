"""Command-line front end: quantify, cegar, sample, oracle-check, convert."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import ExitStack
from fractions import Fraction

from .cegar import Strategy, cegar_quantify
from .geometry import Box, BoxSet
from .model import ModelFormatError, TreeEnsemble, check_kappa, dump_ensemble, load_ensemble
from .oracle import OracleCapExceeded, oracle_quantify
from .quantifier import Budget, QuantifyResult, quantify
from .sampler import emit_idi_pairs, write_jsonl
from .schema import SchemaError, format_rational, schema_from_json, to_rational
from .smt import DEFAULT_SOLVER, Property
from .xgboost_io import convert_xgboost_dump

EXIT_OK, EXIT_MISMATCH, EXIT_BOUNDS, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3, 4

log = logging.getLogger("boxqte")


class InputError(Exception):
    pass


def show(q: Fraction) -> str:
    return f"{format_rational(q)} ({float(q):.4f})"


def _read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _load_model(args) -> tuple[TreeEnsemble, dict]:
    try:
        with open(args.model) as fh:
            ens = load_ensemble(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read {args.model}: {exc.strerror}") from exc
    sidecar = {}
    if args.schema:
        sidecar = _read_json(args.schema)
        ens = ens.with_schema(schema_from_json(sidecar))
    if args.sensitive:
        ens = ens.with_sensitive([s.strip() for s in args.sensitive.split(",") if s.strip()])
    return ens, sidecar


def _core(args) -> tuple[TreeEnsemble, Property, tuple[Fraction, ...], Fraction]:
    prop = Property.parse(args.property)
    if prop is Property.ROBUSTNESS and args.sensitive:
        raise InputError("--sensitive conflicts with --property robust")
    ens, sidecar = _load_model(args)
    rate = args.eps_rate if args.eps_rate is not None else sidecar.get("eps_rate", "0")
    eps = ens.schema.epsilons(rate)
    kappa = check_kappa(args.kappa)
    if prop is Property.FAIRNESS and not ens.schema.sensitive:
        log.warning("no sensitive attribute declared; every input is trivially fair")
    return ens, prop, eps, kappa


def _result_document(ens, prop, eps, kappa, res: QuantifyResult) -> dict:
    return {
        "model": dump_ensemble(ens),
        "property": prop.value,
        "epsilon": [format_rational(e) for e in eps],
        "kappa": format_rational(kappa),
        "converged": res.converged,
        "vacuous": res.vacuous,
        "measure": None if res.measure is None else format_rational(res.measure),
        "LB": format_rational(res.lb),
        "UB": format_rational(res.ub),
        "T_s": format_rational(res.t_s),
        "T_kappa": format_rational(res.t_kappa),
        "T_kappa_bar": format_rational(res.t_kappa_bar),
        "T_X": format_rational(res.t_x),
        "wall_time": round(res.wall_time, 3),
        "stats": res.stats,
        "error": res.error,
        "region": [{"box": b.to_json(), "source": list(tag[0]), "partner": list(tag[1])} for b, tag in res.region.items()],
    }


def cmd_quantify(args) -> int:
    if args.no_decomp and args.blocking_threshold is not None:
        raise InputError("--no-decomp conflicts with --blocking-threshold")
    ens, prop, eps, kappa = _core(args)
    budget = Budget(
        timeout=args.timeout,
        workers=args.workers,
        blocking_threshold=None if args.no_decomp else (args.blocking_threshold or 100),
        priority=not args.no_prior,
        box_blocking=not args.no_box_block,
        solver=args.solver,
    )
    with ExitStack() as stack:
        sink = stack.enter_context(open(args.trace, "w")) if args.trace else None
        res = quantify(ens, prop, eps, kappa, budget, trace_sink=sink)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(_result_document(ens, prop, eps, kappa, res), fh, indent=1)
    if res.error:
        print(f"solver failure: {res.error}", file=sys.stderr)
        print(f"bounds [{show(res.lb)}, {show(res.ub)}] gap {float(res.gap):.2f}")
        return EXIT_SOLVER
    if res.converged:
        note = " (vacuous: no input exceeds kappa)" if res.vacuous else ""
        print(f"converged measure {show(res.measure)} gap 0.00{note}")
        return EXIT_OK
    print(f"not converged: bounds [{show(res.lb)}, {show(res.ub)}] gap {float(res.gap):.4f}")
    return EXIT_BOUNDS


def cmd_cegar(args) -> int:
    ens, prop, eps, kappa = _core(args)
    if kappa != Fraction(1, 2):
        raise InputError("cegar supports --kappa 0.5 only")
    with ExitStack() as stack:
        sink = stack.enter_context(open(args.trace, "w")) if args.trace else None
        res = cegar_quantify(
            ens, prop, eps, Strategy.parse(args.strategy), timeout=args.timeout,
            workers=max(1, args.workers - 1), seed=args.seed, solver=args.solver, trace_sink=sink,
        )
    if args.out:
        doc = {
            "property": prop.value,
            "strategy": res.strategy.value,
            "LB": format_rational(res.lb),
            "T_fair": format_rational(res.t_fair),
            "T_tie": format_rational(res.t_tie),
            "T_X": format_rational(res.t_x),
            "regions_processed": res.regions_processed,
            "converged": res.converged,
            "wall_time": round(res.wall_time, 3),
        }
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
    state = "converged" if res.converged else "stopped"
    print(f"{state}: lower bound {show(res.lb)} after {res.regions_processed} regions")
    return EXIT_OK if res.converged else EXIT_BOUNDS


def _region_from(doc: dict) -> tuple[TreeEnsemble, BoxSet, tuple, Fraction, Property]:
    try:
        ens = load_ensemble(doc["model"])
        eps = tuple(to_rational(e) for e in doc["epsilon"])
        kappa = to_rational(doc["kappa"])
        prop = Property.parse(doc["property"])
        region = BoxSet()
        for item in doc.get("region", []):
            region.add(Box.from_json(item["box"], ens.schema), (tuple(item["source"]), tuple(item["partner"])))
    except KeyError as exc:
        raise InputError(f"region file lacks field {exc.args[0]!r}") from exc
    return ens, region, eps, kappa, prop


def cmd_sample(args) -> int:
    if args.count < 0:
        raise InputError("--count must be >= 0")
    ens, region, eps, kappa, prop = _region_from(_read_json(args.region))
    pairs = emit_idi_pairs(ens, region, args.count, args.seed, eps, kappa, prop)
    with open(args.out, "w") as fh:
        write_jsonl(pairs, fh)
    print(f"wrote {len(pairs)} IDI pairs to {args.out}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    doc = _read_json(args.result)
    ens, _, eps, kappa, prop = _region_from(doc)
    try:
        rep = oracle_quantify(ens, prop, eps, kappa, cap=args.cap)
    except OracleCapExceeded as exc:
        raise InputError(str(exc)) from exc
    lb, ub = to_rational(doc["LB"]), to_rational(doc["UB"])
    if doc.get("converged"):
        ok = to_rational(doc["measure"]) == rep.measure
        print(f"oracle {show(rep.measure)} vs quantify {show(to_rational(doc['measure']))}: {'match' if ok else 'MISMATCH'}")
    else:
        ok = lb <= rep.measure <= ub
        print(f"oracle {show(rep.measure)} within [{show(lb)}, {show(ub)}]: {'yes' if ok else 'NO'}")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_convert(args) -> int:
    sidecar = _read_json(args.schema)
    schema = schema_from_json(sidecar)
    dump = _read_json(args.dump)
    ens = convert_xgboost_dump(dump, schema, sidecar.get("feature_map"), args.base_score)
    with open(args.out, "w") as fh:
        json.dump(dump_ensemble(ens), fh, indent=1)
    print(f"wrote {ens.m} trees to {args.out}")
    return EXIT_OK


def _core_flags(p: argparse.ArgumentParser, default_timeout: float) -> None:
    p.add_argument("--model", required=True, help="native ensemble JSON")
    p.add_argument("--schema", help="sidecar schema overriding sensitivity and tolerances")
    p.add_argument("--property", choices=["fair", "robust"], default="fair")
    p.add_argument("--sensitive", help="comma-separated sensitive attribute names")
    p.add_argument("--eps-rate", help="tolerance as a fraction of each domain width")
    p.add_argument("--kappa", default="0.5")
    p.add_argument("--timeout", type=float, default=default_timeout)
    p.add_argument("--workers", type=int, default=17)
    p.add_argument("--solver", default=DEFAULT_SOLVER)
    p.add_argument("--trace", help="JSON-lines bound trace")
    p.add_argument("--out", help="result JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxqte", description="Quantify fairness and robustness of tree ensembles.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantify", help="exact measure with any-time bounds")
    _core_flags(q, 600)
    q.add_argument("--blocking-threshold", type=int)
    q.add_argument("--no-prior", action="store_true", help="dispatch unfair tasks in FIFO order")
    q.add_argument("--no-decomp", action="store_true", help="never split tasks")
    q.add_argument("--no-box-block", action="store_true")
    q.set_defaults(func=cmd_quantify)

    c = sub.add_parser("cegar", help="region-refinement lower bound")
    _core_flags(c, 600)
    c.add_argument("--strategy", choices=["random", "node", "node-random"], default="node-random")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cegar)

    s = sub.add_parser("sample", help="sample counterexample pairs from a quantify result")
    s.add_argument("--region", required=True, help="result JSON written by quantify --out")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    o = sub.add_parser("oracle-check", help="compare a quantify result with brute force")
    o.add_argument("--result", required=True)
    o.add_argument("--cap", type=int, default=10**5)
    o.set_defaults(func=cmd_oracle_check)

    v = sub.add_parser("convert", help="XGBoost JSON model to the native format")
    v.add_argument("--dump", required=True)
    v.add_argument("--schema", required=True)
    v.add_argument("--base-score", help="margin offset for get_dump input")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_convert)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, SchemaError, ModelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        sys.exit(EXIT_BOUNDS)
