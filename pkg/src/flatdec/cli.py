"""Command line front end: analyze, decompose, and verify system files.

Each command reads a .fds file, prints a short plain-text summary, and can
write a JSON report (--report).  Reports are deterministic for a fixed seed:
keys sorted, two-space indent, wall-clock timings only on request.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
import time

from .decompose import AnsatzConfig, _field_dict, _form_dict, run_decomposition
from .exterior import Chart, ChartTransform, T, oneform
from .linalg import ZeroCtx
from .pfaffian import (
    derived_flag, from_control_system, is_integrable_with_dt,
    vertical_annihilator,
)
from .symexpr import AUX, Symbol
from .sysdsl import ParseError, SemanticError, parse_expr, parse_system, render
from .triangular import (
    Block, FlatnessCertificate, OutputCountMismatch, StructureViolation,
    TriangularDecomposition, extract_flat_output, from_sequence, validate,
    verify_flatness_numeric,
)

SHORTCUT_NOTE = "static-feedback-linearizable shortcut applicable"


def _read_system(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return text, parse_system(text)


def _config(args) -> AnsatzConfig:
    return AnsatzConfig(max_degree=args.max_degree, zero_budget=args.samples,
                        seed=args.seed, branch_width=args.branch_width,
                        max_depth=args.max_depth)


def _base_report(command: str, path: str, text: str, cs, args) -> dict:
    return {
        "schema": "flatdec/1",
        "command": command,
        "input": {
            "path": path,
            "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
            "system": cs.name,
            "states": [s.name for s in cs.states],
            "inputs": [s.name for s in cs.inputs],
            "dynamics": {s.name: render(f)
                         for s, f in zip(cs.states, cs.dynamics)},
        },
        "config": {
            "seed": args.seed,
            "max_degree": args.max_degree,
            "max_depth": args.max_depth,
            "branch_width": args.branch_width,
            "samples": args.samples,
            "verify": bool(getattr(args, "verify", False)),
        },
        "timings": {"recorded": False},
    }


def _emit(report: dict, args, timer: dict) -> None:
    if args.timings:
        report["timings"] = {"recorded": True,
                             "seconds": {k: round(v, 6)
                                         for k, v in timer.items()}}
    if args.report:
        body = json.dumps(report, sort_keys=True, indent=2,
                          ensure_ascii=False) + "\n"
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(body)
        print(f"report written to {args.report}")


# -- analyze -------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    text, cs = _read_system(args.file)
    zc = ZeroCtx(budget=args.samples, seed=args.seed)
    S0 = from_control_system(cs)
    flag = derived_flag(S0, zc)
    levels = []
    for k, P in enumerate(flag):
        V = vertical_annihilator(P, zc)
        levels.append({
            "level": k,
            "dimension": P.dim,
            "generators": [_form_dict(g) for g in P.generators],
            "vertical_annihilator": [_field_dict(v) for v in V.generators],
            "integrable_with_dt": is_integrable_with_dt(P, zc),
        })
    shortcut = flag[-1].dim == 0 and all(l["integrable_with_dt"]
                                         for l in levels)
    report = _base_report("analyze", args.file, text, cs, args)
    report["analysis"] = {
        "pfaffian_dimension": S0.dim,
        "chart": [s.name for s in S0.chart.coords],
        "derived_flag": levels,
        "shortcut": SHORTCUT_NOTE if shortcut else None,
    }

    dims = " > ".join(str(l["dimension"]) for l in levels)
    print(f"{cs.name}: {len(cs.states)} states, {len(cs.inputs)} inputs, "
          f"Pfaffian dimension {S0.dim}")
    print(f"derived flag dimensions: {dims}")
    v0 = ", ".join(json.dumps(d, sort_keys=True)
                   for d in levels[0]["vertical_annihilator"])
    print(f"vertical annihilator of S0: {v0}")
    if shortcut:
        print(SHORTCUT_NOTE)
    _emit(report, args, {"analyze": time.perf_counter() - t0})
    return 0


# -- decompose -----------------------------------------------------------------------


def _certificate_json(cert: FlatnessCertificate) -> dict:
    td = cert.decomposition
    phi = cert.transform
    return {
        "chart": [c.name for c in td.chart.coords],
        "blocks": [{"index": b.index,
                    "outputs": [c.name for c in b.y],
                    "solved": [p.name for p in b.nondrv]}
                   for b in td.blocks],
        "equations": [[_form_dict(g) for g in xi] for xi in td.equations],
        "transform": {
            "forward": {s.name: render(phi.forward[s])
                        for s in phi.target.coords},
            "inverse": {s.name: render(phi.inverse[s])
                        for s in phi.source.coords},
        },
        "outputs": [render(y) for y in cert.outputs],
        "order": cert.order,
    }


def _certificate_load(obj: dict, cs) -> FlatnessCertificate:
    coords = tuple(Symbol(n, AUX) for n in obj["chart"])
    final = Chart(coords)
    byname = {s.name: s for s in coords}
    base_coords = tuple(cs.states) + tuple(cs.inputs)
    base = Chart(base_coords)

    def final_expr(text):
        return parse_expr(text, coords)

    def base_expr(text):
        return parse_expr(text, base_coords)

    blocks = tuple(Block(b["index"],
                         tuple(byname[n] for n in b["outputs"]),
                         tuple(byname[n] for n in b["solved"]))
                   for b in obj["blocks"])
    equations = []
    for xi in obj["equations"]:
        gens = []
        for d in xi:
            coeffs = {(T if k == "t" else byname[k]): final_expr(v)
                      for k, v in d.items()}
            gens.append(oneform(final, coeffs))
        equations.append(tuple(gens))
    phi = ChartTransform(
        final, base,
        {s: final_expr(obj["transform"]["forward"][s.name])
         for s in base_coords},
        {s: base_expr(obj["transform"]["inverse"][s.name]) for s in coords})
    td = TriangularDecomposition(chart=final, blocks=blocks,
                                 equations=tuple(equations), transform=phi,
                                 system=cs)
    return FlatnessCertificate(system=cs, decomposition=td,
                               outputs=tuple(base_expr(y)
                                             for y in obj["outputs"]),
                               order=obj["order"], transform=phi)


def cmd_decompose(args) -> int:
    t0 = time.perf_counter()
    text, cs = _read_system(args.file)
    cfg = _config(args)
    res = run_decomposition(cs, cfg)
    report = _base_report("decompose", args.file, text, cs, args)
    report["decomposition"] = {
        "status": res.status,
        "levels": len(res.sequence),
        "branch_log": [dict(e) for e in res.branch_log],
    }
    timer = {"decompose": time.perf_counter() - t0}

    if res.status != "Triangularized":
        print(f"{cs.name}: {res.status} "
              f"({len(res.branch_log)} branch log entries)")
        _emit(report, args, timer)
        return 3

    zc = ZeroCtx(budget=args.samples, seed=args.seed)
    td = from_sequence(res.sequence, zc, system=cs)
    cert = extract_flat_output(td)
    report["certificate"] = _certificate_json(cert)
    report["decomposition"]["blocks"] = report["certificate"]["blocks"]
    report["decomposition"]["flat_outputs"] = list(
        report["certificate"]["outputs"])
    report["decomposition"]["order"] = cert.order

    print(f"{cs.name}: Triangularized in {len(res.sequence)} levels, "
          f"{td.m} coordinate blocks")
    print(f"flat outputs ({cert.order}): "
          + ", ".join(report["certificate"]["outputs"]))

    if args.verify:
        t1 = time.perf_counter()
        items = validate(td, zc)
        verdict = verify_flatness_numeric(cert, trials=args.samples,
                                          seed=args.seed)
        report["verification"] = _verification_json(items, verdict)
        timer["verify"] = time.perf_counter() - t1
        print(_verification_text(items, verdict))

    _emit(report, args, timer)
    return 0


# -- verify --------------------------------------------------------------------------


def _verification_json(items, verdict) -> dict:
    ok = all(flag for _, flag in items) and verdict.ok
    return {
        "structure": [{"check": label, "ok": flag} for label, flag in items],
        "numeric": {
            "trials": verdict.trials,
            "passed": verdict.passed,
            "failed": verdict.failed,
            "singular": verdict.singular,
            "worst_deviation": verdict.worst_deviation,
            "ok": verdict.ok,
        },
        "ok": ok,
    }


def _verification_text(items, verdict) -> str:
    good = sum(1 for _, flag in items if flag)
    ok = good == len(items) and verdict.ok
    return (f"structure checks: {good}/{len(items)} pass\n"
            f"numeric: {verdict.trials} trials, {verdict.passed} passed, "
            f"{verdict.failed} failed, {verdict.singular} singular\n"
            f"verdict: {'PASS' if ok else 'FAIL'}")


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    text, cs = _read_system(args.file)
    report = _base_report("verify", args.file, text, cs, args)
    zc = ZeroCtx(budget=args.samples, seed=args.seed)

    if args.certificate:
        try:
            with open(args.certificate, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as ex:
            print(f"missing certificate: {ex}", file=sys.stderr)
            return 1
        if "certificate" in obj:
            obj = obj["certificate"]
        cert = _certificate_load(obj, cs)
    elif args.outputs:
        cfg = _config(args)
        res = run_decomposition(cs, cfg)
        if res.status != "Triangularized":
            print(f"{cs.name}: {res.status}, nothing to verify against",
                  file=sys.stderr)
            return 3
        td = from_sequence(res.sequence, zc, system=cs)
        cert = extract_flat_output(td)
        claimed = tuple(parse_expr(part.strip(),
                                   tuple(cs.states) + tuple(cs.inputs))
                        for part in args.outputs.split(";") if part.strip())
        cert = dataclasses.replace(cert, outputs=claimed)
    else:
        print("missing certificate: pass --certificate <report.json> "
              "or --outputs <expr;expr>", file=sys.stderr)
        return 1

    items = validate(cert.decomposition, zc)
    try:
        verdict = verify_flatness_numeric(cert, trials=args.samples,
                                          seed=args.seed)
    except OutputCountMismatch as ex:
        report["verification"] = {
            "structure": [{"check": label, "ok": flag}
                          for label, flag in items],
            "numeric": {"error": str(ex)},
            "ok": False,
        }
        print(f"output count mismatch: {ex}", file=sys.stderr)
        _emit(report, args, {"verify": time.perf_counter() - t0})
        return 4

    report["verification"] = _verification_json(items, verdict)
    print(_verification_text(items, verdict))
    _emit(report, args, {"verify": time.perf_counter() - t0})
    return 0 if report["verification"]["ok"] else 4


# -- entry point ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("file", help="system description (.fds)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for all randomized decisions (default 0)")
    p.add_argument("--max-degree", type=int, default=2,
                   help="monomial degree cap for combination coefficients")
    p.add_argument("--max-depth", type=int, default=8,
                   help="reduction depth budget")
    p.add_argument("--branch-width", type=int, default=8,
                   help="splittings kept per level")
    p.add_argument("--samples", type=int, default=20,
                   help="zero-test budget and verification trial count")
    p.add_argument("--report", metavar="PATH",
                   help="write the JSON report to PATH")
    p.add_argument("--timings", action="store_true",
                   help="embed wall-clock timings in the report")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flatdec",
        description="flatness analysis of nonlinear control systems")
    sub = ap.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="Pfaffian form and derived flag")
    _add_common(pa)

    pd = sub.add_parser("decompose",
                        help="search for an implicit triangular form")
    _add_common(pd)
    pd.add_argument("--verify", action="store_true",
                    help="also run structural and numeric verification")

    pv = sub.add_parser("verify", help="check a flatness certificate")
    _add_common(pv)
    pv.add_argument("--certificate", metavar="PATH",
                    help="JSON report or certificate from decompose")
    pv.add_argument("--outputs", metavar="EXPRS",
                    help="semicolon-separated claimed flat outputs")

    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"analyze": cmd_analyze, "decompose": cmd_decompose,
               "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except (ParseError, SemanticError) as ex:
        label = "SyntaxError" if isinstance(ex, SyntaxError) \
            else type(ex).__name__
        print(f"{label}: {ex}", file=sys.stderr)
        return 1
    except OSError as ex:
        print(str(ex), file=sys.stderr)
        return 1
    except (StructureViolation, OutputCountMismatch) as ex:
        print(f"{type(ex).__name__}: {ex}", file=sys.stderr)
        return 2
    except Exception as ex:  # pragma: no cover - defensive
        print(f"internal error: {type(ex).__name__}: {ex}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
