"""Command-line driver.

Ties the stages into a pipeline over a ``.pct`` source file:
parse and type check, then optionally decompose into combinators,
expand pullback markers, or extract the gradient, then simplify,
recover matrix notation, and print in the requested format. Check
mode validates the extracted gradient against finite differences.

Exit codes: 0 on success, 1 on a failed numeric check, 2 on usage,
parse, or type errors.
"""
from __future__ import annotations

import argparse
import sys

from .blaserize import blaserize
from .combinator import decompose
from .frontend import FrontendError, parse_program
from .ir import (
    Expr, IRError, Lambda, Let, PullbackOf, TypeExpr, Var, inline_lets,
)
from .numeric import OracleError, check_gradient
from .pullback import PullbackError, expand_pullbacks, vdiff
from .render import to_latex, to_sexpr, to_text
from .simplify import RuleSet, plain_settings, redux, symmetry_settings


def split_objective(body: Expr) -> tuple[Lambda, dict[str, TypeExpr]]:
    """Inner differentiation target and the types of enclosing parameters.

    Walks lambda wrappers (inlining lets) down to the first pullback
    marker; without a marker, the innermost lambda whose body is scalar
    is taken as the objective.
    """
    types: dict[str, TypeExpr] = {}
    e = body
    while True:
        if isinstance(e, Let):
            e = inline_lets(e)
        elif isinstance(e, PullbackOf):
            if not isinstance(e.inner, Lambda):
                raise PullbackError("pullback marker does not wrap a lambda")
            return e.inner, types
        elif isinstance(e, Lambda):
            if not isinstance(e.body, (Lambda, Let, PullbackOf)):
                return e, types
            for p in e.params:
                types[p.name] = p.type
            e = e.body
        else:
            raise PullbackError("no differentiation target in this program")


def gradient_inner(expr: Expr, objective: Lambda) -> Lambda:
    """The lambda inside ``expr`` with the objective's parameters."""
    want = [p.name for p in objective.params]
    e = expr
    while isinstance(e, (Lambda, Let)):
        if isinstance(e, Let):
            e = inline_lets(e)
            continue
        if [p.name for p in e.params] == want:
            return e
        e = e.body
    raise PullbackError("gradient lambda not found in the transformed term")


def _parse_extents(pairs: list[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for pair in pairs:
        for item in pair.split(","):
            if not item:
                continue
            name, _, num = item.partition("=")
            if not num:
                raise ValueError(f"bad extent {item!r}, expected NAME=K")
            out[name.strip()] = int(num)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="combdiff",
        description="Differentiate and simplify tensor-functional programs.")
    ap.add_argument("input", help="path to a .pct source file")
    ap.add_argument("--decompose", action="store_true",
                    help="rewrite lambdas into B/C combinator chains")
    ap.add_argument("--pullback", action="store_true",
                    help="expand pullback markers into derived pullbacks")
    ap.add_argument("--vdiff", action="store_true",
                    help="extract gradients (pullback at cotangent 1)")
    ap.add_argument("--settings", choices=("plain", "symmetry"),
                    help="run the simplifier with the given rule settings")
    ap.add_argument("--max-passes", type=int, default=None,
                    help="simplifier pass budget (implies --settings plain)")
    ap.add_argument("--blaserize", action="store_true",
                    help="recover matrix/vector notation")
    ap.add_argument("--emit",
                    choices=("text", "latex", "sexpr", "combinators",
                             "pullback"),
                    default="text", help="output format (default: text)")
    ap.add_argument("--check", action="store_true",
                    help="validate the gradient against finite differences")
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--tol", type=float, default=1e-6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--extent", action="append", default=[],
                    metavar="NAME=K", help="domain extent (repeatable)")
    ap.add_argument("--out", default=None,
                    help="write output here instead of stdout")
    return ap


def run(args: argparse.Namespace) -> int:
    try:
        with open(args.input, encoding="utf-8") as fh:
            src = fh.read()
    except OSError as exc:
        print(f"combdiff: {exc}", file=sys.stderr)
        return 2

    try:
        prog = parse_program(src, args.input)
    except FrontendError as exc:
        print(str(exc), file=sys.stderr)
        return 2

    try:
        expr: Expr = prog.body
        if args.decompose:
            expr = decompose(expr)
        if args.pullback:
            expr = expand_pullbacks(expr)
        if args.vdiff:
            expr = vdiff(expr)
        settings = None
        if args.settings == "symmetry":
            settings = symmetry_settings
        elif args.settings == "plain" or args.max_passes is not None:
            settings = plain_settings
        if settings is not None and args.max_passes is not None:
            settings = RuleSet(settings.rules, settings.use_symmetries,
                               args.max_passes)
        if settings is not None:
            expr = redux(expr, settings)
        if args.blaserize:
            expr = blaserize(expr)

        if args.emit == "combinators":
            text = to_text(decompose(expr))
        elif args.emit == "pullback":
            text = to_text(expand_pullbacks(expr))
        elif args.emit == "latex":
            text = to_latex(expr)
        elif args.emit == "sexpr":
            text = to_sexpr(expr)
        else:
            text = to_text(expr)
    except (IRError, PullbackError) as exc:
        print(f"combdiff: {exc}", file=sys.stderr)
        return 2

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)

    if not args.check:
        return 0

    try:
        extents = _parse_extents(args.extent)
    except ValueError as exc:
        print(f"combdiff: {exc}", file=sys.stderr)
        return 2

    try:
        objective, var_types = split_objective(prog.body)
        grad_expr = expr if args.vdiff else vdiff(prog.body)
        grad = gradient_inner(grad_expr, objective)
        report = check_gradient(objective, grad, var_types, extents,
                                trials=args.trials, tol=args.tol,
                                seed=args.seed)
    except (OracleError, PullbackError, IRError) as exc:
        print(f"combdiff: check failed to run: {exc}", file=sys.stderr)
        return 2

    print(f"{'trial':>5}  {'rel error':>12}")
    for n, err in enumerate(report.trial_errors):
        print(f"{n:>5}  {err:>12.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"check: {verdict} ({report.message})")
    return 0 if report.passed else 1


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
