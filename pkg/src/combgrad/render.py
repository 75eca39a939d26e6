"""Text and LaTeX rendering of terms.

``to_text`` emits source syntax that re-parses to an alpha-equivalent
term: lambda parameters and sum binders carry explicit annotations,
combinators and capture primitives print as ``@`` builtins, and nested
contractions merge into one ``sum((i::N, j::N), ...)`` form. ``to_latex``
targets display math and has no round-trip obligation.
"""
from __future__ import annotations

from .ir import (
    Add, Apply, Comb, Conj, Const, Delta, Domain, DualSpace, Expr, FuncType,
    IndexArith, IRError, Lambda, Let, Mul, Primitive, ProductType, PullbackOf,
    ScalarType, Space, Sum, Transpose, TupleExpr, TypeExpr, Var, free_vars,
)

# precedence levels: addition < product < prefix-minus < postfix < atoms
_ADD, _MUL, _NEG, _POST, _ATOM = 1, 2, 3, 4, 5


def type_text(t: TypeExpr | None) -> str:
    if t is None:
        raise IRError("cannot render an unknown type annotation")
    if isinstance(t, ScalarType):
        return "R" if t.kind == "real" else "C"
    if isinstance(t, Domain):
        return t.name
    if isinstance(t, Space):
        if t.name:
            return t.name
        args = ", ".join(d.name for d in t.domains)
        return f"({args}) -> {type_text(t.element)}"
    if isinstance(t, FuncType):
        args = ", ".join(type_text(a) for a in t.args)
        return f"({args}) -> {type_text(t.ret)}"
    if isinstance(t, DualSpace):
        return type_text(t.inner)
    if isinstance(t, ProductType):
        raise IRError("tuple types have no annotation syntax")
    raise IRError(f"cannot render type {t!r}")


def _const_text(v) -> tuple[str, int]:
    if isinstance(v, int):
        return (str(v), _ATOM if v >= 0 else _NEG)
    if isinstance(v, float):
        return (repr(v), _ATOM if v >= 0 else _NEG)
    if isinstance(v, complex):
        if v == 1j:
            return ("im", _ATOM)
        if v.real == 0:
            return (f"{v.imag!r} * im", _MUL)
        return (f"{v.real!r} + {v.imag!r} * im", _ADD)
    raise IRError(f"cannot render constant {v!r}")


def to_text(e: Expr) -> str:
    return _text(e, 0)


def _paren(s: str, level: int, context: int) -> str:
    return f"({s})" if level < context else s


def _text(e: Expr, ctx: int) -> str:
    if isinstance(e, Var):
        return e.name

    if isinstance(e, Const):
        s, level = _const_text(e.value)
        return _paren(s, level, ctx)

    if isinstance(e, Lambda):
        params = ", ".join(f"{p.name}::{type_text(p.type)}" for p in e.params)
        s = f"({params}) -> {_text(e.body, 0)}"
        return _paren(s, 0, ctx)

    if isinstance(e, Apply):
        fn = e.fn
        if isinstance(fn, (Var, Apply, Comb, Primitive, PullbackOf)):
            head = _text(fn, _POST)
        else:
            head = f"({_text(fn, 0)})"
        args = ", ".join(_text(a, 0) for a in e.args)
        return f"{head}({args})"

    if isinstance(e, Sum):
        binders = []
        body = e
        while isinstance(body, Sum):
            if any(b.name == body.var.name for b in binders):
                break
            binders.append(body.var)
            body = body.body
        bs = ", ".join(f"{b.name}::{type_text(b.type)}" for b in binders)
        return f"sum(({bs}), {_text(body, 0)})"

    if isinstance(e, Delta):
        return (f"delta({_text(e.lhs, 0)}, {_text(e.rhs, 0)}, "
                f"{_text(e.payload, 0)})")

    if isinstance(e, Conj):
        return f"{_text(e.inner, _POST + 1)}'"

    if isinstance(e, Transpose):
        return f"{_text(e.inner, _POST + 1)}^T"

    if isinstance(e, Mul):
        factors = list(e.factors)
        if len(factors) == 2 and factors[0] == Const(-1):
            s = f"-{_text(factors[1], _NEG + 1)}"
            return _paren(s, _NEG, ctx)
        s = " * ".join(_text(f, _MUL + 1) for f in factors)
        return _paren(s, _MUL, ctx)

    if isinstance(e, Add):
        parts = [_text(e.terms[0], _ADD + 1)]
        for t in e.terms[1:]:
            neg = _negated(t)
            if neg is not None:
                parts.append(f"- {_text(neg, _ADD + 1)}")
            else:
                parts.append(f"+ {_text(t, _ADD + 1)}")
        return _paren(" ".join(parts), _ADD, ctx)

    if isinstance(e, IndexArith):
        parts = [_text(a, _ADD + 1) for a in e.pos]
        s = " + ".join(parts) if parts else ""
        for a in e.neg:
            s = f"{s} - {_text(a, _ADD + 1)}" if s else f"-{_text(a, _ADD + 1)}"
        return _paren(s, _ADD if (len(e.pos) + len(e.neg)) > 1 else _NEG, ctx)

    if isinstance(e, PullbackOf):
        return f"pullback({_text(e.inner, 0)})"

    if isinstance(e, Primitive):
        name = {"conj": "@conj", "contract": "@sum", "identity": "@id",
                "mul": "@mul", "add": "@add"}[e.kind]
        if e.operand is not None:
            return f"{name}({_text(e.operand, 0)})"
        return name

    if isinstance(e, Comb):
        return f"@{e.kind}"

    if isinstance(e, TupleExpr):
        return "(" + ", ".join(_text(x, 0) for x in e.elements) + ")"

    if isinstance(e, Let):
        bs = "; ".join(f"{v.name} = {_text(x, 0)}" for v, x in e.bindings)
        return _paren(f"begin {bs}; {_text(e.body, 0)} end", 0, ctx)

    raise IRError(f"cannot render node {type(e).__name__}")


def _negated(t: Expr):
    """Return u when t is exactly (-1) * u or a negative constant.

    Restricted to shapes whose '- u' rendering re-parses to the same
    tree; anything else keeps an explicit coefficient.
    """
    if isinstance(t, Mul) and len(t.factors) == 2 \
            and t.factors[0] == Const(-1):
        return t.factors[1]
    if isinstance(t, Const) and isinstance(t.value, (int, float)) \
            and t.value < 0:
        return Const(-t.value)
    return None


# ---------------------------------------------------------------------------
# LaTeX
# ---------------------------------------------------------------------------

_GREEK = {"alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta",
          "theta", "iota", "kappa", "lambda", "mu", "nu", "xi", "pi", "rho",
          "sigma", "tau", "phi", "chi", "psi", "omega"}


def _name_latex(name: str) -> str:
    base, _, suffix = name.partition("_")
    if not suffix and base[-1:].isdigit():
        head = base.rstrip("0123456789")
        base, suffix = head, name[len(head):]
    if base in _GREEK:
        base = "\\" + base
    return f"{base}_{{{suffix}}}" if suffix else base


def to_latex(e: Expr) -> str:
    return _latex(e, 0)


def _latex(e: Expr, ctx: int) -> str:
    if isinstance(e, Var):
        return _name_latex(e.name)

    if isinstance(e, Const):
        v = e.value
        if isinstance(v, int):
            return _paren(str(v), _ATOM if v >= 0 else _NEG, ctx)
        if isinstance(v, float):
            return _paren(repr(v), _ATOM if v >= 0 else _NEG, ctx)
        if v == 1j:
            return "i"
        if v.real == 0:
            return _paren(f"{v.imag:g} i", _MUL, ctx)
        return _paren(f"{v.real:g} + {v.imag:g} i", _ADD, ctx)

    if isinstance(e, Lambda):
        params = ", ".join(_name_latex(p.name) for p in e.params)
        if len(e.params) > 1:
            params = f"\\left({params}\\right)"
        s = f"{params} \\mapsto {_latex(e.body, 0)}"
        return _paren(s, 0, ctx)

    if isinstance(e, Apply):
        if isinstance(e.fn, Var) and isinstance(e.fn.type, Space) and \
                all(_is_indexish(a) for a in e.args):
            idx = " ".join(_latex(a, 0) for a in e.args)
            return f"{_name_latex(e.fn.name)}_{{{idx}}}"
        if isinstance(e.fn, PullbackOf) and len(e.args) == 2 and \
                e.args[1] == Const(1):
            head = f"\\nabla {_latex(e.fn.inner, _POST + 1)}"
            return f"{head}\\!\\left({_latex(e.args[0], 0)}\\right)"
        head = _latex(e.fn, _POST) if isinstance(e.fn, (Var, Apply, PullbackOf)) \
            else f"\\left({_latex(e.fn, 0)}\\right)"
        args = ", ".join(_latex(a, 0) for a in e.args)
        return f"{head}\\!\\left({args}\\right)"

    if isinstance(e, Sum):
        binders = []
        body = e
        while isinstance(body, Sum):
            if any(b.name == body.var.name for b in binders):
                break
            binders.append(body.var)
            body = body.body
        bs = ", ".join(_name_latex(b.name) for b in binders)
        return _paren(f"\\sum_{{{bs}}} {_latex(body, _MUL)}", _ADD, ctx)

    if isinstance(e, Delta):
        return (f"\\delta_{{{_latex(e.lhs, 0)},\\,{_latex(e.rhs, 0)}}}"
                f"\\,{_latex(e.payload, _POST)}")

    if isinstance(e, Conj):
        inner = _latex(e.inner, _POST + 1)
        return f"{inner}^{{*}}"

    if isinstance(e, Transpose):
        return f"{_latex(e.inner, _POST + 1)}^{{\\top}}"

    if isinstance(e, Mul):
        factors = list(e.factors)
        lead = ""
        if factors and factors[0] == Const(-1):
            factors = factors[1:]
            lead = "-"
        s = lead + " \\cdot ".join(_latex(f, _MUL + (0 if i == 0 else 1))
                                   for i, f in enumerate(factors))
        return _paren(s, _NEG if lead else _MUL, ctx)

    if isinstance(e, Add):
        parts = [_latex(e.terms[0], _ADD)]
        for t in e.terms[1:]:
            neg = _negated(t)
            if neg is not None:
                parts.append(f"- {_latex(neg, _ADD + 1)}")
            else:
                parts.append(f"+ {_latex(t, _ADD + 1)}")
        return _paren(" ".join(parts), _ADD, ctx)

    if isinstance(e, IndexArith):
        parts = [_latex(a, _ADD + 1) for a in e.pos]
        s = " + ".join(parts)
        for a in e.neg:
            s = f"{s} - {_latex(a, _ADD + 1)}" if s else f"-{_latex(a, _ADD + 1)}"
        return _paren(s, _ADD, ctx)

    if isinstance(e, PullbackOf):
        return f"\\mathcal{{P}}\\!\\left[{_latex(e.inner, 0)}\\right]"

    if isinstance(e, Primitive):
        if e.kind == "mul":
            return f"({_latex(e.operand, _MUL)} \\cdot)"
        if e.kind == "add":
            return f"({_latex(e.operand, _ADD)} +)"
        return {"conj": "\\overline{(\\cdot)}", "contract": "\\Sigma",
                "identity": "\\mathrm{id}"}[e.kind]

    if isinstance(e, Comb):
        return f"\\mathsf{{{e.kind}}}"

    if isinstance(e, TupleExpr):
        return ("\\left(" + ",\\; ".join(_latex(x, 0) for x in e.elements)
                + "\\right)")

    if isinstance(e, Let):
        bs = ";\\; ".join(f"{_name_latex(v.name)} = {_latex(x, 0)}"
                          for v, x in e.bindings)
        return f"\\mathbf{{let}}\\; {bs}\\; \\mathbf{{in}}\\; {_latex(e.body, 0)}"

    raise IRError(f"cannot render node {type(e).__name__}")


def _is_indexish(a: Expr) -> bool:
    if isinstance(a.type, Domain) or isinstance(a, IndexArith):
        return True
    return isinstance(a, Const) and isinstance(a.value, int)


def to_sexpr(e: Expr) -> str:
    """Deterministic S-expression form, one token per node kind."""
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Const):
        v = e.value
        if isinstance(v, complex):
            return f"(const {v.real!r} {v.imag!r})"
        return f"(const {v!r})"
    if isinstance(e, Lambda):
        ps = " ".join(
            f"({p.name} {type_text(p.type)})" if p.type is not None
            else f"({p.name} ?)" for p in e.params)
        return f"(lambda ({ps}) {to_sexpr(e.body)})"
    if isinstance(e, Apply):
        args = " ".join(to_sexpr(a) for a in e.args)
        return f"(apply {to_sexpr(e.fn)} {args})"
    if isinstance(e, Sum):
        t = type_text(e.var.type) if e.var.type is not None else "?"
        return f"(sum ({e.var.name} {t}) {to_sexpr(e.body)})"
    if isinstance(e, Delta):
        return (f"(delta {to_sexpr(e.lhs)} {to_sexpr(e.rhs)} "
                f"{to_sexpr(e.payload)})")
    if isinstance(e, Conj):
        return f"(conj {to_sexpr(e.inner)})"
    if isinstance(e, Transpose):
        return f"(transpose {to_sexpr(e.inner)})"
    if isinstance(e, Mul):
        return "(mul " + " ".join(to_sexpr(f) for f in e.factors) + ")"
    if isinstance(e, Add):
        return "(add " + " ".join(to_sexpr(t) for t in e.terms) + ")"
    if isinstance(e, IndexArith):
        pos = " ".join(to_sexpr(a) for a in e.pos)
        neg = " ".join(to_sexpr(a) for a in e.neg)
        return f"(idx (+ {pos}) (- {neg}))"
    if isinstance(e, Comb):
        return f"(comb {e.kind})"
    if isinstance(e, Primitive):
        if e.operand is None:
            return f"(prim {e.kind})"
        return f"(prim {e.kind} {to_sexpr(e.operand)})"
    if isinstance(e, PullbackOf):
        return f"(pullback {to_sexpr(e.inner)})"
    if isinstance(e, TupleExpr):
        return "(tuple " + " ".join(to_sexpr(x) for x in e.elements) + ")"
    if isinstance(e, Let):
        bs = " ".join(f"({v.name} {to_sexpr(x)})" for v, x in e.bindings)
        return f"(let ({bs}) {to_sexpr(e.body)})"
    raise IRError(f"cannot render node {type(e).__name__}")
