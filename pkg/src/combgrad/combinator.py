"""Abstraction elimination into B, C and capture primitives.

``decompose`` removes a lambda's binding of one parameter, rewriting the
body as a pipeline of the composition combinator B, the flip combinator
C, and the unary capture primitives (identity, conj, mul-by, add-by,
contract). When the parameter occurs linearly the result is a closed
chain denoting the same function. When the body needs the parameter in
several operands of one product or sum (for example f(x) * g(x)), no
closed B/C/I form exists; the chain then keeps those occurrences inside
capture operands and the original binder is retained, wrapping a
saturated application of the chain. Differentiation reads the captured
occurrences through the backpropagation term of the B rule.

``binarize`` is the product-level half of the same preparation: it
rewrites any product or sum that uses an enclosing parameter in several
operands into nested unary capture applications, so that every
multiplication or addition touches the parameter through at most one
operand.
"""
from __future__ import annotations

from .ir import (
    Add, Apply, Comb, Conj, Const, Delta, Expr, IRError, Lambda, Mul,
    Primitive, Sum, TupleExpr, Var, children, free_vars, fresh_name,
    inline_lets, _rebuild,
)


class DecomposeError(IRError):
    """The lambda body falls outside the supported elimination fragment."""


def _b(f: Expr, g: Expr) -> Expr:
    return Apply(Apply(Comb("B"), (f,)), (g,))


def _c(g: Expr, args: tuple[Expr, ...] = ()) -> Expr:
    out = Apply(Comb("C"), (g,))
    return Apply(out, args) if args else out


def order_product(factors, name: str) -> tuple[Expr | None, tuple[Expr, ...]]:
    """Split product factors for binarization.

    Returns (captured, dependents): the factors free of ``name`` merged
    into one captured multiplier (None when there are none), and the
    factors that use ``name``, which binarization prefers to keep in
    argument position.
    """
    dep, free = [], []
    for f in factors:
        (dep if name in free_vars(f) else free).append(f)
    if not free:
        captured = None
    elif len(free) == 1:
        captured = free[0]
    else:
        captured = Mul(tuple(free))
    return captured, tuple(dep)


def decompose(f: Lambda) -> Expr:
    """Eliminate the abstraction of a one-parameter lambda.

    Returns a parameter-free combinator chain when the body is linear in
    the parameter. For non-linear bodies the output is a lambda over the
    same parameter whose body is a saturated chain application; captures
    inside the chain may still mention the parameter.
    """
    if len(f.params) != 1:
        raise DecomposeError(
            "decompose eliminates exactly one parameter; curry first")
    p = f.params[0]
    chain = _decompose(p, inline_lets(f.body))
    if p.name in free_vars(chain):
        return Lambda(f.params, Apply(chain, (p,)))
    return chain


def _decompose(p: Var, m: Expr) -> Expr:
    name = p.name

    if isinstance(m, Var) and m.name == name:
        return Primitive("identity")

    if name not in free_vars(m):
        # constant function: add-by-m after scaling the input away
        return _b(Primitive("add", m), Primitive("mul", Const(0)))

    if isinstance(m, Conj):
        if isinstance(m.inner, Var) and m.inner.name == name:
            return Primitive("conj")
        return _b(Primitive("conj"), _decompose(p, m.inner))

    if isinstance(m, Lambda):
        return _c(Lambda(m.params, _decompose(p, m.body)))

    if isinstance(m, Sum):
        return _b(Primitive("contract", origin=m.origin),
                  _decompose(p, Lambda((m.var,), m.body)))

    if isinstance(m, Mul):
        captured, dep = order_product(m.factors, name)
        chain = _capture_chain(p, dep, "mul")
        return _under_capture(chain, "mul", captured)

    if isinstance(m, Add):
        captured, dep = order_product(m.terms, name)
        chain = _capture_chain(p, dep, "add")
        return _under_capture(chain, "add", captured)

    if isinstance(m, Delta):
        if name in free_vars(m.lhs) | free_vars(m.rhs):
            raise DecomposeError(
                "parameter used inside a delta index; no elimination rule")
        return _b(Primitive("mul", Delta(m.lhs, m.rhs, Const(1))),
                  _decompose(p, m.payload))

    if isinstance(m, Apply):
        fn_dep = name in free_vars(m.fn)
        dep_slots = [s for s, a in enumerate(m.args)
                     if name in free_vars(a)]
        if fn_dep and dep_slots:
            raise DecomposeError(
                "application uses the parameter in both function and "
                "argument position; only differentiation handles that")
        if fn_dep:
            if isinstance(m.fn, Var) and m.fn.name == name:
                return _c(Primitive("identity"), m.args)
            return _c(_decompose(p, m.fn), m.args)
        if len(dep_slots) > 1:
            raise DecomposeError(
                "application uses the parameter in several arguments; "
                "only differentiation handles non-linear use")
        s = dep_slots[0]
        arg = m.args[s]
        if len(m.args) == 1:
            if isinstance(arg, Var) and arg.name == name:
                return m.fn  # eta
            return _b(m.fn, _decompose(p, arg))
        v = Var(fresh_name("v", free_vars(m)), arg.type)
        slot = Lambda((v,), Apply(m.fn, m.args[:s] + (v,) + m.args[s + 1:]))
        if isinstance(arg, Var) and arg.name == name:
            return slot
        return _b(slot, _decompose(p, arg))

    if isinstance(m, TupleExpr):
        raise DecomposeError("no elimination rule for tuple bodies")
    raise DecomposeError(
        f"no elimination rule for {type(m).__name__} bodies")


def _capture_chain(p: Var, dep: tuple[Expr, ...], kind: str) -> Expr:
    """Right-nested capture chain over parameter-dependent operands."""
    inner = _decompose(p, dep[-1])
    for d in reversed(dep[:-1]):
        inner = _b(Primitive(kind, d), inner)
    return inner


def _under_capture(chain: Expr, kind: str, captured: Expr | None) -> Expr:
    if captured is None:
        return chain
    if chain == Primitive("identity"):
        return Primitive(kind, captured)
    return _b(Primitive(kind, captured), chain)


def binarize(e: Expr) -> Expr:
    """Rewrite multi-operand use of lambda parameters into capture form.

    Any product or sum that uses an enclosing lambda parameter in two or
    more operands becomes a nested chain of unary capture applications,
    e.g. x -> f(x) * g(x) turns into x -> ((v) -> f(x) * v)(g(x)).
    Operands free of every parameter join the outermost capture.
    Products already touching each parameter through one operand, such
    as x -> c * x, come back unchanged.
    """
    return _binarize(e, frozenset())


def _binarize(e: Expr, active: frozenset) -> Expr:
    if isinstance(e, Lambda):
        inner = active | {q.name for q in e.params}
        return Lambda(e.params, _binarize(e.body, inner))
    kids = [_binarize(c, active) for c in children(e)]
    out = _rebuild(e, kids) if kids else e
    if isinstance(out, (Mul, Add)) and active:
        return _capture_applies(out, active)
    return out


def _capture_applies(node: Expr, active: frozenset) -> Expr:
    ops = node.factors if isinstance(node, Mul) else node.terms
    dep = [t for t in ops if free_vars(t) & active]
    if len(dep) < 2:
        return node
    free = tuple(t for t in ops if not (free_vars(t) & active))
    cls = type(node)
    used = set(free_vars(node))
    out = dep[-1]
    heads = dep[:-1]
    for i, d in enumerate(reversed(heads)):
        v = Var(fresh_name("v", used), node.type)
        used.add(v.name)
        operands = (d, v)
        if i == len(heads) - 1 and free:
            operands = (*free, d, v)
        out = Apply(Lambda((v,), cls(operands)), (out,))
    return out
