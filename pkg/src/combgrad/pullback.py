"""Reverse-mode differentiation by pullback construction.

``pp`` turns a function expression into its pullback, the lambda
(x, k) that maps a point and an output cotangent to the input
cotangent. Primitives use their closed-form pullbacks; composition is
handled by the two combinator rules: ``apply_b_rule`` for sequencing
(chain rule plus a capture term when the applied function itself
depends on the point) and ``apply_c_rule`` for argument flipping,
which contracts over the flipped argument. Opaque functions stay
symbolic as ``PullbackOf`` nodes.

``vdiff`` specializes the pullback to the constant cotangent 1 to
produce gradients of scalar objectives, checking that the objective is
real outright or provably real from the declared tensor symmetries.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .ir import (
    Add, Apply, COMPLEX, Comb, Conj, Const, Delta, Domain, Expr, IndexArith,
    Lambda, Let, Mul, Primitive, ProductType, PullbackOf, REAL, ScalarType,
    Sum, TupleExpr, Var, _rebuild, _spine, beta_reduce, canon, children,
    free_vars, fresh_name, func_view, inline_lets, substitute_many,
)
from .simplify import plain_settings, redux, symmetry_settings


class PullbackError(Exception):
    pass


@dataclass(frozen=True)
class PullbackResult:
    """A pullback lambda (point, cotangent) plus the rules that built it."""

    expr: Lambda
    provenance: tuple[str, ...] = field(default=())


# ---------------------------------------------------------------------------
# Closed primitive pullbacks
# ---------------------------------------------------------------------------

def primitive_pullback(p: Primitive) -> Lambda:
    """The closed pullback lambda of a capture-form primitive."""
    vt = p.operand.type if p.operand is not None else None
    x = Var("x", vt)
    k = Var("k", vt)
    if p.kind == "conj":
        return Lambda((x, k), Conj(k))
    if p.kind == "mul":
        avoid = free_vars(p.operand)
        x = Var(fresh_name("x", avoid), None)
        k = Var(fresh_name("k", avoid), None)
        return Lambda((x, k), Mul((Conj(p.operand), k)))
    if p.kind == "add":
        avoid = free_vars(p.operand)
        x = Var(fresh_name("x", avoid), None)
        k = Var(fresh_name("k", avoid), None)
        return Lambda((x, k), k)
    if p.kind == "identity":
        return Lambda((x, k), k)
    if p.kind == "contract":
        view = func_view(p.type)
        dom = None
        if view is not None:
            inner = func_view(view[0][0])
            if inner is not None:
                dom = inner[0][0]
        i = Var("i", dom)
        return Lambda((x, k), Lambda((i,), k))
    raise PullbackError(f"no pullback for primitive kind {p.kind!r}")


# ---------------------------------------------------------------------------
# Typed zeros
# ---------------------------------------------------------------------------

def _zero_like(t) -> Expr:
    if t is None or isinstance(t, ScalarType):
        return Const(0)
    if isinstance(t, ProductType):
        return TupleExpr(tuple(_zero_like(el) for el in t.elements))
    view = func_view(t)
    if view is not None:
        args, ret = view
        params = tuple(Var(f"z{n}", a) for n, a in enumerate(args))
        return Lambda(params, _zero_like(ret))
    raise PullbackError(f"no zero cotangent for type {t!r}")


def _is_zero(e: Expr) -> bool:
    if isinstance(e, Const):
        return e.value == 0
    if isinstance(e, Lambda):
        return _is_zero(e.body)
    if isinstance(e, TupleExpr):
        return all(_is_zero(el) for el in e.elements)
    return False


# ---------------------------------------------------------------------------
# Combinator rules
# ---------------------------------------------------------------------------

def apply_b_rule(f: Expr, g: Expr, x: Var, k: Expr,
                 prov: list[str] | None = None) -> Expr:
    """Pullback of x -> f(g(x)) at (x, k), the sequencing rule.

    First summand: chain rule, the cotangent pulled back through f at
    the intermediate point g(x), then through the map x -> g(x).
    Second summand: the capture term for f itself depending on x, a
    delta cotangent against the point where f is applied; it is
    omitted when f does not mention x.
    """
    prov = [] if prov is None else prov
    prov.append("b-rule")
    gx = beta_reduce(Apply(g, (x,)))
    pf = pp(f)
    prov.extend(pf.provenance)
    inner = beta_reduce(Apply(pf.expr, (gx, k)))
    terms = []
    t1 = _pb(x, gx, inner, prov)
    if not _is_zero(t1):
        terms.append(t1)
    if x.name in free_vars(f):
        prov.append("capture")
        view = func_view(f.type)
        it = view[0][0] if view is not None else None
        i = Var(fresh_name("i", free_vars(gx) | free_vars(k) | {x.name}), it)
        ck = Lambda((i,), Delta(gx, i, k))
        t2 = _pb(x, f, ck, prov)
        if not _is_zero(t2):
            terms.append(t2)
    if not terms:
        return _zero_like(x.type)
    return terms[0] if len(terms) == 1 else Add(tuple(terms))


def apply_c_rule(g: Expr, x: Var, k: Expr,
                 prov: list[str] | None = None) -> Expr:
    """Pullback of the flipped function C(g) at (x, k).

    The result contracts the pullbacks of the family members g(b)
    against the matching cotangent component k(b) over a fresh b.
    """
    prov = [] if prov is None else prov
    prov.append("c-rule")
    if k.type is not None and func_view(k.type) is None:
        raise PullbackError(
            "the cotangent of a flipped function must be function-typed")
    bts: tuple = (None,)
    if k.type is not None:
        bts = func_view(k.type)[0]
    elif isinstance(g, Lambda):
        bts = tuple(p.type for p in g.params)
    taken = free_vars(g) | free_vars(k) | {x.name}
    bs = []
    for bt in bts:
        b = Var(fresh_name("b", taken), bt)
        taken = taken | {b.name}
        bs.append(b)
    gb = beta_reduce(Apply(g, tuple(bs)))
    kb = beta_reduce(Apply(k, tuple(bs)))
    pg = pp(gb)
    prov.extend(pg.provenance)
    body = beta_reduce(Apply(pg.expr, (x, kb)))
    for b in reversed(bs):
        body = Sum(b, body, origin="engine")
    return body


def _comb_eta(m: Expr) -> Lambda | None:
    """Rewrite a combinator application to its defining lambda form.

    Partial applications such as C(g)(a) denote functions the structural
    rules cannot open; reading the combinator equation as an eta
    expansion recovers an honest lambda the Lambda rule can handle.
    """
    head, chains = _spine(m)
    if not isinstance(head, Comb):
        return None
    if head.kind == "C" and chains and len(chains[0]) == 1 and \
            isinstance(chains[0][0], Lambda):
        fam = chains[0][0]
        taken = set(free_vars(m))
        bs = []
        for p in fam.params:
            b = Var(fresh_name(p.name, taken), p.type)
            taken.add(b.name)
            bs.append(b)
        if len(chains) >= 2:
            inner = Apply(Apply(fam, tuple(bs)), chains[1])
            for extra in chains[2:]:
                inner = Apply(inner, extra)
            return Lambda(tuple(bs), beta_reduce(inner))
        at = None
        bv = func_view(fam.body.type)
        if bv is not None and len(bv[0]) == 1:
            at = bv[0][0]
        a = Var(fresh_name("a", taken), at)
        return Lambda(
            (a,),
            Lambda(tuple(bs),
                   beta_reduce(Apply(Apply(fam, tuple(bs)), (a,)))))
    if head.kind == "B" and len(chains) == 2 and \
            len(chains[0]) == 1 and len(chains[1]) == 1:
        f, g = chains[0][0], chains[1][0]
        zt = None
        gv = func_view(g.type)
        if gv is not None and len(gv[0]) == 1:
            zt = gv[0][0]
        z = Var(fresh_name("z", free_vars(m)), zt)
        return Lambda((z,), beta_reduce(Apply(f, (Apply(g, (z,)),))))
    return None


# ---------------------------------------------------------------------------
# Structural recursion
# ---------------------------------------------------------------------------

def _pb(x: Var, m: Expr, k: Expr, prov: list[str]) -> Expr:
    """Pullback of the map x -> m, applied at (x, k); x stays free."""
    if x.name not in free_vars(m):
        if isinstance(m.type, Domain) or isinstance(m, IndexArith):
            raise PullbackError("cannot differentiate an index-valued result")
        prov.append("zero")
        return _zero_like(x.type)

    if isinstance(m, Var):
        return k

    if isinstance(m, Conj):
        prov.append("table-1:conj")
        return _pb(x, m.inner, Conj(k), prov)

    if isinstance(m, Add):
        prov.append("linearity:add")
        terms = [_pb(x, t, k, prov)
                 for t in m.terms if x.name in free_vars(t)]
        terms = [t for t in terms if not _is_zero(t)]
        if not terms:
            return _zero_like(x.type)
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    if isinstance(m, Mul):
        prov.append("product-rule")
        terms = []
        for n, factor in enumerate(m.factors):
            if x.name not in free_vars(factor):
                continue
            others = [f for j, f in enumerate(m.factors) if j != n]
            ck = Mul((*(Conj(f) for f in others), k)) if others else k
            t = _pb(x, factor, ck, prov)
            if not _is_zero(t):
                terms.append(t)
        if not terms:
            return _zero_like(x.type)
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    if isinstance(m, Sum):
        prov.append("linearity:sum")
        v, body = m.var, m.body
        if v.name in free_vars(k) or v.name == x.name:
            nv = Var(fresh_name(v.name, free_vars(k) | free_vars(body)
                                | {x.name}), v.type)
            body = substitute_many(body, {v.name: nv})
            v = nv
        return Sum(v, _pb(x, body, k, prov), origin=m.origin)

    if isinstance(m, Delta):
        if x.name in free_vars(m.lhs) | free_vars(m.rhs):
            raise PullbackError(
                "cannot differentiate through a delta on index positions")
        prov.append("linearity:delta")
        return _pb(x, m.payload, Delta(m.lhs, m.rhs, k), prov)

    if isinstance(m, Lambda):
        # function-valued result: contract the pointwise pullbacks
        # against the matching cotangent components
        prov.append("c-rule")
        bs = []
        avoid = set(free_vars(m)) | set(free_vars(k)) | {x.name}
        for p in m.params:
            nb = Var(fresh_name(p.name, avoid), p.type)
            avoid.add(nb.name)
            bs.append(nb)
        body = substitute_many(m.body, {p.name: b
                                        for p, b in zip(m.params, bs)})
        kb = beta_reduce(Apply(k, tuple(bs)))
        out = _pb(x, body, kb, prov)
        for b in reversed(bs):
            out = Sum(b, out, origin="engine")
        return out

    if isinstance(m, Let):
        return _pb(x, inline_lets(m), k, prov)

    if isinstance(m, TupleExpr):
        if not isinstance(k, TupleExpr) or \
                len(k.elements) != len(m.elements):
            raise PullbackError(
                "tuple-valued result needs a tuple cotangent of equal width")
        terms = [_pb(x, el, ke, prov)
                 for el, ke in zip(m.elements, k.elements)
                 if x.name in free_vars(el)]
        terms = [t for t in terms if not _is_zero(t)]
        if not terms:
            return _zero_like(x.type)
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    if isinstance(m, Apply):
        red = beta_reduce(m)
        if canon(red) != canon(m):
            return _pb(x, red, k, prov)
        head, _ = _spine(m)
        if isinstance(head, Comb):
            lam = _comb_eta(m)
            if lam is None:
                raise PullbackError(
                    "combinator application with no applicable rule")
            return _pb(x, lam, k, prov)
        fn, args = m.fn, m.args
        dep = [n for n, a in enumerate(args) if x.name in free_vars(a)]
        if dep and len(args) == 1:
            return apply_b_rule(fn, Lambda((x,), args[0]), x, k, prov)
        if dep:
            raise PullbackError(
                "argument of a multi-index application depends on the "
                "point; restate with a single-argument function")
        # all arguments fixed: only the function value varies
        prov.append("eval-map")
        avoid = set(free_vars(m)) | set(free_vars(k)) | {x.name}
        ds = []
        for n, a in enumerate(args):
            nd = Var(fresh_name(f"d{n}" if len(args) > 1 else "d", avoid),
                     a.type)
            avoid.add(nd.name)
            ds.append(nd)
        ck: Expr = k
        for a, d in zip(reversed(args), reversed(ds)):
            ck = Delta(a, d, ck)
        return _pb(x, fn, Lambda(tuple(ds), ck), prov)

    raise PullbackError(
        f"no differentiation rule for {type(m).__name__} here")


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def pp(f: Expr) -> PullbackResult:
    """Pullback of a function expression.

    Accepts a one-parameter lambda, a combinator chain, a primitive, or
    an opaque function variable. The result lambda takes the point and
    the output cotangent; the cotangent's type is the codomain of f.
    """
    prov: list[str] = []
    if isinstance(f, Primitive):
        return PullbackResult(primitive_pullback(f), (f"table-1:{f.kind}",))

    if isinstance(f, Var):
        view = func_view(f.type)
        xt, kt = (view[0][0], view[1]) if view and len(view[0]) == 1 \
            else (None, None)
        x = Var(fresh_name("x", {f.name}), xt)
        k = Var(fresh_name("k", {f.name, x.name}), kt)
        return PullbackResult(
            Lambda((x, k), Apply(PullbackOf(f), (x, k))), ("opaque",))

    head, chains = _spine(f)
    if isinstance(head, Comb):
        view = func_view(f.type)
        xt, kt = (view[0][0], view[1]) if view and len(view[0]) == 1 \
            else (None, None)
        avoid = free_vars(f)
        x = Var(fresh_name("x", avoid), xt)
        k = Var(fresh_name("k", avoid | {x.name}), kt)
        if head.kind == "B" and len(chains) == 2 and \
                len(chains[0]) == 1 and len(chains[1]) == 1:
            body = apply_b_rule(chains[0][0], chains[1][0], x, k, prov)
            return PullbackResult(Lambda((x, k), body), tuple(prov))
        if head.kind == "C" and len(chains) == 1 and len(chains[0]) == 1:
            body = apply_c_rule(chains[0][0], x, k, prov)
            return PullbackResult(Lambda((x, k), body), tuple(prov))
        # saturated or deeper chains: reduce at a fresh point
        app = Apply(f, (x,))
        red = beta_reduce(app)
        if canon(red) == canon(app):
            lam = _comb_eta(f)
            if lam is None:
                raise PullbackError(
                    "combinator chain with no applicable rule")
            pr = pp(lam)
            prov.extend(pr.provenance)
            return PullbackResult(pr.expr, tuple(prov))
        body = _pb(x, red, k, prov)
        return PullbackResult(Lambda((x, k), body), tuple(prov))

    if isinstance(f, Lambda):
        if len(f.params) != 1:
            raise PullbackError(
                "pullback expects a one-parameter function; multi-parameter "
                "objectives go through vdiff")
        x = f.params[0]
        body = inline_lets(f.body)
        if isinstance(body.type, Domain):
            raise PullbackError("cannot differentiate an index-valued result")
        k = Var(fresh_name("k", free_vars(body) | {x.name}), body.type)
        out = _pb(x, body, k, prov)
        return PullbackResult(Lambda((x, k), out), tuple(prov))

    raise PullbackError(f"cannot form the pullback of {type(f).__name__}")


def _provably_real(body: Expr) -> bool:
    if body.type == REAL:
        return True
    gap = Add((Conj(body), Mul((Const(-1), body))))
    return redux(gap, symmetry_settings) == Const(0)


def _gradient(g: Lambda, prov: list[str]) -> Lambda:
    body = inline_lets(g.body)
    bt = body.type
    if isinstance(bt, Domain):
        raise PullbackError("cannot differentiate an index-valued objective")
    if bt is not None and not isinstance(bt, ScalarType):
        raise PullbackError(
            f"vdiff needs a scalar objective, got {bt!r}")
    for p in g.params:
        if isinstance(p.type, Domain):
            raise PullbackError(
                f"parameter {p.name} is an index, not a differentiable value")
    if bt == COMPLEX and not _provably_real(body):
        warnings.warn(
            "objective is complex-valued and not provably real under the "
            "declared symmetries; returning the formal gradient",
            stacklevel=3)
    grads = [_pb(p, body, Const(1), prov) for p in g.params]
    out = grads[0] if len(grads) == 1 else TupleExpr(tuple(grads))
    return redux(Lambda(g.params, out), plain_settings)


def _map_markers(e: Expr, fn, hits: list[int]) -> Expr:
    if isinstance(e, PullbackOf) and isinstance(e.inner, Lambda):
        hits.append(1)
        return fn(e.inner)
    kids = [_map_markers(c, fn, hits) for c in children(e)]
    return _rebuild(e, kids) if kids else e


def vdiff(f: Expr) -> Expr:
    """Gradient extraction: the pullback applied to the cotangent 1.

    Pullback markers inside f (written as ``pullback(...)`` in source)
    become gradient lambdas; enclosing parameters pass through. A bare
    objective lambda is differentiated directly. Multi-parameter
    objectives produce a tuple of partial gradients.
    """
    prov: list[str] = []
    hits: list[int] = []
    out = _map_markers(f, lambda g: _gradient(g, prov), hits)
    if hits:
        return out
    if isinstance(f, Lambda):
        return _gradient(f, prov)
    raise PullbackError(
        "vdiff needs an objective lambda or a pullback marker to expand")


def expand_pullbacks(f: Expr) -> Expr:
    """Replace each inline pullback marker with its derived pullback."""
    hits: list[int] = []
    out = _map_markers(f, lambda g: pp(g).expr, hits)
    return out
