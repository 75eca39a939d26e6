"""Rewrite-to-fixpoint simplification.

``redux`` drives an ordered list of semantics-preserving local rules
over an expression until nothing changes: beta reduction of residual
redexes, conjugate push-in, delta sifting against contractions, signed
index arithmetic normalization, product and sum housekeeping (constant
folding, flattening, zero and identity laws, hoisting contractions out
of products), and like-term collection with summed coefficients.

With ``symmetry_settings`` the collection step additionally
canonicalizes each term over the orbit generated by declared tensor
symmetries, bound-index negation on symmetric domains, and bound-index
shifts on periodic domains, so that summands equal up to those
relabelings merge into one term with a numeric coefficient.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable

from .ir import (
    Add, Apply, Comb, Conj, Const, Delta, Domain, Expr, IndexArith, Lambda,
    Mul, Primitive, REAL, ScalarType, Space, Sum, TupleExpr, Var, _rebuild,
    beta_reduce, canon, children, free_vars, fresh_name, node_count,
    substitute, substitute_many, symmetry_group,
)

_NODE_BUDGET = 64
_VARIANT_CAP = 512


@dataclass(frozen=True)
class RuleSet:
    """Ordered rule selection plus search settings for ``redux``."""

    rules: tuple[str, ...]
    use_symmetries: bool = False
    max_passes: int = 50
    cost: Callable[[Expr], int] = field(default=node_count)


DEFAULT_RULES = ("beta", "conj", "delta", "arith", "mul", "sum", "add")

plain_settings = RuleSet(DEFAULT_RULES)
symmetry_settings = RuleSet(DEFAULT_RULES, use_symmetries=True)


def redux(e: Expr, s: RuleSet = plain_settings) -> Expr:
    """Apply the rule set bottom-up, pass after pass, to a fixpoint."""
    cur = e
    seen = {canon(cur)}
    for _ in range(s.max_passes):
        nxt = _norm(cur, s)
        if canon(nxt) == canon(cur):
            return nxt
        if s.cost(nxt) > s.cost(cur):
            return cur
        cur = nxt
        if canon(cur) in seen:
            return cur
        seen.add(canon(cur))
    warnings.warn("simplification pass budget exhausted; "
                  "returning the best form reached", stacklevel=2)
    return cur


def _norm(e: Expr, s: RuleSet) -> Expr:
    for _ in range(_NODE_BUDGET):
        kids = [_norm(c, s) for c in children(e)]
        cur = _rebuild(e, kids) if kids else e
        nxt = _step(cur, s)
        if nxt is cur or canon(nxt) == canon(cur):
            return nxt
        e = nxt
    return e


def _step(e: Expr, s: RuleSet) -> Expr:
    for name in s.rules:
        out = _RULES[name](e, s)
        if out is not e and canon(out) != canon(e):
            return out
    return e


def _local(e: Expr) -> Expr:
    """Plain normalization used on intermediate rewrite candidates."""
    return _norm(e, plain_settings)


# ---------------------------------------------------------------------------
# Small constructors
# ---------------------------------------------------------------------------

def _mk_mul(fs: list[Expr]) -> Expr:
    if not fs:
        return Const(1)
    if len(fs) == 1:
        return fs[0]
    return Mul(tuple(fs))


def _mk_add(ts: list[Expr]) -> Expr:
    if not ts:
        return Const(0)
    if len(ts) == 1:
        return ts[0]
    return Add(tuple(ts))


def _clean_number(v):
    if isinstance(v, complex):
        return v.real if v.imag == 0 else v
    return v


def _with_coeff(coef, core: Expr) -> Expr:
    if coef == 0:
        return Const(0)
    if coef == 1:
        return core
    c = Const(_clean_number(coef))
    if isinstance(core, Mul):
        return Mul((c, *core.factors))
    if isinstance(core, Const):
        return Const(_clean_number(coef * core.value))
    return Mul((c, core))


def _scalarish(e: Expr) -> bool:
    return e.type is None or isinstance(e.type, ScalarType)


# ---------------------------------------------------------------------------
# Local rules
# ---------------------------------------------------------------------------

def _comb_headed(e: Expr) -> bool:
    h = e
    while isinstance(h, Apply):
        h = h.fn
    return isinstance(h, Comb)


def _rule_beta(e: Expr, s: RuleSet) -> Expr:
    if isinstance(e, Apply) and (
            isinstance(e.fn, (Lambda, Primitive)) or _comb_headed(e)):
        return beta_reduce(e)
    return e


def _rule_conj(e: Expr, s: RuleSet) -> Expr:
    if not isinstance(e, Conj):
        return e
    x = e.inner
    if isinstance(x, Conj):
        return x.inner
    if isinstance(x, Const):
        v = x.value
        z = complex(v)
        return x if z.imag == 0 else Const(_clean_number(z.conjugate()))
    if x.type == REAL:
        return x
    if isinstance(x, Mul):
        return Mul(tuple(Conj(f) for f in x.factors))
    if isinstance(x, Add):
        return Add(tuple(Conj(t) for t in x.terms))
    if isinstance(x, Sum):
        return Sum(x.var, Conj(x.body), origin=x.origin)
    if isinstance(x, Delta):
        return Delta(x.lhs, x.rhs, Conj(x.payload))
    if isinstance(x, Lambda):
        return Lambda(x.params, Conj(x.body))
    if isinstance(x, TupleExpr):
        return TupleExpr(tuple(Conj(t) for t in x.elements))
    return e


def _rule_delta(e: Expr, s: RuleSet) -> Expr:
    if not isinstance(e, Delta):
        return e
    if isinstance(e.payload, Const) and e.payload.value == 0:
        return Const(0)
    if canon(e.lhs) == canon(e.rhs):
        return e.payload
    if isinstance(e.lhs, Const) and isinstance(e.rhs, Const):
        return e.payload if e.lhs.value == e.rhs.value else Const(0)
    if canon(e.rhs) < canon(e.lhs):
        return Delta(e.rhs, e.lhs, e.payload)
    return e


def _arith_parts(e: IndexArith):
    pos: list[Expr] = []
    neg: list[Expr] = []
    cval = 0

    def eat(t: Expr, sign: int):
        nonlocal cval
        if isinstance(t, IndexArith):
            for a in t.pos:
                eat(a, sign)
            for a in t.neg:
                eat(a, -sign)
        elif isinstance(t, Const):
            cval += sign * t.value
        else:
            (pos if sign > 0 else neg).append(t)

    for a in e.pos:
        eat(a, 1)
    for a in e.neg:
        eat(a, -1)
    return pos, neg, cval


def _norm_arith(e: Expr) -> Expr:
    if not isinstance(e, IndexArith):
        return e
    pos, neg, cval = _arith_parts(e)
    for p in list(pos):
        for n in neg:
            if canon(p) == canon(n):
                pos.remove(p)
                neg.remove(n)
                break
    pos.sort(key=canon)
    neg.sort(key=canon)
    if cval:
        (pos if cval > 0 else neg).append(Const(abs(cval)))
    if not pos and not neg:
        return Const(0)
    if len(pos) == 1 and not neg:
        return pos[0]
    return IndexArith(tuple(pos), tuple(neg), type=e.type)


def _rule_arith(e: Expr, s: RuleSet) -> Expr:
    return _norm_arith(e)


def _hoist_sums(factors: list[Expr]) -> Expr:
    taken = set()
    for f in factors:
        taken |= free_vars(f)
    binders: list[tuple[Var, str]] = []
    body_factors: list[Expr] = []
    for f in factors:
        if not isinstance(f, Sum):
            body_factors.append(f)
            continue
        v, b = f.var, f.body
        if v.name in taken:
            nv = Var(fresh_name(v.name, taken), v.type)
            b = substitute(b, v.name, nv)
            v = nv
        taken.add(v.name)
        binders.append((v, f.origin))
        body_factors.append(b)
    core = _mk_mul(body_factors)
    for v, origin in reversed(binders):
        core = Sum(v, core, origin=origin)
    return core


def _rule_mul(e: Expr, s: RuleSet) -> Expr:
    if not isinstance(e, Mul):
        return e
    fs: list[Expr] = []
    for f in e.factors:
        fs.extend(f.factors if isinstance(f, Mul) else [f])
    coef = 1
    rest: list[Expr] = []
    for f in fs:
        if isinstance(f, Const):
            coef = coef * f.value
        else:
            rest.append(f)
    if coef == 0:
        return Const(0)
    sums = sum(1 for f in rest if isinstance(f, Sum))
    if sums and (sums >= 2 or len(rest) > sums):
        return _with_coeff(coef, _hoist_sums(rest))
    if not rest:
        return Const(_clean_number(coef))
    if all(_scalarish(f) for f in rest):
        rest.sort(key=canon)
    return _with_coeff(coef, _mk_mul(rest))


def _rule_add(e: Expr, s: RuleSet) -> Expr:
    if not isinstance(e, Add):
        return e
    ts: list[Expr] = []
    for t in e.terms:
        ts.extend(t.terms if isinstance(t, Add) else [t])
    cacc = 0
    rest: list[Expr] = []
    for t in ts:
        if isinstance(t, Const):
            cacc = cacc + t.value
        else:
            rest.append(t)
    rest = _merge_pointwise(rest)
    groups: dict[str, list] = {}
    for t in rest:
        coef, core = _split_coeff(t)
        if s.use_symmetries:
            key, core = _canonical_term(core)
        else:
            key = canon(core)
        if key in groups:
            groups[key][0] += coef
        else:
            groups[key] = [coef, core]
    out = [_with_coeff(_merge_coeff(c), core)
           for c, core in groups.values() if c != 0]
    out = [t for t in out if not (isinstance(t, Const) and t.value == 0)]
    if cacc != 0:
        out.append(Const(_clean_number(cacc)))
    out.sort(key=canon)
    return _mk_add(out)


def _merge_coeff(c):
    if isinstance(c, complex):
        return c.real if c.imag == 0 else c
    return float(c)


def _merge_pointwise(terms: list[Expr]) -> list[Expr]:
    """Fold sums of function values and of tuples into one value."""
    lams = [t for t in terms if isinstance(t, Lambda)]
    if len(lams) >= 2 and len({len(l.params) for l in lams}) == 1:
        taken = set().union(*(free_vars(l) for l in lams))
        params = []
        for p in lams[0].params:
            nm = fresh_name(p.name, taken)
            taken.add(nm)
            params.append(Var(nm, p.type))
        bodies = []
        for l in lams:
            ren = {p.name: q for p, q in zip(l.params, params)}
            bodies.append(substitute_many(l.body, ren))
        merged = Lambda(tuple(params), Add(tuple(bodies)))
        terms = [t for t in terms if not isinstance(t, Lambda)] + [merged]
    tups = [t for t in terms if isinstance(t, TupleExpr)]
    if len(tups) >= 2 and len({len(t.elements) for t in tups}) == 1:
        width = len(tups[0].elements)
        merged = TupleExpr(tuple(
            Add(tuple(t.elements[i] for t in tups)) for i in range(width)))
        terms = [t for t in terms if not isinstance(t, TupleExpr)] + [merged]
    return terms


def _split_coeff(t: Expr):
    if isinstance(t, Sum):
        c, core = _split_coeff(t.body)
        if c != 1:
            return c, Sum(t.var, core, origin=t.origin)
        return 1, t
    if isinstance(t, Mul):
        coef = 1
        rest: list[Expr] = []
        for f in t.factors:
            if isinstance(f, Const):
                coef = coef * f.value
            else:
                rest.append(f)
        core = _mk_mul(rest)
        if len(rest) == 1 and isinstance(rest[0], Sum):
            c2, core = _split_coeff(rest[0])
            coef = coef * c2
        if coef != 1:
            return coef, core
        return 1, t
    return 1, t


def _rule_sum(e: Expr, s: RuleSet) -> Expr:
    if not isinstance(e, Sum):
        return e
    v, b = e.var, e.body
    if isinstance(b, Const) and b.value == 0:
        return Const(0)
    if v.name not in free_vars(b):
        return e
    if isinstance(b, Add):
        return Add(tuple(Sum(v, t, origin=e.origin) for t in b.terms))
    if isinstance(b, Lambda):
        return Lambda(b.params, Sum(v, b.body, origin=e.origin))
    if isinstance(b, TupleExpr):
        return TupleExpr(tuple(Sum(v, t, origin=e.origin)
                               for t in b.elements))
    fused = _fuse_sum(e)
    if fused is not None:
        return fused
    shifted = _uniform_shift(e)
    if shifted is not None:
        return shifted
    return e


# ---------------------------------------------------------------------------
# Delta fusion
# ---------------------------------------------------------------------------

def _solve(l: Expr, r: Expr, v: Var) -> Expr | None:
    """Value of v that makes l == r, free of v, or None."""
    vn = v.name
    for a, b in ((l, r), (r, l)):
        if vn in free_vars(b) or vn not in free_vars(a):
            continue
        if isinstance(a, Var) and a.name == vn:
            return b
        if isinstance(a, IndexArith):
            pos, neg, cval = _arith_parts(a)
            if cval:
                pos.append(Const(cval))
            phits = [t for t in pos if isinstance(t, Var) and t.name == vn]
            nhits = [t for t in neg if isinstance(t, Var) and t.name == vn]
            others = [t for t in pos + neg if not (
                isinstance(t, Var) and t.name == vn)]
            if any(vn in free_vars(t) for t in others):
                continue
            if len(phits) == 1 and not nhits:
                pos.remove(phits[0])
                return _norm_arith(IndexArith((b, *neg), tuple(pos)))
            if len(nhits) == 1 and not phits:
                neg.remove(nhits[0])
                return _norm_arith(IndexArith(tuple(pos), (*neg, b)))
    return None


def _fusible(f: Expr, v: Var):
    """Find a delta in a payload chain that pins v; return (value, rest)."""
    if not isinstance(f, Delta):
        return None
    t = _solve(f.lhs, f.rhs, v)
    if t is not None:
        return t, f.payload
    if v.name not in free_vars(f.lhs) | free_vars(f.rhs):
        inner = _fusible(f.payload, v)
        if inner is not None:
            t, rest = inner
            return t, Delta(f.lhs, f.rhs, rest)
    return None


def _fuse_sum(e: Sum) -> Expr | None:
    v = e.var
    factors = list(e.body.factors) if isinstance(e.body, Mul) else [e.body]
    for i, f in enumerate(factors):
        hit = _fusible(f, v)
        if hit is None:
            continue
        t, repl = hit
        body = _mk_mul(factors[:i] + [repl] + factors[i + 1:])
        return substitute(body, v.name, t)
    # the pinning delta may sit under an intervening contraction; the two
    # sums commute, so fuse inside and keep the inner binder
    hot = [i for i, f in enumerate(factors) if v.name in free_vars(f)]
    if len(hot) == 1 and isinstance(factors[hot[0]], Sum):
        inner = factors[hot[0]]
        if inner.var.name != v.name:
            sub = _fuse_sum(Sum(v, inner.body, origin=e.origin))
            if sub is not None:
                rest = factors[:hot[0]] + factors[hot[0] + 1:]
                return _mk_mul(
                    rest + [Sum(inner.var, sub, origin=inner.origin)])
    return None


def fuse_delta(e: Expr) -> Expr:
    """Eliminate contractions pinned by a delta, substituting throughout.

    Rewrites every occurrence of sum-over-b of a product containing
    delta(b, t, k) with t free of b: the delta node becomes k and t
    replaces b in the whole summand. No-op when the pattern is absent.
    """
    while True:
        nxt = _fuse_once(e)
        if nxt is None:
            return e
        e = nxt


def _fuse_once(e: Expr) -> Expr | None:
    if isinstance(e, Sum):
        hit = _fuse_sum(e)
        if hit is not None:
            return hit
    kids = list(children(e))
    for i, c in enumerate(kids):
        nc = _fuse_once(c)
        if nc is not None:
            kids[i] = nc
            return _rebuild(e, kids)
    return None


# ---------------------------------------------------------------------------
# Periodic shifts
# ---------------------------------------------------------------------------

def _is_periodic(v: Var) -> bool:
    return isinstance(v.type, Domain) and v.type.periodic


def _arith_occurrences(body: Expr, name: str):
    """(maximal index-arithmetic nodes containing name, bare uses seen)."""
    ariths: list[IndexArith] = []
    bare = 0

    def walk(x: Expr):
        nonlocal bare
        if isinstance(x, IndexArith):
            if name in free_vars(x):
                ariths.append(x)
            return
        if isinstance(x, Var):
            if x.name == name:
                bare += 1
            return
        for c in children(x):
            walk(c)

    walk(body)
    return ariths, bare


def _residue(a: IndexArith, name: str) -> Expr | None:
    """a minus one positive occurrence of name, when well-formed."""
    pos, neg, cval = _arith_parts(a)
    hits = [t for t in pos if isinstance(t, Var) and t.name == name]
    if len(hits) != 1 or any(
            name in free_vars(t) for t in pos + neg if t is not hits[0]):
        return None
    pos.remove(hits[0])
    if cval:
        pos.append(Const(cval))
    if not pos and not neg:
        return Const(0)
    return _norm_arith(IndexArith(tuple(pos), tuple(neg), type=a.type))


def _uniform_shift(e: Sum) -> Expr | None:
    """Rewrite sum-over-k of f(k + t) to sum-over-k of f(k)."""
    if not _is_periodic(e.var):
        return None
    name = e.var.name
    ariths, bare = _arith_occurrences(e.body, name)
    if bare or not ariths:
        return None
    keys = {canon(a) for a in ariths}
    if len(keys) != 1:
        return None
    t = _residue(ariths[0], name)
    if t is None or isinstance(t, Const) and t.value == 0:
        return None
    if not free_vars(t) <= free_vars(e.body):
        return None
    shifted = substitute(e.body, name, IndexArith((e.var,), (t,)))
    return Sum(e.var, _local(shifted), origin=e.origin)


def normalize_index_arith(e: Expr) -> Expr:
    """Flatten, cancel and order signed index sums; remove uniform shifts."""
    kids = [normalize_index_arith(c) for c in children(e)]
    out = _rebuild(e, kids) if kids else e
    out = _norm_arith(out)
    if isinstance(out, Sum):
        shifted = _uniform_shift(out)
        if shifted is not None:
            out = shifted
    return out


# ---------------------------------------------------------------------------
# Symmetry canonicalization
# ---------------------------------------------------------------------------

def _space_of_access(e: Expr) -> Space | None:
    if isinstance(e, Apply) and isinstance(e.fn, Var) and \
            isinstance(e.fn.type, Space) and e.fn.type.symmetries:
        return e.fn.type
    return None


def _transformed_access(acc: Apply, g) -> Expr:
    perm, conj, neg = g
    args = tuple(acc.args[p] for p in perm)
    if neg:
        args = tuple(IndexArith((), (a,)) for a in args)
    out = Apply(acc.fn, args)
    return Conj(out) if conj else out


def canonicalize_access(e: Expr) -> Expr:
    """Rewrite each symmetric-tensor access to its orbit-minimal form.

    The minimal representative prefers fewer index nodes, then the
    lexicographically least argument spelling; conjugation moves to a
    wrapper on the access.
    """
    kids = [canonicalize_access(c) for c in children(e)]
    out = _rebuild(e, kids) if kids else e
    if isinstance(out, Conj):
        out = _rule_conj(out, plain_settings)
    space = _space_of_access(out)
    if space is None:
        return out
    best = None
    for g in symmetry_group(space):
        cand = _local(_transformed_access(out, g))
        acc = cand.inner if isinstance(cand, Conj) else cand
        key = (sum(node_count(a) for a in acc.args),
               tuple(canon(a) for a in acc.args),
               isinstance(cand, Conj))
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1]


def _peel_sums(e: Expr):
    vs = []
    while isinstance(e, Sum):
        vs.append((e.var, e.origin))
        e = e.body
    return vs, e


def _arith_weight(e: Expr) -> int:
    w = len(e.pos) + len(e.neg) if isinstance(e, IndexArith) else 0
    return w + sum(_arith_weight(c) for c in children(e))


def _blind_key(body: Expr, names):
    """Ranking key with the given free names erased.

    Invariant under renaming of exactly those names, so equivalent
    summands agree on it before any binder order is chosen. Weighting
    by index-arithmetic size first keeps shift relabelings from being
    chosen over plainer spellings of the same term.
    """
    if not names:
        return (_arith_weight(body), canon(body))
    pat = re.compile("|".join(
        rf"v!{re.escape(n)}(?=[^\w]|$)" for n in sorted(names)))
    return (_arith_weight(body), pat.sub("v!_", canon(body)))


def _symmetric_accesses(e: Expr) -> list[Apply]:
    found: dict[str, Apply] = {}

    def walk(x: Expr):
        if _space_of_access(x) is not None:
            found.setdefault(canon(x), x)
        for c in children(x):
            walk(c)

    walk(e)
    return [found[k] for k in sorted(found)]


def _replace_all(e: Expr, target: Expr, repl: Expr) -> Expr:
    if canon(e) == canon(target):
        return repl
    kids = [_replace_all(c, target, repl) for c in children(e)]
    return _rebuild(e, kids) if kids else e


def _shift_residues(body: Expr, v: Var) -> list[Expr]:
    ariths, _bare = _arith_occurrences(body, v.name)
    seen: dict[str, Expr] = {}
    for a in ariths:
        t = _residue(a, v.name)
        if t is None or (isinstance(t, Const) and t.value == 0):
            continue
        if not free_vars(t) <= free_vars(body):
            continue
        seen.setdefault(canon(t), t)
    return [seen[k] for k in sorted(seen)][:4]


def _body_variants(vs, body: Expr) -> list[Expr]:
    """Images of the summand under the available relabelings.

    Tensor accesses run over their symmetry orbit; binders on symmetric
    domains may be negated; binders on periodic domains may be shifted
    by any offset already present in the term. The enumeration is
    closed under the generators actually applied, so equivalent
    summands produce corresponding variant sets.
    """
    variants = {canon(body): body}
    for acc in _symmetric_accesses(body):
        group = symmetry_group(_space_of_access(acc))
        if len(group) * len(variants) > _VARIANT_CAP:
            break
        new: dict[str, Expr] = {}
        for b in variants.values():
            for g in group:
                nb = _local(_replace_all(b, acc, _transformed_access(acc, g)))
                new.setdefault(canon(nb), nb)
        variants = new
    negs = [v for v, _ in vs
            if isinstance(v.type, Domain) and v.type.symmetric]
    for v in negs:
        for b in list(variants.values()):
            if len(variants) > _VARIANT_CAP:
                break
            nb = _local(substitute(b, v.name, IndexArith((), (v,))))
            variants.setdefault(canon(nb), nb)
    for v, _ in vs:
        if not _is_periodic(v):
            continue
        for b in list(variants.values()):
            for t in _shift_residues(b, v):
                for sub in (IndexArith((v,), (t,)), IndexArith((v, t))):
                    if len(variants) > _VARIANT_CAP:
                        break
                    nb = _local(substitute(b, v.name, sub))
                    variants.setdefault(canon(nb), nb)
    return list(variants.values())


def _positional(order, body: Expr):
    """Renormalize with position-named binders; return (key, body)."""
    ren = {v.name: Var(f"~{i}", v.type) for i, (v, _) in enumerate(order)}
    nb = _local(substitute_many(body, ren))
    chain = nb
    for i, (v, origin) in reversed(list(enumerate(order))):
        chain = Sum(Var(f"~{i}", v.type), chain, origin=origin)
    return canon(chain), nb


def _restore(order, nb: Expr) -> Expr:
    back = {f"~{i}": v for i, (v, _) in enumerate(order)}
    out = substitute_many(nb, back)
    for v, origin in reversed(order):
        out = Sum(v, out, origin=origin)
    return out


def _first_use_order(vs, body: Expr):
    key = canon(body)

    def pos(v):
        m = re.search(rf"v!{re.escape(v.name)}(?=[^\w]|$)", key)
        return m.start() if m else len(key)

    return sorted(vs, key=lambda item: pos(item[0]))


_TERM_CACHE: dict[str, tuple[str, Expr]] = {}


def _canonical_term(core: Expr) -> tuple[str, Expr]:
    """Grouping key and representative for one summand.

    The key is the canonical string of the best relabeling of the term:
    minimal over symmetry variants of the body, and over contraction
    orders tried with position-only binder names so the choice cannot
    depend on what the binders happen to be called.
    """
    cached = _TERM_CACHE.get(canon(core))
    if cached is not None:
        return cached
    vs, body = _peel_sums(core)
    names = [v.name for v, _ in vs]
    if len(set(names)) != len(names):
        return canon(core), core
    bodies = _body_variants(vs, body)
    blind = [(_blind_key(b, names), b) for b in bodies]
    floor = min(k for k, _ in blind)
    finalists = [b for k, b in blind if k == floor]
    if len(vs) <= 5:
        orders = [tuple(vs[i] for i in p)
                  for p in permutations(range(len(vs)))]
    else:
        orders = None
    best = None
    for b in finalists:
        for order in orders if orders is not None \
                else [tuple(_first_use_order(vs, b))]:
            key, nb = _positional(order, b)
            if best is None or key < best[0]:
                best = (key, order, nb)
    key, order, nb = best
    result = (key, _restore(list(order), nb))
    _TERM_CACHE[canon(core)] = result
    return result


_RULES = {
    "beta": _rule_beta,
    "conj": _rule_conj,
    "delta": _rule_delta,
    "arith": _rule_arith,
    "mul": _rule_mul,
    "sum": _rule_sum,
    "add": _rule_add,
}
