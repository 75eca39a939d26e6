"""Core term language for symbolic tensor calculus.

Immutable expression trees over a small typed functional language: typed
lambdas, applications, polymorphic contractions (Sum), formal deltas,
complex conjugation, capture-style unary primitives, the B and C
combinators, unexpanded pullback markers, tuples, let bindings, and
modular index arithmetic for periodic domains.

Terms compare and hash by alpha-equivalence: bound variables are renamed
to positional indices in a canonical string which backs ``__eq__``,
``__hash__`` and the deterministic orderings used by the rewriter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

DEFAULT_BETA_BUDGET = 1_000_000


class IRError(Exception):
    """Malformed term construction or use."""


class SubstitutionTypeError(IRError):
    """Substituted value's type conflicts with the variable's declared type."""


class BetaBudgetError(IRError):
    """Reduction exceeded the configured step budget."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

class TypeExpr:
    """Base class for all types."""

    def key(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class ScalarType(TypeExpr):
    kind: str  # "real" | "complex"

    def key(self) -> str:
        return "R" if self.kind == "real" else "C"

    def __repr__(self) -> str:
        return self.key()


REAL = ScalarType("real")
COMPLEX = ScalarType("complex")


@dataclass(frozen=True)
class Domain(TypeExpr):
    """An index domain. Conceptually infinite; finitized only numerically."""

    name: str
    base: str = "int"
    periodic: bool = False
    symmetric: bool = False
    contractable: bool = True

    def key(self) -> str:
        flags = "".join(
            c for c, on in (("p", self.periodic), ("s", self.symmetric),
                            ("n", not self.contractable)) if on)
        return f"D:{self.name}:{flags}"

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Symmetry:
    """Index permutation (1-based) plus a value action.

    action "id":   T(i...) == T(perm(i...))
    action "conj": T(i...) == conj(T(perm(i...)))
    action "ineg": T(i...) == T(-perm(i...)), legal only on symmetric domains
    """

    permutation: tuple[int, ...]
    action: str = "id"

    def __post_init__(self):
        if sorted(self.permutation) != list(range(1, len(self.permutation) + 1)):
            raise IRError(f"not a permutation: {self.permutation}")
        if self.action not in ("id", "conj", "ineg"):
            raise IRError(f"unknown symmetry action: {self.action}")

    def key(self) -> str:
        return f"({','.join(map(str, self.permutation))};{self.action})"


@dataclass(frozen=True)
class Space(TypeExpr):
    """A tensor space: indexed by domains, scalar elements, symmetries."""

    domains: tuple[Domain, ...]
    element: ScalarType
    symmetries: tuple[Symmetry, ...] = ()
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        for sym in self.symmetries:
            if len(sym.permutation) != len(self.domains):
                raise IRError("symmetry rank does not match space rank")
            if sym.action == "ineg" and not all(d.symmetric for d in self.domains):
                raise IRError("ineg symmetry requires symmetric index domains")

    @property
    def rank(self) -> int:
        return len(self.domains)

    def key(self) -> str:
        doms = ",".join(d.key() for d in self.domains)
        syms = "".join(s.key() for s in self.symmetries)
        return f"S({doms})->{self.element.key()}{syms}"

    def __repr__(self) -> str:
        return self.name or self.key()


@dataclass(frozen=True)
class FuncType(TypeExpr):
    args: tuple[TypeExpr, ...]
    ret: TypeExpr

    def key(self) -> str:
        return f"F({','.join(a.key() for a in self.args)})->{self.ret.key()}"

    def __repr__(self) -> str:
        return self.key()


@dataclass(frozen=True)
class ProductType(TypeExpr):
    elements: tuple[TypeExpr, ...]

    def key(self) -> str:
        return f"P({','.join(e.key() for e in self.elements)})"


@dataclass(frozen=True)
class DualSpace(TypeExpr):
    """Marker type for transposed vectors in recovered matrix notation."""

    inner: TypeExpr

    def key(self) -> str:
        return f"T({self.inner.key()})"


def is_scalar_type(t: TypeExpr | None) -> bool:
    return isinstance(t, ScalarType)


def is_index_type(t: TypeExpr | None) -> bool:
    return isinstance(t, Domain)


def scalar_join(*types: TypeExpr | None) -> ScalarType | None:
    """Least scalar type containing all operands; None if unknown."""
    out: ScalarType | None = REAL
    for t in types:
        if t is None:
            out = None if out is REAL else out
        elif isinstance(t, ScalarType):
            if t.kind == "complex":
                return COMPLEX
        else:
            return None
    return out


def func_view(t: TypeExpr | None) -> tuple[tuple[TypeExpr, ...], TypeExpr] | None:
    """View a type as (argument types, result type) if it is callable."""
    if isinstance(t, FuncType):
        return t.args, t.ret
    if isinstance(t, Space):
        return tuple(t.domains), t.element
    return None


def types_compatible(expected: TypeExpr | None, actual: TypeExpr | None) -> bool:
    """Loose structural compatibility. Unknown types are never rejected."""
    if expected is None or actual is None:
        return True
    if expected == actual:
        return True
    if isinstance(expected, ScalarType) and isinstance(actual, ScalarType):
        return expected is COMPLEX and actual is REAL
    if isinstance(expected, Domain) and isinstance(actual, Domain):
        return expected.base == actual.base
    ev, av = func_view(expected), func_view(actual)
    if ev is not None and av is not None:
        eargs, eret = ev
        aargs, aret = av
        if len(eargs) != len(aargs):
            return False
        # arguments contravariant, results covariant
        return all(types_compatible(a, e) for e, a in zip(eargs, aargs)) and \
            types_compatible(eret, aret)
    if isinstance(expected, ProductType) and isinstance(actual, ProductType):
        return len(expected.elements) == len(actual.elements) and all(
            types_compatible(e, a)
            for e, a in zip(expected.elements, actual.elements))
    return False


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

class Expr:
    """Base expression. Subclasses are frozen dataclasses."""

    type: TypeExpr | None

    # -- canonical form ----------------------------------------------------

    def canon(self) -> str:
        cached = getattr(self, "_canon", None)
        if cached is None:
            out: list[str] = []
            _canon_walk(self, {}, [0], out)
            cached = "".join(out)
            object.__setattr__(self, "_canon", cached)
        return cached

    def sort_key(self) -> str:
        return self.canon()

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        return self.canon() == other.canon()

    def __ne__(self, other):
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    def __hash__(self):
        return hash(self.canon())


def symmetry_group(space: Space) -> list[tuple[tuple[int, ...], bool, bool]]:
    """Close the declared symmetry generators under composition.

    Elements are (perm, conj, neg) with perm 0-based: any tensor T of the
    space satisfies T(i_1, .., i_n) == conj^c T(j_1, .., j_n) where
    j_k = i_perm(k), negated when the neg flag is set.
    """
    rank = len(space.domains)
    identity = (tuple(range(rank)), False, False)
    gens = [(tuple(p - 1 for p in s.permutation),
             s.action == "conj", s.action == "ineg")
            for s in space.symmetries]
    group = {identity}
    frontier = [identity]
    while frontier:
        g = frontier.pop()
        for h in gens:
            perm = tuple(g[0][h[0][j]] for j in range(rank))
            comp = (perm, g[1] ^ h[1], g[2] ^ h[2])
            if comp not in group:
                if len(group) >= 64:
                    raise IRError("symmetry group closure too large")
                group.add(comp)
                frontier.append(comp)
    return sorted(group)


def _const_tag(value) -> str:
    # numerically equal literals share one tag (4 == 4.0 == 4+0j)
    if isinstance(value, bool):
        raise IRError("boolean constants are not part of the language")
    if not isinstance(value, (int, float, complex, Fraction)):
        raise IRError(f"unsupported constant: {value!r}")
    z = complex(value)
    return f"n{z.real + 0.0!r}:{z.imag + 0.0!r}"


def _type_tag(t: TypeExpr | None) -> str:
    """Type token for canonical strings.

    Spaces collapse to their function view so that a binder annotated
    with a named space equals one annotated with the equivalent
    function type (symmetry metadata travels in the types themselves,
    not in term identity).
    """
    if t is None:
        return "?"
    if isinstance(t, Space):
        args = ",".join(_type_tag(d) for d in t.domains)
        return f"F({args})->{_type_tag(t.element)}"
    if isinstance(t, FuncType):
        args = ",".join(_type_tag(a) for a in t.args)
        return f"F({args})->{_type_tag(t.ret)}"
    return t.key()


def _canon_walk(e: Expr, env: dict[str, str], counter: list[int], out: list[str]):
    """Emit a canonical token stream; bound names become positional tokens."""

    def bind(names):
        new = dict(env)
        for n in names:
            new[n] = f"%{counter[0]}"
            counter[0] += 1
        return new

    if isinstance(e, Var):
        out.append(env.get(e.name) or f"v!{e.name}")
    elif isinstance(e, Const):
        out.append(f"c!{_const_tag(e.value)}")
    elif isinstance(e, Lambda):
        out.append(f"(L{len(e.params)}[")
        out.append(",".join(_type_tag(p.type) for p in e.params))
        out.append("]")
        inner = bind(p.name for p in e.params)
        _canon_walk(e.body, inner, counter, out)
        out.append(")")
    elif isinstance(e, Apply):
        out.append("(@")
        _canon_walk(e.fn, env, counter, out)
        for a in e.args:
            out.append(" ")
            _canon_walk(a, env, counter, out)
        out.append(")")
    elif isinstance(e, Sum):
        out.append(f"(Σ[{_type_tag(e.var.type)}]")
        inner = bind([e.var.name])
        _canon_walk(e.body, inner, counter, out)
        out.append(")")
    elif isinstance(e, Delta):
        out.append("(δ ")
        _canon_walk(e.lhs, env, counter, out)
        out.append(" ")
        _canon_walk(e.rhs, env, counter, out)
        out.append(" ")
        _canon_walk(e.payload, env, counter, out)
        out.append(")")
    elif isinstance(e, Conj):
        out.append("(conj ")
        _canon_walk(e.inner, env, counter, out)
        out.append(")")
    elif isinstance(e, Primitive):
        out.append(f"(prim:{e.kind}")
        if e.operand is not None:
            out.append(" ")
            _canon_walk(e.operand, env, counter, out)
        out.append(")")
    elif isinstance(e, Comb):
        out.append(f"(comb:{e.kind})")
    elif isinstance(e, PullbackOf):
        out.append("(pb ")
        _canon_walk(e.inner, env, counter, out)
        out.append(")")
    elif isinstance(e, TupleExpr):
        out.append("(tup")
        for el in e.elements:
            out.append(" ")
            _canon_walk(el, env, counter, out)
        out.append(")")
    elif isinstance(e, Let):
        out.append("(let")
        cur = env
        for var, val in e.bindings:
            out.append(" [")
            _canon_walk(val, cur, counter, out)
            out.append("]")
            cur = dict(cur)
            cur[var.name] = f"%{counter[0]}"
            counter[0] += 1
        out.append(" ")
        _canon_walk(e.body, cur, counter, out)
        out.append(")")
    elif isinstance(e, IndexArith):
        out.append("(idx +")
        for a in e.pos:
            out.append(" ")
            _canon_walk(a, env, counter, out)
        out.append(" -")
        for a in e.neg:
            out.append(" ")
            _canon_walk(a, env, counter, out)
        out.append(")")
    elif isinstance(e, Mul):
        out.append("(*")
        for f in e.factors:
            out.append(" ")
            _canon_walk(f, env, counter, out)
        out.append(")")
    elif isinstance(e, Add):
        out.append("(+")
        for t in e.terms:
            out.append(" ")
            _canon_walk(t, env, counter, out)
        out.append(")")
    elif isinstance(e, Transpose):
        out.append("(T ")
        _canon_walk(e.inner, env, counter, out)
        out.append(")")
    else:
        raise IRError(f"unknown node: {type(e).__name__}")


@dataclass(frozen=True, eq=False)
class Var(Expr):
    name: str
    type: TypeExpr | None = None


@dataclass(frozen=True, eq=False)
class Const(Expr):
    value: object  # int | float | complex
    type: TypeExpr | None = None

    def __post_init__(self):
        _const_tag(self.value)  # validate
        if self.type is None:
            t = COMPLEX if isinstance(self.value, complex) else REAL
            object.__setattr__(self, "type", t)


@dataclass(frozen=True, eq=False)
class Lambda(Expr):
    params: tuple[Var, ...]
    body: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        if not self.params:
            raise IRError("lambda with no parameters")
        if len({p.name for p in self.params}) != len(self.params):
            raise IRError("duplicate lambda parameter names")
        if self.type is None and self.body.type is not None and \
                all(p.type is not None for p in self.params):
            object.__setattr__(
                self, "type",
                FuncType(tuple(p.type for p in self.params), self.body.type))


@dataclass(frozen=True, eq=False)
class Apply(Expr):
    fn: Expr
    args: tuple[Expr, ...]
    type: TypeExpr | None = None

    def __post_init__(self):
        if not self.args:
            raise IRError("application with no arguments")
        if self.type is None:
            view = func_view(self.fn.type)
            if view is not None and len(view[0]) == len(self.args):
                object.__setattr__(self, "type", view[1])


@dataclass(frozen=True, eq=False)
class Sum(Expr):
    """Polymorphic contraction over the bound variable's domain."""

    var: Var
    body: Expr
    origin: str = "user"  # "user" | "engine"; excluded from equality
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.origin == "engine" and isinstance(self.var.type, Domain) \
                and not self.var.type.contractable:
            raise IRError(
                f"engine contraction over non-contractable domain "
                f"{self.var.type.name}")
        if self.type is None:
            object.__setattr__(self, "type", self.body.type)


@dataclass(frozen=True, eq=False)
class Delta(Expr):
    """delta(lhs, rhs, payload): payload when lhs == rhs, else zero."""

    lhs: Expr
    rhs: Expr
    payload: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        lt, rt = self.lhs.type, self.rhs.type
        literal = isinstance(self.lhs, Const) or isinstance(self.rhs, Const)
        if lt is not None and rt is not None and not literal:
            if not (types_compatible(lt, rt) or types_compatible(rt, lt)):
                raise IRError(f"delta operand types differ: {lt!r} vs {rt!r}")
        if self.type is None:
            object.__setattr__(self, "type", self.payload.type)


@dataclass(frozen=True, eq=False)
class Conj(Expr):
    inner: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.type is None:
            object.__setattr__(self, "type", self.inner.type)


@dataclass(frozen=True, eq=False)
class Primitive(Expr):
    """Unary capture-form primitives.

    kind "conj":     x -> conj(x)
    kind "mul":      x -> operand * x
    kind "add":      x -> operand + x
    kind "contract": f -> sum of f over its index domain
    kind "identity": x -> x

    origin tracks whether a contraction came from source text or was
    introduced by a rewrite; it mirrors Sum.origin and is ignored by
    canonical comparison.
    """

    kind: str
    operand: Expr | None = None
    type: TypeExpr | None = None
    origin: str = "user"

    KINDS = ("conj", "mul", "add", "contract", "identity")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise IRError(f"unknown primitive kind: {self.kind}")
        if self.kind in ("mul", "add") and self.operand is None:
            raise IRError(f"primitive {self.kind} requires a captured operand")
        if self.kind in ("conj", "contract", "identity") and self.operand is not None:
            raise IRError(f"primitive {self.kind} takes no operand")
        if self.origin not in ("user", "engine"):
            raise IRError(f"unknown primitive origin: {self.origin}")


@dataclass(frozen=True, eq=False)
class Comb(Expr):
    """The composition (B) and argument-flip (C) combinators."""

    kind: str
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.kind not in ("B", "C"):
            raise IRError(f"unknown combinator: {self.kind}")


@dataclass(frozen=True, eq=False)
class PullbackOf(Expr):
    """Unexpanded pullback of an opaque or not-yet-differentiated function."""

    inner: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.type is None:
            view = func_view(self.inner.type)
            if view is not None:
                args, ret = view
                if len(args) == 1:
                    t = FuncType((args[0], ret), args[0])
                else:
                    t = FuncType((*args, ret), ProductType(tuple(args)))
                object.__setattr__(self, "type", t)


@dataclass(frozen=True, eq=False)
class TupleExpr(Expr):
    elements: tuple[Expr, ...]
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.type is None and all(e.type is not None for e in self.elements):
            object.__setattr__(
                self, "type", ProductType(tuple(e.type for e in self.elements)))


@dataclass(frozen=True, eq=False)
class Let(Expr):
    bindings: tuple[tuple[Var, Expr], ...]
    body: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.type is None:
            object.__setattr__(self, "type", self.body.type)


@dataclass(frozen=True, eq=False)
class IndexArith(Expr):
    """Signed sum of index atoms, e.g. k + b or -b.

    Addition is only meaningful when some operand lives on a periodic
    domain (wrap-around) or when the expression is a pure negation on a
    symmetric domain. The type checker enforces this; the node itself
    only keeps the signed atom lists flat.
    """

    pos: tuple[Expr, ...]
    neg: tuple[Expr, ...] = ()
    type: TypeExpr | None = None

    def __post_init__(self):
        pos, neg = [], []
        for atom in self.pos:
            if isinstance(atom, IndexArith):
                pos.extend(atom.pos)
                neg.extend(atom.neg)
            else:
                pos.append(atom)
        for atom in self.neg:
            if isinstance(atom, IndexArith):
                pos.extend(atom.neg)
                neg.extend(atom.pos)
            else:
                neg.append(atom)
        object.__setattr__(self, "pos", tuple(pos))
        object.__setattr__(self, "neg", tuple(neg))
        if not self.pos and not self.neg:
            raise IRError("empty index arithmetic")
        if self.type is None:
            object.__setattr__(self, "type", infer_index_domain(self.pos, self.neg))


def infer_index_domain(pos, neg) -> Domain | None:
    doms = [a.type for a in (*pos, *neg) if isinstance(a.type, Domain)]
    for d in doms:
        if d.periodic:
            return d
    return doms[0] if doms else None


@dataclass(frozen=True, eq=False)
class Mul(Expr):
    """n-ary product. Scalar products are unordered (the rewriter sorts);
    products containing tensor-typed operands are ordered matrix chains."""

    factors: tuple[Expr, ...]
    type: TypeExpr | None = None

    def __post_init__(self):
        if len(self.factors) < 2:
            raise IRError("product needs at least two factors")
        if self.type is None:
            object.__setattr__(
                self, "type", scalar_join(*(f.type for f in self.factors)))


@dataclass(frozen=True, eq=False)
class Add(Expr):
    terms: tuple[Expr, ...]
    type: TypeExpr | None = None

    def __post_init__(self):
        if len(self.terms) < 2:
            raise IRError("sum needs at least two terms")
        if self.type is None:
            ts = [t.type for t in self.terms]
            if all(isinstance(t, ScalarType) for t in ts):
                object.__setattr__(self, "type", scalar_join(*ts))
            elif ts and ts[0] is not None and all(t == ts[0] for t in ts):
                object.__setattr__(self, "type", ts[0])


@dataclass(frozen=True, eq=False)
class Transpose(Expr):
    inner: Expr
    type: TypeExpr | None = None

    def __post_init__(self):
        if self.type is None and self.inner.type is not None:
            object.__setattr__(self, "type", DualSpace(self.inner.type))


ZERO = Const(0)
ONE = Const(1)


# ---------------------------------------------------------------------------
# Generic traversal
# ---------------------------------------------------------------------------

def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Var, Const, Comb)):
        return ()
    if isinstance(e, Lambda):
        return (e.body,)
    if isinstance(e, Apply):
        return (e.fn, *e.args)
    if isinstance(e, Sum):
        return (e.body,)
    if isinstance(e, Delta):
        return (e.lhs, e.rhs, e.payload)
    if isinstance(e, (Conj, PullbackOf, Transpose)):
        return (e.inner,)
    if isinstance(e, Primitive):
        return () if e.operand is None else (e.operand,)
    if isinstance(e, TupleExpr):
        return e.elements
    if isinstance(e, Let):
        return (*(v for _, v in e.bindings), e.body)
    if isinstance(e, IndexArith):
        return (*e.pos, *e.neg)
    if isinstance(e, Mul):
        return e.factors
    if isinstance(e, Add):
        return e.terms
    raise IRError(f"unknown node: {type(e).__name__}")


def canon(e: Expr) -> str:
    """Canonical string of an expression (alpha-renamed, origin-blind)."""
    return e.canon()


def node_count(e: Expr) -> int:
    cached = getattr(e, "_ncount", None)
    if cached is None:
        cached = 1 + sum(node_count(c) for c in children(e))
        object.__setattr__(e, "_ncount", cached)
    return cached


def free_vars(e: Expr) -> frozenset[str]:
    cached = getattr(e, "_fv", None)
    if cached is not None:
        return cached
    if isinstance(e, Var):
        fv = frozenset((e.name,))
    elif isinstance(e, Lambda):
        fv = free_vars(e.body) - {p.name for p in e.params}
    elif isinstance(e, Sum):
        fv = free_vars(e.body) - {e.var.name}
    elif isinstance(e, Let):
        fv = free_vars(e.body)
        for var, val in reversed(e.bindings):
            fv = (fv - {var.name}) | free_vars(val)
    else:
        fv = frozenset().union(*(free_vars(c) for c in children(e))) \
            if children(e) else frozenset()
    object.__setattr__(e, "_fv", fv)
    return fv


def fresh_name(base: str, avoid) -> str:
    if base not in avoid:
        return base
    i = 1
    while f"{base}_{i}" in avoid:
        i += 1
    return f"{base}_{i}"


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------

def substitute_many(e: Expr, mapping: dict[str, Expr]) -> Expr:
    """Capture-avoiding simultaneous substitution of free variables."""
    if not mapping:
        return e
    live = {k: v for k, v in mapping.items() if k in free_vars(e)}
    if not live:
        return e
    value_fv = frozenset().union(*(free_vars(v) for v in live.values()))

    if isinstance(e, Var):
        return live.get(e.name, e)

    if isinstance(e, Lambda):
        return _subst_binder(e, [p.name for p in e.params], live, value_fv,
                             lambda params, body: Lambda(tuple(params), body))

    if isinstance(e, Sum):
        return _subst_binder(e, [e.var.name], live, value_fv,
                             lambda params, body: Sum(params[0], body,
                                                      origin=e.origin))

    if isinstance(e, Let):
        # sequential scope: binding i sees bindings < i
        cur = dict(live)
        out_bindings = []
        avoid = set(value_fv) | free_vars(e)
        for var, val in e.bindings:
            new_val = substitute_many(val, cur)
            new_var = var
            if var.name in value_fv or var.name in cur:
                nn = fresh_name(var.name, avoid)
                avoid.add(nn)
                new_var = Var(nn, var.type)
                cur = dict(cur)
                cur[var.name] = new_var
            else:
                cur = {k: v for k, v in cur.items() if k != var.name}
            out_bindings.append((new_var, new_val))
        return Let(tuple(out_bindings), substitute_many(e.body, cur))

    if isinstance(e, (Var, Const, Comb)):
        return e

    return _rebuild(e, [substitute_many(c, live) for c in children(e)])


def _subst_binder(e, names, live, value_fv, make):
    inner = {k: v for k, v in live.items() if k not in names}
    if not inner:
        return e
    binders = e.params if isinstance(e, Lambda) else (e.var,)
    inner_fv = frozenset().union(*(free_vars(v) for v in inner.values()))
    rename: dict[str, Expr] = {}
    avoid = set(inner_fv) | free_vars(e.body) | set(names) | set(inner)
    new_binders = []
    for b in binders:
        if b.name in inner_fv:
            nn = fresh_name(b.name, avoid)
            avoid.add(nn)
            nb = Var(nn, b.type)
            rename[b.name] = nb
            new_binders.append(nb)
        else:
            new_binders.append(b)
    body = e.body
    if rename:
        body = substitute_many(body, rename)
    body = substitute_many(body, inner)
    return make(new_binders, body)


def _rebuild(e: Expr, kids: list[Expr]) -> Expr:
    """Rebuild a non-binding node with fresh children (same shapes)."""
    if isinstance(e, Apply):
        return Apply(kids[0], tuple(kids[1:]))
    if isinstance(e, Delta):
        return Delta(kids[0], kids[1], kids[2])
    if isinstance(e, Conj):
        return Conj(kids[0])
    if isinstance(e, PullbackOf):
        return PullbackOf(kids[0])
    if isinstance(e, Transpose):
        return Transpose(kids[0])
    if isinstance(e, Primitive):
        return Primitive(e.kind, kids[0] if kids else None, origin=e.origin)
    if isinstance(e, TupleExpr):
        return TupleExpr(tuple(kids))
    if isinstance(e, IndexArith):
        np_ = len(e.pos)
        return IndexArith(tuple(kids[:np_]), tuple(kids[np_:]), type=e.type)
    if isinstance(e, Mul):
        return Mul(tuple(kids))
    if isinstance(e, Add):
        return Add(tuple(kids))
    if isinstance(e, Lambda):
        return Lambda(e.params, kids[0])
    if isinstance(e, Sum):
        return Sum(e.var, kids[0], origin=e.origin)
    if isinstance(e, Let):
        nb = len(e.bindings)
        pairs = tuple((v, kids[i]) for i, (v, _) in enumerate(e.bindings))
        return Let(pairs, kids[nb])
    raise IRError(f"cannot rebuild {type(e).__name__}")


def substitute(e: Expr, name: str, value: Expr) -> Expr:
    """Replace free occurrences of ``name`` with ``value``.

    Raises SubstitutionTypeError when the value's type conflicts with the
    variable's recorded type at some occurrence.
    """
    declared = _occurrence_type(e, name)
    if declared is not None and value.type is not None and \
            not types_compatible(declared, value.type):
        raise SubstitutionTypeError(
            f"cannot substitute {value.type!r} value for {name}: {declared!r}")
    return substitute_many(e, {name: value})


def _occurrence_type(e: Expr, name: str) -> TypeExpr | None:
    if name not in free_vars(e):
        return None
    if isinstance(e, Var):
        return e.type if e.name == name else None
    if isinstance(e, Lambda) and any(p.name == name for p in e.params):
        return None
    if isinstance(e, Sum) and e.var.name == name:
        return None
    for c in children(e):
        t = _occurrence_type(c, name)
        if t is not None:
            return t
    return None


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------

def _spine(e: Expr):
    """Unwind curried applications: f(a)(b) -> (f, [(a,), (b,)])."""
    chains = []
    while isinstance(e, Apply):
        chains.append(e.args)
        e = e.fn
    chains.reverse()
    return e, chains


def beta_reduce(e: Expr, budget: int = DEFAULT_BETA_BUDGET) -> Expr:
    """Reduce to beta-normal form w.r.t. lambdas, combinators, primitives.

    The B combinator composes on the first argument, so a saturated
    B(f)(g)(x, rest...) steps to f(g(x), rest...). C flips:
    C(g)(x)(ys...) steps to g(ys...)(x). Opaque applications (tensor
    accesses, declared functions, pullback markers) are left in place.
    """
    fuel = [budget]

    def spend():
        fuel[0] -= 1
        if fuel[0] < 0:
            raise BetaBudgetError(f"beta reduction exceeded {budget} steps")

    def red(e: Expr) -> Expr:
        if isinstance(e, Apply):
            fn = red(e.fn)
            args = tuple(red(a) for a in e.args)
            return contract(fn, args)
        if isinstance(e, (Var, Const, Comb, Primitive)):
            if isinstance(e, Primitive) and e.operand is not None:
                return Primitive(e.kind, red(e.operand), origin=e.origin)
            return e
        if isinstance(e, Lambda):
            return Lambda(e.params, red(e.body))
        if isinstance(e, Sum):
            return Sum(e.var, red(e.body), origin=e.origin)
        if isinstance(e, Let):
            return Let(tuple((v, red(x)) for v, x in e.bindings), red(e.body))
        return _rebuild(e, [red(c) for c in children(e)])

    def contract(fn: Expr, args: tuple[Expr, ...]) -> Expr:
        if isinstance(fn, Lambda):
            if len(fn.params) != len(args):
                raise IRError(
                    f"arity mismatch: lambda of {len(fn.params)} applied "
                    f"to {len(args)} arguments")
            spend()
            mapping = {p.name: a for p, a in zip(fn.params, args)}
            return red(substitute_many(fn.body, mapping))
        if isinstance(fn, Primitive):
            step = _apply_primitive(fn, args)
            if step is None:
                return Apply(fn, args)
            spend()
            return red(step)
        head, chains = _spine(fn)
        if isinstance(head, Comb) and len(chains) == 2 and \
                len(chains[0]) == 1:
            if head.kind == "B" and len(chains[1]) == 1:
                f, g = chains[0][0], chains[1][0]
                spend()
                return red(Apply(f, (Apply(g, (args[0],)), *args[1:])))
            if head.kind == "C":
                # C(g)(a...)(x...) = g(x...)(a...)
                g, held = chains[0][0], chains[1]
                spend()
                return red(Apply(Apply(g, args), held))
        return Apply(fn, args)

    try:
        return red(e)
    except RecursionError:
        raise BetaBudgetError(
            "beta reduction exhausted the interpreter stack") from None


def _apply_primitive(p: Primitive, args: tuple[Expr, ...]) -> Expr | None:
    """One unfold step, or None when the application must stay formal."""
    if len(args) != 1:
        raise IRError(f"primitive {p.kind} applied to {len(args)} arguments")
    a = args[0]
    if p.kind == "identity":
        return a
    if p.kind == "conj":
        return Conj(a)
    if p.kind == "mul":
        return Mul((p.operand, a))
    if p.kind == "add":
        return Add((p.operand, a))
    if p.kind == "contract":
        if isinstance(a, Lambda) and len(a.params) == 1:
            return Sum(a.params[0], a.body, origin=p.origin)
        view = func_view(a.type) or _flip_view(a)
        if view is None or len(view[0]) != 1 or view[0][0] is None:
            return None
        b = Var(fresh_name("b", free_vars(a)), view[0][0])
        return Sum(b, Apply(a, (b,)), origin=p.origin)
    raise IRError(p.kind)


def _flip_view(e: Expr):
    """Argument types of a residual C(g)(x) partial application."""
    head, chains = _spine(e)
    if isinstance(head, Comb) and head.kind == "C" and len(chains) == 2 and \
            all(len(c) == 1 for c in chains) and \
            isinstance(chains[0][0], Lambda):
        g = chains[0][0]
        return tuple(p.type for p in g.params), None
    return None


def inline_lets(e: Expr) -> Expr:
    if isinstance(e, Let):
        acc: dict[str, Expr] = {}
        for var, val in e.bindings:
            acc[var.name] = substitute_many(inline_lets(val), acc)
        return substitute_many(inline_lets(e.body), acc)
    if isinstance(e, (Var, Const, Comb)):
        return e
    if isinstance(e, Lambda):
        return Lambda(e.params, inline_lets(e.body))
    if isinstance(e, Sum):
        return Sum(e.var, inline_lets(e.body), origin=e.origin)
    if isinstance(e, Primitive):
        return e if e.operand is None else \
            Primitive(e.kind, inline_lets(e.operand), origin=e.origin)
    return _rebuild(e, [inline_lets(c) for c in children(e)])


def eval_all(e: Expr, budget: int = DEFAULT_BETA_BUDGET) -> Expr:
    """Inline let bindings, then reduce to beta-normal form."""
    return beta_reduce(inline_lets(e), budget=budget)


def alpha_equiv(a: Expr, b: Expr) -> bool:
    return a.canon() == b.canon()


# ---------------------------------------------------------------------------
# Declaration context
# ---------------------------------------------------------------------------

class Context:
    """Ordered declarations: type names (domains, spaces, scalar
    abbreviations) and term variable types, in separate namespaces."""

    def __init__(self):
        self.types: dict[str, TypeExpr] = {}
        self.vars: dict[str, TypeExpr] = {}

    @classmethod
    def builtin(cls) -> "Context":
        ctx = cls()
        n = Domain("N")
        i = Domain("I")
        ctx.types["R"] = REAL
        ctx.types["C"] = COMPLEX
        ctx.types["N"] = n
        ctx.types["I"] = i
        ctx.types["RV"] = Space((n,), REAL, name="RV")
        ctx.types["CV"] = Space((n,), COMPLEX, name="CV")
        ctx.types["CM"] = Space((n, n), COMPLEX, name="CM")
        ctx.types["Her"] = Space((n, n), COMPLEX,
                                 (Symmetry((2, 1), "conj"),), name="Her")
        ctx.types["Sym"] = Space((n, n), REAL,
                                 (Symmetry((2, 1), "id"),), name="Sym")
        return ctx

    def declare_type(self, name: str, t: TypeExpr):
        if name in self.types:
            raise IRError(f"duplicate declaration of type {name}")
        self.types[name] = t

    def declare_var(self, name: str, t: TypeExpr):
        if name in self.vars:
            raise IRError(f"duplicate declaration of variable {name}")
        self.vars[name] = t

    def copy(self) -> "Context":
        out = Context()
        out.types = dict(self.types)
        out.vars = dict(self.vars)
        return out

    def domains(self) -> dict[str, Domain]:
        return {n: t for n, t in self.types.items() if isinstance(t, Domain)}


# ---------------------------------------------------------------------------
# Canonical S-expression dump
# ---------------------------------------------------------------------------

def _sexpr_type(t: TypeExpr | None) -> str:
    if t is None:
        return "?"
    if isinstance(t, Space) and t.name:
        return t.name
    if isinstance(t, Domain):
        return t.name
    if isinstance(t, ScalarType):
        return t.key()
    if isinstance(t, FuncType):
        return f"(-> ({' '.join(_sexpr_type(a) for a in t.args)}) {_sexpr_type(t.ret)})"
    if isinstance(t, Space):
        return f"(space ({' '.join(d.name for d in t.domains)}) {t.element.key()})"
    if isinstance(t, ProductType):
        return f"(prod {' '.join(_sexpr_type(x) for x in t.elements)})"
    if isinstance(t, DualSpace):
        return f"(dual {_sexpr_type(t.inner)})"
    return t.key()


def to_sexpr(e: Expr) -> str:
    """Stable canonical S-expression rendering of a term."""
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Const):
        v = e.value
        if isinstance(v, complex):
            return f"(const {v.real!r} {v.imag!r})"
        return f"(const {v!r})"
    if isinstance(e, Lambda):
        params = " ".join(f"({p.name} {_sexpr_type(p.type)})" for p in e.params)
        return f"(lam ({params}) {to_sexpr(e.body)})"
    if isinstance(e, Apply):
        return f"(app {to_sexpr(e.fn)} {' '.join(to_sexpr(a) for a in e.args)})"
    if isinstance(e, Sum):
        return f"(sum ({e.var.name} {_sexpr_type(e.var.type)}) {to_sexpr(e.body)})"
    if isinstance(e, Delta):
        return f"(delta {to_sexpr(e.lhs)} {to_sexpr(e.rhs)} {to_sexpr(e.payload)})"
    if isinstance(e, Conj):
        return f"(conj {to_sexpr(e.inner)})"
    if isinstance(e, Primitive):
        if e.operand is not None:
            return f"(prim {e.kind} {to_sexpr(e.operand)})"
        return f"(prim {e.kind})"
    if isinstance(e, Comb):
        return f"(comb {e.kind})"
    if isinstance(e, PullbackOf):
        return f"(pullback {to_sexpr(e.inner)})"
    if isinstance(e, TupleExpr):
        return f"(tuple {' '.join(to_sexpr(x) for x in e.elements)})"
    if isinstance(e, Let):
        bs = " ".join(f"({v.name} {to_sexpr(x)})" for v, x in e.bindings)
        return f"(let ({bs}) {to_sexpr(e.body)})"
    if isinstance(e, IndexArith):
        pos = " ".join(to_sexpr(a) for a in e.pos)
        neg = " ".join(to_sexpr(a) for a in e.neg)
        return f"(idx (+ {pos}) (- {neg}))"
    if isinstance(e, Mul):
        return f"(* {' '.join(to_sexpr(f) for f in e.factors)})"
    if isinstance(e, Add):
        return f"(+ {' '.join(to_sexpr(t) for t in e.terms)})"
    if isinstance(e, Transpose):
        return f"(transpose {to_sexpr(e.inner)})"
    raise IRError(f"unknown node: {type(e).__name__}")
