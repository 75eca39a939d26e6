"""Recovery of matrix and vector notation from index form.

``blaserize`` rewrites contraction patterns into whole-tensor products:
dot products, matrix-vector and matrix-matrix products, quadratic
forms, and scalar scalings of vectors. Rank stays at most two;
higher-rank contractions and anything involving index arithmetic are
left in sum form. The pass is total, idempotent, and preserves the
value of every expression.
"""
from __future__ import annotations

from .ir import (
    Add, Apply, Conj, Expr, IndexArith, Lambda, Mul, Sum, Transpose, Var,
    _rebuild, children, free_vars,
)

__all__ = ["blaserize"]


def _has_index_arith(e: Expr) -> bool:
    if isinstance(e, IndexArith):
        return True
    return any(_has_index_arith(c) for c in children(e))


def _flat_mul(factors: list[Expr]) -> Expr:
    flat: list[Expr] = []
    for f in factors:
        if isinstance(f, Mul):
            flat.extend(f.factors)
        else:
            flat.append(f)
    return flat[0] if len(flat) == 1 else Mul(tuple(flat))


def _matrix_atom(f: Expr, i: str, j: str) -> Expr | None:
    """Whole-matrix form of an access using both of the indices i, j."""
    conj = False
    if isinstance(f, Conj):
        conj, f = True, f.inner
    if not (isinstance(f, Apply) and len(f.args) == 2
            and all(isinstance(a, Var) for a in f.args)):
        return None
    ns = (f.args[0].name, f.args[1].name)
    if set(ns) != {i, j} or {i, j} & free_vars(f.fn):
        return None
    m = f.fn
    if conj:
        m = Conj(m)
    if ns == (j, i):
        m = Transpose(m)
    return m


def _devector(body: Expr, i: str) -> Expr | None:
    """Whole-vector form of a scalar body linear in accesses at index i."""
    if isinstance(body, Apply) and len(body.args) == 1 and \
            isinstance(body.args[0], Var) and body.args[0].name == i and \
            i not in free_vars(body.fn):
        return body.fn
    if isinstance(body, Conj):
        u = _devector(body.inner, i)
        return None if u is None else Conj(u)
    if isinstance(body, Add):
        parts = [_devector(t, i) for t in body.terms]
        if any(p is None for p in parts):
            return None
        return Add(tuple(parts))
    if isinstance(body, Mul):
        dep = [f for f in body.factors if i in free_vars(f)]
        if len(dep) != 1:
            return None
        rest = [f for f in body.factors if i not in free_vars(f)]
        u = _devector(dep[0], i)
        if u is None:
            u = _gemv(dep[0], i)
        if u is None:
            return None
        return _flat_mul(rest + [u])
    return _gemv(body, i)


def _gemv(body: Expr, i: str) -> Expr | None:
    """Whole-vector form of sum_j M(i,j)*v(j) seen from the free index i."""
    if not isinstance(body, Sum):
        return None
    j = body.var.name
    if j == i:
        return None
    inner = body.body
    factors = list(inner.factors) if isinstance(inner, Mul) else [inner]
    jdep = [f for f in factors if j in free_vars(f)]
    jfree = [f for f in factors if j not in free_vars(f)]
    if any(i in free_vars(f) for f in jfree):
        return None
    mats = [f for f in jdep if _matrix_atom(f, i, j) is not None]
    if len(mats) != 1:
        return None
    m = _matrix_atom(mats[0], i, j)
    vec_parts = [f for f in jdep if f is not mats[0]]
    if len(vec_parts) != 1:
        return None
    v = _devector(vec_parts[0], j)
    if v is None:
        return None
    return _flat_mul(jfree + [Mul((m, v))])


def _row(u: Expr) -> Expr:
    return Transpose(u)


def _dot(e: Sum) -> Expr | None:
    """sum_i u(i)*v(i) and rank-2 sandwiches u(i)*M(i,j)*w(j)."""
    i = e.var.name
    factors = list(e.body.factors) if isinstance(e.body, Mul) else [e.body]
    dep = [f for f in factors if i in free_vars(f)]
    rest = [f for f in factors if i not in free_vars(f)]
    if len(dep) != 2:
        return None
    sides = []
    for f in dep:
        u = _devector(f, i)
        if u is None and isinstance(f, Sum):
            u = _gemv(f, i)
        sides.append(u)
    if any(s is None for s in sides):
        return None
    return _flat_mul(rest + [Mul((_row(sides[0]), sides[1]))])


def _gemm(body: Expr, r: str, c: str) -> Expr | None:
    """Whole-matrix form of a two-index lambda body."""
    m = _matrix_atom(body, r, c)
    if m is not None:
        return m
    if isinstance(body, Add):
        parts = [_gemm(t, r, c) for t in body.terms]
        if any(p is None for p in parts):
            return None
        return Add(tuple(parts))
    if isinstance(body, Mul):
        dep = [f for f in body.factors if {r, c} & free_vars(f)]
        rest = [f for f in body.factors if not ({r, c} & free_vars(f))]
        if len(dep) != 1:
            return None
        m = _gemm(dep[0], r, c)
        if m is None:
            return None
        return _flat_mul(rest + [m])
    if isinstance(body, Sum):
        j = body.var.name
        if j in (r, c):
            return None
        inner = body.body
        factors = list(inner.factors) if isinstance(inner, Mul) else [inner]
        jfree = [f for f in factors if j not in free_vars(f)]
        jdep = [f for f in factors if j in free_vars(f)]
        if any({r, c} & free_vars(f) for f in jfree):
            return None
        if len(jdep) != 2:
            return None
        left = right = None
        for f in jdep:
            if left is None and (a := _matrix_atom(f, r, j)) is not None:
                left = a
                continue
            if right is None and (b := _matrix_atom(f, j, c)) is not None:
                right = b
        if left is None or right is None:
            return None
        return _flat_mul(jfree + [Mul((left, right))])
    return None


def _try_rewrite(e: Expr) -> Expr | None:
    if isinstance(e, Sum):
        if _has_index_arith(e):
            return None
        return _dot(e)
    if isinstance(e, Lambda):
        if _has_index_arith(e.body):
            return None
        names = [p.name for p in e.params]
        if len(e.params) == 1:
            return _devector(e.body, names[0])
        if len(e.params) == 2:
            return _gemm(e.body, names[0], names[1])
    return None


def blaserize(e: Expr) -> Expr:
    kids = [blaserize(c) for c in children(e)]
    cur = _rebuild(e, kids) if kids else e
    hit = _try_rewrite(cur)
    return cur if hit is None else hit
