"""Dense numeric interpretation and finite-difference gradient checking.

This module is the independent route against which symbolic results are
validated. It interprets beta-normal terms over concrete numpy tensors
with user-chosen finite extents per index domain, and differentiates
numerically on the realified parameter vector: a complex tensor is
flattened into interleaved real and imaginary coordinates, the objective
is centrally differenced coordinate by coordinate, and the resulting
pairs are reassembled as ``g_re + 1j*g_im``. That convention matches the
symbolic gradient obtained by pulling back the unit cotangent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import (
    Add, Apply, COMPLEX, Comb, Conj, Const, Delta, Domain, Expr, IndexArith,
    Lambda, Let, Mul, Primitive, ProductType, PullbackOf, REAL, ScalarType,
    Space, Sum, Transpose, TupleExpr, TypeExpr, Var, free_vars, func_view,
    symmetry_group,
)

IMAG_TOLERANCE = 1e-9
ABS_FLOOR = 1e-8


class OracleError(Exception):
    """A term or value cannot be interpreted numerically."""


# ---------------------------------------------------------------------------
# Domains with finite extents
# ---------------------------------------------------------------------------

def domain_points(domain: Domain, extents: dict[str, int]) -> range:
    """Concrete index values for a domain under the given extents."""
    if domain.name not in extents:
        raise OracleError(f"no extent given for domain {domain.name}")
    k = extents[domain.name]
    if k <= 0:
        raise OracleError(f"extent for {domain.name} must be positive")
    if domain.symmetric:
        if k % 2 == 0:
            raise OracleError(
                f"symmetric domain {domain.name} needs an odd extent, got {k}")
        m = (k - 1) // 2
        return range(-m, m + 1)
    return range(k)


def _storage_index(domain: Domain | None, i: int, size: int) -> int:
    """Map a semantic index value to an array storage offset."""
    if domain is not None and domain.periodic:
        return i % size
    if domain is not None and domain.symmetric:
        m = (size - 1) // 2
        if not -m <= i <= m:
            raise OracleError(
                f"index {i} outside symmetric domain {domain.name} "
                f"range [-{m}, {m}]")
        return i + m
    if not 0 <= i < size:
        name = domain.name if domain is not None else "?"
        raise OracleError(f"index {i} out of range for domain {name} (0..{size - 1})")
    return i


def space_shape(space: Space, extents: dict[str, int]) -> tuple[int, ...]:
    return tuple(len(domain_points(d, extents)) for d in space.domains)


# ---------------------------------------------------------------------------
# Random inputs respecting declared symmetries
# ---------------------------------------------------------------------------

_symmetry_group = symmetry_group


def _apply_group_element(t: np.ndarray, g) -> np.ndarray:
    perm, conj, neg = g
    out = np.transpose(t, axes=perm)
    if neg:
        out = np.flip(out, axis=tuple(range(out.ndim)))
    if conj:
        out = np.conj(out)
    return out


def random_value(t: TypeExpr, extents: dict[str, int],
                 rng: np.random.Generator):
    """Random numeric value of the given type; tensors honor symmetries."""
    if isinstance(t, ScalarType):
        x = rng.standard_normal()
        if t.kind == "complex":
            return complex(x, rng.standard_normal())
        return float(x)
    if isinstance(t, Space):
        shape = space_shape(t, extents)
        base = rng.standard_normal(shape)
        if t.element.kind == "complex":
            base = base + 1j * rng.standard_normal(shape)
        else:
            base = base.astype(complex)
        group = _symmetry_group(t)
        sym = sum(_apply_group_element(base, g) for g in group) / len(group)
        if t.element.kind == "real":
            sym = sym.real.astype(complex)
        return sym
    raise OracleError(f"cannot synthesize a random value of type {t!r}")


def random_symmetric(space: Space, extents: dict[str, int],
                     seed: int = 0) -> np.ndarray:
    """Seeded random tensor projected onto its symmetry-invariant subspace."""
    return random_value(space, extents, np.random.default_rng(seed))


def check_symmetries(value: np.ndarray, space: Space, tol: float = 1e-12) -> bool:
    return all(
        np.allclose(value, _apply_group_element(value, g), atol=tol)
        for g in _symmetry_group(space))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(e: Expr, env: dict[str, object], extents: dict[str, int]):
    """Interpret a beta-normal term over concrete numeric values.

    Values are complex scalars, Python ints (indices), numpy arrays
    (tensors), tuples, or Python callables (function values). Residual
    formal structure, deltas over non-index values, contractions over
    function spaces, and unexpanded pullback markers, is rejected.
    """
    if isinstance(e, Var):
        if e.name not in env:
            raise OracleError(f"no value bound for variable {e.name}")
        return env[e.name]

    if isinstance(e, Const):
        return e.value

    if isinstance(e, Lambda):
        captured = dict(env)

        def closure(*vals, _lam=e, _env=captured):
            if len(vals) != len(_lam.params):
                raise OracleError(
                    f"function of {len(_lam.params)} arguments called "
                    f"with {len(vals)}")
            inner = dict(_env)
            for p, v in zip(_lam.params, vals):
                inner[p.name] = v
            return evaluate(_lam.body, inner, extents)

        closure.fn_type = e.type
        return closure

    if isinstance(e, Apply):
        fn = evaluate(e.fn, env, extents)
        args = [evaluate(a, env, extents) for a in e.args]
        return _call(fn, args, e, extents)

    if isinstance(e, Sum):
        dom = e.var.type
        if not isinstance(dom, Domain):
            raise OracleError(
                "cannot numerically contract over a non-index domain "
                f"(bound variable {e.var.name}: {dom!r})")
        total = 0
        inner = dict(env)
        for i in domain_points(dom, extents):
            inner[e.var.name] = i
            total = total + evaluate(e.body, inner, extents)
        return total

    if isinstance(e, Delta):
        lt = e.lhs.type
        if not (isinstance(lt, Domain) or isinstance(e.rhs.type, Domain)):
            raise OracleError(
                "residual delta over non-index values cannot be evaluated")
        lv = evaluate(e.lhs, env, extents)
        rv = evaluate(e.rhs, env, extents)
        if not isinstance(lv, (int, np.integer)) or \
                not isinstance(rv, (int, np.integer)):
            raise OracleError("delta operands did not evaluate to indices")
        dom = lt if isinstance(lt, Domain) else e.rhs.type
        if dom.periodic:
            hit = (int(lv) - int(rv)) % extents.get(dom.name, 0) == 0 \
                if dom.name in extents else lv == rv
        else:
            hit = lv == rv
        return evaluate(e.payload, env, extents) if hit else 0.0

    if isinstance(e, Conj):
        v = evaluate(e.inner, env, extents)
        if callable(v):
            raise OracleError("cannot conjugate a function value")
        return np.conj(v) if isinstance(v, np.ndarray) else \
            complex(v).conjugate()

    if isinstance(e, Mul):
        vals = [evaluate(f, env, extents) for f in e.factors]
        out = vals[0]
        for v in vals[1:]:
            if isinstance(out, np.ndarray) and isinstance(v, np.ndarray) \
                    and out.ndim >= 1 and v.ndim >= 1:
                out = out @ v
            else:
                out = out * v
        return out

    if isinstance(e, Add):
        vals = [evaluate(t, env, extents) for t in e.terms]
        out = vals[0]
        for v in vals[1:]:
            out = out + v
        return out

    if isinstance(e, IndexArith):
        total = 0
        for a in e.pos:
            total += _as_index(evaluate(a, env, extents))
        for a in e.neg:
            total -= _as_index(evaluate(a, env, extents))
        return total

    if isinstance(e, Let):
        inner = dict(env)
        for var, val in e.bindings:
            inner[var.name] = evaluate(val, inner, extents)
        return evaluate(e.body, inner, extents)

    if isinstance(e, TupleExpr):
        return tuple(evaluate(x, env, extents) for x in e.elements)

    if isinstance(e, Transpose):
        v = evaluate(e.inner, env, extents)
        if isinstance(v, np.ndarray) and v.ndim == 2:
            return v.T
        return v

    if isinstance(e, PullbackOf):
        raise OracleError(
            "unexpanded pullback marker cannot be evaluated numerically")

    if isinstance(e, Primitive):
        return _primitive_value(e, env, extents)

    if isinstance(e, Comb):
        if e.kind == "B":
            return lambda f: lambda g: lambda *xs: f(g(xs[0]), *xs[1:])
        return lambda g: lambda x: lambda *bs: g(*bs)(x)

    raise OracleError(f"cannot evaluate node {type(e).__name__}")


def _as_index(v) -> int:
    if isinstance(v, (int, np.integer)):
        return int(v)
    raise OracleError(f"expected an index value, got {v!r}")


def _call(fn, args, site: Apply, extents):
    if isinstance(fn, np.ndarray):
        if len(args) != fn.ndim:
            raise OracleError(
                f"tensor of rank {fn.ndim} accessed with {len(args)} indices")
        view = func_view(site.fn.type)
        domains = [d if isinstance(d, Domain) else None
                   for d in (view[0] if view else [None] * fn.ndim)]
        idx = tuple(
            _storage_index(d, _as_index(a), s)
            for d, a, s in zip(domains, args, fn.shape))
        v = fn[idx]
        return complex(v)
    if callable(fn):
        try:
            return fn(*args)
        except TypeError:
            out = fn
            for a in args:
                out = out(a)
            return out
    raise OracleError(f"cannot apply a value of type {type(fn).__name__}")


def _primitive_value(p: Primitive, env, extents):
    if p.kind == "identity":
        return lambda v: v
    if p.kind == "conj":
        return lambda v: np.conj(v)
    if p.kind == "mul":
        w = evaluate(p.operand, env, extents)
        return lambda v: w * v
    if p.kind == "add":
        w = evaluate(p.operand, env, extents)
        return lambda v: w + v
    if p.kind == "contract":
        def contract(v):
            if callable(v):
                v = materialize(v, None, extents)
            if isinstance(v, np.ndarray):
                return v.sum()
            raise OracleError(
                "contraction primitive applied to a non-tensor value")
        return contract
    raise OracleError(p.kind)


def materialize(value, t: TypeExpr | None, extents: dict[str, int]):
    """Force a function-over-indices value into a dense array."""
    if isinstance(value, np.ndarray) or np.isscalar(value) or \
            isinstance(value, (int, float, complex)):
        return value
    if isinstance(value, tuple):
        ts = t.elements if isinstance(t, ProductType) else [None] * len(value)
        return tuple(materialize(v, ti, extents) for v, ti in zip(value, ts))
    if callable(value):
        view = func_view(t if t is not None else getattr(value, "fn_type", None))
        if view is None:
            view = func_view(getattr(value, "fn_type", None))
        if view is None or not all(isinstance(d, Domain) for d in view[0]):
            raise OracleError(
                "cannot materialize a function value without index-typed "
                "argument domains")
        domains = [d for d in view[0]]
        grids = [domain_points(d, extents) for d in domains]
        shape = tuple(len(g) for g in grids)
        out = np.zeros(shape, dtype=complex)
        def fill(prefix, depth):
            if depth == len(grids):
                cell = value(*prefix)
                storage = tuple(
                    _storage_index(d, i, s)
                    for d, i, s in zip(domains, prefix, shape))
                out[storage] = complex(cell)
                return
            for i in grids[depth]:
                fill(prefix + (i,), depth + 1)
        fill((), 0)
        return out
    raise OracleError(f"cannot materialize value {value!r}")


# ---------------------------------------------------------------------------
# Realification and finite differences
# ---------------------------------------------------------------------------

def realify(x: np.ndarray) -> np.ndarray:
    """Flatten a complex tensor into interleaved (re, im) coordinates."""
    flat = np.asarray(x, dtype=complex).ravel()
    out = np.empty(2 * flat.size)
    out[0::2] = flat.real
    out[1::2] = flat.imag
    return out


def unrealify(xr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of realify for the given tensor shape."""
    flat = xr[0::2] + 1j * xr[1::2]
    return flat.reshape(shape)


def _require_real(v, what: str) -> float:
    c = complex(v)
    if abs(c.imag) > IMAG_TOLERANCE * max(1.0, abs(c.real)):
        raise OracleError(
            f"{what} must evaluate to a real number, got imaginary part "
            f"{c.imag:.3e}")
    return c.real


def wirtinger_fd_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a real objective of a complex tensor.

    ``f`` maps a complex array of ``x``'s shape to a real scalar. The
    result has the same shape as ``x`` with entries
    ``dF/dRe + 1j*dF/dIm``.
    """
    x = np.asarray(x, dtype=complex)
    xr = realify(x)
    g = np.empty_like(xr)
    for t in range(xr.size):
        step = np.zeros_like(xr)
        step[t] = h
        fp = _require_real(f(unrealify(xr + step, x.shape)), "objective")
        fm = _require_real(f(unrealify(xr - step, x.shape)), "objective")
        g[t] = (fp - fm) / (2 * h)
    return (g[0::2] + 1j * g[1::2]).reshape(x.shape)


def real_fd_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a real objective of a real tensor."""
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    g = np.empty_like(flat)
    for t in range(flat.size):
        step = np.zeros_like(flat)
        step[t] = h
        fp = _require_real(f((flat + step).reshape(x.shape)), "objective")
        fm = _require_real(f((flat - step).reshape(x.shape)), "objective")
        g[t] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    passed: bool
    max_rel_error: float
    trial_errors: list[float] = field(default_factory=list)
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _param_info(t: TypeExpr):
    """Classify a differentiation parameter: (is_complex, shape, space)."""
    if isinstance(t, ScalarType):
        return t.kind == "complex", (), None
    if isinstance(t, Space):
        if t.symmetries:
            raise OracleError(
                "differentiation over a symmetry-constrained space is not "
                "supported")
        return t.element.kind == "complex", None, t
    raise OracleError(f"cannot differentiate with respect to type {t!r}")


def _random_point(t: TypeExpr, extents, rng):
    is_complex, shape, space = _param_info(t)
    if space is not None:
        return random_value(space, extents, rng)
    return random_value(COMPLEX if is_complex else REAL, extents, rng)


def _fd_for_param(objective_num, point_vals, pidx, t, extents, h):
    """FD gradient in parameter ``pidx`` holding the others fixed."""
    is_complex, _, space = _param_info(t)
    x = point_vals[pidx]

    def slice_obj(v):
        vals = list(point_vals)
        vals[pidx] = v if space is not None else \
            (complex(v.reshape(())) if is_complex else float(v.reshape(())))
        return objective_num(*vals)

    if space is not None:
        if is_complex:
            return wirtinger_fd_grad(slice_obj, x, h)
        return real_fd_grad(slice_obj, np.asarray(x).real, h)
    x_arr = np.asarray([x]).reshape(())
    if is_complex:
        return complex(wirtinger_fd_grad(slice_obj, x_arr, h).reshape(()))
    return float(real_fd_grad(slice_obj, np.asarray(x_arr).real, h).reshape(()))


def _rel_error(sym, fd) -> float:
    sym_a = np.asarray(sym, dtype=complex)
    fd_a = np.asarray(fd, dtype=complex)
    if sym_a.shape != fd_a.shape:
        raise OracleError(
            f"gradient shape {sym_a.shape} does not match finite-difference "
            f"shape {fd_a.shape}")
    denom = max(float(np.max(np.abs(fd_a))) if fd_a.size else 0.0, ABS_FLOOR)
    return float(np.max(np.abs(sym_a - fd_a))) / denom


def check_gradient(objective: Lambda, gradient: Lambda,
                   var_types: dict[str, TypeExpr],
                   extents: dict[str, int],
                   trials: int = 5, tol: float = 1e-6, seed: int = 0,
                   h: float = 1e-4) -> CheckReport:
    """Validate a symbolic gradient against finite differences.

    ``objective`` and ``gradient`` are lambdas over the same parameters;
    the gradient body may be a tuple for multi-parameter objectives.
    Free variables of either term get fresh random values (honoring
    declared symmetries) per trial, drawn from ``seed + trial``.
    """
    errors: list[float] = []
    param_types = [p.type for p in objective.params]
    names = sorted((free_vars(objective) | free_vars(gradient)))
    for t in range(trials):
        rng = np.random.default_rng(seed + t)
        env: dict[str, object] = {}
        for name in names:
            if name not in var_types:
                raise OracleError(f"no declared type for free variable {name}")
            env[name] = random_value(var_types[name], extents, rng)
        points = [_random_point(pt, extents, rng) for pt in param_types]

        obj_closure = evaluate(objective, env, extents)

        def objective_num(*vals):
            return _require_real(obj_closure(*vals), "objective")

        grad_val = evaluate(gradient, env, extents)(*points)
        grads = grad_val if isinstance(grad_val, tuple) else (grad_val,)
        if len(grads) != len(param_types):
            raise OracleError(
                f"gradient produced {len(grads)} components for "
                f"{len(param_types)} parameters")
        worst = 0.0
        for pidx, pt in enumerate(param_types):
            fd = _fd_for_param(objective_num, points, pidx, pt, extents, h)
            sym = materialize(grads[pidx], None if pt is None else pt, extents)
            worst = max(worst, _rel_error(sym, fd))
        errors.append(worst)
    max_err = max(errors) if errors else float("inf")
    return CheckReport(
        passed=bool(errors) and max_err <= tol,
        max_rel_error=max_err,
        trial_errors=errors,
        message=f"max relative error {max_err:.3e} over {len(errors)} trials "
                f"(tolerance {tol:.1e})")
