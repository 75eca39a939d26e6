import warnings

import numpy as np
import pytest

from combgrad.fixtures import ALL as FIXTURES
from combgrad.frontend import parse_expression, parse_program
from combgrad.ir import (
    Add, Apply, COMPLEX, Conj, Const, Delta, Domain, FuncType, IndexArith,
    Lambda, Mul, REAL, Space, Sum, Symmetry, Var, alpha_equiv, canon,
    node_count,
)
from combgrad.numeric import evaluate, random_value
from combgrad.render import to_text
from combgrad.simplify import (
    DEFAULT_RULES, RuleSet, canonicalize_access, fuse_delta,
    normalize_index_arith, plain_settings, redux, symmetry_settings,
)

N = Domain("N")
BZ = Domain("BZ", periodic=True)
X = Domain("X", symmetric=True, contractable=False)


def esum(v, body):
    return Sum(v, body, origin="engine")


class TestDeltaFusion:
    def test_conjugate_capture_sifts(self):
        # sum_v v' * delta(v, g(x), k)  ->  g(x)' * k
        v, k, x = Var("v", COMPLEX), Var("k", COMPLEX), Var("x", COMPLEX)
        g = Var("g", FuncType((COMPLEX,), COMPLEX))
        gx = Apply(g, (x,))
        e = esum(v, Mul((Conj(v), Delta(v, gx, k))))
        assert redux(e) == Mul((Conj(gx), k))

    def test_sifting_property(self):
        b, c, k = Var("b", N), Var("c", N), Var("k", COMPLEX)
        f = Var("f", FuncType((N,), COMPLEX))
        e = esum(b, Mul((Apply(f, (b,)), Delta(b, c, k))))
        assert redux(e) == Mul((Apply(f, (c,)), k))

    def test_fuse_delta_is_a_noop_without_the_pattern(self):
        i = Var("i", N)
        f = Var("f", FuncType((N,), COMPLEX))
        e = esum(i, Apply(f, (i,)))
        assert fuse_delta(e) is e

    def test_nested_deltas(self):
        i, j, c = Var("i", N), Var("j", N), Var("c", N)
        k = Var("k", COMPLEX)
        g = Var("g", FuncType((N,), COMPLEX))
        e = esum(i, esum(j, Mul((Delta(i, j, k), Delta(j, c, Const(1)),
                                 Apply(g, (i,))))))
        out = redux(e)
        assert out == Mul((Apply(g, (c,)), k))
        # brute force the sifting over a concrete extent
        rng = np.random.default_rng(3)
        for cval in range(4):
            env = {"c": cval, "k": complex(rng.standard_normal()),
                   "g": lambda t: (t + 1) * (t + 2) + 0.5j}
            got = evaluate(out, env, {"N": 4})
            want = evaluate(e, env, {"N": 4})
            assert abs(got - want) < 1e-12

    def test_offset_operand_is_solved_for_the_binder(self):
        # sum_k f(k) * delta(k + b, c, w)  pins  k = c - b
        k, b, c = Var("k", BZ), Var("b", BZ), Var("c", BZ)
        w = Var("w", COMPLEX)
        f = Var("f", FuncType((BZ,), COMPLEX))
        e = esum(k, Mul((Apply(f, (k,)), Delta(IndexArith((k, b)), c, w))))
        out = redux(e)
        assert out == Mul((Apply(f, (IndexArith((c,), (b,)),)), w))

    def test_enclosing_delta_does_not_block_fusion(self):
        i, p, j, q = (Var(n, N) for n in "ipjq")
        w = Var("w", COMPLEX)
        f = Var("f", FuncType((N,), COMPLEX))
        e = esum(q, Delta(i, p, Delta(q, j, Mul((Apply(f, (q,)), w)))))
        assert redux(e) == Delta(i, p, Mul((Apply(f, (j,)), w)))


class TestPlainRules:
    def test_constant_folding(self):
        x = Var("x", COMPLEX)
        assert redux(Mul((Const(2), Const(3), x))) == Mul((Const(6), x))
        assert redux(Add((Const(2), Const(3)))) == Const(5)

    def test_zero_and_identity_laws(self):
        x = Var("x", COMPLEX)
        assert redux(Mul((Const(0), x))) == Const(0)
        assert redux(Mul((Const(1), x))) == x
        assert redux(Add((x, Const(0)))) == x

    def test_like_terms_collect(self):
        x = Var("x", COMPLEX)
        out = redux(Add((x, x, Mul((Const(2), x)))))
        assert out == Mul((Const(4.0), x))

    def test_cancellation_to_zero(self):
        x = Var("x", COMPLEX)
        out = redux(Add((x, Mul((Const(-1), x)))))
        assert out == Const(0)

    def test_conjugation_laws(self):
        x = Var("x", COMPLEX)
        r = Var("r", REAL)
        assert redux(Conj(Conj(x))) == x
        assert redux(Conj(r)) == r
        assert redux(Conj(Const(complex(1, 2)))) == Const(complex(1, -2))
        out = redux(Conj(Mul((Conj(x), Var("y", COMPLEX)))))
        assert out == Mul((Conj(Var("y", COMPLEX)), x))

    def test_delta_on_literals(self):
        k = Var("k", COMPLEX)
        assert redux(Delta(Const(2), Const(2), k)) == k
        assert redux(Delta(Const(2), Const(3), k)) == Const(0)

    def test_sum_of_zero_vanishes(self):
        i = Var("i", N)
        assert redux(esum(i, Mul((Const(0), Apply(
            Var("f", FuncType((N,), COMPLEX)), (i,)))))) == Const(0)

    def test_sum_distributes_and_products_of_sums_join(self):
        i, j = Var("i", N), Var("j", N)
        f = Var("f", FuncType((N,), COMPLEX))
        e = Mul((esum(i, Apply(f, (i,))), esum(j, Apply(f, (j,)))))
        out = redux(e)
        assert out == esum(i, esum(j, Mul((Apply(f, (i,)), Apply(f, (j,))))))

    def test_scalar_factor_moves_into_the_contraction(self):
        i = Var("i", N)
        a = Var("a", COMPLEX)
        f = Var("f", FuncType((N,), COMPLEX))
        out = redux(Mul((a, esum(i, Apply(f, (i,))))))
        assert out == esum(i, Mul((Apply(f, (i,)), a)))

    def test_residual_beta_redexes_reduce(self):
        e = parse_expression("((x::C) -> x * x)(3)")
        assert redux(e) == Const(9)

    def test_pointwise_function_sum(self):
        f = parse_expression("(x::C) -> x * 2")
        g = parse_expression("(x::C) -> x * 3")
        out = redux(Add((f, g)))
        assert alpha_equiv(out, parse_expression("(x::C) -> 5.0 * x"))


class TestIndexArith:
    def test_offsets_cancel(self):
        k, b = Var("k", BZ), Var("b", BZ)
        assert normalize_index_arith(IndexArith((k, b), (b,))) == k

    def test_uniform_shift(self):
        FBZ = Space((BZ,), COMPLEX, name="FBZ")
        k, b = Var("k", BZ), Var("b", BZ)
        f = Var("f", FBZ)
        e = Sum(k, Apply(f, (IndexArith((k, b)),)))
        out = normalize_index_arith(e)
        assert out == Sum(k, Apply(f, (k,)))
        rng = np.random.default_rng(11)
        env = {"f": random_value(FBZ, {"BZ": 5}, rng)}
        for bval in range(5):
            got = evaluate(out, env, {"BZ": 5})
            want = evaluate(e, dict(env, b=bval), {"BZ": 5})
            assert abs(got - want) < 1e-12

    def test_mixed_spelling_of_the_same_offset_unifies(self):
        FBZ = Space((BZ, BZ), COMPLEX, name="FBZ2")
        k, b = Var("k", BZ), Var("b", BZ)
        f = Var("f", FBZ)
        e1 = Sum(k, Apply(f, (IndexArith((b, k)), IndexArith((k, b)))))
        e2 = Sum(k, Apply(f, (IndexArith((k, b)), IndexArith((b, k)))))
        assert redux(e1) == redux(e2)

    def test_shift_skipped_when_occurrences_differ(self):
        FBZ = Space((BZ, BZ), COMPLEX, name="FBZ3")
        k, b = Var("k", BZ), Var("b", BZ)
        f = Var("f", FBZ)
        e = Sum(k, Apply(f, (k, IndexArith((k, b)))))
        # atoms reorder but no reindexing happens (k also occurs bare)
        assert normalize_index_arith(e) == Sum(
            k, Apply(f, (k, IndexArith((b, k)))))


HFT = Space((N, N, N, N), COMPLEX,
            (Symmetry((2, 1, 4, 3), "conj"), Symmetry((3, 4, 1, 2), "id")),
            name="T")
SV = Space((X,), REAL, (Symmetry((1,), "ineg"),), name="SV")


class TestCanonicalizeAccess:
    def test_hermitian_swap(self):
        Her = Space((N, N), COMPLEX, (Symmetry((2, 1), "conj"),), name="Her")
        A, i, j = Var("A", Her), Var("i", N), Var("j", N)
        out = canonicalize_access(Apply(A, (j, i)))
        assert out == Conj(Apply(A, (i, j)))

    def test_four_index_orbit(self):
        J = Var("J", HFT)
        p, q, r, s = (Var(n, N) for n in "pqrs")
        out = canonicalize_access(Conj(Apply(J, (q, p, s, r))))
        assert out == Apply(J, (p, q, r, s))

    def test_even_vector_negation(self):
        w, b = Var("w", SV), Var("b", X)
        out = canonicalize_access(Apply(w, (IndexArith((), (b,)),)))
        assert out == Apply(w, (b,))


class TestSymmetryMerge:
    def test_quadratic_terms_merge_with_coefficient_two(self):
        Her = Space((N, N), COMPLEX, (Symmetry((2, 1), "conj"),), name="Her")
        CV = Space((N,), COMPLEX, name="CV")
        A, x, a = Var("A", Her), Var("x", CV), Var("a", N)
        i, j = Var("i", N), Var("j", N)
        t1 = esum(j, Mul((Apply(A, (a, j)), Apply(x, (j,)))))
        t2 = esum(i, Mul((Conj(Apply(A, (i, a))), Apply(x, (i,)))))
        out = redux(Add((t1, t2)), symmetry_settings)
        assert alpha_equiv(
            out, Mul((Const(2.0), esum(j, Mul((Apply(A, (a, j)),
                                               Apply(x, (j,))))))))

    def test_plain_settings_do_not_merge_symmetric_terms(self):
        Her = Space((N, N), COMPLEX, (Symmetry((2, 1), "conj"),), name="Her")
        CV = Space((N,), COMPLEX, name="CV")
        A, x, a = Var("A", Her), Var("x", CV), Var("a", N)
        i, j = Var("i", N), Var("j", N)
        t1 = esum(j, Mul((Apply(A, (a, j)), Apply(x, (j,)))))
        t2 = esum(i, Mul((Conj(Apply(A, (i, a))), Apply(x, (i,)))))
        out = redux(Add((t1, t2)), plain_settings)
        assert isinstance(out, Add) and len(out.terms) == 2

    def _hf_gradient_terms(self):
        J, C = Var("J", HFT), Var("C", Space((N, Domain("Ne")), COMPLEX,
                                             name="Orb"))
        Ne = C.type.domains[1]
        a, b = Var("a", N), Var("b", Ne)
        p, q, r, s = (Var(n, N) for n in "pqrs")
        jj, ii = Var("j", Ne), Var("i", Ne)
        acc = lambda T, *idx: Apply(T, idx)
        t1 = esum(jj, esum(q, esum(r, esum(s, Mul((
            acc(C, q, b), Conj(acc(C, r, jj)), acc(C, s, jj),
            acc(J, a, q, r, s)))))))
        t2 = esum(jj, esum(p, esum(r, esum(s, Mul((
            acc(C, p, b), acc(C, r, jj), Conj(acc(C, s, jj)),
            Conj(acc(J, p, a, r, s))))))))
        t3 = esum(ii, esum(p, esum(q, esum(s, Mul((
            Conj(acc(C, p, ii)), acc(C, q, ii), acc(C, s, b),
            acc(J, p, q, a, s)))))))
        t4 = esum(ii, esum(p, esum(q, esum(r, Mul((
            acc(C, p, ii), Conj(acc(C, q, ii)), acc(C, r, b),
            Conj(acc(J, p, q, r, a))))))))
        return J, C, a, b, (t1, t2, t3, t4)

    def test_hf_terms_merge_with_coefficient_four(self):
        J, C, a, b, terms = self._hf_gradient_terms()
        out = redux(Add(terms), symmetry_settings)
        assert isinstance(out, Mul)
        assert out.factors[0] == Const(4.0)
        assert isinstance(out.factors[1], Sum)

    def test_hf_merge_preserves_value(self):
        J, C, a, b, terms = self._hf_gradient_terms()
        e = Add(terms)
        out = redux(e, symmetry_settings)
        rng = np.random.default_rng(5)
        ext = {"N": 3, "Ne": 2}
        vj = random_value(J.type, ext, rng)
        vc = random_value(C.type, ext, rng)
        for av in range(3):
            for bv in range(2):
                env = {"J": vj, "C": vc, "a": av, "b": bv}
                want = evaluate(e, env, ext)
                got = evaluate(out, env, ext)
                assert abs(got - want) < 1e-10 * max(1.0, abs(want))

    def test_shift_and_negation_merge(self):
        # periodic/symmetric relabelings let conjugate contributions fuse
        Mmn = Space((N, N, BZ, BZ), COMPLEX,
                    (Symmetry((2, 1, 4, 3), "conj"),), name="Mmn")
        Gauge = Space((N, N, BZ), COMPLEX, name="Gauge")
        S, w, U = Var("S", Mmn), Var("w", SV), Var("U", Gauge)
        t, m, kap = Var("t", N), Var("m", N), Var("kap", BZ)
        b = Var("b", X)
        q, p = Var("q", N), Var("p", N)
        k2, p2, q2 = Var("k2", BZ), Var("p2", N), Var("q2", N)
        acc = lambda T, *idx: Apply(T, idx)

        bodyA = Mul((
            acc(w, b), acc(U, p2, m, k2),
            Conj(acc(S, p2, q2, k2, IndexArith((k2, b)))),
            Conj(acc(U, q2, m, IndexArith((k2, b)))),
            acc(S, t, q, kap, IndexArith((kap, b))),
            acc(U, q, m, IndexArith((kap, b)))))
        termA = Sum(b, esum(q, esum(k2, esum(p2, esum(q2, bodyA)))))

        bodyB = Mul((
            acc(w, b), acc(U, p, m, IndexArith((kap,), (b,))),
            Conj(acc(S, p, t, IndexArith((kap,), (b,)), kap)),
            Conj(acc(U, p2, m, k2)),
            acc(S, p2, q2, k2, IndexArith((k2, b))),
            acc(U, q2, m, IndexArith((k2, b)))))
        termB = Sum(b, esum(p, esum(k2, esum(p2, esum(q2, bodyB)))))

        e = Add((termA, termB))
        out = redux(e, symmetry_settings)
        assert isinstance(out, Mul) and out.factors[0] == Const(2.0)

        rng = np.random.default_rng(9)
        ext = {"N": 2, "BZ": 3, "X": 5}
        env = {"S": random_value(Mmn, ext, rng),
               "w": random_value(SV, ext, rng),
               "U": random_value(Gauge, ext, rng),
               "m": 1, "t": 0, "kap": 2}
        want = evaluate(e, env, ext)
        got = evaluate(out, env, ext)
        assert abs(got - want) < 1e-10 * max(1.0, abs(want))


class TestReduxEngine:
    def test_idempotent_on_merged_output(self):
        Her = Space((N, N), COMPLEX, (Symmetry((2, 1), "conj"),), name="Her")
        CV = Space((N,), COMPLEX, name="CV")
        A, x, a = Var("A", Her), Var("x", CV), Var("a", N)
        i, j = Var("i", N), Var("j", N)
        e = Add((esum(j, Mul((Apply(A, (a, j)), Apply(x, (j,))))),
                 esum(i, Mul((Conj(Apply(A, (i, a))), Apply(x, (i,)))))))
        once = redux(e, symmetry_settings)
        twice = redux(once, symmetry_settings)
        assert once == twice

    def test_fixtures_reach_a_fixpoint_quietly(self):
        for name, src in FIXTURES.items():
            body = parse_program(src).body
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                out = redux(body, plain_settings)
            assert node_count(out) <= node_count(body) + 2, name

    def test_rule_order_permutations_agree_on_fixtures(self):
        orders = [
            DEFAULT_RULES,
            tuple(reversed(DEFAULT_RULES)),
            ("delta", "sum", "mul", "add", "beta", "conj", "arith"),
            ("add", "mul", "conj", "beta", "arith", "sum", "delta"),
        ]
        for name, src in FIXTURES.items():
            body = parse_program(src).body
            outs = [redux(body, RuleSet(o)) for o in orders]
            assert all(alpha_equiv(o, outs[0]) for o in outs[1:]), name

    def test_exhausted_budget_warns_and_returns(self):
        x = Var("x", COMPLEX)
        e = Add((x, x))
        with pytest.warns(UserWarning):
            out = redux(e, RuleSet(DEFAULT_RULES, max_passes=0))
        assert out == e


def _soundness_cases():
    f = Var("f", FuncType((N,), COMPLEX))
    i, j, c = Var("i", N), Var("j", N), Var("c", N)
    x, y = Var("x", COMPLEX), Var("y", COMPLEX)
    k, b = Var("k", BZ), Var("b", BZ)
    fb = Var("fb", Space((BZ,), COMPLEX, name="VB"))
    return [
        esum(i, Mul((Apply(f, (i,)), Delta(i, c, x)))),
        esum(i, esum(j, Mul((Delta(i, j, x), Apply(f, (i,)),
                             Apply(f, (j,)))))),
        Mul((Const(2), x, Const(0.5), y)),
        Add((x, Mul((Const(-1), x)), y)),
        Conj(Mul((x, Conj(y)))),
        Conj(Add((x, Const(2j)))),
        Mul((x, esum(i, Apply(f, (i,))))),
        Sum(k, Apply(fb, (IndexArith((k, b)),))),
        Apply(Lambda((Var("t", COMPLEX),), Mul((Var("t", COMPLEX), y))),
              (Add((x, y)),)),
    ]


class TestSoundness:
    def test_rewrites_preserve_value(self):
        rng = np.random.default_rng(17)
        ext = {"N": 3, "BZ": 4}
        for case in _soundness_cases():
            out = redux(case)
            for _ in range(5):
                arr = rng.standard_normal(3) + 1j * rng.standard_normal(3)
                env = {
                    "f": lambda t, _a=arr: _a[t],
                    "fb": random_value(Space((BZ,), COMPLEX, name="VB"),
                                       ext, rng),
                    "c": int(rng.integers(0, 3)),
                    "b": int(rng.integers(0, 4)),
                    "x": complex(rng.standard_normal(),
                                 rng.standard_normal()),
                    "y": complex(rng.standard_normal(),
                                 rng.standard_normal()),
                }
                want = evaluate(case, env, ext)
                got = evaluate(out, env, ext)
                assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
