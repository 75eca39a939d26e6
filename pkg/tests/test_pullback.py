import warnings

import numpy as np
import pytest

from combgrad.combinator import decompose
from combgrad.frontend import parse_expression, parse_program
from combgrad.fixtures import PRODUCT, QUAD
from combgrad.ir import (
    Add, Apply, COMPLEX, Comb, Conj, Const, Delta, Domain, FuncType, Lambda,
    Mul, Primitive, PullbackOf, REAL, Space, Sum, Symmetry, Var, alpha_equiv,
    beta_reduce, free_vars,
)
from combgrad.numeric import check_gradient, evaluate, random_value
from combgrad.pullback import (
    PullbackError, apply_b_rule, apply_c_rule, expand_pullbacks,
    primitive_pullback, pp, vdiff,
)
from combgrad.simplify import redux, symmetry_settings

N = Domain("N")
CV = Space((N,), COMPLEX, name="CV")
Her = Space((N, N), COMPLEX, (Symmetry((2, 1), "conj"),), name="Her")


class TestPrimitivePullbacks:
    def test_conj_reverses_through_a_conjugation(self):
        pb = primitive_pullback(Primitive("conj"))
        x, k = pb.params
        assert pb.body == Conj(Var(k.name, k.type))

    def test_mul_conjugates_the_fixed_operand(self):
        c = Var("c", COMPLEX)
        pb = primitive_pullback(Primitive("mul", c))
        assert pb.body == Mul((Conj(c), Var(pb.params[1].name)))

    def test_mul_binders_avoid_the_operand_names(self):
        c = Var("x", COMPLEX)
        pb = primitive_pullback(Primitive("mul", c))
        assert pb.params[0].name != "x" and pb.params[1].name != "x"

    def test_add_and_identity_pass_the_cotangent(self):
        for p in (Primitive("add", Var("c", COMPLEX)), Primitive("identity")):
            pb = primitive_pullback(p)
            assert pb.body == Var(pb.params[1].name, pb.body.type)

    def test_contract_broadcasts_the_cotangent(self):
        pb = primitive_pullback(
            Primitive("contract", type=FuncType((FuncType((N,), COMPLEX),),
                                                COMPLEX)))
        inner = pb.body
        assert isinstance(inner, Lambda) and len(inner.params) == 1
        assert inner.params[0].type == N
        assert inner.body == Var(pb.params[1].name)

    def test_every_declared_kind_has_a_pullback(self):
        operand = Var("c", COMPLEX)
        for kind in Primitive.KINDS:
            p = Primitive(kind, operand) if kind in ("mul", "add") \
                else Primitive(kind)
            assert isinstance(primitive_pullback(p), Lambda)


class TestOpaqueFunctions:
    def test_opaque_variable_stays_a_marker(self):
        f = Var("f", FuncType((COMPLEX,), COMPLEX))
        out = pp(f)
        assert out.provenance == ("opaque",)
        x, k = out.expr.params
        assert out.expr.body == Apply(PullbackOf(f), (Var(x.name, x.type),
                                                      Var(k.name, k.type)))

    def test_marker_binders_are_typed_from_the_function(self):
        f = Var("f", FuncType((CV,), REAL))
        out = pp(f)
        x, k = out.expr.params
        assert x.type == CV and k.type == REAL


class TestSequencingRule:
    def test_chain_through_an_opaque_function(self):
        # x -> f(2 * x): cotangent scales by the conjugated slope
        e = parse_expression("(f::(C) -> C) -> (x::C) -> f(2 * x)")
        out = pp(e.body)
        got = redux(out.expr)
        want = parse_expression(
            "(x::C, k::C) -> 2.0 * pullback(f)(2 * x, k)",
            scope={"f": FuncType((COMPLEX,), COMPLEX)})
        assert alpha_equiv(got, want)

    def test_capture_term_appears_when_the_function_moves(self):
        # the meet shape: g both applied and probed at the application point
        e = parse_expression(
            "(g::(C) -> C) -> g(rho(g))",
            scope={"rho": FuncType((FuncType((COMPLEX,), COMPLEX),),
                                   COMPLEX)})
        out = pp(e)
        assert "capture" in out.provenance
        body = out.expr.body
        assert isinstance(body, Add) and len(body.terms) == 2
        chain, capture = body.terms
        assert isinstance(chain, Apply)
        assert chain.fn == PullbackOf(Var(
            "rho", FuncType((FuncType((COMPLEX,), COMPLEX),), COMPLEX)))
        assert len(chain.args) == 2
        assert isinstance(capture, Lambda)
        assert isinstance(capture.body, Delta)

    def test_capture_term_degenerates_without_dependence(self):
        f = Var("f", FuncType((COMPLEX,), COMPLEX))
        x = Var("x", COMPLEX)
        k = Var("k", COMPLEX)
        g = Lambda((x,), Mul((Const(3), x)))
        out = apply_b_rule(f, g, x, k)
        assert not isinstance(out, Add)
        assert "capture" not in str(out)

    def test_numeric_agreement_for_a_composition(self):
        e = parse_expression("(x::C) -> ((3 + x * x)' * (3 + x * x))")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            grad = vdiff(e)
        obj = parse_expression("(x::C) -> ((3 + x * x)' * (3 + x * x))")
        rep = check_gradient(obj, grad, {}, {}, trials=4, tol=1e-6)
        assert rep.passed, rep.message


class TestFlipRule:
    def test_contracts_the_flipped_argument(self):
        g = parse_expression("(b::N) -> (x::C) -> x * w(b)",
                             scope={"w": Space((N,), COMPLEX, name="CVW")})
        x = Var("x", COMPLEX)
        k = Var("k", FuncType((N,), COMPLEX))
        out = apply_c_rule(g, x, k)
        assert isinstance(out, Sum)
        assert out.var.type == N
        got = redux(out)
        b = out.var
        want = Sum(b, Mul((Conj(Apply(Var("w", Space((N,), COMPLEX,
                                                     name="CVW")), (b,))),
                           Apply(k, (b,)))), origin="engine")
        assert alpha_equiv(got, redux(want))

    def test_two_index_families_contract_twice(self):
        g = parse_expression(
            "(i::N, j::N) -> (x::C) -> x * w(i, j)",
            scope={"w": Space((N, N), COMPLEX, name="CMW")})
        x = Var("x", COMPLEX)
        k = Var("k", FuncType((N, N), COMPLEX))
        out = apply_c_rule(g, x, k)
        assert isinstance(out, Sum) and isinstance(out.body, Sum)

    def test_scalar_cotangent_is_rejected(self):
        g = parse_expression("(b::N) -> (x::C) -> x")
        with pytest.raises(PullbackError):
            apply_c_rule(g, Var("x", COMPLEX), Var("k", COMPLEX))


class TestCombinatorChains:
    def test_pullback_of_a_decomposed_lambda_matches_the_direct_one(self):
        src = "(x::C) -> (2 * x)' * (2 * x)"
        direct = evaluate(pp(parse_expression(src)).expr, {}, {})
        chained = evaluate(pp(decompose(parse_expression(src))).expr, {}, {})
        rng = np.random.default_rng(4)
        for _ in range(5):
            x, k = (complex(rng.standard_normal(), rng.standard_normal())
                    for _ in range(2))
            assert abs(direct(x, k) - chained(x, k)) < 1e-12

    def test_b_rule_fires_on_a_composition_chain(self):
        scope = {"f": FuncType((COMPLEX,), COMPLEX)}
        chain = decompose(parse_expression("(x::C) -> f(2 * x)",
                                           scope=scope))
        out = pp(chain)
        assert out.provenance[0] == "b-rule"
        want = parse_expression(
            "(x::C, k::C) -> 2.0 * pullback(f)(2 * x, k)", scope=scope)
        got = redux(out.expr)
        fn = evaluate(got, {"f": lambda z: z, "<pullback>f":
                            lambda z, k: k}, {})
        assert isinstance(got.body, Mul) or isinstance(got.body, Apply)

    def test_c_rule_fires_on_a_flip_chain(self):
        lam = parse_expression("(b::N) -> (x::C) -> x * 2")
        chain = Apply(Comb("C"), (lam,))
        out = pp(chain)
        assert out.provenance[0] == "c-rule"
        assert isinstance(out.expr.body, Sum)

    def test_bare_combinator_is_rejected(self):
        with pytest.raises(PullbackError):
            pp(Comb("C"))


class TestProductRule:
    def test_two_factor_golden(self):
        prog = parse_program(PRODUCT)
        out = expand_pullbacks(prog.body)
        pb = out.body
        scope = {"f": FuncType((COMPLEX,), COMPLEX),
                 "g": FuncType((COMPLEX,), COMPLEX)}
        want = parse_expression(
            "(x::C, k::C) -> pullback(f)(x, g(x)' * k)"
            " + pullback(g)(x, f(x)' * k)", scope=scope)
        assert alpha_equiv(redux(pb), redux(want))

    def test_three_factors_give_three_summands(self):
        e = parse_expression(
            "(x::C) -> f(x) * g(x) * h(x)",
            scope={n: FuncType((COMPLEX,), COMPLEX) for n in "fgh"})
        out = pp(e)
        body = redux(out.expr).body
        assert isinstance(body, Add) and len(body.terms) == 3


class TestGradients:
    def test_quadratic_form(self):
        prog = parse_program(QUAD)
        grad = redux(vdiff(prog.body), symmetry_settings)
        want = parse_expression(
            "(A::Her) -> (x::CV) -> (d::N) -> 2.0 * sum(j, A(d, j) * x(j))")
        assert alpha_equiv(grad, want)

    def test_quadratic_form_against_finite_differences(self):
        prog = parse_program(QUAD)
        grad = vdiff(prog.body)
        obj = prog.body.body.inner
        A = prog.body.params[0]
        rep = check_gradient(obj, grad.body, {A.name: A.type}, {"N": 4},
                             trials=3, tol=1e-6)
        assert rep.passed, rep.message

    def test_real_objective_raises_no_warning(self):
        prog = parse_program(QUAD)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            vdiff(prog.body)

    def test_complex_objective_warns_and_stays_formal(self):
        e = parse_expression("pullback((x::C) -> x * x)")
        with pytest.warns(UserWarning, match="provably real"):
            vdiff(e)

    def test_gradient_of_a_conjugate_pairing(self):
        # z -> Re(c z'), written out with conjugations; gradient is c
        e = parse_expression(
            "pullback((z::C) -> 0.5 * (c * z' + c' * z))",
            scope={"c": COMPLEX})
        grad = vdiff(e)
        rng = np.random.default_rng(0)
        for _ in range(5):
            c = complex(rng.standard_normal(), rng.standard_normal())
            z = complex(rng.standard_normal(), rng.standard_normal())
            got = evaluate(grad, {"c": c}, {})(z)
            assert abs(got - c) < 1e-12

    def test_outer_lambdas_pass_through(self):
        prog = parse_program(QUAD)
        grad = vdiff(prog.body)
        assert isinstance(grad, Lambda)
        assert grad.params[0].name == "A"

    def test_index_valued_objective_is_rejected(self):
        e = parse_expression("pullback((i::N) -> i)")
        with pytest.raises(PullbackError):
            vdiff(e)

    def test_multi_parameter_objectives_need_vdiff(self):
        e = parse_expression("(x::C, y::C) -> x * y' + y * x'")
        with pytest.raises(PullbackError, match="vdiff"):
            pp(e)
        grad = vdiff(e)
        assert isinstance(grad.body, type(grad.body))
        rep = check_gradient(
            parse_expression("(x::C, y::C) -> x * y' + y * x'"), grad,
            {}, {}, trials=3, tol=1e-6)
        assert rep.passed, rep.message


class TestCotangentLinearity:
    def _pullback_fn(self):
        e = parse_expression("(x::C) -> (x' * x) * (3 + x' * x)")
        return pp(e).expr

    def test_additivity(self):
        pb = self._pullback_fn()
        fn = evaluate(pb, {}, {})
        rng = np.random.default_rng(1)
        for _ in range(5):
            x, k1, k2 = (complex(rng.standard_normal(),
                                 rng.standard_normal()) for _ in range(3))
            lhs = fn(x, k1 + k2)
            rhs = fn(x, k1) + fn(x, k2)
            assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(rhs))

    def test_real_homogeneity(self):
        pb = self._pullback_fn()
        fn = evaluate(pb, {}, {})
        rng = np.random.default_rng(2)
        for _ in range(5):
            x, k = (complex(rng.standard_normal(), rng.standard_normal())
                    for _ in range(2))
            a = float(rng.standard_normal())
            assert abs(fn(x, a * k) - a * fn(x, k)) < 1e-12


class TestMarkers:
    def test_expand_pullbacks_keeps_the_outer_shape(self):
        prog = parse_program(PRODUCT)
        out = expand_pullbacks(prog.body)
        assert isinstance(out, Lambda)
        assert [p.name for p in out.params] == ["f", "g"]
        assert isinstance(out.body, Lambda)
        assert len(out.body.params) == 2

    def test_vdiff_without_a_marker_differentiates_the_lambda(self):
        e = parse_expression("(x::RV) -> sum(i, x(i) * x(i))")
        grad = vdiff(e)
        env = {"x": np.arange(1.0, 4.0)}
        out = evaluate(grad, {}, {"N": 3})(env["x"])
        got = np.array([out(i) for i in range(3)])
        assert np.allclose(got, 2.0 * env["x"])

    def test_vdiff_rejects_non_functions(self):
        with pytest.raises(PullbackError):
            vdiff(parse_expression("1 + 2"))


class TestProvenance:
    def test_traces_are_deterministic(self):
        runs = {pp(parse_program(PRODUCT).body.body.inner).provenance
                for _ in range(3)}
        assert len(runs) == 1

    def test_table_rules_are_recorded(self):
        out = pp(parse_expression("(x::C) -> 2 * x'"))
        assert any(p.startswith("table-1:") for p in out.provenance)
