"""Built-in example programs.

Each source is a complete program for ``frontend.parse_program``. They
double as regression fixtures for the tests and as inputs for the demo
scripts, covering one capability each:

QUAD     gradient of a Hermitian quadratic form over complex vectors;
PRODUCT  pullback of a product of two opaque scalar functions;
CG       line-search residual with an opaque objective kept symbolic;
HF       a four-index energy whose tensor symmetries merge the gradient;
WANNIER  a periodic, shift-symmetric spread functional.
"""

QUAD = "(A::Her) -> pullback((x::CV) -> sum((i, j), x(i)' * A(i, j) * x(j)))"

PRODUCT = "(f::(C) -> C, g::(C) -> C) -> pullback((x::C) -> f(x) * g(x))"

CG = """\
(A::Sym, r::RV, p::RV, b::RV, x::RV) -> begin
  R = (x::RV) -> sum((i, j), 0.5 * x(i) * A(i, j) * x(j)) - sum(i, x(i) * b(i));
  pullback((alpha::R, beta::R) -> R((i::N) -> x(i) + alpha * (r(i) + beta * p(i))))
end
"""

HF = """\
domain Ne { base = int }
space T { type = (N, N, N, N) -> C; symmetries = [((2, 1, 4, 3); conj), ((3, 4, 1, 2); id)] }
space Orb { type = (N, Ne) -> C }

(J::T) -> pullback((C::Orb) -> sum((i, j, p, q, r, s), C(p, i)' * C(q, i) * C(r, j)' * C(s, j) * J(p, q, r, s)))
"""

WANNIER = """\
domain BZ { base = int; periodic = true }
domain X { base = int; symmetric = true; contractable = false }
space Mmn { type = (N, N, BZ, BZ) -> C; symmetries = [((2, 1, 4, 3); conj)] }
space SV { type = (X) -> R; symmetries = [((1); ineg)] }
space Gauge { type = (N, N, BZ) -> C }

(S::Mmn, w::SV) -> pullback((U::Gauge) -> begin
  rho = (n::N, b::X) -> sum((k, p, q), U(p, n, k)' * S(p, q, k, k + b) * U(q, n, k + b));
  sum((n, b), w(b) * rho(n, b)' * rho(n, b))
end)
"""

ALL = {"quad": QUAD, "product": PRODUCT, "cg": CG, "hf": HF,
       "wannier": WANNIER}
