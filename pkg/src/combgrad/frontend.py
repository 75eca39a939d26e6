"""Parser and type checker for the tensor-functional source language.

A program is a sequence of domain and space declarations followed by one
expression, normally a closed lambda over the tensors it consumes:

    domain BZ { base = int; periodic = true }
    space Gauge { type = (N, N, BZ) -> C }

    (A::Her) -> pullback((x::CV) -> sum((i, j), x(i)' * A(i, j) * x(j)))

Types and values live in separate namespaces, so a term variable may
share its name with a space. Sum binders without annotations get their
domains inferred from the tensor slots where they appear. Index addition
and subtraction only type check on periodic domains; bare negation also
on symmetric ones.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .ir import (
    Add, Apply, COMPLEX, Comb, Conj, Const, Context, Delta, Domain, DualSpace,
    Expr, FuncType, IndexArith, IRError, Lambda, Let, Mul, Primitive,
    ProductType, PullbackOf, REAL, ScalarType, Space, Sum, Symmetry,
    Transpose, TupleExpr, TypeExpr, Var, free_vars, func_view, is_index_type,
    is_scalar_type, scalar_join, types_compatible,
)


class FrontendError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0,
                 filename: str = "<input>"):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col
        self.filename = filename

    def __str__(self) -> str:
        return f"{self.filename}:{self.line}:{self.col}: {self.message}"


class LexError(FrontendError):
    pass


class ParseError(FrontendError):
    pass


class TypecheckError(FrontendError):
    pass


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

@dataclass
class Token:
    kind: str
    value: str
    line: int
    col: int


KEYWORDS = {"domain", "space", "begin", "end", "sum", "pullback", "grad",
            "delta", "im", "true", "false"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<float>\d+\.\d*(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+)
  | (?P<int>\d+)
  | (?P<at>@[A-Za-z_][A-Za-z_0-9]*)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<dcolon>::)
  | (?P<arrow>->)
  | (?P<caret_t>\^T)
  | (?P<op>[()\[\]{},;=*+\-'])
""", re.VERBOSE)

_OP_KINDS = {"(": "LPAREN", ")": "RPAREN", "[": "LBRACKET", "]": "RBRACKET",
             "{": "LBRACE", "}": "RBRACE", ",": "COMMA", ";": "SEMI",
             "=": "EQUALS", "*": "STAR", "+": "PLUS", "-": "MINUS",
             "'": "PRIME"}


def lex(text: str, filename: str = "<input>") -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    pos = 0
    depth = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unexpected character {text[pos]!r}",
                           line, col, filename)
        kind = m.lastgroup
        value = m.group()
        if kind == "newline":
            if depth == 0:
                tokens.append(Token("NEWLINE", value, line, col))
            line += 1
            col = 1
            pos = m.end()
            continue
        if kind not in ("ws", "comment"):
            if kind == "op":
                k = _OP_KINDS[value]
                if k == "LPAREN":
                    depth += 1
                elif k == "RPAREN":
                    depth = max(0, depth - 1)
                tokens.append(Token(k, value, line, col))
            elif kind == "name":
                token_kind = "KEYWORD" if value in KEYWORDS else "NAME"
                tokens.append(Token(token_kind, value, line, col))
            else:
                tokens.append(Token(kind.upper(), value, line, col))
        col += len(value)
        pos = m.end()
    tokens.append(Token("EOF", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _GradSugar(Expr):
    """Surface-only node for grad(f); expanded during type checking."""

    def __init__(self, inner: Expr):
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "type", None)


@dataclass
class Program:
    context: Context
    body: Expr
    filename: str = "<input>"


_AT_FORMS = {"@mul": "mul", "@add": "add", "@conj": "conj",
             "@sum": "contract", "@id": "identity"}


class Parser:
    def __init__(self, tokens: list[Token], filename: str):
        self.tokens = tokens
        self.i = 0
        self.filename = filename

    # -- token plumbing -----------------------------------------------------

    def peek(self, offset: int = 0, skip_newlines: bool = True) -> Token:
        j = self.i
        seen = 0
        while True:
            t = self.tokens[min(j, len(self.tokens) - 1)]
            if skip_newlines and t.kind == "NEWLINE":
                j += 1
                continue
            if seen == offset:
                return t
            seen += 1
            j += 1

    def next(self, skip_newlines: bool = True) -> Token:
        while skip_newlines and self.tokens[self.i].kind == "NEWLINE":
            self.i += 1
        t = self.tokens[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def expect(self, kind: str, what: str | None = None) -> Token:
        t = self.next()
        if t.kind != kind:
            want = what or kind
            raise ParseError(f"expected {want}, found {t.value!r}",
                             t.line, t.col, self.filename)
        return t

    def expect_keyword(self, word: str) -> Token:
        t = self.next()
        if t.kind != "KEYWORD" or t.value != word:
            raise ParseError(f"expected '{word}', found {t.value!r}",
                             t.line, t.col, self.filename)
        return t

    def at_keyword(self, word: str) -> bool:
        t = self.peek()
        return t.kind == "KEYWORD" and t.value == word

    def pos_of(self, t: Token):
        return (t.line, t.col)

    def attach(self, e: Expr, t: Token) -> Expr:
        object.__setattr__(e, "_pos", (t.line, t.col))
        return e

    def error(self, msg: str, t: Token):
        raise ParseError(msg, t.line, t.col, self.filename)

    # -- declarations -------------------------------------------------------

    def parse_program(self, ctx: Context) -> Expr:
        while self.at_keyword("domain") or self.at_keyword("space"):
            if self.at_keyword("domain"):
                self.parse_domain_decl(ctx)
            else:
                self.parse_space_decl(ctx)
        body = self.parse_expr(ctx)
        t = self.next()
        if t.kind != "EOF":
            self.error(f"unexpected trailing input {t.value!r}", t)
        return body

    def _parse_props(self, ctx: Context) -> dict[str, object]:
        self.expect("LBRACE", "'{'")
        props: dict[str, object] = {}
        while True:
            t = self.peek(skip_newlines=False)
            if t.kind == "RBRACE":
                self.next()
                break
            if t.kind in ("SEMI", "NEWLINE"):
                self.next(skip_newlines=False)
                continue
            name_t = self.next()
            if name_t.kind not in ("NAME", "KEYWORD"):
                self.error("expected a property name", name_t)
            self.expect("EQUALS", "'='")
            props[name_t.value] = self._parse_prop_value(ctx, name_t.value)
        return props

    def _parse_prop_value(self, ctx: Context, prop: str):
        if prop == "symmetries":
            return self._parse_symmetry_list()
        if prop == "type":
            return self.parse_type(ctx)
        t = self.next()
        if t.kind == "KEYWORD" and t.value in ("true", "false"):
            return t.value == "true"
        if t.kind == "NAME":
            return t.value
        self.error(f"bad value for property {prop}", t)

    def parse_domain_decl(self, ctx: Context):
        self.expect_keyword("domain")
        name_t = self.expect("NAME", "a domain name")
        props = self._parse_props(ctx)
        base = props.pop("base", "int")
        if base != "int":
            raise ParseError(f"unsupported domain base {base!r}",
                             name_t.line, name_t.col, self.filename)
        dom = Domain(name_t.value, base="int",
                     periodic=bool(props.pop("periodic", False)),
                     symmetric=bool(props.pop("symmetric", False)),
                     contractable=bool(props.pop("contractable", True)))
        if props:
            raise ParseError(f"unknown domain properties {sorted(props)}",
                             name_t.line, name_t.col, self.filename)
        try:
            ctx.declare_type(name_t.value, dom)
        except IRError as ex:
            raise ParseError(str(ex), name_t.line, name_t.col, self.filename)

    def parse_space_decl(self, ctx: Context):
        self.expect_keyword("space")
        name_t = self.expect("NAME", "a space name")
        props = self._parse_props(ctx)
        t = props.pop("type", None)
        if t is None:
            raise ParseError("space declaration needs a type property",
                             name_t.line, name_t.col, self.filename)
        view = func_view(t)
        if view is None or not all(isinstance(d, Domain) for d in view[0]) \
                or not isinstance(view[1], ScalarType):
            raise ParseError(
                "space type must map index domains to a scalar",
                name_t.line, name_t.col, self.filename)
        syms = tuple(props.pop("symmetries", ()))
        if props:
            raise ParseError(f"unknown space properties {sorted(props)}",
                             name_t.line, name_t.col, self.filename)
        try:
            sp = Space(tuple(view[0]), view[1], syms, name=name_t.value)
            ctx.declare_type(name_t.value, sp)
        except IRError as ex:
            raise ParseError(str(ex), name_t.line, name_t.col, self.filename)

    def _parse_symmetry_list(self) -> list[Symmetry]:
        self.expect("LBRACKET", "'['")
        out = []
        while True:
            out.append(self._parse_symmetry())
            t = self.next()
            if t.kind == "RBRACKET":
                return out
            if t.kind != "COMMA":
                self.error("expected ',' or ']' in symmetry list", t)

    def _parse_symmetry(self) -> Symmetry:
        self.expect("LPAREN", "'('")
        self.expect("LPAREN", "'('")
        perm = [int(self.expect("INT", "an index position").value)]
        while self.peek().kind == "COMMA":
            self.next()
            perm.append(int(self.expect("INT", "an index position").value))
        self.expect("RPAREN", "')'")
        self.expect("SEMI", "';'")
        act_t = self.next()
        if act_t.kind != "NAME" or act_t.value not in ("id", "conj", "ineg"):
            self.error("expected a symmetry action (id, conj, ineg)", act_t)
        self.expect("RPAREN", "')'")
        try:
            return Symmetry(tuple(perm), act_t.value)
        except IRError as ex:
            raise ParseError(str(ex), act_t.line, act_t.col, self.filename)

    # -- types --------------------------------------------------------------

    def parse_type(self, ctx: Context) -> TypeExpr:
        t = self.peek()
        if t.kind == "LPAREN":
            self.next()
            args = [self.parse_type(ctx)]
            while self.peek().kind == "COMMA":
                self.next()
                args.append(self.parse_type(ctx))
            self.expect("RPAREN", "')'")
            self.expect("ARROW", "'->'")
            ret = self.parse_type(ctx)
            return FuncType(tuple(args), ret)
        name_t = self.expect("NAME", "a type name")
        resolved = ctx.types.get(name_t.value)
        if resolved is None:
            raise ParseError(f"unknown type {name_t.value}",
                             name_t.line, name_t.col, self.filename)
        return resolved

    # -- expressions ----------------------------------------------------------

    def parse_expr(self, ctx: Context) -> Expr:
        return self.parse_add(ctx)

    def parse_add(self, ctx: Context) -> Expr:
        first = self.parse_mul(ctx)
        terms = [first]
        start = self.peek(skip_newlines=False)
        while True:
            t = self.peek(skip_newlines=False)
            if t.kind == "PLUS":
                self.next()
                terms.append(self.parse_mul(ctx))
            elif t.kind == "MINUS":
                self.next()
                terms.append(self._negate(self.parse_mul(ctx)))
            else:
                break
        if len(terms) == 1:
            return first
        return self.attach(Add(tuple(terms)), start)

    def _negate(self, e: Expr) -> Expr:
        if isinstance(e, Const) and isinstance(e.value, (int, float)):
            return Const(-e.value)
        return Mul((Const(-1), e))

    def parse_mul(self, ctx: Context) -> Expr:
        first = self.parse_unary(ctx)
        factors = [first]
        start = self.peek(skip_newlines=False)
        while self.peek(skip_newlines=False).kind == "STAR":
            self.next()
            factors.append(self.parse_unary(ctx))
        if len(factors) == 1:
            return first
        return self.attach(Mul(tuple(factors)), start)

    def parse_unary(self, ctx: Context) -> Expr:
        t = self.peek()
        if t.kind == "MINUS":
            self.next()
            return self._negate(self.parse_unary(ctx))
        return self.parse_postfix(ctx)

    def parse_postfix(self, ctx: Context) -> Expr:
        e = self.parse_atom(ctx)
        while True:
            t = self.peek(skip_newlines=False)
            if t.kind == "PRIME":
                self.next()
                e = self.attach(Conj(e), t)
            elif t.kind == "CARET_T":
                self.next()
                e = self.attach(Transpose(e), t)
            elif t.kind == "LPAREN":
                self.next()
                args = [self.parse_expr(ctx)]
                while self.peek().kind == "COMMA":
                    self.next()
                    args.append(self.parse_expr(ctx))
                self.expect("RPAREN", "')'")
                e = self.attach(Apply(e, tuple(args)), t)
            else:
                return e

    def _lambda_ahead(self) -> bool:
        """At a '(' token: does an '->' follow the matching ')'?"""
        j = self.i
        while self.tokens[j].kind == "NEWLINE":
            j += 1
        if self.tokens[j].kind != "LPAREN":
            return False
        depth = 0
        while j < len(self.tokens):
            k = self.tokens[j].kind
            if k == "LPAREN":
                depth += 1
            elif k == "RPAREN":
                depth -= 1
                if depth == 0:
                    j += 1
                    while self.tokens[j].kind == "NEWLINE":
                        j += 1
                    return self.tokens[j].kind == "ARROW"
            elif k == "EOF":
                return False
            j += 1
        return False

    def parse_atom(self, ctx: Context) -> Expr:
        t = self.peek()
        if t.kind == "INT":
            self.next()
            return self.attach(Const(int(t.value)), t)
        if t.kind == "FLOAT":
            self.next()
            return self.attach(Const(float(t.value)), t)
        if t.kind == "AT":
            return self.parse_at_form(ctx)
        if t.kind == "KEYWORD":
            if t.value == "im":
                self.next()
                return self.attach(Const(1j), t)
            if t.value == "sum":
                return self.parse_sum(ctx)
            if t.value == "pullback":
                self.next()
                self.expect("LPAREN", "'('")
                inner = self.parse_expr(ctx)
                self.expect("RPAREN", "')'")
                return self.attach(PullbackOf(inner), t)
            if t.value == "grad":
                self.next()
                self.expect("LPAREN", "'('")
                inner = self.parse_expr(ctx)
                self.expect("RPAREN", "')'")
                return self.attach(_GradSugar(inner), t)
            if t.value == "delta":
                self.next()
                self.expect("LPAREN", "'('")
                lhs = self.parse_expr(ctx)
                self.expect("COMMA", "','")
                rhs = self.parse_expr(ctx)
                self.expect("COMMA", "','")
                payload = self.parse_expr(ctx)
                self.expect("RPAREN", "')'")
                return self.attach(Delta(lhs, rhs, payload), t)
            if t.value == "begin":
                return self.parse_block(ctx)
            self.error(f"unexpected keyword {t.value!r}", t)
        if t.kind == "NAME":
            self.next()
            return self.attach(Var(t.value), t)
        if t.kind == "LPAREN":
            if self._lambda_ahead():
                return self.parse_lambda(ctx)
            self.next()
            e = self.parse_expr(ctx)
            if self.peek().kind == "COMMA":
                elements = [e]
                while self.peek().kind == "COMMA":
                    self.next()
                    elements.append(self.parse_expr(ctx))
                self.expect("RPAREN", "')'")
                return self.attach(TupleExpr(tuple(elements)), t)
            self.expect("RPAREN", "')'")
            return e
        self.error(f"unexpected token {t.value!r}", t)

    def parse_at_form(self, ctx: Context) -> Expr:
        t = self.next()
        name = t.value
        if name in ("@mul", "@add"):
            self.expect("LPAREN", "'('")
            operand = self.parse_expr(ctx)
            self.expect("RPAREN", "')'")
            return self.attach(Primitive(_AT_FORMS[name], operand), t)
        if name in _AT_FORMS:
            return self.attach(Primitive(_AT_FORMS[name]), t)
        if name == "@B":
            return self.attach(Comb("B"), t)
        if name == "@C":
            return self.attach(Comb("C"), t)
        self.error(f"unknown builtin {name}", t)

    def parse_lambda(self, ctx: Context) -> Expr:
        t = self.expect("LPAREN", "'('")
        params = [self._parse_param(ctx)]
        while self.peek().kind == "COMMA":
            self.next()
            params.append(self._parse_param(ctx))
        self.expect("RPAREN", "')'")
        self.expect("ARROW", "'->'")
        body = self.parse_expr(ctx)
        return self.attach(Lambda(tuple(params), body), t)

    def _parse_param(self, ctx: Context) -> Var:
        name_t = self.expect("NAME", "a parameter name")
        self.expect("DCOLON", "'::' with a parameter type")
        return Var(name_t.value, self.parse_type(ctx))

    def parse_sum(self, ctx: Context) -> Expr:
        t = self.expect_keyword("sum")
        self.expect("LPAREN", "'('")
        binders: list[Var] = []
        if self.peek().kind == "LPAREN":
            self.next()
            binders.append(self._parse_binder(ctx))
            while self.peek().kind == "COMMA":
                self.next()
                binders.append(self._parse_binder(ctx))
            self.expect("RPAREN", "')'")
        else:
            binders.append(self._parse_binder(ctx))
        self.expect("COMMA", "','")
        body = self.parse_expr(ctx)
        self.expect("RPAREN", "')'")
        out = body
        for b in reversed(binders):
            out = self.attach(Sum(b, out, origin="user"), t)
        return out

    def _parse_binder(self, ctx: Context) -> Var:
        name_t = self.expect("NAME", "a binder name")
        if self.peek().kind == "DCOLON":
            self.next()
            return Var(name_t.value, self.parse_type(ctx))
        return Var(name_t.value)

    def parse_block(self, ctx: Context) -> Expr:
        t = self.expect_keyword("begin")
        bindings: list[tuple[Var, Expr]] = []
        result: Expr | None = None
        while True:
            nxt = self.peek()
            if nxt.kind == "KEYWORD" and nxt.value == "end":
                self.next()
                break
            if nxt.kind == "SEMI":
                self.next()
                continue
            if result is not None:
                self.error("only the last item of a block may be "
                           "a bare expression", nxt)
            if nxt.kind == "NAME" and self.peek(1).kind == "EQUALS":
                name_t = self.next()
                self.next()  # '='
                value = self.parse_expr(ctx)
                bindings.append((Var(name_t.value), value))
            else:
                result = self.parse_expr(ctx)
        if result is None:
            self.error("block must end with an expression", t)
        if not bindings:
            return result
        return self.attach(Let(tuple(bindings), result), t)


# ---------------------------------------------------------------------------
# Type checker
# ---------------------------------------------------------------------------

class Typechecker:
    def __init__(self, ctx: Context, filename: str):
        self.ctx = ctx
        self.filename = filename

    def fail(self, msg: str, node: Expr):
        line, col = getattr(node, "_pos", (0, 0))
        raise TypecheckError(msg, line, col, self.filename)

    def _keep_pos(self, new: Expr, old: Expr) -> Expr:
        pos = getattr(old, "_pos", None)
        if pos is not None:
            object.__setattr__(new, "_pos", pos)
        return new

    def check(self, e: Expr, scope: dict[str, TypeExpr]) -> Expr:
        if isinstance(e, Var):
            t = scope.get(e.name, self.ctx.vars.get(e.name))
            if t is None:
                self.fail(f"unknown variable {e.name}", e)
            return self._keep_pos(Var(e.name, t), e)

        if isinstance(e, Const):
            return e

        if isinstance(e, Conj):
            inner = self.check(e.inner, scope)
            if inner.type is not None and not is_scalar_type(inner.type) \
                    and not isinstance(inner.type, Space):
                self.fail("conjugation applies to scalars and tensors", e)
            return self._keep_pos(Conj(inner), e)

        if isinstance(e, Transpose):
            inner = self.check(e.inner, scope)
            it = inner.type
            if not (isinstance(it, Space) and it.rank in (1, 2)) and \
                    not (isinstance(it, FuncType) and len(it.args) in (1, 2)):
                self.fail("transpose applies to vectors and matrices", e)
            return self._keep_pos(Transpose(inner), e)

        if isinstance(e, Mul):
            return self.check_mul(e, scope)

        if isinstance(e, Add):
            return self.check_add(e, scope)

        if isinstance(e, Apply):
            return self.check_apply(e, scope)

        if isinstance(e, Sum):
            return self.check_sum(e, scope)

        if isinstance(e, Lambda):
            inner_scope = dict(scope)
            for p in e.params:
                if p.type is None:
                    self.fail(f"parameter {p.name} needs a type annotation", e)
                inner_scope[p.name] = p.type
            body = self.check(e.body, inner_scope)
            return self._keep_pos(Lambda(e.params, body), e)

        if isinstance(e, Let):
            inner_scope = dict(scope)
            out = []
            for var, val in e.bindings:
                tv = self.check(val, inner_scope)
                if tv.type is None:
                    self.fail(f"cannot infer a type for binding {var.name}",
                              val)
                inner_scope[var.name] = tv.type
                out.append((Var(var.name, tv.type), tv))
            body = self.check(e.body, inner_scope)
            return self._keep_pos(Let(tuple(out), body), e)

        if isinstance(e, PullbackOf):
            inner = self.check(e.inner, scope)
            view = func_view(inner.type)
            if view is None:
                self.fail("pullback of a non-function", e)
            return self._keep_pos(PullbackOf(inner), e)

        if isinstance(e, _GradSugar):
            inner = self.check(e.inner, scope)
            view = func_view(inner.type)
            if view is None or len(view[0]) != 1:
                self.fail("grad needs a one-parameter function", e)
            if not is_scalar_type(view[1]):
                self.fail("grad needs a scalar-valued function", e)
            avoid = free_vars(inner)
            name = "v" if "v" not in avoid else "v_1"
            v = Var(name, view[0][0])
            return self._keep_pos(
                Lambda((v,), Apply(PullbackOf(inner), (v, Const(1)))), e)

        if isinstance(e, TupleExpr):
            return self._keep_pos(
                TupleExpr(tuple(self.check(x, scope) for x in e.elements)), e)

        if isinstance(e, Delta):
            lhs = self.check(e.lhs, scope)
            rhs = self.check(e.rhs, scope)
            payload = self.check(e.payload, scope)
            try:
                return self._keep_pos(Delta(lhs, rhs, payload), e)
            except IRError as ex:
                self.fail(str(ex), e)

        if isinstance(e, (Primitive, Comb)):
            if isinstance(e, Primitive) and e.operand is not None:
                return self._keep_pos(
                    Primitive(e.kind, self.check(e.operand, scope)), e)
            return e

        if isinstance(e, IndexArith):
            pos = tuple(self.check(a, scope) for a in e.pos)
            neg = tuple(self.check(a, scope) for a in e.neg)
            return self._check_index_arith(pos, neg, e)

        self.fail(f"cannot type check node {type(e).__name__}", e)

    # -- products and sums ---------------------------------------------------

    def _is_index_operand(self, e: Expr) -> bool:
        if isinstance(e.type, Domain):
            return True
        if isinstance(e, Const) and isinstance(e.value, int):
            return True
        return False

    def check_mul(self, e: Mul, scope) -> Expr:
        factors = [self.check(f, scope) for f in e.factors]
        # unary negation of an index: -(b) parses as (-1) * b
        if len(factors) == 2 and isinstance(factors[0], Const) \
                and factors[0].value == -1 and isinstance(factors[1].type, Domain):
            return self._check_index_arith((), (factors[1],), e)
        for f in factors:
            if isinstance(f.type, Domain):
                self.fail("indices cannot be multiplied", e)
        if all(is_scalar_type(f.type) for f in factors):
            return self._keep_pos(Mul(tuple(factors)), e)
        return self._check_matrix_chain(factors, e)

    def _check_matrix_chain(self, factors, e) -> Expr:
        acc: TypeExpr | None = None
        elems = []
        for f in factors:
            t = f.type
            if t is None:
                self.fail("cannot infer an operand type in a product", f)
            if is_scalar_type(t):
                elems.append(t)
                continue
            base = t.inner if isinstance(t, DualSpace) else t
            view = func_view(base)
            if view is None or not all(isinstance(d, Domain) for d in view[0]):
                self.fail("products combine scalars, vectors and matrices", f)
            elems.append(view[1])
            if acc is None:
                acc = t
                continue
            acc = self._chain_step(acc, t, f)
        mul = Mul(tuple(factors))
        if acc is not None and len(elems) == len(factors):
            if isinstance(acc, DualSpace):
                object.__setattr__(mul, "type", acc)
            else:
                object.__setattr__(mul, "type", acc if not is_scalar_type(acc)
                                    else scalar_join(*elems))
        return self._keep_pos(mul, e)

    def _chain_step(self, acc: TypeExpr, t: TypeExpr, site: Expr) -> TypeExpr:
        def dims(x):
            base = x.inner if isinstance(x, DualSpace) else x
            view = func_view(base)
            return view[0], view[1]

        a_doms, a_el = dims(acc)
        b_doms, b_el = dims(t)
        el = scalar_join(a_el, b_el) or COMPLEX
        dual = isinstance(acc, DualSpace)
        if dual and len(a_doms) == 1 and len(b_doms) == 1:
            return el  # row * column
        if dual and len(a_doms) == 1 and len(b_doms) == 2:
            return DualSpace(Space((b_doms[1],), el))
        if not dual and len(a_doms) == 2 and len(b_doms) == 1:
            return Space((a_doms[0],), el)
        if not dual and len(a_doms) == 2 and len(b_doms) == 2:
            return Space((a_doms[0], b_doms[1]), el)
        self.fail("dimension mismatch in matrix product", site)

    def check_add(self, e: Add, scope) -> Expr:
        terms = [self.check(t, scope) for t in e.terms]
        indexish = [t for t in terms if self._index_atomish(t)]
        if indexish:
            if len(indexish) != len(terms):
                self.fail("cannot mix indices and values in addition", e)
            pos, neg = [], []
            for t in terms:
                if isinstance(t, IndexArith):
                    pos.extend(t.pos)
                    neg.extend(t.neg)
                elif isinstance(t, Mul) and len(t.factors) == 2 and \
                        isinstance(t.factors[0], Const) and t.factors[0].value == -1:
                    neg.append(t.factors[1])
                else:
                    pos.append(t)
            return self._check_index_arith(tuple(pos), tuple(neg), e)
        for t in terms:
            if t.type is None:
                continue
            if not is_scalar_type(t.type) and t.type != terms[0].type:
                self.fail("addition needs operands of one type", e)
        return self._keep_pos(Add(tuple(terms)), e)

    def _index_atomish(self, t: Expr) -> bool:
        if isinstance(t.type, Domain) or isinstance(t, IndexArith):
            return True
        if isinstance(t, Mul) and len(t.factors) == 2 and \
                isinstance(t.factors[0], Const) and t.factors[0].value == -1 \
                and isinstance(t.factors[1].type, Domain):
            return True
        return False

    def _check_index_arith(self, pos, neg, site) -> Expr:
        atoms = [a for a in (*pos, *neg) if not isinstance(a, Const)]
        arith = IndexArith(tuple(pos), tuple(neg))
        dom = arith.type
        n_atoms = len(arith.pos) + len(arith.neg)
        if dom is None:
            self.fail("index arithmetic needs at least one typed index", site)
        if n_atoms > 1:
            if not dom.periodic:
                self.fail("index addition requires a periodic domain", site)
            for a in atoms:
                if isinstance(a.type, Domain) and not (
                        a.type.periodic or a.type.symmetric):
                    self.fail(
                        f"index {getattr(a, 'name', '?')} on plain domain "
                        f"{a.type.name} cannot enter periodic arithmetic", site)
        else:
            if arith.neg and not (dom.periodic or dom.symmetric):
                self.fail("index negation requires a periodic or "
                          "symmetric domain", site)
        return self._keep_pos(arith, site)

    # -- application -----------------------------------------------------------

    def check_apply(self, e: Apply, scope) -> Expr:
        fn = self.check(e.fn, scope)
        args = [self.check(a, scope) for a in e.args]
        view = func_view(fn.type)
        if view is None:
            head = fn
            while isinstance(head, Apply):
                head = head.fn
            if isinstance(head, (Comb, Primitive)) or (
                    isinstance(head, PullbackOf) and fn.type is None):
                return self._keep_pos(Apply(fn, tuple(args)), e)
            self.fail("applied expression is not a function or tensor", e)
        slots, _ = view
        if len(slots) != len(args):
            self.fail(f"expected {len(slots)} arguments, got {len(args)}", e)
        for slot, arg in zip(slots, args):
            if isinstance(slot, Domain):
                if isinstance(arg, Const) and isinstance(arg.value, int):
                    continue
                at = arg.type
                if not isinstance(at, Domain):
                    self.fail("tensor index must be an index expression", arg)
                if at.name != slot.name:
                    self.fail(f"index of domain {at.name} used in a "
                              f"{slot.name} slot", arg)
            else:
                if not types_compatible(slot, arg.type):
                    self.fail(f"argument type {arg.type!r} does not fit "
                              f"parameter type {slot!r}", arg)
        return self._keep_pos(Apply(fn, tuple(args)), e)

    # -- contractions ------------------------------------------------------------

    def check_sum(self, e: Sum, scope) -> Expr:
        binder = e.var
        if binder.type is None:
            dom = self._infer_binder_domain(binder.name, e.body, scope)
            if dom is None:
                self.fail(f"cannot infer a domain for sum binder "
                          f"{binder.name}; annotate it", e)
            binder = Var(binder.name, dom)
        inner = dict(scope)
        inner[binder.name] = binder.type
        body = self.check(e.body, inner)
        if body.type is not None and not is_scalar_type(body.type):
            self.fail("sum body must be a scalar", e)
        return self._keep_pos(Sum(binder, body, origin=e.origin), e)

    def _resolve_callable_slots(self, fn: Expr, scope) -> tuple | None:
        if isinstance(fn, Var):
            t = scope.get(fn.name, self.ctx.vars.get(fn.name))
            return func_view(t)
        if isinstance(fn, Lambda):
            if all(p.type is not None for p in fn.params):
                return tuple(p.type for p in fn.params), None
        return None

    def _infer_binder_domain(self, name: str, body: Expr, scope):
        bare: list[Domain] = []
        nested: list[Domain] = []

        def walk(x: Expr, shadowed: frozenset[str]):
            if name in shadowed:
                return
            if isinstance(x, Apply):
                view = self._resolve_callable_slots(x.fn, scope)
                if view is not None:
                    for slot, arg in zip(view[0], x.args):
                        if not isinstance(slot, Domain):
                            continue
                        if isinstance(arg, Var) and arg.name == name:
                            bare.append(slot)
                        elif not isinstance(arg, Var) and any(
                                isinstance(s, Var) and s.name == name
                                for s in _scan_vars(arg)):
                            nested.append(slot)
                walk(x.fn, shadowed)
                for a in x.args:
                    walk(a, shadowed)
                return
            if isinstance(x, Lambda):
                walk(x.body, shadowed | {p.name for p in x.params})
                return
            if isinstance(x, Sum):
                walk(x.body, shadowed | {x.var.name})
                return
            if isinstance(x, Let):
                sh = shadowed
                for var, val in x.bindings:
                    walk(val, sh)
                    sh = sh | {var.name}
                walk(x.body, sh)
                return
            if isinstance(x, _GradSugar):
                walk(x.inner, shadowed)
                return
            for c in _surface_children(x):
                walk(c, shadowed)

        walk(body, frozenset())
        for pool in (bare, nested):
            names = {d.name for d in pool}
            if len(names) == 1:
                return pool[0]
            if len(names) > 1:
                self.fail(f"sum binder {name} appears in slots of different "
                          f"domains {sorted(names)}", body)
        return None


def _scan_vars(e: Expr):
    if isinstance(e, Var):
        yield e
        return
    for c in _surface_children(e):
        yield from _scan_vars(c)


def _surface_children(e: Expr):
    if isinstance(e, _GradSugar):
        return (e.inner,)
    from .ir import children
    try:
        return children(e)
    except IRError:
        return ()


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def parse_program(text: str, filename: str = "<input>",
                  context: Context | None = None) -> Program:
    """Parse and type check a full program."""
    ctx = context.copy() if context is not None else Context.builtin()
    parser = Parser(lex(text, filename), filename)
    body = parser.parse_program(ctx)
    typed = Typechecker(ctx, filename).check(body, {})
    return Program(ctx, typed, filename)


def parse_expression(text: str, filename: str = "<input>",
                     context: Context | None = None,
                     scope: dict[str, TypeExpr] | None = None) -> Expr:
    """Parse and type check a single expression (no declarations)."""
    ctx = context.copy() if context is not None else Context.builtin()
    parser = Parser(lex(text, filename), filename)
    body = parser.parse_expr(ctx)
    t = parser.next()
    if t.kind != "EOF":
        raise ParseError(f"unexpected trailing input {t.value!r}",
                         t.line, t.col, filename)
    return Typechecker(ctx, filename).check(body, dict(scope or {}))
