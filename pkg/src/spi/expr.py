"""Lagrangian expression language and truncated Taylor jets.

Expressions are parsed from text over the variables ``tau``, ``v1..vd``,
``q1..qd`` (``v``/``q`` are accepted as aliases when d = 1) plus named
numeric parameters.  Jets are truncated multivariate Taylor expansions of
an expression at a point of R x TR^d; they supply every derivative of the
Lagrangian that vertex tensors and linearized-operator coefficients need.

Coefficients are stored scaled, ``coeff[alpha] = d^alpha f / alpha!``, in a
dense vector over the admissible multi-indices of a :class:`JetSpace`.
Coefficient values may be scalars or numpy arrays, so a single jet
evaluation can cover a whole batch of quadrature points.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ExprError",
    "ParseError",
    "DomainError",
    "SingularHessianError",
    "Expression",
    "parse",
    "evaluate",
    "JetSpace",
    "Jet",
    "jet_eval",
    "compose_jets",
    "velocity_hessian",
    "ExprLagrangian",
    "TransformedLagrangian",
]


class ExprError(ValueError):
    """Base class for expression-language errors."""


class ParseError(ExprError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class DomainError(ExprError):
    """Evaluation left the domain of an elementary function."""


class SingularHessianError(ExprError):
    """The velocity Hessian is numerically singular (non-regular point)."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Param:
    name: str
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # 'tau' | 'v' | 'q'
    index: int  # 0-based; 0 for tau


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str  # '+', '-', '*', '/', '^'
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


_FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace before reporting
            stripped = source[pos:].lstrip()
            at = len(source) - len(stripped)
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", at)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    """Recursive descent over the grammar:

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' factor)?
    unary  := '-'? atom
    atom   := number | ident | func '(' expr ')' | '(' expr ')'
    """

    def __init__(self, tokens, dimension, parameters):
        self.tokens = tokens
        self.k = 0
        self.d = dimension
        self.parameters = parameters

    def peek(self):
        return self.tokens[self.k]

    def advance(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, op):
        kind, text, pos = self.peek()
        if kind != "op" or text != op:
            raise ParseError(f"expected {op!r}", pos)
        self.advance()

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                node = BinOp(text, node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                node = BinOp(text, node, self.factor())
            else:
                return node

    def factor(self):
        node = self.unary()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            node = BinOp("^", node, self.factor())
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.atom())
        return self.atom()

    def atom(self):
        kind, text, pos = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            if text in _FUNCTIONS:
                self.expect_op("(")
                node = self.expr()
                self.expect_op(")")
                return Call(text, node)
            return self.resolve(text, pos)
        raise ParseError(f"expected a value, got {text!r}" if text else "unexpected end of input", pos)

    def resolve(self, name, pos):
        if name == "tau":
            return Var("tau", 0)
        m = re.fullmatch(r"([vq])(\d*)", name)
        if m and (m.group(2) or self.d == 1):
            idx = int(m.group(2)) if m.group(2) else 1
            if not 1 <= idx <= self.d:
                raise ParseError(
                    f"variable {name!r} out of range for dimension {self.d}", pos
                )
            return Var(m.group(1), idx - 1)
        if name in self.parameters:
            return Param(name, float(self.parameters[name]))
        raise ParseError(f"unknown identifier {name!r}", pos)


@dataclass(frozen=True)
class Expression:
    """A parsed expression together with its declared dimension."""

    root: object
    dimension: int
    source: str

    def __str__(self):
        return _print(self.root)


def parse(source, dimension, parameters=None):
    """Parse ``source`` into an :class:`Expression` over R x TR^dimension."""
    if not isinstance(source, str) or not source.strip():
        raise ParseError("empty expression", 0)
    if dimension < 1:
        raise ExprError("dimension must be a positive integer")
    params = dict(parameters or {})
    node = _Parser(_tokenize(source), dimension, params).parse()
    return Expression(node, dimension, source)


# precedence levels for printing: '+-' 1, '*/' 2, unary 3, '^' 4, atom 5
def _prec(node):
    if isinstance(node, BinOp):
        return {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def _print(node):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Param):
        return node.name
    if isinstance(node, Var):
        return "tau" if node.kind == "tau" else f"{node.kind}{node.index + 1}"
    if isinstance(node, Neg):
        inner = _print(node.arg)
        if _prec(node.arg) < 5:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.func}({_print(node.arg)})"
    if isinstance(node, BinOp):
        lp, rp = _print(node.left), _print(node.right)
        p = _prec(node)
        if node.op == "^":
            # left operand must be a bare unary/atom, exponent may chain
            if _prec(node.left) < 5 and not isinstance(node.left, Neg):
                lp = f"({lp})"
            if isinstance(node.right, BinOp) and node.right.op != "^":
                rp = f"({rp})"
            return f"{lp}^{rp}"
        if _prec(node.left) < p:
            lp = f"({lp})"
        # binary ops parse left-associative: parenthesize same-level right chains
        if _prec(node.right) <= p:
            rp = f"({rp})"
        return f"{lp}{node.op}{rp}"
    raise TypeError(f"not an AST node: {node!r}")


def _as_point(dimension, tau, v, q):
    v = np.asarray(v, dtype=float)
    q = np.asarray(q, dtype=float)
    if v.shape[0] != dimension or q.shape[0] != dimension:
        raise ExprError("point has wrong dimension")
    return np.asarray(tau, dtype=float), v, q


def evaluate(expr, tau, v, q):
    """Pointwise evaluation; tau, v, q may carry a trailing batch axis."""
    tau, v, q = _as_point(expr.dimension, tau, v, q)
    batch = np.broadcast_shapes(np.shape(tau), v.shape[1:], q.shape[1:])

    def ev(node):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Param):
            return node.value
        if isinstance(node, Var):
            if node.kind == "tau":
                return tau
            return v[node.index] if node.kind == "v" else q[node.index]
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, Call):
            return getattr(np, node.func)(ev(node.arg))
        if isinstance(node, BinOp):
            a, b = ev(node.left), ev(node.right)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            if node.op == "/":
                return a / b
            return np.power(a, b)
        raise TypeError(node)

    out = ev(expr.root)
    return np.broadcast_to(np.asarray(out, dtype=float), batch) if batch else float(out)


# ---------------------------------------------------------------------------
# Jet spaces


def _gen_indices(nvars, order, caps):
    out = []

    def rec(prefix, remaining):
        i = len(prefix)
        if i == nvars:
            out.append(tuple(prefix))
            return
        hi = min(remaining, caps[i]) if caps[i] is not None else remaining
        for k in range(hi + 1):
            rec(prefix + [k], remaining - k)

    rec([], order)
    out.sort(key=lambda a: (sum(a), a))
    return tuple(out)


class JetSpace:
    """Truncation scheme: total degree <= order, per-variable caps optional.

    Instances are cached; they own the index table and the multiplication
    table shared by every jet with the same truncation."""

    _cache = {}

    def __new__(cls, nvars, order, tau_cap=None):
        key = (nvars, order, tau_cap)
        inst = cls._cache.get(key)
        if inst is None:
            inst = super().__new__(cls)
            inst._init(nvars, order, tau_cap)
            cls._cache[key] = inst
        return inst

    def _init(self, nvars, order, tau_cap):
        self.nvars = nvars
        self.order = order
        self.tau_cap = tau_cap
        caps = [None] * nvars
        if tau_cap is not None:
            caps[0] = tau_cap
        self.indices = _gen_indices(nvars, order, caps)
        self.pos = {a: i for i, a in enumerate(self.indices)}
        self.n = len(self.indices)
        self.factorials = np.array(
            [math.prod(math.factorial(k) for k in a) for a in self.indices],
            dtype=float,
        )
        self._mul = None
        self._derivs = {}

    def _mul_table(self):
        if self._mul is None:
            pi, pj, tgt = [], [], []
            for i, a in enumerate(self.indices):
                for j, b in enumerate(self.indices):
                    if sum(a) + sum(b) > self.order:
                        continue
                    c = tuple(x + y for x, y in zip(a, b))
                    k = self.pos.get(c)
                    if k is not None:
                        pi.append(i)
                        pj.append(j)
                        tgt.append(k)
            order_ = np.argsort(np.asarray(tgt, dtype=np.intp), kind="stable")
            pi = np.asarray(pi, dtype=np.intp)[order_]
            pj = np.asarray(pj, dtype=np.intp)[order_]
            tgt = np.asarray(tgt, dtype=np.intp)[order_]
            starts = np.flatnonzero(np.r_[True, np.diff(tgt) > 0])
            self._mul = (pi, pj, tgt[starts], starts)
        return self._mul

    def deriv_map(self, var):
        """pairs (src, dst, scale) implementing d/d(var) on coefficient vectors."""
        tab = self._derivs.get(var)
        if tab is None:
            src, dst, scale = [], [], []
            for i, a in enumerate(self.indices):
                if a[var] == 0:
                    continue
                b = list(a)
                b[var] -= 1
                j = self.pos.get(tuple(b))
                if j is not None:
                    src.append(i)
                    dst.append(j)
                    scale.append(a[var])
            tab = (
                np.asarray(src, dtype=np.intp),
                np.asarray(dst, dtype=np.intp),
                np.asarray(scale, dtype=float),
            )
            self._derivs[var] = tab
        return tab


class Jet:
    """Dense truncated Taylor expansion over a :class:`JetSpace`."""

    __slots__ = ("space", "coeffs")

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = coeffs

    # -- constructors
    @staticmethod
    def constant(space, value, batch=()):
        c = np.zeros((space.n,) + batch)
        c[0] = value
        return Jet(space, c)

    @staticmethod
    def variable(space, var, value, batch=()):
        c = np.zeros((space.n,) + batch)
        c[0] = value
        e = tuple(1 if k == var else 0 for k in range(space.nvars))
        p = space.pos.get(e)
        if p is not None:
            c[p] = 1.0
        return Jet(space, c)

    # -- access
    def value(self):
        return self.coeffs[0]

    def coeff(self, alpha):
        p = self.space.pos.get(tuple(alpha))
        if p is None:
            return np.zeros(self.coeffs.shape[1:]) if self.coeffs.ndim > 1 else 0.0
        return self.coeffs[p]

    def partial(self, alpha):
        """Unscaled partial derivative d^alpha f at the expansion point."""
        p = self.space.pos.get(tuple(alpha))
        if p is None:
            return np.zeros(self.coeffs.shape[1:]) if self.coeffs.ndim > 1 else 0.0
        return self.coeffs[p] * self.space.factorials[p]

    def as_dict(self):
        return {a: self.coeffs[i] for i, a in enumerate(self.space.indices)}

    # -- arithmetic
    def _wrap(self, other):
        if isinstance(other, Jet):
            if other.space is not self.space:
                raise ExprError("jets from different spaces")
            return other
        return Jet.constant(self.space, other, self.coeffs.shape[1:])

    def __add__(self, other):
        other = self._wrap(other)
        return Jet(self.space, self.coeffs + other.coeffs)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        return Jet(self.space, self.coeffs - other.coeffs)

    def __rsub__(self, other):
        other = self._wrap(other)
        return Jet(self.space, other.coeffs - self.coeffs)

    def __neg__(self):
        return Jet(self.space, -self.coeffs)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.space, self.coeffs * other)
        if other.space is not self.space:
            raise ExprError("jets from different spaces")
        pi, pj, tgt, starts = self.space._mul_table()
        prod = self.coeffs[pi] * other.coeffs[pj]
        acc = np.add.reduceat(prod, starts, axis=0)
        out = np.zeros_like(self.coeffs)
        out[tgt] = acc
        return Jet(self.space, out)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.space, self.coeffs / other)
        return self * other._reciprocal()

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def _reciprocal(self):
        u0 = self.value()
        if np.any(u0 == 0.0):
            raise DomainError("division by an expression vanishing at the expansion point")
        n = self.space.order
        ks = np.arange(n + 1)
        series = [(-1.0) ** k / u0 ** (k + 1) for k in ks]
        return _apply_series(self, series)

    def truncated_to(self, space):
        """Project onto a smaller space (same variable list)."""
        c = np.zeros((space.n,) + self.coeffs.shape[1:])
        for i, a in enumerate(space.indices):
            p = self.space.pos.get(a)
            if p is not None:
                c[i] = self.coeffs[p]
        return Jet(space, c)

    def deriv(self, var):
        """Jet of the partial derivative with respect to variable ``var``.

        Top-degree information is necessarily lost; the result is exact to
        order (order - 1)."""
        src, dst, scale = self.space.deriv_map(var)
        out = np.zeros_like(self.coeffs)
        shape = (-1,) + (1,) * (self.coeffs.ndim - 1)
        np.add.at(out, dst, self.coeffs[src] * scale.reshape(shape))
        return Jet(self.space, out)


def _apply_series(jet, series):
    """Compose a univariate Taylor series (coeffs f^(k)(u0)/k!) with a jet."""
    w = Jet(jet.space, jet.coeffs.copy())
    w.coeffs[0] = 0.0
    batch = jet.coeffs.shape[1:]
    out = Jet.constant(jet.space, series[-1], batch)
    for c in reversed(series[:-1]):
        out = out * w
        out.coeffs[0] = out.coeffs[0] + c
    return out


def _series_exp(u0, n):
    e = np.exp(u0)
    return [e / math.factorial(k) for k in range(n + 1)]


def _series_log(u0, n):
    if np.any(u0 <= 0.0):
        raise DomainError("log of a non-positive value at the expansion point")
    out = [np.log(u0)]
    for k in range(1, n + 1):
        out.append((-1.0) ** (k - 1) / (k * u0**k))
    return out


def _series_sqrt(u0, n):
    if np.any(u0 <= 0.0):
        raise DomainError("sqrt of a non-positive value at the expansion point")
    out = []
    c = 1.0
    for k in range(n + 1):
        out.append(c * u0 ** (0.5 - k))
        c *= (0.5 - k) / (k + 1)
    return out


def _series_sin(u0, n):
    return [np.sin(u0 + k * np.pi / 2) / math.factorial(k) for k in range(n + 1)]


def _series_cos(u0, n):
    return [np.cos(u0 + k * np.pi / 2) / math.factorial(k) for k in range(n + 1)]


def _series_tanh(u0, n):
    t = [np.tanh(u0)]
    for k in range(n):
        # tanh' = 1 - tanh^2, matched coefficient by coefficient
        conv = sum(t[i] * t[k - i] for i in range(k + 1))
        t.append(((1.0 if k == 0 else 0.0) - conv) / (k + 1))
    return t


_SERIES = {
    "exp": _series_exp,
    "log": _series_log,
    "sqrt": _series_sqrt,
    "sin": _series_sin,
    "cos": _series_cos,
    "tanh": _series_tanh,
}


def _jet_pow(base, expo):
    """base ^ expo for jets; exponent must be constant unless base > 0."""
    e_val = expo.value()
    nonconst = np.any(np.abs(expo.coeffs[1:]) > 0.0)
    if not nonconst and np.all(e_val == np.round(e_val)):
        k = int(np.round(np.asarray(e_val).flat[0]))
        if np.any(e_val != k):
            nonconst = True  # batch with mixed exponents: fall through
        else:
            if k == 0:
                return Jet.constant(base.space, 1.0, base.coeffs.shape[1:])
            inv = k < 0
            k = abs(k)
            acc = None
            p = base
            while k:
                if k & 1:
                    acc = p if acc is None else acc * p
                k >>= 1
                if k:
                    p = p * p
            return acc._reciprocal() if inv else acc
    if np.any(base.value() <= 0.0):
        raise DomainError("a^b needs a constant integer b, or a > 0 at the expansion point")
    return _jet_exp_of(expo * _jet_log_of(base))


def _jet_log_of(jet):
    return _apply_series(jet, _series_log(jet.value(), jet.space.order))


def _jet_exp_of(jet):
    return _apply_series(jet, _series_exp(jet.value(), jet.space.order))


def jet_eval(expr, tau, v, q, order, tau_order=None):
    """Truncated Taylor expansion of ``expr`` at (tau, v, q).

    ``tau_order`` caps the tau-degree (None: full order).  Point entries may
    carry a trailing batch axis, in which case every coefficient does too.
    """
    if order < 0:
        raise ExprError("order must be >= 0")
    tau, v, q = _as_point(expr.dimension, tau, v, q)
    d = expr.dimension
    batch = np.broadcast_shapes(np.shape(tau), v.shape[1:], q.shape[1:])
    space = JetSpace(2 * d + 1, order, tau_order)

    def as_batch(x):
        return np.broadcast_to(np.asarray(x, dtype=float), batch) if batch else x

    def ev(node):
        if isinstance(node, Num):
            return Jet.constant(space, node.value, batch)
        if isinstance(node, Param):
            return Jet.constant(space, node.value, batch)
        if isinstance(node, Var):
            if node.kind == "tau":
                return Jet.variable(space, 0, as_batch(tau), batch)
            base = v if node.kind == "v" else q
            var = 1 + node.index if node.kind == "v" else 1 + d + node.index
            return Jet.variable(space, var, as_batch(base[node.index]), batch)
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, Call):
            u = ev(node.arg)
            return _apply_series(u, _SERIES[node.func](u.value(), order))
        if isinstance(node, BinOp):
            if node.op == "^":
                return _jet_pow(ev(node.left), ev(node.right))
            a, b = ev(node.left), ev(node.right)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            return a / b
        raise TypeError(node)

    jet = ev(expr.root)
    if not np.all(np.isfinite(jet.coeffs)):
        raise DomainError("non-finite jet coefficients")
    return jet


def compose_jets(outer, inners, space=None):
    """Substitute jets into a jet: outer(f1, ..., fm) truncated.

    ``inners[k]`` must be a jet (in the output space) whose constant term is
    the k-th coordinate of outer's expansion point.
    """
    if space is None:
        space = inners[0].space
    if len(inners) != outer.space.nvars:
        raise ExprError("wrong number of inner jets")
    batch = inners[0].coeffs.shape[1:]
    shifted = []
    for f in inners:
        w = Jet(space, f.coeffs.copy())
        w.coeffs[0] = 0.0
        shifted.append(w)
    max_deg = [0] * outer.space.nvars
    for a in outer.space.indices:
        for k, e in enumerate(a):
            max_deg[k] = max(max_deg[k], e)
    powers = []
    for k, w in enumerate(shifted):
        pk = [Jet.constant(space, 1.0, batch), w]
        for _ in range(2, max_deg[k] + 1):
            pk.append(pk[-1] * w)
        powers.append(pk)
    out = Jet.constant(space, 0.0, batch)
    for i, a in enumerate(outer.space.indices):
        c = outer.coeffs[i]
        if np.all(c == 0.0):
            continue
        term = None
        for k, e in enumerate(a):
            if e:
                term = powers[k][e] if term is None else term * powers[k][e]
        if term is None:
            out.coeffs[0] = out.coeffs[0] + c
        else:
            out = out + term * c
    return out


def velocity_hessian(jet, dimension, tol=1e-12):
    """Extract a_ij = d2 L / dv_i dv_j with its inverse and definiteness."""
    d = dimension
    a = np.empty((d, d) + jet.coeffs.shape[1:])
    for i in range(d):
        for j in range(i, d):
            alpha = [0] * jet.space.nvars
            alpha[1 + i] += 1
            alpha[1 + j] += 1
            a[i, j] = a[j, i] = jet.partial(tuple(alpha))
    amat = np.moveaxis(a, (0, 1), (-2, -1))
    det = np.linalg.det(amat)
    scale = max(np.max(np.abs(a)), 1.0)
    if np.any(np.abs(det) < tol * scale**d):
        raise SingularHessianError("velocity Hessian is singular at the expansion point")
    ainv = np.moveaxis(np.linalg.inv(amat), (-2, -1), (0, 1))
    w = np.linalg.eigvalsh(amat)
    positive_definite = bool(np.all(w > 0))
    return a, ainv, positive_definite


# ---------------------------------------------------------------------------
# Lagrangian wrappers


class ExprLagrangian:
    """Expression-backed Lagrangian L(tau, v, q)."""

    def __init__(self, expression):
        self.expression = expression
        self.dimension = expression.dimension

    @staticmethod
    def parse(source, dimension, parameters=None):
        return ExprLagrangian(parse(source, dimension, parameters))

    def value(self, tau, v, q):
        return evaluate(self.expression, tau, v, q)

    def jet(self, tau, v, q, order, tau_order=None):
        return jet_eval(self.expression, tau, v, q, order, tau_order)


class TransformedLagrangian:
    """L composed with a coordinate map: Lt(tau, v, q) = L(tau, df(q) v, f(q)).

    The map is given as d expressions in q1..qd; jets are obtained by
    composing the jet of L at the image point with jets of the map.
    """

    def __init__(self, base, map_expressions):
        self.base = base
        self.maps = list(map_expressions)
        self.dimension = base.dimension
        if len(self.maps) != self.dimension:
            raise ExprError("coordinate map needs one expression per dimension")

    def map_point(self, q):
        q = np.asarray(q, dtype=float)
        zeros = np.zeros_like(q)
        return np.stack([evaluate(f, 0.0, zeros, q) for f in self.maps])

    def map_jacobian(self, q):
        """df_i/dq_j at q (batch axis allowed)."""
        q = np.asarray(q, dtype=float)
        d = self.dimension
        batch = q.shape[1:]
        jac = np.empty((d, d) + batch)
        zeros = np.zeros_like(q)
        for i, f in enumerate(self.maps):
            jf = jet_eval(f, 0.0, zeros, q, 1, tau_order=0)
            for j in range(d):
                alpha = [0] * (2 * d + 1)
                alpha[1 + d + j] = 1
                jac[i, j] = jf.partial(tuple(alpha))
        return jac

    def value(self, tau, v, q):
        tau, v, q = _as_point(self.dimension, tau, v, q)
        fq = self.map_point(q)
        jac = self.map_jacobian(q)
        fv = np.einsum("ij...,j...->i...", jac, v)
        return self.base.value(tau, fv, fq)

    def jet(self, tau, v, q, order, tau_order=None):
        tau, v, q = _as_point(self.dimension, tau, v, q)
        d = self.dimension
        batch = np.broadcast_shapes(np.shape(tau), v.shape[1:], q.shape[1:])
        space = JetSpace(2 * d + 1, order, tau_order)
        hi = JetSpace(2 * d + 1, order + 1, tau_order)

        def bcast(x):
            return np.broadcast_to(np.asarray(x, dtype=float), batch) if batch else x

        tau_j = Jet.variable(space, 0, bcast(tau), batch)
        v_jets = [
            Jet.variable(space, 1 + i, bcast(v[i]), batch) for i in range(d)
        ]
        q_args = []
        v_args = [Jet.constant(space, 0.0, batch) for _ in range(d)]
        for i, f in enumerate(self.maps):
            f_hi = jet_eval(f, tau, v, q, order + 1, tau_order)
            q_args.append(f_hi.truncated_to(space))
            for j in range(d):
                dfij = f_hi.deriv(1 + d + j).truncated_to(space)
                v_args[i] = v_args[i] + dfij * v_jets[j]
        image_v = np.stack([np.asarray(a.value()) for a in v_args])
        image_q = np.stack([np.asarray(a.value()) for a in q_args])
        outer = self.base.jet(tau, image_v, image_q, order, tau_order)
        return compose_jets(outer, [tau_j] + v_args + q_args, space)
