"""Meromorphic expressions: parsing, chart-aware jet evaluation, iteration.

Grammar (standard precedence)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-' | '+') factor | atom ('^' int)?
    atom   := number | 'i' | 'pi' | 'z' | func '(' expr ')' | '(' expr ')'

Numbers may carry an ``i`` suffix (``2.5i``) for imaginary literals.

Evaluation is forward-mode (value, derivative) over numpy arrays. Every node
result lives in one of two charts per element: the identity chart stores
(f, f'), the reciprocal chart stores (1/f, (1/f)'). After each node the
element is re-charted so the stored value has modulus <= 1, which keeps
evaluation finite through poles.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sphere import CHART_SWITCH, Chart, Jet

# |1/f| below this counts as having reached infinity.
POLE_EPS = 1e-10
# |1/f| below this at a declared pole counts as a numerical pole witness.
POLE_WITNESS = 1e-6
# beyond this modulus sin/cos switch to exponential forms that cannot overflow
_TRIG_SWITCH = 20.0

FUNCTIONS = ("exp", "sin", "cos", "tan")


# --------------------------------------------------------------------------
# errors


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnbalancedParen(ParseError):
    pass


class UnknownFunction(ParseError):
    pass


class EmptyInput(ParseError):
    pass


class NumericalOverflowBothCharts(ExprError):
    pass


class OrbitHitsPole(ExprError):
    def __init__(self, step: int):
        super().__init__(f"orbit reaches a pole at step {step}")
        self.step = step


class PoleNotWitnessed(ExprError):
    def __init__(self, pole: complex, residual: float):
        super().__init__(f"declared pole {pole} not witnessed (|1/f| = {residual:.3g})")
        self.pole = pole
        self.residual = residual


# --------------------------------------------------------------------------
# expression tree


class Expr:
    """Base class of expression nodes (immutable)."""

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Const(Expr):
    value: complex


@dataclass(frozen=True)
class Var(Expr):
    pass


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Exp(Expr):
    arg: Expr


@dataclass(frozen=True)
class Sin(Expr):
    arg: Expr


@dataclass(frozen=True)
class Cos(Expr):
    arg: Expr


@dataclass(frozen=True)
class Tan(Expr):
    arg: Expr


_FUNC_NODES = {"exp": Exp, "sin": Sin, "cos": Cos, "tan": Tan}
_BINARY_SYMBOL = {Add: "+", Sub: "-", Mul: "*", Div: "/"}

MeromorphicExpr = Expr


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?i?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


@dataclass
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.open_parens: list[int] = []

    @property
    def tok(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect_close(self) -> None:
        if self.tok.kind == "op" and self.tok.text == ")":
            self.advance()
            self.open_parens.pop()
            return
        if self.tok.kind == "end":
            raise UnbalancedParen("missing ')'", self.tok.offset)
        raise ParseError(f"expected ')' but found {self.tok.text!r}", self.tok.offset)

    def parse(self) -> Expr:
        if self.tok.kind == "end":
            raise EmptyInput("empty expression", 0)
        node = self.expr()
        if self.tok.kind != "end":
            if self.tok.text == ")":
                raise UnbalancedParen("unmatched ')'", self.tok.offset)
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            rhs = self.factor()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def factor(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            inner = self.factor()
            return Neg(inner) if op == "-" else inner
        node = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            sign = 1
            if self.tok.kind == "op" and self.tok.text in "+-":
                sign = -1 if self.advance().text == "-" else 1
            t = self.advance()
            if t.kind != "num" or not t.text.isdigit():
                raise ParseError("exponent must be an integer literal", t.offset)
            node = Pow(node, sign * int(t.text))
        return node

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            if t.text.endswith("i"):
                return Const(complex(0.0, float(t.text[:-1])))
            return Const(complex(float(t.text), 0.0))
        if t.kind == "name":
            self.advance()
            name = t.text
            if name == "z":
                return Var()
            if name == "i":
                return Const(1j)
            if name == "pi":
                return Const(complex(math.pi, 0.0))
            if name not in _FUNC_NODES:
                raise UnknownFunction(f"unknown function or symbol {name!r}", t.offset)
            if not (self.tok.kind == "op" and self.tok.text == "("):
                raise ParseError(f"expected '(' after {name}", self.tok.offset)
            self.open_parens.append(self.advance().offset)
            arg = self.expr()
            self.expect_close()
            return _FUNC_NODES[name](arg)
        if t.kind == "op" and t.text == "(":
            self.open_parens.append(self.advance().offset)
            node = self.expr()
            self.expect_close()
            return node
        if t.kind == "end":
            if self.open_parens:
                raise UnbalancedParen("missing ')'", t.offset)
            raise ParseError("unexpected end of input", t.offset)
        if t.text == ")":
            raise UnbalancedParen("unmatched ')'", t.offset)
        raise ParseError(f"unexpected {t.text!r}", t.offset)


def parse(text: str) -> Expr:
    """Parse expression text into an immutable tree."""
    return _Parser(text).parse()


def _const_text(c: complex) -> str:
    if c.imag == 0.0 and c.real >= 0.0:
        return repr(c.real)
    if c.real == 0.0 and c.imag >= 0.0:
        return repr(c.imag) + "i"
    # not produced by the parser; printed as an equivalent sum
    re_part = repr(c.real) if c.real >= 0 else f"(-{repr(-c.real)})"
    im_part = repr(abs(c.imag)) + "i"
    return f"({re_part}{'+' if c.imag >= 0 else '-'}{im_part})"


def to_text(e: Expr) -> str:
    """Fully parenthesised text that parses back to the same tree."""
    if isinstance(e, Const):
        return _const_text(e.value)
    if isinstance(e, Var):
        return "z"
    if isinstance(e, Neg):
        return f"(-{to_text(e.arg)})"
    if isinstance(e, Pow):
        return f"({to_text(e.base)})^{e.exponent}" if e.exponent >= 0 else f"({to_text(e.base)})^-{-e.exponent}"
    if type(e) in _BINARY_SYMBOL:
        return f"({to_text(e.left)}{_BINARY_SYMBOL[type(e)]}{to_text(e.right)})"
    for name, cls in _FUNC_NODES.items():
        if isinstance(e, cls):
            return f"{name}({to_text(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


# --------------------------------------------------------------------------
# vectorized chart-aware jets
#
# An array jet is a triple (rec, val, der): rec marks elements stored in the
# reciprocal chart.


def _normalize(rec, val, der):
    flip = np.abs(val) > CHART_SWITCH
    if not flip.any():
        return rec, val, der
    with np.errstate(all="ignore"):
        safe = np.where(flip, val, 1.0)
        val2 = np.where(flip, 1.0 / safe, val)
        der2 = np.where(flip, -der / (safe * safe), der)
    return rec ^ flip, val2, der2


def _identity_form(rec, val, der):
    """(f, f') in the identity chart; infinite where the jet sits on a pole."""
    with np.errstate(all="ignore"):
        safe = np.where(rec, val, 1.0)
        f = np.where(rec, 1.0 / safe, val)
        df = np.where(rec, -der / (safe * safe), der)
    return f, df


def _add(a, b):
    ra, va, da = a
    rb, vb, db = b
    with np.errstate(all="ignore"):
        # identity + identity
        ii_v, ii_d = va + vb, da + db
        # identity A + reciprocal wb (and the mirrored case)
        def mixed(A, dA, w, dw):
            den = 1.0 + A * w
            use_rec = np.abs(den) >= np.abs(w)
            den_s = np.where(use_rec, den, 1.0)
            w_s = np.where(use_rec, 1.0, w)
            rv = w / den_s
            rd = (dw - w * w * dA) / (den_s * den_s)
            iv = A + 1.0 / w_s
            idd = dA - dw / (w_s * w_s)
            return use_rec, np.where(use_rec, rv, iv), np.where(use_rec, rd, idd)

        ir_r, ir_v, ir_d = mixed(va, da, vb, db)
        ri_r, ri_v, ri_d = mixed(vb, db, va, da)
        # reciprocal + reciprocal
        s = va + vb
        p = va * vb
        use_rec = np.abs(s) >= np.abs(p)
        s_s = np.where(use_rec, s, 1.0)
        rr_v_rec = p / s_s
        rr_d_rec = (da * vb * vb + db * va * va) / (s_s * s_s)
        va_s = np.where(use_rec, 1.0, va)
        vb_s = np.where(use_rec, 1.0, vb)
        rr_v_id = 1.0 / va_s + 1.0 / vb_s
        rr_d_id = -(da / (va_s * va_s) + db / (vb_s * vb_s))
        rr_v = np.where(use_rec, rr_v_rec, rr_v_id)
        rr_d = np.where(use_rec, rr_d_rec, rr_d_id)

    rec = np.where(~ra & ~rb, False, np.where(~ra & rb, ir_r, np.where(ra & ~rb, ri_r, use_rec)))
    val = np.where(~ra & ~rb, ii_v, np.where(~ra & rb, ir_v, np.where(ra & ~rb, ri_v, rr_v)))
    der = np.where(~ra & ~rb, ii_d, np.where(~ra & rb, ir_d, np.where(ra & ~rb, ri_d, rr_d)))
    return _normalize(rec, val, der)


def _neg(a):
    r, v, d = a
    return r, -v, -d


def _mul(a, b):
    ra, va, da = a
    rb, vb, db = b
    with np.errstate(all="ignore"):
        ii_v, ii_d = va * vb, da * vb + va * db

        def mixed(A, dA, w, dw):
            # f = A / w
            use_rec = np.abs(A) > np.abs(w)
            A_s = np.where(use_rec, A, 1.0)
            w_s = np.where(use_rec, 1.0, w)
            rv = w / A_s
            rd = (dw * A_s - w * dA) / (A_s * A_s)
            iv = A / w_s
            idd = (dA * w_s - A * dw) / (w_s * w_s)
            return use_rec, np.where(use_rec, rv, iv), np.where(use_rec, rd, idd)

        ir_r, ir_v, ir_d = mixed(va, da, vb, db)
        ri_r, ri_v, ri_d = mixed(vb, db, va, da)
        rr_v, rr_d = va * vb, da * vb + va * db

    rec = np.where(~ra & ~rb, False, np.where(~ra & rb, ir_r, np.where(ra & ~rb, ri_r, True)))
    val = np.where(~ra & ~rb, ii_v, np.where(~ra & rb, ir_v, np.where(ra & ~rb, ri_v, rr_v)))
    der = np.where(~ra & ~rb, ii_d, np.where(~ra & rb, ir_d, np.where(ra & ~rb, ri_d, rr_d)))
    return _normalize(rec, val, der)


def _flip(a):
    r, v, d = a
    return ~r, v, d


def _pow(a, n: int):
    if n == 0:
        shape = a[1].shape
        return np.zeros(shape, bool), np.ones(shape, complex), np.zeros(shape, complex)
    if n < 0:
        return _pow(_flip(a), -n)
    r, v, d = a
    with np.errstate(all="ignore"):
        return r, v**n, n * v ** (n - 1) * d


def _exp(a):
    F, dF = _identity_form(*a)
    with np.errstate(all="ignore"):
        use_rec = F.real > 0
        e = np.exp(np.where(use_rec, -F, F))
        der = np.where(use_rec, -e * dF, e * dF)
    return use_rec, e, der


def _tan(a):
    F, dF = _identity_form(*a)
    with np.errstate(all="ignore"):
        t = np.tan(F)
        use_rec = np.abs(t) > CHART_SWITCH
        t_s = np.where(use_rec, t, 1.0)
        w = 1.0 / t_s
        val = np.where(use_rec, w, t)
        der = np.where(use_rec, -(1.0 + w * w) * dF, (1.0 + t * t) * dF)
    return use_rec, val, der


def _recip_trig(F, cosine: bool):
    """Stable (1/s, ds/s^2-factor) for s = sin F or cos F when |Im F| is large.

    Returns (inv, ratio) with inv = 1/s and ratio = s'/s (cot or -tan).
    """
    up = F.imag > 0
    with np.errstate(all="ignore"):
        t = np.where(up, np.exp(2j * F), np.exp(-2j * F))
        e1 = np.where(up, np.exp(1j * F), np.exp(-1j * F))
        if cosine:
            inv = 2.0 * e1 / (1.0 + t)
            tan_f = np.where(up, -1j * (t - 1.0) / (t + 1.0), -1j * (1.0 - t) / (1.0 + t))
            return inv, -tan_f
        inv = np.where(up, 2j * e1 / (t - 1.0), 2j * e1 / (1.0 - t))
        cot_f = np.where(up, 1j * (t + 1.0) / (t - 1.0), 1j * (1.0 + t) / (1.0 - t))
        return inv, cot_f


def _sincos(a, cosine: bool):
    F, dF = _identity_form(*a)
    with np.errstate(all="ignore"):
        big = np.abs(F.imag) > _TRIG_SWITCH
        Fs = np.where(big, 0.0, F)
        s = np.cos(Fs) if cosine else np.sin(Fs)
        ds = -np.sin(Fs) if cosine else np.cos(Fs)
        small_rec = np.abs(s) > CHART_SWITCH
        s_safe = np.where(small_rec, s, 1.0)
        small_val = np.where(small_rec, 1.0 / s_safe, s)
        small_der = np.where(small_rec, -ds / (s_safe * s_safe) * dF, ds * dF)
        inv, ratio = _recip_trig(np.where(big, F, 1j * (_TRIG_SWITCH + 1.0)), cosine)
        big_der = -ratio * inv * dF
    rec = np.where(big, True, small_rec)
    val = np.where(big, inv, small_val)
    der = np.where(big, big_der, small_der)
    return rec, val, der


def _eval(e: Expr, z: np.ndarray):
    if isinstance(e, Var):
        return _normalize(np.zeros(z.shape, bool), z.astype(complex), np.ones(z.shape, complex))
    if isinstance(e, Const):
        c = np.full(z.shape, e.value, dtype=complex)
        return _normalize(np.zeros(z.shape, bool), c, np.zeros(z.shape, complex))
    if isinstance(e, Neg):
        return _neg(_eval(e.arg, z))
    if isinstance(e, Add):
        return _add(_eval(e.left, z), _eval(e.right, z))
    if isinstance(e, Sub):
        return _add(_eval(e.left, z), _neg(_eval(e.right, z)))
    if isinstance(e, Mul):
        return _mul(_eval(e.left, z), _eval(e.right, z))
    if isinstance(e, Div):
        return _mul(_eval(e.left, z), _flip(_eval(e.right, z)))
    if isinstance(e, Pow):
        return _normalize(*_pow(_eval(e.base, z), e.exponent))
    if isinstance(e, Exp):
        return _exp(_eval(e.arg, z))
    if isinstance(e, Tan):
        return _tan(_eval(e.arg, z))
    if isinstance(e, Sin):
        return _normalize(*_sincos(_eval(e.arg, z), cosine=False))
    if isinstance(e, Cos):
        return _normalize(*_sincos(_eval(e.arg, z), cosine=True))
    raise TypeError(f"not an expression node: {e!r}")


@dataclass
class JetArray:
    """Element-wise jets over an array of base points."""

    rec: np.ndarray
    value: np.ndarray
    deriv: np.ndarray
    base: np.ndarray

    def marty(self) -> np.ndarray:
        with np.errstate(all="ignore"):
            m = np.abs(self.deriv) / (1.0 + np.abs(self.value) ** 2)
        return np.where(np.isnan(m), np.inf, m)

    def spherical(self) -> np.ndarray:
        return self.marty() * (1.0 + np.abs(self.base) ** 2)

    def identity(self) -> tuple[np.ndarray, np.ndarray]:
        return _identity_form(self.rec, self.value, self.deriv)

    def at_infinity(self, eps: float = POLE_EPS) -> np.ndarray:
        return self.rec & (np.abs(self.value) < eps)

    def finite(self) -> np.ndarray:
        return np.isfinite(self.value) & np.isfinite(self.deriv)

    def jet(self, index) -> Jet:
        chart = Chart.RECIPROCAL if bool(self.rec[index]) else Chart.IDENTITY
        return Jet(chart, complex(self.value[index]), complex(self.deriv[index]), complex(self.base[index]))


def eval_jets(e: Expr, z) -> JetArray:
    """Vectorized jet of ``e`` at every point of ``z``."""
    z = np.asarray(z, dtype=complex)
    r, v, d = _eval(e, z)
    return JetArray(np.asarray(r, bool), np.asarray(v, complex), np.asarray(d, complex), z)


def eval_jet(e: Expr, z: complex) -> Jet:
    """Jet (value, derivative) of ``e`` at the finite point ``z``."""
    ja = eval_jets(e, np.array([complex(z)]))
    if not ja.finite()[0]:
        raise NumericalOverflowBothCharts(f"{to_text(e)} at {complex(z)} is not representable in either chart")
    return ja.jet(0)


def iterate_jets(e: Expr, z, n: int, eps: float = POLE_EPS):
    """Vectorized jets of the n-th iterate.

    Returns ``(jets, hit_step)`` where ``hit_step`` holds, per element, the
    first step k < n whose value reached infinity (so step k+1 is undefined),
    or -1. Elements with a hit carry nan jets.
    """
    z = np.asarray(z, dtype=complex)
    if n < 0:
        raise ValueError("iteration count must be non-negative")
    hit = np.full(z.shape, -1, dtype=int)
    if n == 0:
        r, v, d = _normalize(np.zeros(z.shape, bool), z.copy(), np.ones(z.shape, complex))
        return JetArray(r, v, d, z), hit
    w = z.copy()
    D = np.ones(z.shape, complex)
    for k in range(1, n + 1):
        r, v, d = _eval(e, w)
        with np.errstate(all="ignore"):
            d_total = d * D
        if k == n:
            return JetArray(r, v, d_total, z), hit
        at_inf = r & (np.abs(v) < eps)
        bad = (at_inf | ~np.isfinite(v)) & (hit < 0)
        hit = np.where(bad, k, hit)
        f, df = _identity_form(r, v, d)
        with np.errstate(all="ignore"):
            w = np.where(hit >= 0, np.nan, f)
            D = np.where(hit >= 0, np.nan, df * D)
    raise AssertionError("unreachable")


def iterate_jet(e: Expr, z: complex, n: int) -> Jet:
    """Jet of the n-th iterate at z; the derivative is the orbit multiplier."""
    ja, hit = iterate_jets(e, np.array([complex(z)]), n)
    if hit[0] >= 0:
        raise OrbitHitsPole(int(hit[0]))
    if not ja.finite()[0]:
        raise NumericalOverflowBothCharts(f"iterate {n} of {to_text(e)} at {complex(z)} overflowed")
    return ja.jet(0)


# --------------------------------------------------------------------------
# regions and Newton


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in the plane (degenerate sides allowed)."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if self.xmax < self.xmin or self.ymax < self.ymin:
            raise ValueError(f"empty region {self}")

    @classmethod
    def around(cls, center: complex, radius: float) -> "Region":
        c = complex(center)
        return cls(c.real - radius, c.real + radius, c.imag - radius, c.imag + radius)

    def contains(self, z, slack: float = 1e-12):
        z = np.asarray(z, dtype=complex)
        return (
            (z.real >= self.xmin - slack)
            & (z.real <= self.xmax + slack)
            & (z.imag >= self.ymin - slack)
            & (z.imag <= self.ymax + slack)
        )

    def lattice(self, density: int) -> np.ndarray:
        """Seed lattice with ``density`` points per non-degenerate side."""
        nx = density if self.xmax > self.xmin else 1
        ny = density if self.ymax > self.ymin else 1
        xs = np.linspace(self.xmin, self.xmax, nx) if nx > 1 else np.array([self.xmin])
        ys = np.linspace(self.ymin, self.ymax, ny) if ny > 1 else np.array([self.ymin])
        return (xs[None, :] + 1j * ys[:, None]).ravel()


def newton(
    func,
    seeds,
    max_steps: int = 50,
    tol: float = 1e-10,
    damping_tries: int = 8,
    escape: float = 1e6,
    xtol: float = 0.0,
):
    """Vectorized damped Newton on F given ``func(z) -> (F, F')``.

    The step is halved (up to ``damping_tries`` times) whenever it would
    increase |F|. A run converges when |F| <= tol, or, with ``xtol`` > 0, when
    an undamped step is shorter than xtol * (1 + |z|). Returns
    ``(roots, residuals, converged)``.
    """
    z = np.array(seeds, dtype=complex).ravel()
    F, dF = func(z)
    res = np.abs(F)
    alive = np.isfinite(res) & np.isfinite(dF) & (dF != 0)
    done = alive & (res <= tol)
    active = alive & ~done
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        with np.errstate(all="ignore"):
            step = F[idx] / dF[idx]
        zi = z[idx]
        ri = res[idx]
        new_z = zi - step
        nF, ndF = func(new_z)
        nres = np.abs(nF)
        worse = ~(nres <= ri)
        for _t in range(damping_tries):
            if not worse.any():
                break
            step = np.where(worse, step * 0.5, step)
            cand = zi[worse] - step[worse]
            cF, cdF = func(cand)
            new_z[worse] = cand
            nF[worse], ndF[worse], nres[worse] = cF, cdF, np.abs(cF)
            worse = ~(nres <= ri)
        z[idx], F[idx], dF[idx], res[idx] = new_z, nF, ndF, nres
        bad = ~np.isfinite(nres) | ~np.isfinite(ndF) | (ndF == 0) | (np.abs(new_z) > escape) | ~np.isfinite(new_z)
        ok = (nres <= tol) & ~bad
        if xtol > 0:
            ok |= ~worse & ~bad & (np.abs(step) <= xtol * (1.0 + np.abs(new_z)))
        done[idx[ok]] = True
        active[idx[ok | bad]] = False
        if damping_tries and worse.any():
            # stalled even after damping; keep trying only while progress is possible
            stalled = worse & ~ok & ~bad
            tiny = np.abs(step) <= 1e-16 * (1.0 + np.abs(new_z))
            active[idx[stalled & tiny]] = False
    return z, res, done


def dedup_points(points, radius: float) -> np.ndarray:
    """Deterministic dedup: lexicographic order, keep first within radius."""
    pts = np.asarray(points, dtype=complex).ravel()
    pts = pts[np.isfinite(pts)]
    if pts.size == 0:
        return pts
    order = np.lexsort((pts.imag, pts.real))
    kept: list[complex] = []
    for z in pts[order]:
        # kept is sorted by real part, so only a trailing window can collide
        clash = False
        for k in reversed(kept):
            if z.real - k.real > radius:
                break
            if abs(z - k) <= radius:
                clash = True
                break
        if not clash:
            kept.append(complex(z))
    return np.array(kept, dtype=complex)


# --------------------------------------------------------------------------
# pole profile


class ProfileCase(enum.Enum):
    TWO_OR_MORE_POLES = "TwoOrMorePoles"
    SINGLE_POLE_NOT_OMITTED = "SinglePoleNotOmitted"
    SINGLE_POLE_OMITTED = "SinglePoleOmitted"


@dataclass
class FunctionProfile:
    declared_poles: list
    case: ProfileCase
    scan_region: Region
    evidence: list = field(default_factory=list)
    heuristic: bool = False


def pole_residual(e: Expr, p: complex) -> float:
    """|1/f(p)|, infinite when f(p) is not in the reciprocal chart."""
    ja = eval_jets(e, np.array([complex(p)]))
    if not ja.rec[0] or not np.isfinite(ja.value[0]):
        return math.inf
    return float(abs(ja.value[0]))


def witness_poles(e: Expr, poles: Iterable[complex], tol: float = POLE_WITNESS) -> list[complex]:
    out = []
    for p in poles:
        res = pole_residual(e, p)
        if not res < tol:
            raise PoleNotWitnessed(complex(p), res)
        out.append(complex(p))
    return out


def solve_value(e: Expr, target: complex, seeds, region: Region, max_steps: int = 60, tol: float = 1e-10):
    """Roots of f(z) = target inside ``region`` from the given seeds."""
    target = complex(target)

    def func(z):
        ja = eval_jets(e, z)
        f, df = ja.identity()
        return f - target, df

    roots, res, ok = newton(func, seeds, max_steps=max_steps, tol=tol)
    ok &= region.contains(roots)
    return dedup_points(roots[ok], 1e-7)


def classify_profile(e: Expr, declared_poles: Sequence[complex], scan_region: Region, seeds: int = 41) -> FunctionProfile:
    """Decide which pole configuration f falls into.

    ``seeds`` is the per-side density of the Newton seed lattice used to look
    for a preimage of a single declared pole; finding none is heuristic
    evidence that the pole is an omitted value.
    """
    if not declared_poles:
        raise ValueError("at least one declared pole is required")
    poles = witness_poles(e, declared_poles)
    if len(poles) >= 2:
        return FunctionProfile(poles, ProfileCase.TWO_OR_MORE_POLES, scan_region, [f"pole {p}" for p in poles])
    p = poles[0]
    roots = solve_value(e, p, scan_region.lattice(seeds), scan_region)
    if roots.size:
        w = complex(roots[0])
        return FunctionProfile(poles, ProfileCase.SINGLE_POLE_NOT_OMITTED, scan_region, [w])
    note = f"no root of f(z) = {p} from a {seeds}x{seeds} seed lattice over {scan_region} (heuristic)"
    return FunctionProfile(poles, ProfileCase.SINGLE_POLE_OMITTED, scan_region, [note], heuristic=True)
