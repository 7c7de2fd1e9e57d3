"""Random expression trees of the kind the parser can produce."""

from merodyn.fnexpr import Add, Const, Cos, Div, Exp, Mul, Neg, Pow, Sin, Sub, Tan, Var

UNARY = (Neg, Exp, Sin, Cos, Tan)
BINARY = (Add, Sub, Mul, Div)


def random_const(rng):
    if rng.random() < 0.8:
        return Const(complex(round(rng.uniform(0.1, 3.0), 3), 0.0))
    return Const(complex(0.0, round(rng.uniform(0.1, 2.0), 3)))


def random_expr(rng, depth=3):
    if depth == 0 or rng.random() < 0.25:
        return Var() if rng.random() < 0.7 else random_const(rng)
    r = rng.random()
    if r < 0.35:
        return UNARY[rng.integers(len(UNARY))](random_expr(rng, depth - 1))
    if r < 0.45:
        return Pow(random_expr(rng, depth - 1), int(rng.choice([-2, -1, 2, 3])))
    op = BINARY[rng.integers(len(BINARY))]
    return op(random_expr(rng, depth - 1), random_expr(rng, depth - 1))


def random_point(rng, scale=2.0):
    return complex(rng.uniform(-scale, scale), rng.uniform(-scale, scale))
