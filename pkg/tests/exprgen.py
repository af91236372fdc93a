"""Random expression text generators shared by the expression tests."""
import random

SMOOTH_UNARY = ["sin({})", "cos({})", "tanh({})", "exp(tanh({}))",
                "sqrt(1 + ({})^2)", "log(2 + sin({}))", "(1 + ({})^2)^(-1)"]
ANY_UNARY = SMOOTH_UNARY + ["abs({})", "exp({})", "log({})", "sqrt({})", "tan({})", "-{}"]
BINARY = ["({} + {})", "({} - {})", "({} * {})", "({} / (2 + sin({})))"]
ANY_BINARY = ["({} + {})", "({} - {})", "({} * {})", "({} / {})", "({} ^ {})",
              "min({}, {})", "max({}, {})"]


def smooth_expr(rng: random.Random, depth: int = 3, var: str = "s") -> str:
    """Smooth, bounded-derivative expression in one variable."""
    if depth == 0 or rng.random() < 0.25:
        choice = rng.random()
        if choice < 0.5:
            return var
        if choice < 0.75:
            return repr(round(rng.uniform(-2, 2), 3))
        return f"{var}^{rng.randint(2, 3)}"
    if rng.random() < 0.5:
        return rng.choice(SMOOTH_UNARY).format(smooth_expr(rng, depth - 1, var))
    a = smooth_expr(rng, depth - 1, var)
    b = smooth_expr(rng, depth - 1, var)
    return rng.choice(BINARY).format(a, b)


def any_expr(rng: random.Random, depth: int = 3, variables=("s",)) -> str:
    """Grammar-covering expression; may hit domain errors when evaluated."""
    if depth == 0 or rng.random() < 0.2:
        choice = rng.random()
        if choice < 0.45:
            return rng.choice(variables)
        if choice < 0.6:
            return rng.choice(["pi", "e", "2", "0.5", "1e-3", "3.25"])
        return repr(round(rng.uniform(-5, 5), 4))
    if rng.random() < 0.45:
        return rng.choice(ANY_UNARY).format(any_expr(rng, depth - 1, variables))
    a = any_expr(rng, depth - 1, variables)
    b = any_expr(rng, depth - 1, variables)
    return rng.choice(ANY_BINARY).format(a, b)
