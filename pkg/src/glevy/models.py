"""Built-in coefficient sets and the 1-d expression parser."""
from __future__ import annotations

import ast

import numpy as np

from .sde import Coefficients
from .uncertainty import JumpMeasure, UncertaintySet


def zero(n: int = 1, d: int = 1) -> Coefficients:
    return Coefficients(n, d, name="zero", zero_at_zero=True)


def canonical(d: int = 1) -> Coefficients:
    """The controlled canonical process itself: ``dX = dB + int z L(dt, dz)``."""
    eye = np.eye(d)

    def sigma(t, y):
        return np.broadcast_to(eye, y.shape[:-1] + (d, d))

    def K(t, y, z):
        return np.broadcast_to(z, y.shape)

    return Coefficients(d, d, sigma=sigma, K=K, name="canonical")


def linear_test(drift: float = -2.0, vol: float = 1.0, jump: float | None = None
                ) -> Coefficients:
    """``dY = a Y dt + c Y dB`` (plus ``r sign(z) Y`` jumps when ``jump`` is given)."""

    def b(t, y):
        return drift * y

    def sigma(t, y):
        return (vol * y)[..., None, :]

    def K(t, y, z):
        return jump * np.sign(z[..., :1]) * y

    return Coefficients(1, 1, b=b, sigma=sigma, K=None if jump is None else K,
                        name="linear_test", zero_at_zero=True)


def _sin_profile(amended: bool):
    if amended:
        return lambda t: np.abs(np.sin(t)) / (1.0 + t * t)
    return lambda t: np.abs(np.sin(t)) / np.sqrt(1.0 + t * t)


def example51(r: float, amended: bool = False) -> Coefficients:
    """Linear 1-d test system with time-varying volatility and jumps ``R(z) Y``.

    With ``s(t) = |sin t|/sqrt(1+t^2)`` (or ``|sin t|/(1+t^2)`` when
    ``amended``): ``b = -2y``, ``h = -s^2 y / 2``, ``sigma = (1 + s) y`` and
    ``K = r sign(z) y``.  For the original profile ``s^2 = sin^2 t/(1+t^2)``.
    """
    s = _sin_profile(amended)

    def b(t, y):
        return -2.0 * y

    def h(t, y):
        c = -0.5 * s(np.asarray(t, dtype=float)) ** 2
        return (np.asarray(c)[..., None] * y)[..., None, None, :]

    def sigma(t, y):
        c = 1.0 + s(np.asarray(t, dtype=float))
        return (np.asarray(c)[..., None] * y)[..., None, :]

    def K(t, y, z):
        return r * np.sign(z[..., :1]) * y

    name = "example51_amended" if amended else "example51"
    return Coefficients(1, 1, b=b, h=h, sigma=sigma, K=K, name=name, zero_at_zero=True)


def example51_lambda1(amended: bool = False):
    """Time-varying part of the decay bound: ``2 s(t)``."""
    s = _sin_profile(amended)
    return lambda t: 2.0 * s(np.asarray(t, dtype=float))


def jump_constants(U: UncertaintySet, r: float) -> tuple[float, float]:
    """``(l, k)`` for ``R(z) = r sign(z)``: ``l = sup_v int (1+R)^2 - 1 dv``, ``k = sup_v int R^2 dv``."""
    def R(z):
        return r * np.sign(z[:, 0])

    l = max(v.integrate(lambda z: (1.0 + R(z)) ** 2 - 1.0) for v in U.jump_measures)
    k = max(v.integrate(lambda z: R(z) ** 2) for v in U.jump_measures)
    return l, k


def r_for_l(l: float) -> float:
    """Jump scale that makes ``(1 + r)^2 - 1 = l`` on the one-sided measure of :func:`example51_set`."""
    return float(np.sqrt(1.0 + l) - 1.0)


def example51_set(vols=(0.8, 1.0), drifts=(0.0,)) -> UncertaintySet:
    """``V = {delta_1, (delta_1 + delta_{-1})/2}`` with the symmetric measure as base."""
    one_sided = JumpMeasure.dirac([1.0])
    symmetric = JumpMeasure([[1.0], [-1.0]], [0.5, 0.5])
    return UncertaintySet([one_sided, symmetric], np.asarray(drifts, float).reshape(-1, 1),
                          np.asarray(vols, float).reshape(-1, 1, 1), base_measure_index=1)


# -- expression coefficients -----------------------------------------------------

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log, "abs": np.abs,
          "sqrt": np.sqrt, "sign": np.sign, "tanh": np.tanh}
_CONSTS = {"pi": np.pi, "e": np.e}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
          ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)


def compile_expression(src: str, names=("t", "y", "z")):
    """Compile a polynomial/trigonometric expression in ``t, y, z`` to a numpy function."""
    tree = ast.parse(src, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ValueError(f"unsupported syntax in {src!r}: {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS \
                and node.id not in names:
            raise ValueError(f"unknown name {node.id!r} in {src!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name)
                                               and node.func.id in _FUNCS):
            raise ValueError(f"unsupported call in {src!r}")
    code = compile(tree, "<coefficient>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def fn(**kw):
        return eval(code, env, kw)

    return fn


def from_expressions(b: str = "0", h: str = "0", sigma: str = "0", K: str = "0",
                     zero_at_zero: bool = False) -> Coefficients:
    """1-d coefficients from expression strings (``K`` may use the jump size ``z``)."""
    fb, fh, fs, fk = (compile_expression(e) for e in (b, h, sigma, K))

    def full(v, y):
        return np.broadcast_to(np.asarray(v, dtype=float), y.shape[:-1])

    def tt(t, y):
        return np.broadcast_to(np.asarray(t, dtype=float), y.shape[:-1])

    def cb(t, y):
        return full(fb(t=tt(t, y), y=y[..., 0]), y)[..., None]

    def ch(t, y):
        return full(fh(t=tt(t, y), y=y[..., 0]), y)[..., None, None, None]

    def cs(t, y):
        return full(fs(t=tt(t, y), y=y[..., 0]), y)[..., None, None]

    def ck(t, y, z):
        return full(fk(t=tt(t, y), y=y[..., 0], z=z[..., 0]), y)[..., None]

    return Coefficients(1, 1, b=None if b == "0" else cb, h=None if h == "0" else ch,
                        sigma=None if sigma == "0" else cs, K=None if K == "0" else ck,
                        name="expression", zero_at_zero=zero_at_zero)
