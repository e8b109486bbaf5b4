"""Outcome-model basis functions B(a, x) and a small formula grammar for them.

A basis term is an arithmetic expression in the treatment ``a`` and covariate
columns ``x1, x2, ...`` (1-based, counting an intercept column if present).
Supported syntax, comma separated::

    x            every covariate column, in order
    a, a2, a3    treatment and its powers (a2 == a^2)
    x2*x3        products; also + - / and ^ or ** for powers
    exp(x1)      exp, log, sqrt, sin, cos, abs
    a*x          the treatment times every covariate column

Example: ``"x,a,a2,a3"`` gives ``(x, a, a^2, a^3)``.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


@dataclass(frozen=True)
class BasisSpec:
    """Map ``(a, X) -> (n, q)`` basis matrix.

    ``a`` is a scalar or length-n array of treatment values, ``X`` an ``(n, d)``
    covariate matrix.
    """

    q: int
    fn: Callable
    description: str = ""

    def __call__(self, a, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
        out = np.asarray(self.fn(a, X), dtype=float)
        if out.shape != (X.shape[0], self.q):
            raise ValueError(f"basis returned shape {out.shape}, expected {(X.shape[0], self.q)}")
        return out


def covariate_basis(d: int) -> BasisSpec:
    """``B(a, x) = x``: balances first moments of every covariate."""
    return BasisSpec(d, lambda a, X: X, "x")


def intercept_basis() -> BasisSpec:
    return BasisSpec(1, lambda a, X: np.ones((X.shape[0], 1)), "1")


def _split_terms(text: str) -> list[str]:
    terms, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            terms.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    terms.append("".join(cur).strip())
    return [t for t in terms if t]


class _Compiler:
    def __init__(self, d: int):
        self.d = d

    def compile(self, node):
        """Return ``f(a, X) -> (n, m)`` for an expression node."""
        if isinstance(node, ast.Expression):
            return self.compile(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            v = float(node.value)
            return lambda a, X: np.full((X.shape[0], 1), v)
        if isinstance(node, ast.Name):
            return self._name(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            f = self.compile(node.operand)
            sign = -1.0 if isinstance(node.op, ast.USub) else 1.0
            return lambda a, X: sign * f(a, X)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            fl, fr = self.compile(node.left), self.compile(node.right)
            return lambda a, X: op(fl(a, X), fr(a, X))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            if node.func.id not in _FUNCS or len(node.args) != 1 or node.keywords:
                raise ValueError(f"unsupported function call {ast.unparse(node)!r}")
            fn, f = _FUNCS[node.func.id], self.compile(node.args[0])
            return lambda a, X: fn(f(a, X))
        raise ValueError(f"unsupported basis syntax {ast.unparse(node)!r}")

    def _name(self, name: str):
        if name == "x":
            return lambda a, X: X
        if name == "a":
            return lambda a, X: a[:, None]
        m = re.fullmatch(r"a(\d+)", name)
        if m:
            p = int(m.group(1))
            return lambda a, X: (a ** p)[:, None]
        m = re.fullmatch(r"x(\d+)", name)
        if m:
            j = int(m.group(1))
            if not 1 <= j <= self.d:
                raise ValueError(f"{name} refers to a covariate outside x1..x{self.d}")
            return lambda a, X: X[:, j - 1:j]
        raise ValueError(f"unknown name {name!r} in basis term")


def parse_basis(text: str, d: int) -> BasisSpec:
    """Compile a comma-separated basis formula for ``d`` covariate columns."""
    terms = _split_terms(text)
    if not terms:
        raise ValueError("empty basis specification")
    comp = _Compiler(d)
    parts = []
    for term in terms:
        try:
            tree = ast.parse(term.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse basis term {term!r}") from exc
        parts.append(comp.compile(tree))

    # column count per term: probe with one dummy row
    probe = np.ones((1, d)) * 0.5
    widths = [np.atleast_2d(f(np.array([0.5]), probe)).shape[1] for f in parts]

    def fn(a, X):
        n = X.shape[0]
        cols = [np.broadcast_to(f(a, X), (n, w)) for f, w in zip(parts, widths)]
        return np.concatenate(cols, axis=1)

    return BasisSpec(int(sum(widths)), fn, ",".join(terms))
