"""Small arithmetic-expression compiler for user-defined potentials and factors.

Grammar: ``+ - * / ^`` (also ``**``), unary minus, calls to ``exp``, ``sin``,
``cos``, ``sqrt``, variables ``q1 .. qn``, and numeric literals.  Expressions
are validated against an AST whitelist and compiled once into a vectorized
numpy function of a point array.
"""

from __future__ import annotations

import ast
import re

import numpy as np

from .errors import ExpressionError

_ALLOWED_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt}

_VAR_RE = re.compile(r"^q([1-9][0-9]*)$")

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.USub, ast.UAdd)


def _validate(node: ast.AST, dim: int, source: str) -> None:
    if isinstance(node, ast.Expression):
        _validate(node.body, dim, source)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _ALLOWED_BINOPS):
            raise ExpressionError(f"operator not allowed in {source!r}")
        _validate(node.left, dim, source)
        _validate(node.right, dim, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, _ALLOWED_UNARY):
            raise ExpressionError(f"unary operator not allowed in {source!r}")
        _validate(node.operand, dim, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_FUNCS:
            raise ExpressionError(f"only exp/sin/cos/sqrt calls allowed in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"functions take exactly one argument in {source!r}")
        _validate(node.args[0], dim, source)
    elif isinstance(node, ast.Name):
        m = _VAR_RE.match(node.id)
        if m is None:
            raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
        if int(m.group(1)) > dim:
            raise ExpressionError(
                f"variable {node.id!r} exceeds dimension {dim} in {source!r}"
            )
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant in {source!r}")
    else:
        raise ExpressionError(
            f"syntax element {type(node).__name__} not allowed in {source!r}"
        )


class ScalarExpression:
    """Compiled scalar-valued expression over chart coordinates.

    Calling the instance with an array of shape ``(..., n)`` evaluates the
    expression pointwise and returns an array of shape ``(...,)``.
    """

    def __init__(self, source: str, dim: int):
        self.source = source
        self.dim = dim
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(
                f"syntax error in {source!r} at column {exc.offset}: {exc.msg}"
            ) from None
        _validate(tree, dim, source)
        self._code = compile(tree, "<expression>", "eval")

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        names = {f"q{i + 1}": q[..., i] for i in range(self.dim)}
        names.update(_ALLOWED_FUNCS)
        out = eval(self._code, {"__builtins__": {}}, names)
        return np.broadcast_to(np.asarray(out, dtype=float), q.shape[:-1]).copy()

    def __repr__(self):
        return f"ScalarExpression({self.source!r}, dim={self.dim})"
