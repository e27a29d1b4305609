"""
Forward-mode dual numbers over numpy arrays.

A ``Dual`` carries a value array of shape ``(n,)`` and a tangent array of shape
``(n, k)``: one derivative per seeded input direction. Arithmetic follows the
usual dual-number rules, so evaluating an expression once yields its value and
the derivatives with respect to all ``k`` seeded inputs.

Plain floats and arrays pass through ``sqrt``/``exp``/``log`` unchanged, which
lets model code be written once and evaluated with or without derivatives.
"""
from typing import List

import numpy as np


def _col(x):
    """Lift a constant so it broadcasts against a tangent array."""
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim else x


class Dual:
    __slots__ = ("val", "eps")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, val, eps):
        self.val = np.asarray(val, dtype=float)
        self.eps = np.asarray(eps, dtype=float)

    @classmethod
    def variables(cls, columns: np.ndarray) -> List["Dual"]:
        """Seed one independent direction per column of an ``(n, k)`` array."""
        columns = np.asarray(columns, dtype=float)
        n, k = columns.shape
        out = []
        for j in range(k):
            eps = np.zeros((n, k))
            eps[:, j] = 1.0
            out.append(cls(columns[:, j], eps))
        return out

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, eps={self.eps!r})"

    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.eps + other.eps)
        return Dual(self.val + other, self.eps)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.eps - other.eps)
        return Dual(self.val - other, self.eps)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.eps)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                _col(self.val) * other.eps + _col(other.val) * self.eps,
            )
        return Dual(self.val * other, self.eps * _col(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val / other.val,
                (self.eps * _col(other.val) - _col(self.val) * other.eps)
                / _col(other.val ** 2),
            )
        return Dual(self.val / other, self.eps / _col(other))

    def __rtruediv__(self, other):
        return Dual(other / self.val, -_col(other) * self.eps / _col(self.val ** 2))

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            return _pow(self.val, self.eps, exponent.val, exponent.eps)
        exponent = np.asarray(exponent, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            coeff = np.where(
                self.val != 0, exponent * self.val ** (exponent - 1.0), 0.0
            )
            if np.ndim(exponent) == 0 and exponent == 1.0:
                coeff = np.ones_like(self.val)
        return Dual(self.val ** exponent, self.eps * _col(coeff))

    def __rpow__(self, base):
        base = np.asarray(base, dtype=float)
        return _pow(base, None, self.val, self.eps)


def _pow(x, dx, y, dy) -> Dual:
    # d(x^y) = y x^(y-1) dx + x^y ln(x) dy; both terms taken as 0 at x == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        value = x ** y
        positive = x > 0
        wrt_y = np.where(positive, value * np.log(np.where(positive, x, 1.0)), 0.0)
        eps = dy * _col(wrt_y)
        if dx is not None:
            wrt_x = np.where(positive, y * x ** (y - 1.0), 0.0)
            eps = eps + dx * _col(wrt_x)
    return Dual(value, eps)


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    root = np.sqrt(x.val)
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(root > 0, 0.5 / np.where(root > 0, root, 1.0), 0.0)
    return Dual(root, x.eps * _col(coeff))


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    value = np.exp(x.val)
    return Dual(value, x.eps * _col(value))


def log(x):
    if not isinstance(x, Dual):
        return np.log(x)
    return Dual(np.log(x.val), x.eps / _col(x.val))


def value_of(x):
    return x.val if isinstance(x, Dual) else x
