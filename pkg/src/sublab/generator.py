from dataclasses import dataclass
from typing import Callable, Optional, Sequence
import logging

import numpy as np

from .coefficients import CoefficientField, TruncationFunction
from .errors import InputError

logger = logging.getLogger(__name__)

_truncation = TruncationFunction()


@dataclass(frozen=True, eq=False)
class TestFunction:
    """
    A time-frozen smooth test function with analytic first and second derivatives.

    value: X (n, d) -> (n,), gradient: X -> (n, d), hessian: X -> (n, d, d).
    """

    __test__ = False  # not a pytest class

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    bound: float = np.inf

    def points(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.shape[-1] != self.dim:
            raise InputError(f"test function expects dimension {self.dim}, got shape {np.shape(x)}")
        return X

    def check_consistency(self, x, rtol: float = 1e-4, step: float = 1e-6) -> bool:
        """Hessian symmetric and central-difference gradient within rtol at the given points."""
        X = self.points(x)
        H = self.hessian(X)
        if not np.allclose(H, np.swapaxes(H, 1, 2), rtol=0.0, atol=1e-12):
            return False
        G = self.gradient(X)
        eye = np.eye(self.dim) * step
        fd = np.stack([(self.value(X + e) - self.value(X - e)) / (2 * step) for e in eye], axis=1)
        scale = np.maximum(np.abs(G), 1.0)
        return bool(np.all(np.abs(fd - G) <= rtol * scale))

    # --- algebra ---
    def __add__(self, other: "TestFunction") -> "TestFunction":
        if other.dim != self.dim:
            raise InputError("cannot add test functions of different dimensions")
        return TestFunction(
            dim=self.dim,
            value=lambda X: self.value(X) + other.value(X),
            gradient=lambda X: self.gradient(X) + other.gradient(X),
            hessian=lambda X: self.hessian(X) + other.hessian(X),
            bound=self.bound + other.bound,
        )

    def scaled(self, factor: float) -> "TestFunction":
        factor = float(factor)
        return TestFunction(
            dim=self.dim,
            value=lambda X: factor * self.value(X),
            gradient=lambda X: factor * self.gradient(X),
            hessian=lambda X: factor * self.hessian(X),
            bound=abs(factor) * self.bound,
        )

    # --- constructors ---
    @classmethod
    def constant(cls, c: float, dim: int) -> "TestFunction":
        c = float(c)
        return cls(
            dim=dim,
            value=lambda X: np.full(len(X), c),
            gradient=lambda X: np.zeros((len(X), dim)),
            hessian=lambda X: np.zeros((len(X), dim, dim)),
            bound=abs(c),
        )

    @classmethod
    def affine(cls, slope: Sequence[float], intercept: float = 0.0) -> "TestFunction":
        s = np.atleast_1d(np.asarray(slope, dtype=float))
        d = len(s)
        return cls(
            dim=d,
            value=lambda X: X @ s + intercept,
            gradient=lambda X: np.broadcast_to(s, (len(X), d)).copy(),
            hessian=lambda X: np.zeros((len(X), d, d)),
        )

    @classmethod
    def quadratic(cls, dim: int, center: Optional[Sequence[float]] = None) -> "TestFunction":
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        return cls(
            dim=dim,
            value=lambda X: np.sum((X - c) ** 2, axis=1),
            gradient=lambda X: 2.0 * (X - c),
            hessian=lambda X: np.broadcast_to(2.0 * np.eye(dim), (len(X), dim, dim)).copy(),
        )

    @classmethod
    def cosine_probe(cls, xi: Sequence[float], x0: Sequence[float]) -> "TestFunction":
        """y -> cos<xi, y - x0>."""
        xi = np.asarray(xi, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        outer = np.outer(xi, xi)
        return cls(
            dim=len(xi),
            value=lambda X: np.cos((X - x0) @ xi),
            gradient=lambda X: -np.sin((X - x0) @ xi)[:, None] * xi,
            hessian=lambda X: -np.cos((X - x0) @ xi)[:, None, None] * outer,
            bound=1.0,
        )

    @classmethod
    def sine_probe(cls, xi: Sequence[float], x0: Sequence[float]) -> "TestFunction":
        """y -> sin<xi, y - x0>."""
        xi = np.asarray(xi, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        outer = np.outer(xi, xi)
        return cls(
            dim=len(xi),
            value=lambda X: np.sin((X - x0) @ xi),
            gradient=lambda X: np.cos((X - x0) @ xi)[:, None] * xi,
            hessian=lambda X: -np.sin((X - x0) @ xi)[:, None, None] * outer,
            bound=1.0,
        )

    @classmethod
    def capped_linear(cls, dim: int, radius: float, axis: int = 0) -> "TestFunction":
        """R tanh(x_axis / R): slope 1 and curvature 0 at the origin, bounded by R."""
        R = float(radius)

        def grad(X):
            g = np.zeros((len(X), dim))
            g[:, axis] = 1.0 / np.cosh(X[:, axis] / R) ** 2
            return g

        def hess(X):
            H = np.zeros((len(X), dim, dim))
            t = np.tanh(X[:, axis] / R)
            H[:, axis, axis] = -2.0 / R * t * (1.0 - t**2)
            return H

        return cls(dim=dim, value=lambda X: R * np.tanh(X[:, axis] / R), gradient=grad, hessian=hess, bound=R)

    @classmethod
    def capped_quadratic(cls, dim: int, radius: float) -> "TestFunction":
        """R^2 (1 - exp(-|x|^2 / R^2)): equals |x|^2 to second order at the origin, bounded by R^2."""
        R2 = float(radius) ** 2

        def hess(X):
            e = np.exp(-np.sum(X**2, axis=1) / R2)
            return e[:, None, None] * (2.0 * np.eye(dim)[None] - 4.0 / R2 * np.einsum("ni,nj->nij", X, X))

        return cls(
            dim=dim,
            value=lambda X: R2 * (1.0 - np.exp(-np.sum(X**2, axis=1) / R2)),
            gradient=lambda X: 2.0 * X * np.exp(-np.sum(X**2, axis=1) / R2)[:, None],
            hessian=hess,
            bound=R2,
        )


def compensated_increment(phi: TestFunction, x, z) -> np.ndarray:
    """phi(x+z) - phi(x) - <grad phi(x), h(z)>, for one z of shape (d,) or a stack (m, d)."""
    x = phi.points(x)[0]
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = phi.points(Z)
    grad = phi.gradient(x[None])[0]
    base = phi.value(x[None])[0]
    out = phi.value(x[None] + Z) - base - _truncation(Z) @ grad
    return out[0] if single else out


def eval_generator_single(field: CoefficientField, f: int, phi: TestFunction, x) -> float:
    """
    G_f phi(x) = <grad phi, b> + 1/2 tr[hess phi (sigma sigma* + M)] + sum_i w_i * compensated increment.
    """
    X = field.points(x)
    if len(X) != 1:
        raise InputError("eval_generator_single expects a single point")
    grad = phi.gradient(X)[0]
    hess = phi.hessian(X)[0]
    value = float(grad @ field.b(f, X)[0])
    value += 0.5 * float(np.sum(hess * field.covariance(f, X)[0]))
    value += 0.5 * float(np.sum(hess * field.second_moment(f)))
    k = field.jumps(f, X)[0]
    if len(k):
        value += float(field.rates(f) @ compensated_increment(phi, X[0], k))
    return value


@dataclass(frozen=True)
class GeneratorValue:
    value: float
    argmax: int


def eval_generator(field: CoefficientField, phi: TestFunction, x, controls: Optional[Sequence[int]] = None) -> GeneratorValue:
    """max over controls of G_f phi(x); ties go to the lowest control index."""
    indices = list(range(len(field.controls))) if controls is None else [field.controls.check_index(f) for f in controls]
    if not indices:
        raise InputError("eval_generator needs at least one control")
    values = [eval_generator_single(field, f, phi, x) for f in indices]
    best = int(np.argmax(values))
    if not np.isfinite(values[best]):
        raise InputError(f"generator value is not finite at x={np.asarray(x).tolist()}")
    return GeneratorValue(value=values[best], argmax=indices[best])


@dataclass(frozen=True)
class NonlocalSplit:
    """
    J^f = H^f + <grad phi, K^f>, with H^f split over {gamma<=kappa}, {kappa<gamma<=1}, {gamma>1}.
    """

    small: float
    medium: float
    large: float
    K: np.ndarray

    @property
    def H(self) -> float:
        return self.small + self.medium + self.large

    def recombine(self, gradient: np.ndarray) -> float:
        return self.H + float(np.asarray(gradient) @ self.K)


def eval_nonlocal_split(field: CoefficientField, f: int, phi: TestFunction, x, kappa: float) -> NonlocalSplit:
    if not 0.0 < kappa < 1.0:
        raise InputError(f"kappa must lie in (0, 1), got {kappa}")
    X = field.points(x)
    k = field.jumps(f, X)[0]
    w = field.rates(f)
    g = field.kernel.gamma_values(f)
    grad = phi.gradient(X)[0]
    base = phi.value(X)[0]
    hk = field.truncation(k)

    jump = phi.value(X[0][None] + k) - base if len(k) else np.zeros(0)
    compensated = jump - k @ grad if len(k) else np.zeros(0)
    lo, mid, hi = g <= kappa, (g > kappa) & (g <= 1.0), g > 1.0
    K = np.sum((w * (g <= 1.0))[:, None] * (k - hk), axis=0) - np.sum((w * hi)[:, None] * hk, axis=0)
    return NonlocalSplit(
        small=float(np.sum(w[lo] * compensated[lo])),
        medium=float(np.sum(w[mid] * compensated[mid])),
        large=float(np.sum(w[hi] * jump[hi])),
        K=K if len(k) else np.zeros(field.dim),
    )
