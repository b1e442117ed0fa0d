"""Stationary kernels: covariance evaluation and exact state-space forms.

Each temporal (1-D input) kernel maps to a linear time-invariant SDE

    dx(t) = F x(t) dt + L dW(t),   f(t) = H x(t),

with spectral density ``Qc`` for ``W`` and stationary state covariance
``Pinf`` solving ``F Pinf + Pinf F' + L Qc L' = 0``. Discretizing on a
step ``dt`` gives the transition pair

    A = expm(F dt),   Q = Pinf - A Pinf A',

so that ``H A^k Pinf H'`` reproduces the covariance at lag ``k dt``
exactly. Spatial kernels only ever use the closed-form evaluations.

Hyperparameters are stored on log scale; the positive values are exposed
as properties. ``log_params``/``with_log_params`` give the optimizer a
flat packed view (period is treated as fixed, not a free parameter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .errors import InputError, NumericalError, UnsupportedKernelError

__all__ = [
    "Kernel",
    "Matern12",
    "Matern32",
    "Matern52",
    "QuasiPeriodicMatern32",
    "Sum",
    "Product",
    "Separable",
    "LtiSde",
    "eval_kernel",
    "kernel_matrix",
    "to_state_space",
    "kernel_to_dict",
    "kernel_from_dict",
]

SDE_CHECK_TOL = 1e-8


@dataclass(frozen=True)
class LtiSde:
    """Matrices (F, L, Qc, H, Pinf) of a stationary LTI SDE."""

    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    H: np.ndarray
    Pinf: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    def validate(self, variance: float) -> None:
        """Check the Lyapunov equation and the marginal variance."""
        resid = self.F @ self.Pinf + self.Pinf @ self.F.T + self.L @ self.Qc @ self.L.T
        scale = max(1.0, float(np.abs(self.Pinf).max()))
        if np.abs(resid).max() > SDE_CHECK_TOL * scale:
            raise NumericalError(
                f"stationary covariance violates the Lyapunov equation "
                f"(residual {np.abs(resid).max():.3e})"
            )
        got = float((self.H @ self.Pinf @ self.H.T).item())
        if abs(got - variance) > SDE_CHECK_TOL * max(1.0, variance):
            raise NumericalError(
                f"emitted stationary variance {got:.6e} != kernel variance {variance:.6e}"
            )


def _as_lengthscales(lengthscales) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("lengthscales must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise InputError(f"lengthscales must be positive and finite, got {arr}")
    return arr


def _check_positive(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise InputError(f"{name} must be positive and finite, got {value}")
    return value


class Kernel:
    """Base class. Instances are immutable; evaluation methods are pure."""

    @property
    def input_dim(self) -> int:
        raise NotImplementedError

    @property
    def variance(self) -> float:
        """Marginal variance kappa(x, x)."""
        raise NotImplementedError

    def matrix(self, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
        """Cross-covariance matrix between two point lists.

        With ``b`` omitted the Gram matrix of ``a`` is returned,
        symmetrized so round-off cannot break ``K == K.T``.
        """
        pa = self._points(a)
        if b is None:
            return linalg.symmetrize(self._k(pa, pa))
        return self._k(pa, self._points(b))

    def diag(self, a: np.ndarray) -> np.ndarray:
        pa = self._points(a)
        return np.full(pa.shape[0], self.variance)

    def __call__(self, a, b) -> float:
        return float(self.matrix(np.atleast_2d(a), np.atleast_2d(b))[0, 0])

    def to_sde(self) -> LtiSde:
        raise UnsupportedKernelError(
            f"{type(self).__name__} has no exact state-space form"
        )

    # -- flat hyperparameter view (log scale, period excluded) --

    def log_params(self) -> np.ndarray:
        raise NotImplementedError

    def with_log_params(self, theta: np.ndarray) -> "Kernel":
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.log_params().size

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _points(self, a: np.ndarray) -> np.ndarray:
        arr = np.asarray(a, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise InputError(f"points must be a 2-D array, got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise InputError("empty point list")
        if arr.shape[1] != self.input_dim:
            raise InputError(
                f"points have dimension {arr.shape[1]}, kernel expects {self.input_dim}"
            )
        if not np.all(np.isfinite(arr)):
            raise InputError("points contain non-finite values")
        return arr

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _StationaryMatern(Kernel):
    """Shared machinery for the Matern family with per-dimension lengthscales."""

    variant: str = ""

    def __init__(self, variance: float, lengthscales):
        self._log_variance = math.log(_check_positive(variance, "variance"))
        self._log_lengthscales = np.log(_as_lengthscales(lengthscales))
        self._log_lengthscales.flags.writeable = False

    @property
    def variance(self) -> float:
        return math.exp(self._log_variance)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self._log_lengthscales)

    @property
    def input_dim(self) -> int:
        return self._log_lengthscales.size

    def _scaled_dist(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        diff = (a[:, None, :] - b[None, :, :]) / self.lengthscales
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.variance * self._profile(self._scaled_dist(a, b))

    def _profile(self, r: np.ndarray) -> np.ndarray:
        """Correlation as a function of the lengthscale-scaled distance."""
        raise NotImplementedError

    def log_params(self) -> np.ndarray:
        return np.concatenate(([self._log_variance], self._log_lengthscales))

    def with_log_params(self, theta: np.ndarray) -> "Kernel":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != 1 + self._log_lengthscales.size:
            raise InputError(
                f"expected {1 + self._log_lengthscales.size} parameters, got {theta.size}"
            )
        return type(self)(math.exp(theta[0]), np.exp(theta[1:]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "variance": self.variance,
            "lengthscales": [float(v) for v in self.lengthscales],
        }

    def _sde_lengthscale(self) -> float:
        if self.input_dim != 1:
            raise UnsupportedKernelError(
                f"state-space form needs a 1-D input kernel, this one has "
                f"input_dim={self.input_dim}"
            )
        return float(self.lengthscales[0])

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(variance={self.variance:.6g}, "
            f"lengthscales={np.array2string(self.lengthscales, precision=6)})"
        )


class Matern12(_StationaryMatern):
    """Exponential kernel, sample paths are Ornstein-Uhlenbeck."""

    variant = "Matern12"

    def _profile(self, r: np.ndarray) -> np.ndarray:
        return np.exp(-r)

    def to_sde(self) -> LtiSde:
        ell = self._sde_lengthscale()
        var = self.variance
        sde = LtiSde(
            F=np.array([[-1.0 / ell]]),
            L=np.array([[1.0]]),
            Qc=np.array([[2.0 * var / ell]]),
            H=np.array([[1.0]]),
            Pinf=np.array([[var]]),
        )
        sde.validate(var)
        return sde


class Matern32(_StationaryMatern):
    variant = "Matern32"

    def _profile(self, r: np.ndarray) -> np.ndarray:
        sr = math.sqrt(3.0) * r
        return (1.0 + sr) * np.exp(-sr)

    def to_sde(self) -> LtiSde:
        ell = self._sde_lengthscale()
        var = self.variance
        lam = math.sqrt(3.0) / ell
        sde = LtiSde(
            F=np.array([[0.0, 1.0], [-lam**2, -2.0 * lam]]),
            L=np.array([[0.0], [1.0]]),
            Qc=np.array([[4.0 * lam**3 * var]]),
            H=np.array([[1.0, 0.0]]),
            Pinf=np.diag([var, lam**2 * var]),
        )
        sde.validate(var)
        return sde


class Matern52(_StationaryMatern):
    variant = "Matern52"

    def _profile(self, r: np.ndarray) -> np.ndarray:
        sr = math.sqrt(5.0) * r
        return (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)

    def to_sde(self) -> LtiSde:
        ell = self._sde_lengthscale()
        var = self.variance
        lam = math.sqrt(5.0) / ell
        kappa = 5.0 / 3.0 * var / ell**2
        sde = LtiSde(
            F=np.array(
                [
                    [0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0],
                    [-(lam**3), -3.0 * lam**2, -3.0 * lam],
                ]
            ),
            L=np.array([[0.0], [0.0], [1.0]]),
            Qc=np.array([[16.0 / 3.0 * lam**5 * var]]),
            H=np.array([[1.0, 0.0, 0.0]]),
            Pinf=np.array(
                [
                    [var, 0.0, -kappa],
                    [0.0, kappa, 0.0],
                    [-kappa, 0.0, 25.0 * var / ell**4],
                ]
            ),
        )
        sde.validate(var)
        return sde


class QuasiPeriodicMatern32(Kernel):
    """Cosine-modulated Matern-3/2: kappa(r) = m32(r) * cos(2 pi r / period).

    The state-space form couples the 2-state Matern-3/2 block with a 2-D
    rotation block through a Kronecker sum, giving state dimension 4. The
    rotation contributes no process noise (skew-symmetric drift), so the
    Lyapunov equation is inherited from the Matern factor.
    """

    variant = "QuasiPeriodicMatern32"

    def __init__(self, variance: float, lengthscales, period: float):
        self._base = Matern32(variance, lengthscales)
        if self._base.input_dim != 1:
            raise InputError("QuasiPeriodicMatern32 is a temporal kernel, needs 1 lengthscale")
        self._period = _check_positive(period, "period")

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def variance(self) -> float:
        return self._base.variance

    @property
    def lengthscales(self) -> np.ndarray:
        return self._base.lengthscales

    @property
    def period(self) -> float:
        return self._period

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        tau = a[:, None, 0] - b[None, :, 0]
        return self._base._k(a, b) * np.cos(2.0 * np.pi * tau / self._period)

    def to_sde(self) -> LtiSde:
        base = self._base.to_sde()
        omega = 2.0 * np.pi / self._period
        rotation = np.array([[0.0, -omega], [omega, 0.0]])
        eye2 = np.eye(2)
        sde = LtiSde(
            F=np.kron(base.F, eye2) + np.kron(np.eye(2), rotation),
            L=np.kron(base.L, eye2),
            Qc=np.kron(np.eye(2), base.Qc),
            H=np.kron(base.H, np.array([[1.0, 0.0]])),
            Pinf=np.kron(base.Pinf, eye2),
        )
        sde.validate(self.variance)
        return sde

    def log_params(self) -> np.ndarray:
        return self._base.log_params()

    def with_log_params(self, theta: np.ndarray) -> "Kernel":
        inner = self._base.with_log_params(theta)
        return QuasiPeriodicMatern32(inner.variance, inner.lengthscales, self._period)

    def to_dict(self) -> dict:
        d = self._base.to_dict()
        d["variant"] = self.variant
        d["period"] = self._period
        return d

    def __repr__(self) -> str:
        return (
            f"QuasiPeriodicMatern32(variance={self.variance:.6g}, "
            f"lengthscales=[{self.lengthscales[0]:.6g}], period={self._period:.6g})"
        )


class _Combination(Kernel):
    variant = ""

    def __init__(self, children):
        children = list(children)
        if len(children) < 2:
            raise InputError(f"{type(self).__name__} needs at least two children")
        dims = {child.input_dim for child in children}
        if len(dims) != 1:
            raise InputError(f"children disagree on input dimension: {sorted(dims)}")
        for child in children:
            if isinstance(child, Separable):
                raise InputError("Separable may appear only at the top level")
        self.children = tuple(children)

    @property
    def input_dim(self) -> int:
        return self.children[0].input_dim

    def log_params(self) -> np.ndarray:
        return np.concatenate([child.log_params() for child in self.children])

    def with_log_params(self, theta: np.ndarray) -> "Kernel":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {theta.size}")
        out, k = [], 0
        for child in self.children:
            n = child.n_params
            out.append(child.with_log_params(theta[k : k + n]))
            k += n
        return type(self)(out)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "children": [c.to_dict() for c in self.children]}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({', '.join(map(repr, self.children))})"


class Sum(_Combination):
    """Plain unweighted sum; the children's variances act as the weights."""

    variant = "Sum"

    @property
    def variance(self) -> float:
        return sum(child.variance for child in self.children)

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = self.children[0]._k(a, b)
        for child in self.children[1:]:
            out = out + child._k(a, b)
        return out

    def to_sde(self) -> LtiSde:
        parts = [child.to_sde() for child in self.children]
        sde = LtiSde(
            F=scipy.linalg.block_diag(*[p.F for p in parts]),
            L=scipy.linalg.block_diag(*[p.L for p in parts]),
            Qc=scipy.linalg.block_diag(*[p.Qc for p in parts]),
            H=np.concatenate([p.H for p in parts], axis=1),
            Pinf=scipy.linalg.block_diag(*[p.Pinf for p in parts]),
        )
        sde.validate(self.variance)
        return sde


class Product(_Combination):
    variant = "Product"

    @property
    def variance(self) -> float:
        out = 1.0
        for child in self.children:
            out *= child.variance
        return out

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = self.children[0]._k(a, b)
        for child in self.children[1:]:
            out = out * child._k(a, b)
        return out

    def to_sde(self) -> LtiSde:
        raise UnsupportedKernelError(
            "Product kernels have no exact state-space form here; "
            "use QuasiPeriodicMatern32 for the cosine-modulated case"
        )


class Separable(Kernel):
    """Top-level product of a spatial kernel and a temporal kernel.

    Points are laid out as ``(x_1, ..., x_s, t)`` with time last. The
    spatial child sees the leading coordinates, the temporal child the
    trailing scalar.
    """

    variant = "Separable"

    def __init__(self, spatial: Kernel, temporal: Kernel):
        if isinstance(spatial, Separable) or isinstance(temporal, Separable):
            raise InputError("Separable may appear only at the top level")
        if temporal.input_dim != 1:
            raise InputError("temporal child must take scalar time")
        self.spatial = spatial
        self.temporal = temporal

    @property
    def input_dim(self) -> int:
        return self.spatial.input_dim + 1

    @property
    def variance(self) -> float:
        return self.spatial.variance * self.temporal.variance

    def _k(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        s = self.spatial.input_dim
        ks = self.spatial._k(a[:, :s], b[:, :s])
        kt = self.temporal._k(a[:, s:], b[:, s:])
        return ks * kt

    def log_params(self) -> np.ndarray:
        return np.concatenate([self.spatial.log_params(), self.temporal.log_params()])

    def with_log_params(self, theta: np.ndarray) -> "Kernel":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {theta.size}")
        ns = self.spatial.n_params
        return Separable(
            self.spatial.with_log_params(theta[:ns]),
            self.temporal.with_log_params(theta[ns:]),
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "children": [self.spatial.to_dict(), self.temporal.to_dict()],
        }

    def __repr__(self) -> str:
        return f"Separable(spatial={self.spatial!r}, temporal={self.temporal!r})"


def eval_kernel(spec: Kernel, a, b) -> float:
    """Covariance between two single points."""
    return spec(a, b)


def kernel_matrix(spec: Kernel, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Cross-covariance matrix; Gram matrix (symmetrized) when ``b`` is omitted."""
    return spec.matrix(a, b)


def to_state_space(spec: Kernel, dt: float) -> tuple[LtiSde, np.ndarray, np.ndarray]:
    """Exact discretization of a temporal kernel on a uniform step.

    Returns ``(sde, A, Q)`` with ``A = expm(F dt)`` (scaling-and-squaring
    Pade approximation) and ``Q = Pinf - A Pinf A'``.
    """
    dt = float(dt)
    if not math.isfinite(dt) or dt < 0.0:
        raise InputError(f"dt must be non-negative and finite, got {dt}")
    sde = spec.to_sde()
    transition = scipy.linalg.expm(sde.F * dt)
    noise = linalg.symmetrize(sde.Pinf - transition @ sde.Pinf @ transition.T)
    return sde, transition, noise


_SIMPLE_VARIANTS = {
    "Matern12": Matern12,
    "Matern32": Matern32,
    "Matern52": Matern52,
}


def kernel_to_dict(spec: Kernel) -> dict:
    return spec.to_dict()


def kernel_from_dict(doc: dict) -> Kernel:
    """Inverse of :func:`kernel_to_dict`; unknown variants raise ``InputError``."""
    if not isinstance(doc, dict):
        raise InputError(f"kernel document must be an object, got {type(doc).__name__}")
    variant = doc.get("variant")
    known = {"Sum", "Product", "Separable", "QuasiPeriodicMatern32", *_SIMPLE_VARIANTS}
    if variant not in known:
        raise InputError(f"unknown kernel variant {variant!r}; expected one of {sorted(known)}")
    allowed = {"variant", "variance", "lengthscales", "period", "children"}
    extra = set(doc) - allowed
    if extra:
        raise InputError(f"unknown kernel field(s) {sorted(extra)} for variant {variant!r}")
    if variant in ("Sum", "Product", "Separable"):
        children = doc.get("children")
        if not isinstance(children, list) or not children:
            raise InputError(f"{variant} requires a non-empty 'children' list")
        parsed = [kernel_from_dict(c) for c in children]
        if variant == "Separable":
            if len(parsed) != 2:
                raise InputError("Separable requires exactly [spatial, temporal] children")
            return Separable(parsed[0], parsed[1])
        return (Sum if variant == "Sum" else Product)(parsed)
    if "variance" not in doc or "lengthscales" not in doc:
        raise InputError(f"{variant} requires 'variance' and 'lengthscales'")
    if variant == "QuasiPeriodicMatern32":
        if "period" not in doc:
            raise InputError("QuasiPeriodicMatern32 requires 'period'")
        return QuasiPeriodicMatern32(doc["variance"], doc["lengthscales"], doc["period"])
    if "period" in doc:
        raise InputError(f"{variant} does not take a 'period'")
    return _SIMPLE_VARIANTS[variant](doc["variance"], doc["lengthscales"])
