"""
Hopfield Network Gradient Flows

This module implements both gradient flow readings of the Hopfield network:

- deterministic natural gradient and mirror descent on the manifold induced
  by the activation functions, with geodesics and Bregman divergences;
- the stochastic "diffusion machine", a Wasserstein proximal recursion over
  weighted point clouds;
- the dual Hopfield method on a load dispatch case study;
- and more…

This code is public domain.
"""

import os
import math
import time
import functools
import dataclasses
import configparser
import argparse
import concurrent.futures
from enum import IntEnum
from typing import Callable, MutableMapping, Any, ClassVar

import numpy as np
from numpy.typing import NDArray
import scipy.special as sps
from scipy import integrate, interpolate, optimize, sparse, spatial, ndimage
import pandas as pd

import logging
log = logging.getLogger("hopflow")

# get module version
from importlib.metadata import version as pkg_version, PackageNotFoundError

try:
    __version__ = pkg_version("HopfieldFlow")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "unknown"

#
# function types
#
# real vector, or batch of vectors with coordinates on the last axis
Vector = NDArray[np.float64]
# objective value(s) at x
ObjectiveFun = Callable[[Vector], Any]
# objective gradient at x, same shape as x
GradientFun = Callable[[Vector], Vector]
# objective hessian at a single point
HessianFun = Callable[[Vector], Vector]
# build an objective from named parameters
ObjectiveFactory = Callable[..., "Objective"]
# cast a configuration string to a value
CastFun = Callable[[str], Any]


#
# ERRORS
#
@dataclasses.dataclass
class FlowError(Exception):
    """Exception class to carry a message and a process exit status.

    All errors raised on purpose by this module derive from this class.
    """
    message: str
    status: int = 1

    def __str__(self):
        return self.message

    # errors must cross process boundaries in Monte Carlo workers
    def __reduce__(self):
        return (self.__class__, tuple(getattr(self, f.name) for f in dataclasses.fields(self)))


@dataclasses.dataclass
class ArgumentError(FlowError, ValueError):
    """Dimension mismatch, bad sizes or unsupported dimension."""
    status: int = 2


@dataclasses.dataclass
class DomainError(FlowError, ValueError):
    """Point on the boundary or outside of the open unit cube."""
    status: int = 3


@dataclasses.dataclass
class NumericError(FlowError):
    """Numerical failure, with diagnostics."""
    status: int = 3
    diagnostics: dict[str, Any] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class ConfigError(FlowError):
    """Bad run configuration."""
    status: int = 2


class _Mode(IntEnum):
    """Running modes."""
    UNDEF = 0
    PROD = 1
    DEV = 2
    DEBUG = 3
    DEBUG1 = 3
    DEBUG2 = 4
    DEBUG3 = 5
    DEBUG4 = 6


_MODES = {
    "debug1": _Mode.DEBUG1,
    "debug2": _Mode.DEBUG2,
    "debug3": _Mode.DEBUG3,
    "debug4": _Mode.DEBUG4,
    "debug": _Mode.DEBUG,
    "dev": _Mode.DEV,
    "prod": _Mode.PROD,
}

# current running mode, see HopfieldFlow._initialize
_mode: _Mode = _Mode.PROD


def _set_mode(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise _Bad(f"unexpected mode: {mode}")
    _mode = _MODES[mode]
    if _mode >= _Mode.DEBUG:
        log.setLevel(logging.DEBUG)


def _Bad(msg: str) -> ConfigError:
    """Build and trace an exception on a bad configuration."""
    log.critical(msg)
    return ConfigError(msg)


def _Err(msg: str, **diagnostics) -> NumericError:
    """Build and trace a numeric failure with its diagnostics."""
    if _mode >= _Mode.DEBUG3:
        log.debug(f"numeric error: {msg} {diagnostics}")
    return NumericError(msg, diagnostics=diagnostics)


#
# DIRECTIVES
#
# significant default settings are centralized here
class Directives:
    """Documentation for configuration keys.

    This class presents *all* configuration keys, their expected type and
    default value. Keys are set in a configuration file, in the ``[run]``
    section for common keys or in the section named after the subcommand,
    or with the command line flag of the same name.
    """

    # common settings, [run] section
    mode: str = "prod"
    """Execution mode.

    - ``prod``: default terse mode.
    - ``dev``: adds progress and cache statistics.
    - ``debug1`` to ``debug4``: increasing debug, up to fixed point sweeps.
    """

    logging_level: str = "INFO"
    """Module internal logging level, by name or number.

    Ignored in debug modes which set ``DEBUG``.
    """

    seed: int = 0
    """Seed of all random generators of a run."""

    output: str = "."
    """Output directory for CSV files.

    Environment variable ``HOPFIELD_FLOW_OUTPUT`` overrides the file setting.
    """

    record_time: bool = True
    """Whether to record wall-clock step durations.

    Set to *False* for byte-identical outputs across runs.
    """

    plot: bool = False
    """Whether to write a gnuplot script next to each CSV file."""

    cache: str = "lru"
    """Cache type for quadrature results.

    - ``none``: no caching.
    - ``lru``, ``lfu``, ``fifo``, ``rr``: cachetools strategies.
    - ``dict``: unbounded.
    """

    cache_size: int = 65536
    """Maximum number of cached entries."""

    # activation settings
    activation: str = "soft_projection"
    """Activation function family: ``soft_projection``, ``logistic`` or ``tabulated``."""

    beta: list[float] = [0.25]
    """Steepness, one value for all coordinates or one value per coordinate."""

    table: str = ""
    """CSV file with ``hidden`` and ``value`` columns for ``tabulated`` activations.

    Empty means the identity table from [0, 1] to [0, 1], i.e. a Euclidean metric.
    """

    # objective settings
    objective: str = "himmelblau"
    """Objective name in the registry: ``himmelblau``, ``quadratic``, ``linear``, ``constant``."""

    center: list[float] = [0.5]
    """Center of the ``quadratic`` objective."""

    weights: list[float] = [1.0]
    """Nonnegative weights of the ``linear`` objective."""

    # descend settings
    method: str = "natural"
    """Descent method: ``natural``, ``mirror``, ``prox`` or ``ode`` (RK4 flow)."""

    x0: list[float] = [0.5, 0.5]
    """Starting point in the open unit cube."""

    h: float = 1e-3
    """Time step."""

    steps: int = 1000
    """Number of steps."""

    ref: list[float] = []
    """Reference point for distance traces, empty for the final iterate."""

    # geodesic settings
    x: list[float] = [0.25]
    """Geodesic start point."""

    y: list[float] = [0.75]
    """Geodesic end point."""

    samples: int = 11
    """Number of curve samples, including both ends."""

    # dispatch settings
    n_G: int = 40
    """Number of generators."""

    r: float = 1.0
    """Augmentation weight."""

    h_hopfield: float = 1e-2
    """Step of the Hopfield sub-iterations."""

    h_dual: float = 1e-1
    """Step of the dual ascent."""

    tol: float = 1e-7
    """Sub-iteration tolerance on successive iterates."""

    max_subiters: int = 10000
    """Maximum number of Hopfield sub-iterations per outer iteration."""

    max_outer: int = 500
    """Maximum number of outer iterations."""

    outer_tol: float = 1e-3
    """Residual threshold for outer convergence."""

    restarts: int = 100
    """Number of Monte Carlo restarts from random multipliers."""

    workers: int = 1
    """Number of worker processes for Monte Carlo restarts."""

    # diffuse settings
    n: int = 2
    """State dimension."""

    T: float = 25.0
    """Annealing temperature."""

    N: int = 500
    """Number of particles."""

    eps: float = 0.1
    """Entropic regularization of the proximal recursion."""

    snapshot_every: int = 100
    """Cloud snapshot period, in steps."""

    fp_tol: float = 1e-9
    """Scaling fixed point tolerance."""

    max_fixed_point_iters: int = 5000
    """Maximum number of scaling fixed point sweeps."""

    knn: int = 8
    """Number of neighbors of the free energy entropy estimator."""


#
# CACHE
#
class _CacheManager:
    """Internal cache management."""

    def __init__(self):
        self._cache: MutableMapping[str, Any]|None = None
        self._wrapped: dict[str, Callable] = {}
        self._prefixes: set[str] = set()
        self._initialized = False

    def _initialize(self, cache: str = Directives.cache, size: int = Directives.cache_size):
        """Build the storage tier, possibly again with new settings."""

        if self._initialized:
            log.debug("reinitializing cache manager…")
        self._wrapped.clear()

        if not cache or cache == "none":
            log.warning("Cache management is disactivated")
            self._cache = None
            self._initialized = True
            return

        # NOTE no try/except because the dependency is mandatory
        import cachetools as ct
        import CacheToolsUtils as ctu  # type: ignore

        if cache == "lru":
            rcache: MutableMapping = ct.LRUCache(size)
        elif cache == "lfu":
            rcache = ct.LFUCache(size)
        elif cache == "fifo":
            rcache = ct.FIFOCache(size)
        elif cache == "rr":
            rcache = ct.RRCache(size)
        elif cache == "dict":
            rcache = dict()
        else:
            raise _Bad(f"unexpected cache: {cache}")
        self._cache = ctu.StatsCache(rcache)
        self._initialized = True

    def _set_cache(self, prefix: str, key: Callable[..., str]):
        """Decorator to cache function calls with a prefix, bound on first call."""

        if prefix in self._prefixes:  # pragma: no cover
            raise _Bad(f"Cache prefix \"{prefix}\" is already used")
        self._prefixes.add(prefix)

        def decorate(fun: Callable):

            @functools.wraps(fun)
            def wrapper(*args):
                cached = self._wrapped.get(prefix)
                if cached is None:
                    if not self._initialized:
                        self._initialize()
                    if self._cache is None:
                        cached = fun
                    else:
                        import cachetools
                        import CacheToolsUtils as ctu
                        pcache = ctu.PrefixedCache(self._cache, prefix)
                        cached = cachetools.cached(cache=pcache, key=key)(fun)
                    self._wrapped[prefix] = cached
                return cached(*args)

            return wrapper

        return decorate

    def _stats(self) -> str:
        if self._cache is None:
            return "no cache"
        return f"{len(self._cache)} entries, hit rate {self._cache.hits():.3f}"  # type: ignore


_cm = _CacheManager()


def clear_caches() -> None:
    """Drop all cached quadrature results."""
    if _cm._cache is not None:
        _cm._cache.clear()


#
# ACTIVATION METRIC
#
# metric operations reject points this close to the boundary
_BOUNDARY = 1e-12
# boundary-safe dynamics clamp to [_MARGIN, 1 - _MARGIN]
_MARGIN = 1e-9
# absolute and relative quadrature tolerance
_QUAD_TOL = 1e-10

ACTIVATIONS = ("soft_projection", "logistic", "tabulated")


def _clamp(x: Vector) -> Vector:
    return np.clip(x, _MARGIN, 1.0 - _MARGIN)


def _broadcast(values, dim: int|None, what: str = "beta") -> Vector:
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if v.ndim != 1 or v.size == 0:
        raise ArgumentError(f"{what} must be a non empty vector")
    if dim is not None and v.size != dim:
        if v.size != 1:
            raise ArgumentError(f"{what}: expecting 1 or {dim} values, got {v.size}")
        v = np.full(dim, v[0])
    return v


@dataclasses.dataclass(frozen=True, eq=False)
class Activation:
    """Componentwise activation σ: ℝⁿ → (0,1)ⁿ and the diagonal metric it induces.

    - ``soft_projection``: σ(u) = ½ tanh(β(u − ½)) + ½
    - ``logistic``: σ(u) = 1 / (1 + exp(−βu))
    - ``tabulated``: monotone cubic interpolation of a strictly increasing
      table, shared by all coordinates, constant outside the table.

    The metric is g_ii(x) = 1 / σ′(σ⁻¹(x_i)).
    Use class methods ``soft_projection``, ``logistic`` and ``tabulated``.
    """
    kind: str
    beta: Vector
    hidden: Vector|None = None
    values: Vector|None = None

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ArgumentError(f"unexpected activation: {self.kind}")
        beta = _broadcast(self.beta, None)
        if not np.all(np.isfinite(beta) & (beta > 0)):
            raise ArgumentError("beta must be positive")
        object.__setattr__(self, "beta", beta)
        if self.kind == "tabulated":
            if self.hidden is None or self.values is None:
                raise ArgumentError("tabulated activation requires a table")
            hidden = np.asarray(self.hidden, dtype=np.float64)
            values = np.asarray(self.values, dtype=np.float64)
            if hidden.ndim != 1 or hidden.shape != values.shape or hidden.size < 2:
                raise ArgumentError("table must hold two vectors of the same length ≥ 2")
            if np.any(np.diff(hidden) <= 0) or np.any(np.diff(values) <= 0):
                raise ArgumentError("table must be strictly increasing")
            if values[0] < 0.0 or values[-1] > 1.0:
                raise ArgumentError("table values must lie in [0, 1]")
            spline = interpolate.PchipInterpolator(hidden, values, extrapolate=False)
            object.__setattr__(self, "hidden", hidden)
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "_spline", spline)
            object.__setattr__(self, "_d1", spline.derivative(1))
            object.__setattr__(self, "_d2", spline.derivative(2))

    @classmethod
    def soft_projection(cls, beta, dim: int|None = None) -> "Activation":
        return cls("soft_projection", _broadcast(beta, dim))

    @classmethod
    def logistic(cls, beta, dim: int|None = None) -> "Activation":
        return cls("logistic", _broadcast(beta, dim))

    @classmethod
    def tabulated(cls, hidden, values, dim: int = 1) -> "Activation":
        return cls("tabulated", np.ones(dim), np.asarray(hidden), np.asarray(values))

    @property
    def dim(self) -> int:
        return self.beta.size

    @functools.cached_property
    def key(self) -> str:
        """Identification string for caches."""
        key = f"{self.kind}:{self.beta.tolist()}"
        if self.kind == "tabulated":
            assert self.hidden is not None and self.values is not None  # mypy…
            key += f":{hash((self.hidden.tobytes(), self.values.tobytes()))}"
        return key

    #
    # argument checks
    #
    def _point(self, x) -> Vector:
        v = np.asarray(x, dtype=np.float64)
        if v.ndim == 0 and self.dim == 1:
            v = v.reshape(1)
        if v.ndim == 0 or v.shape[-1] != self.dim:
            raise ArgumentError(f"dimension mismatch: expecting {self.dim}, got shape {v.shape}")
        return v

    def _interior(self, x) -> Vector:
        v = self._point(x)
        if not np.all((v >= _BOUNDARY) & (v <= 1.0 - _BOUNDARY)):
            raise DomainError(f"point not strictly inside the unit cube: {v.tolist() if v.size <= 8 else '…'}")
        return v

    #
    # per-coordinate formulas, b is the steepness broadcastable to u or x
    #
    def _sigma(self, u, b):
        if self.kind == "soft_projection":
            return sps.expit(2.0 * b * (u - 0.5))
        elif self.kind == "logistic":
            return sps.expit(b * u)
        else:
            return self._spline(np.clip(u, self.hidden[0], self.hidden[-1]))  # type: ignore

    def _dsigma(self, u, b):
        """σ′(u)"""
        if self.kind == "tabulated":
            return self._d1(np.clip(u, self.hidden[0], self.hidden[-1]))  # type: ignore
        s = self._sigma(u, b)
        return (2.0 * b if self.kind == "soft_projection" else b) * s * (1.0 - s)

    def _ratio(self, u, b):
        """σ″(u) / σ′(u)"""
        if self.kind == "tabulated":
            uc = np.clip(u, self.hidden[0], self.hidden[-1])  # type: ignore
            return self._d2(uc) / self._d1(uc)  # type: ignore
        s = self._sigma(u, b)
        return (2.0 * b if self.kind == "soft_projection" else b) * (1.0 - 2.0 * s)

    def _inverse(self, x, b):
        if self.kind == "soft_projection":
            return 0.5 + sps.logit(x) / (2.0 * b)
        elif self.kind == "logistic":
            return sps.logit(x) / b
        else:
            return self._table_inverse(x)

    # TODO switch to scipy.optimize.elementwise.find_root when scipy >= 1.15 is required
    def _table_inverse(self, x) -> Vector:
        assert self.hidden is not None and self.values is not None  # mypy…
        lo, hi = self.hidden[0], self.hidden[-1]
        vlo, vhi = self.values[0], self.values[-1]

        def invert(v: float) -> float:
            if not vlo <= v <= vhi:
                raise DomainError(f"value outside the activation table range: {v}")
            if v == vlo:
                return lo
            if v == vhi:
                return hi
            return optimize.bisect(lambda u: float(self._spline(u)) - v, lo, hi, xtol=1e-14)  # type: ignore

        return np.vectorize(invert, otypes=[np.float64])(x)

    #
    # public evaluators
    #
    def sigma(self, x_hidden) -> Vector:
        """σ(x_H), in [0,1]ⁿ."""
        return self._sigma(self._point(x_hidden), self.beta)

    def inverse(self, x) -> Vector:
        """σ⁻¹(x) for interior x."""
        return self._inverse(self._interior(x), self.beta)

    def derivative(self, x_hidden) -> Vector:
        """σ′(x_H)."""
        return self._dsigma(self._point(x_hidden), self.beta)

    def ginv(self, x) -> Vector:
        """Inverse metric diagonal g^ii(x) = σ′(σ⁻¹(x))."""
        x = self._interior(x)
        if self.kind == "soft_projection":
            g_inv = 2.0 * self.beta * x * (1.0 - x)
        elif self.kind == "logistic":
            g_inv = self.beta * x * (1.0 - x)
        else:
            g_inv = self._dsigma(self._table_inverse(x), self.beta)
            if not np.all(g_inv > 0):
                raise DomainError("flat activation table segment, metric is singular")
        return g_inv

    def dginv(self, x) -> Vector:
        """Metric derivative ∂g^ii/∂x_i = σ″(σ⁻¹(x)) / σ′(σ⁻¹(x))."""
        x = self._interior(x)
        if self.kind == "soft_projection":
            return 2.0 * self.beta * (1.0 - 2.0 * x)
        elif self.kind == "logistic":
            return self.beta * (1.0 - 2.0 * x)
        else:
            return self._ratio(self._table_inverse(x), self.beta)

    def _closed_potential(self, x) -> Vector|None:
        """Closed form antiderivative of √g_ii, zero at ½, if any."""
        if self.kind == "soft_projection":
            scale = np.sqrt(2.0 / self.beta)
        elif self.kind == "logistic":
            scale = 2.0 / np.sqrt(self.beta)
        else:
            return None
        return scale * (np.arcsin(np.sqrt(x)) - 0.25 * math.pi)


@dataclasses.dataclass(frozen=True, eq=False)
class MetricDiagonal:
    """Diagonal metric tensor at a point, with its inverse."""
    g: Vector
    g_inv: Vector
    at: Vector


def sigma_apply(act: Activation, x_hidden) -> Vector:
    """Map hidden states to the unit cube."""
    return act.sigma(x_hidden)


def sigma_inverse(act: Activation, x) -> Vector:
    """Map interior points back to hidden states."""
    return act.inverse(x)


def metric_at(act: Activation, x) -> MetricDiagonal:
    """Diagonal metric g and its inverse at interior point x."""
    x = act._interior(x)
    g_inv = act.ginv(x)
    return MetricDiagonal(g=1.0 / g_inv, g_inv=g_inv, at=x)


#
# GEOMETRY
#
def christoffel(act: Activation, x) -> Vector:
    """Christoffel symbols Γ^i_ii = ∂/∂x_i log √g_ii, the only non zero ones."""
    x = act._interior(x)
    return -0.5 * act.dginv(x) / act.ginv(x)


@_cm._set_cache("p.", key=lambda act, i, s: f"{act.key}/{i}/{s!r}")
def _potential_1d(act: Activation, i: int, s: float) -> float:
    """∫ √g_ii from ½ to s, as ∫ √σ′ over the hidden coordinate."""
    b = float(act.beta[i])
    lo = float(act._inverse(np.array(0.5), b))
    hi = float(act._inverse(np.array(s), b))
    val, err = integrate.quad(
        lambda u: math.sqrt(act._dsigma(u, b)), lo, hi, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200
    )
    return val


def _quadrature_potential(act: Activation, x: Vector) -> Vector:
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        out[idx] = _potential_1d(act, idx[-1], float(x[idx]))
    return out


@_cm._set_cache("s.", key=lambda act: act.key)
def _closed_form_ok(act: Activation) -> bool:
    """Self-test of the closed form distance against quadrature."""
    if act.kind == "tabulated":
        return False
    samples = np.array([1e-4, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1 - 1e-4])
    pts = np.repeat(samples[:, None], act.dim, axis=1)
    closed = act._closed_potential(pts)
    quad = _quadrature_potential(act, pts)
    err = float(np.max(np.abs(closed - quad) / np.maximum(np.abs(quad), 1.0)))
    if err > 1e-6:
        log.warning(f"closed form distance mismatch for {act.kind}: {err:.3g}, using quadrature")
        return False
    log.debug(f"closed form distance self-test passed for {act.kind} ({err:.3g})")
    return True


def potential(act: Activation, x, method: str = "auto") -> Vector:
    """Per-coordinate antiderivative Φ_i of √g_ii, zero at ½.

    The geodesic distance is d_G(x, y)² = Σ (Φ_i(y_i) − Φ_i(x_i))².

    - ``quadrature``: canonical, adaptive quadrature with tolerance 1e-10.
    - ``closed_form``: only for soft projection and logistic.
    - ``auto``: closed form when its self-test against quadrature passed.
    """
    x = act._interior(x)
    if method == "auto":
        method = "closed_form" if _closed_form_ok(act) else "quadrature"
    if method == "quadrature":
        return _quadrature_potential(act, x)
    elif method == "closed_form":
        closed = act._closed_potential(x)
        if closed is None:
            raise ArgumentError(f"no closed form distance for {act.kind}")
        return closed
    else:
        raise ArgumentError(f"unexpected distance method: {method}")


@dataclasses.dataclass(frozen=True, eq=False)
class GeodesicCurve:
    """Geodesic from x to y, parameterized on [0, 1].

    ``t`` and ``points`` hold the requested samples; the curve, its velocity
    and acceleration may be evaluated anywhere.
    """
    x: Vector
    y: Vector
    t: Vector
    points: Vector
    closed_form: bool
    _gamma: Callable = dataclasses.field(repr=False)
    _velocity: Callable = dataclasses.field(repr=False)
    _acceleration: Callable = dataclasses.field(repr=False)
    _speed2: Callable = dataclasses.field(repr=False)

    def __call__(self, t) -> Vector:
        return self._gamma(np.asarray(t, dtype=np.float64))

    def velocity(self, t) -> Vector:
        return self._velocity(np.asarray(t, dtype=np.float64))

    def acceleration(self, t) -> Vector:
        return self._acceleration(np.asarray(t, dtype=np.float64))

    def speed2(self, t) -> Vector:
        """Per-coordinate squared metric speed g_ii γ̇_i²."""
        return self._speed2(np.asarray(t, dtype=np.float64))

    def residual(self, act: Activation, t) -> float:
        """Largest residual of γ̈ + Γ(γ) γ̇² at parameters t."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        v = self.velocity(t)
        return float(np.max(np.abs(self.acceleration(t) + christoffel(act, self(t)) * v * v)))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.points, columns=[f"x_{i+1}" for i in range(self.x.size)])
        frame.insert(0, "t", self.t)
        return frame


def _closed_geodesic(x: Vector, y: Vector, t: Vector, scale: Vector) -> GeodesicCurve:
    a, b = np.arcsin(np.sqrt(x)), np.arcsin(np.sqrt(y))
    delta = b - a

    def theta(s):
        return np.expand_dims(1.0 - s, -1) * a + np.expand_dims(s, -1) * b

    def gamma(s):
        return np.sin(theta(s)) ** 2

    def velocity(s):
        return np.sin(2.0 * theta(s)) * delta

    def acceleration(s):
        return 2.0 * np.cos(2.0 * theta(s)) * delta ** 2

    def speed2(s):
        return np.broadcast_to(scale ** 2 * delta ** 2, s.shape + delta.shape)

    return GeodesicCurve(x, y, t, gamma(t), True, gamma, velocity, acceleration, speed2)


def _rk4_step(fun: Callable[[Vector], Vector], y: Vector, h: float) -> Vector:
    k1 = fun(y)
    k2 = fun(y + 0.5 * h * k1)
    k3 = fun(y + 0.5 * h * k2)
    k4 = fun(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# shooting integrates at least this many RK4 steps
_SHOOTING_STEPS = 512
_BISECTION_STEPS = 200


def _shooting_geodesic(act: Activation, x: Vector, y: Vector, t: Vector) -> GeodesicCurve:
    """Decoupled two-point problems solved in hidden coordinates.

    With x = σ(u), the line element is σ′(u) du², so each coordinate follows
    ü = −½ (σ″/σ′)(u) u̇², integrated by RK4, the initial slope being found
    by bisection.
    """
    b = act.beta
    u0, u1 = act._inverse(x, b), act._inverse(y, b)
    intervals = t.size - 1
    steps = intervals * math.ceil(_SHOOTING_STEPS / intervals)
    dt = 1.0 / steps

    def field(state):
        u, v = state
        return np.stack([v, -0.5 * act._ratio(u, b) * v * v])

    def shoot(slopes, dense=False):
        state = np.stack([u0, slopes])
        track = [state] if dense else []
        for _ in range(steps):
            state = _rk4_step(field, state, dt)
            if dense:
                track.append(state)
        return np.array(track) if dense else state[0]

    def miss(slopes):
        return act._sigma(shoot(slopes), b) - y

    # constant metric speed gives a nearly exact first guess
    dist = potential(act, y) - potential(act, x)
    guess = dist / np.sqrt(act._dsigma(u0, b))
    width = 1e-6 * np.abs(guess) + 1e-12
    lo, hi = guess - width, guess + width
    for _ in range(60):
        mlo, mhi = miss(lo), miss(hi)
        bad_lo, bad_hi = mlo > 0, mhi < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.where(bad_lo | bad_hi, 2.0 * width, width)
        lo = np.where(bad_lo, guess - width, lo)
        hi = np.where(bad_hi, guess + width, hi)
    else:  # pragma: no cover
        raise _Err("geodesic shooting could not bracket the initial slope", x=x.tolist(), y=y.tolist())

    for iteration in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        err = miss(mid)
        if np.max(np.abs(err)) < 1e-10:
            break
        lo, hi = np.where(err < 0, mid, lo), np.where(err < 0, hi, mid)
    else:
        raise _Err("geodesic shooting did not converge", iterations=_BISECTION_STEPS,
                   miss=np.abs(err).tolist(), x=x.tolist(), y=y.tolist())
    if _mode >= _Mode.DEBUG2:
        log.debug(f"geodesic shooting converged in {iteration} bisection steps")

    track = shoot(mid, dense=True)
    nodes = np.linspace(0.0, 1.0, steps + 1)
    u_nodes, v_nodes = track[:, 0, :], track[:, 1, :]
    a_nodes = -0.5 * act._ratio(u_nodes, b) * v_nodes * v_nodes
    u_spline = interpolate.CubicHermiteSpline(nodes, u_nodes, v_nodes, axis=0)
    v_spline = interpolate.CubicHermiteSpline(nodes, v_nodes, a_nodes, axis=0)
    dv_spline = v_spline.derivative()

    def gamma(s):
        return act._sigma(u_spline(s), b)

    def velocity(s):
        return act._dsigma(u_spline(s), b) * v_spline(s)

    def acceleration(s):
        u, v = u_spline(s), v_spline(s)
        d1 = act._dsigma(u, b)
        return act._ratio(u, b) * d1 * v * v + d1 * dv_spline(s)

    def speed2(s):
        return act._dsigma(u_spline(s), b) * v_spline(s) ** 2

    return GeodesicCurve(x, y, t, gamma(t), False, gamma, velocity, acceleration, speed2)


def geodesic_solve(act: Activation, x, y, samples: int = 11) -> GeodesicCurve:
    """Geodesic between interior points x and y.

    Closed form γ_i(t) = sin²((1−t) arcsin√x_i + t arcsin√y_i) for soft
    projection, RK4 shooting with bisection on the initial slope otherwise.
    """
    x, y = act._interior(x), act._interior(y)
    if x.ndim != 1 or y.ndim != 1:
        raise ArgumentError("geodesic endpoints must be single points")
    if samples < 2:
        raise ArgumentError(f"samples must be at least 2: {samples}")
    t = np.linspace(0.0, 1.0, samples)
    if act.kind == "soft_projection":
        return _closed_geodesic(x, y, t, np.sqrt(2.0 / act.beta))
    return _shooting_geodesic(act, x, y, t)


def geodesic_length(act: Activation, curve: GeodesicCurve) -> float:
    """Arc length of a solved curve by adaptive quadrature."""
    val, err = integrate.quad(
        lambda s: math.sqrt(float(np.sum(curve.speed2(np.array(s))))),
        0.0, 1.0, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200,
    )
    return val


def geodesic_distance(act: Activation, x, y, method: str = "auto") -> float:
    """Geodesic distance d_G(x, y) between interior points.

    ``curve`` integrates the arc length along ``geodesic_solve``'s curve;
    other methods use the separable per-coordinate potentials, see ``potential``.
    """
    x, y = act._interior(x), act._interior(y)
    if method == "curve":
        return geodesic_length(act, geodesic_solve(act, x, y))
    delta = potential(act, y, method) - potential(act, x, method)
    return float(np.sqrt(np.sum(delta * delta)))


#
# MIRROR
#
MIRRORS = ("bit_entropy", "euclidean")


@dataclasses.dataclass(frozen=True, eq=False)
class MirrorMapPair:
    """Conjugate pair (ψ, ψ*) of mirror maps.

    - ``bit_entropy``: ψ(z) = Σ log(1 + exp(2β_i z_i)) / (2β_i) on the dual
      space, ψ*(x) = Σ [x_i log x_i + (1 − x_i) log(1 − x_i)] / (2β_i) + κ Π x_i
      on the open unit cube, so that ∇²ψ* is the soft projection metric.
    - ``euclidean``: ψ = ψ* = ½‖·‖², mirror descent is gradient descent.

    The inverse of ∇ψ* is only closed for κ = 0, a root solve is used otherwise.
    """
    kind: str
    beta: Vector
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in MIRRORS:
            raise ArgumentError(f"unexpected mirror map: {self.kind}")
        beta = _broadcast(self.beta, None)
        if not np.all(np.isfinite(beta) & (beta > 0)):
            raise ArgumentError("beta must be positive")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def bit_entropy(cls, beta, dim: int|None = None, kappa: float = 0.0) -> "MirrorMapPair":
        return cls("bit_entropy", _broadcast(beta, dim), kappa)

    @classmethod
    def euclidean(cls, dim: int) -> "MirrorMapPair":
        return cls("euclidean", np.ones(dim))

    @classmethod
    def from_activation(cls, act: Activation) -> "MirrorMapPair":
        """The pair whose ψ* hessian is the metric of a soft projection."""
        if act.kind != "soft_projection":
            raise ArgumentError(f"no mirror map pair for {act.kind} activation")
        return cls.bit_entropy(act.beta)

    @property
    def dim(self) -> int:
        return self.beta.size

    def _vector(self, z) -> Vector:
        v = np.atleast_1d(np.asarray(z, dtype=np.float64))
        if v.shape != (self.dim,):
            raise ArgumentError(f"dimension mismatch: expecting {self.dim}, got shape {v.shape}")
        return v

    def _primal(self, x) -> Vector:
        v = self._vector(x)
        if self.kind == "bit_entropy" and not np.all((v >= _BOUNDARY) & (v <= 1.0 - _BOUNDARY)):
            raise DomainError(f"primal point not strictly inside the unit cube: {v.tolist()}")
        return v

    def psi(self, z) -> float:
        z = self._vector(z)
        if self.kind == "euclidean":
            return 0.5 * float(z @ z)
        if self.kappa == 0.0:
            b2 = 2.0 * self.beta
            return float(np.sum(np.logaddexp(0.0, b2 * z) / b2))
        # conjugacy: ψ(z) = ⟨x, z⟩ − ψ*(x) at x = ∇ψ(z)
        x = self.grad_psi(z)
        return float(x @ z) - self.psi_star(x)

    def psi_star(self, x) -> float:
        x = self._primal(x)
        if self.kind == "euclidean":
            return 0.5 * float(x @ x)
        ent = (sps.xlogy(x, x) + sps.xlogy(1.0 - x, 1.0 - x)) / (2.0 * self.beta)
        return float(np.sum(ent)) + self.kappa * float(np.prod(x))

    def grad_psi(self, z) -> Vector:
        z = self._vector(z)
        if self.kind == "euclidean":
            return z.copy()
        if self.kappa == 0.0:
            return sps.expit(2.0 * self.beta * z)
        b2, kappa = 2.0 * self.beta, self.kappa

        # solve ∇ψ*(x) = z over w = logit(x)
        def equation(w):
            x = sps.expit(w)
            return w / b2 + kappa * _others_product(x) - z

        sol = optimize.root(equation, b2 * z, method="hybr", options={"xtol": 1e-14})
        if not sol.success:
            raise _Err("mirror map inversion failed", message=sol.message, z=z.tolist())
        return sps.expit(sol.x)

    def grad_psi_star(self, x) -> Vector:
        x = self._primal(x)
        if self.kind == "euclidean":
            return x.copy()
        z = sps.logit(x) / (2.0 * self.beta)
        if self.kappa != 0.0:
            z = z + self.kappa * _others_product(x)
        return z


def _others_product(x: Vector) -> Vector:
    """Π_{j≠i} x_j for each i."""
    return np.array([np.prod(np.delete(x, i)) for i in range(x.size)])


def bregman(pair: MirrorMapPair, which: str, a, b) -> float:
    """Bregman divergence D(a, b) = φ(a) − φ(b) − ⟨a − b, ∇φ(b)⟩ of φ = ψ or ψ*."""
    if which == "psi":
        a, b = pair._vector(a), pair._vector(b)
        value = pair.psi(a) - pair.psi(b) - float((a - b) @ pair.grad_psi(b))
    elif which == "psi_star":
        a, b = pair._primal(a), pair._primal(b)
        if pair.kind == "bit_entropy" and pair.kappa == 0.0:
            # weighted sum of logistic losses
            loss = sps.rel_entr(a, b) + sps.rel_entr(1.0 - a, 1.0 - b)
            value = float(np.sum(loss / (2.0 * pair.beta)))
        else:
            value = pair.psi_star(a) - pair.psi_star(b) - float((a - b) @ pair.grad_psi_star(b))
    else:
        raise ArgumentError(f"unexpected bregman branch: {which}")
    return max(value, 0.0)


def to_dual(pair: MirrorMapPair, x) -> Vector:
    """z = ∇ψ*(x)"""
    return pair.grad_psi_star(x)


def to_primal(pair: MirrorMapPair, z) -> Vector:
    """x = ∇ψ(z)"""
    return pair.grad_psi(z)


def _gradient(obj: "Objective", x: Vector) -> Vector:
    grad = np.asarray(obj.grad(x), dtype=np.float64)
    if grad.shape != x.shape:
        raise ArgumentError(f"gradient shape mismatch: {grad.shape} instead of {x.shape}")
    if not np.all(np.isfinite(grad)):
        raise _Err(f"non-finite gradient of {obj.name}", at=x.tolist() if x.size <= 16 else None)
    return grad


def mirror_step(pair: MirrorMapPair, grad_f: GradientFun, z, h: float) -> Vector:
    """Mirror descent step in dual coordinates, z′ = z − h ∇f(∇ψ(z)).

    The dual constraint set is ℝⁿ, so the Bregman projection is the identity.
    """
    if not h > 0:
        raise ArgumentError(f"step must be positive: {h}")
    z = pair._vector(z)
    grad = np.asarray(grad_f(pair.grad_psi(z)), dtype=np.float64)
    if grad.shape != z.shape:
        raise ArgumentError(f"gradient shape mismatch: {grad.shape} instead of {z.shape}")
    if not np.all(np.isfinite(grad)):
        raise _Err("non-finite gradient in mirror step", z=z.tolist())
    return z - h * grad


#
# FLOWS
#
@dataclasses.dataclass(frozen=True, eq=False)
class Objective:
    """Differentiable objective on the unit cube.

    Evaluators work on single points or on batches with coordinates on the
    last axis, except the hessian which takes a single point.
    """
    name: str
    dim: int|None
    f: ObjectiveFun
    grad: GradientFun
    hess: HessianFun|None = None
    descent_step: float = 1e-4
    """Natural gradient steps up to this size decrease f, for β ≤ 1."""

    def __call__(self, x) -> Any:
        return self.f(np.asarray(x, dtype=np.float64))

    def hessian(self, x) -> Vector:
        x = np.asarray(x, dtype=np.float64)
        if self.hess is not None:
            return np.asarray(self.hess(x), dtype=np.float64)
        # numerical jacobian of the gradient, symmetrized
        step = math.sqrt(np.finfo(np.float64).eps)
        jac = np.array([
            optimize.approx_fprime(x, lambda v, i=i: float(self.grad(v)[i]), step)
            for i in range(x.size)
        ])
        return 0.5 * (jac + jac.T)


_OBJECTIVES: dict[str, ObjectiveFactory] = {}


def register_objective(name: str, factory: ObjectiveFactory|None = None):
    """Add an objective factory to the registry, can be used as a decorator."""
    if _mode >= _Mode.DEBUG2:
        log.debug(f"registering objective {name} ({factory})")
    if factory:  # direct
        if name in _OBJECTIVES:
            log.warning(f"overriding objective factory for {name}")
        _OBJECTIVES[name] = factory
        return factory
    else:

        def decorate(fun: ObjectiveFactory):
            assert fun is not None
            register_objective(name, fun)
            return fun

        return decorate


def objective(name: str, **params) -> "Objective":
    """Build a registered objective."""
    if name not in _OBJECTIVES:
        raise ArgumentError(f"unknown objective: {name}")
    return _OBJECTIVES[name](**params)


def objectives() -> list[str]:
    return sorted(_OBJECTIVES)


def himmelblau(x1, x2):
    """Himmelblau function rescaled from [−5, 5]² to [0, 1]²."""
    u, v = 10.0 * x1 - 5.0, 10.0 * x2 - 5.0
    return (u * u + 10.0 * x2 - 16.0) ** 2 + (10.0 * x1 - 12.0 + v * v) ** 2


@register_objective("himmelblau")
def _himmelblau_objective() -> Objective:

    def f(x):
        return himmelblau(x[..., 0], x[..., 1])

    def parts(x):
        u, v = 10.0 * x[..., 0] - 5.0, 10.0 * x[..., 1] - 5.0
        return u, v, u * u + 10.0 * x[..., 1] - 16.0, 10.0 * x[..., 0] - 12.0 + v * v

    def grad(x):
        u, v, a, b = parts(x)
        return np.stack([40.0 * u * a + 20.0 * b, 20.0 * a + 40.0 * v * b], axis=-1)

    def hess(x):
        u, v, a, b = parts(x)
        h12 = 400.0 * (u + v)
        return np.array([[800.0 * u * u + 400.0 * a + 200.0, h12],
                         [h12, 800.0 * v * v + 400.0 * b + 200.0]])

    return Objective("himmelblau", 2, f, grad, hess, descent_step=2e-4)


@register_objective("quadratic")
def _quadratic_objective(center=0.5, dim: int|None = None) -> Objective:
    c = _broadcast(center, dim, "center")

    def f(x):
        d = x - c
        return 0.5 * np.sum(d * d, axis=-1)

    return Objective("quadratic", c.size, f, lambda x: x - c, lambda x: np.eye(c.size), descent_step=1.0)


@register_objective("linear")
def _linear_objective(weights=1.0, dim: int|None = None) -> Objective:
    p = _broadcast(weights, dim, "weights")
    if np.any(p < 0):
        raise ArgumentError("linear objective weights must be nonnegative")

    return Objective("linear", p.size, lambda x: x @ p, lambda x: np.broadcast_to(p, x.shape).copy(),
                     lambda x: np.zeros((p.size, p.size)), descent_step=math.inf)


@register_objective("constant")
def _constant_objective(value: float = 0.0, dim: int|None = None) -> Objective:
    if value < 0:
        raise ArgumentError("constant objective must be nonnegative")

    return Objective("constant", dim, lambda x: np.full(np.shape(x)[:-1], value),
                     lambda x: np.zeros_like(x), lambda x: np.zeros((x.size, x.size)), descent_step=math.inf)


@functools.cache
def himmelblau_minima() -> Vector:
    """The four local minima of the rescaled Himmelblau function in [0, 1]².

    Brute-force 1000×1000 grid search, then Newton polish on the gradient.
    """
    obj = objective("himmelblau")
    grid = np.linspace(0.0, 1.0, 1000)
    values = himmelblau(grid[:, None], grid[None, :])
    local = (values == ndimage.minimum_filter(values, size=3, mode="nearest"))
    found: list[Vector] = []
    for i, j in zip(*np.nonzero(local)):
        sol = optimize.root(obj.grad, np.array([grid[i], grid[j]]), jac=obj.hess, method="hybr",
                            options={"xtol": 1e-15})
        x = sol.x
        if not (sol.success and np.all((x > 0) & (x < 1)) and obj(x) < 1e-8):
            continue
        if all(np.max(np.abs(x - m)) > 1e-6 for m in found):
            found.append(x)
    found.sort(key=lambda m: (-m[0] - m[1]))
    return np.array(found)


def _check_pair(act: Activation, obj: Objective) -> None:
    if obj.dim is not None and obj.dim != act.dim:
        raise ArgumentError(f"dimension mismatch: activation {act.dim}, objective {obj.name} {obj.dim}")


def natural_gradient_step(act: Activation, obj: Objective, x, h: float) -> Vector:
    """x′ = x − h G(x)⁻¹ ∇f(x), clamped inside the cube."""
    if not h > 0:
        raise ArgumentError(f"step must be positive: {h}")
    _check_pair(act, obj)
    x = act._interior(x)
    return _clamp(x - h * (act.ginv(x) * _gradient(obj, x)))


@dataclasses.dataclass
class FlowTrace:
    """Iterates of a deterministic flow with objective values and distances to a reference."""
    iterates: Vector
    f: Vector
    dG: Vector
    l2: Vector
    step_ms: Vector
    columns: ClassVar[tuple[str, ...]] = ("iter", "f", "dG_to_ref", "l2_to_ref", "step_ms")

    def __len__(self):
        return len(self.f)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "iter": np.arange(len(self.f)),
            "f": self.f,
            "dG_to_ref": self.dG,
            "l2_to_ref": self.l2,
            "step_ms": self.step_ms,
        }, columns=list(self.columns))


def distances(act: Activation, points, ref) -> tuple[Vector, Vector]:
    """Geodesic and Euclidean distances of a batch of points to a reference point."""
    points, ref = act._interior(points), act._interior(ref)
    phi = potential(act, points) - potential(act, ref)
    diff = points - ref
    return np.sqrt(np.sum(phi * phi, axis=-1)), np.sqrt(np.sum(diff * diff, axis=-1))


def _flow_trace(act: Activation, obj: Objective, iterates: list[Vector], times: list[float],
                ref, record_time: bool) -> FlowTrace:
    xs = np.array(iterates)
    ref = xs[-1] if ref is None else np.asarray(ref, dtype=np.float64)
    dG, l2 = distances(act, xs, ref)
    step_ms = np.array([0.0] + times) * 1000.0 if record_time else np.zeros(len(xs))
    return FlowTrace(xs, np.asarray(obj(xs), dtype=np.float64), dG, l2, step_ms)


# consecutive clamping events before giving up on a flow
_MAX_CLAMPS = 10


def hnn_ode_integrate(act: Activation, obj: Objective, x0, h: float, steps: int,
                      form: str = "primal", ref=None, record_time: bool = True) -> FlowTrace:
    """Integrate the Hopfield flow with fixed-step RK4.

    - ``primal``: ẋ = −G(x)⁻¹ ∇f(x)
    - ``hidden``: ẋ_H = −∇f(σ(x_H)), then x = σ(x_H)
    """
    if not h > 0:
        raise ArgumentError(f"step must be positive: {h}")
    _check_pair(act, obj)
    x = act._interior(x0)
    iterates, times = [x], []

    if form == "primal":

        def field(y):
            y = _clamp(y)
            return -act.ginv(y) * _gradient(obj, y)

        clamps = 0
        for k in range(steps):
            start = time.perf_counter()
            raw = _rk4_step(field, x, h)
            x = _clamp(raw)
            if np.any(x != raw):
                clamps += 1
                if clamps >= _MAX_CLAMPS:
                    raise _Err("flow keeps leaving the unit cube", step=k + 1, clamps=clamps)
            else:
                clamps = 0
            times.append(time.perf_counter() - start)
            iterates.append(x)
    elif form == "hidden":
        b = act.beta

        def hidden_field(u):
            return -_gradient(obj, _clamp(act._sigma(u, b)))

        u = act.inverse(x)
        for _ in range(steps):
            start = time.perf_counter()
            u = _rk4_step(hidden_field, u, h)
            times.append(time.perf_counter() - start)
            iterates.append(_clamp(act._sigma(u, b)))
    else:
        raise ArgumentError(f"unexpected flow form: {form}")

    return _flow_trace(act, obj, iterates, times, ref, record_time)


# damped newton settings of the finite dimensional proximal step
_PROX_STARTS = 5
_PROX_ITERS = 500
_PROX_RESIDUAL = 1e-7


def _prox_solve(act: Activation, obj: Objective, phi0: Vector, h: float, start: Vector):
    """Damped Newton on P(x) = ½ Σ (Φ(x) − Φ(x₀))² + h f(x) from start."""

    def value(x):
        d = potential(act, x) - phi0
        return 0.5 * float(d @ d) + h * float(obj(x))

    def gradient(x):
        return (potential(act, x) - phi0) / np.sqrt(act.ginv(x)) + h * _gradient(obj, x)

    x, iteration = start, 0
    px, gx = value(x), gradient(x)
    for iteration in range(_PROX_ITERS):
        if np.max(np.abs(gx)) < 1e-14:
            break
        s = 1.0 / np.sqrt(act.ginv(x))
        d = potential(act, x) - phi0
        # (√g)′ = √g Γ
        hess = np.diag(s * s + d * s * christoffel(act, x)) + h * obj.hessian(x)
        try:
            np.linalg.cholesky(hess)
            direction = -np.linalg.solve(hess, gx)
        except np.linalg.LinAlgError:
            # metric preconditioned gradient
            direction = -act.ginv(x) * gx
        slope = float(gx @ direction)
        t = 1.0
        for _ in range(60):
            trial = x + t * direction
            if np.all((trial > _MARGIN) & (trial < 1.0 - _MARGIN)):
                pt = value(trial)
                if pt <= px + 1e-4 * t * slope:
                    break
            t *= 0.5
        else:
            # no decrease left at rounding level
            break
        if np.max(np.abs(trial - x)) == 0.0:
            break
        x = trial
        px, gx = pt, gradient(x)
    return x, px, float(np.max(np.abs(gx))), iteration


def finite_prox_step(act: Activation, obj: Objective, x, h: float) -> Vector:
    """x′ = argmin ½ d_G(x, ·)² + h f(·), by multi-start damped Newton.

    Starts are x and four seeded perturbations of x; the lowest objective wins.
    """
    if not h > 0:
        raise ArgumentError(f"step must be positive: {h}")
    _check_pair(act, obj)
    x = act._interior(x)
    phi0 = potential(act, x)
    rng = np.random.default_rng(0)
    radius = 0.01 * np.minimum(x, 1.0 - x)
    starts = [x] + [_clamp(x + radius * rng.uniform(-1.0, 1.0, x.size)) for _ in range(_PROX_STARTS - 1)]
    best: tuple[Vector, float]|None = None
    worst_residual = 0.0
    for start in starts:
        sol, value, residual, iterations = _prox_solve(act, obj, phi0, h, start)
        if _mode >= _Mode.DEBUG3:
            log.debug(f"prox start converged in {iterations} iterations, residual {residual:.3g}")
        if residual >= _PROX_RESIDUAL:
            worst_residual = max(worst_residual, residual)
            continue
        if best is None or value < best[1]:
            best = (sol, value)
    if best is None:
        raise _Err("proximal step did not converge", iterations=_PROX_ITERS, residual=worst_residual)
    return best[0]


METHODS = ("natural", "mirror", "prox", "ode")


def descend_run(act: Activation, obj: Objective, x0, h: float, steps: int, method: str = "natural",
                ref=None, record_time: bool = True) -> FlowTrace:
    """Run a deterministic descent method and trace it."""
    if method == "ode":
        return hnn_ode_integrate(act, obj, x0, h, steps, ref=ref, record_time=record_time)
    _check_pair(act, obj)
    x = act._interior(x0)
    iterates, times = [x], []
    if method == "mirror":
        pair = MirrorMapPair.from_activation(act)
        z = to_dual(pair, x)
    elif method not in ("natural", "prox"):
        raise ArgumentError(f"unexpected descent method: {method}")
    for k in range(steps):
        start = time.perf_counter()
        if method == "natural":
            x = natural_gradient_step(act, obj, x, h)
        elif method == "prox":
            x = finite_prox_step(act, obj, x, h)
        else:
            z = mirror_step(pair, obj.grad, z, h)
            x = _clamp(to_primal(pair, z))
        times.append(time.perf_counter() - start)
        iterates.append(x)
        if _mode >= _Mode.DEBUG4:
            log.debug(f"{method} step {k + 1}: x={x.tolist()}")
    return _flow_trace(act, obj, iterates, times, ref, record_time)


#
# DISPATCH
#
@dataclasses.dataclass(eq=False)
class DispatchProblem:
    """Relaxed economic load dispatch.

    Minimize J(x, y) = pᵀy + ½c₁‖x − x₀‖² + ½c₂‖y − y₀‖² over z = (x; y) in
    [0,1]²ⁿ subject to xᵀy = π_d and 1ᵀy = π_d, where x are on/off states
    relaxed to [0, 1] and y generator outputs.
    """
    p: Vector
    c1: float
    c2: float
    x0: Vector
    y0: Vector
    pi_d: float
    r: float = 1.0
    h_hopfield: float = 1e-2
    h_dual: float = 1e-1
    tol: float = 1e-7
    max_subiters: int = 10000
    max_outer: int = 500
    outer_tol: float = 1e-3

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.y0 = np.asarray(self.y0, dtype=np.float64)
        n = self.p.size
        if n == 0 or self.p.shape != (n,) or self.x0.shape != (n,) or self.y0.shape != (n,):
            raise ArgumentError("p, x0 and y0 must be vectors of the same size")
        if not np.all((self.x0 == 0.0) | (self.x0 == 1.0)):
            raise ArgumentError("x0 must be binary")
        if np.any((self.y0 < 0.0) | (self.y0 > 1.0)) or np.any(self.y0[self.x0 == 0.0] != 0.0):
            raise ArgumentError("y0 must lie in [0, 1] and vanish where x0 is off")
        for name in ("c1", "c2", "pi_d", "r", "h_hopfield", "h_dual", "tol", "outer_tol"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")
        if self.max_subiters < 1 or self.max_outer < 1:
            raise ArgumentError("iteration caps must be positive")

    @property
    def n_G(self) -> int:
        return self.p.size

    @classmethod
    def generate(cls, n_G: int, rng: np.random.Generator|int|None = None, **overrides) -> "DispatchProblem":
        """Draw random problem data, all from one generator."""
        if n_G < 1:
            raise ArgumentError(f"n_G must be positive: {n_G}")
        rng = np.random.default_rng(rng)
        p = rng.uniform(size=n_G)
        # uniform in (0, 1]
        c1, c2 = 1.0 - rng.uniform(size=2)
        x0 = np.round(rng.uniform(size=n_G))
        while not x0.any():
            x0 = np.round(rng.uniform(size=n_G))
        y0 = rng.uniform(size=n_G) * x0
        pi_d = (1.0 + 0.1 * (rng.uniform() - 0.5)) * float(np.sum(y0))
        return cls(p, float(c1), float(c2), x0, y0, pi_d, **overrides)


@dataclasses.dataclass
class DispatchState:
    """Relaxed joint vector z = (x; y) and the two multipliers."""
    z: Vector
    lambda1: float = 0.0
    lambda2: float = 0.0

    def split(self, prob: DispatchProblem) -> tuple[Vector, Vector]:
        z = np.asarray(self.z, dtype=np.float64)
        if z.shape[-1] != 2 * prob.n_G:
            raise ArgumentError(f"dimension mismatch: expecting {2 * prob.n_G}, got shape {z.shape}")
        return z[..., :prob.n_G], z[..., prob.n_G:]

    def residuals(self, prob: DispatchProblem) -> tuple[float, float]:
        """r₁ = xᵀy − π_d, r₂ = 1ᵀy − π_d"""
        x, y = self.split(prob)
        return float(x @ y) - prob.pi_d, float(np.sum(y)) - prob.pi_d


def dispatch_cost(prob: DispatchProblem, x, y) -> float:
    """pᵀy + ½c₁‖x − x₀‖² + ½c₂‖y − y₀‖²"""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != (prob.n_G,) or y.shape != (prob.n_G,):
        raise ArgumentError(f"dimension mismatch: expecting {prob.n_G}")
    dx, dy = x - prob.x0, y - prob.y0
    return float(prob.p @ y) + 0.5 * prob.c1 * float(dx @ dx) + 0.5 * prob.c2 * float(dy @ dy)


def _lagrangian(prob: DispatchProblem, z: Vector, l1: float, l2: float):
    """Value and gradient of the augmented lagrangian, batched on leading axes."""
    n = prob.n_G
    x, y = z[..., :n], z[..., n:]
    r1 = np.sum(x * y, axis=-1) - prob.pi_d
    r2 = np.sum(y, axis=-1) - prob.pi_d
    dx, dy = x - prob.x0, y - prob.y0
    cost = y @ prob.p + 0.5 * prob.c1 * np.sum(dx * dx, axis=-1) + 0.5 * prob.c2 * np.sum(dy * dy, axis=-1)
    value = cost + l1 * r1 + l2 * r2 + 0.5 * prob.r * (r1 * r1 + r2 * r2)
    m1 = np.expand_dims(l1 + prob.r * r1, -1)
    m2 = np.expand_dims(l2 + prob.r * r2, -1)
    grad = np.concatenate([prob.c1 * dx + m1 * y, prob.p + prob.c2 * dy + m1 * x + m2], axis=-1)
    return value, grad


def aug_lagrangian(prob: DispatchProblem, state: DispatchState) -> tuple[float, Vector]:
    """L_r(z, λ) = J + λ₁r₁ + λ₂r₂ + (r/2)(r₁² + r₂²) and its gradient in z."""
    state.split(prob)
    value, grad = _lagrangian(prob, np.asarray(state.z, dtype=np.float64), state.lambda1, state.lambda2)
    return float(value), grad


def dispatch_objective(prob: DispatchProblem, lambda1: float = 0.0, lambda2: float = 0.0) -> Objective:
    """Augmented lagrangian at fixed multipliers, as an objective on [0,1]²ⁿ."""
    n, r = prob.n_G, prob.r

    def hess(z):
        x, y = z[:n], z[n:]
        r1 = float(x @ y) - prob.pi_d
        h = np.empty((2 * n, 2 * n))
        h[:n, :n] = prob.c1 * np.eye(n) + r * np.outer(y, y)
        h[:n, n:] = (lambda1 + r * r1) * np.eye(n) + r * np.outer(y, x)
        h[n:, :n] = h[:n, n:].T
        h[n:, n:] = prob.c2 * np.eye(n) + r * np.outer(x, x) + r
        return h

    return Objective(
        "dispatch", 2 * n,
        lambda z: _lagrangian(prob, z, lambda1, lambda2)[0],
        lambda z: _lagrangian(prob, z, lambda1, lambda2)[1],
        hess, descent_step=prob.h_hopfield)


@register_objective("dispatch")
def _dispatch_objective(problem: DispatchProblem, lambda1: float = 0.0, lambda2: float = 0.0) -> Objective:
    return dispatch_objective(problem, lambda1, lambda2)


def dual_ascent_step(prob: DispatchProblem, state: DispatchState) -> DispatchState:
    """λ ← λ + h_dual r, at the current joint vector."""
    r1, r2 = state.residuals(prob)
    return DispatchState(state.z, state.lambda1 + prob.h_dual * r1, state.lambda2 + prob.h_dual * r2)


@dataclasses.dataclass
class DispatchResult:
    """Outcome of one dual Hopfield solve."""
    state: DispatchState
    converged: bool
    outer_iters: int
    trace: pd.DataFrame
    inner_increases: int = 0
    best_iter: int = -1

    def __post_init__(self):
        if self.best_iter < 0:
            self.best_iter = self.outer_iters

    @property
    def residuals(self) -> tuple[float, float]:
        """Residuals of the returned state."""
        row = self.trace.iloc[self.best_iter]
        return float(row["r1"]), float(row["r2"])

    @property
    def value(self) -> float:
        return float(self.trace["L_value"].iloc[self.best_iter])

    @property
    def monotone_fraction(self) -> float:
        """Fraction of outer steps where the geodesic distance to the solution does not grow."""
        dG = self.trace["dG"].to_numpy()
        if dG.size < 2:
            return 1.0
        return float(np.mean(np.diff(dG) <= 1e-12))

    def binary_fraction(self, n_G: int, threshold: float = 0.05) -> float:
        """Fraction of on/off states within threshold of a binary value."""
        x = np.asarray(self.state.z)[:n_G]
        return float(np.mean(np.abs(x - np.round(x)) < threshold))


def dual_hopfield_solve(prob: DispatchProblem, lambda_init=None, rng_seed: Any = 0) -> DispatchResult:
    """Dual ascent on the multipliers, with Hopfield sub-iterations for z.

    Sub-iterations are natural gradient steps under the β = 1 soft projection
    until successive iterates move less than ``tol``. Multipliers start from
    ``lambda_init`` or uniformly in (−1, 1), z uniformly in (¼, ¾)ⁿ from the
    same generator. The trace holds one row per outer iteration run, with
    distances to the returned state. Without convergence the returned state is
    the iterate with the smallest residuals, with the multipliers it was
    computed at, and ``best_iter`` is its row.
    """
    rng = np.random.default_rng(rng_seed)
    if lambda_init is None:
        l1, l2 = rng.uniform(-1.0, 1.0, size=2)
    else:
        l1, l2 = np.asarray(lambda_init, dtype=np.float64).reshape(2)
    n2 = 2 * prob.n_G
    act = Activation.soft_projection(1.0, n2)
    z = rng.uniform(0.25, 0.75, size=n2)

    iterates, rows = [], []
    increases, converged = 0, False
    state = DispatchState(z, float(l1), float(l2))
    r1, r2 = state.residuals(prob)
    best: tuple[float, int] = (max(abs(r1), abs(r2)), 0)
    iterates.append(state)
    rows.append((0, r1, r2, aug_lagrangian(prob, state)[0]))

    for outer in range(1, prob.max_outer + 1):
        obj = dispatch_objective(prob, state.lambda1, state.lambda2)
        value = float(obj(z))
        for sub in range(prob.max_subiters):
            znew = natural_gradient_step(act, obj, z, prob.h_hopfield)
            vnew = float(obj(znew))
            if vnew > value + 1e-10:
                increases += 1
            change = float(np.max(np.abs(znew - z)))
            z, value = znew, vnew
            if change < prob.tol:
                break
        if _mode >= _Mode.DEBUG2:
            log.debug(f"outer {outer}: {sub + 1} sub-iterations, L={value:.6g}")
        state = DispatchState(z, state.lambda1, state.lambda2)
        r1, r2 = state.residuals(prob)
        iterates.append(state)
        rows.append((outer, r1, r2, value))
        worst = max(abs(r1), abs(r2))
        if worst < best[0]:
            best = (worst, len(iterates) - 1)
        if worst < prob.outer_tol:
            converged = True
            break
        state = dual_ascent_step(prob, state)

    if increases:
        log.warning(f"augmented lagrangian increased in {increases} sub-iterations")

    # on failure, the iterate with the smallest residuals
    outer = len(iterates) - 1
    index = outer if converged else best[1]
    if not converged:
        log.warning(f"dispatch did not converge in {prob.max_outer} outer iterations, "
                    f"best residual {best[0]:.3g} at {index}")
    state = iterates[index]
    dG, l2 = distances(act, np.array([s.z for s in iterates]), state.z)
    frame = pd.DataFrame(rows, columns=["outer_iter", "r1", "r2", "L_value"])
    frame.insert(1, "dG", dG)
    frame.insert(2, "l2", l2)
    return DispatchResult(state, converged, outer, frame, increases, index)


def dispatch_monte_carlo(prob: DispatchProblem, restarts: int = 100, seed: int = 0,
                         workers: int = 1) -> list[DispatchResult]:
    """Independent solves from random multipliers, ordered by restart index."""
    if restarts < 1:
        raise ArgumentError(f"restarts must be positive: {restarts}")
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    solve = functools.partial(dual_hopfield_solve, prob, None)
    if workers <= 1:
        results = list(map(solve, seeds))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, seeds))
    if _mode >= _Mode.DEV:
        log.info(f"dispatch: {sum(r.converged for r in results)}/{restarts} restarts converged")
    return results


def dispatch_summary(prob: DispatchProblem, results: list[DispatchResult]) -> pd.DataFrame:
    """One row per restart."""
    rows = []
    for i, res in enumerate(results):
        r1, r2 = res.residuals
        rows.append({
            "restart": i,
            "converged": int(res.converged),
            "outer_iters": res.outer_iters,
            "r1": r1,
            "r2": r2,
            "L_value": res.value,
            "binary_fraction": res.binary_fraction(prob.n_G),
            "monotone_fraction": res.monotone_fraction,
        })
    return pd.DataFrame(rows, columns=["restart", "converged", "outer_iters", "r1", "r2", "L_value",
                                       "binary_fraction", "monotone_fraction"])


#
# DIFFUSION
#
@dataclasses.dataclass(frozen=True, eq=False)
class DiffusionParams:
    """Stochastic Hopfield network dx = (−G⁻¹∇f + T∂G⁻¹) dt + √(2TG⁻¹) dw."""
    act: Activation
    obj: Objective
    T: float
    h: float
    N: int = 500
    seed: int = 0

    def __post_init__(self):
        _check_pair(self.act, self.obj)
        if not (math.isfinite(self.T) and self.T >= 0):
            raise ArgumentError(f"temperature must be nonnegative: {self.T}")
        if not self.h > 0:
            raise ArgumentError(f"step must be positive: {self.h}")
        if self.N < 1:
            raise ArgumentError(f"particle count must be positive: {self.N}")


@dataclasses.dataclass
class WeightedCloud:
    """N weighted particles, masses sum to one."""
    locations: Vector
    masses: Vector
    k: int = 0

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.locations.ndim != 2 or self.masses.shape != (self.locations.shape[0],):
            raise ArgumentError("cloud must hold N locations and N masses")
        if np.any(self.masses < 0) or abs(float(np.sum(self.masses)) - 1.0) > 1e-12:
            raise ArgumentError("cloud masses must be nonnegative and sum to 1")
        outside = ~np.all((self.locations >= _BOUNDARY) & (self.locations <= 1.0 - _BOUNDARY), axis=1)
        if np.any(outside):
            bad = np.flatnonzero(outside)[:8].tolist()
            raise DomainError(f"cloud particles not strictly inside the unit cube: {bad}")

    @property
    def N(self) -> int:
        return self.locations.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.locations, columns=[f"x_{i+1}" for i in range(self.locations.shape[1])])
        frame.insert(0, "particle_id", np.arange(self.N))
        frame.insert(0, "k", self.k)
        frame["mass"] = self.masses
        return frame


def sde_drift_diffusion(params: DiffusionParams, x) -> tuple[Vector, Vector]:
    """Drift −g^ii ∂_i f + T ∂_i g^ii and diffusion √(2T g^ii), for points or batches."""
    act = params.act
    x = act._interior(x)
    ginv = act.ginv(x)
    drift = -(ginv * _gradient(params.obj, x)) + params.T * act.dginv(x)
    return drift, np.sqrt(2.0 * params.T * ginv)


def step_rng(seed: int, k: int) -> np.random.Generator:
    """Counter based generator for step k, independent of any other step."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))


def em_step(params: DiffusionParams, locations, rng: np.random.Generator) -> Vector:
    """Euler-Maruyama step on all particles, noise rows in particle order.

    Normals are drawn row after row from one stream per step, so the noise
    of particle i only depends on the seed, the step and i, whatever the
    number of particles after it.
    """
    x = params.act._interior(locations)
    drift, diffusion = sde_drift_diffusion(params, x)
    dw = rng.standard_normal(x.shape) * math.sqrt(params.h)
    return _clamp(x + params.h * drift + diffusion * dw)


def _require_temperature(T: float) -> None:
    if not (math.isfinite(T) and T > 0):
        raise ArgumentError(f"temperature must be positive: {T}")


def gibbs_density(obj: Objective, T: float, x) -> Vector:
    """Unnormalized stationary density exp(−f/T)."""
    _require_temperature(T)
    return np.exp(-np.asarray(obj(np.asarray(x, dtype=np.float64)), dtype=np.float64) / T)


def _gibbs_grid(obj: Objective, T: float, resolution: int, dim: int|None):
    _require_temperature(T)
    n = obj.dim or dim
    if n is None:
        raise ArgumentError(f"dimension of {obj.name} is unknown")
    if not 1 <= n <= 3:
        raise ArgumentError(f"partition function is only supported up to dimension 3, not {n}")
    if resolution < 2:
        raise ArgumentError(f"resolution too small: {resolution}")
    axis = np.linspace(0.0, 1.0, resolution)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1)
    values = np.asarray(obj(mesh), dtype=np.float64)
    fmin = float(np.min(values))
    weights = np.exp(-(values - fmin) / T)
    for _ in range(n):
        weights = integrate.trapezoid(weights, axis, axis=0)
    return fmin, float(weights)


def gibbs_partition(obj: Objective, T: float, resolution: int = 201, dim: int|None = None) -> float:
    """Z(T) = ∫ exp(−f/T) over [0,1]ⁿ by tensor grid trapezoid, n ≤ 3."""
    fmin, scaled = _gibbs_grid(obj, T, resolution, dim)
    return math.exp(-fmin / T) * scaled


def gibbs_free_energy(obj: Objective, T: float, resolution: int = 201, dim: int|None = None) -> float:
    """Free energy −T log Z(T) of the stationary density."""
    fmin, scaled = _gibbs_grid(obj, T, resolution, dim)
    return fmin - T * math.log(scaled)


# volume floor of duplicate points
_MIN_VOLUME = 1e-300


def knn_volumes(locations, k: int = 8) -> Vector:
    """Volume attached to each point by the k-nearest-neighbor entropy estimator.

    With uniform masses 1/N, the density estimate at x_i is 1 / (N V_i).
    """
    x = np.asarray(locations, dtype=np.float64)
    N, n = x.shape
    if N == 1:
        return np.ones(1)
    k = min(k, N - 1)
    tree = spatial.cKDTree(x)
    dist, _ = tree.query(x, k=k + 1)
    nearest, radius = dist[:, 1], dist[:, -1]
    duplicates = float(np.mean(nearest == 0.0))
    if duplicates > 0.5:
        log.warning(f"degenerate cloud: {100 * duplicates:.0f}% duplicate points")
    ball = math.pi ** (n / 2) / math.gamma(n / 2 + 1)
    scale = ball * math.exp(sps.digamma(N) - sps.digamma(k)) / N
    return np.maximum(scale * radius ** n, _MIN_VOLUME)


def knn_density(cloud: WeightedCloud, k: int = 8) -> Vector:
    """Density values m_i / V_i at cloud locations."""
    return cloud.masses / knn_volumes(cloud.locations, k)


def free_energy(cloud: WeightedCloud, obj: Objective, T: float, k: int = 8) -> float:
    """Σ m_i f(x_i) + T Σ m_i log(m_i / V_i), a biased estimate of ∫fρ + T∫ρ log ρ."""
    energy = float(cloud.masses @ np.asarray(obj(cloud.locations), dtype=np.float64))
    if T == 0:
        return energy
    volumes = knn_volumes(cloud.locations, k)
    m = cloud.masses
    entropy = float(np.sum(sps.xlogy(m, m) - sps.xlogy(m, volumes)))
    return energy + T * entropy


def tv_distance(centers, density, cloud: WeightedCloud, bins: int = 20) -> float:
    """Total variation distance between a 1-D grid density and a cloud, on a histogram."""
    centers = np.asarray(centers, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    if cloud.locations.shape[1] != 1:
        raise ArgumentError("total variation distance is only supported in dimension 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    dx = 1.0 / centers.size
    grid_mass, _ = np.histogram(centers, bins=edges, weights=density * dx)
    cloud_mass, _ = np.histogram(cloud.locations[:, 0], bins=edges, weights=cloud.masses)
    return 0.5 * float(np.sum(np.abs(grid_mass / np.sum(grid_mass) - cloud_mass)))


@dataclasses.dataclass
class FpkSolution:
    """Grid density at t_final with the discrete free energy at each output time."""
    centers: Vector
    density: Vector
    times: Vector
    free_energy: Vector

    @property
    def mass(self) -> float:
        return float(np.sum(self.density) / self.centers.size)


def _discrete_free_energy(rho: Vector, f: Vector, T: float, dx: float) -> float:
    return float(dx * np.sum(rho * f + T * sps.xlogy(rho, rho)))


def fpk_grid_solve(act: Activation, obj: Objective, T: float, grid: int = 200, t_final: float = 0.1,
                   rho0=None, dt: float|None = None) -> FpkSolution:
    """Finite volume solution of ∂ρ/∂t = ∂(g⁻¹(ρ f′ + T ρ′)) in 1-D, zero flux boundaries.

    Face fluxes are exponentially fitted so that exp(−f/T) is an exact
    discrete equilibrium. The explicit step is sub-stepped below the
    stability bound, which keeps densities nonnegative and mass constant.
    """
    if act.dim != 1:
        raise ArgumentError(f"grid solver is only supported in dimension 1, not {act.dim}")
    _check_pair(act, obj)
    _require_temperature(T)
    if grid < 200:
        raise ArgumentError(f"grid must have at least 200 cells: {grid}")
    if not t_final > 0:
        raise ArgumentError(f"final time must be positive: {t_final}")

    dx = 1.0 / grid
    centers = (np.arange(grid) + 0.5) * dx
    faces = np.arange(1, grid) * dx
    f = np.asarray(obj(centers[:, None]), dtype=np.float64)
    delta = np.diff(f)
    D = T * act.ginv(faces[:, None])[:, 0] / (dx * dx)
    with np.errstate(over="ignore"):
        upper = D * np.exp(0.5 * delta / T)
        lower = D * np.exp(-0.5 * delta / T)
    if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(lower))):
        raise _Err("temperature too low for the grid solver", T=T)
    diag = -(np.append(lower, 0.0) + np.insert(upper, 0, 0.0))
    Q = sparse.diags([lower, diag, upper], [-1, 0, 1], format="csr")

    if rho0 is None:
        rho = np.ones(grid)
    elif callable(rho0):
        rho = np.asarray(rho0(centers), dtype=np.float64)
    else:
        rho = np.asarray(rho0, dtype=np.float64).copy()
    if rho.shape != (grid,) or np.any(rho < 0) or not np.sum(rho) > 0:
        raise ArgumentError("initial density must be nonnegative on the grid")
    rho = rho / (np.sum(rho) * dx)

    stable = 0.9 / float(np.max(np.abs(diag)))
    dt = stable if dt is None else dt
    outputs = max(1, math.ceil(t_final / dt - 1e-9))
    dt = t_final / outputs
    substeps = max(1, math.ceil(dt / stable))
    sub = dt / substeps
    log.debug(f"fpk grid: {outputs} steps of {substeps} sub-steps, dt={sub:.3g}")

    times = np.arange(outputs + 1) * dt
    energies = np.empty(outputs + 1)
    energies[0] = _discrete_free_energy(rho, f, T, dx)
    for k in range(outputs):
        for _ in range(substeps):
            rho = rho + sub * (Q @ rho)
        energies[k + 1] = _discrete_free_energy(rho, f, T, dx)
    return FpkSolution(centers, rho, times, energies)


#
# WASSERSTEIN PROX
#
@dataclasses.dataclass(frozen=True)
class ProxParams:
    """Entropic proximal recursion settings."""
    eps: float = 0.1
    h: float = 1e-4
    T: float = 25.0
    max_fixed_point_iters: int = 5000
    fp_tol: float = 1e-9

    def __post_init__(self):
        if not self.eps > 0:
            raise ArgumentError(f"eps must be positive: {self.eps}")
        if not self.fp_tol > 0:
            raise ArgumentError(f"fp_tol must be positive: {self.fp_tol}")
        if not self.h > 0:
            raise ArgumentError(f"step must be positive: {self.h}")
        if not self.T >= 0:
            raise ArgumentError(f"temperature must be nonnegative: {self.T}")
        if self.max_fixed_point_iters < 1:
            raise ArgumentError("max_fixed_point_iters must be positive")


@dataclasses.dataclass(frozen=True, eq=False)
class CostMatrix:
    """Squared geodesic distances between two clouds, C_ij = d_G(prev_i, new_j)²."""
    C: Vector
    eps: float = 0.1

    @property
    def log_kernel(self) -> Vector:
        return -self.C / (2.0 * self.eps)

    @property
    def kernel(self) -> Vector:
        """Gibbs kernel exp(−C / 2ε), in (0, 1]."""
        return np.exp(self.log_kernel)


def cost_matrix(act: Activation, prev, new, eps: float = 0.1) -> CostMatrix:
    prev, new = act._interior(prev), act._interior(new)
    if prev.ndim != 2 or prev.shape != new.shape:
        raise ArgumentError(f"clouds must have the same size: {prev.shape} vs {new.shape}")
    phi_prev, phi_new = potential(act, prev), potential(act, new)
    C = np.zeros((prev.shape[0], new.shape[0]))
    # separable, one coordinate at a time
    for d in range(act.dim):
        diff = phi_prev[:, d, None] - phi_new[None, :, d]
        C += diff * diff
    return CostMatrix(C, eps)


@dataclasses.dataclass
class JkoResult:
    """Proximal step output with its scaling fixed point."""
    masses: Vector
    iterations: int
    residual: float
    log_u: Vector
    log_v: Vector

    def coupling(self, cost: CostMatrix) -> Vector:
        return np.exp(self.log_u[:, None] + cost.log_kernel + self.log_v[None, :])


def _jko_exponents(prox: ProxParams) -> tuple[float, float]:
    hT = prox.h * prox.T
    return prox.eps / (prox.eps + hT), hT / prox.eps


def jko_solve(prox: ProxParams, masses_prev, cost: CostMatrix, f_new) -> JkoResult:
    """Solve min ½⟨C, M⟩ + ε⟨M, log M⟩ + h(⟨f, ϱ⟩ + T⟨ϱ, log ϱ⟩)
    subject to M1 = masses_prev, Mᵀ1 = ϱ, with scalings in the log domain.

    The coupling is diag(u) K diag(v) with
    u = a / Kv and v ∝ (ξ ⊙ (Kᵀu)^(−hT/ε))^(ε/(ε + hT)), ξ = exp(−hf/ε).
    """
    a = np.asarray(masses_prev, dtype=np.float64)
    f = np.asarray(f_new, dtype=np.float64)
    N = a.size
    if cost.C.shape != (N, N) or f.shape != (N,):
        raise ArgumentError(f"size mismatch: masses {a.shape}, cost {cost.C.shape}, f {f.shape}")
    if abs(float(np.sum(a)) - 1.0) > 1e-10 or np.any(a < 0):
        raise ArgumentError("previous masses must be a probability vector")
    if cost.eps != prox.eps:
        log.warning(f"cost kernel built with eps={cost.eps}, solving with eps={prox.eps}")
    log_a = np.log(np.maximum(a, _MIN_VOLUME))
    log_k = -cost.C / (2.0 * prox.eps)
    log_xi = -prox.h * f / prox.eps
    p, q = _jko_exponents(prox)

    log_u = np.zeros(N)
    log_v = np.zeros(N)
    change = math.inf
    for iteration in range(1, prox.max_fixed_point_iters + 1):
        new_u = log_a - sps.logsumexp(log_k + log_v[None, :], axis=1)
        log_ktu = sps.logsumexp(log_k + new_u[:, None], axis=0)
        new_v = p * (log_xi - q * log_ktu)
        new_v -= sps.logsumexp(new_v + log_ktu)
        change = max(float(np.max(np.abs(new_u - log_u))), float(np.max(np.abs(new_v - log_v))))
        log_u, log_v = new_u, new_v
        if _mode >= _Mode.DEBUG4:
            log.debug(f"fixed point sweep {iteration}: change {change:.3g}")
        if change < prox.fp_tol:
            break
    else:
        raise _Err("scaling fixed point did not converge", iterations=prox.max_fixed_point_iters,
                   residual=change)

    log_u = log_a - sps.logsumexp(log_k + log_v[None, :], axis=1)
    log_rho = log_v + sps.logsumexp(log_k + log_u[:, None], axis=0)
    masses = np.exp(log_rho - sps.logsumexp(log_rho))
    masses /= np.sum(masses)
    return JkoResult(masses, iteration, change, log_u, log_v)


def kkt_residual(prox: ProxParams, masses_prev, cost: CostMatrix, f_new, result: JkoResult) -> float:
    """Max-norm optimality residual of a proximal step.

    Row marginals must match the previous masses, and ε log v + hf + hT log ϱ
    must be constant over the support.
    """
    a = np.asarray(masses_prev, dtype=np.float64)
    M = result.coupling(cost)
    rows = float(np.max(np.abs(M.sum(axis=1) - a)))
    rho = np.maximum(M.sum(axis=0), _MIN_VOLUME)
    station = prox.eps * result.log_v + prox.h * np.asarray(f_new) + prox.h * prox.T * np.log(rho)
    return max(rows, float(np.max(station) - np.min(station)))


def jko_step(prox: ProxParams, masses_prev, cost: CostMatrix, f_new) -> Vector:
    """New masses of the entropic proximal recursion."""
    return jko_solve(prox, masses_prev, cost, f_new).masses


def initial_cloud(params: DiffusionParams) -> WeightedCloud:
    """Uniform start with equal masses."""
    rng = step_rng(params.seed, 0)
    locations = _clamp(rng.uniform(size=(params.N, params.act.dim)))
    return WeightedCloud(locations, np.full(params.N, 1.0 / params.N), 0)


@dataclasses.dataclass
class DiffusionRun:
    """Snapshots of a diffusion run and its per step trace."""
    clouds: list[WeightedCloud]
    trace: pd.DataFrame

    @property
    def final(self) -> WeightedCloud:
        return self.clouds[-1]

    def snapshots_frame(self) -> pd.DataFrame:
        return pd.concat([c.to_frame() for c in self.clouds], ignore_index=True)


def diffuse_run(params: DiffusionParams, prox: ProxParams, steps: int, snapshot_every: int = 100,
                record_time: bool = True, knn: int = 8, cloud: WeightedCloud|None = None) -> DiffusionRun:
    """Propagate locations by Euler-Maruyama and masses by the proximal recursion."""
    if steps < 0:
        raise ArgumentError(f"steps must be nonnegative: {steps}")
    if snapshot_every < 1:
        raise ArgumentError(f"snapshot_every must be positive: {snapshot_every}")
    cloud = cloud or initial_cloud(params)
    snapshots = [cloud]
    rows = [(cloud.k, 0, 0.0, free_energy(cloud, params.obj, params.T, knn), 0.0)]
    for _ in range(steps):
        start = time.perf_counter()
        k = cloud.k + 1
        locations = em_step(params, cloud.locations, step_rng(params.seed, k))
        cost = cost_matrix(params.act, cloud.locations, locations, prox.eps)
        f_new = np.asarray(params.obj(locations), dtype=np.float64)
        sol = jko_solve(prox, cloud.masses, cost, f_new)
        cloud = WeightedCloud(locations, sol.masses, k)
        elapsed = (time.perf_counter() - start) * 1000.0 if record_time else 0.0
        rows.append((k, sol.iterations, sol.residual, free_energy(cloud, params.obj, params.T, knn), elapsed))
        if k % snapshot_every == 0:
            snapshots.append(cloud)
        if _mode >= _Mode.DEV and k % 100 == 0:
            log.info(f"diffuse: step {k}, free energy {rows[-1][3]:.6g}")
    if snapshots[-1] is not cloud:
        snapshots.append(cloud)
    trace = pd.DataFrame(rows, columns=["k", "fp_iters", "fp_residual", "free_energy", "step_ms"])
    return DiffusionRun(snapshots, trace)


def _near(act: Activation, points: Vector, centers, radius: float) -> np.ndarray:
    phi = potential(act, points)
    near = np.zeros(points.shape[0], dtype=bool)
    for c in np.atleast_2d(np.asarray(centers, dtype=np.float64)):
        d = phi - potential(act, c)
        near |= np.sqrt(np.sum(d * d, axis=-1)) < radius
    return near


def mode_capture(act: Activation, cloud: WeightedCloud, centers, radius: float = 0.15) -> float:
    """Mass within geodesic distance radius of any of the centers."""
    return float(np.sum(cloud.masses[_near(act, cloud.locations, centers, radius)]))


def gibbs_mode_capture(act: Activation, obj: Objective, T: float, centers, radius: float = 0.15,
                       resolution: int = 401) -> float:
    """Stationary mass within geodesic distance radius of any of the centers.

    Midpoint rule on a tensor grid of [0,1]ⁿ, n ≤ 3. This bounds what
    ``mode_capture`` may reach once a run has relaxed at temperature T.
    """
    _require_temperature(T)
    _check_pair(act, obj)
    n = act.dim
    if not 1 <= n <= 3:
        raise ArgumentError(f"stationary capture is only supported up to dimension 3, not {n}")
    if resolution < 2:
        raise ArgumentError(f"resolution too small: {resolution}")
    axis = (np.arange(resolution) + 0.5) / resolution
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    values = np.asarray(obj(mesh), dtype=np.float64)
    weights = np.exp(-(values - np.min(values)) / T)
    return float(np.sum(weights[_near(act, mesh, centers, radius)]) / np.sum(weights))


def free_energy_band(free_energies, window: int = 100, band: float = 0.02) -> bool:
    """Whether the mean free energy never grows by more than band, relative, from a window to the next.

    Means over consecutive windows of the trace are compared, a trailing
    partial window is ignored.
    """
    F = np.asarray(free_energies, dtype=np.float64)
    if window < 1:
        raise ArgumentError(f"window must be positive: {window}")
    count = F.size // window
    means = F[:count * window].reshape(count, window).mean(axis=1)
    return bool(np.all(means[1:] <= means[:-1] + band * np.abs(means[:-1])))


#
# CLI HARNESS
#
SUBCOMMANDS = ("descend", "geodesic", "dispatch", "diffuse")

# common keys, allowed in the [run] section
_RUN_KEYS = ("mode", "logging_level", "seed", "output", "record_time", "plot", "cache", "cache_size")

_ACTIVATION_KEYS = ("activation", "beta", "table")
_OBJECTIVE_KEYS = ("objective", "center", "weights")

# keys allowed in each subcommand section
_SECTIONS: dict[str, tuple[str, ...]] = {
    "descend": _ACTIVATION_KEYS + _OBJECTIVE_KEYS + ("method", "x0", "h", "steps", "ref"),
    "geodesic": _ACTIVATION_KEYS + ("x", "y", "samples"),
    "dispatch": ("n_G", "r", "h_hopfield", "h_dual", "tol", "max_subiters", "max_outer", "outer_tol",
                 "restarts", "workers"),
    "diffuse": _ACTIVATION_KEYS + _OBJECTIVE_KEYS + ("n", "T", "h", "N", "eps", "steps", "snapshot_every",
                                                     "fp_tol", "max_fixed_point_iters", "knn"),
}

# per subcommand defaults which differ from Directives
_PRESETS: dict[str, dict[str, Any]] = {
    "diffuse": {"h": 1e-4, "steps": 3000},
}

_HELP = {
    "descend": "deterministic descent on the activation manifold",
    "geodesic": "geodesic curve and distance between two points",
    "dispatch": "dual Hopfield method on random load dispatch problems",
    "diffuse": "weighted particle diffusion with entropic proximal masses",
}


def _cast_floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


# cast configuration strings per directive type
_CASTS: dict[Any, CastFun] = {
    bool: lambda s: s.lower() not in ("", "0", "false", "f", "no", "off"),
    int: lambda s: int(s, base=0),
    float: float,
    str: str,
    list[float]: _cast_floats,
}

_POSITIVE = ("h", "eps", "fp_tol", "r", "h_hopfield", "h_dual", "tol", "outer_tol")
_POSITIVE_INT = ("n_G", "N", "n", "max_subiters", "max_outer", "restarts", "workers", "snapshot_every",
                 "max_fixed_point_iters", "knn", "cache_size")
_NONNEGATIVE = ("T", "steps", "seed")
_INTERIOR = ("x0", "x", "y", "ref")
_CHOICES: dict[str, tuple[str, ...]] = {
    "mode": tuple(_MODES),
    "activation": ACTIVATIONS,
    "method": METHODS,
    "cache": ("none", "lru", "lfu", "fifo", "rr", "dict"),
}


def _cast(section: str, key: str, value: Any) -> Any:
    kind = Directives.__annotations__[key]
    if not isinstance(value, str):
        return list(value) if kind == list[float] else value
    try:
        return _CASTS[kind](value.strip())
    except ValueError:
        raise _Bad(f"[{section}] {key}: cannot convert {value!r} to {getattr(kind, '__name__', kind)}")


def _validate(sub: str, settings: dict[str, Any]) -> None:
    """Range checks, with the offending key in the message."""

    for key, value in settings.items():
        if key in _POSITIVE and not (value > 0 and math.isfinite(value)):
            raise _Bad(f"{key} must be positive: {value}")
        if key in _POSITIVE_INT and not value > 0:
            raise _Bad(f"{key} must be a positive integer: {value}")
        if key in _NONNEGATIVE and not (value >= 0 and math.isfinite(value)):
            raise _Bad(f"{key} must be nonnegative: {value}")
        if key in _CHOICES and value not in _CHOICES[key]:
            raise _Bad(f"{key} must be one of {', '.join(_CHOICES[key])}: {value}")
        if key in _INTERIOR and not all(0.0 < v < 1.0 for v in value):
            raise _Bad(f"{key} must lie strictly inside the unit cube: {value}")

    if "logging_level" in settings:
        level = settings["logging_level"]
        if not (level.isdigit() or isinstance(logging.getLevelName(level.upper()), int)):
            raise _Bad(f"logging_level is not a logging level: {level}")
    if "beta" in settings and not (settings["beta"] and all(b > 0 for b in settings["beta"])):
        raise _Bad(f"beta must hold positive values: {settings['beta']}")
    if "weights" in settings and not all(w >= 0 for w in settings["weights"]):
        raise _Bad(f"weights must be nonnegative: {settings['weights']}")
    if "objective" in settings:
        names = [o for o in objectives() if o != "dispatch"]
        if settings["objective"] not in names:
            raise _Bad(f"objective must be one of {', '.join(names)}: {settings['objective']}")
    if sub == "descend":
        if not settings["x0"]:
            raise _Bad("x0 must not be empty")
        if settings["ref"] and len(settings["ref"]) != len(settings["x0"]):
            raise _Bad(f"ref must have the dimension of x0: {settings['ref']}")
    elif sub == "geodesic":
        if not settings["x"] or len(settings["x"]) != len(settings["y"]):
            raise _Bad(f"x and y must have the same non zero dimension: {settings['x']}, {settings['y']}")
        if settings["samples"] < 2:
            raise _Bad(f"samples must be at least 2: {settings['samples']}")


@dataclasses.dataclass
class RunConfig:
    """Validated settings of one run."""
    subcommand: str
    settings: dict[str, Any]

    def get(self, key: str) -> Any:
        if key not in self.settings:
            raise _Bad(f"no {key} setting for {self.subcommand}")
        return self.settings[key]

    __getitem__ = get

    def activation(self, dim: int) -> Activation:
        kind = self.get("activation")
        if kind != "tabulated":
            return Activation(kind, _broadcast(self.get("beta"), dim))
        table = self.get("table")
        if table:
            try:
                df = pd.read_csv(table)
            except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
                raise _Bad(f"cannot read activation table {table}: {e}")
            if not {"hidden", "value"} <= set(df.columns):
                raise _Bad(f"activation table {table} needs hidden and value columns")
            hidden, values = df["hidden"].to_numpy(dtype=np.float64), df["value"].to_numpy(dtype=np.float64)
        else:
            # identity, the metric is euclidean
            hidden, values = np.array([0.0, 1.0]), np.array([0.0, 1.0])
        return Activation.tabulated(hidden, values, dim)

    def objective(self, dim: int) -> Objective:
        name = self.get("objective")
        if name == "quadratic":
            return objective(name, center=self.get("center"), dim=dim)
        elif name == "linear":
            return objective(name, weights=self.get("weights"), dim=dim)
        elif name == "constant":
            return objective(name, dim=dim)
        return objective(name)


def load_config(path: str|None, subcommand: str|None = None, overrides: dict[str, Any]|None = None) -> RunConfig:
    """Read, merge and validate a run configuration.

    Precedence: Directives defaults, subcommand presets, file, environment,
    then overrides. Without an explicit subcommand, the file must hold
    exactly one subcommand section.
    """
    # no implicit defaults section
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#",),
                                       default_section="\0")
    parser.optionxform = str  # type: ignore
    if path:
        try:
            with open(path) as f:
                parser.read_file(f, source=path)
        except configparser.Error as e:
            raise _Bad(f"configuration error: {e}")
        except OSError as e:
            raise _Bad(f"cannot read configuration {path}: {e.strerror or e}")

    for section in parser.sections():
        if section != "run" and section not in SUBCOMMANDS:
            raise _Bad(f"unexpected section [{section}] in {path}")
    if subcommand is None:
        found = [s for s in parser.sections() if s in SUBCOMMANDS]
        if len(found) != 1:
            raise _Bad(f"cannot infer subcommand from {path}: sections {found}")
        subcommand = found[0]
    elif subcommand not in SUBCOMMANDS:
        raise _Bad(f"unexpected subcommand: {subcommand}")

    allowed = {"run": _RUN_KEYS, subcommand: _SECTIONS[subcommand]}
    settings: dict[str, Any] = {}
    for key in _RUN_KEYS + _SECTIONS[subcommand]:
        default = getattr(Directives, key)
        settings[key] = list(default) if isinstance(default, list) else default
    settings.update(_PRESETS.get(subcommand, {}))

    for section in parser.sections():
        if section not in allowed:
            raise _Bad(f"section [{section}] does not apply to {subcommand}")
        for key, value in parser.items(section):
            if key not in allowed[section]:
                raise _Bad(f"unexpected key in [{section}]: {key}")
            settings[key] = _cast(section, key, value)

    env_output = os.environ.get("HOPFIELD_FLOW_OUTPUT")
    if env_output:
        settings["output"] = env_output

    for key, value in (overrides or {}).items():
        if key not in settings:
            raise _Bad(f"unexpected key for {subcommand}: {key}")
        settings[key] = _cast("flags", key, value)

    _validate(subcommand, settings)
    return RunConfig(subcommand, settings)


_GNUPLOT = """# gnuplot script for {csv}
set datafile separator ","
set key autotitle columnhead
set xlabel "{x}"
plot {plots}
"""


def _gnuplot_script(frame: pd.DataFrame, csv: str) -> str:
    name = os.path.basename(csv)
    x, *ys = frame.columns
    plots = ", \\\n     ".join(f'"{name}" using "{x}":"{y}" with lines' for y in ys)
    return _GNUPLOT.format(csv=name, x=x, plots=plots or f'"{name}" using 1')


def export_trace(trace: FlowTrace|pd.DataFrame, path: str, plot: bool = False) -> str:
    """Write a trace as CSV with 17 significant digits, plus a gnuplot script on demand."""
    frame = trace if isinstance(trace, pd.DataFrame) else trace.to_frame()
    try:
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        if plot:
            with open(os.path.splitext(path)[0] + ".gp", "w") as gp:
                gp.write(_gnuplot_script(frame, path))
    except OSError as e:
        raise FlowError(f"cannot write {path}: {e.strerror or e}", 1)
    log.debug(f"wrote {path}")
    return path


class HopfieldFlow:
    """Run one experiment from a validated configuration.

    Initialization is deferred to the first ``run``, where the running
    mode, logging level, cache and output directory are set up.
    """

    def __init__(self, config: RunConfig):
        self._config = config
        self._initialized = False
        self._output = "."

    def _initialize(self) -> None:
        if self._initialized:
            return

        log.info("HopfieldFlow initialization…")
        conf = self._config

        # running mode
        _set_mode(conf.get("mode"))
        if _mode >= _Mode.DEBUG:
            log.warning("HopfieldFlow running in debug mode")
        else:
            level = conf.get("logging_level")
            log.setLevel(int(level) if level.isdigit() else level.upper())

        _cm._initialize(conf.get("cache"), conf.get("cache_size"))

        self._output = conf.get("output")
        try:
            os.makedirs(self._output, exist_ok=True)
        except OSError as e:
            raise FlowError(f"cannot create output directory {self._output}: {e.strerror or e}", 1)
        self._initialized = True

    def _path(self, name: str) -> str:
        return os.path.join(self._output, name)

    def _export(self, trace, name: str) -> str:
        return export_trace(trace, self._path(name), self._config.get("plot"))

    def _descend(self) -> list[str]:
        conf = self._config
        x0 = conf.get("x0")
        dim = len(x0)
        act, obj = conf.activation(dim), conf.objective(dim)
        trace = descend_run(act, obj, x0, conf.get("h"), conf.get("steps"), conf.get("method"),
                            conf.get("ref") or None, conf.get("record_time"))
        log.info(f"descend: f={trace.f[-1]:.6g} at {trace.iterates[-1].tolist()}")
        return [self._export(trace, "descend.csv")]

    def _geodesic(self) -> list[str]:
        conf = self._config
        x, y = conf.get("x"), conf.get("y")
        act = conf.activation(len(x))
        curve = geodesic_solve(act, x, y, conf.get("samples"))
        methods = ["quadrature", "curve"] + (["closed_form"] if act.kind != "tabulated" else [])
        dist = pd.DataFrame({
            "method": methods,
            "distance": [geodesic_distance(act, x, y, m) for m in methods],
        })
        log.info(f"geodesic: distance {dist['distance'].iloc[0]:.12g}")
        return [self._export(curve.to_frame(), "geodesic.csv"), self._export(dist, "geodesic_distance.csv")]

    def _dispatch(self) -> list[str]:
        conf = self._config
        prob = DispatchProblem.generate(
            conf.get("n_G"), conf.get("seed"),
            **{k: conf.get(k) for k in ("r", "h_hopfield", "h_dual", "tol", "max_subiters", "max_outer",
                                        "outer_tol")})
        results = dispatch_monte_carlo(prob, conf.get("restarts"), conf.get("seed"), conf.get("workers"))
        files = [self._export(res.trace, f"dispatch_{i:03d}.csv") for i, res in enumerate(results)]
        summary = dispatch_summary(prob, results)
        log.info(f"dispatch: {int(summary['converged'].sum())}/{len(results)} converged, "
                 f"mean monotone fraction {summary['monotone_fraction'].mean():.3f}")
        return files + [self._export(summary, "dispatch_summary.csv")]

    def _diffuse(self) -> list[str]:
        conf = self._config
        n = conf.get("n")
        act, obj = conf.activation(n), conf.objective(n)
        T, h = conf.get("T"), conf.get("h")
        params = DiffusionParams(act, obj, T, h, conf.get("N"), conf.get("seed"))
        prox = ProxParams(conf.get("eps"), h, T, conf.get("max_fixed_point_iters"), conf.get("fp_tol"))
        run = diffuse_run(params, prox, conf.get("steps"), conf.get("snapshot_every"), conf.get("record_time"),
                          conf.get("knn"))
        if obj.name == "himmelblau":
            captured = mode_capture(act, run.final, himmelblau_minima())
            log.info(f"diffuse: {100 * captured:.1f}% of mass near the four minima")
            if T > 0:
                stationary = gibbs_mode_capture(act, obj, T, himmelblau_minima(), resolution=201)
                log.info(f"diffuse: {100 * stationary:.1f}% at equilibrium")
        banded = free_energy_band(run.trace["free_energy"])
        log.info(f"diffuse: free energy {run.trace['free_energy'].iloc[-1]:.6g}, "
                 f"{'within' if banded else 'outside'} the 2% band")
        return [self._export(run.snapshots_frame(), "diffuse_cloud.csv"),
                self._export(run.trace, "diffuse_trace.csv")]

    def run(self) -> list[str]:
        """Run the configured subcommand, return the written files."""
        self._initialize()
        sub = self._config.subcommand
        log.info(f"running {sub}…")
        files = getattr(self, f"_{sub}")()
        if _mode >= _Mode.DEV:
            log.info(f"cache: {_cm._stats()}")
        return files


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hopfield-flow", description="Hopfield network gradient flows.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = subs.add_parser(name, help=_HELP[name], description=_HELP[name], allow_abbrev=False)
        sp.add_argument("-c", "--config", help="configuration file")
        for key in _RUN_KEYS + _SECTIONS[name]:
            default = _PRESETS.get(name, {}).get(key, getattr(Directives, key))
            sp.add_argument(f"--{key}", dest=key, metavar="VALUE", help=f"default: {default}")
    return ap


def main(argv: list[str]|None = None) -> int:
    """Command line entry point, returns the exit status."""
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config") and v is not None}
    try:
        config = load_config(args.config, args.subcommand, overrides)
        files = HopfieldFlow(config).run()
    except FlowError as e:
        log.error(f"{type(e).__name__}: {e}")
        return e.status
    log.info(f"wrote {len(files)} file(s) in {config.get('output')}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
