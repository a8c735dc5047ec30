"""
Coefficient bundle of the controlled mean-field regime-switching problem.

Every coefficient is evaluated vectorized over particles: ``x``, ``y``,
``u`` and ``regime`` may be scalars or arrays that broadcast together, and
``regime`` holds 1-based indices. The problem is kept in maximization form;
built-in models that minimize fold the sign in at construction time.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, ConvexityError, ModelValidationError
from .regime_chain import GeneratorMatrix
from .rng import CONTROL, stream
from .settings import resolve

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
StateFunction = Callable[[float, ArrayLike, ArrayLike, ArrayLike, ArrayLike], ArrayLike]
TerminalFunction = Callable[[ArrayLike, ArrayLike, ArrayLike], ArrayLike]

FIRST_ORDER = ("dx", "dy", "du")
SECOND_ORDER = ("dxx", "dxy", "dyy")


@dataclass(frozen=True)
class Coefficient:
    """
    A coefficient c(t, x, y, u, regime) with its analytic partials.

    A partial left as None is identically zero. ``width`` is the length of
    the trailing vector axis for vector-valued coefficients (the jump
    coefficient has one component per regime), or None for scalars.
    """

    value: StateFunction
    dx: Optional[StateFunction] = None
    dy: Optional[StateFunction] = None
    du: Optional[StateFunction] = None
    dxx: Optional[StateFunction] = None
    dxy: Optional[StateFunction] = None
    dyy: Optional[StateFunction] = None
    width: Optional[int] = None

    def _shape(self, x, y, u, regime) -> Tuple[int, ...]:
        shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(u), np.asarray(regime)).shape
        return shape if self.width is None else shape + (self.width,)

    def _evaluate(self, func: Optional[StateFunction], t, x, y, u, regime) -> np.ndarray:
        shape = self._shape(x, y, u, regime)
        if func is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(func(t, x, y, u, regime), dtype=float), shape)

    def __call__(self, t, x, y, u, regime) -> np.ndarray:
        return self._evaluate(self.value, t, x, y, u, regime)

    def partial(self, name: str, t, x, y, u, regime) -> np.ndarray:
        """Evaluate the partial named ``dx``, ``dy``, ``du``, ``dxx``, ``dxy`` or ``dyy``."""
        return self._evaluate(getattr(self, name), t, x, y, u, regime)

    @classmethod
    def constant(cls, c: float, width: Optional[int] = None) -> "Coefficient":
        return cls(value=lambda t, x, y, u, r: c, width=width)

    @classmethod
    def zero(cls, width: Optional[int] = None) -> "Coefficient":
        return cls.constant(0.0, width)


@dataclass(frozen=True)
class TerminalCoefficient:
    """Terminal reward h(x, y, regime) with its partials in (x, y)."""

    value: TerminalFunction
    dx: Optional[TerminalFunction] = None
    dy: Optional[TerminalFunction] = None
    dxx: Optional[TerminalFunction] = None
    dxy: Optional[TerminalFunction] = None
    dyy: Optional[TerminalFunction] = None

    def _evaluate(self, func: Optional[TerminalFunction], x, y, regime) -> np.ndarray:
        shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(regime)).shape
        if func is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(func(x, y, regime), dtype=float), shape)

    def __call__(self, x, y, regime) -> np.ndarray:
        return self._evaluate(self.value, x, y, regime)

    def partial(self, name: str, x, y, regime) -> np.ndarray:
        return self._evaluate(getattr(self, name), x, y, regime)

    @classmethod
    def zero(cls) -> "TerminalCoefficient":
        return cls(value=lambda x, y, r: 0.0)


@dataclass(frozen=True)
class MeanFieldMap:
    """phi with bounded derivative; the mean field is y = E[phi(X)]."""

    name: str
    value: Callable[[ArrayLike], ArrayLike]
    dx: Callable[[ArrayLike], ArrayLike]

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.value(x), dtype=float)

    def derivative(self, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.dx(x), dtype=float), np.shape(x))


IDENTITY = MeanFieldMap("identity", value=lambda x: np.asarray(x, dtype=float), dx=lambda x: 1.0)
TANH = MeanFieldMap("tanh", value=np.tanh, dx=lambda x: 1.0 - np.tanh(x) ** 2)

MEAN_FIELD_MAPS = {"identity": IDENTITY, "tanh": TANH}


def mean_field_map(name: str) -> MeanFieldMap:
    try:
        return MEAN_FIELD_MAPS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown mean-field map '{name}', expected one of {sorted(MEAN_FIELD_MAPS)}"
        ) from None


@dataclass(frozen=True)
class ControlSet:
    """
    Regular control domain A1.

    Either a closed interval [low, high] scanned on ``points`` equally spaced
    values, or a finite set of ``values`` (usable by the necessary-condition
    check only).
    """

    low: float = -1.0
    high: float = 1.0
    points: int = 41
    values: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.values is not None:
            if len(self.values) == 0:
                raise ConfigurationError("finite control set must not be empty")
            object.__setattr__(self, "values", tuple(sorted(float(v) for v in self.values)))
            object.__setattr__(self, "low", self.values[0])
            object.__setattr__(self, "high", self.values[-1])
            return
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low > self.high:
            raise ConfigurationError(f"control interval [{self.low}, {self.high}] is invalid")
        if self.points < 1 or (self.points == 1 and self.low != self.high):
            raise ConfigurationError(f"control interval needs at least 2 grid points, got {self.points}")

    @property
    def is_interval(self) -> bool:
        return self.values is None

    def grid(self) -> np.ndarray:
        if self.values is not None:
            return np.array(self.values)
        if self.points == 1:
            return np.array([self.low])
        return np.linspace(self.low, self.high, self.points)

    @property
    def pitch(self) -> float:
        """Largest gap between neighbouring grid values."""
        grid = self.grid()
        return float(np.max(np.diff(grid))) if grid.size > 1 else 0.0

    def contains(self, u, tol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.values is None:
            return (u >= self.low - tol) & (u <= self.high + tol)
        grid = self.grid()
        return np.min(np.abs(u[..., None] - grid), axis=-1) <= tol

    def project(self, u) -> np.ndarray:
        """Closest admissible value."""
        u = np.asarray(u, dtype=float)
        if self.values is None:
            return np.clip(u, self.low, self.high)
        grid = self.grid()
        return grid[np.argmin(np.abs(u[..., None] - grid), axis=-1)]

    def to_config(self) -> Dict[str, Any]:
        if self.values is not None:
            return {"values": list(self.values)}
        return {"low": self.low, "high": self.high, "points": self.points}


@dataclass(frozen=True)
class PiecewiseConstant:
    """
    Per-regime coefficient constant between breakpoints.

    ``values[i - 1, m]`` holds in regime i on [breaks[m - 1], breaks[m]),
    with breaks[-1] = 0 and the last piece extending to the horizon.
    """

    values: np.ndarray
    breaks: Tuple[float, ...] = ()

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[1] != len(self.breaks) + 1:
            raise ConfigurationError(
                f"piecewise table has {values.shape[1]} pieces but {len(self.breaks)} breakpoints"
            )
        if list(self.breaks) != sorted(self.breaks):
            raise ConfigurationError("piecewise table breakpoints must be increasing")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))

    @property
    def regimes(self) -> int:
        return self.values.shape[0]

    def __call__(self, t: float, regime=1) -> np.ndarray:
        piece = int(np.searchsorted(self.breaks, t, side="right"))
        regime = np.asarray(regime)
        if self.regimes == 1:
            return np.broadcast_to(self.values[0, piece], regime.shape).astype(float)
        return self.values[regime - 1, piece]

    @property
    def is_regime_independent(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    @property
    def is_time_independent(self) -> bool:
        return self.values.shape[1] == 1

    @classmethod
    def from_value(cls, raw: Any, regimes: int) -> "PiecewiseConstant":
        """
        Build from a scalar, a per-regime list, or
        ``{"breaks": [...], "values": [[...] per regime]}``.
        """
        if isinstance(raw, PiecewiseConstant):
            return raw
        try:
            if isinstance(raw, dict):
                if "values" not in raw:
                    raise ConfigurationError("coefficient table needs 'values'")
                table = cls(np.asarray(raw["values"], dtype=float), tuple(raw.get("breaks") or ()))
            elif np.ndim(raw) == 0:
                table = cls(np.full((regimes, 1), float(raw)))
            else:
                table = cls(np.asarray(raw, dtype=float).reshape(-1, 1))
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid coefficient {raw!r}: {e}") from None
        if table.regimes not in (1, regimes):
            raise ConfigurationError(f"coefficient table has {table.regimes} regimes, expected {regimes}")
        return table

    def to_config(self) -> Any:
        if self.is_time_independent:
            column = self.values[:, 0].tolist()
            return column[0] if len(set(column)) == 1 else column
        return {"breaks": list(self.breaks), "values": self.values.tolist()}


@dataclass(frozen=True)
class ModelSpec:
    """
    Coefficients of the scalar controlled state equation and reward.

    ``singular`` is G(t, regime) and ``singular_cost`` the rate kappa(t)
    entering the reward as +kappa d(xi).
    """

    name: str
    drift: Coefficient
    diffusion: Coefficient
    jump: Coefficient
    running_cost: Coefficient
    terminal_cost: TerminalCoefficient
    singular: Callable[[float, ArrayLike], ArrayLike]
    singular_cost: Callable[[float], float]
    mean_field: MeanFieldMap
    x0: float
    horizon: float
    control_set: ControlSet
    regimes: int
    params: Any = field(default=None, compare=False)

    def __post_init__(self):
        if self.jump.width != self.regimes:
            raise ConfigurationError(
                f"jump coefficient has width {self.jump.width}, expected {self.regimes}"
            )

    def singular_coefficient(self, t: float, regime) -> np.ndarray:
        regime = np.asarray(regime)
        return np.broadcast_to(np.asarray(self.singular(t, regime), dtype=float), regime.shape)


def _zero_jump(regimes: int) -> Coefficient:
    return Coefficient.zero(width=regimes)


# ---------------------------------------------------------------------------
# Inter-bank borrowing and lending
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterbankParams:
    """
    Reserve dynamics dX = [a (E X - X) + b u] dt + sigma dB - c d(xi).

    ``a``, ``b``, ``c`` are per-regime (optionally time-dependent) tables and
    ``kappa`` the transaction cost rate of the singular control.
    """

    a: PiecewiseConstant
    b: PiecewiseConstant
    c: PiecewiseConstant
    sigma: float
    rho: float
    epsilon: float
    beta: float
    kappa: PiecewiseConstant
    generator: GeneratorMatrix
    x0: float = 0.0
    horizon: float = 1.0
    control_set: ControlSet = field(default_factory=lambda: ControlSet(-5.0, 5.0, 41))

    def __post_init__(self):
        dim = self.generator.dim
        for name in ("a", "b", "c"):
            object.__setattr__(self, name, PiecewiseConstant.from_value(getattr(self, name), dim))
        object.__setattr__(self, "kappa", PiecewiseConstant.from_value(self.kappa, 1))
        for name in ("sigma", "rho", "epsilon", "beta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"inter-bank parameter {name} must be nonnegative")
        if self.rho**2 > self.epsilon:
            raise ConvexityError(
                f"rho**2 = {self.rho ** 2} exceeds epsilon = {self.epsilon}; running cost is not convex"
            )

    @classmethod
    def single_regime(
        cls,
        a: float,
        b: float,
        sigma: float,
        rho: float,
        epsilon: float,
        beta: float,
        c: float = 0.0,
        kappa: float = 0.0,
        **kwargs: Any,
    ) -> "InterbankParams":
        return cls(
            a=a, b=b, c=c, sigma=sigma, rho=rho, epsilon=epsilon, beta=beta,
            kappa=kappa, generator=GeneratorMatrix.single(), **kwargs,
        )

    @property
    def is_regime_independent(self) -> bool:
        return self.a.is_regime_independent and self.b.is_regime_independent and self.c.is_regime_independent


def interbank_model(params: InterbankParams) -> ModelSpec:
    """
    Inter-bank model in maximization form: the minimized cost is negated so
    f = -u^2/2 + rho u (y - x) - epsilon/2 (y - x)^2, h = -beta/2 (y - x)^2,
    G = -c and the reward carries -kappa per unit of singular control.
    """
    a, b, c, kappa = params.a, params.b, params.c, params.kappa
    rho, eps, beta, sigma = params.rho, params.epsilon, params.beta, params.sigma

    drift = Coefficient(
        value=lambda t, x, y, u, r: a(t, r) * (y - x) + b(t, r) * u,
        dx=lambda t, x, y, u, r: -a(t, r),
        dy=lambda t, x, y, u, r: a(t, r),
        du=lambda t, x, y, u, r: b(t, r),
    )
    diffusion = Coefficient.constant(sigma)
    running_cost = Coefficient(
        value=lambda t, x, y, u, r: -0.5 * u**2 + rho * u * (y - x) - 0.5 * eps * (y - x) ** 2,
        dx=lambda t, x, y, u, r: -rho * u + eps * (y - x),
        dy=lambda t, x, y, u, r: rho * u - eps * (y - x),
        du=lambda t, x, y, u, r: -u + rho * (y - x),
        dxx=lambda t, x, y, u, r: -eps,
        dxy=lambda t, x, y, u, r: eps,
        dyy=lambda t, x, y, u, r: -eps,
    )
    terminal_cost = TerminalCoefficient(
        value=lambda x, y, r: -0.5 * beta * (y - x) ** 2,
        dx=lambda x, y, r: beta * (y - x),
        dy=lambda x, y, r: -beta * (y - x),
        dxx=lambda x, y, r: -beta,
        dxy=lambda x, y, r: beta,
        dyy=lambda x, y, r: -beta,
    )
    return ModelSpec(
        name="interbank",
        drift=drift,
        diffusion=diffusion,
        jump=_zero_jump(params.generator.dim),
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        singular=lambda t, r: -c(t, r),
        singular_cost=lambda t: -float(kappa(t)),
        mean_field=IDENTITY,
        x0=params.x0,
        horizon=params.horizon,
        control_set=params.control_set,
        regimes=params.generator.dim,
        params=params,
    )


def interbank_cost(params: InterbankParams, states, mean, controls, dxi, grid) -> np.ndarray:
    """
    Per-particle cost of the inter-bank application in its original
    minimization form, for sign-consistency checks.
    """
    h = grid.h
    deviation = mean[None, :] - states
    u = controls
    running = 0.5 * u**2 - params.rho * u * deviation[:, :-1] + 0.5 * params.epsilon * deviation[:, :-1] ** 2
    kappa = np.array([float(params.kappa(t)) for t in grid.times])
    return (
        running.sum(axis=1) * h
        + (dxi * kappa[None, :]).sum(axis=1)
        + 0.5 * params.beta * deviation[:, -1] ** 2
    )


# ---------------------------------------------------------------------------
# Generic linear-quadratic model
# ---------------------------------------------------------------------------


def _as_float_array(raw: Any, name: str) -> np.ndarray:
    try:
        return np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be numeric, got {raw!r}") from None


def _per_regime(raw: Any, regimes: int, name: str) -> np.ndarray:
    arr = _as_float_array(raw, name)
    if arr.ndim == 0:
        return np.full(regimes, float(arr))
    if arr.shape != (regimes,):
        raise ConfigurationError(f"{name} must be a scalar or a list of {regimes} values")
    return arr


def _per_pair(raw: Any, regimes: int, name: str) -> np.ndarray:
    arr = _as_float_array(raw, name)
    if arr.ndim == 0:
        arr = np.full((regimes, regimes), float(arr))
    if arr.shape != (regimes, regimes):
        raise ConfigurationError(f"{name} must be a scalar or a {regimes}x{regimes} table")
    out = arr.copy()
    np.fill_diagonal(out, 0.0)
    return out


@dataclass(frozen=True)
class LinearQuadraticParams:
    """
    Affine dynamics and quadratic reward, coefficients per regime:

    b = A x + Abar y + B u + b0
    sigma = C x + Cbar y + Dsig u + s0
    gamma^j = gamma_x[i][j] x + gamma_0[i][j]
    f = -(Q x^2 + Qbar y^2 + R u^2)/2 + lx x + ly y + lu u
    h = -(H x^2 + Hbar y^2)/2 + hx x + hy y
    """

    generator: GeneratorMatrix
    A: Any = 0.0
    Abar: Any = 0.0
    B: Any = 0.0
    b0: Any = 0.0
    C: Any = 0.0
    Cbar: Any = 0.0
    Dsig: Any = 0.0
    s0: Any = 0.0
    gamma_x: Any = 0.0
    gamma_0: Any = 0.0
    Q: Any = 0.0
    Qbar: Any = 0.0
    R: Any = 1.0
    lx: Any = 0.0
    ly: Any = 0.0
    lu: Any = 0.0
    H: Any = 0.0
    Hbar: Any = 0.0
    hx: Any = 0.0
    hy: Any = 0.0
    G: Any = 0.0
    kappa: Any = 0.0
    mean_field: str = "identity"
    x0: float = 0.0
    horizon: float = 1.0
    control_set: ControlSet = field(default_factory=ControlSet)

    def __post_init__(self):
        dim = self.generator.dim
        for name in ("A", "Abar", "B", "b0", "C", "Cbar", "Dsig", "s0", "Q", "Qbar", "R",
                     "lx", "ly", "lu", "H", "Hbar", "hx", "hy", "G"):
            object.__setattr__(self, name, _per_regime(getattr(self, name), dim, name))
        for name in ("gamma_x", "gamma_0"):
            object.__setattr__(self, name, _per_pair(getattr(self, name), dim, name))
        object.__setattr__(self, "kappa", PiecewiseConstant.from_value(self.kappa, 1))
        mean_field_map(self.mean_field)


def linear_quadratic_model(params: LinearQuadraticParams) -> ModelSpec:
    """Generic per-regime affine/quadratic model."""
    p = params
    dim = p.generator.dim
    phi = mean_field_map(p.mean_field)

    def idx(r):
        return np.asarray(r) - 1

    drift = Coefficient(
        value=lambda t, x, y, u, r: p.A[idx(r)] * x + p.Abar[idx(r)] * y + p.B[idx(r)] * u + p.b0[idx(r)],
        dx=lambda t, x, y, u, r: p.A[idx(r)],
        dy=lambda t, x, y, u, r: p.Abar[idx(r)],
        du=lambda t, x, y, u, r: p.B[idx(r)],
    )
    diffusion = Coefficient(
        value=lambda t, x, y, u, r: p.C[idx(r)] * x + p.Cbar[idx(r)] * y + p.Dsig[idx(r)] * u + p.s0[idx(r)],
        dx=lambda t, x, y, u, r: p.C[idx(r)],
        dy=lambda t, x, y, u, r: p.Cbar[idx(r)],
        du=lambda t, x, y, u, r: p.Dsig[idx(r)],
    )
    jump = Coefficient(
        value=lambda t, x, y, u, r: p.gamma_x[idx(r)] * np.asarray(x)[..., None] + p.gamma_0[idx(r)],
        dx=lambda t, x, y, u, r: p.gamma_x[idx(r)],
        width=dim,
    )
    running_cost = Coefficient(
        value=lambda t, x, y, u, r: (
            -0.5 * (p.Q[idx(r)] * x**2 + p.Qbar[idx(r)] * y**2 + p.R[idx(r)] * u**2)
            + p.lx[idx(r)] * x + p.ly[idx(r)] * y + p.lu[idx(r)] * u
        ),
        dx=lambda t, x, y, u, r: -p.Q[idx(r)] * x + p.lx[idx(r)],
        dy=lambda t, x, y, u, r: -p.Qbar[idx(r)] * y + p.ly[idx(r)],
        du=lambda t, x, y, u, r: -p.R[idx(r)] * u + p.lu[idx(r)],
        dxx=lambda t, x, y, u, r: -p.Q[idx(r)],
        dyy=lambda t, x, y, u, r: -p.Qbar[idx(r)],
    )
    terminal_cost = TerminalCoefficient(
        value=lambda x, y, r: (
            -0.5 * (p.H[idx(r)] * x**2 + p.Hbar[idx(r)] * y**2) + p.hx[idx(r)] * x + p.hy[idx(r)] * y
        ),
        dx=lambda x, y, r: -p.H[idx(r)] * x + p.hx[idx(r)],
        dy=lambda x, y, r: -p.Hbar[idx(r)] * y + p.hy[idx(r)],
        dxx=lambda x, y, r: -p.H[idx(r)],
        dyy=lambda x, y, r: -p.Hbar[idx(r)],
    )
    return ModelSpec(
        name="linear_quadratic",
        drift=drift,
        diffusion=diffusion,
        jump=jump,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        singular=lambda t, r: p.G[idx(r)],
        singular_cost=lambda t: float(p.kappa(t)),
        mean_field=phi,
        x0=p.x0,
        horizon=p.horizon,
        control_set=p.control_set,
        regimes=dim,
        params=params,
    )


# ---------------------------------------------------------------------------
# Derivative validation
# ---------------------------------------------------------------------------


@dataclass
class DerivativeCheck:
    """Largest disagreement between an analytic partial and finite differences."""

    name: str
    max_relative_error: float
    max_abs_value: float
    worst_point: Dict[str, float]
    passed: bool


@dataclass
class ValidationReport:
    model: str
    samples: int
    tolerance: float
    checks: List[DerivativeCheck]
    jump_dimension_ok: bool

    @property
    def passed(self) -> bool:
        return self.jump_dimension_ok and all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[str]:
        names = [check.name for check in self.checks if not check.passed]
        if not self.jump_dimension_ok:
            names.append("gamma_dim")
        return names

    def check(self, name: str) -> DerivativeCheck:
        for entry in self.checks:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "samples": self.samples,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "jump_dimension_ok": self.jump_dimension_ok,
            "checks": [
                {
                    "name": c.name,
                    "max_relative_error": c.max_relative_error,
                    "max_abs_value": c.max_abs_value,
                    "worst_point": c.worst_point,
                    "passed": c.passed,
                }
                for c in self.checks
            ],
        }


_VARIABLE_OF = {"dx": "x", "dy": "y", "du": "u"}
# second partial -> (first partial differentiated, variable)
_SECOND_FROM = {"dxx": ("dx", "x"), "dxy": ("dx", "y"), "dyy": ("dy", "y")}


def _summarize(name, analytic, numeric, points, tolerance) -> DerivativeCheck:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if error.ndim > 1:
        error = error.max(axis=tuple(range(1, error.ndim)))
        magnitude = np.abs(analytic).max(axis=tuple(range(1, analytic.ndim)))
    else:
        magnitude = np.abs(analytic)
    worst = int(np.argmax(error))
    max_error = float(error[worst])
    return DerivativeCheck(
        name=name,
        max_relative_error=max_error,
        max_abs_value=float(np.max(magnitude)),
        worst_point={key: float(np.asarray(values)[worst]) for key, values in points.items()},
        passed=bool(max_error <= tolerance),
    )


def validate_model(
    model: ModelSpec,
    samples: int = 200,
    seed: int = 0,
    tolerance: Optional[float] = None,
    strict: bool = True,
) -> ValidationReport:
    """
    Compare analytic partials with central finite differences at random
    points of the (t, x, y, u, regime) box.

    Second partials are checked against differences of the analytic first
    partials. Raises ModelValidationError naming every failing partial when
    ``strict``.
    """
    tolerance = resolve("derivative_tolerance", tolerance)
    step = resolve("fd_step", None)
    box = resolve("validation_box", None)
    rng = stream(seed, CONTROL, 0)

    t = rng.uniform(0.0, model.horizon, samples)
    x = rng.uniform(-box, box, samples)
    y = rng.uniform(-box, box, samples)
    if model.control_set.is_interval:
        u = rng.uniform(model.control_set.low, model.control_set.high, samples)
    else:
        u = rng.choice(model.control_set.grid(), samples)
    regime = rng.integers(1, model.regimes + 1, samples)
    points = {"t": t, "x": x, "y": y, "u": u, "regime": regime}

    def shifted(var: str, delta: float) -> Dict[str, np.ndarray]:
        moved = dict(x=x, y=y, u=u)
        moved[var] = moved[var] + delta
        return moved

    checks: List[DerivativeCheck] = []
    coefficients = (
        ("b", model.drift),
        ("sigma", model.diffusion),
        ("gamma", model.jump),
        ("f", model.running_cost),
    )
    for label, coefficient in coefficients:
        # Time is a scalar argument of the coefficients, so evaluate pointwise in t.
        def at(func_name: Optional[str], values: Dict[str, np.ndarray]) -> np.ndarray:
            rows = []
            for n in range(samples):
                args = (t[n], values["x"][n], values["y"][n], values["u"][n], regime[n])
                if func_name is None:
                    rows.append(coefficient(*args))
                else:
                    rows.append(coefficient.partial(func_name, *args))
            return np.asarray(rows)

        for partial in FIRST_ORDER:
            var = _VARIABLE_OF[partial]
            numeric = (at(None, shifted(var, step)) - at(None, shifted(var, -step))) / (2 * step)
            checks.append(
                _summarize(f"{label}_{var}", at(partial, shifted(var, 0.0)), numeric, points, tolerance)
            )
        for partial, (first, var) in _SECOND_FROM.items():
            numeric = (at(first, shifted(var, step)) - at(first, shifted(var, -step))) / (2 * step)
            checks.append(
                _summarize(f"{label}_{partial[1:]}", at(partial, shifted(var, 0.0)), numeric, points, tolerance)
            )

    terminal = model.terminal_cost
    base = dict(x=x, y=y)

    def terminal_at(func_name: Optional[str], values: Dict[str, np.ndarray]) -> np.ndarray:
        if func_name is None:
            return terminal(values["x"], values["y"], regime)
        return terminal.partial(func_name, values["x"], values["y"], regime)

    for var in ("x", "y"):
        plus = dict(base, **{var: base[var] + step})
        minus = dict(base, **{var: base[var] - step})
        numeric = (terminal_at(None, plus) - terminal_at(None, minus)) / (2 * step)
        checks.append(_summarize(f"h_{var}", terminal_at(f"d{var}", base), numeric, points, tolerance))
    for partial, (first, var) in _SECOND_FROM.items():
        plus = dict(base, **{var: base[var] + step})
        minus = dict(base, **{var: base[var] - step})
        numeric = (terminal_at(first, plus) - terminal_at(first, minus)) / (2 * step)
        checks.append(_summarize(f"h_{partial[1:]}", terminal_at(partial, base), numeric, points, tolerance))

    phi = model.mean_field
    numeric = (phi(x + step) - phi(x - step)) / (2 * step)
    checks.append(_summarize("phi_x", phi.derivative(x), numeric, points, tolerance))

    gamma_value = np.asarray(model.jump(0.0, x, y, u, regime))
    jump_dimension_ok = gamma_value.shape == (samples, model.regimes)

    report = ValidationReport(
        model=model.name,
        samples=samples,
        tolerance=tolerance,
        checks=checks,
        jump_dimension_ok=jump_dimension_ok,
    )
    if report.passed:
        logger.info(f"Model '{model.name}' passed {len(checks)} derivative checks")
    elif strict:
        details = "; ".join(
            f"{c.name}: relative error {c.max_relative_error:.3e} at {c.worst_point}"
            for c in checks
            if not c.passed
        )
        if not jump_dimension_ok:
            details = "; ".join(filter(None, [details, f"gamma_dim: got shape {gamma_value.shape}"]))
        raise ModelValidationError(f"derivative validation failed for '{model.name}': {details}", report)
    return report
