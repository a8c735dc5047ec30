"""
Experiment configuration: one JSON file validated by pydantic models, plus
builders turning it into generators, grids, models, controls and adjoint
solvers.
"""

import contextlib
import hashlib
import json
import logging
import math
from typing import Annotated, Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adjoint import (
    AdjointSample,
    solve_adjoint_interbank_explicit,
    solve_adjoint_lsmc,
    solve_volterra_mean,
)
from .errors import ConfigurationError
from .forward_sim import (
    Atom,
    ControlPair,
    Feedback,
    OpenLoop,
    ParticleEnsemble,
    SingularControl,
    constant_feedback,
    hamiltonian_feedback,
    interbank_mp_feedback,
    shifted_feedback,
)
from .grid import TimeGrid
from .model import (
    ControlSet,
    InterbankParams,
    LinearQuadraticParams,
    ModelSpec,
    PiecewiseConstant,
    interbank_model,
    linear_quadratic_model,
)
from .oracle import riccati_oracle
from .regime_chain import GeneratorMatrix
from .settings import SETTING_SPECS, get_setting

logger = logging.getLogger(__name__)

AUTO = "auto"
INFINITE = "inf"

PerRegime = Union[float, List[float]]
PerPair = Union[float, List[List[float]]]


def tolerance_value(raw: Any) -> Optional[float]:
    """None for automatic tolerances, otherwise a float (possibly infinite)."""
    if raw is None or raw == AUTO:
        return None
    if raw == INFINITE:
        return math.inf
    return float(raw)


def _check_tolerance(value: Any) -> Any:
    if isinstance(value, float) and not value > 0:
        raise ValueError("tolerances must be positive")
    return value


Tolerance = Annotated[Union[Literal["auto", "inf"], float], AfterValidator(_check_tolerance)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CoefficientTable(_Strict):
    """Time-dependent coefficient: one row of values per regime, one more value than breaks."""

    values: Union[List[List[float]], List[float]]
    breaks: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _pieces(self) -> "CoefficientTable":
        rows = self.values if self.values and isinstance(self.values[0], list) else [self.values]
        for row in rows:
            if len(row) != len(self.breaks) + 1:
                raise ValueError(f"each row of values needs {len(self.breaks) + 1} entries, got {len(row)}")
        if self.breaks != sorted(self.breaks):
            raise ValueError("breaks must be increasing")
        return self


CoefficientValue = Union[float, List[float], CoefficientTable]


class GeneratorConfig(_Strict):
    rates: List[List[float]]
    D: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _square(self) -> "GeneratorConfig":
        size = len(self.rates)
        if size == 0 or any(len(row) != size for row in self.rates):
            raise ValueError("rates must be a non-empty square table")
        if self.D is not None and self.D != size:
            raise ValueError(f"D={self.D} but rates have {size} rows")
        return self


class GridConfig(_Strict):
    T: float = Field(gt=0)
    M: int = Field(ge=1)


class ControlSetConfig(_Strict):
    low: float = -1.0
    high: float = 1.0
    points: Optional[int] = Field(default=None, ge=1)
    values: Optional[List[float]] = None

    def build(self) -> ControlSet:
        if self.values is not None:
            return ControlSet(values=tuple(self.values))
        points = self.points if self.points is not None else get_setting("control_grid_points")
        return ControlSet(self.low, self.high, points)


class InterbankConfig(_Strict):
    name: Literal["interbank"]
    a: CoefficientValue
    b: CoefficientValue
    c: CoefficientValue = 0.0
    sigma: float = Field(ge=0)
    rho: float = Field(ge=0)
    epsilon: float = Field(ge=0)
    beta: float = Field(ge=0)
    kappa: CoefficientValue = 0.0
    x0: float = 0.0
    control_set: ControlSetConfig = Field(default_factory=lambda: ControlSetConfig(low=-5.0, high=5.0))


class LinearQuadraticConfig(_Strict):
    name: Literal["linear_quadratic"]
    A: PerRegime = 0.0
    Abar: PerRegime = 0.0
    B: PerRegime = 0.0
    b0: PerRegime = 0.0
    C: PerRegime = 0.0
    Cbar: PerRegime = 0.0
    Dsig: PerRegime = 0.0
    s0: PerRegime = 0.0
    gamma_x: PerPair = 0.0
    gamma_0: PerPair = 0.0
    Q: PerRegime = 0.0
    Qbar: PerRegime = 0.0
    R: PerRegime = 1.0
    lx: PerRegime = 0.0
    ly: PerRegime = 0.0
    lu: PerRegime = 0.0
    H: PerRegime = 0.0
    Hbar: PerRegime = 0.0
    hx: PerRegime = 0.0
    hy: PerRegime = 0.0
    G: PerRegime = 0.0
    kappa: CoefficientValue = 0.0
    mean_field: Literal["identity", "tanh"] = "identity"
    x0: float = 0.0
    control_set: ControlSetConfig = Field(default_factory=ControlSetConfig)


ModelConfig = Annotated[Union[InterbankConfig, LinearQuadraticConfig], Field(discriminator="name")]


class AtomConfig(_Strict):
    time: float = Field(gt=0)
    size: float = Field(ge=0)


class SingularConfig(_Strict):
    atoms: List[AtomConfig] = Field(default_factory=list)
    density: Optional[CoefficientValue] = None

    @field_validator("atoms")
    @classmethod
    def _sorted(cls, atoms: List[AtomConfig]) -> List[AtomConfig]:
        times = [atom.time for atom in atoms]
        if times != sorted(times):
            raise ValueError("atoms must be sorted by time")
        return atoms


class ControlConfig(_Strict):
    feedback: Optional[Literal["maximum_principle", "riccati", "hamiltonian", "constant"]] = None
    value: float = 0.0
    shift: float = 0.0
    open_loop: Optional[Union[List[float], List[List[float]]]] = None
    singular: SingularConfig = Field(default_factory=SingularConfig)

    @model_validator(mode="after")
    def _one_regular_part(self) -> "ControlConfig":
        if (self.feedback is None) == (self.open_loop is None):
            raise ValueError("exactly one of 'feedback' and 'open_loop' must be given")
        return self


class AdjointConfig(_Strict):
    solver: Literal["auto", "explicit", "lsmc", "volterra"] = "auto"
    basis_order: Optional[int] = Field(default=None, ge=0)
    sweeps: Optional[int] = Field(default=None, ge=1)
    second_order: bool = True


class ChecksConfig(_Strict):
    variational: bool = True
    singular: bool = True
    sufficient: bool = True
    compare_costs: bool = False
    perturbations: int = Field(default=20, ge=0)
    amplitude: float = Field(default=0.5, gt=0)
    vi_tolerance: Tolerance = AUTO
    singular_tolerance: Tolerance = 1e-9
    sufficient_tolerance: Tolerance = AUTO
    cap: Optional[float] = Field(default=None, gt=0, le=1)
    control_points: Optional[int] = Field(default=None, ge=1)


class OracleConfig(_Strict):
    control_values: List[float]
    atom_times: List[float] = Field(default_factory=list)
    atom_sizes: List[float] = Field(default_factory=lambda: [0.0])
    particles: Optional[int] = Field(default=None, ge=1)


class OutputConfig(_Strict):
    directory: str = "out"
    write_paths: bool = True
    record_timings: bool = False


class ExperimentConfig(_Strict):
    model: ModelConfig
    generator: GeneratorConfig
    grid: GridConfig
    N: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    initial_regime: int = Field(default=1, ge=1)
    control: ControlConfig
    adjoint: AdjointConfig = Field(default_factory=AdjointConfig)
    checks: ChecksConfig = Field(default_factory=ChecksConfig)
    oracle: Optional[OracleConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)
    settings: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("settings")
    @classmethod
    def _known_settings(cls, settings: Dict[str, Any]) -> Dict[str, Any]:
        unknown = sorted(set(settings) - set(SETTING_SPECS))
        if unknown:
            raise ValueError(f"unknown settings {unknown}")
        return settings

    @model_validator(mode="after")
    def _regime_in_range(self) -> "ExperimentConfig":
        if self.initial_regime > len(self.generator.rates):
            raise ValueError(f"initial_regime {self.initial_regime} exceeds the number of regimes")
        return self


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _line_of(text: str, location: Sequence[Any]) -> Optional[int]:
    """Best-effort line number of the JSON key at ``location``."""
    position = 0
    found = None
    for part in location:
        if not isinstance(part, str):
            continue
        index = text.find(f'"{part}"', position)
        if index < 0:
            break
        position = index
        found = index
    return None if found is None else text.count("\n", 0, found) + 1


def _format_errors(error: ValidationError, text: str, source: str) -> str:
    lines = []
    for item in error.errors():
        location = [part for part in item["loc"] if part not in ("interbank", "linear_quadratic")]
        field = ".".join(str(part) for part in location) or "<root>"
        line = _line_of(text, location)
        where = f"{source}:{line}" if line is not None else source
        lines.append(f"{where}: {field}: {item['msg']}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(_format_errors(e, text, source)) from None


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from None
    config = parse_config(text, path)
    logger.info(f"Loaded {config.model.name} experiment from {path}")
    return config


def canonical_json(config: ExperimentConfig) -> str:
    """Sorted, whitespace-free JSON of the validated config."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def building(field: str) -> Iterator[None]:
    """Report anything a builder raises as a configuration error naming ``field``."""
    try:
        yield
    except ConfigurationError as e:
        if e.args and not str(e.args[0]).startswith(f"{field}:"):
            e.args = (f"{field}: {e.args[0]}",) + e.args[1:]
        raise
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise ConfigurationError(f"{field}: {e.__class__.__name__}: {e}") from None


def _raw(value: Any) -> Any:
    return value.model_dump() if isinstance(value, BaseModel) else value


def build_generator(config: ExperimentConfig) -> GeneratorMatrix:
    return GeneratorMatrix.from_config(config.generator.model_dump())


def build_grid(config: ExperimentConfig) -> TimeGrid:
    return TimeGrid(config.grid.T, config.grid.M)


def build_model(config: ExperimentConfig, gen: GeneratorMatrix) -> Tuple[ModelSpec, Any]:
    """The model and its parameter object."""
    block = config.model
    with building("model.control_set"):
        control_set = block.control_set.build()
    if isinstance(block, InterbankConfig):
        tables = {}
        for name, regimes in (("a", gen.dim), ("b", gen.dim), ("c", gen.dim), ("kappa", 1)):
            with building(f"model.{name}"):
                tables[name] = PiecewiseConstant.from_value(_raw(getattr(block, name)), regimes)
        with building("model"):
            params = InterbankParams(
                sigma=block.sigma, rho=block.rho, epsilon=block.epsilon, beta=block.beta, generator=gen,
                x0=block.x0, horizon=config.grid.T, control_set=control_set, **tables,
            )
            return interbank_model(params), params
    fields = block.model_dump(exclude={"name", "control_set"})
    with building("model"):
        params = LinearQuadraticParams(generator=gen, horizon=config.grid.T, control_set=control_set, **fields)
        return linear_quadratic_model(params), params


def build_singular(block: SingularConfig) -> SingularControl:
    with building("control.singular"):
        density = None if block.density is None else PiecewiseConstant.from_value(_raw(block.density), 1)
        return SingularControl(atoms=tuple(Atom(a.time, a.size) for a in block.atoms), density=density)


def build_control(config: ExperimentConfig, model: ModelSpec, params: Any, grid: TimeGrid) -> ControlPair:
    block = config.control
    singular = build_singular(block.singular)
    if block.open_loop is not None:
        return ControlPair(regular=OpenLoop(np.array(block.open_loop, dtype=float)), singular=singular)

    regular: Feedback
    if block.feedback == "constant":
        regular = constant_feedback(block.value)
    elif block.feedback == "hamiltonian":
        regular = hamiltonian_feedback(model)
    elif block.feedback == "maximum_principle":
        regular = interbank_mp_feedback(params) if isinstance(params, InterbankParams) else hamiltonian_feedback(model)
    else:
        if not isinstance(params, InterbankParams):
            raise ConfigurationError("the 'riccati' feedback needs the interbank model")
        regular = riccati_oracle(params, grid).feedback
    if block.shift:
        regular = shifted_feedback(regular, block.shift)
    return ControlPair(regular=regular, singular=singular)


AdjointSolver = Callable[[ParticleEnsemble], AdjointSample]


def solver_name(config: ExperimentConfig, params: Any) -> str:
    name = config.adjoint.solver
    if name != AUTO:
        return name
    if isinstance(params, InterbankParams):
        return "explicit" if params.is_regime_independent else "volterra"
    return "lsmc"


def build_solver(config: ExperimentConfig, model: ModelSpec, gen: GeneratorMatrix, params: Any) -> AdjointSolver:
    name = solver_name(config, params)
    order = config.adjoint.basis_order
    if name in ("explicit", "volterra") and not isinstance(params, InterbankParams):
        raise ConfigurationError(f"adjoint solver '{name}' needs the interbank model")
    if name == "explicit":
        return lambda ensemble: solve_adjoint_interbank_explicit(params, ensemble)[0]
    if name == "volterra":
        return lambda ensemble: solve_volterra_mean(params, ensemble, basis_order=order)
    return lambda ensemble: solve_adjoint_lsmc(model, gen, ensemble, basis_order=order)
