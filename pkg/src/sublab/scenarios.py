from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from .coefficients import ControlSet, CoefficientField, DeclaredLipschitz, JumpAtoms, JumpKernel, TruncationFunction
from .errors import InputError
from .pide_solver import SpatialGrid

logger = logging.getLogger(__name__)

OracleFn = Callable[[str, np.ndarray, float], Optional[np.ndarray]]


# --- payoffs ---

@dataclass(frozen=True)
class Payoff:
    """Initial datum psi with the shape facts oracles rely on (monotonicity in x1, convexity)."""

    tag: str
    fn: Callable[[np.ndarray], np.ndarray]
    increasing: bool = False
    decreasing: bool = False
    convex: bool = False
    concave: bool = False
    support_radius: Optional[float] = None

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.fn(np.atleast_2d(np.asarray(X, dtype=float)))


_PAYOFFS: Dict[str, Payoff] = {
    p.tag: p
    for p in [
        Payoff("constant", lambda X: np.ones(len(X)), increasing=True, decreasing=True, convex=True, concave=True),
        Payoff("quadratic", lambda X: np.sum(X**2, axis=1), convex=True),
        Payoff("neg_quadratic", lambda X: -np.sum(X**2, axis=1), concave=True),
        Payoff("tanh", lambda X: np.tanh(X[:, 0]), increasing=True),
        Payoff("one_minus_exp", lambda X: 1.0 - np.exp(-X[:, 0]), increasing=True, concave=True),
        Payoff("softplus", lambda X: np.logaddexp(0.0, X[:, 0]), increasing=True, convex=True),
        Payoff("bump", lambda X: np.maximum(1.0 - np.sum(X**2, axis=1), 0.0) ** 2, support_radius=1.0),
        Payoff("cosine", lambda X: np.cos(X[:, 0])),
    ]
}


def get_payoff(tag: str) -> Payoff:
    try:
        return _PAYOFFS[tag]
    except KeyError:
        raise InputError(f"unknown payoff {tag!r}; known: {sorted(_PAYOFFS)}") from None


def list_payoffs() -> List[str]:
    return list(_PAYOFFS)


# --- independent oracle routines (no solver or Monte Carlo code involved) ---

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(2.0 * math.pi)


def gaussian_expectation(payoff: Payoff, means: np.ndarray, std: float) -> np.ndarray:
    """E[psi(m + std * Z)], Z standard normal in R^d, by tensor Gauss-Hermite quadrature (64 nodes per axis)."""
    means = np.atleast_2d(means)
    if std == 0.0:
        return payoff(means)
    d = means.shape[1]
    mesh = np.meshgrid(*([_GH_NODES] * d), indexing="ij")
    Z = np.stack([m.reshape(-1) for m in mesh], axis=1)
    W = np.prod(np.stack(np.meshgrid(*([_GH_WEIGHTS] * d), indexing="ij")).reshape(d, -1), axis=0)
    pts = means[:, None, :] + std * Z[None]
    return payoff(pts.reshape(-1, d)).reshape(len(means), -1) @ W


def poisson_mixture(payoff: Payoff, means: np.ndarray, jump: np.ndarray, intensity: float, std: float = 0.0) -> np.ndarray:
    """E[psi(m + jump * N + std * Z)] with N ~ Poisson(intensity), truncated at a 1e-15 tail."""
    means = np.atleast_2d(means)
    if intensity <= 0.0:
        return gaussian_expectation(payoff, means, std)
    top = int(stats.poisson.ppf(1.0 - 1e-15, intensity)) + 1
    out = np.zeros(len(means))
    for n in range(top + 1):
        out += stats.poisson.pmf(n, intensity) * gaussian_expectation(payoff, means + n * jump, std)
    return out


def g_heat_lattice_value(payoff: Payoff, x: float, T: float, sigmas: Sequence[float], n_steps: int = 400) -> float:
    """
    Dynamic program over volatility switching on a trinomial lattice (d = 1): at every node and step the
    volatility in `sigmas` maximizing the one-step expectation is chosen.
    """
    s_max = max(sigmas)
    if s_max == 0.0:
        return float(payoff(np.array([[x]]))[0])
    dt = T / n_steps
    dx = s_max * math.sqrt(dt)
    nodes = x + dx * np.arange(-n_steps, n_steps + 1)
    V = payoff(nodes[:, None])
    probs = [0.5 * s**2 * dt / dx**2 for s in sigmas]
    for _ in range(n_steps):
        second = V[2:] - 2.0 * V[1:-1] + V[:-2]
        V = V[1:-1] + np.max(np.stack([p * second for p in probs]), axis=0)
    return float(V[0])


# --- scenario container and registry ---

@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    field: CoefficientField
    controls: ControlSet
    grid: SpatialGrid
    horizon: float
    default_payoff: str
    oracle: Optional[OracleFn]
    notes: str
    params: BaseModel
    drift_bound: float = 0.0

    @property
    def dim(self) -> int:
        return self.field.dim

    @property
    def x0(self) -> np.ndarray:
        return np.zeros(self.field.dim)


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LinearLevyParams(_Params):
    drift: float = 0.1
    sigma: float = Field(default=0.4, ge=0.0)
    jump: float = 0.5
    rate: float = Field(default=1.0, ge=0.0)
    label: str = "f0"


class GBrownianParams(_Params):
    sigma_low: float = Field(default=0.5, ge=0.0)
    sigma_high: float = Field(default=1.0, ge=0.0)
    dim: int = Field(default=1, ge=1, le=2)

    @model_validator(mode="after")
    def _ordered(self) -> "GBrownianParams":
        if self.sigma_low > self.sigma_high:
            raise ValueError(f"sigma_low={self.sigma_low} exceeds sigma_high={self.sigma_high}")
        return self


class DriftBandParams(_Params):
    b_low: float = -1.0
    b_high: float = 1.0
    levels: int = Field(default=3, ge=1)
    sigma: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _ordered(self) -> "DriftBandParams":
        if self.b_low > self.b_high:
            raise ValueError(f"b_low={self.b_low} exceeds b_high={self.b_high}")
        return self


class PoissonBandParams(_Params):
    lambda_low: float = Field(default=0.5, ge=0.0)
    lambda_high: float = Field(default=1.5, ge=0.0)
    levels: int = Field(default=2, ge=1)
    jump: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _ordered(self) -> "PoissonBandParams":
        if self.lambda_low > self.lambda_high:
            raise ValueError(f"lambda_low={self.lambda_low} exceeds lambda_high={self.lambda_high}")
        return self


class MixedJumpDiffusionParams(_Params):
    dim: int = Field(default=1, ge=1, le=2)
    jump_scales: Tuple[float, ...] = (0.5, 1.0)
    vols: Tuple[float, ...] = (0.2, 0.4)
    rho: float = Field(default=0.3, gt=-1.0, lt=1.0)
    rate: float = Field(default=1.0, ge=0.0)
    small_jump_mass: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _nonempty(self) -> "MixedJumpDiffusionParams":
        if not self.jump_scales or not self.vols or min(self.jump_scales) < 0 or min(self.vols) < 0:
            raise ValueError("jump_scales and vols must be nonempty and nonnegative")
        return self


# b~, sigma and k are constant in x for the constant-coefficient scenarios
_CONSTANT_COEFFICIENTS = DeclaredLipschitz(btilde=0.0, sigma=0.0, k_over_gamma=0.0)


def _levels(lo: float, hi: float, levels: int) -> List[float]:
    if lo == hi:
        return [lo]
    return [float(v) for v in np.linspace(lo, hi, max(levels, 2))]


def _constant_drift(dim: int, value: Callable[[np.ndarray], np.ndarray]):
    return lambda f, X: np.broadcast_to(value(f), (len(X), dim)).astype(float)


def _scaled_identity(dim: int, noise_dim: int, scale: Callable[[np.ndarray], float]):
    return lambda f, X: np.broadcast_to(scale(f) * np.eye(dim, noise_dim), (len(X), dim, noise_dim)).copy()


def _no_jumps(dim: int):
    return lambda f, X, Z: np.zeros((len(X), len(Z), dim))


def _linear_oracle(payoff_mean: Callable[[Payoff, np.ndarray, float], np.ndarray]) -> OracleFn:
    def oracle(tag: str, X: np.ndarray, T: float) -> Optional[np.ndarray]:
        return payoff_mean(get_payoff(tag), np.atleast_2d(X), T)

    return oracle


def _build_linear_levy(p: LinearLevyParams) -> Scenario:
    h = TruncationFunction()
    kernel = JumpKernel(
        atoms=(JumpAtoms.of([[p.jump]], [p.rate]),),
        dim=1,
        mark_dim=1,
        gamma=lambda Z: np.abs(Z[:, 0]),
    )
    controls = ControlSet.from_values([[0.0]], labels=[p.label])
    field = CoefficientField(
        dim=1,
        noise_dim=1,
        controls=controls,
        drift=_constant_drift(1, lambda f: p.drift),
        diffusion=_scaled_identity(1, 1, lambda f: p.sigma),
        jump=lambda f, X, Z: np.broadcast_to(Z[None, :, :], (len(X), len(Z), 1)).copy(),
        kernel=kernel,
        declared_lipschitz=_CONSTANT_COEFFICIENTS,
        name="linear_levy",
    )
    compensated = p.drift - p.rate * float(h(np.array([p.jump]))[0])

    def mean(payoff: Payoff, X: np.ndarray, T: float) -> np.ndarray:
        return poisson_mixture(payoff, X + compensated * T, np.array([p.jump]), p.rate * T, p.sigma * math.sqrt(T))

    return Scenario(
        name="linear_levy",
        field=field,
        controls=controls,
        grid=SpatialGrid.uniform(-6.0, 6.0, 241),
        horizon=0.5,
        default_payoff="tanh",
        oracle=_linear_oracle(mean),
        notes=(
            "Singleton F: the sublinear semigroup is the linear Levy semigroup. Constant coefficients, one "
            "finite-activity atom with gamma(z)=|z|. Lipschitz conditions: b~ constant (constant 0), k/gamma constant."
        ),
        params=p,
        drift_bound=abs(p.drift),
    )


def _build_g_brownian(p: GBrownianParams) -> Scenario:
    d = p.dim
    sigmas = _levels(p.sigma_low, p.sigma_high, 2)
    controls = ControlSet.from_values([[s] for s in sigmas], labels=[f"sigma={s:g}" for s in sigmas])
    field = CoefficientField(
        dim=d,
        noise_dim=d,
        controls=controls,
        drift=_constant_drift(d, lambda f: 0.0),
        diffusion=_scaled_identity(d, d, lambda f: f[0]),
        jump=_no_jumps(d),
        kernel=JumpKernel(atoms=tuple(JumpAtoms.empty(d) for _ in sigmas), dim=d, mark_dim=d, gamma=lambda Z: np.linalg.norm(Z, axis=1)),
        declared_lipschitz=_CONSTANT_COEFFICIENTS,
        name="g_brownian",
    )

    def oracle(tag: str, X: np.ndarray, T: float) -> Optional[np.ndarray]:
        payoff = get_payoff(tag)
        if payoff.convex:
            return gaussian_expectation(payoff, np.atleast_2d(X), p.sigma_high * math.sqrt(T))
        if payoff.concave:
            return gaussian_expectation(payoff, np.atleast_2d(X), p.sigma_low * math.sqrt(T))
        return None

    return Scenario(
        name="g_brownian",
        field=field,
        controls=controls,
        grid=SpatialGrid.uniform(-4.0, 4.0, 201 if d == 1 else 81, dim=d),
        horizon=0.25,
        default_payoff="quadratic",
        oracle=oracle,
        notes=(
            "Volatility uncertainty sigma in [sigma_low, sigma_high] (G-heat equation). No jumps, constant "
            "bounded coefficients, so the tightness, growth and Lipschitz conditions hold trivially. Oracle: "
            "Gaussian expectation at the upper (convex psi) or lower (concave psi) volatility."
        ),
        params=p,
    )


def _build_drift_band(p: DriftBandParams) -> Scenario:
    drifts = _levels(p.b_low, p.b_high, p.levels)
    controls = ControlSet.from_values([[b] for b in drifts], labels=[f"b={b:g}" for b in drifts])
    field = CoefficientField(
        dim=1,
        noise_dim=1,
        controls=controls,
        drift=_constant_drift(1, lambda f: f[0]),
        diffusion=_scaled_identity(1, 1, lambda f: p.sigma),
        jump=_no_jumps(1),
        kernel=JumpKernel(atoms=tuple(JumpAtoms.empty(1) for _ in drifts), dim=1, mark_dim=1, gamma=lambda Z: np.abs(Z[:, 0])),
        declared_lipschitz=_CONSTANT_COEFFICIENTS,
        name="drift_band",
    )

    def oracle(tag: str, X: np.ndarray, T: float) -> Optional[np.ndarray]:
        payoff = get_payoff(tag)
        X = np.atleast_2d(X)
        if payoff.increasing:
            return gaussian_expectation(payoff, X + p.b_high * T, p.sigma * math.sqrt(T))
        if payoff.decreasing:
            return gaussian_expectation(payoff, X + p.b_low * T, p.sigma * math.sqrt(T))
        return None

    return Scenario(
        name="drift_band",
        field=field,
        controls=controls,
        grid=SpatialGrid.uniform(-4.0, 4.0, 161),
        horizon=0.5,
        default_payoff="tanh",
        oracle=oracle,
        notes=(
            "Drift uncertainty b in [b_low, b_high] with common volatility. Constant bounded coefficients "
            "satisfy the tightness, growth and Lipschitz conditions. Oracle: monotone psi is maximized by the extreme drift."
        ),
        params=p,
        drift_bound=max(abs(p.b_low), abs(p.b_high)),
    )


def _build_poisson_band(p: PoissonBandParams) -> Scenario:
    h = TruncationFunction()
    intensities = _levels(p.lambda_low, p.lambda_high, p.levels)
    controls = ControlSet.from_values([[lam] for lam in intensities], labels=[f"lambda={lam:g}" for lam in intensities])
    h_jump = float(h(np.array([p.jump]))[0])
    kernel = JumpKernel(
        atoms=tuple(JumpAtoms.of([[1.0]], [lam]) for lam in intensities),
        dim=1,
        mark_dim=1,
        gamma=lambda Z: p.jump * np.abs(Z[:, 0]),
    )
    field = CoefficientField(
        dim=1,
        noise_dim=1,
        controls=controls,
        drift=_constant_drift(1, lambda f: f[0] * h_jump),
        diffusion=_scaled_identity(1, 1, lambda f: 0.0),
        jump=lambda f, X, Z: np.broadcast_to(p.jump * Z[None, :, :], (len(X), len(Z), 1)).copy(),
        kernel=kernel,
        declared_lipschitz=_CONSTANT_COEFFICIENTS,
        name="poisson_band",
    )

    def oracle(tag: str, X: np.ndarray, T: float) -> Optional[np.ndarray]:
        payoff = get_payoff(tag)
        if payoff.increasing:
            return poisson_mixture(payoff, np.atleast_2d(X), np.array([p.jump]), p.lambda_high * T)
        if payoff.decreasing:
            return poisson_mixture(payoff, np.atleast_2d(X), np.array([p.jump]), p.lambda_low * T)
        return None

    return Scenario(
        name="poisson_band",
        field=field,
        controls=controls,
        grid=SpatialGrid.uniform(-3.0, 9.0, 241),
        horizon=1.0,
        default_payoff="one_minus_exp",
        oracle=oracle,
        notes=(
            "Jump-intensity uncertainty lambda in [lambda_low, lambda_high], fixed jump size, drift lambda*h(jump) "
            "cancelling the compensator so X - x is a Poisson count. Finite activity, gamma = jump. Lipschitz "
            "conditions hold with b~ constant. Oracle: Poisson sum at the extreme intensity for monotone psi."
        ),
        params=p,
    )


def _build_mixed(p: MixedJumpDiffusionParams) -> Scenario:
    d = p.dim
    values = [[s, v] for s in p.jump_scales for v in p.vols]
    controls = ControlSet.from_values(values, labels=[f"s={s:g},v={v:g}" for s, v in values])
    chol = np.linalg.cholesky(np.array([[1.0, p.rho], [p.rho, 1.0]]))[:d, :d] if d == 2 else np.eye(1)
    marks = np.array([[-0.5], [0.8]]) if d == 1 else np.array([[-0.5, 0.2], [0.8, -0.3]])
    s_max = max(p.jump_scales)
    second_moment = p.small_jump_mass * np.eye(d)
    kernel = JumpKernel(
        atoms=tuple(JumpAtoms.of(marks, [p.rate] * len(marks)) for _ in values),
        dim=d,
        mark_dim=d,
        gamma=lambda Z: 2.0 * s_max * np.linalg.norm(Z, axis=1),
        kappa=0.5,
        second_moments=tuple(second_moment.copy() for _ in values),
    )
    field = CoefficientField(
        dim=d,
        noise_dim=d,
        controls=controls,
        drift=lambda f, X: -0.5 * np.tanh(X),
        diffusion=lambda f, X: np.broadcast_to(f[1] * chol, (len(X), d, d)).copy(),
        jump=lambda f, X, Z: f[0] * (1.0 + np.tanh(X[:, 0]))[:, None, None] * Z[None, :, :],
        kernel=kernel,
        name="mixed_jump_diffusion",
    )
    return Scenario(
        name="mixed_jump_diffusion",
        field=field,
        controls=controls,
        grid=SpatialGrid.uniform(-4.0, 4.0, 161 if d == 1 else 41, dim=d),
        horizon=0.5,
        default_payoff="tanh",
        oracle=None,
        notes=(
            "Joint uncertainty over (jump scale, volatility) with state-dependent jumps "
            "k(f,x,z) = s z (1 + tanh x1) and bounded mean-reverting drift. |k| <= gamma(z)(1+|x|) and "
            "|k(x)-k(y)| <= gamma(z)|x-y| with gamma(z) = 2 s_max |z|: growth and Lipschitz conditions hold. "
            "small_jump_mass > 0 adds a moment-matched small-jump covariance (no oracle either way)."
        ),
        params=p,
        drift_bound=0.5,
    )


@dataclass(frozen=True)
class _Entry:
    params: type
    builder: Callable[[BaseModel], Scenario]


_REGISTRY: Dict[str, _Entry] = {
    "linear_levy": _Entry(LinearLevyParams, _build_linear_levy),
    "g_brownian": _Entry(GBrownianParams, _build_g_brownian),
    "drift_band": _Entry(DriftBandParams, _build_drift_band),
    "poisson_band": _Entry(PoissonBandParams, _build_poisson_band),
    "mixed_jump_diffusion": _Entry(MixedJumpDiffusionParams, _build_mixed),
}


class ScenarioInfo(BaseModel):
    name: str
    notes: str
    parameters: dict


def get_scenario(name: str, params: Optional[dict] = None) -> Scenario:
    """Builds a bundled scenario; raises InputError for unknown names and ValidationError for bad params."""
    entry = _REGISTRY.get(name)
    if entry is None:
        raise InputError(f"unknown scenario {name!r}; known: {list(_REGISTRY)}")
    validated = entry.params.model_validate(params or {})
    scenario = entry.builder(validated)
    logger.debug(f"🧩 built scenario {name} with {validated.model_dump()}")
    return scenario


def list_scenarios() -> List[ScenarioInfo]:
    infos = []
    for name, entry in _REGISTRY.items():
        infos.append(ScenarioInfo(name=name, notes=entry.builder(entry.params()).notes, parameters=entry.params.model_json_schema()))
    return infos
