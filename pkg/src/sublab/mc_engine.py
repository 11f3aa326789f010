from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence
import logging
import math

import numpy as np
from pydantic import BaseModel
from scipy import special, stats

from .coefficients import CoefficientField
from .config import settings
from .errors import InputError
from .pide_solver import PolicyRecord, SpatialGrid

logger = logging.getLogger(__name__)

Payoff = Callable[[np.ndarray], np.ndarray]
# affine map of the generator range [0, 1 - 2^-53] into the open interval (0, 1): ndtri and poisson.ppf stay finite
# affine map of [0, 1 - 2^-53] onto [2^-54, 1 - 2^-54]; ndtri and poisson.ppf stay finite
_UNIFORM_SHIFT = 2.0**-54
_UNIFORM_SCALE = 1.0 - 2.0**-53
_EXCURSION_LEVELS = (0.5, 0.9, 0.99)


@dataclass(frozen=True, eq=False)
class MarkovPolicy:
    """
    Piecewise-constant Markov policy: control choice[step, cell] on a uniform time grid.

    With `grid=None` the policy ignores the state (choice has one column). States outside the grid box
    use `default_control` when set, else the nearest boundary cell.
    """

    n_steps: int
    dt: float
    choice: np.ndarray
    grid: Optional[SpatialGrid] = None
    default_control: Optional[int] = None
    provenance: str = "custom"

    def __post_init__(self):
        choice = np.asarray(self.choice)
        if self.n_steps < 1:
            raise InputError("policy needs at least one time step")
        if self.dt <= 0:
            raise InputError(f"policy time step must be positive, got {self.dt}")
        cells = 1 if self.grid is None else self.grid.size
        if choice.shape != (self.n_steps, cells):
            raise InputError(f"policy choice must have shape {(self.n_steps, cells)}, got {choice.shape}")
        if choice.size and choice.min() < 0:
            raise InputError("policy choices must be valid control indices")
        object.__setattr__(self, "choice", choice.astype(np.int64))

    @classmethod
    def constant(cls, control: int, n_steps: int, dt: float) -> "MarkovPolicy":
        return cls(
            n_steps=n_steps,
            dt=dt,
            choice=np.full((n_steps, 1), int(control)),
            provenance=f"constant:{int(control)}",
        )

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def max_control(self) -> int:
        top = int(self.choice.max())
        return max(top, self.default_control or 0)

    def lookup(self, step: int, X: np.ndarray) -> np.ndarray:
        if self.grid is None:
            return np.full(len(X), self.choice[step, 0])
        out = self.choice[step, self.grid.nearest_index(X)]
        if self.default_control is not None:
            out = np.where(self.grid.contains(X), out, self.default_control)
        return out


@dataclass(frozen=True)
class PathOutcome:
    terminal: np.ndarray
    sup_deviation: float


@dataclass(frozen=True, eq=False)
class PathBatch:
    terminal: np.ndarray  # (n, d)
    sup_deviation: np.ndarray  # (n,)


class SimulationResult(BaseModel):
    mean: float
    stderr: float
    n_paths: int
    n_steps: int
    seed: int
    policy: str
    max_excursion_quantiles: Dict[str, float]


def _check_horizon(policy: MarkovPolicy, T: float):
    if policy.dt <= 0 or T <= 0:
        raise InputError("time step and horizon must be positive")
    if abs(policy.horizon - T) > 1e-9 * max(1.0, T):
        raise InputError(f"policy time grid covers [0, {policy.horizon}], expected [0, {T}]")


def _poisson_counts(U: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """Poisson(intensity) counts by CDF inversion of the given uniforms, column per atom."""
    counts = np.zeros_like(U)
    for i, mu in enumerate(intensity):
        if mu > 0.0:
            counts[:, i] = stats.poisson.ppf(U[:, i], mu)
    return counts


def _matrix_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    return vecs * np.sqrt(np.maximum(vals, 0.0))


class _Stepper:
    """Per-control Euler increment with a fixed layout of uniform slots per step."""

    def __init__(self, field: CoefficientField):
        self.field = field
        self.r = field.noise_dim
        self.m = field.kernel.max_atoms
        self.d = field.dim
        self.n_slots = self.r + self.m + self.d
        self.roots = [_matrix_sqrt(field.second_moment(f)) for f in range(len(field.controls))]

    def increment(self, f: int, X: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
        field = self.field
        xi = special.ndtri(U[:, : self.r])
        out = field.b(f, X) * dt + math.sqrt(dt) * np.einsum("nij,nj->ni", field.sigma(f, X), xi)
        w = field.rates(f)
        if len(w):
            k = field.jumps(f, X)
            counts = _poisson_counts(U[:, self.r: self.r + len(w)], w * dt)
            out += np.einsum("na,nad->nd", counts, k) - dt * np.einsum("a,nad->nd", w, field.truncation(k))
        root = self.roots[f]
        if np.any(root):
            eta = special.ndtri(U[:, self.r + self.m:])
            out += math.sqrt(dt) * eta @ root.T
        return out


def _open_unit(u: np.ndarray) -> np.ndarray:
    return u * _UNIFORM_SCALE + _UNIFORM_SHIFT


def _uniforms(seed: int, path_index: int, n_steps: int, n_slots: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed, path_index]))
    return _open_unit(rng.random((n_steps, n_slots)))


def _simulate_block(field: CoefficientField, policy: MarkovPolicy, x0: np.ndarray, seed: int,
                    start: int, stop: int) -> PathBatch:
    stepper = _Stepper(field)
    U = np.stack([_uniforms(seed, p, policy.n_steps, stepper.n_slots) for p in range(start, stop)])
    X = np.broadcast_to(x0, (stop - start, field.dim)).copy()
    sup = np.zeros(stop - start)
    for j in range(policy.n_steps):
        controls = policy.lookup(j, X)
        dX = np.zeros_like(X)
        for f in np.unique(controls):
            sel = controls == f
            dX[sel] = stepper.increment(int(f), X[sel], U[sel, j, :], policy.dt)
        X = X + dX
        np.maximum(sup, np.linalg.norm(X - x0, axis=1), out=sup)
    return PathBatch(terminal=X, sup_deviation=sup)


def _prepare(field: CoefficientField, policy: MarkovPolicy, x0, T: float) -> np.ndarray:
    _check_horizon(policy, T)
    if policy.max_control >= len(field.controls):
        raise InputError(f"policy uses control {policy.max_control}, field has {len(field.controls)}")
    x0 = field.points(x0)
    if len(x0) != 1:
        raise InputError("x0 must be a single point")
    return x0[0]


def simulate_path(field: CoefficientField, policy: MarkovPolicy, x0, T: float, seed: int, path_index: int) -> PathOutcome:
    """One Euler path; fully determined by (seed, path_index)."""
    x0 = _prepare(field, policy, x0, T)
    batch = _simulate_block(field, policy, x0, seed, path_index, path_index + 1)
    return PathOutcome(terminal=batch.terminal[0], sup_deviation=float(batch.sup_deviation[0]))


def simulate_paths(field: CoefficientField, policy: MarkovPolicy, x0, T: float, n_paths: int, seed: int) -> PathBatch:
    """
    Paths 0..n_paths-1 in fixed blocks of settings.MC_BLOCK_SIZE on settings.THREADS workers.

    Blocks are joined in path order, so the result does not depend on the worker count.
    """
    if n_paths < 1:
        raise InputError("n_paths must be positive")
    x0 = _prepare(field, policy, x0, T)
    size = settings.MC_BLOCK_SIZE
    blocks = [(s, min(s + size, n_paths)) for s in range(0, n_paths, size)]
    with ThreadPoolExecutor(max_workers=settings.THREADS) as pool:
        batches = list(pool.map(lambda b: _simulate_block(field, policy, x0, seed, *b), blocks))
    return PathBatch(
        terminal=np.concatenate([b.terminal for b in batches]),
        sup_deviation=np.concatenate([b.sup_deviation for b in batches]),
    )


def _summarize(values: np.ndarray, batch: PathBatch, policy: MarkovPolicy, seed: int) -> SimulationResult:
    shifted = values - values[0]
    mean = float(values[0] + np.mean(shifted))
    stderr = float(np.std(shifted, ddof=1) / math.sqrt(len(values)))
    quantiles = np.quantile(batch.sup_deviation, _EXCURSION_LEVELS)
    return SimulationResult(
        mean=mean,
        stderr=stderr,
        n_paths=len(values),
        n_steps=policy.n_steps,
        seed=seed,
        policy=policy.provenance,
        max_excursion_quantiles={f"q{int(round(100 * q))}": float(v) for q, v in zip(_EXCURSION_LEVELS, quantiles)},
    )


def estimate_value(field: CoefficientField, policy: MarkovPolicy, psi: Payoff, x0, T: float, n_paths: int,
                   seed: int) -> SimulationResult:
    """Monte Carlo mean and standard error of psi(X_T) under the policy; a lower bound for the sublinear value."""
    if n_paths < 100:
        raise InputError(f"n_paths must be >= 100, got {n_paths}")
    batch = simulate_paths(field, policy, x0, T, n_paths, seed)
    values = np.asarray(psi(batch.terminal), dtype=float)
    result = _summarize(values, batch, policy, seed)
    logger.info(f"🎲 [{field.name}] {policy.provenance}: mean={result.mean:.6f} ± {result.stderr:.2e} ({n_paths} paths)")
    return result


class ConstantPolicySearch(BaseModel):
    best: int
    results: List[SimulationResult]


def best_constant_policy(field: CoefficientField, controls: Optional[Sequence[int]], psi: Payoff, x0, T: float,
                         n_paths: int, seed: int, n_steps: int = 100) -> ConstantPolicySearch:
    """Every constant policy on common random numbers; ties go to the lowest control index."""
    indices = list(range(len(field.controls))) if controls is None else [field.controls.check_index(f) for f in controls]
    if not indices:
        raise InputError("best_constant_policy needs at least one control")
    results = [
        estimate_value(field, MarkovPolicy.constant(f, n_steps, T / n_steps), psi, x0, T, n_paths, seed)
        for f in indices
    ]
    best = indices[int(np.argmax([r.mean for r in results]))]
    return ConstantPolicySearch(best=best, results=results)


def extract_policy_from_pde(record: PolicyRecord, T: Optional[float] = None, n_steps: Optional[int] = None,
                            grid: Optional[SpatialGrid] = None) -> MarkovPolicy:
    """
    MC step j covers time-to-go (T - s_{j+1}, T - s_j]; it takes the solver layer k = max{k: tau_k <= m_j}
    with m_j the midpoint of that interval and tau_k the layer's starting time-to-go. Out-of-box states
    read the nearest boundary cell.
    """
    if grid is not None and grid != record.grid:
        raise InputError(f"policy grid {grid} does not match the solver grid {record.grid}")
    T = record.horizon if T is None else float(T)
    if abs(T - record.horizon) > 1e-9 * max(1.0, T):
        raise InputError(f"solver horizon {record.horizon} does not match T={T}")
    n_steps = n_steps or len(record.times)
    dt = T / n_steps
    midpoints = T - dt * (np.arange(n_steps) + 0.5)
    layers = np.clip(np.searchsorted(record.times, midpoints, side="right") - 1, 0, len(record.times) - 1)
    return MarkovPolicy(
        n_steps=n_steps,
        dt=dt,
        choice=record.choice[layers],
        grid=record.grid,
        provenance="pde_argmax",
    )


class ExitTable(BaseModel):
    u: float
    r_values: List[float]
    probabilities: List[float]
    stderr: List[float]
    n_paths: int


def exit_probability(field: CoefficientField, policy: MarkovPolicy, x0, r_values: Sequence[float], u: float,
                     n_paths: int, seed: int) -> ExitTable:
    """Empirical P(sup_{s<=u} ||X_s - x0|| > r) over the step endpoints, one shared sample for every r."""
    r = [float(v) for v in r_values]
    if any(b <= a for a, b in zip(r, r[1:])):
        raise InputError("r_values must be strictly increasing")
    batch = simulate_paths(field, policy, x0, u, n_paths, seed)
    probs = [float(np.mean(batch.sup_deviation > radius)) for radius in r]
    return ExitTable(
        u=float(u),
        r_values=r,
        probabilities=probs,
        stderr=[math.sqrt(p * (1.0 - p) / n_paths) for p in probs],
        n_paths=n_paths,
    )
