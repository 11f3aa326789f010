from dataclasses import dataclass, replace
from itertools import product
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import sparse

from .coefficients import Box, CoefficientField, transport_drift
from .config import settings
from .errors import InputError, StencilError, UnsupportedError

if TYPE_CHECKING:
    from .scenarios import Scenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid on a box in dimension 1 or 2; nodes are ordered C-style (last axis fastest)."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    n: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if not (len(self.lo) == len(self.hi) == len(self.n)) or self.dim not in (1, 2):
            raise InputError(f"grid must be 1- or 2-dimensional with matching lo/hi/n, got {self}")
        if any(n < 3 for n in self.n):
            raise InputError("grid needs at least 3 nodes per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InputError("grid box must have hi > lo on every axis")

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int, dim: int = 1) -> "SpatialGrid":
        return cls(lo=(lo,) * dim, hi=(hi,) * dim, n=(n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.n) - 1)

    @property
    def box(self) -> Box:
        return Box(lo=self.lo, hi=self.hi)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(l, h, n) for l, h, n in zip(self.lo, self.hi, self.n)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def refined(self) -> "SpatialGrid":
        return SpatialGrid(lo=self.lo, hi=self.hi, n=tuple(2 * (n - 1) + 1 for n in self.n))

    def interior_mask(self) -> np.ndarray:
        """Nodes in the middle third of the box along every axis."""
        X = self.nodes()
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        third = (hi - lo) / 3.0
        return np.all((X >= lo + third - 1e-12) & (X <= hi - third + 1e-12), axis=1)

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        P = np.atleast_2d(points)
        return np.all((P >= np.asarray(self.lo) - tol) & (P <= np.asarray(self.hi) + tol), axis=1)

    def nearest_index(self, points: np.ndarray) -> np.ndarray:
        """Flat index of the nearest node, clamping points outside the box to the boundary."""
        P = np.atleast_2d(points)
        idx = np.rint((P - np.asarray(self.lo)) / self.spacing).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.n) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.n)

    def interpolation_matrix(self, points: np.ndarray) -> sparse.csr_matrix:
        """Multilinear interpolation weights (P x N), with clamp extension outside the box."""
        P = np.clip(np.atleast_2d(points), np.asarray(self.lo), np.asarray(self.hi))
        s = (P - np.asarray(self.lo)) / self.spacing
        base = np.clip(np.floor(s).astype(np.int64), 0, np.asarray(self.n) - 2)
        frac = s - base
        rows, cols, vals = [], [], []
        for corner in product((0, 1), repeat=self.dim):
            c = np.asarray(corner)
            weight = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            rows.append(np.arange(len(P)))
            cols.append(np.ravel_multi_index(tuple((base + c).T), self.n))
            vals.append(weight)
        return sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(P), self.size)
        ).tocsr()


@dataclass(frozen=True, eq=False)
class ValueField:
    """u(t, .) on a grid; reads off the grid use the clamp extension."""

    grid: SpatialGrid
    t: float
    values: np.ndarray
    extension: str = "clamp"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape != (self.grid.size,):
            raise InputError(f"expected {self.grid.size} node values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("value field must be finite")
        if self.t < 0:
            raise InputError("time stamp must be >= 0")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: SpatialGrid, fn: Callable[[np.ndarray], np.ndarray], t: float = 0.0) -> "ValueField":
        return cls(grid=grid, t=t, values=np.asarray(fn(grid.nodes()), dtype=float))

    def at(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return self.grid.interpolation_matrix(P) @ self.values

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_frame(self) -> pd.DataFrame:
        X = self.grid.nodes()
        columns = {f"x{i + 1}": X[:, i] for i in range(self.grid.dim)}
        columns["value"] = self.values
        return pd.DataFrame(columns)


@dataclass(frozen=True)
class SchemeConfig:
    cfl_safety: float = 0.9
    interpolation: str = "multilinear"
    kappa: float = 0.5
    max_timestep: Optional[float] = 1e-2

    def __post_init__(self):
        if not 0.0 < self.cfl_safety <= 1.0:
            raise InputError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if not 0.0 < self.kappa < 1.0:
            raise InputError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.interpolation != "multilinear":
            raise InputError("only multilinear interpolation is supported")
        if self.max_timestep is not None and self.max_timestep <= 0:
            raise InputError("max_timestep must be positive")


class MonotoneScheme:
    """
    Explicit monotone discretization of the HJB operator for a fixed (field, grid).

    For each control the spatial operator is stored as nonnegative difference weights W_jk, so that
    (L_f u)_j = sum_k W_jk (u_k - u_j): upwinded transport drift, central (7-point in 2-d) diffusion
    and the jump term sum_i w_i (u(x + k_i) - u(x)) read through multilinear interpolation.
    """

    def __init__(self, field: CoefficientField, grid: SpatialGrid, config: SchemeConfig):
        if field.dim != grid.dim:
            raise InputError(f"field dimension {field.dim} does not match grid dimension {grid.dim}")
        self.field = field
        self.grid = grid
        self.config = config
        self.clamp_reads = 0
        self._operators: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._cfl_denominator = 0.0

        X = grid.nodes()
        for f in range(len(field.controls)):
            self._operators.append(self._assemble(f, X))
        if self.clamp_reads:
            logger.warning(f"⚠️ [{field.name}] {self.clamp_reads} jump destinations fall outside the grid box (clamped)")

    def _assemble(self, f: int, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        grid, N = self.grid, self.grid.size
        h = grid.spacing
        idx = np.arange(N).reshape(grid.n)
        beta = transport_drift(self.field, f, X)
        A = self.field.covariance(f, X) + self.field.second_moment(f)[None]

        def shifted(offsets: Sequence[int]) -> np.ndarray:
            # neighbor index under the clamp extension
            out = idx
            for axis, o in enumerate(offsets):
                if o:
                    take = np.clip(np.arange(grid.n[axis]) + o, 0, grid.n[axis] - 1)
                    out = np.take(out, take, axis=axis)
            return out.reshape(-1)

        rows, cols, vals = [], [], []

        def add(target: np.ndarray, weight: np.ndarray):
            rows.append(np.arange(N))
            cols.append(target)
            vals.append(weight)

        cross = np.zeros(N)
        if grid.dim == 2:
            cross = A[:, 0, 1] / (2.0 * h[0] * h[1])
            for axis in range(2):
                slack = 0.5 * A[:, axis, axis] / h[axis] ** 2 - np.abs(cross)
                bad = np.flatnonzero(slack < -1e-12 * np.maximum(1.0, np.abs(cross)))
                if len(bad):
                    node = tuple(X[bad[0]].tolist())
                    raise StencilError(
                        f"[{self.field.name}] cross-diffusion stencil not diagonally dominant at node {node}, control {f}",
                        node=node,
                        control=f,
                    )
            add(shifted((1, 1)), np.maximum(cross, 0.0))
            add(shifted((-1, -1)), np.maximum(cross, 0.0))
            add(shifted((1, -1)), np.maximum(-cross, 0.0))
            add(shifted((-1, 1)), np.maximum(-cross, 0.0))

        denominator = np.zeros(N)
        for axis in range(grid.dim):
            plus = [0] * grid.dim
            plus[axis] = 1
            minus = [0] * grid.dim
            minus[axis] = -1
            diffusion = 0.5 * A[:, axis, axis] / h[axis] ** 2 - np.abs(cross)
            add(shifted(plus), np.maximum(beta[:, axis], 0.0) / h[axis] + diffusion)
            add(shifted(minus), np.maximum(-beta[:, axis], 0.0) / h[axis] + diffusion)
            denominator += np.abs(beta[:, axis]) / h[axis] + A[:, axis, axis] / h[axis] ** 2

        k = self.field.jumps(f, X)
        w = self.field.rates(f)
        for i in range(len(w)):
            destinations = X + k[:, i, :]
            self.clamp_reads += int(np.count_nonzero(~grid.contains(destinations)))
            P = grid.interpolation_matrix(destinations).tocoo()
            rows.append(P.row)
            cols.append(P.col)
            vals.append(w[i] * P.data)
        denominator += float(np.sum(w))
        self._cfl_denominator = max(self._cfl_denominator, float(np.max(denominator)))

        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        keep = (r != c) & (v != 0.0)
        W = sparse.coo_matrix((v[keep], (r[keep], c[keep])), shape=(N, N)).tocsr().tocoo()
        return W.row, W.col, W.data

    @property
    def cfl_denominator(self) -> float:
        return self._cfl_denominator

    def rates(self, u: np.ndarray) -> np.ndarray:
        """(n_controls, N) array of (L_f u)_j in difference form."""
        N = self.grid.size
        return np.stack(
            [np.bincount(r, weights=v * (u[c] - u[r]), minlength=N) for r, c, v in self._operators]
        )

    def step(self, u: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
        rates = self.rates(u)
        choice = np.argmax(rates, axis=0)
        out = u + dt * rates[choice, np.arange(len(u))]
        # rounding guard: the exact update is a convex combination of layer values
        np.clip(out, u.min(), u.max(), out=out)
        return out, choice


def cfl_timestep(field: CoefficientField, grid: SpatialGrid, config: SchemeConfig, output_interval: float,
                 scheme: Optional[MonotoneScheme] = None) -> float:
    """
    dt = cfl_safety / max_{nodes, controls} [sum_axis (|beta|/dx + (a+M)_aa/dx^2) + sum_i w_i].

    Falls back to the output interval when every coefficient vanishes.
    """
    scheme = scheme or MonotoneScheme(field, grid, config)
    if scheme.cfl_denominator <= 0.0:
        return float(output_interval)
    return config.cfl_safety / scheme.cfl_denominator


def step_explicit(u: ValueField, field: CoefficientField, config: SchemeConfig, dt: float,
                  scheme: Optional[MonotoneScheme] = None) -> ValueField:
    scheme = scheme or MonotoneScheme(field, u.grid, config)
    if dt <= 0:
        raise InputError("time step must be positive")
    if scheme.cfl_denominator > 0 and dt > config.cfl_safety / scheme.cfl_denominator * (1 + 1e-12):
        raise InputError(f"dt={dt} exceeds the CFL bound {config.cfl_safety / scheme.cfl_denominator}")
    values, _ = scheme.step(u.values, dt)
    return ValueField(grid=u.grid, t=u.t + dt, values=values)


@dataclass(frozen=True, eq=False)
class PolicyRecord:
    """Solver argmax per node for each time layer; layer k starts at time-to-go times[k]."""

    grid: SpatialGrid
    horizon: float
    times: np.ndarray
    steps: np.ndarray
    choice: np.ndarray  # (n_layers, N)


class SolveSummary(BaseModel):
    scenario: str
    grid_lo: List[float]
    grid_hi: List[float]
    grid_n: List[int]
    horizon: float
    output_times: List[float]
    dt_cfl: float
    dt_max: float
    n_steps: int
    clamp_reads: int
    wall_time: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Solution:
    trajectory: List[ValueField]
    policy: PolicyRecord
    summary: SolveSummary

    @property
    def final(self) -> ValueField:
        return self.trajectory[-1]

    def value_at(self, x) -> float:
        return float(self.final.at(x)[0])


def solve(psi: ValueField, field: CoefficientField, T: float, config: Optional[SchemeConfig] = None,
          output_times: Optional[Sequence[float]] = None, scheme: Optional[MonotoneScheme] = None) -> Solution:
    """
    Marches du/dt = G(x, u) from u(0) = psi to T with CFL-limited explicit steps, landing exactly on
    every output time, and records the maximizing control per node and layer.
    """
    if T <= 0:
        raise InputError("horizon T must be positive")
    config = config or SchemeConfig()
    targets = sorted({float(t) for t in (output_times or [])} | {float(T)})
    if targets[0] <= 0 or targets[-1] > T:
        raise InputError("output times must lie in (0, T]")

    started = time.perf_counter()
    scheme = scheme or MonotoneScheme(field, psi.grid, config)
    dt_cfl = cfl_timestep(field, psi.grid, config, T, scheme=scheme)
    dt_max = min(dt_cfl, config.max_timestep or math.inf)
    logger.info(f"🚀 [{field.name}] solving to T={T} on grid n={psi.grid.n} (dt_cfl={dt_cfl:.3g}, dt_max={dt_max:.3g})")

    u = psi.values
    tau = 0.0
    trajectory, layer_times, layer_steps, choices = [], [], [], []
    for target in targets:
        interval = target - tau
        n = max(1, math.ceil(interval / dt_max - 1e-9))
        dt = interval / n
        for j in range(n):
            layer_times.append(tau + j * dt)
            layer_steps.append(dt)
            u, choice = scheme.step(u, dt)
            choices.append(choice.astype(np.int16))
        tau = target
        trajectory.append(ValueField(grid=psi.grid, t=psi.t + target, values=u))

    elapsed = time.perf_counter() - started
    logger.info(f"✅ [{field.name}] {len(choices)} steps in {elapsed:.2f}s")
    summary = SolveSummary(
        scenario=field.name,
        grid_lo=list(psi.grid.lo),
        grid_hi=list(psi.grid.hi),
        grid_n=list(psi.grid.n),
        horizon=float(T),
        output_times=targets,
        dt_cfl=float(dt_cfl) if math.isfinite(dt_cfl) else float(T),
        dt_max=float(dt_max) if math.isfinite(dt_max) else float(T),
        n_steps=len(choices),
        clamp_reads=scheme.clamp_reads,
        wall_time=elapsed if settings.RECORD_TIMING else None,
    )
    policy = PolicyRecord(
        grid=psi.grid,
        horizon=float(T),
        times=np.asarray(layer_times),
        steps=np.asarray(layer_steps),
        choice=np.stack(choices),
    )
    return Solution(trajectory=trajectory, policy=policy, summary=summary)


class RefinementReport(BaseModel):
    scenario: str
    payoff: str
    horizon: float
    spacings: List[float]
    errors: List[float]
    ratios: List[float]
    resolved_floor: float
    passed: bool


def refine_study(scenario: "Scenario", levels: int = 3, payoff: Optional[str] = None,
                 config: Optional[SchemeConfig] = None, horizon: Optional[float] = None,
                 resolved_floor: float = 1e-6) -> RefinementReport:
    """
    Solves on successively halved grids and reports the sup-error against the scenario oracle on the
    interior third. PASS when every refinement shrinks the error by >= 1.5, errors at or below
    `resolved_floor` counting as converged. The max_timestep cap is halved with the spacing.
    """
    from .scenarios import get_payoff

    tag = payoff or scenario.default_payoff
    T = horizon or scenario.horizon
    if scenario.oracle is None:
        raise UnsupportedError(f"scenario {scenario.name} has no oracle")
    payoff_fn = get_payoff(tag)
    grid = scenario.grid
    config = config or SchemeConfig()
    spacings, errors = [], []
    for level in range(levels):
        if config.max_timestep is not None and level:
            config = replace(config, max_timestep=config.max_timestep / 2.0)
        X = grid.nodes()
        interior = grid.interior_mask()
        exact = scenario.oracle(tag, X[interior], T)
        if exact is None:
            raise UnsupportedError(f"scenario {scenario.name} has no oracle for payoff {tag!r}")
        psi = ValueField.from_function(grid, payoff_fn)
        sol = solve(psi, scenario.field, T, config)
        err = float(np.max(np.abs(sol.final.values[interior] - exact)))
        logger.info(f"📐 [{scenario.name}] level {level}: dx={grid.spacing[0]:.4g} sup-error={err:.3e}")
        spacings.append(float(grid.spacing[0]))
        errors.append(err)
        grid = grid.refined()

    ratios = [a / b if b > 0 else math.inf for a, b in zip(errors, errors[1:])]
    passed = all(r >= 1.5 or b <= resolved_floor for r, b in zip(ratios, errors[1:]))
    return RefinementReport(
        scenario=scenario.name,
        payoff=tag,
        horizon=float(T),
        spacings=spacings,
        errors=errors,
        ratios=[min(r, 1e300) for r in ratios],
        resolved_floor=resolved_floor,
        passed=passed,
    )
