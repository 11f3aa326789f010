from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import BaseModel

from .errors import InputError

logger = logging.getLogger(__name__)

# Evaluators are vectorized over points: X has shape (n, d).
DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]  # (control, X) -> (n, d)
DiffusionFn = Callable[[np.ndarray, np.ndarray], np.ndarray]  # (control, X) -> (n, d, r)
JumpFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]  # (control, X, Z) -> (n, m, d)
GammaFn = Callable[[np.ndarray], np.ndarray]  # Z (m, d_L) -> (m,)


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite, ordered discretization of the control set F."""

    controls: Tuple[np.ndarray, ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        if not self.controls:
            raise InputError("control set must be nonempty")
        if len(self.labels) != len(self.controls):
            raise InputError("one label per control is required")
        for i, a in enumerate(self.controls):
            for b in self.controls[i + 1:]:
                if a.shape == b.shape and np.array_equal(a, b):
                    raise InputError(f"duplicate control point {a.tolist()}")

    @classmethod
    def from_values(cls, values: Sequence, labels: Optional[Sequence[str]] = None) -> "ControlSet":
        points = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in values)
        if labels is None:
            labels = [f"f{i}" for i in range(len(points))]
        return cls(controls=points, labels=tuple(labels))

    def __len__(self) -> int:
        return len(self.controls)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.controls[index]

    def check_index(self, f: int) -> int:
        if not isinstance(f, (int, np.integer)) or not 0 <= f < len(self.controls):
            raise InputError(f"control index {f!r} out of range [0, {len(self.controls)})")
        return int(f)


class TruncationFunction:
    """h(y) = y * min(1, 1/||y||), applied along the last axis."""

    lipschitz_bound = 2.0

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        norm = np.linalg.norm(y, axis=-1, keepdims=True)
        scale = np.where(norm > 1.0, 1.0 / np.maximum(norm, 1.0), 1.0)
        return y * scale

    def empirical_lipschitz(self, dim: int, n_pairs: int = 2000, seed: int = 0, radius: float = 3.0) -> float:
        rng = np.random.default_rng(seed)
        x = rng.uniform(-radius, radius, size=(n_pairs, dim))
        y = rng.uniform(-radius, radius, size=(n_pairs, dim))
        dist = np.linalg.norm(x - y, axis=-1)
        keep = dist > 0
        ratio = np.linalg.norm(self(x) - self(y), axis=-1)[keep] / dist[keep]
        return float(ratio.max(initial=0.0))


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling domain."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(h < l for l, h in zip(self.lo, self.hi)):
            raise InputError(f"invalid box lo={self.lo} hi={self.hi}")

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        return cls(lo=(-half_width,) * dim, hi=(half_width,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(np.asarray(self.lo), np.asarray(self.hi), size=(n, self.dim))


@dataclass(frozen=True, eq=False)
class JumpAtoms:
    marks: np.ndarray  # (m, d_L)
    rates: np.ndarray  # (m,), units 1/time

    @classmethod
    def empty(cls, mark_dim: int) -> "JumpAtoms":
        return cls(marks=np.zeros((0, mark_dim)), rates=np.zeros(0))

    @classmethod
    def of(cls, marks: Sequence, rates: Sequence) -> "JumpAtoms":
        marks = np.asarray(marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        return cls(marks=marks, rates=np.asarray(rates, dtype=float).reshape(-1))

    def __len__(self) -> int:
        return len(self.rates)


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """
    Finite-atom representation of the Levy-type measures nu(f, dz), one atom list per control.

    The region {gamma <= kappa} that a real kernel would carry as infinitely many small jumps is
    represented by `second_moments[f]`, a d x d moment-matched covariance folded into the diffusion.
    """

    atoms: Tuple[JumpAtoms, ...]
    dim: int
    mark_dim: int
    gamma: Optional[GammaFn] = None
    kappa: float = 1.0
    second_moments: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise InputError(f"kappa must lie in (0, 1], got {self.kappa}")
        if not self.second_moments:
            object.__setattr__(self, "second_moments", tuple(np.zeros((self.dim, self.dim)) for _ in self.atoms))
        if len(self.second_moments) != len(self.atoms):
            raise InputError("one small-jump second-moment matrix per control is required")
        for f, atoms in enumerate(self.atoms):
            if atoms.marks.shape != (len(atoms), self.mark_dim):
                raise InputError(f"control {f}: marks must have shape (m, {self.mark_dim})")
            if np.any(~np.isfinite(atoms.rates)) or np.any(atoms.rates < 0):
                raise InputError(f"control {f}: atom rates must be finite and nonnegative")
        for f, m in enumerate(self.second_moments):
            if m.shape != (self.dim, self.dim) or not np.allclose(m, m.T, atol=1e-14):
                raise InputError(f"control {f}: small-jump second moment must be symmetric {self.dim}x{self.dim}")
            if np.linalg.eigvalsh(m).min() < -1e-12:
                raise InputError(f"control {f}: small-jump second moment must be positive semidefinite")

    @property
    def max_atoms(self) -> int:
        return max((len(a) for a in self.atoms), default=0)

    def rates(self, f: int) -> np.ndarray:
        return self.atoms[f].rates

    def marks(self, f: int) -> np.ndarray:
        return self.atoms[f].marks

    def second_moment(self, f: int) -> np.ndarray:
        return self.second_moments[f]

    def total_rate(self, f: int) -> float:
        return float(self.atoms[f].rates.sum())

    def gamma_values(self, f: int) -> np.ndarray:
        if self.gamma is None:
            raise InputError("jump kernel has no gamma; use default_gamma() to derive one")
        marks = self.atoms[f].marks
        if len(marks) == 0:
            return np.zeros(0)
        g = np.asarray(self.gamma(marks), dtype=float).reshape(-1)
        if g.shape != (len(marks),) or np.any(g < 0) or np.any(~np.isfinite(g)):
            raise InputError(f"control {f}: gamma must return finite nonnegative values per atom")
        return g


@dataclass(frozen=True)
class DeclaredLipschitz:
    btilde: Optional[float] = None
    sigma: Optional[float] = None
    k_over_gamma: Optional[float] = None

    def as_dict(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """
    The controlled coefficients (b, sigma, k) over a finite control set, with their jump kernel.

    Every evaluator is vectorized over points; single points of shape (d,) are accepted by the
    accessors below and promoted to (1, d).
    """

    dim: int
    noise_dim: int
    controls: ControlSet
    drift: DriftFn
    diffusion: DiffusionFn
    jump: JumpFn
    kernel: JumpKernel
    truncation: TruncationFunction = field(default_factory=TruncationFunction)
    declared_lipschitz: Optional[DeclaredLipschitz] = None
    name: str = "field"

    def __post_init__(self):
        if len(self.kernel.atoms) != len(self.controls):
            raise InputError("jump kernel must provide one atom list per control")
        if self.kernel.dim != self.dim:
            raise InputError(f"jump kernel dimension {self.kernel.dim} != field dimension {self.dim}")

    # --- accessors ---
    def points(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise InputError(f"expected points of dimension {self.dim}, got shape {np.shape(x)}")
        return X

    def b(self, f: int, x) -> np.ndarray:
        f = self.controls.check_index(f)
        X = self.points(x)
        out = np.asarray(self.drift(self.controls[f], X), dtype=float)
        return self._expect(out, (len(X), self.dim), "drift")

    def sigma(self, f: int, x) -> np.ndarray:
        f = self.controls.check_index(f)
        X = self.points(x)
        out = np.asarray(self.diffusion(self.controls[f], X), dtype=float)
        return self._expect(out, (len(X), self.dim, self.noise_dim), "diffusion")

    def covariance(self, f: int, x) -> np.ndarray:
        s = self.sigma(f, x)
        return np.einsum("nir,njr->nij", s, s)

    def jumps(self, f: int, x) -> np.ndarray:
        f = self.controls.check_index(f)
        X = self.points(x)
        marks = self.kernel.marks(f)
        if len(marks) == 0:
            return np.zeros((len(X), 0, self.dim))
        out = np.asarray(self.jump(self.controls[f], X, marks), dtype=float)
        return self._expect(out, (len(X), len(marks), self.dim), "jump")

    def rates(self, f: int) -> np.ndarray:
        return self.kernel.rates(self.controls.check_index(f))

    def second_moment(self, f: int) -> np.ndarray:
        return self.kernel.second_moment(self.controls.check_index(f))

    def _expect(self, arr: np.ndarray, shape: tuple, what: str) -> np.ndarray:
        if arr.shape != shape:
            raise InputError(f"{self.name}: {what} evaluator returned shape {arr.shape}, expected {shape}")
        return arr


# --- symbol ---

@dataclass(frozen=True)
class SymbolValue:
    re: float
    im: float

    def __post_init__(self):
        if not (np.isfinite(self.re) and np.isfinite(self.im)):
            raise InputError(f"symbol is not finite: {self.re} + {self.im}i")

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def __abs__(self) -> float:
        return float(np.hypot(self.re, self.im))


def _symbol_table(field: CoefficientField, f: int, X: np.ndarray, XI: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of q(f, x_n, xi_m) as (n, m) arrays."""
    b = field.b(f, X)
    a = field.covariance(f, X) + field.second_moment(f)[None]
    k = field.jumps(f, X)
    w = field.rates(f)
    quad = 0.5 * np.einsum("md,nde,me->nm", XI, a, XI)
    lin = np.einsum("nd,md->nm", b, XI)
    kxi = np.einsum("nad,md->nam", k, XI)
    hxi = np.einsum("nad,md->nam", field.truncation(k), XI)
    re = quad + np.einsum("a,nam->nm", w, 1.0 - np.cos(kxi))
    im = -lin + np.einsum("a,nam->nm", w, hxi - np.sin(kxi))
    return re, im


def eval_symbol(field: CoefficientField, f: int, x, xi) -> SymbolValue:
    """
    q(f,x,xi) = -i<b,xi> + 1/2 <xi, (sigma sigma* + M) xi> + sum_i w_i (1 - e^{i<k_i,xi>} + i<xi, h(k_i)>).
    """
    X = field.points(x)
    XI = field.points(xi)
    if len(X) != 1 or len(XI) != 1:
        raise InputError("eval_symbol expects a single point x and a single frequency xi")
    re, im = _symbol_table(field, f, X, XI)
    return SymbolValue(re=float(re[0, 0]), im=float(im[0, 0]))


# --- drifts and characteristics ---

def modified_drift(field: CoefficientField, f: int, x) -> np.ndarray:
    """
    b~(f,x) = b(f,x) + sum_{gamma<=1} w_i (k_i - h(k_i)) - sum_{gamma>1} w_i h(k_i).

    Returns shape (d,) for a single point and (n, d) for a batch.
    """
    single = np.ndim(x) == 1
    X = field.points(x)
    b = field.b(f, X)
    k = field.jumps(f, X)
    w = field.rates(f)
    g = field.kernel.gamma_values(f)
    hk = field.truncation(k)
    small = g <= 1.0
    out = b + np.einsum("a,nad->nd", w * small, k - hk) - np.einsum("a,nad->nd", w * ~small, hk)
    return out[0] if single else out


def transport_drift(field: CoefficientField, f: int, x) -> np.ndarray:
    """
    b(f,x) - sum_i w_i h(k_i): the drift left once every atom is written as u(x+k) - u(x).

    Equals b~(f,x) - sum_{gamma<=1} w_i k_i; this is what the monotone scheme upwinds.
    """
    single = np.ndim(x) == 1
    X = field.points(x)
    out = field.b(f, X) - np.einsum("a,nad->nd", field.rates(f), field.truncation(field.jumps(f, X)))
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class ThetaTriplet:
    drift: np.ndarray
    covariance: np.ndarray
    jumps: List[Tuple[np.ndarray, float]]


def theta_triplets(field: CoefficientField, x) -> List[ThetaTriplet]:
    """One characteristic triplet per control; atoms whose jump is exactly 0 are dropped."""
    X = field.points(x)
    if len(X) != 1:
        raise InputError("theta_triplets expects a single point")
    triplets = []
    for f in range(len(field.controls)):
        k = field.jumps(f, X)[0]
        w = field.rates(f)
        pushforward = [(k[i].copy(), float(w[i])) for i in range(len(w)) if np.any(k[i] != 0.0)]
        triplets.append(
            ThetaTriplet(drift=field.b(f, X)[0], covariance=field.covariance(f, X)[0], jumps=pushforward)
        )
    return triplets


# --- condition validators ---

class SymbolDecayReport(BaseModel):
    r_values: List[float]
    sup_values: List[float]
    slack: float
    passed: bool


def _shell_points(radius: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points in the closed ball of the given radius; half of them on its boundary sphere."""
    directions = rng.standard_normal((n, dim))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-300)
    radii = radius * rng.uniform(size=n) ** (1.0 / dim)
    radii[: (n + 1) // 2] = radius
    return directions * radii[:, None]


def check_symbol_uniform_continuity(
    field: CoefficientField,
    r_values: Sequence[float],
    samples_per_shell: int,
    seed: int = 0,
    slack: float = 0.05,
) -> SymbolDecayReport:
    """
    Tabulates M(r) = max_f max_{|x|<=r, |xi|<=1/r} |q(f,x,xi)| on sampled shells.

    PASS when M is nonincreasing along r_values up to a relative slack.
    """
    r = [float(v) for v in r_values]
    if not r or samples_per_shell < 1:
        raise InputError("symbol continuity check needs at least one radius and one sample per shell")
    if any(v <= 0 for v in r) or any(b <= a for a, b in zip(r, r[1:])):
        raise InputError("r_values must be positive and strictly increasing")

    rng = np.random.default_rng(seed)
    sups = []
    for radius in r:
        X = _shell_points(radius, field.dim, samples_per_shell, rng)
        XI = _shell_points(1.0 / radius, field.dim, samples_per_shell, rng)
        m = 0.0
        for f in range(len(field.controls)):
            re, im = _symbol_table(field, f, X, XI)
            m = max(m, float(np.hypot(re, im).max()))
        sups.append(m)

    passed = all(b <= (1.0 + slack) * a + 1e-15 for a, b in zip(sups, sups[1:]))
    logger.info(f"🔎 [{field.name}] symbol decay M(r) = {dict(zip(r, sups))} -> {'PASS' if passed else 'FAIL'}")
    return SymbolDecayReport(r_values=r, sup_values=sups, slack=slack, passed=passed)


class IntegrabilityReport(BaseModel):
    integrability: float
    first_moment: float
    mixed_moment: float
    passed: bool


def check_integrability(kernel: JumpKernel) -> IntegrabilityReport:
    """
    sup_f sum w (gamma^2 ^ 1), plus the two sufficient moments for a Lipschitz b~:
    sup_f sum w gamma and sup_f sum w (gamma^2 ^ gamma).
    """
    per_control = [(kernel.gamma_values(f), kernel.rates(f)) for f in range(len(kernel.atoms))]
    integrability = max(float(np.sum(w * np.minimum(g**2, 1.0))) for g, w in per_control)
    first = max(float(np.sum(w * g)) for g, w in per_control)
    mixed = max(float(np.sum(w * np.minimum(g**2, g))) for g, w in per_control)
    return IntegrabilityReport(
        integrability=integrability,
        first_moment=first,
        mixed_moment=mixed,
        passed=bool(np.isfinite(integrability) and np.isfinite(first) and np.isfinite(mixed)),
    )


class TightnessReport(BaseModel):
    kappa_values: List[float]
    small_mass: List[float]
    R_values: List[float]
    tail_mass: List[float]
    max_gamma: float
    kernel_kappa: float
    kernel_small_mass: float
    integrability: IntegrabilityReport
    passed: bool


def check_tightness(kernel: JumpKernel, kappa_values: Sequence[float], R_values: Sequence[float]) -> TightnessReport:
    """
    s(kappa) = max_f sum_{gamma<=kappa} w gamma^2 and m(R) = max_f sum_{gamma>R} w.

    s is also reported at the kernel's own kappa: atom mass inside the region its small-jump moment stands for.
    """
    kappas = [float(k) for k in kappa_values]
    Rs = [float(R) for R in R_values]
    if any(not 0.0 < k <= 1.0 for k in kappas):
        raise InputError("kappa values must lie in (0, 1]")
    if any(R < 1.0 for R in Rs):
        raise InputError("R values must be >= 1")

    per_control = [(kernel.gamma_values(f), kernel.rates(f)) for f in range(len(kernel.atoms))]
    small = [max(float(np.sum(w * g**2 * (g <= k))) for g, w in per_control) for k in kappas]
    tail = [max(float(np.sum(w * (g > R))) for g, w in per_control) for R in Rs]
    max_gamma = max((float(g.max()) for g, _ in per_control if len(g)), default=0.0)
    kernel_small = max(float(np.sum(w * g**2 * (g <= kernel.kappa))) for g, w in per_control)

    by_kappa = sorted(zip(kappas, small), reverse=True)
    shrinking = all(b <= a for (_, a), (_, b) in zip(by_kappa, by_kappa[1:]))
    tail_vanishes = all(m == 0.0 for R, m in zip(Rs, tail) if R > max_gamma)
    integrability = check_integrability(kernel)

    return TightnessReport(
        kappa_values=kappas,
        small_mass=small,
        R_values=Rs,
        tail_mass=tail,
        max_gamma=max_gamma,
        kernel_kappa=kernel.kappa,
        kernel_small_mass=kernel_small,
        integrability=integrability,
        passed=shrinking and tail_vanishes and integrability.passed,
    )


class LipschitzEstimate(BaseModel):
    btilde: float
    sigma: float
    k_over_gamma: float
    pairs_used: int
    declared: Optional[Dict[str, float]] = None
    within_declared: Optional[bool] = None


def estimate_lipschitz_constants(field: CoefficientField, sample_box: Box, n_pairs: int, seed: int = 0) -> LipschitzEstimate:
    """Empirical Lipschitz constants of b~, sigma and k/gamma over random pairs in the box.

    When the field declares constants, `within_declared` says whether every estimate stays at or below them.
    """
    if n_pairs < 2:
        raise InputError("n_pairs must be >= 2")
    if sample_box.dim != field.dim:
        raise InputError(f"sample box has dimension {sample_box.dim}, field has {field.dim}")
    rng = np.random.default_rng(seed)
    X = sample_box.sample(n_pairs, rng)
    Y = sample_box.sample(n_pairs, rng)
    dist = np.linalg.norm(X - Y, axis=1)
    keep = dist > 0.0
    X, Y, dist = X[keep], Y[keep], dist[keep]

    l_b = l_s = l_k = 0.0
    if len(dist):
        for f in range(len(field.controls)):
            db = np.linalg.norm(modified_drift(field, f, X) - modified_drift(field, f, Y), axis=1)
            l_b = max(l_b, float(np.max(db / dist)))
            ds = np.linalg.norm(field.sigma(f, X) - field.sigma(f, Y), axis=(1, 2))
            l_s = max(l_s, float(np.max(ds / dist)))
            g = field.kernel.gamma_values(f)
            pos = g > 0
            if np.any(pos):
                dk = np.linalg.norm(field.jumps(f, X) - field.jumps(f, Y), axis=2)[:, pos]
                l_k = max(l_k, float(np.max(dk / (g[pos][None, :] * dist[:, None]))))
    estimates = {"btilde": l_b, "sigma": l_s, "k_over_gamma": l_k}
    declared = within = None
    if field.declared_lipschitz is not None:
        declared = field.declared_lipschitz.as_dict()
        within = all(estimates[k] <= v + 1e-12 for k, v in declared.items())
        if not within:
            logger.warning(f"⚠️ [{field.name}] Lipschitz estimates {estimates} exceed declared {declared}")
    return LipschitzEstimate(**estimates, pairs_used=int(len(dist)), declared=declared, within_declared=within)


class GrowthBoundReport(BaseModel):
    max_ratio: float
    passed: bool


def check_growth_bound(field: CoefficientField, sample_box: Box, n_samples: int = 256, seed: int = 0) -> GrowthBoundReport:
    """max ||k(f,x,z_i)|| / (gamma(z_i)(1+||x||)) over sampled points; PASS when <= 1."""
    rng = np.random.default_rng(seed)
    X = sample_box.sample(n_samples, rng)
    scale = 1.0 + np.linalg.norm(X, axis=1)
    ratio = 0.0
    for f in range(len(field.controls)):
        g = field.kernel.gamma_values(f)
        if not len(g):
            continue
        kn = np.linalg.norm(field.jumps(f, X), axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(kn == 0.0, 0.0, kn / (g[None, :] * scale[:, None]))
        ratio = max(ratio, float(np.max(r)))
    return GrowthBoundReport(max_ratio=ratio, passed=bool(np.isfinite(ratio) and ratio <= 1.0 + 1e-12))


class LocalBoundReport(BaseModel):
    sup_norm: float
    passed: bool


def check_local_boundedness(field: CoefficientField, sample_box: Box, n_samples: int = 256, seed: int = 0) -> LocalBoundReport:
    """sup over sampled points and controls of ||b|| + ||sigma||_F."""
    rng = np.random.default_rng(seed)
    X = sample_box.sample(n_samples, rng)
    sup = 0.0
    for f in range(len(field.controls)):
        total = np.linalg.norm(field.b(f, X), axis=1) + np.linalg.norm(field.sigma(f, X), axis=(1, 2))
        sup = max(sup, float(np.max(total)))
    return LocalBoundReport(sup_norm=sup, passed=bool(np.isfinite(sup)))


def default_gamma(field: CoefficientField, sample_box: Box, n_samples: int = 256, seed: int = 0) -> CoefficientField:
    """
    Returns a copy of the field whose kernel uses gamma(z) = max_f sup_x ||k(f,x,z)|| / (1+||x||),
    the supremum taken over points sampled in the box.
    """
    rng = np.random.default_rng(seed)
    X = sample_box.sample(n_samples, rng)
    scale = 1.0 + np.linalg.norm(X, axis=1)

    def gamma(marks: np.ndarray) -> np.ndarray:
        marks = np.asarray(marks, dtype=float)
        out = np.zeros(len(marks))
        for f in range(len(field.controls)):
            k = np.asarray(field.jump(field.controls[f], X, marks), dtype=float)
            out = np.maximum(out, np.max(np.linalg.norm(k, axis=2) / scale[:, None], axis=0))
        return out

    logger.info(f"🧮 [{field.name}] deriving gamma from {n_samples} sampled points")
    return replace(field, kernel=replace(field.kernel, gamma=gamma))
