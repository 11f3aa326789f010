import numpy as np
import pytest

from sublab.coefficients import CoefficientField, ControlSet, JumpAtoms, JumpKernel
from sublab.config import settings
from sublab.scenarios import get_scenario


@pytest.fixture
def g_heat():
    return get_scenario("g_brownian")


@pytest.fixture
def drift_band():
    return get_scenario("drift_band")


@pytest.fixture
def poisson_band():
    return get_scenario("poisson_band")


@pytest.fixture
def linear_levy():
    return get_scenario("linear_levy")


@pytest.fixture
def mixed():
    return get_scenario("mixed_jump_diffusion")


@pytest.fixture
def zero_levy():
    """All coefficients vanish: every semigroup is the identity."""
    return get_scenario("linear_levy", {"drift": 0.0, "sigma": 0.0, "jump": 0.0, "rate": 0.0})


@pytest.fixture
def constant_field():
    """1-d field with one control, drift b, volatility s and one atom of size j at rate w."""

    def build(b: float = 0.0, s: float = 0.0, j: float = 0.0, w: float = 0.0) -> CoefficientField:
        return CoefficientField(
            dim=1,
            noise_dim=1,
            controls=ControlSet.from_values([[0.0]]),
            drift=lambda f, X: np.full((len(X), 1), b),
            diffusion=lambda f, X: np.full((len(X), 1, 1), s),
            jump=lambda f, X, Z: np.broadcast_to(Z[None], (len(X), len(Z), 1)).copy(),
            kernel=JumpKernel(atoms=(JumpAtoms.of([[j]], [w]),), dim=1, mark_dim=1, gamma=lambda Z: np.abs(Z[:, 0])),
            name="constant",
        )

    return build


@pytest.fixture
def small_blocks(monkeypatch):
    monkeypatch.setattr(settings, "MC_BLOCK_SIZE", 128)
    monkeypatch.setattr(settings, "THREADS", 1)
    return settings
