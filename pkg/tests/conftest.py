import numpy as np
import pytest

from softrod import Grid, RodParams, RodState, make_initial_state
from softrod.geometry import exp_so3


@pytest.fixture
def ref_params():
    """Reference material set: 0.5 m rod, E = 0.03 GPa, G = 0.01 GPa."""
    return RodParams(
        length=0.5, radius=0.02, density=2000.0, youngs_modulus=3.0e7, shear_modulus=1.0e7
    )


@pytest.fixture
def ref_grid():
    return Grid.from_length(0.5, 0.025)


@pytest.fixture
def dyadic_grid():
    """Grid with exactly representable coordinates (ds = 2**-5)."""
    return Grid.from_length(0.5, 0.03125)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng, scale=np.pi * 0.8):
    return exp_so3(rng.uniform(-1.0, 1.0, size=3) * scale / np.sqrt(3.0))


def random_rotations(rng, n, scale=np.pi * 0.8):
    return exp_so3(rng.uniform(-1.0, 1.0, size=(n, 3)) * scale / np.sqrt(3.0))


def smooth_random_state(grid, rng, amp=0.2):
    """Reachable-looking state: clamped base, smooth low-mode deformation."""
    s = grid.s
    length = grid.length
    n = grid.n_nodes

    def smooth_field(scale):
        field = np.zeros((n, 3))
        for k in (1, 2, 3):
            coeff = rng.normal(0.0, scale / k, size=3)
            field += np.sin(0.5 * k * np.pi * s / length)[:, None] * coeff
        return field

    p = np.zeros((n, 3))
    p[:, 2] = s
    p += smooth_field(amp * length)
    theta = smooth_field(amp * np.pi)
    rot = exp_so3(theta)
    v = smooth_field(amp)
    omega = smooth_field(amp)
    p[0] = 0.0
    rot[0] = np.eye(3)
    v[0] = 0.0
    omega[0] = 0.0
    return RodState(p, rot, v, omega)


@pytest.fixture
def straight_state(ref_grid):
    return make_initial_state(ref_grid, "straight_at_rest")
