import pytest

from volterra_smp.coefficients import ControlPath, make_problem
from volterra_smp.grids import TimeGrid
from volterra_smp.kernels import build_fractional_lift, constant_kernel
from volterra_smp.simulate import sample_brownian


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(1.0, 128)


@pytest.fixture(scope="session")
def ens(grid):
    return sample_brownian(grid, 800, 20260810)


@pytest.fixture(scope="session")
def frac_kernel():
    return build_fractional_lift(0.8, 0.9, None, 1e-2, 1e4, 16, alpha=1.0 / 3.0)


@pytest.fixture(scope="session")
def delta_kernel():
    return constant_kernel(alpha=0.0)


@pytest.fixture(scope="session")
def lq():
    return make_problem("lq_linear_cost")


@pytest.fixture(scope="session")
def state_free():
    return make_problem("state_free_quadratic")


@pytest.fixture(scope="session")
def bilinear():
    return make_problem("bilinear_lq")


@pytest.fixture()
def u_const(grid):
    def make(value):
        return ControlPath.constant(value, grid)
    return make
