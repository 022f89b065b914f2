import numpy as np
import pytest

from fpsi.forms import PhysicalParams, form_catalog
from fpsi.mesh import build_mesh


@pytest.fixture(scope="session")
def params():
    return PhysicalParams()


@pytest.fixture(scope="session")
def small_mesh():
    return build_mesh(6.0, 0.5, 0.1, 12, 4, 2)


@pytest.fixture(scope="session")
def small_forms(params, small_mesh):
    return form_catalog(params, small_mesh)


@pytest.fixture(scope="session")
def desk_mesh():
    # aspect-4 cells at dx = 0.05; driven stability threshold about 1.7e-4
    return build_mesh(6.0, 0.5, 0.1, 30, 10, 2)


@pytest.fixture(scope="session")
def desk_forms(params, desk_mesh):
    return form_catalog(params, desk_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
