import numpy as np
import pytest

from orthobo.gp import ObservationSet, fit_map, laplace_posterior
from orthobo.kernels import KernelSpec
from orthobo.mathcore import make_rng, sobol_points


def forrester(x):
    return (6 * x - 2) ** 2 * np.sin(12 * x - 4)


@pytest.fixture(scope="session")
def gp1d():
    """Frozen 1-d GP state (fit + Laplace posterior) on 8 Sobol points."""
    X = sobol_points(1, 8, skip=1)
    data = ObservationSet(X, forrester(X[:, 0]))
    fit = fit_map(data, KernelSpec("matern52-iso", 1), rng=make_rng(0))
    return fit, laplace_posterior(fit)


@pytest.fixture(scope="session")
def gp3d():
    """Frozen 3-d GP state with ARD lengthscales."""
    rng = make_rng(4)
    X = rng.random((20, 3))
    y = np.sin(6 * X[:, 0]) + X[:, 1] ** 2 - 0.5 * X[:, 2]
    fit = fit_map(ObservationSet(X, y), KernelSpec("rbf-ard", 3), rng=make_rng(1))
    return fit, laplace_posterior(fit)
