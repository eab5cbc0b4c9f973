"""Bayesian optimization with score-orthogonalized Monte Carlo acquisitions."""

__version__ = "0.1.0"

from .acquisition import AcquisitionEstimate, CvConfig, GpMarginalEI, ei_closed_form, outer_log  # noqa: E402
from .benchmarks import make_objective  # noqa: E402
from .engine import RunConfig, RunTrace, run_bo  # noqa: E402

__all__ = [
    "AcquisitionEstimate",
    "CvConfig",
    "GpMarginalEI",
    "RunConfig",
    "RunTrace",
    "__version__",
    "ei_closed_form",
    "make_objective",
    "outer_log",
    "run_bo",
]
