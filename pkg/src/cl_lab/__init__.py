"""cl-lab: exact theory, Monte Carlo simulation, and task-order search for
continual learning in overparameterized linear regression.

The library is organized as:

* :mod:`cl_lab.core` — task ensembles, their geometry, permutations;
* :mod:`cl_lab.theory` — closed-form expected forgetting / generalization;
* :mod:`cl_lab.sim` — sequential min-norm / least-squares simulator;
* :mod:`cl_lab.ordering` — task-order scoring and brute-force search;
* :mod:`cl_lab.harness` — scenarios, sweeps, CSV emission;
* :mod:`cl_lab.cli` — the ``cl-lab`` command.
"""

from .core import (
    OverparamRatio,
    TaskEnsemble,
    TaskGeometry,
    ensemble_from_geometry,
    geometry_from_ensemble,
    permute_geometry,
)
from .errors import (
    CLLabError,
    InapplicablePredicateError,
    NearSquareError,
    OrderSearchError,
    RegimeError,
    SingularDataError,
    TaskSetupError,
)
from .theory import Regime, SystemParams

__version__ = "0.1.0"

__all__ = [
    "CLLabError",
    "InapplicablePredicateError",
    "NearSquareError",
    "OrderSearchError",
    "OverparamRatio",
    "Regime",
    "RegimeError",
    "SingularDataError",
    "SystemParams",
    "TaskEnsemble",
    "TaskGeometry",
    "TaskSetupError",
    "ensemble_from_geometry",
    "geometry_from_ensemble",
    "permute_geometry",
    "__version__",
]
