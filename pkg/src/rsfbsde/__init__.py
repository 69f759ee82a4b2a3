"""Risk-sensitive control of partially observed jump-diffusion FBSDEs:
simulation, measure change, backward solvers, maximum-principle checks,
an investment model and the risk-sensitive Zakai filter."""
import os as _os

# global thread knob, applied before numpy loads its BLAS
_threads = _os.environ.get("RSFBSDE_THREADS")
if _threads:
    for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_v, _threads)

__version__ = "0.1.0"

from .errors import (AdjointError, BlowUpError, CheckFailure, ConfigError, DivergenceError,  # noqa: E402
                     ModelError, NumericalError, RsError, SolverError)
from .kernel import MarkSpace, PathEnsemble, TimeGrid, generate_ensemble  # noqa: E402
from .models import ControlPolicy, ModelSpec, builtin, list_models, model_ensemble  # noqa: E402
from .regression import RegressionBasis  # noqa: E402

__all__ = ["AdjointError", "BlowUpError", "CheckFailure", "ConfigError", "DivergenceError", "ModelError",
           "NumericalError", "RsError", "SolverError", "MarkSpace", "PathEnsemble", "TimeGrid",
           "generate_ensemble", "ControlPolicy", "ModelSpec", "builtin", "list_models", "model_ensemble",
           "RegressionBasis"]
