"""Weighted randomized maximum likelihood with iterative ensemble smoothers."""
from .errors import *  # noqa: F401,F403
from .grf import CovarianceOperator, CovarianceSpec, Grid2D, apply_cov, build_embedding, sample_prior
from .smoother import (
    Ensemble,
    LMSchedule,
    ObservationSet,
    PriorPrecision,
    hybrid_update,
    ies_update,
    init_ensemble,
    run_assimilation,
)
from .transforms import TransformKind
from .weights import WeightSet, effective_sample_size, hybrid_weights, ies_weights

__version__ = "0.1.0"
