"""Doubly robust multi-outcome treatment effects with FDP-exceedance control."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    CellMatrixSet,
    ObservationTable,
    SchemaError,
    ValidationError,
    aggregate_cells,
    load_observations,
    screen_outcomes,
    write_observations,
)
from .estimands import (  # noqa: E402
    EstimandResult,
    InfluenceMatrix,
    compute_phi,
    estimate,
    estimate_ate,
    estimate_qte,
    estimate_sqte,
    estimate_ste,
)
from .glm import GlmError, GlmFit, fit_glm, fit_glm_many, predict_glm  # noqa: E402
from .nuisance import NuisanceConfig, NuisanceError, NuisanceFit, crossfit, fit_nuisance  # noqa: E402
from .simulate import DgpConfig, SimReport, TestParams, generate_dgp, run_experiment  # noqa: E402
from .testing import (  # noqa: E402
    DiscoverySet,
    bh_procedure,
    bootstrap_max_quantile,
    error_metrics,
    fwer_test,
    screen_by_variance,
    stepdown_fdx,
)

__all__ = [
    "CellMatrixSet", "ObservationTable", "SchemaError", "ValidationError", "aggregate_cells",
    "load_observations", "screen_outcomes", "write_observations",
    "EstimandResult", "InfluenceMatrix", "compute_phi", "estimate", "estimate_ate", "estimate_qte",
    "estimate_sqte", "estimate_ste",
    "GlmError", "GlmFit", "fit_glm", "fit_glm_many", "predict_glm",
    "NuisanceConfig", "NuisanceError", "NuisanceFit", "crossfit", "fit_nuisance",
    "DgpConfig", "SimReport", "TestParams", "generate_dgp", "run_experiment",
    "DiscoverySet", "bh_procedure", "bootstrap_max_quantile", "error_metrics", "fwer_test",
    "screen_by_variance", "stepdown_fdx",
]
