"""Spatial quantile autoregression with interquantile fusion penalties."""

from .exceptions import (
    DegenerateCovariance,
    DimensionMismatch,
    InvalidBudget,
    InvalidLambda,
    MaxIterations,
    ParseError,
    RankDeficient,
    SingularSystem,
    SqarError,
    TooLarge,
)
from .spatial import (
    SpatialWeights,
    SqarDataset,
    build_block_weight_matrix,
    estimate_noise_variance,
    reduced_form_response,
    row_normalize,
    solve_spatial_system,
)
from .qrlp import (
    CheckLossProblem,
    LpSolution,
    PenaltySpec,
    brute_force_oracle,
    check_loss,
    check_loss_rows,
    solve,
)
from .estimator import (
    CoefficientSheet,
    FirstStageResult,
    FitResult,
    QuantileGrid,
    ThetaVector,
    TuningTrace,
    adaptive_weights_fal,
    adaptive_weights_fas,
    bootstrap_equality_test,
    budget_range,
    build_instruments,
    build_joint_design,
    edf,
    first_stage_iv,
    fit_fused,
    fit_rq,
    fit_sar_2sls,
    fused_mask_of,
    sheet_from_theta,
    theta_from_sheet,
    tune,
)

__version__ = "0.1.0"
