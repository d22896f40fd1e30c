"""Instrument selection with LASSO-type first stages and IV inference."""
from .errors import (
    DimensionMismatch,
    NonConvergence,
    NotNormalized,
    PerfectFit,
    RankDeficient,
    SingularSystem,
    SparseIVError,
    ZeroColumn,
)
from .iv import IvEstimate, Status, fit_2sls, fit_fuller, fit_optimal_iv, fit_sparse_iv, fit_split_sample_iv
from .model import IvDataset, build_dataset, normalize_columns, read_csv, write_csv
from .penalty import PenaltyRule, PenaltySpec
from .solvers import Method, Objective, fit_first_stage, kkt_check, lasso, post_ols, sqrt_lasso

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "IvDataset",
    "IvEstimate",
    "Method",
    "NonConvergence",
    "NotNormalized",
    "Objective",
    "PenaltyRule",
    "PenaltySpec",
    "PerfectFit",
    "RankDeficient",
    "SingularSystem",
    "SparseIVError",
    "Status",
    "ZeroColumn",
    "build_dataset",
    "fit_2sls",
    "fit_first_stage",
    "fit_fuller",
    "fit_optimal_iv",
    "fit_sparse_iv",
    "fit_split_sample_iv",
    "kkt_check",
    "lasso",
    "normalize_columns",
    "post_ols",
    "read_csv",
    "sqrt_lasso",
    "write_csv",
]
