"""Sparse tensor CP factorization toolkit.

The core kernel computes the matricized-tensor times Khatri-Rao product as
two sparse matrix-vector products over a preallocated CSR pattern; ALS and
gradient-descent drivers, a master-worker distributed mode, baseline
kernels, synthetic generators, and a joint rating+tensor model sit on top.
"""

from .datagen import GenSpec, gen_planted, gen_preferential, gen_shared_factors
from .joint import JointConfig, RatingsMatrix, joint_objective, joint_solve, mse, split_ratings
from .mttkrp import (
    FlopCounter,
    MttkrpPlan,
    build_plan,
    mttkrp_dfacto,
    mttkrp_gigatensor,
    mttkrp_naive,
    mttkrp_toolbox,
)
from .solvers import FactorModel, IterationStats, SolverConfig, cp_objective, solve
from .sparse_core import (
    CsrMatrix,
    FlattenedViews,
    SparseTensorCoo,
    build_views,
    flatten_mode,
    gram_hadamard,
    khatri_rao,
    nnzc,
    parse_tensor,
    write_tensor,
)

__version__ = "0.1.0"
