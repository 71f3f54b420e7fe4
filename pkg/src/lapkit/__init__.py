"""lapkit: matrix-free Laplace approximations for small neural networks."""

__version__ = "0.1.0"

from .calibrate import CalibResult, GridSpec, gradient_calibrate, grid_search
from .curvature import (
    CurvatureOperator,
    CurvEstimate,
    estimate_diagonal,
    estimate_full,
    estimate_lanczos,
    estimate_lobpcg,
    ggn_vp,
    hessian_vp,
    restrict_operator,
)
from .evidence import EvidenceReport, joint_log_likelihood, lml_objective, log_marginal_likelihood
from .fsp import ContextSet, FspPosterior, fsp_posterior, fsp_predict, fsp_regularizer, fsp_train, sample_context
from .gp import GPPrior, KernelSpec, kernel_matrix
from .metrics import crps_gaussian, ece, gaussian_nll
from .nets import Activation, Batch, Dense, ModelSpec, forward, grad, jacobian, jvp, loss_value, mlp, vjp
from .posterior import Hyperparams, PosteriorState, posterior_fn, sample
from .predictive import laplace_bridge, mc_bridge, mean_field_0, mean_field_1, mean_field_2
from .pushforward import (
    Ensemble,
    OutputGaussian,
    ensemble_predict,
    ensemble_stats,
    linear_pushforward,
    nonlinear_pushforward,
)
from .trees import flatten, leaf_paths, subtree_indices, tree_map, tree_size, unflatten

__all__ = [name for name in dir() if not name.startswith("_")]
