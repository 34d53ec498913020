"""Decision-focused learning with conditional diffusion predictors."""
from .decision import (AffineConstraints, CostModel, DegenerateKKTError, InfeasibleError,
                       KKTSolution, NonConvergenceError, adjoint_solve, assemble_kkt,
                       kkt_residuals, solve_saa)
from .diffusion import (EpsilonModel, LinearEpsilonModel, NoiseSchedule, TimestepSampler,
                        build_schedule, elbo_grad, elbo_simplified, forward_noise,
                        reverse_sample)
from .estimators import (GaussianPredictor, GradientEstimate, deterministic_grad,
                         diff_reparam_grad, diff_score_grad, gauss_reparam_grad,
                         gauss_score_grad)
from .nn import DenseNet, ParamVector, TimeEmbedding, sinusoidal_embed

__version__ = "0.1.0"
