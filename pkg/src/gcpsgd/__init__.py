"""Stochastic-gradient generalized CP (GCP) tensor decomposition."""

from .errors import (
    DomainError,
    FitError,
    GCPError,
    IndexRangeError,
    InfeasibleSampleError,
    ShapeMismatchError,
    SizeGuardError,
)
from .losses import LossFunction, loss_grad, loss_value, parse_loss
from .mttkrp import (
    SampledY,
    gradient_full,
    gradient_poisson_implicit,
    mttkrp_dense,
    mttkrp_sampled,
    mttkrp_sampled_all,
    objective,
)
from .optimizer import AdamState, FitConfig, FitTrace, adam_step, fit_gcp_adam
from .rng import make_rng
from .sampling import (
    EstimatorSamples,
    SamplerKind,
    draw_estimator_samples,
    empirical_bias_variance,
    estimate_loss,
    oversample_rate,
    sample_semistratified,
    sample_stratified,
    sample_uniform,
    sample_zeros_rejection,
    stochastic_gradient,
)
from .synthetic import (
    BinaryProblemSpec,
    cosine_similarity_score,
    gen_binary_problem,
    gen_gamma_problem,
)
from .tensor import (
    DenseTensor,
    KruskalModel,
    Shape,
    SparseTensor,
    full_model,
    linear_index,
    model_entry,
    multi_index,
    norm,
    sparse_lookup,
)

__version__ = "0.1.0"
