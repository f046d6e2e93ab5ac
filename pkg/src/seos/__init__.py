"""Stability diagnostics for minibatch SGD on linear and quadratic models.

The library computes the noise kernel norm and its approximators, the
exact second-moment transfer operator, and conservative-sharpening
statistics of the quadratic regression model, plus a CLI that drives
reproducible sweep experiments over (learning rate, batch size) grids.
"""

from .masks import (
    BatchFractions,
    MinibatchMask,
    enumerate_masks,
    mask_cross_moment,
    mask_second_moment,
    sample_mask,
)
from .second_moment import (
    DiagonalDynamics,
    SpectrumDecomposition,
    TransferOperator,
    build_diagonal_dynamics,
    build_transfer_operator,
    coupling_matrix,
    covariance_step,
    decompose_kernel,
    decompose_ntk,
    max_abs_eigenvalue,
)
from .kernel_norm import (
    GaussNewtonKernelNorm,
    MomentumParams,
    NearCriticalError,
    StabilityReport,
    Verdict,
    knorm_gauss_newton,
    knorm_hd,
    knorm_l2_hd,
    knorm_mom_estimator,
    knorm_momentum_hd,
    knorm_trace,
    noise_kernel_norm,
    stability_verdict,
)
from .linear_sgd import (
    LinearModel,
    LossTrace,
    deterministic_eos_margin,
    sgd_step,
    simulate_trajectory,
)
from .quadratic import (
    QuadraticModel,
    SharpeningResult,
    SharpeningTrace,
    SingularTriple,
    build_quadratic_model,
    discrete_derivatives,
    estimators,
    mean_second_difference_top_mode,
    monte_carlo_sharpening,
    qrm_step,
    simulate_sharpening_cell,
    theory_first_derivative,
    theory_second_derivative_stochastic_part,
)
from .spectrum_factory import (
    Dispersed,
    GeneratedSpectrum,
    IidGaussianJacobian,
    LocalizedEigenvectors,
    generate,
    haar_orthogonal,
)

__version__ = "0.1.0"
