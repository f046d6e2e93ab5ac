"""The noise kernel norm and its cheap approximators.

For the diagonal-restricted second-moment system p' = (A + B) p, the
dynamics contract if and only if the largest eigenvalue of A stays below
1 and the *noise kernel norm*

    K = max eig[(I - A)^{-1} B]

stays below 1.  K is 0 for full-batch training and reaches 1 exactly at
the stochastic edge of stability, which makes it a normalized noise level
in the same way eta * lambda_max / 2 normalizes the deterministic edge.

The approximators trade exactness for cost:

* ``knorm_hd``       eta/B * sum lam / (2 - eta lam)  (delocalized,
  high-dimensional limit of K),
* ``knorm_trace``    eta/(2B) * tr Theta  (additionally eta lam << 2),
* ``knorm_momentum_hd`` / ``knorm_l2_hd``  closed forms in the same
  delocalized limit with heavy-ball momentum or L2 regularization,
* ``knorm_mom_estimator``  the momentum-corrected trace estimator,
* ``knorm_gauss_newton``   the trace estimator for non-MSE losses, via
  the Gauss-Newton Gram matrix, plus the generalized coupling matrix.

All functions take eigenvalues of Theta = J J^T / D and the raw learning
rate of the function-space update z' = z - (eta/B) J J^T P z.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .second_moment import DiagonalDynamics, SpectrumDecomposition, decompose_kernel

# If the deterministic gain is within this distance of 1, (I - A) is too
# ill-conditioned to invert meaningfully; K is reported as +inf and the
# verdict is decided by the deterministic branch alone.
NEAR_CRITICAL_GAP = 1e-8

_SINGULAR_GAP = 1e-12


class NearCriticalError(ValueError):
    """(I - A) is numerically singular: the deterministic part of the
    dynamics is at or beyond its own stability edge."""


class Verdict(str, enum.Enum):
    STABLE = "Stable"
    DETERMINISTIC_UNSTABLE = "DeterministicUnstable"
    STOCHASTIC_UNSTABLE = "StochasticUnstable"
    T_UNSTABLE_ONLY = "TUnstableOnly"


@dataclass(frozen=True)
class StabilityReport:
    """All stability measures for one (spectrum, eta, B) instance."""

    knorm: float
    a_op_norm: float
    knorm_hd: float
    knorm_tr: float
    eta_lambda_max: float
    verdict: Verdict
    t_max_abs_eig: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "knorm": self.knorm,
            "a_op_norm": self.a_op_norm,
            "knorm_hd": self.knorm_hd,
            "knorm_tr": self.knorm_tr,
            "eta_lambda_max": self.eta_lambda_max,
            "t_max_abs_eig": self.t_max_abs_eig,
            "verdict": self.verdict.value,
        }


@dataclass(frozen=True)
class MomentumParams:
    """Heavy-ball momentum coefficient mu; alpha = 1 - mu."""

    mu: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.mu < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.mu}")

    @property
    def alpha(self) -> float:
        return 1.0 - self.mu


def noise_kernel_norm(dynamics: DiagonalDynamics) -> float:
    """K = max eig[(I - A)^{-1} B] over the active (non-frozen) modes.

    Computed through the symmetric similarity
    (I - A)^{-1/2} B (I - A)^{-1/2}, which shares the spectrum but keeps
    the eigenproblem symmetric; A is diagonal so the square roots are
    entrywise.  Raises NearCriticalError when some 1 - A entry is at
    numerical zero.
    """
    idx = np.flatnonzero(dynamics.active)
    if idx.size == 0:
        return 0.0
    gaps = 1.0 - dynamics.a[idx]
    if gaps.min() < _SINGULAR_GAP:
        raise NearCriticalError(
            "deterministic gain within 1e-12 of 1; K is not defined here"
        )
    scale = 1.0 / np.sqrt(gaps)
    sym = dynamics.b_matrix[np.ix_(idx, idx)] * np.outer(scale, scale)
    top = np.linalg.eigvalsh(sym)[-1]
    return float(max(top, 0.0))


def knorm_hd(eigenvalues: np.ndarray, eta: float, batch_size: int) -> float:
    """High-dimensional kernel-norm approximation eta/B sum lam/(2 - eta lam).

    Valid only while every eta * lam < 2; beyond that the summand changes
    sign and the expression is meaningless, so this raises instead.
    """
    lam = _as_spectrum_vector(eigenvalues)
    x = eta * lam
    if np.any(x >= 2.0):
        raise ValueError("some eta * lambda >= 2; the HD form does not apply")
    return float(eta / batch_size * np.sum(lam / (2.0 - x)))


def knorm_trace(trace_ntk: float, eta: float, batch_size: int) -> float:
    """Trace approximation eta * tr(Theta) / (2 B)."""
    if trace_ntk < 0:
        raise ValueError("NTK trace must be non-negative")
    return eta * trace_ntk / (2.0 * batch_size)


def knorm_momentum_hd(
    eigenvalues: np.ndarray,
    eta: float,
    batch_size: int,
    dataset_size: int,
    mu: float,
) -> float:
    """Closed-form kernel norm for heavy-ball SGD in the delocalized limit.

    Evaluated as

        (1/B - 1/D) * (1+mu)/(1-mu) * sum_a  x_a / (2(1+mu) - x_a),
        x_a = eta * lam_a,

    which is the momentum closed form with its removable singularities
    cancelled algebraically (the two-fraction rational form is 0/0 at the
    real/complex root boundary; the cancelled form is regular there and
    identical elsewhere).  At mu = 0 this reduces to the finite-batch HD
    form (1 - B/D) * knorm_hd.  Raises if some mode has
    x >= 2(1 + mu), where the underlying geometric sums diverge.
    """
    params = MomentumParams(mu)
    lam = _as_spectrum_vector(eigenvalues)
    x = eta * lam
    edge = 2.0 * (1.0 + params.mu)
    if np.any(x >= edge):
        raise ValueError(
            "some eta * lambda >= 2 (1 + mu); a momentum mode does not converge"
        )
    prefactor = 1.0 / batch_size - 1.0 / dataset_size
    terms = np.where(x > 0.0, x / (edge - x), 0.0)
    return float(prefactor * (1.0 + params.mu) / params.alpha * terms.sum())


def knorm_mom_estimator(
    trace_ntk: float, eta: float, batch_size: int, alpha: float
) -> float:
    """Momentum-corrected trace estimator eta * tr(Theta) / (2 alpha B)."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if trace_ntk < 0:
        raise ValueError("NTK trace must be non-negative")
    return eta * trace_ntk / (2.0 * alpha * batch_size)


def knorm_l2_hd(
    eigenvalues: np.ndarray,
    eta: float,
    batch_size: int,
    dataset_size: int,
    rho: float,
) -> float:
    """Kernel norm with L2 regularization of strength rho, delocalized limit:

        (1/B - 1/D) * sum_a  (eta lam_a)^2 / (1 - (1 - eta lam_a - eta rho)^2).

    At rho = 0 this reduces to the finite-batch HD form, matching
    knorm_momentum_hd at mu = 0.  Raises when a denominator is
    non-positive (that mode's decay factor has magnitude >= 1).
    """
    if rho < 0:
        raise ValueError("L2 strength must be non-negative")
    lam = _as_spectrum_vector(eigenvalues)
    x = eta * lam
    r = eta * rho
    dens = 1.0 - (1.0 - x - r) ** 2
    live = (x > 0.0) | (r > 0.0)
    if np.any(dens[live] <= 0.0):
        raise ValueError("some regularized mode has |1 - eta(lambda + rho)| >= 1")
    terms = np.where(x > 0.0, x**2 / np.where(live, dens, 1.0), 0.0)
    prefactor = 1.0 / batch_size - 1.0 / dataset_size
    return float(prefactor * terms.sum())


@dataclass(frozen=True)
class GaussNewtonKernelNorm:
    """Trace estimator and generalized coupling for a non-MSE loss.

    `estimate` is eta/(2B) tr(J^T H J)/D, with H the loss Hessian in the
    model outputs at the minimum.  For dims within the guard, `coupling`
    holds the generalized overlap matrix

        Ct[b, m] = sum_a [(H^{1/2} V)_{a m}]^2 [(H^{-1/2} V)_{a b}]^2

    over the eigenbasis V of the modified kernel
    Theta_H = H^{1/2} J J^T H^{1/2} / D; it replaces the MSE coupling C
    in the diagonal dynamics and reduces to it when H is diagonal.
    Ct is entrywise non-negative but not symmetric in general.
    """

    estimate: float
    coupling: Optional[np.ndarray]
    spectrum: Optional[SpectrumDecomposition]
    eta: float
    batch_size: int

    def evolution_matrix(self) -> np.ndarray:
        """A + B of the generalized diagonal dynamics,
        A = (I - eta L)^2, B = eta^2 (1/beta - 1) L Ct L."""
        if self.coupling is None or self.spectrum is None:
            raise ValueError("coupling was not built (dimension above the guard)")
        lam = self.spectrum.eigenvalues
        beta = self.batch_size / self.spectrum.dim
        x = self.eta * lam
        out = (1.0 / beta - 1.0) * (x[:, None] * self.coupling * x[None, :])
        out[np.arange(lam.size), np.arange(lam.size)] += (1.0 - x) ** 2
        return out


def knorm_gauss_newton(
    jacobian: np.ndarray,
    logit_hessian: np.ndarray,
    eta: float,
    batch_size: int,
    max_dim: int = 64,
) -> GaussNewtonKernelNorm:
    """Gauss-Newton trace estimator and generalized coupling matrix.

    `logit_hessian` is the PSD Hessian of the loss in the model outputs
    (block-diagonal over examples for a per-example loss), given as a
    dense D x D array.  The coupling needs H^{-1/2}, so it is only built
    when H is strictly positive definite and D <= max_dim.
    """
    j = np.asarray(jacobian, dtype=float)
    h = np.asarray(logit_hessian, dtype=float)
    d = j.shape[0]
    if h.shape != (d, d):
        raise ValueError("logit Hessian must be DxD for a DxP jacobian")
    if np.abs(h - h.T).max() > 1e-10 * max(1.0, np.abs(h).max()):
        raise ValueError("logit Hessian must be symmetric")
    hvals, hvecs = np.linalg.eigh(0.5 * (h + h.T))
    if hvals[0] < -1e-10 * max(hvals[-1], 1.0):
        raise ValueError("logit Hessian must be PSD")
    hvals = np.clip(hvals, 0.0, None)

    gram = j @ j.T / d
    estimate = knorm_trace(float(np.sum(h * gram)), eta, batch_size)

    if d > max_dim:
        return GaussNewtonKernelNorm(estimate, None, None, eta, batch_size)
    if hvals[0] <= 1e-12 * max(hvals[-1], 1.0):
        raise ValueError("logit Hessian is singular; coupling needs H^{-1/2}")
    h_sqrt = (hvecs * np.sqrt(hvals)) @ hvecs.T
    h_isqrt = (hvecs / np.sqrt(hvals)) @ hvecs.T
    theta_h = h_sqrt @ gram @ h_sqrt
    spectrum = decompose_kernel(theta_h)
    grown = (h_sqrt @ spectrum.eigenvectors) ** 2
    shrunk = (h_isqrt @ spectrum.eigenvectors) ** 2
    coupling = shrunk.T @ grown
    return GaussNewtonKernelNorm(estimate, coupling, spectrum, eta, batch_size)


def stability_verdict(
    dynamics: DiagonalDynamics,
    eta: float,
    spectrum: SpectrumDecomposition,
    t_max_abs_eig: Optional[float] = None,
) -> StabilityReport:
    """Classify one instance by every stability measure at once.

    Branch order: the deterministic conditions (largest A eigenvalue >= 1,
    or eta * lambda_max >= 2) trump everything; then K >= 1 flags a
    noise-driven instability inside the deterministically stable region;
    then a supplied transfer-operator eigenvalue >= 1 flags the
    localized-eigenvector failure mode the diagonal model cannot see.
    Near the deterministic edge K is reported as +inf rather than an
    ill-conditioned solve.
    """
    eta_lambda_max = eta * spectrum.lambda_max
    a_op = dynamics.a_op_norm
    if 1.0 - a_op < NEAR_CRITICAL_GAP:
        knorm = np.inf
    else:
        knorm = noise_kernel_norm(dynamics)
    try:
        hd = knorm_hd(spectrum.eigenvalues, eta, dynamics_batch_size(dynamics))
    except ValueError:
        hd = np.inf
    tr = knorm_trace(spectrum.trace, eta, dynamics_batch_size(dynamics))

    if a_op >= 1.0 or eta_lambda_max >= 2.0 or np.isinf(knorm):
        verdict = Verdict.DETERMINISTIC_UNSTABLE
    elif knorm >= 1.0:
        verdict = Verdict.STOCHASTIC_UNSTABLE
    elif t_max_abs_eig is not None and t_max_abs_eig >= 1.0:
        verdict = Verdict.T_UNSTABLE_ONLY
    else:
        verdict = Verdict.STABLE
    return StabilityReport(
        knorm=knorm,
        a_op_norm=a_op,
        knorm_hd=hd,
        knorm_tr=tr,
        eta_lambda_max=eta_lambda_max,
        verdict=verdict,
        t_max_abs_eig=t_max_abs_eig,
    )


def dynamics_batch_size(dynamics: DiagonalDynamics) -> int:
    """Recover the integer batch size B = beta * D from the dynamics."""
    batch = int(round(dynamics.beta * dynamics.dim))
    if batch < 1 or abs(dynamics.beta * dynamics.dim - batch) > 1e-9:
        raise ValueError("dynamics were not built from an integer batch size")
    return batch


def _as_spectrum_vector(eigenvalues: np.ndarray) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1:
        raise ValueError("eigenvalues must be a vector")
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    return lam
