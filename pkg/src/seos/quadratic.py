"""Quadratic regression model: minibatch SGD with a moving Jacobian.

A second-order Taylor model closes in the pair (z, J): with a fixed
curvature tensor Q contracted as Q(u, v) = sum_a w_a (u^T M_a v), one
minibatch step reads

    z' = z - (eta/B) J J^T P z + (eta^2 / 2B^2) Q(J^T P z, J^T P z)
    J' = J - (eta/B) Q(J^T P z, .)

The w_a are the left singular vectors of the initial Jacobian and each
M_a is a random symmetric P x P matrix whose entries have variance
V(sigma_a) for a weighting profile V.  Tracking the fixed singular pairs
(w_a, v_a) gives cheap per-mode estimates of the moving singular values
and NTK eigenvalues, whose first/second discrete time derivatives have
closed-form batch-size dependence at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .masks import MinibatchMask, mask_second_moment, sample_mask

VarianceProfile = Union[str, Callable[[np.ndarray], np.ndarray]]


def resolve_variance_profile(profile: VarianceProfile) -> Callable[[np.ndarray], np.ndarray]:
    """Map "flat" / "linear" / a callable to a vectorized V(sigma)."""
    if callable(profile):
        return profile
    if profile == "flat":
        return lambda s: np.ones_like(np.asarray(s, dtype=float))
    if profile == "linear":
        return lambda s: np.asarray(s, dtype=float).copy()
    raise ValueError(f"unknown variance profile {profile!r}")


def table_profile(sigmas: Sequence[float], values: Sequence[float]) -> Callable:
    """Piecewise-linear V(sigma) through the given (sigma, V) table."""
    s = np.asarray(sigmas, dtype=float)
    v = np.asarray(values, dtype=float)
    if s.ndim != 1 or s.shape != v.shape or s.size < 2:
        raise ValueError("need matching sigma/value vectors of length >= 2")
    if np.any(np.diff(s) <= 0):
        raise ValueError("table sigmas must be strictly increasing")
    return lambda q: np.interp(np.asarray(q, dtype=float), s, v)


@dataclass(frozen=True)
class SingularTriple:
    """One (left vector, right vector, singular value) triple of J0."""

    w: np.ndarray
    v: np.ndarray
    sigma: float


@dataclass(frozen=True)
class QuadraticModel:
    """Initial state (z0, J0) and factored curvature of the quadratic model."""

    residual0: np.ndarray  # (D,)
    jacobian0: np.ndarray  # (D, P)
    left_vectors: np.ndarray  # (D, K) columns w_a, K = min(D, P)
    right_vectors: np.ndarray  # (P, K) columns v_a
    singular_values: np.ndarray  # (K,), descending
    curvature: np.ndarray  # (K, P, P), slice a is the symmetric M_a
    mode_variances: np.ndarray  # (K,) the V(sigma_a) used for each M_a
    v_z: float

    @property
    def dim(self) -> int:
        return self.jacobian0.shape[0]

    @property
    def n_params(self) -> int:
        return self.jacobian0.shape[1]

    @property
    def n_modes(self) -> int:
        return self.singular_values.size

    def triple(self, index: int) -> SingularTriple:
        return SingularTriple(
            w=self.left_vectors[:, index],
            v=self.right_vectors[:, index],
            sigma=float(self.singular_values[index]),
        )

    def ntk_trace0(self) -> float:
        """tr(Theta) at initialization, = sum sigma^2 / D."""
        return float(np.sum(self.singular_values**2)) / self.dim

    def dense_curvature(self) -> np.ndarray:
        """Materialize Q as a D x P x P array.  Small instances only."""
        return np.einsum("da,apq->dpq", self.left_vectors, self.curvature)


def build_quadratic_model(
    dim: int,
    n_params: int,
    variance_profile: VarianceProfile,
    v_z: float,
    rng: np.random.Generator,
) -> QuadraticModel:
    """Sample (z0, J0, Q) with J0 i.i.d. standard normal and z0 i.i.d. of
    variance v_z.

    Each curvature slice M_a is sampled by drawing the upper triangle
    (diagonal included) i.i.d. N(0, V(sigma_a)) and mirroring, so every
    entry has variance exactly V(sigma_a).  Draw order is J0, z0, then
    the M_a slices by descending singular value.
    """
    if dim < 2 or n_params < 1:
        raise ValueError("need D >= 2 and P >= 1")
    if v_z < 0:
        raise ValueError("residual variance must be non-negative")
    profile = resolve_variance_profile(variance_profile)
    j0 = rng.standard_normal((dim, n_params))
    z0 = rng.normal(0.0, np.sqrt(v_z), size=dim)
    left, sing, right_t = np.linalg.svd(j0, full_matrices=False)
    variances = np.asarray(profile(sing), dtype=float)
    if variances.shape != sing.shape or np.any(variances < 0):
        raise ValueError("variance profile must map sigmas to non-negative values")
    k = sing.size
    curvature = np.empty((k, n_params, n_params))
    for a in range(k):
        g = rng.standard_normal((n_params, n_params))
        sym = np.triu(g) + np.triu(g, 1).T
        curvature[a] = np.sqrt(variances[a]) * sym
    return QuadraticModel(
        residual0=z0,
        jacobian0=j0,
        left_vectors=left,
        right_vectors=right_t.T,
        singular_values=sing,
        curvature=curvature,
        mode_variances=variances,
        v_z=float(v_z),
    )


def qrm_step(
    z: np.ndarray,
    jacobian: np.ndarray,
    model: QuadraticModel,
    mask: MinibatchMask,
    eta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One minibatch step of (z, J), both updates from the same mask and
    the same pre-update state."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    z = np.asarray(z, dtype=float)
    jacobian = np.asarray(jacobian, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(jacobian))):
        raise ValueError("state has non-finite entries (trajectory diverged)")
    b = mask.batch_size
    idx = mask.indices
    u = jacobian[idx].T @ z[idx]  # J^T P z
    k, p = model.curvature.shape[0], model.curvature.shape[1]
    mu = (model.curvature.reshape(k * p, p) @ u).reshape(k, p)  # rows M_a u
    quad = mu @ u  # u^T M_a u per mode
    z_next = (
        z
        - (eta / b) * (jacobian @ u)
        + (eta**2 / (2.0 * b**2)) * (model.left_vectors @ quad)
    )
    j_next = jacobian - (eta / b) * (model.left_vectors @ mu)
    return z_next, j_next


def estimators(
    jacobian: np.ndarray, model: QuadraticModel, n_modes: Optional[int] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode singular-value and NTK-eigenvalue estimates against the
    frozen t=0 singular vectors:

        sigma_hat_a = w_a^T J v_a,   lambda_hat_a = ||J^T w_a||^2.

    At t=0, sigma_hat^2 = lambda_hat = sigma^2 exactly.
    """
    k = model.n_modes if n_modes is None else min(n_modes, model.n_modes)
    left = model.left_vectors[:, :k]
    right = model.right_vectors[:, :k]
    sigma_hat = np.sum(left * (jacobian @ right), axis=0)
    lambda_hat = np.sum((jacobian.T @ left) ** 2, axis=0)
    return sigma_hat, lambda_hat


def discrete_derivatives(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First and second discrete time derivatives of a series:
    d1[t] = x[t+1] - x[t], d2[t] = x[t+2] - 2 x[t+1] + x[t]."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 0 or x.shape[0] < 3:
        raise ValueError("need at least 3 points for the second difference")
    d1 = x[1:] - x[:-1]
    d2 = x[2:] - 2.0 * x[1:-1] + x[:-2]
    return d1, d2


def theory_first_derivative(
    model: QuadraticModel, eta: float, batch_size: int, alpha_index: int
) -> float:
    """Leading-order mean of d1 lambda_hat at t=0:
    (1/B) P V_z tr(Theta_0) eta^2 V(sigma_a).  Batch noise only ever
    *adds* first-derivative sharpening, scaling as 1/B."""
    return (
        eta**2
        * model.n_params
        * model.v_z
        * model.ntk_trace0()
        * float(model.mode_variances[alpha_index])
        / batch_size
    )


def theory_second_derivative_stochastic_part(
    model: QuadraticModel, eta: float, batch_size: int, alpha_index: int
) -> float:
    """Batch-dependent correction to the mean of d2 sigma_hat at t=0:

        - (1 / (B D^2)) eta^3 sigma_a^3 V(sigma_a) P V_z.

    The batch-independent part d2 is not evaluated in closed form; it is
    measured as the full-batch (B = D) baseline at the same raw eta,
    which has the identical deterministic content.
    """
    sigma = float(model.singular_values[alpha_index])
    return (
        -(eta**3)
        * sigma**3
        * float(model.mode_variances[alpha_index])
        * model.n_params
        * model.v_z
        / (batch_size * model.dim**2)
    )


@dataclass(frozen=True)
class SharpeningTrace:
    """Estimator series of one (batch size, seed) simulation cell.

    `theory_d1_lambda` / `theory_d2_stoch` hold the closed-form t=0
    predictions for the top tracked mode, evaluated on this cell's model
    realization.  `d2_sigma_top_lowvar` is an unbiased variance-reduced
    estimate of E[d2 sigma_hat] at t=0 for the top mode (see
    mean_second_difference_top_mode); it equals the raw second
    difference exactly at full batch."""

    sigma_hat: np.ndarray  # (steps+1, n_tracked)
    lambda_hat: np.ndarray  # (steps+1, n_tracked)
    batch_size: int
    seed_index: int
    eta: float
    theory_d1_lambda: float = np.nan
    theory_d2_stoch: float = np.nan
    d2_sigma_top_lowvar: float = np.nan

    def d1_lambda(self, mode: int = 0) -> np.ndarray:
        return np.diff(self.lambda_hat[:, mode])

    def d2_sigma(self, mode: int = 0) -> np.ndarray:
        s = self.sigma_hat[:, mode]
        return s[2:] - 2.0 * s[1:-1] + s[:-2]


@dataclass(frozen=True)
class SharpeningSummary:
    """Seed-aggregated series for one batch size."""

    batch_size: int
    lambda_mean: np.ndarray  # (steps+1,) mean of lambda_hat_max
    lambda_sem: np.ndarray
    sigma_mean: np.ndarray
    sigma_sem: np.ndarray
    n_seeds: int


@dataclass(frozen=True)
class SharpeningResult:
    traces: List[SharpeningTrace]
    summaries: Dict[int, SharpeningSummary]
    eta: float
    steps: int


def simulate_sharpening_cell(
    model: QuadraticModel,
    eta: float,
    batch_size: int,
    steps: int,
    mask_rng: np.random.Generator,
    n_tracked: int = 8,
    seed_index: int = 0,
) -> SharpeningTrace:
    """Run `steps` quadratic-model SGD steps, recording the tracked
    estimators at every step (including t=0).

    Alongside the raw series, mean_second_difference_top_mode is recorded
    (drawing its masks from a stream spawned off `mask_rng`, so the
    trajectory's own mask sequence is unaffected).
    """
    n_tracked = min(n_tracked, model.n_modes)
    z = model.residual0.copy()
    jac = model.jacobian0.copy()
    sig = np.empty((steps + 1, n_tracked))
    lam = np.empty((steps + 1, n_tracked))
    sig[0], lam[0] = estimators(jac, model, n_tracked)
    d2_lowvar = np.nan
    if steps >= 1:
        d2_lowvar = mean_second_difference_top_mode(
            model, eta, batch_size, mask_rng.spawn(1)[0]
        )
    for t in range(steps):
        mask = sample_mask(model.dim, batch_size, mask_rng)
        z, jac = qrm_step(z, jac, model, mask, eta)
        sig[t + 1], lam[t + 1] = estimators(jac, model, n_tracked)
    return SharpeningTrace(
        sig,
        lam,
        batch_size,
        seed_index,
        eta,
        theory_d1_lambda=theory_first_derivative(model, eta, batch_size, 0),
        theory_d2_stoch=theory_second_derivative_stochastic_part(
            model, eta, batch_size, 0
        ),
        d2_sigma_top_lowvar=d2_lowvar,
    )


def mean_second_difference_top_mode(
    model: QuadraticModel,
    eta: float,
    batch_size: int,
    rng: np.random.Generator,
    n_masks: int = 8,
) -> float:
    """Unbiased variance-reduced estimate of E[d2 sigma_hat_0] (top mode).

    The second difference obeys the exact identity
    d2 sigma_hat_0 = -(eta/B) v^T M (u_1 - u_0) with u_t = J_t^T P_t z_t.
    Taking the exact expectation over the second mask and collecting the
    exact one-step update, the quantity becomes a cubic polynomial in
    u = J_0^T P_0 z_0:

        -(eta/D) [ -et (a + b).u  +  et^2 u^T X u
                   - (et^3/2) sum_g (G_g . u)(u^T M_g u) ],   et = eta/B.

    The linear and quadratic parts are replaced by their closed-form mask
    moments (first moment and the second-moment closed form); only the
    cubic remainder keeps sampled values, averaged over `n_masks` fresh
    masks from `rng`.  Every substitution is an exact conditional
    expectation, so the estimate is unbiased, and at full batch it
    equals the raw second difference identically.
    """
    dim = model.dim
    beta = batch_size / dim
    etat = eta / batch_size
    k, p = model.curvature.shape[0], model.curvature.shape[1]
    m = model.curvature[0] @ model.right_vectors[:, 0]
    z0, j0 = model.residual0, model.jacobian0
    gmat = (model.curvature.reshape(k * p, p) @ m).reshape(k, p)  # rows M_g m
    a_vec = gmat.T @ (model.left_vectors.T @ z0)
    b_vec = j0.T @ (j0 @ m)
    mean_linear = -etat * ((a_vec + b_vec) @ (beta * (j0.T @ z0)))
    # quadratic response u^T X u,
    # X = sum_g (M_g m)(sigma_g v_g)^T + (1/2) sum_g sigma_g (v_g . m) M_g
    sig_v = model.singular_values[:, None] * model.right_vectors.T  # (K, P)
    x_mat = gmat.T @ sig_v
    x_mat += 0.5 * np.tensordot(sig_v @ m, model.curvature, axes=1)
    w_mat = j0 @ x_mat @ j0.T
    mean_quad = etat**2 * (z0 @ mask_second_moment(w_mat, batch_size, dim) @ z0)

    # cubic remainder, averaged over fresh masks (deterministic at B = D)
    u_rows = np.empty((n_masks, p))
    for r in range(n_masks):
        idx = sample_mask(dim, batch_size, rng).indices
        u_rows[r] = j0[idx].T @ z0[idx]
    mu = (model.curvature.reshape(k * p, p) @ u_rows.T).reshape(k, p, n_masks)
    quad_forms = np.einsum("apr,rp->ar", mu, u_rows)
    cubic_draws = -0.5 * etat**3 * np.sum((gmat @ u_rows.T) * quad_forms, axis=0)

    return float(-(eta / dim) * (mean_linear + mean_quad + cubic_draws.mean()))


def monte_carlo_sharpening(
    dim: int,
    n_params: int,
    variance_profile: VarianceProfile,
    v_z: float,
    eta: float,
    batch_sizes: Sequence[int],
    steps: int,
    seeds: int,
    rng: np.random.Generator,
    n_tracked: int = 8,
    resample_model: bool = True,
) -> SharpeningResult:
    """Seeded sharpening ensembles, one cell per (batch size, seed).

    Every seed gets an independent model draw (and z0) by default,
    matching expectation over (P, Q, z); set resample_model=False to
    freeze one model and vary only the mask streams.  Batch sizes share
    the model within a seed, so cross-batch comparisons are paired.
    Deterministic given the generator state.
    """
    if seeds < 1 or steps < 0:
        raise ValueError("need seeds >= 1 and steps >= 0")
    batch_sizes = list(batch_sizes)
    shared_model = (
        None
        if resample_model
        else build_quadratic_model(dim, n_params, variance_profile, v_z, rng)
    )
    traces: List[SharpeningTrace] = []
    seed_streams = rng.spawn(seeds)
    for s, stream in enumerate(seed_streams):
        substreams = stream.spawn(1 + len(batch_sizes))
        model = shared_model
        if model is None:
            model = build_quadratic_model(
                dim, n_params, variance_profile, v_z, substreams[0]
            )
        for b_i, b in enumerate(batch_sizes):
            traces.append(
                simulate_sharpening_cell(
                    model, eta, b, steps, substreams[1 + b_i], n_tracked, s
                )
            )
    summaries = {}
    for b in batch_sizes:
        lam = np.stack([t.lambda_hat[:, 0] for t in traces if t.batch_size == b])
        sig = np.stack([t.sigma_hat[:, 0] for t in traces if t.batch_size == b])
        summaries[b] = SharpeningSummary(
            batch_size=b,
            lambda_mean=lam.mean(axis=0),
            lambda_sem=_sem_rows(lam),
            sigma_mean=sig.mean(axis=0),
            sigma_sem=_sem_rows(sig),
            n_seeds=lam.shape[0],
        )
    return SharpeningResult(traces, summaries, eta, steps)


def _sem_rows(values: np.ndarray) -> np.ndarray:
    """Column-wise standard error; shifting by the first row keeps the
    result exact (0) when every row is identical, e.g. full-batch runs."""
    n = values.shape[0]
    if n < 2:
        return np.zeros(values.shape[1])
    return (values - values[0]).std(axis=0, ddof=1) / np.sqrt(n)
