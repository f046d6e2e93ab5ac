"""Minibatch SGD on the linearized model, simulated in function space.

The residual z = f(theta) - y closes under the update
    z' = z - (eta / B) J J^T P z
for a mask P, so trajectories never touch parameter space.  Averaged over
masks this is the deterministic map z' = (I - eta Theta) z with
Theta = J J^T / D, whose stability boundary is eta * lambda_max = 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .masks import MinibatchMask, sample_mask
from .second_moment import SpectrumDecomposition, decompose_ntk

# A trajectory is declared divergent once the loss exceeds this multiple
# of its initial value (or goes non-finite).  Multiplicative, so the
# criterion is invariant under rescaling the residuals.
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class LinearModel:
    """Jacobian and initial residual of the linearized regression problem."""

    jacobian: np.ndarray  # (D, P)
    residual0: np.ndarray  # (D,)

    def __post_init__(self) -> None:
        j = np.asarray(self.jacobian, dtype=float)
        z = np.asarray(self.residual0, dtype=float)
        if j.ndim != 2 or j.shape[0] < 2 or j.shape[1] < 1:
            raise ValueError("jacobian must be DxP with D >= 2, P >= 1")
        if z.shape != (j.shape[0],):
            raise ValueError("residual length must match jacobian rows")
        object.__setattr__(self, "jacobian", j)
        object.__setattr__(self, "residual0", z)

    @property
    def dim(self) -> int:
        return self.jacobian.shape[0]

    @property
    def n_params(self) -> int:
        return self.jacobian.shape[1]

    def ntk(self) -> np.ndarray:
        """Theta = J J^T / D."""
        return self.jacobian @ self.jacobian.T / self.dim

    def spectrum(self) -> SpectrumDecomposition:
        return decompose_ntk(self.jacobian)

    def loss(self, z: np.ndarray) -> float:
        """L = ||z||^2 / (2 D)."""
        return float(z @ z) / (2.0 * self.dim)


@dataclass(frozen=True)
class LossTrace:
    """Per-step losses of one trajectory, capped at `saturation_cap` for
    reporting; `final_loss` keeps the uncapped last value (inf if the
    iterate went non-finite).  A diverged trace is truncated at the step
    that crossed the divergence threshold."""

    losses: np.ndarray
    diverged: bool
    saturation_cap: float
    final_loss: float

    @property
    def initial_loss(self) -> float:
        return float(self.losses[0])


def sgd_step(
    z: np.ndarray, jacobian: np.ndarray, mask: MinibatchMask, eta: float
) -> np.ndarray:
    """One minibatch step z - (eta/B) J (J^T (P z)), touching only the
    masked coordinates on the gradient side."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("residual has non-finite entries")
    idx = mask.indices
    grad = jacobian[idx].T @ z[idx]  # J^T P z, masked rows only
    return z - (eta / mask.batch_size) * (jacobian @ grad)


def simulate_trajectory(
    model: LinearModel,
    eta: float,
    batch_size: int,
    steps: int,
    rng: np.random.Generator,
    cap: float = np.inf,
    z0: Optional[np.ndarray] = None,
) -> LossTrace:
    """Run `steps` minibatch SGD steps and record the loss trace.

    Halts early (diverged) once the loss exceeds DIVERGENCE_FACTOR times
    the initial loss or goes non-finite.  eta = 0 is allowed here and
    yields a constant trace.  Bit-reproducible given (rng state, model,
    eta, batch_size, steps).
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    z = model.residual0.copy() if z0 is None else np.asarray(z0, dtype=float).copy()
    loss0 = model.loss(z)
    threshold = DIVERGENCE_FACTOR * loss0 if loss0 > 0 else DIVERGENCE_FACTOR
    losses = [min(loss0, cap)]
    diverged = False
    final = loss0
    d = model.dim
    jac = model.jacobian
    inv_b = eta / batch_size
    for _ in range(steps):
        if eta > 0:
            # sorted prefix of a full shuffle == sample_mask's index set,
            # in the same gather order, so this matches sgd_step bitwise
            idx = np.sort(rng.permutation(d)[:batch_size])
            grad = jac[idx].T @ z[idx]
            z = z - inv_b * (jac @ grad)
        val = z @ z / (2.0 * d)
        if not np.isfinite(val):
            final = np.inf
            losses.append(cap if np.isfinite(cap) else np.inf)
            diverged = True
            break
        final = float(val)
        losses.append(min(final, cap))
        if final > threshold:
            diverged = True
            break
    return LossTrace(
        losses=np.asarray(losses),
        diverged=diverged,
        saturation_cap=cap,
        final_loss=final,
    )


def deterministic_eos_margin(spectrum: SpectrumDecomposition, eta: float) -> float:
    """eta * lambda_max of the NTK; the full-batch dynamics are stable
    if and only if this is below 2."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    return eta * spectrum.lambda_max
