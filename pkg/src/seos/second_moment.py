"""Second-moment dynamics of minibatch SGD residuals in a linear model.

Conditioned on the current residual, the expected next residual covariance
is a linear map of the current one.  This module builds that map three
ways, at three costs:

* ``covariance_step``: one exact conditional-expectation update of a full
  D x D covariance, in the original coordinate basis.
* ``build_transfer_operator``: the same map materialized as a D^2 x D^2
  matrix in the NTK eigenbasis (small D only).
* ``build_diagonal_dynamics``: the map restricted to the diagonal of the
  eigenbasis covariance, i.e. the D x D system  p' = (A + B) p  with a
  diagonal deterministic part A and a noise coupling B built from the
  eigenvector overlap matrix C.

Conventions: the empirical NTK is Theta = J J^T / D (the /D normalization);
the SGD update itself uses J J^T / B.  All spectra stored here are spectra
of Theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from .masks import BatchFractions

# Relative cutoff below which an eigenvalue is treated as an exact zero
# mode: frozen under the dynamics and excluded from stability spectra.
ZERO_MODE_RTOL = 1e-12

# Largest D for which the dense D^2 x D^2 transfer operator is built.
TRANSFER_OPERATOR_MAX_DIM = 64

_EIG_NEG_TOL = 1e-10  # eigenvalues below -tol signal a broken input kernel
_ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class SpectrumDecomposition:
    """Eigendecomposition Theta = V diag(eigenvalues) V^T, eigenvalues descending."""

    eigenvalues: np.ndarray  # (D,), descending, >= 0
    eigenvectors: np.ndarray  # (D, D), columns are eigenvectors

    def __post_init__(self) -> None:
        lam = np.asarray(self.eigenvalues, dtype=float)
        v = np.asarray(self.eigenvectors, dtype=float)
        if lam.ndim != 1 or v.shape != (lam.size, lam.size):
            raise ValueError("need a D-vector of eigenvalues and a DxD basis")
        if np.any(lam < -_EIG_NEG_TOL):
            raise ValueError(
                f"eigenvalue {lam.min():.3e} below -{_EIG_NEG_TOL}; input not PSD"
            )
        lam = np.clip(lam, 0.0, None)
        if np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be sorted in descending order")
        gram_err = np.abs(v.T @ v - np.eye(lam.size)).max()
        if gram_err > _ORTHO_TOL:
            raise ValueError(f"eigenvectors not orthonormal (deviation {gram_err:.3e})")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", v)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    @property
    def matrix(self) -> np.ndarray:
        """Reassembled kernel V diag(lambda) V^T."""
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def active_modes(self) -> np.ndarray:
        """Boolean mask of eigenvalues above the zero-mode cutoff."""
        return self.eigenvalues > ZERO_MODE_RTOL * max(self.lambda_max, 0.0)


def decompose_ntk(jacobian: np.ndarray) -> SpectrumDecomposition:
    """Eigendecomposition of the empirical NTK Theta = J J^T / D."""
    j = np.asarray(jacobian, dtype=float)
    if j.ndim != 2:
        raise ValueError("jacobian must be a DxP matrix")
    if not np.all(np.isfinite(j)):
        raise ValueError("jacobian has non-finite entries")
    theta = j @ j.T / j.shape[0]
    return decompose_kernel(theta)


def decompose_kernel(kernel: np.ndarray) -> SpectrumDecomposition:
    """Eigendecomposition of a symmetric PSD kernel, descending order.

    Ties are broken by original (ascending-eigh) position via a stable
    sort, so the output is deterministic for a given input.
    """
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("kernel must be square")
    sym = 0.5 * (k + k.T)
    lam, vec = np.linalg.eigh(sym)
    order = np.argsort(-lam, kind="stable")
    return SpectrumDecomposition(lam[order], vec[:, order])


def coupling_matrix(eigenvectors: np.ndarray) -> np.ndarray:
    """Noise coupling C[b, m] = sum_a V[a, b]^2 V[a, m]^2.

    C is symmetric, entrywise non-negative, with unit row sums; for
    delocalized (e.g. Haar) eigenvectors it concentrates on (1/D) 11^T.
    """
    v = np.asarray(eigenvectors, dtype=float)
    w = v**2
    return w.T @ w


def covariance_step(
    sigma: np.ndarray,
    kernel: "SpectrumDecomposition | np.ndarray",
    eta: float,
    batch_size: int,
) -> np.ndarray:
    """One exact update of E[z z^T] under a minibatch SGD step.

    Sigma' = Sigma - eta (Theta Sigma + Sigma Theta)
             + (beta_tilde/beta) eta^2 Theta Sigma Theta
             + (1 - beta_tilde)/beta * eta^2 Theta diag(Sigma) Theta

    `kernel` is the NTK Theta (the /D normalization), either as a
    SpectrumDecomposition or a raw symmetric DxD array.
    """
    theta = kernel.matrix if isinstance(kernel, SpectrumDecomposition) else np.asarray(kernel, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if s.shape != theta.shape:
        raise ValueError("covariance and kernel dimensions disagree")
    asym = np.abs(s - s.T).max() if s.size else 0.0
    if asym > 1e-8 * max(1.0, np.abs(s).max()):
        raise ValueError(f"covariance not symmetric (deviation {asym:.3e})")
    fr = BatchFractions.from_counts(theta.shape[0], batch_size)
    ts = theta @ s
    out = (
        s
        - eta * (ts + ts.T)
        + (fr.beta_tilde / fr.beta) * eta**2 * (ts @ theta)
        + ((1.0 - fr.beta_tilde) / fr.beta)
        * eta**2
        * (theta * np.diag(s)) @ theta
    )
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class TransferOperator:
    """Dense D^2 x D^2 second-moment map in the NTK eigenbasis.

    Row/column index (m, n) is flattened as m*D + n, matching row-major
    vec() of the eigenbasis covariance S.
    """

    matrix: np.ndarray
    spectrum: SpectrumDecomposition
    eta: float
    batch_size: int

    @property
    def dim(self) -> int:
        return self.spectrum.dim

    def apply(self, s: np.ndarray) -> np.ndarray:
        """Advance an eigenbasis covariance S by one step."""
        d = self.dim
        s = np.asarray(s, dtype=float)
        if s.shape != (d, d):
            raise ValueError("covariance shape mismatch")
        return (self.matrix @ s.reshape(d * d)).reshape(d, d)


def build_transfer_operator(
    spectrum: SpectrumDecomposition,
    eta: float,
    batch_size: int,
    max_dim: int = TRANSFER_OPERATOR_MAX_DIM,
) -> TransferOperator:
    """Materialize the transfer operator

    T[(m,n),(b,g)] = delta_mb delta_ng (1 - eta (l_m + l_n)
                                        + (bt/b) eta^2 l_m l_n)
                     + (1 - bt)/b * eta^2 l_m l_n sum_a V_ab V_ag V_am V_an

    with b = B/D and bt = (B-1)/(D-1).  Memory is D^4 entries, so D is
    guarded by `max_dim`; beyond that use the diagonal dynamics.
    """
    d = spectrum.dim
    if d > max_dim:
        raise ValueError(
            f"transfer operator needs D^2 x D^2 = {d**2}x{d**2} storage; "
            f"D={d} exceeds the guard ({max_dim})"
        )
    fr = BatchFractions.from_counts(d, batch_size)
    lam = spectrum.eigenvalues
    v = spectrum.eigenvectors
    lam_outer = np.outer(lam, lam)

    diag_part = (
        1.0
        - eta * np.add.outer(lam, lam)
        + (fr.beta_tilde / fr.beta) * eta**2 * lam_outer
    )
    t4 = np.zeros((d, d, d, d))
    mn = np.arange(d)
    t4[mn[:, None], mn[None, :], mn[:, None], mn[None, :]] = diag_part

    overlap = np.einsum("ab,ag,am,an->mnbg", v, v, v, v, optimize=True)
    coef = (1.0 - fr.beta_tilde) / fr.beta * eta**2
    t4 += coef * lam_outer[:, :, None, None] * overlap

    return TransferOperator(t4.reshape(d * d, d * d), spectrum, eta, batch_size)


def max_abs_eigenvalue(operator: TransferOperator) -> float:
    """Largest absolute eigenvalue of the transfer operator.

    Uses ARPACK for large operators and a dense solve for small or
    hard-to-converge ones; the operator is not symmetric in general, so
    the result is |.| of a possibly complex eigenvalue.
    """
    t = operator.matrix
    n = t.shape[0]
    if n > 100:
        try:
            # fixed start vector keeps reruns bit-identical
            vals = scipy.sparse.linalg.eigs(
                t,
                k=1,
                which="LM",
                return_eigenvectors=False,
                maxiter=n * 50,
                v0=np.full(n, 1.0 / np.sqrt(n)),
            )
            return float(np.abs(vals).max())
        except scipy.sparse.linalg.ArpackNoConvergence:
            pass
    return float(np.abs(np.linalg.eigvals(t)).max())


@dataclass(frozen=True)
class DiagonalDynamics:
    """The diagonal-restricted second-moment system p' = (A + B) p.

    `a` holds the diagonal of the deterministic part
        A = (I - eta L)^2 + (bt/b - 1) eta^2 L^2,
    `b_matrix` the noise part B = (1 - bt)/b * eta^2 L C L, both in the
    NTK eigenbasis after the pseudoinverse normalization.  Zero modes
    (eigenvalues at the pseudoinverse cutoff) are frozen: their entries
    are carried unchanged and `active` excludes them from stability
    spectra.
    """

    a: np.ndarray  # (D,) diagonal of A
    b_matrix: np.ndarray  # (D, D) symmetric PSD
    coupling: np.ndarray  # (D, D) the eigenvector overlap matrix C
    eigenvalues: np.ndarray  # (D,) NTK eigenvalues, descending
    eta: float
    beta: float
    beta_tilde: float
    active: np.ndarray = field(repr=False)  # (D,) bool

    @property
    def dim(self) -> int:
        return self.a.size

    @property
    def a_op_norm(self) -> float:
        """Largest eigenvalue of A over the active modes (diagonal, so max entry).

        A can have negative entries at large eta; the stability branch of
        the theory only ever compares the largest (signed) eigenvalue
        against 1, which is what this reports.  0.0 if nothing is active.
        """
        if not np.any(self.active):
            return 0.0
        return float(self.a[self.active].max())

    def evolution_matrix(self) -> np.ndarray:
        """A + B restricted to active modes (frozen modes are excluded)."""
        idx = np.flatnonzero(self.active)
        sub = self.b_matrix[np.ix_(idx, idx)].copy()
        sub[np.arange(idx.size), np.arange(idx.size)] += self.a[idx]
        return sub

    def max_growth_rate(self) -> float:
        """Largest eigenvalue of A + B over active modes; < 1 means the
        diagonal second-moment model contracts.  0.0 if nothing is active."""
        if not np.any(self.active):
            return 0.0
        return float(np.linalg.eigvalsh(self.evolution_matrix()).max())

    def step(self, p: np.ndarray) -> np.ndarray:
        """Advance the normalized diagonal p by one step, freezing zero modes."""
        p = np.asarray(p, dtype=float)
        if p.shape != (self.dim,):
            raise ValueError("diagonal vector shape mismatch")
        out = p.copy()
        idx = np.flatnonzero(self.active)
        if idx.size:
            out[idx] = self.a[idx] * p[idx] + self.b_matrix[np.ix_(idx, idx)] @ p[idx]
        return out


def build_diagonal_dynamics(
    spectrum: SpectrumDecomposition, eta: float, batch_size: int
) -> DiagonalDynamics:
    """Assemble the diagonal-restricted dynamics (A, B, C) for a spectrum."""
    fr = BatchFractions.from_counts(spectrum.dim, batch_size)
    lam = spectrum.eigenvalues
    c = coupling_matrix(spectrum.eigenvectors)
    a = (1.0 - eta * lam) ** 2 + (fr.beta_tilde / fr.beta - 1.0) * (eta * lam) ** 2
    scaled = eta * lam
    b = ((1.0 - fr.beta_tilde) / fr.beta) * (scaled[:, None] * c * scaled[None, :])
    return DiagonalDynamics(
        a=a,
        b_matrix=b,
        coupling=c,
        eigenvalues=lam,
        eta=eta,
        beta=fr.beta,
        beta_tilde=fr.beta_tilde,
        active=spectrum.active_modes(),
    )
