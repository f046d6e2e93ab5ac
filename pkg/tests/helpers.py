"""Independent oracles shared by the test modules.

Everything here recomputes expectations by brute force (enumeration,
vectorized Monte Carlo, dense tensors) without going through the library
code paths under test.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np


def mask_index_batch(
    dim: int, batch: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """(n, batch) uniform random index sets, vectorized row-wise shuffles."""
    tiles = np.tile(np.arange(dim), (n, 1))
    return rng.permuted(tiles, axis=1)[:, :batch]


def indicator_matrix(indices: np.ndarray, dim: int) -> np.ndarray:
    """(n, dim) 0/1 rows from an (n, batch) index array."""
    n = indices.shape[0]
    out = np.zeros((n, dim))
    out[np.arange(n)[:, None], indices] = 1.0
    return out


def mc_second_moment(
    matrix: np.ndarray, batch: int, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean and per-entry sigma of P M P over n sampled masks.

    E[P M P]_ij = M_ij * E[1_i 1_j]; the pair-inclusion indicator is
    Bernoulli, so its standard error has the exact binomial form.
    """
    dim = matrix.shape[0]
    ind = indicator_matrix(mask_index_batch(dim, batch, n, rng), dim)
    pair_freq = ind.T @ ind / n
    mean = matrix * pair_freq
    sigma = np.abs(matrix) * np.sqrt(pair_freq * (1.0 - pair_freq) / n)
    return mean, sigma


def mc_cross_moment(
    matrix: np.ndarray, batch: int, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean/sigma of P M P' over n independent mask pairs."""
    dim = matrix.shape[0]
    ind1 = indicator_matrix(mask_index_batch(dim, batch, n, rng), dim)
    ind2 = indicator_matrix(mask_index_batch(dim, batch, n, rng), dim)
    pair_freq = ind1.T @ ind2 / n
    mean = matrix * pair_freq
    sigma = np.abs(matrix) * np.sqrt(pair_freq * (1.0 - pair_freq) / n)
    return mean, sigma


def enumerated_second_moment(matrix: np.ndarray, batch: int) -> np.ndarray:
    """Exact E[P M P] by averaging over every mask (small D)."""
    dim = matrix.shape[0]
    total = np.zeros_like(matrix, dtype=float)
    count = 0
    for combo in combinations(range(dim), batch):
        sel = np.zeros(dim)
        sel[list(combo)] = 1.0
        total += matrix * np.outer(sel, sel)
        count += 1
    return total / count


def enumerated_first_moment_step(
    z: np.ndarray, jacobian: np.ndarray, eta: float, batch: int
) -> np.ndarray:
    """Exact E_P[z'] of one minibatch step by mask enumeration."""
    dim = z.shape[0]
    total = np.zeros_like(z)
    count = 0
    for combo in combinations(range(dim), batch):
        pz = np.zeros(dim)
        pz[list(combo)] = z[list(combo)]
        total += z - (eta / batch) * (jacobian @ (jacobian.T @ pz))
        count += 1
    return total / count


def enumerated_covariance_step(
    sigma: np.ndarray, jacobian: np.ndarray, eta: float, batch: int
) -> np.ndarray:
    """Exact E_P[M_P Sigma M_P^T] with M_P = I - (eta/B) J J^T P, by
    enumerating masks.  Linear in Sigma, so valid for any PSD input."""
    dim = sigma.shape[0]
    gram = jacobian @ jacobian.T
    total = np.zeros_like(sigma)
    count = 0
    for combo in combinations(range(dim), batch):
        p = np.zeros((dim, dim))
        p[list(combo), list(combo)] = 1.0
        step = np.eye(dim) - (eta / batch) * gram @ p
        total += step @ sigma @ step.T
        count += 1
    return total / count


def mc_covariance_after_step(
    z: np.ndarray,
    jacobian: np.ndarray,
    eta: float,
    batch: int,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean/per-entry sigma of z' z'^T after one masked step
    from a fixed residual z, over n sampled masks."""
    dim = z.shape[0]
    idx = mask_index_batch(dim, batch, n, rng)
    zsel = np.zeros((n, dim))
    rows = np.arange(n)[:, None]
    zsel[rows, idx] = z[idx]
    z1 = z[None, :] - (eta / batch) * (zsel @ (jacobian @ jacobian.T).T)
    mean = z1.T @ z1 / n
    sq_mean = np.einsum("ni,nj->ij", z1**2, z1**2) / n
    var = np.maximum(sq_mean - mean**2, 0.0)
    return mean, np.sqrt(var / n)


def dense_qrm_step(
    z: np.ndarray,
    jacobian: np.ndarray,
    dense_q: np.ndarray,
    indices: np.ndarray,
    eta: float,
    batch: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic-model step evaluated through the materialized D x P x P
    curvature tensor."""
    pz = np.zeros_like(z)
    pz[indices] = z[indices]
    u = jacobian.T @ pz
    quad = np.einsum("dpq,p,q->d", dense_q, u, u)
    z_next = z - (eta / batch) * (jacobian @ u) + (eta**2 / (2.0 * batch**2)) * quad
    j_next = jacobian - (eta / batch) * np.einsum("dpq,q->dp", dense_q, u)
    return z_next, j_next


def random_psd(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((dim, dim + 2))
    return g @ g.T / dim
