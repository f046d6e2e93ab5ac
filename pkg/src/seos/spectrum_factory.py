"""Benchmark NTK spectrum families for stability-approximation studies.

Three families with qualitatively different failure modes for the
kernel-norm approximations:

* ``IidGaussianJacobian``: J with i.i.d. standard normal entries; the NTK
  spectrum is Marchenko-Pastur-like ("flat") and the eigenvectors are
  delocalized.  Approximations work best here.
* ``Dispersed``: eigenvalues 1/(a^2 + 1) for a = 1..D with Haar-random
  eigenvectors; a wide spread of eigenvalues separates the trace and
  high-dimensional approximators from the exact kernel norm.
* ``LocalizedEigenvectors``: kernel diag(|s|) + J0 J0^T / D, which pins
  eigenvectors to the coordinate basis and breaks even the exact
  diagonal-restriction kernel norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .second_moment import SpectrumDecomposition, decompose_kernel, decompose_ntk


@dataclass(frozen=True)
class IidGaussianJacobian:
    dim: int
    params: int

    def describe(self) -> dict:
        return {"family": "iid_gaussian", "D": self.dim, "P": self.params}


@dataclass(frozen=True)
class Dispersed:
    """Eigenvalues 1/(a^2 + 1), indexed from a = 1 (largest 1/2), Haar basis."""

    dim: int

    def describe(self) -> dict:
        return {"family": "dispersed", "D": self.dim, "index_origin": 1}


@dataclass(frozen=True)
class LocalizedEigenvectors:
    """Kernel diag(|s|) + J0 J0^T / D with s ~ N(0, sigma_s^2), J0 unit-variance i.i.d."""

    dim: int
    params: int
    sigma_s: float = 0.1

    def describe(self) -> dict:
        return {
            "family": "localized",
            "D": self.dim,
            "P": self.params,
            "sigma_s": self.sigma_s,
            "j0_entry_std": 1.0,
        }


SpectrumSpec = Union[IidGaussianJacobian, Dispersed, LocalizedEigenvectors]


@dataclass(frozen=True)
class GeneratedSpectrum:
    spectrum: SpectrumDecomposition
    jacobian: Optional[np.ndarray]  # present only for the Jacobian-backed family
    metadata: dict


def haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-fixed QR.

    Raw QR of a Gaussian matrix is not Haar; rescaling each column by the
    sign of the corresponding diagonal entry of R fixes the distribution.
    """
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


def generate(spec: SpectrumSpec, rng: np.random.Generator) -> GeneratedSpectrum:
    """Realize a spectrum family with the given random stream."""
    if isinstance(spec, IidGaussianJacobian):
        if spec.dim < 2:
            raise ValueError("need D >= 2")
        j = rng.standard_normal((spec.dim, spec.params))
        return GeneratedSpectrum(decompose_ntk(j), j, spec.describe())
    if isinstance(spec, Dispersed):
        if spec.dim < 2:
            raise ValueError("need D >= 2")
        alpha = np.arange(1, spec.dim + 1, dtype=float)
        lam = 1.0 / (alpha**2 + 1.0)
        v = haar_orthogonal(spec.dim, rng)
        return GeneratedSpectrum(SpectrumDecomposition(lam, v), None, spec.describe())
    if isinstance(spec, LocalizedEigenvectors):
        if spec.dim < 2:
            raise ValueError("need D >= 2")
        if spec.sigma_s <= 0:
            raise ValueError("sigma_s must be positive")
        s = rng.normal(0.0, spec.sigma_s, size=spec.dim)
        j0 = rng.standard_normal((spec.dim, spec.params))
        kernel = np.diag(np.abs(s)) + j0 @ j0.T / spec.dim
        return GeneratedSpectrum(decompose_kernel(kernel), None, spec.describe())
    raise TypeError(f"unknown spectrum spec: {spec!r}")
