"""Linearised sensitivity matrix and classical reconstruction baselines.

Rows of the sensitivity matrix follow the row-major order of the valid
(non-padded) capacitance entries, see :func:`microect.forward.measurement_pairs`.
Columns are image pixels in row-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .forward import (ForwardModel, PhysicalPermittivity, assemble,
                      measurement_mask, measurement_pairs, solve_all_excitations)
from .geometry import DomainSpec

SENS_MAGIC = b"ECTJ"
SENS_VERSION = 1


class SensitivityFormatError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


@dataclass
class SensitivityMatrix:
    J: np.ndarray                     # (K, P) float64
    m: int = 5
    n: int = 20
    image_shape: tuple[int, int] = (100, 200)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return measurement_pairs(self.m, self.n)

    def flatten(self, c: np.ndarray) -> np.ndarray:
        """Valid entries of an ``(m, n)`` matrix in row order of ``J``."""
        return np.asarray(c, dtype=np.float64)[measurement_mask(self.m, self.n)]

    def row(self, i: int, j: int) -> np.ndarray:
        """Sensitivity image of pair ``(i, j)`` (0-based, ``i < j``)."""
        return self.J[self.pairs.index((i, j))].reshape(self.image_shape)


def sensitivity_matrix(domain_spec: DomainSpec | None = None,
                       phys: PhysicalPermittivity | None = None,
                       max_offset: int = 5, solver: str = "direct") -> SensitivityMatrix:
    """Adjoint sensitivity of normalized capacitances at the empty background.

    With unit-excitation potentials ``u_i`` and ``u_j``, the raw derivative of
    ``C_ij`` with respect to the permittivity of element ``e`` is
    ``-integral_e grad(u_i) . grad(u_j)``; scaling by the inclusion contrast,
    aggregating onto pixels and dividing by the full/empty span gives the
    derivative of the normalized measurement with respect to a pixel value.
    """
    fm = ForwardModel.create(domain_spec, phys, solver=solver, max_offset=max_offset)
    mesh = fm.mesh
    sys = assemble(mesh, np.zeros(fm.spec.image_shape), fm.phys, fm.pmap)
    U = solve_all_excitations(sys, solver=solver)
    Ue = U[mesh.triangles]                       # (T, 3, n)
    GU = np.einsum("eab,ebk->eak", mesh.local_stiffness, Ue)
    n = mesh.n_electrodes
    pairs = measurement_pairs(max_offset, n)
    span = fm.c_full - fm.c_empty
    rows = []
    for i, j in pairs:
        s_elem = -fm.phys.contrast * np.einsum("ea,ea->e", Ue[:, :, j], GU[:, :, i])
        d = j - i
        rows.append(fm.pmap.elements_to_pixels(s_elem).ravel() / span[d - 1, i])
    return SensitivityMatrix(np.array(rows), max_offset, n, fm.spec.image_shape)


def _as_vector(c_meas, J: SensitivityMatrix) -> np.ndarray:
    c = np.asarray(c_meas, dtype=np.float64)
    if c.shape == (J.m, J.n):
        return J.flatten(c)
    if c.shape == (J.J.shape[0],):
        return c
    raise ValueError(f"measurement shape {c.shape} does not match J with {J.J.shape[0]} rows")


def default_mu(J: SensitivityMatrix) -> float:
    """``1e-2`` times the mean diagonal of ``J^T J``."""
    return 1e-2 * float(np.mean(np.sum(J.J ** 2, axis=0)))


def tikhonov_iterative(c_meas, J: SensitivityMatrix, mu: float | None = None, iters: int = 200,
                       return_residuals: bool = False):
    """Projected iterated Tikhonov starting from the empty image.

    Each step adds ``(J^T J + mu I)^-1 J^T (c - J s)`` and clamps to [0, 1].
    The inverse is applied as ``J^T (J J^T + mu I)^-1``, factorised once.
    """
    c = _as_vector(c_meas, J)
    A = J.J
    mu = default_mu(J) if mu is None else mu
    try:
        factor = scipy.linalg.cho_factor(A @ A.T + mu * np.eye(A.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"Tikhonov factorisation failed: {exc}") from exc
    sigma = np.zeros(A.shape[1])
    residuals = [float(np.linalg.norm(c))]
    for _ in range(iters):
        r = c - A @ sigma
        sigma = np.clip(sigma + A.T @ scipy.linalg.cho_solve(factor, r), 0.0, 1.0)
        residuals.append(float(np.linalg.norm(c - A @ sigma)))
    img = sigma.reshape(J.image_shape)
    return (img, residuals) if return_residuals else img


def spectral_norm(A: np.ndarray, steps: int = 50) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    s = 0.0
    for _ in range(steps):
        w = A.T @ (A @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        s = np.sqrt(nrm)
    return float(s)


def landweber(c_meas, J: SensitivityMatrix, alpha: float | None = None, iters: int = 500,
              return_residuals: bool = False):
    """Projected Landweber iteration from the empty image, step ``1.9 / ||J||^2``."""
    c = _as_vector(c_meas, J)
    A = J.J
    if alpha is None:
        alpha = 1.9 / spectral_norm(A) ** 2
    sigma = np.zeros(A.shape[1])
    residuals = [float(np.linalg.norm(c))]
    for _ in range(iters):
        sigma = np.clip(sigma + alpha * (A.T @ (c - A @ sigma)), 0.0, 1.0)
        residuals.append(float(np.linalg.norm(c - A @ sigma)))
    img = sigma.reshape(J.image_shape)
    return (img, residuals) if return_residuals else img


def linear_back_projection(c_meas, J: SensitivityMatrix) -> np.ndarray:
    """Min-max scaled ``J^T c``; a constant back-projection maps to zeros."""
    bp = J.J.T @ _as_vector(c_meas, J)
    lo, hi = bp.min(), bp.max()
    if hi - lo <= 0:
        return np.zeros(J.image_shape)
    return ((bp - lo) / (hi - lo)).reshape(J.image_shape)


BASELINES = {
    "tikhonov": tikhonov_iterative,
    "landweber": landweber,
    "lbp": linear_back_projection,
}


def write_sensitivity(J: SensitivityMatrix, path) -> None:
    """Magic, u32 version, u32 K, u32 P, then K*P little-endian float64 row-major."""
    A = np.ascontiguousarray(J.J, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(SENS_MAGIC + struct.pack("<III", SENS_VERSION, *A.shape))
        fh.write(A.tobytes())


def read_sensitivity(path, m: int = 5, n: int = 20,
                     image_shape: tuple[int, int] = (100, 200)) -> SensitivityMatrix:
    """Inverse of :func:`write_sensitivity`; the layout (m, n, image shape) is not
    stored in the file and must match the caller's domain."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise SensitivityFormatError("truncated header")
    if raw[:4] != SENS_MAGIC:
        raise SensitivityFormatError("bad magic: not a sensitivity file")
    version, k, p = struct.unpack("<III", raw[4:16])
    if version != SENS_VERSION:
        raise SensitivityFormatError(f"unsupported version {version}")
    if k != len(measurement_pairs(m, n)) or p != image_shape[0] * image_shape[1]:
        raise SensitivityFormatError(f"file holds a {k}x{p} matrix, expected "
                                     f"{len(measurement_pairs(m, n))}x{image_shape[0] * image_shape[1]}")
    if len(raw) != 16 + 8 * k * p:
        raise SensitivityFormatError(f"expected {16 + 8 * k * p} bytes, found {len(raw)}")
    A = np.frombuffer(raw, dtype="<f8", offset=16).reshape(k, p).astype(np.float64)
    return SensitivityMatrix(A, m, n, tuple(image_shape))
