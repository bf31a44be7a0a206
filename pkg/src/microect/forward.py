"""P1 finite-element forward model for planar capacitance measurements.

Each electrode is driven at 1 V with every other electrode held at 0 V and
zero normal flux on the rest of the outer boundary.  The charge on a sensing
electrode is read off the unconstrained stiffness residual, so the mutual
capacitance between a driven electrode ``i`` and a sensing electrode ``j``
is ``C_ij = -Q_j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import DomainSpec, Mesh, PixelElementMap, build_mesh, pixel_element_map

MAX_OFFSET = 5


class InvalidInputError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


class DegenerateCalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalPermittivity:
    eps_background: float = 2.0
    eps_inclusion: float = 2.6

    def __post_init__(self):
        if not (self.eps_background > 0 and self.eps_inclusion > 0):
            raise InvalidInputError("permittivities must be positive")
        if self.eps_background == self.eps_inclusion:
            raise InvalidInputError("inclusion and background permittivity must differ")

    @property
    def contrast(self) -> float:
        return self.eps_inclusion - self.eps_background

    def to_dict(self) -> dict:
        return {"eps_background": self.eps_background, "eps_inclusion": self.eps_inclusion}


def check_image(image: np.ndarray, shape: tuple[int, int] = (100, 200)) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(shape):
        raise InvalidInputError(f"image must be {shape}, got {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise InvalidInputError("image values must lie in [0, 1]")
    return image


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Assembled stiffness operator for one permittivity distribution."""

    K: sp.csr_matrix          # unconstrained, symmetric
    sigma: np.ndarray         # per-element permittivity
    mesh: Mesh

    @cached_property
    def K_ff(self) -> sp.csr_matrix:
        free = self.mesh.free_nodes
        return self.K[free][:, free].tocsr()

    @cached_property
    def K_fd(self) -> sp.csr_matrix:
        return self.K[self.mesh.free_nodes][:, self.mesh.dirichlet_nodes].tocsr()

    @cached_property
    def lu(self):
        return spla.splu(self.K_ff.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def dirichlet_values(self, drive: np.ndarray) -> np.ndarray:
        """Dirichlet node values for a batch of excitations.

        ``drive`` is ``(n_electrodes, n_rhs)``: the voltage on each electrode
        for each right-hand side.
        """
        sizes = [len(g) for g in self.mesh.electrode_nodes]
        return np.repeat(drive, sizes, axis=0)


@lru_cache(maxsize=8)
def _pattern(mesh: Mesh):
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    key = rows * mesh.n_nodes + cols
    uniq, inverse = np.unique(key, return_inverse=True)
    r = uniq // mesh.n_nodes
    c = uniq % mesh.n_nodes
    indptr = np.searchsorted(r, np.arange(mesh.n_nodes + 1))
    return inverse, c, indptr


def assemble_sigma(mesh: Mesh, sigma: np.ndarray) -> SparseSystem:
    """Assemble K from per-element permittivity coefficients."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (len(mesh.triangles),):
        raise InvalidInputError("sigma must have one entry per triangle")
    inverse, cols, indptr = _pattern(mesh)
    vals = (mesh.local_stiffness * sigma[:, None, None]).ravel()
    data = np.bincount(inverse, weights=vals, minlength=cols.size)
    K = sp.csr_matrix((data, cols, indptr), shape=(mesh.n_nodes, mesh.n_nodes))
    return SparseSystem(K=K, sigma=sigma, mesh=mesh)


def element_sigma(image: np.ndarray, phys: PhysicalPermittivity, pmap: PixelElementMap) -> np.ndarray:
    frac = pmap.image_to_elements(image, fill=0.0)
    return phys.eps_background + frac * phys.contrast


def assemble(mesh: Mesh, image: np.ndarray, phys: PhysicalPermittivity,
             pmap: PixelElementMap) -> SparseSystem:
    image = check_image(image, pmap.image_shape)
    return assemble_sigma(mesh, element_sigma(image, phys, pmap))


@lru_cache(maxsize=4)
def _homogeneous_lu(mesh: Mesh):
    """Factorization of the unit-permittivity operator on the free nodes."""
    return assemble_sigma(mesh, np.ones(len(mesh.triangles))).lu


def _pcg(A: sp.csr_matrix, B: np.ndarray, X0: np.ndarray, tol: float, maxiter: int,
         precond=None) -> np.ndarray:
    """Preconditioned conjugate gradients, one independent run per column.

    Columns share matrix products but keep their own step sizes and stop
    individually once ``||r|| <= tol * ||b||``.  ``precond`` maps a block of
    residuals to a block of search directions; Jacobi scaling if omitted.
    """
    if precond is None:
        dinv = 1.0 / A.diagonal()
        precond = lambda R: dinv[:, None] * R
    X = X0.copy()
    R = B - A @ X
    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0] = 1.0
    Z = precond(R)
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    active = np.linalg.norm(R, axis=0) > tol * bnorm
    it = 0
    while active.any():
        if it >= maxiter:
            worst = float(np.max(np.linalg.norm(R, axis=0) / bnorm))
            raise ConvergenceError(f"CG did not converge in {maxiter} iterations", worst)
        cols = np.flatnonzero(active)
        Pa = P[:, cols]
        AP = A @ Pa
        alpha = rz[cols] / np.einsum("ij,ij->j", Pa, AP)
        X[:, cols] += alpha * Pa
        R[:, cols] -= alpha * AP
        Za = precond(R[:, cols])
        rz_new = np.einsum("ij,ij->j", R[:, cols], Za)
        P[:, cols] = Za + (rz_new / rz[cols]) * Pa
        rz[cols] = rz_new
        active[cols] = np.linalg.norm(R[:, cols], axis=0) > tol * bnorm[cols]
        it += 1
    return X


def solve_potentials(sys: SparseSystem, drive: np.ndarray, solver: str = "cg",
                     tol: float = 1e-10, maxiter: int | None = None,
                     precond: str = "homogeneous") -> np.ndarray:
    """Node potentials for each column of ``drive`` (electrode voltages).

    Returns an ``(n_nodes, n_rhs)`` array.  With ``solver="cg"`` the default
    preconditioner is the factorized unit-permittivity operator, which is
    spectrally equivalent to K within the permittivity ratio, so CG needs a
    handful of iterations.  ``precond="jacobi"`` is the diagonal fallback.
    """
    mesh = sys.mesh
    drive = np.asarray(drive, dtype=np.float64)
    if drive.ndim == 1:
        drive = drive[:, None]
    g = sys.dirichlet_values(drive)
    rhs = -(sys.K_fd @ g)
    if solver == "cg":
        if maxiter is None:
            maxiter = 20 * mesh.n_nodes
        if precond == "homogeneous":
            M = _homogeneous_lu(mesh).solve
        elif precond == "jacobi":
            M = None
        else:
            raise ValueError(f"unknown preconditioner {precond!r}")
        u_free = _pcg(sys.K_ff, rhs, np.zeros_like(rhs), tol, maxiter, M)
    elif solver == "direct":
        u_free = sys.lu.solve(rhs)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    U = np.empty((mesh.n_nodes, drive.shape[1]))
    U[mesh.free_nodes] = u_free
    U[mesh.dirichlet_nodes] = g
    return U


def solve_excitation(sys: SparseSystem, mesh: Mesh, i: int, solver: str = "cg",
                     tol: float = 1e-10, maxiter: int | None = None,
                     precond: str = "homogeneous") -> np.ndarray:
    """Potential field with electrode ``i`` at 1 V and all others at 0 V."""
    n = mesh.n_electrodes
    if not 0 <= i < n:
        raise IndexError(f"electrode index {i} out of range for {n} electrodes")
    drive = np.zeros(n)
    drive[i] = 1.0
    return solve_potentials(sys, drive, solver=solver, tol=tol, maxiter=maxiter,
                            precond=precond)[:, 0]


def solve_all_excitations(sys: SparseSystem, solver: str = "cg", tol: float = 1e-10,
                          maxiter: int | None = None, precond: str = "homogeneous") -> np.ndarray:
    """``(n_nodes, n_electrodes)`` potentials, column ``i`` drives electrode ``i``."""
    return solve_potentials(sys, np.eye(sys.mesh.n_electrodes), solver=solver,
                            tol=tol, maxiter=maxiter, precond=precond)


def electrode_charge(sys: SparseSystem, u: np.ndarray, j: int) -> float:
    """Charge on electrode ``j``: sum of ``(K u)`` over its nodes."""
    nodes = sys.mesh.electrode_nodes[j]
    return float((sys.K[nodes] @ u).sum())


def electrode_charges(sys: SparseSystem, U: np.ndarray) -> np.ndarray:
    """Charges on every electrode for every excitation column, ``(n_el, n_rhs)``."""
    KU = sys.K @ U
    return np.stack([KU[g].sum(axis=0) for g in sys.mesh.electrode_nodes])


def charge_balance(sys: SparseSystem, u: np.ndarray) -> dict:
    """Split of the nodal residual ``K u`` into electrode charge, outer-boundary
    flux and interior residual.  The three sum to ``1^T K u``."""
    mesh = sys.mesh
    r = sys.K @ u
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    on_boundary[mesh.boundary_nodes] = True
    is_electrode = np.zeros(mesh.n_nodes, dtype=bool)
    is_electrode[mesh.dirichlet_nodes] = True
    return {
        "electrode_charges": np.array([r[g].sum() for g in mesh.electrode_nodes]),
        "outer_flux": float(r[on_boundary & ~is_electrode].sum()),
        "interior_residual": float(r[~on_boundary].sum()),
    }


def mutual_capacitances(sys: SparseSystem, solver: str = "cg", tol: float = 1e-10) -> np.ndarray:
    """Full ``(n, n)`` matrix with ``C[i, j] = -Q_j`` when electrode ``i`` is driven.

    Diagonal entries hold the (positive) self-charge of the driven electrode.
    """
    U = solve_all_excitations(sys, solver=solver, tol=tol)
    Q = electrode_charges(sys, U)          # Q[j, i]: charge on j when i driven
    C = -Q.T
    np.fill_diagonal(C, np.diag(Q))
    return C


def measurement_mask(m: int, n: int) -> np.ndarray:
    """Boolean ``(m, n)`` mask of entries that correspond to a real pair."""
    d = np.arange(1, m + 1)[:, None]
    i = np.arange(n)[None, :]
    return i + d <= n - 1


def measurement_pairs(m: int, n: int) -> list[tuple[int, int]]:
    """Electrode pairs ``(i, i + d)`` in row-major order of the valid entries."""
    return [(i, i + d) for d in range(1, m + 1) for i in range(n) if i + d <= n - 1]


def pack_offsets(C: np.ndarray, max_offset: int = MAX_OFFSET) -> np.ndarray:
    """Arrange a full mutual-capacitance matrix into the ``(m, n)`` offset layout."""
    n = C.shape[0]
    out = np.zeros((max_offset, n))
    for d in range(1, max_offset + 1):
        i = np.arange(n - d)
        out[d - 1, : n - d] = C[i, i + d]
    return out


def capacitance_matrix(mesh: Mesh, image: np.ndarray, phys: PhysicalPermittivity,
                       max_offset: int = MAX_OFFSET, pmap: PixelElementMap | None = None,
                       spec: DomainSpec | None = None, solver: str = "cg",
                       tol: float = 1e-10) -> np.ndarray:
    """Raw ``(max_offset, n)`` capacitance matrix; entry ``(d-1, i) = C_{i, i+d}``."""
    if pmap is None:
        if spec is None:
            raise ValueError("either pmap or spec is required")
        pmap = pixel_element_map(mesh, spec)
    sys = assemble(mesh, image, phys, pmap)
    return pack_offsets(mutual_capacitances(sys, solver=solver, tol=tol), max_offset)


def normalize(c: np.ndarray, c_empty: np.ndarray, c_full: np.ndarray) -> np.ndarray:
    """Full/empty calibration ``(c - c_empty) / (c_full - c_empty)``; padding stays 0."""
    c = np.asarray(c, dtype=np.float64)
    mask = measurement_mask(*c_empty.shape)
    span = c_full - c_empty
    if np.any(np.abs(span[mask]) < 1e-15):
        raise DegenerateCalibrationError("full and empty references coincide")
    out = np.zeros(np.broadcast_shapes(c.shape, mask.shape))
    out[..., mask] = (c[..., mask] - c_empty[mask]) / span[mask]
    return out


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Mesh, pixel map and calibration for one domain, reused across samples."""

    spec: DomainSpec
    phys: PhysicalPermittivity
    mesh: Mesh
    pmap: PixelElementMap
    solver: str = "direct"
    max_offset: int = MAX_OFFSET

    @classmethod
    def create(cls, spec: DomainSpec | None = None, phys: PhysicalPermittivity | None = None,
               solver: str = "direct", max_offset: int = MAX_OFFSET) -> "ForwardModel":
        spec = spec or DomainSpec()
        phys = phys or PhysicalPermittivity()
        mesh = build_mesh(spec)
        return cls(spec, phys, mesh, pixel_element_map(mesh, spec), solver, max_offset)

    def raw(self, image: np.ndarray) -> np.ndarray:
        return capacitance_matrix(self.mesh, image, self.phys, self.max_offset,
                                  pmap=self.pmap, solver=self.solver)

    @cached_property
    def c_empty(self) -> np.ndarray:
        return self.raw(np.zeros(self.spec.image_shape))

    @cached_property
    def c_full(self) -> np.ndarray:
        return self.raw(np.ones(self.spec.image_shape))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """Normalized capacitance matrix of an image."""
        return normalize(self.raw(image), self.c_empty, self.c_full)
