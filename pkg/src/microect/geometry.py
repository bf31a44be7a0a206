"""Imaging domain, electrode layout and structured triangulation.

Coordinates are ``(z, y)`` in micrometres: ``z`` is the height above the
sensor surface (``z = 0`` is the electrode plane) and ``y`` the lateral
position.  The imaging window spans ``y in [0, width]`` and
``z in [0, depth]``; the simulation domain adds background padding on both
sides and on top.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class InvalidSpecError(ValueError):
    """Raised when a :class:`DomainSpec` violates its invariants."""


@dataclass(frozen=True)
class DomainSpec:
    width_um: float = 200.0
    depth_um: float = 100.0
    pad_side_um: float = 50.0
    pad_top_um: float = 50.0
    n_electrodes: int = 20
    pitch_um: float = 10.0
    electrode_width_um: float = 8.0
    elements_per_um: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lengths = {
            "width_um": self.width_um,
            "depth_um": self.depth_um,
            "pad_side_um": self.pad_side_um,
            "pad_top_um": self.pad_top_um,
            "pitch_um": self.pitch_um,
            "electrode_width_um": self.electrode_width_um,
        }
        for name, value in lengths.items():
            if not value > 0:
                raise InvalidSpecError(f"{name} must be positive, got {value}")
        if self.n_electrodes < 1:
            raise InvalidSpecError("n_electrodes must be >= 1")
        if self.elements_per_um < 1 or int(self.elements_per_um) != self.elements_per_um:
            raise InvalidSpecError("elements_per_um must be a positive integer")
        if not np.isclose(self.n_electrodes * self.pitch_um, self.width_um):
            raise InvalidSpecError(
                f"n_electrodes * pitch_um = {self.n_electrodes * self.pitch_um} "
                f"must equal width_um = {self.width_um}"
            )
        if not self.electrode_width_um < self.pitch_um:
            raise InvalidSpecError("electrode_width_um must be smaller than pitch_um")
        # the structured grid must land on every boundary and on the pixel grid
        for name in ("width_um", "depth_um", "pad_side_um", "pad_top_um"):
            cells = getattr(self, name) * self.elements_per_um
            if not np.isclose(cells, round(cells)):
                raise InvalidSpecError(f"{name} is not a whole number of mesh cells")
        if not (np.isclose(self.width_um, round(self.width_um))
                and np.isclose(self.depth_um, round(self.depth_um))):
            raise InvalidSpecError("imaging window must be a whole number of 1 um pixels")

    @property
    def image_shape(self) -> tuple[int, int]:
        """(rows, cols) of the permittivity image: rows are depth, cols lateral."""
        return int(round(self.depth_um)), int(round(self.width_um))

    def electrode_span(self, k: int) -> tuple[float, float]:
        gap = self.pitch_um - self.electrode_width_um
        lo = k * self.pitch_um + 0.5 * gap
        return lo, lo + self.electrode_width_um

    def to_dict(self) -> dict:
        return {
            "width_um": self.width_um,
            "depth_um": self.depth_um,
            "pad_side_um": self.pad_side_um,
            "pad_top_um": self.pad_top_um,
            "n_electrodes": self.n_electrodes,
            "pitch_um": self.pitch_um,
            "electrode_width_um": self.electrode_width_um,
            "elements_per_um": self.elements_per_um,
        }


INSULATING = -1


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured right-triangle mesh of the padded rectangle.

    Nodes are stored row-major on an ``(nz, ny)`` grid, ``z`` fastest-varying
    rows.  Cell ``(r, c)`` owns triangles ``2*(r*(ny-1)+c)`` and ``+1``.
    """

    nodes: np.ndarray             # (n_nodes, 2) as (z, y)
    triangles: np.ndarray         # (n_tri, 3), counter-clockwise in (z, y)
    electrode_nodes: tuple        # per electrode: node indices on z = 0
    boundary_nodes: np.ndarray    # all outer-boundary nodes
    boundary_kind: np.ndarray     # electrode index or INSULATING, aligned with boundary_nodes
    grid_shape: tuple[int, int]   # (nz, ny) node counts
    h: float                      # node spacing, um
    y0: float                     # lateral coordinate of node column 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_nodes)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """Geometry-only P1 element matrices, ``(n_tri, 3, 3)``.

        Entry ``[e, a, b]`` is the integral over element ``e`` of
        ``grad(phi_a) . grad(phi_b)``.
        """
        p = self.nodes[self.triangles]
        # edge opposite each vertex, rotated by 90 degrees gives area-scaled gradients
        edges = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        return np.einsum("eak,ebk->eab", edges, edges) / (4.0 * self.areas)[:, None, None]

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.concatenate(self.electrode_nodes)

    @cached_property
    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.dirichlet_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def mirror_nodes(self) -> np.ndarray:
        """Node permutation for the lateral mirror about the window centre."""
        nz, ny = self.grid_shape
        idx = np.arange(nz * ny).reshape(nz, ny)
        return idx[:, ::-1].ravel()

    def electrode_of(self) -> np.ndarray:
        """Per-node electrode index, ``INSULATING`` for non-electrode nodes."""
        tags = np.full(self.n_nodes, INSULATING, dtype=np.int64)
        for k, nodes in enumerate(self.electrode_nodes):
            tags[nodes] = k
        return tags


def build_mesh(spec: DomainSpec) -> Mesh:
    spec.validate()
    res = int(spec.elements_per_um)
    h = 1.0 / res
    nz = int(round((spec.depth_um + spec.pad_top_um) * res)) + 1
    ny = int(round((spec.width_um + 2 * spec.pad_side_um) * res)) + 1
    z = np.arange(nz) * h
    y = np.arange(ny) * h - spec.pad_side_um
    zz, yy = np.meshgrid(z, y, indexing="ij")
    nodes = np.column_stack([zz.ravel(), yy.ravel()])

    idx = np.arange(nz * ny).reshape(nz, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    # interleave so that cell k owns triangles 2k and 2k+1
    triangles = np.empty((2 * a.size, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([a, c, d])
    triangles[1::2] = np.column_stack([a, d, b])

    tol = 1e-9 * max(1.0, spec.width_um)
    bottom = idx[0]
    electrode_nodes = []
    for k in range(spec.n_electrodes):
        lo, hi = spec.electrode_span(k)
        sel = (y >= lo - tol) & (y <= hi + tol)
        electrode_nodes.append(bottom[sel].copy())

    boundary = np.unique(np.concatenate([idx[0], idx[-1], idx[:, 0], idx[:, -1]]))
    kind = np.full(boundary.size, INSULATING, dtype=np.int64)
    pos = {node: i for i, node in enumerate(boundary)}
    for k, group in enumerate(electrode_nodes):
        for node in group:
            kind[pos[node]] = k

    return Mesh(
        nodes=nodes,
        triangles=triangles,
        electrode_nodes=tuple(electrode_nodes),
        boundary_nodes=boundary,
        boundary_kind=kind,
        grid_shape=(nz, ny),
        h=h,
        y0=-spec.pad_side_um,
    )


@dataclass(frozen=True, eq=False)
class PixelElementMap:
    """Overlap between 1 um image pixels and mesh triangles.

    ``overlap`` is a sparse ``(n_pixels, n_triangles)`` matrix of overlap
    areas in um^2.  Two normalisations are exposed:

    * ``element_fraction``: share of each triangle's area lying in a pixel;
      columns sum to 1 for triangles inside the window.  This is the weight
      that maps pixel values onto element coefficients.
    * ``pixel_fraction``: share of each pixel's area covered by a triangle;
      rows sum to 1.
    """

    overlap: sp.csr_matrix
    image_shape: tuple[int, int]
    areas: np.ndarray

    @cached_property
    def element_fraction(self) -> sp.csr_matrix:
        return (self.overlap @ sp.diags(1.0 / self.areas)).tocsr()

    @cached_property
    def pixel_fraction(self) -> sp.csr_matrix:
        # pixels are 1 um x 1 um
        return self.overlap.copy()

    @cached_property
    def window_elements(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.overlap.sum(axis=0)).ravel() > 0)

    def pixel_entries(self, row: int, col: int) -> list[tuple[int, float]]:
        """(element, pixel-area fraction) pairs for one pixel."""
        p = row * self.image_shape[1] + col
        start, stop = self.overlap.indptr[p], self.overlap.indptr[p + 1]
        return list(zip(self.overlap.indices[start:stop].tolist(),
                        self.overlap.data[start:stop].tolist()))

    def image_to_elements(self, image: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Per-element value from a pixel image; elements outside the window get ``fill``."""
        vals = self.element_fraction.T @ np.asarray(image, dtype=np.float64).ravel()
        out = np.full(self.areas.size, fill, dtype=np.float64)
        out[self.window_elements] = vals[self.window_elements]
        return out

    def elements_to_pixels(self, values: np.ndarray) -> np.ndarray:
        """Chain-rule aggregation of per-element quantities onto pixels."""
        return (self.element_fraction @ values).reshape(self.image_shape)


def pixel_element_map(mesh: Mesh, spec: DomainSpec) -> PixelElementMap:
    rows, cols = spec.image_shape
    res = int(spec.elements_per_um)
    nz, ny = mesh.grid_shape
    ncell_y = ny - 1
    off = int(round(spec.pad_side_um * res))  # first window cell column

    # each pixel covers res x res cells, two triangles per cell, each of area h^2/2
    pr, pc, sr, sc = np.meshgrid(np.arange(rows), np.arange(cols),
                                 np.arange(res), np.arange(res), indexing="ij")
    cell_r = pr * res + sr
    cell_c = off + pc * res + sc
    cell = (cell_r * ncell_y + cell_c).ravel()
    pixel = (pr * cols + pc).ravel()
    tri = np.concatenate([2 * cell, 2 * cell + 1])
    pix = np.concatenate([pixel, pixel])
    area = np.full(tri.size, 0.5 * mesh.h ** 2)
    overlap = sp.csr_matrix((area, (pix, tri)), shape=(rows * cols, len(mesh.triangles)))
    overlap.sort_indices()
    return PixelElementMap(overlap=overlap, image_shape=(rows, cols), areas=mesh.areas.copy())
