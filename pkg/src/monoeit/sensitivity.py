"""Discretized derivative of the measurements w.r.t. pixel conductivities.

For each pixel the L x L matrix S_k holds the first-order response of every
measurement entry to a unit conductivity increase on that pixel:

    S_k[j, l] = -(1/I) * integral over pixel k of grad(u_j) . grad(u_l)

with u_j the background potentials driven at current I.  The 1/I factor
makes S_k the actual Jacobian column of the voltage data at drive I (the
raw gradient integrals scale with I^2 while voltages scale with I).
Gradients of linear elements are constant per triangle, so the pixel
integrals are exact sums over the member triangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ConductivityField, ForwardSolver, element_gradients
from .geometry import DiskMesh, PixelGrid
from .protocol import DifferenceFrame


@dataclass
class SensitivityTensor:
    """Per-pixel measurement sensitivity matrices.

    ``columns[k]`` is the L x L response matrix of pixel k; ``matrix``
    exposes the same data as the L^2 x P system matrix whose vector
    indexing matches :func:`vectorize_frame`.
    """

    columns: np.ndarray  # (P, L, L)
    background: float
    current: float

    @property
    def n_pixels(self) -> int:
        return self.columns.shape[0]

    @property
    def L(self) -> int:
        return self.columns.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return vectorize(self)


def assemble_sensitivity(
    mesh: DiskMesh, grid: PixelGrid, sigma0: float, current: float
) -> SensitivityTensor:
    """Run the L background solves and accumulate per-pixel Gram matrices.

    Requires a homogeneous background ``sigma0`` and a mesh that already
    carries the triangle-to-pixel map of ``grid``.
    """
    if sigma0 <= 0:
        raise ValueError("background conductivity must be positive")
    if mesh.triangle_pixel is None:
        raise ValueError("mesh has no pixel map; call build_pixel_grid first")
    field = ConductivityField(np.full(mesh.n_triangles, float(sigma0)))
    solver = ForwardSolver(mesh, field)
    pots = solver.solve_all(current)  # (L, n_nodes)
    grads = element_gradients(mesh, pots)  # (L, M, 2)
    areas = mesh.triangle_areas()
    tp = mesh.triangle_pixel

    P = grid.n_pixels
    L = mesh.n_electrodes
    columns = np.zeros((P, L, L))
    for k in range(P):
        sel = np.where(tp == k)[0]
        g = grads[:, sel, :]
        columns[k] = -np.einsum("jtc,ltc,t->jl", g, g, areas[sel]) / current
    return SensitivityTensor(columns=columns, background=float(sigma0), current=float(current))


def vectorize(tensor: SensitivityTensor) -> np.ndarray:
    """Stack the pixel matrices into the L^2 x P system matrix.

    Column k is S_k flattened in column-major order, i.e. matrix entry
    (j, l) lands at vector position l*L + j, the same map used for the
    data vector.
    """
    P, L, _ = tensor.columns.shape
    return tensor.columns.transpose(0, 2, 1).reshape(P, L * L).T


def vectorize_frame(diff) -> np.ndarray:
    """Flatten an L x L difference matrix (or DifferenceFrame) into the
    L^2 data vector with entry (k, l) at position l*L + k."""
    V = diff.V if isinstance(diff, DifferenceFrame) else np.asarray(diff)
    return V.flatten(order="F")


def devectorize(vec: np.ndarray, L: int) -> np.ndarray:
    """Inverse of :func:`vectorize_frame`."""
    return np.asarray(vec).reshape(L, L, order="F")


def dump_sensitivity_text(tensor: SensitivityTensor, path) -> None:
    """Plain-text dump, one pixel block per section, for cross-checking."""
    P, L, _ = tensor.columns.shape
    with open(path, "w") as fh:
        fh.write("# sensitivity-tensor v1\n")
        fh.write(f"# pixels {P} electrodes {L} background {tensor.background!r} "
                 f"current {tensor.current!r}\n")
        for k in range(P):
            fh.write(f"# pixel {k}\n")
            for row in tensor.columns[k]:
                fh.write(" ".join(repr(v) for v in row) + "\n")
