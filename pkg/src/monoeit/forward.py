"""Shunt-electrode finite element forward model on the disk mesh.

Each electrode is collapsed to a single unknown so the potential is exactly
constant on it; driving a pattern injects a net current +I into electrode k
and -I into electrode k+1 with a zero-flux condition on the gaps.  The
reduced stiffness matrix is factorized once per conductivity field and
reused for all L current patterns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import DiskMesh


class ForwardError(RuntimeError):
    """Raised when the discrete forward problem cannot be solved."""


# ---------------------------------------------------------------------------
# conductivity fields and phantoms
# ---------------------------------------------------------------------------


@dataclass
class ConductivityField:
    """Piecewise constant conductivity, one value per triangle (S/m)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("conductivity must be finite and strictly positive")
        self.values = v

    def scaled(self, factor: float) -> "ConductivityField":
        return ConductivityField(self.values * factor)


@dataclass(frozen=True)
class Inclusion:
    """Disk or axis-aligned ellipse anomaly with a fixed contrast.

    polarity +1 raises the conductivity by ``contrast`` inside the shape,
    polarity -1 lowers it.  Points are tested against the closed region.
    """

    shape: str  # "disk" | "ellipse"
    center: tuple
    radii: tuple  # (rx, ry); a disk uses rx == ry
    contrast: float
    polarity: int

    def __post_init__(self):
        if self.shape not in ("disk", "ellipse"):
            raise ValueError(f"unknown inclusion shape {self.shape!r}")
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be +1 or -1")
        if self.contrast < 0:
            raise ValueError("contrast must be >= 0")
        if min(self.radii) <= 0:
            raise ValueError("inclusion radii must be positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        dx = points[:, 0] - self.center[0]
        dy = points[:, 1] - self.center[1]
        rx, ry = self.radii
        return (dx / rx) ** 2 + (dy / ry) ** 2 <= 1.0

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from points to the inclusion (0 inside).

        Exact for disks; for ellipses the boundary offset is approximated
        by growing both semi-axes, which is adequate for the coarse
        support bookkeeping it is used for.
        """
        dx = points[:, 0] - self.center[0]
        dy = points[:, 1] - self.center[1]
        rx, ry = self.radii
        if rx == ry:
            return np.maximum(np.hypot(dx, dy) - rx, 0.0)
        # radial shrink factor toward the ellipse along each direction
        t = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
        r = np.hypot(dx, dy)
        return np.where(t <= 1.0, 0.0, r * (1.0 - 1.0 / np.maximum(t, 1e-300)))


def disk_inclusion(center, radius, contrast, polarity) -> Inclusion:
    return Inclusion("disk", tuple(center), (radius, radius), contrast, polarity)


@dataclass
class PhantomSpec:
    """Homogeneous background plus a list of anomalies."""

    background: float
    inclusions: list

    def __post_init__(self):
        if self.background <= 0:
            raise ValueError("background conductivity must be positive")
        for inc in self.inclusions:
            if inc.polarity < 0 and inc.contrast >= self.background:
                raise ValueError(
                    "negative-polarity contrast must stay below the background "
                    "so the conductivity remains positive"
                )


def realize_phantom(mesh: DiskMesh, spec: PhantomSpec) -> ConductivityField:
    """Evaluate a phantom on the mesh: a triangle takes the anomalous value
    when its barycenter falls inside an inclusion, the background otherwise.

    Overlapping inclusions do not stack; each application assigns
    ``background +/- contrast`` outright, so later inclusions win inside
    an overlap.  Inclusions that capture no barycenter (entirely outside
    the disk, or smaller than the mesh can resolve) are rejected.
    """
    bary = mesh.triangle_barycenters()
    values = np.full(mesh.n_triangles, float(spec.background))
    for i, inc in enumerate(spec.inclusions):
        mask = inc.contains(bary)
        if not mask.any():
            raise ValueError(
                f"inclusion {i} lies outside the meshed disk or is below "
                "mesh resolution"
            )
        values[mask] = spec.background + inc.polarity * inc.contrast
    return ConductivityField(values)


# ---------------------------------------------------------------------------
# measurement frames
# ---------------------------------------------------------------------------


def adjacent_valid_mask(n_electrodes: int) -> np.ndarray:
    """True where a real adjacent-protocol device delivers entry (k, l),
    i.e. the measuring pair shares no electrode with the driving pair."""
    k = np.arange(n_electrodes)
    diff = np.abs(k[:, None] - k[None, :])
    diff = np.minimum(diff, n_electrodes - diff)
    return diff > 1


@dataclass
class MeasurementFrame:
    """One full cycle of adjacent-pair voltage measurements.

    ``U[k, l]`` is the voltage between electrodes l and l+1 while the
    current is driven through electrodes k and k+1 (indices modulo L).
    ``valid_mask`` marks the entries a physical device delivers; simulated
    frames populate every entry regardless.
    """

    L: int
    U: np.ndarray
    valid_mask: np.ndarray
    current_amplitude: float

    def copy(self) -> "MeasurementFrame":
        return MeasurementFrame(
            self.L, self.U.copy(), self.valid_mask.copy(), self.current_amplitude
        )


# ---------------------------------------------------------------------------
# element geometry helpers
# ---------------------------------------------------------------------------


def gradient_operator(mesh: DiskMesh) -> np.ndarray:
    """(M, 3, 2) array G with grad(u)|_T = sum_v u[tri[T, v]] * G[T, v]."""
    p = mesh.nodes[mesh.triangles]
    b = p[:, [1, 2, 0], 1] - p[:, [2, 0, 1], 1]
    c = p[:, [2, 0, 1], 0] - p[:, [1, 2, 0], 0]
    area = mesh.triangle_areas()
    g = np.stack([b, c], axis=2)
    return g / (2.0 * area)[:, None, None]


def element_gradients(mesh: DiskMesh, nodal: np.ndarray) -> np.ndarray:
    """Per-triangle gradients of one or more nodal fields.

    ``nodal`` has shape (n_nodes,) or (n_fields, n_nodes); the result has
    shape (M, 2) or (n_fields, M, 2).
    """
    G = gradient_operator(mesh)
    vals = nodal[..., mesh.triangles]  # (..., M, 3)
    return np.einsum("...mv,mvc->...mc", vals, G)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


class ForwardSolver:
    """Assembles and factorizes the shunt-model system for one field.

    The L pattern solves share the factorization; they are independent of
    each other, so callers may distribute them freely without affecting
    the results.
    """

    def __init__(self, mesh: DiskMesh, field: ConductivityField):
        if field.values.shape[0] != mesh.n_triangles:
            raise ValueError("conductivity field does not match the mesh")
        self.mesh = mesh
        self.field = field
        self.L = mesh.n_electrodes

        K = self._assemble(mesh, field.values)
        C = self._collapse_matrix(mesh)
        self._dof_of_node = self._node_dofs
        K_red = (C.T @ K @ C).tocsc()
        self.n_dofs = K_red.shape[0]
        # ground one unknown; the mean over electrode values is fixed later
        keep = np.arange(1, self.n_dofs)
        try:
            self._lu = splu(K_red[keep][:, keep])
        except RuntimeError as exc:  # pragma: no cover - defensive
            raise ForwardError(f"singular shunt system: {exc}") from exc

    def _assemble(self, mesh: DiskMesh, sigma: np.ndarray) -> sp.csr_matrix:
        tri = mesh.triangles
        p = mesh.nodes[tri]
        b = p[:, [1, 2, 0], 1] - p[:, [2, 0, 1], 1]
        c = p[:, [2, 0, 1], 0] - p[:, [1, 2, 0], 0]
        area = mesh.triangle_areas()
        kloc = (
            sigma[:, None, None]
            * (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
            / (4.0 * area)[:, None, None]
        )
        rows = np.repeat(tri, 3, axis=1)
        cols = np.tile(tri, (1, 3))
        K = sp.coo_matrix(
            (kloc.ravel(), (rows.ravel(), cols.ravel())),
            shape=(mesh.n_nodes, mesh.n_nodes),
        )
        return K.tocsr()

    def _collapse_matrix(self, mesh: DiskMesh) -> sp.csr_matrix:
        n = mesh.n_nodes
        dof = -np.ones(n, dtype=np.int64)
        for l, grp in enumerate(mesh.electrode_nodes):
            dof[grp] = l
        free = np.where(dof < 0)[0]
        dof[free] = self.L + np.arange(free.size)
        self._node_dofs = dof
        n_red = self.L + free.size
        return sp.coo_matrix(
            (np.ones(n), (np.arange(n), dof)), shape=(n, n_red)
        ).tocsr()

    def solve_pattern(self, k: int, current: float) -> np.ndarray:
        """Nodal potentials for pattern k (current in at electrode k, out at
        k+1), normalized so the mean of the electrode potentials is zero."""
        if not 0 <= k < self.L:
            raise ValueError(f"pattern index {k} out of range 0..{self.L - 1}")
        return self.solve_all(current, patterns=[k])[0]

    def solve_all(self, current: float, patterns=None) -> np.ndarray:
        """Nodal potentials for the requested patterns (default: all L)."""
        if current <= 0:
            raise ValueError("current must be positive")
        if patterns is None:
            patterns = range(self.L)
        patterns = list(patterns)
        rhs = np.zeros((self.n_dofs, len(patterns)))
        for col, k in enumerate(patterns):
            rhs[k, col] += current
            rhs[(k + 1) % self.L, col] -= current
        sol = np.zeros_like(rhs)
        sol[1:] = self._lu.solve(rhs[1:])
        if not np.all(np.isfinite(sol)):
            raise ForwardError("forward solve produced non-finite values")
        sol -= sol[: self.L].mean(axis=0)
        return sol[self._dof_of_node].T.copy()

    def electrode_potentials(self, nodal: np.ndarray) -> np.ndarray:
        """Electrode values of nodal potential vectors (..., n_nodes)."""
        reps = [grp[0] for grp in self.mesh.electrode_nodes]
        return nodal[..., reps]

    def measure(self, current: float) -> MeasurementFrame:
        nodal = self.solve_all(current)
        eu = self.electrode_potentials(nodal)  # (L, L): pattern x electrode
        U = eu - np.roll(eu, -1, axis=1)
        return MeasurementFrame(
            L=self.L,
            U=U,
            valid_mask=adjacent_valid_mask(self.L),
            current_amplitude=float(current),
        )


def solve_pattern(
    mesh: DiskMesh, field: ConductivityField, k: int, current: float
) -> np.ndarray:
    """One-off solve of a single current pattern; see ForwardSolver."""
    return ForwardSolver(mesh, field).solve_pattern(k, current)


def measure_full(
    mesh: DiskMesh, field: ConductivityField, current: float
) -> MeasurementFrame:
    """Simulate the full L x L measurement matrix for one conductivity.

    Every entry is computed; ``valid_mask`` records which of them a real
    adjacent-protocol device would deliver.
    """
    return ForwardSolver(mesh, field).measure(current)


def add_noise(frame: MeasurementFrame, level: float, seed: int) -> MeasurementFrame:
    """Perturb every entry with iid zero-mean Gaussian noise of standard
    deviation ``level * max|U|``; deterministic for a fixed seed."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    rng = np.random.default_rng(seed)
    scale = level * np.max(np.abs(frame.U))
    noisy = frame.U + rng.normal(0.0, 1.0, frame.U.shape) * scale
    return replace(frame, U=noisy, valid_mask=frame.valid_mask.copy())
