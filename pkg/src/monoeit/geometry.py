"""Disk geometry: triangulated mesh, boundary electrodes, pixel partition.

The mesh generator produces a structured triangulation of a disk whose
boundary resolves ``L`` electrode arcs.  All angular positions are kept as
exact rational fractions of a full turn while the connectivity is built, so
the mesh is combinatorially invariant under rotation by ``2*pi/L``.  That
exact symmetry is what makes homogeneous-disk measurement matrices circulant
to solver precision, a property several downstream checks rely on.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

TWO_PI = 2.0 * math.pi


class MeshError(ValueError):
    """Raised for invalid mesh or pixel-grid construction parameters."""


# ---------------------------------------------------------------------------
# mesh and grid containers
# ---------------------------------------------------------------------------


@dataclass
class DiskMesh:
    """Conforming triangulation of a disk with electrode node groups.

    Attributes
    ----------
    nodes : (N, 2) float array
        Node coordinates in meters.
    triangles : (M, 3) int array
        Node-index triples, all positively oriented.
    radius : float
        Disk radius in meters.
    electrode_nodes : list of int arrays
        One array of boundary-node indices per electrode, ordered
        counterclockwise; electrode 0 is centered at angle 0.
    triangle_pixel : (M,) int array or None
        Triangle-to-pixel map filled in by :func:`build_pixel_grid`
        (-1 marks triangles outside every retained pixel).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    radius: float
    electrode_nodes: list
    triangle_pixel: np.ndarray | None = None
    _areas: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_nodes)

    def triangle_areas(self) -> np.ndarray:
        """Signed areas of all triangles (positive by construction)."""
        if self._areas is None:
            p = self.nodes[self.triangles]
            self._areas = 0.5 * (
                (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
            )
        return self._areas

    def triangle_barycenters(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


@dataclass
class PixelGrid:
    """Axis-aligned square pixels clipped to the disk, row-major indexing.

    Row 0 is the top of the image (largest y); only cells whose clipped
    area is nonzero are retained.  ``pixel_area`` holds the analytic
    square-disk intersection areas, ``mesh_area`` the total area of the
    triangles assigned to each pixel by the barycenter rule.
    """

    n_side: int
    radius: float
    cell_width: float
    pixel_centers: np.ndarray  # (P, 2) centers of the square cells
    pixel_area: np.ndarray  # (P,) analytic clipped areas
    mesh_area: np.ndarray  # (P,) summed member-triangle areas
    rows: np.ndarray  # (P,) row index of each retained pixel
    cols: np.ndarray  # (P,) column index

    @property
    def n_pixels(self) -> int:
        return self.pixel_centers.shape[0]

    def to_image(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-pixel values into a full n_side x n_side raster."""
        img = np.full((self.n_side, self.n_side), fill, dtype=float)
        img[self.rows, self.cols] = values
        return img


# ---------------------------------------------------------------------------
# analytic disk / rectangle intersection
# ---------------------------------------------------------------------------


def _arc_antiderivative(radius: float, x: float) -> float:
    # integral of sqrt(R^2 - t^2) from 0 to x
    x = min(max(x, -radius), radius)
    s = math.sqrt(max(radius * radius - x * x, 0.0))
    return 0.5 * (x * s + radius * radius * math.asin(min(max(x / radius, -1.0), 1.0)))


def _corner_area(radius: float, a: float, b: float) -> float:
    # area of {x <= a, y <= b} intersected with the origin-centered disk
    r = radius
    a = min(max(a, -r), r)
    if b <= -r or a <= -r:
        return 0.0
    P = lambda x: _arc_antiderivative(r, x)
    if b >= r:
        return 2.0 * (P(a) - P(-r))
    xb = math.sqrt(max(r * r - b * b, 0.0))
    if b >= 0.0:
        # column height is s(x) + min(b, s(x)) with s(x) = sqrt(r^2 - x^2)
        total = 0.0
        u0 = min(a, -xb)
        total += 2.0 * (P(u0) - P(-r))
        if a > -xb:
            u1 = min(a, xb)
            total += (P(u1) - P(-xb)) + b * (u1 + xb)
            if a > xb:
                total += 2.0 * (P(a) - P(xb))
        return total
    lo, hi = -xb, min(a, xb)
    if hi <= lo:
        return 0.0
    return (P(hi) - P(lo)) - (-b) * (hi - lo)


def disk_rect_area(radius: float, x0: float, x1: float, y0: float, y1: float) -> float:
    """Exact area of the intersection of an axis-aligned rectangle with the
    origin-centered disk of the given radius."""
    if x1 <= x0 or y1 <= y0:
        return 0.0
    g = _corner_area
    val = (
        g(radius, x1, y1)
        - g(radius, x0, y1)
        - g(radius, x1, y0)
        + g(radius, x0, y0)
    )
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------


def _boundary_angles(n_electrodes: int, arc_fraction: Fraction) -> list:
    """Exact boundary angles (in turns) resolving every electrode arc with
    two edges and every gap with roughly arc-sized segments."""
    L = n_electrodes
    half = arc_fraction / 2
    gap = Fraction(1, L) - arc_fraction
    n_seg = max(1, round(gap / arc_fraction))
    angles = []
    for k in range(L):
        c = Fraction(k, L)
        angles.extend([c - half, c, c + half])
        for j in range(1, n_seg):
            angles.append(c + half + gap * j / n_seg)
    angles = sorted(a % 1 for a in angles)
    if len(set(angles)) != len(angles):
        raise MeshError("electrode arcs overlap or touch; reduce arc fraction")
    return angles


def _zip_band(outer_idx, outer_ang, inner_idx, inner_ang):
    """Triangulate the band between two concentric node rings.

    Both angle lists are ascending exact fractions in [0, 1); the walk
    advances whichever ring has the smaller next angle, which keeps the
    band free of crossings and, for periodic inputs, rotation-symmetric.
    """
    p, q = len(outer_idx), len(inner_idx)
    # anchor on the inner node at or just behind the first outer angle so the
    # triangle pattern is invariant under rotations that permute both rings
    j0 = bisect_right(inner_ang, outer_ang[0]) - 1
    wrap0 = 0
    if j0 < 0:
        j0, wrap0 = q - 1, -1
    a_bar = [outer_ang[t % p] + t // p for t in range(p + 1)]
    b_bar = [inner_ang[(j0 + t) % q] + wrap0 + (j0 + t) // q for t in range(q + 1)]
    tris = []
    si = sj = 0
    while si < p or sj < q:
        if si < p and (sj >= q or a_bar[si + 1] <= b_bar[sj + 1]):
            tris.append(
                (outer_idx[si % p], outer_idx[(si + 1) % p], inner_idx[(j0 + sj) % q])
            )
            si += 1
        else:
            tris.append(
                (outer_idx[si % p], inner_idx[(j0 + sj + 1) % q], inner_idx[(j0 + sj) % q])
            )
            sj += 1
    return tris


def _refine_once(nodes: np.ndarray, triangles: np.ndarray, radius: float):
    """Uniform 4-way refinement; midpoints of boundary edges are pushed
    back onto the circle."""
    edge_count = defaultdict(int)
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_count[(min(a, b), max(a, b))] += 1

    new_nodes = [nodes]
    midpoint = {}
    extra = []
    next_idx = nodes.shape[0]
    for edge in sorted(edge_count):
        a, b = edge
        mid = 0.5 * (nodes[a] + nodes[b])
        if edge_count[edge] == 1:  # boundary edge
            mid = mid * (radius / math.hypot(mid[0], mid[1]))
        midpoint[edge] = next_idx
        extra.append(mid)
        next_idx += 1
    new_nodes.append(np.asarray(extra))

    out = np.empty((4 * triangles.shape[0], 3), dtype=np.int64)
    for t, (v0, v1, v2) in enumerate(triangles):
        m01 = midpoint[(min(v0, v1), max(v0, v1))]
        m12 = midpoint[(min(v1, v2), max(v1, v2))]
        m20 = midpoint[(min(v2, v0), max(v2, v0))]
        out[4 * t : 4 * t + 4] = [
            (v0, m01, m20),
            (v1, m12, m01),
            (v2, m20, m12),
            (m01, m12, m20),
        ]
    return np.vstack(new_nodes), out


def _collect_electrodes(nodes, radius, n_electrodes, arc_fraction):
    r = np.hypot(nodes[:, 0], nodes[:, 1])
    on_boundary = np.abs(r - radius) <= 1e-9 * radius
    theta = np.mod(np.arctan2(nodes[:, 1], nodes[:, 0]) / TWO_PI, 1.0)
    half = float(arc_fraction) / 2.0
    tol = 1e-12
    groups = []
    for k in range(n_electrodes):
        center = k / n_electrodes
        d = np.mod(theta - center + 0.5, 1.0) - 0.5  # signed cyclic offset
        members = np.where(on_boundary & (np.abs(d) <= half + tol))[0]
        order = np.argsort(d[members])
        groups.append(members[order])
    return groups


def build_mesh(
    radius: float,
    n_electrodes: int,
    electrode_arc_fraction: float,
    refinement_level: int,
) -> DiskMesh:
    """Triangulate a disk with equally spaced boundary electrode arcs.

    Parameters
    ----------
    radius : float
        Disk radius (m).
    n_electrodes : int
        Number of electrodes L, at least 4; electrode k is centered at
        angle ``2*pi*k/L``.
    electrode_arc_fraction : float
        Fraction of the circumference covered by one electrode
        (arc length = fraction * 2*pi*radius).  The total coverage
        ``fraction * L`` must stay below 1 so arcs cannot overlap.
    refinement_level : int
        Number of uniform 4-way refinements; node count grows roughly
        4x per level.

    Returns
    -------
    DiskMesh
        Conforming, positively oriented triangulation whose boundary
        resolves every electrode arc with at least two edges.
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if n_electrodes < 4:
        raise MeshError("need at least 4 electrodes")
    if refinement_level < 0:
        raise MeshError("refinement_level must be >= 0")
    arc = Fraction(electrode_arc_fraction)
    if not 0 < arc * n_electrodes < 1:
        raise MeshError(
            "electrode_arc_fraction * n_electrodes must lie in (0, 1); "
            "electrodes would overlap otherwise"
        )

    boundary = _boundary_angles(n_electrodes, arc)
    p0 = len(boundary)
    n_rings = max(2, round(p0 / TWO_PI))

    # ring angle layouts, outermost first; counts are multiples of L so a
    # rotation by one electrode spacing maps the node set onto itself
    rings = [boundary]
    radii_frac = [Fraction(1)]
    L = n_electrodes
    for i in range(1, n_rings):
        rad = Fraction(n_rings - i, n_rings)
        ideal = p0 * float(rad)
        count = L * max(1, round(ideal / L))
        offset = Fraction(1, 2 * count) if i % 2 else Fraction(0)
        rings.append([(Fraction(j, count) + offset) % 1 for j in range(count)])
        radii_frac.append(rad)

    coords = []
    ring_indices = []
    idx = 0
    for ring, rad in zip(rings, radii_frac):
        r = radius * float(rad)
        coords.extend(
            (r * math.cos(TWO_PI * float(a)), r * math.sin(TWO_PI * float(a)))
            for a in ring
        )
        ring_indices.append(list(range(idx, idx + len(ring))))
        idx += len(ring)
    center_idx = idx
    coords.append((0.0, 0.0))

    triangles = []
    for outer, inner, o_ang, i_ang in zip(
        ring_indices[:-1], ring_indices[1:], rings[:-1], rings[1:]
    ):
        triangles.extend(_zip_band(outer, o_ang, inner, i_ang))
    innermost = ring_indices[-1]
    n_in = len(innermost)
    triangles.extend(
        (innermost[t], innermost[(t + 1) % n_in], center_idx) for t in range(n_in)
    )

    nodes = np.asarray(coords, dtype=float)
    tris = np.asarray(triangles, dtype=np.int64)
    for _ in range(refinement_level):
        nodes, tris = _refine_once(nodes, tris, radius)

    mesh = DiskMesh(
        nodes=nodes,
        triangles=tris,
        radius=float(radius),
        electrode_nodes=_collect_electrodes(nodes, radius, n_electrodes, arc),
    )
    if np.any(mesh.triangle_areas() <= 0):
        raise MeshError("degenerate triangle produced; internal generator error")
    for k, grp in enumerate(mesh.electrode_nodes):
        if grp.size < 3:
            raise MeshError(f"electrode {k} resolved with fewer than 2 boundary edges")
    return mesh


# ---------------------------------------------------------------------------
# pixel partition
# ---------------------------------------------------------------------------


def build_pixel_grid(mesh: DiskMesh, n_side: int) -> PixelGrid:
    """Partition the disk into an n_side x n_side grid of clipped squares
    and assign every triangle to the pixel containing its barycenter.

    Cells with zero clipped area are dropped.  Raises if some retained
    pixel captures no triangle barycenter, which means the mesh is too
    coarse for the requested grid.
    """
    if n_side < 2:
        raise MeshError("n_side must be >= 2")
    R = mesh.radius
    w = 2.0 * R / n_side

    cell_area = np.zeros((n_side, n_side))
    for row in range(n_side):
        y1 = R - row * w
        y0 = y1 - w
        for col in range(n_side):
            x0 = -R + col * w
            cell_area[row, col] = disk_rect_area(R, x0, x0 + w, y0, y1)
    retained = cell_area > 1e-12 * w * w
    rows, cols = np.nonzero(retained)  # row-major order
    pixel_of_cell = -np.ones((n_side, n_side), dtype=np.int64)
    pixel_of_cell[rows, cols] = np.arange(rows.size)

    bary = mesh.triangle_barycenters()
    bcol = np.clip(((bary[:, 0] + R) / w).astype(np.int64), 0, n_side - 1)
    brow = np.clip(((R - bary[:, 1]) / w).astype(np.int64), 0, n_side - 1)
    tri_pix = pixel_of_cell[brow, bcol]

    counts = np.bincount(tri_pix[tri_pix >= 0], minlength=rows.size)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise MeshError(
            f"retained pixel {empty} contains no triangle barycenter; "
            "refine the mesh or coarsen the grid"
        )

    centers = np.column_stack([-R + (cols + 0.5) * w, R - (rows + 0.5) * w])
    mesh_area = np.bincount(
        tri_pix[tri_pix >= 0],
        weights=mesh.triangle_areas()[tri_pix >= 0],
        minlength=rows.size,
    )
    mesh.triangle_pixel = tri_pix
    return PixelGrid(
        n_side=n_side,
        radius=R,
        cell_width=w,
        pixel_centers=centers,
        pixel_area=cell_area[rows, cols],
        mesh_area=mesh_area,
        rows=rows,
        cols=cols,
    )


# ---------------------------------------------------------------------------
# plain-text export
# ---------------------------------------------------------------------------


def export_mesh_text(mesh: DiskMesh, path) -> None:
    """Dump the mesh as plain text for debugging and cross-language checks.

    Sections: nodes (index, x, y), triangles (index, n0, n1, n2, pixel),
    electrodes (electrode index followed by its node indices).  The pixel
    column is -1 when no pixel grid has been attached.
    """
    tp = mesh.triangle_pixel
    if tp is None:
        tp = -np.ones(mesh.n_triangles, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("# disk-mesh v1\n")
        fh.write(f"# radius {mesh.radius!r}\n")
        fh.write(f"# nodes {mesh.n_nodes} (index x y)\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {x!r} {y!r}\n")
        fh.write(f"# triangles {mesh.n_triangles} (index n0 n1 n2 pixel)\n")
        for t, tri in enumerate(mesh.triangles):
            fh.write(f"{t} {tri[0]} {tri[1]} {tri[2]} {tp[t]}\n")
        fh.write(f"# electrodes {mesh.n_electrodes} (index node...)\n")
        for k, grp in enumerate(mesh.electrode_nodes):
            fh.write(" ".join([str(k)] + [str(int(n)) for n in grp]) + "\n")
