"""Monotonicity-constrained difference imaging for EIT.

Forward simulation uses a shunt-electrode finite element model on a disk;
reconstruction solves a linearized least-squares problem whose box bounds
come from matrix-definiteness tests between the measurements and the
per-pixel sensitivity matrices.
"""

from .geometry import DiskMesh, PixelGrid, build_mesh, build_pixel_grid

__all__ = [
    "DiskMesh",
    "PixelGrid",
    "build_mesh",
    "build_pixel_grid",
]

__version__ = "0.1.0"
