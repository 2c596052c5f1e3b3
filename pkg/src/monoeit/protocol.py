"""Measurement conditioning: completion, calibration, difference frames.

A real adjacent-protocol device only delivers the entries U[k, l] whose
measuring pair is free of driving electrodes.  The remaining entries are
filled by periodic cubic-spline interpolation along the measurement index,
then corrected so that every row telescopes to zero and the matrix is
exactly symmetric.  All corrections live on the interpolated entries; the
device-delivered values are touched only by the symmetrization average.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .forward import MeasurementFrame, adjacent_valid_mask


class ProtocolError(ValueError):
    """Raised for malformed frames or degenerate calibration input."""


@dataclass
class DifferenceFrame:
    """Symmetrized difference measurement V = U(sigma) - U(sigma0).

    ``delta`` estimates the data error as the magnitude of the most
    negative eigenvalue of V (zero when V is positive semi-definite); it
    later shifts the definiteness tests run against V.
    """

    L: int
    V: np.ndarray
    delta: float


def calibrate_scale(measured: np.ndarray, model: np.ndarray) -> float:
    """Least-squares factor c minimizing ||c * measured - model||_2.

    Closed form: c = <measured, model> / <measured, measured>.
    """
    measured = np.asarray(measured, dtype=float).ravel()
    model = np.asarray(model, dtype=float).ravel()
    if measured.shape != model.shape:
        raise ProtocolError("measured and model vectors differ in length")
    denom = float(measured @ measured)
    if denom == 0.0:
        raise ProtocolError("measured vector is identically zero")
    return float(measured @ model) / denom


def complete_frame(frame: MeasurementFrame) -> MeasurementFrame:
    """Fill the driving-electrode entries of an adjacent-protocol frame.

    Per row, the three missing entries (measuring pair touching the
    driving pair) are interpolated by a periodic cubic spline through the
    known entries, then shifted by a common constant so the row sums to
    zero.  The matrix is replaced by its symmetric part and the diagonal
    (itself an interpolated position) re-adjusted so every row still sums
    to zero exactly.  The valid mask is left untouched: it keeps recording
    which entries are device-grade, which also makes the operation
    idempotent.
    """
    L = frame.L
    if L < 6:
        raise ProtocolError("completion needs at least 6 electrodes")
    if not np.array_equal(frame.valid_mask, adjacent_valid_mask(L)):
        raise ProtocolError("frame does not carry the adjacent-protocol mask")

    U = frame.U.copy()
    for k in range(L):
        known_l = np.where(frame.valid_mask[k])[0]  # already sorted
        xs = known_l.astype(float)
        ys = U[k, known_l]
        spline = CubicSpline(
            np.append(xs, xs[0] + L), np.append(ys, ys[0]), bc_type="periodic"
        )
        miss = np.where(~frame.valid_mask[k])[0]
        pts = np.where(miss < xs[0], miss + L, miss).astype(float)
        U[k, miss] = spline(pts)
        U[k, miss] -= U[k].sum() / miss.size  # conservation of voltages
    U = 0.5 * (U + U.T)  # reciprocity
    np.fill_diagonal(U, U.diagonal() - U.sum(axis=1))  # restore zero row sums
    return replace(frame, U=U, valid_mask=frame.valid_mask.copy())


def build_difference(
    hom: MeasurementFrame, inhom: MeasurementFrame, scale: float = 1.0
) -> DifferenceFrame:
    """Difference frame ``scale * (inhom - hom)``, symmetrized.

    ``scale`` carries the calibration factor when device data is compared
    against model data; simulated pairs use the default 1.  Both frames
    must be fully populated (simulated full frames or completed ones).
    """
    if hom.L != inhom.L:
        raise ProtocolError("frames have different electrode counts")
    D = scale * (inhom.U - hom.U)
    V = 0.5 * (D + D.T)
    lam_min = float(np.linalg.eigvalsh(V)[0])
    return DifferenceFrame(L=hom.L, V=V, delta=max(0.0, -lam_min))
