"""Definiteness-based constraint bounds for the linearized inversion.

For each pixel the bound is the largest alpha >= 0 such that

    alpha * S_k + |V| + delta * I

stays positive semi-definite, where |V| is the matrix absolute value of
the symmetrized difference data and delta its noise shift.  With
A = |V| + delta*I strictly positive definite this reduces, via the lower
Cholesky factor A = L L^T, to beta = -1 / lambda_min(L^-1 S_k L^-T).

Exact (noise-free) difference data is singular: every measurement row sums
to zero, so the constant vector spans a shared null space of A and all
S_k.  That direction carries no information and is deflated before the
factorization; a pixel whose S_k acts nontrivially on null(A) gets
beta = 0, which is the exact value of the defining maximum there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .forward import ConductivityField, element_gradients
from .geometry import DiskMesh
from .protocol import DifferenceFrame
from .sensitivity import SensitivityTensor

BETA_INF = np.inf


class DefinitenessError(RuntimeError):
    """Raised when the shifted data matrix is not positive semi-definite."""


@dataclass
class ConstraintSet:
    """Per-pixel box bounds for the constrained inversion.

    ``upper[k] = min(cap, beta[k])`` where the cap is the contrast-derived
    a-priori bound (a_plus for conductive anomalies, a_minus for resistive
    ones) unless a manual cap overrides it.  Conductive polarity means
    0 <= kappa <= upper, resistive means -upper <= kappa <= 0.
    """

    beta: np.ndarray
    a_plus: float
    a_minus: float
    polarity: str  # "conductive" | "resistive"
    upper: np.ndarray


def matrix_abs(M: np.ndarray) -> np.ndarray:
    """Matrix absolute value of a symmetric matrix: |M| = Q |Lambda| Q^T."""
    M = np.asarray(M, dtype=float)
    norm = np.abs(M).max()
    if norm > 0 and np.abs(M - M.T).max() > 1e-10 * norm:
        raise ValueError("matrix_abs requires a symmetric matrix")
    lam, Q = np.linalg.eigh(0.5 * (M + M.T))
    A = (Q * np.abs(lam)) @ Q.T
    return 0.5 * (A + A.T)


def _check_nsd(S: np.ndarray) -> np.ndarray:
    """Validate near negative semi-definiteness and clamp stray positive
    eigenvalues (tolerated up to 1e-10 relative, an assembly-noise bound)."""
    S = 0.5 * (S + S.T)
    lam, Q = np.linalg.eigh(S)
    norm = max(np.abs(lam).max(), 0.0)
    if norm == 0.0:
        return S
    if lam[-1] > 1e-10 * norm:
        raise ValueError(
            f"sensitivity matrix is not negative semi-definite "
            f"(max eigenvalue {lam[-1]:.3e} vs norm {norm:.3e})"
        )
    if lam[-1] > 0:
        S = (Q * np.minimum(lam, 0.0)) @ Q.T
        S = 0.5 * (S + S.T)
    return S


def compute_beta(S_k: np.ndarray, A: np.ndarray, check_certificate: bool = True) -> float:
    """Largest alpha >= 0 with alpha * S_k + A positive semi-definite.

    ``A`` must be symmetric positive semi-definite (definite away from
    directions on which S_k vanishes); ``S_k`` symmetric negative
    semi-definite within assembly tolerance.  Returns ``inf`` when S_k
    vanishes (every alpha works).
    """
    A = np.asarray(A, dtype=float)
    if np.abs(A - A.T).max() > 1e-10 * max(np.abs(A).max(), 1e-300):
        raise ValueError("A must be symmetric")
    S = _check_nsd(np.asarray(S_k, dtype=float))
    s_norm = np.abs(S).max()

    a_norm = np.abs(A).max()
    if a_norm == 0.0:
        # degenerate exact-zero data: only alpha = 0 works unless S_k = 0
        return BETA_INF if s_norm == 0.0 else 0.0

    lam, Q = np.linalg.eigh(0.5 * (A + A.T))
    if lam[0] < -1e-10 * lam[-1]:
        raise DefinitenessError(
            "shifted data matrix has a negative eigenvalue; "
            "the noise shift delta is too small"
        )
    kernel = lam <= 1e-12 * lam[-1]
    if kernel.any():
        QN = Q[:, kernel]
        if s_norm > 0 and np.abs(S @ QN).max() > 1e-8 * s_norm:
            return 0.0  # S_k has mass on null(A): no positive alpha survives
        QP = Q[:, ~kernel]
        lam_p = lam[~kernel]
        # A restricted to its range is diagonal in the eigenbasis
        M = (QP.T @ S @ QP) / np.sqrt(lam_p)[:, None] / np.sqrt(lam_p)[None, :]
    else:
        chol = sla.cholesky(A, lower=True)
        M = sla.solve_triangular(chol, S, lower=True)
        M = sla.solve_triangular(chol, M.T, lower=True)
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return BETA_INF
    lam_s = float(np.linalg.eigvalsh(M)[0])
    m_norm = np.abs(M).max()
    if lam_s >= -1e-14 * max(m_norm, 1e-300):
        return BETA_INF
    beta = -1.0 / lam_s

    if check_certificate:
        cert = float(np.linalg.eigvalsh(A + beta * S)[0])
        if cert < -1e-8 * a_norm:
            raise DefinitenessError(
                f"definiteness certificate failed: min eig {cert:.3e} "
                f"vs tolerance {-1e-8 * a_norm:.3e}"
            )
    return beta


def build_constraints(
    tensor: SensitivityTensor,
    diff: DifferenceFrame,
    sigma0: float,
    contrast: float,
    polarity: str,
    manual_cap: float | None = None,
) -> ConstraintSet:
    """Per-pixel bounds from the shifted definiteness tests.

    ``contrast`` is the a-priori lower bound c > 0 on the anomaly
    contrast; it fixes a_plus = sigma0 - sigma0^2/(sigma0 + c) and
    a_minus = c.  ``manual_cap`` replaces the a-priori cap in the upper
    bounds when given.
    """
    if contrast <= 0:
        raise ValueError("contrast bound must be positive")
    if polarity not in ("conductive", "resistive"):
        raise ValueError("polarity must be 'conductive' or 'resistive'")
    a_plus = sigma0 - sigma0**2 / (sigma0 + contrast)
    a_minus = contrast
    A = matrix_abs(diff.V) + diff.delta * np.eye(diff.L)
    beta = np.array([compute_beta(S_k, A) for S_k in tensor.columns])
    if manual_cap is not None:
        cap = float(manual_cap)
    else:
        cap = a_plus if polarity == "conductive" else a_minus
    upper = np.minimum(cap, beta)
    return ConstraintSet(
        beta=beta, a_plus=a_plus, a_minus=a_minus, polarity=polarity, upper=upper
    )


def monotonicity_check(
    mesh: DiskMesh,
    field: ConductivityField,
    sigma0: float,
    potentials: np.ndarray,
    diff: DifferenceFrame,
    g: np.ndarray,
    current: float,
) -> tuple:
    """Evaluate the two-sided energy bounds sandwiching g^T V g.

    ``potentials`` are the background solutions at drive ``current`` on
    the same mesh the difference data came from; ``field`` is the true
    conductivity.  Returns (lower, middle, upper) with

        lower  = (1/I) * integral (sigma0/sigma)(sigma0 - sigma) |grad u_g|^2
        middle = g^T V g
        upper  = (1/I) * integral (sigma0 - sigma) |grad u_g|^2

    and lower >= middle >= upper up to discretization effects.  The 1/I
    normalization matches the voltage scaling of V (the bounds are usually
    written for unit drive current).
    """
    g = np.asarray(g, dtype=float)
    u_g = g @ potentials  # (n_nodes,)
    grad = element_gradients(mesh, u_g)  # (M, 2)
    sq = np.einsum("tc,tc->t", grad, grad) * mesh.triangle_areas()
    sigma = field.values
    lower = float(np.sum((sigma0 / sigma) * (sigma0 - sigma) * sq)) / current
    upper = float(np.sum((sigma0 - sigma) * sq)) / current
    middle = float(g @ diff.V @ g)
    return lower, middle, upper
