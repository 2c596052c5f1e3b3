"""Constrained linearized inversion and the end-to-end pipeline.

The core problem is a box-constrained convex quadratic: minimize
||S kappa - V||^2 with every component of kappa confined to
[0, upper_k] (conductive) or [-upper_k, 0] (resistive).  It is solved by
projected gradient steps with Barzilai-Borwein step lengths and a
monotone backtracking safeguard; the iteration is deterministic and the
resistive case is reduced to the conductive one by negating the data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import forward, geometry, monotonicity, protocol, sensitivity
from .monotonicity import ConstraintSet


class InversionError(RuntimeError):
    """Raised for invalid solver input."""


class PipelineError(RuntimeError):
    """Failure of one stage of the reconstruction pipeline."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iterations: int = 10_000
    track_history: bool = False


@dataclass
class ReconstructionResult:
    """Solution of one inversion run.

    ``objective`` is ||S kappa - V||^2 recomputed at the returned point;
    ``active_set`` lists the pixels sitting on a box bound.
    """

    kappa: np.ndarray
    objective: float
    iterations: int
    converged: bool
    method: str
    active_set: np.ndarray
    history: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _projected_gradient_norm(x, grad, lower, upper):
    pg = grad.copy()
    at_lo = x <= lower
    at_hi = x >= upper
    pg[at_lo] = np.minimum(grad[at_lo], 0.0)
    pg[at_hi] = np.maximum(grad[at_hi], 0.0)
    return float(np.linalg.norm(pg))


_SUBSPACE_EVERY = 20


def _box_bb(S, v, upper, opts: SolverOptions):
    """Minimize ||S x - v||^2 over 0 <= x <= upper.

    Monotone projected gradient descent with Barzilai-Borwein step
    lengths, accelerated every few sweeps by an exact least-squares solve
    on the currently free variables (a gradient-projection / subspace-
    minimization scheme); subspace steps are only taken when they strictly
    descend, so the objective never increases.  Deterministic throughout.

    Problems whose matrix entries are far below unit scale are solved in
    jointly rescaled units (same minimizer); this keeps the absolute floor
    in the stopping rule meaningful for physical (volt-scale) data while
    still implying the unscaled criterion.
    """
    s_norm = float(np.abs(S).max())
    if 0.0 < s_norm < 1.0:
        S = S / s_norm
        v = v / s_norm
    G = S.T @ S
    b = S.T @ v
    P = b.size
    gram_norm = float(np.linalg.norm(G, "fro"))
    x = np.zeros(P)

    def objective(z):
        r = S @ z - v
        return float(r @ r)

    f_x = objective(x)
    grad = 2.0 * (G @ x - b)
    tol = opts.tol * max(1.0, float(np.linalg.norm(b)))
    history = [f_x] if opts.track_history else None
    alpha = 1.0 / (2.0 * gram_norm) if gram_norm > 0 else 1.0
    converged = _projected_gradient_norm(x, grad, 0.0, upper) <= tol
    it = 0
    while not converged and it < opts.max_iterations:
        it += 1
        if it % _SUBSPACE_EVERY == 0:
            free = (x > 0.0) & (x < upper)
            if free.any():
                rhs = v - S[:, ~free] @ x[~free]
                sol, *_ = np.linalg.lstsq(S[:, free], rhs, rcond=None)
                d = np.zeros(P)
                d[free] = sol - x[free]
                step, f_new = 1.0, np.inf
                for _ in range(30):
                    x_new = np.clip(x + step * d, 0.0, upper)
                    f_new = objective(x_new)
                    if f_new < f_x:
                        break
                    step *= 0.5
                if f_new < f_x:
                    x, f_x = x_new, f_new
                    grad = 2.0 * (G @ x - b)
                    if history is not None:
                        history.append(f_x)
                    converged = _projected_gradient_norm(x, grad, 0.0, upper) <= tol
                    continue
        step = alpha
        for _ in range(80):
            x_new = np.clip(x - step * grad, 0.0, upper)
            f_new = objective(x_new)
            if f_new <= f_x or np.array_equal(x_new, x):
                break
            step *= 0.5
        if np.array_equal(x_new, x):
            break  # no feasible descent left at floating-point resolution
        s = x_new - x
        grad_new = 2.0 * (G @ x_new - b)
        y = grad_new - grad
        sy = float(s @ y)
        if sy > 0:  # keep the previous step on degenerate (null-space) moves
            alpha = min(max(float(s @ s) / sy, 1e-12), 1e12)
        if history is not None:
            assert f_new <= f_x + 1e-12 * max(1.0, abs(f_x)), "descent violated"
            history.append(f_new)
        x, f_x, grad = x_new, f_new, grad_new
        converged = _projected_gradient_norm(x, grad, 0.0, upper) <= tol
    return x, it, converged, history


def solve_constrained(
    S: np.ndarray,
    v: np.ndarray,
    constraints: ConstraintSet,
    opts: SolverOptions | None = None,
) -> ReconstructionResult:
    """Box-constrained least squares under the per-pixel bounds.

    Conductive polarity solves 0 <= kappa <= upper directly; resistive
    polarity negates data and bounds into the conductive form and negates
    the solution back.
    """
    opts = opts or SolverOptions()
    S = np.asarray(S, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    upper = np.asarray(constraints.upper, dtype=float)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(v))):
        raise InversionError("non-finite entries in system matrix or data")
    if not np.all(np.isfinite(upper)) or np.any(upper < 0):
        raise InversionError("bounds must be finite and non-negative")
    if S.shape != (v.size, upper.size):
        raise InversionError(
            f"shape mismatch: S {S.shape}, data {v.size}, bounds {upper.size}"
        )

    sign = 1.0 if constraints.polarity == "conductive" else -1.0
    x, it, converged, history = _box_bb(S, sign * v, upper, opts)
    kappa = sign * x
    residual = S @ kappa - v
    at_bound = (x <= 0.0) | (x >= upper)
    return ReconstructionResult(
        kappa=kappa,
        objective=float(residual @ residual),
        iterations=it,
        converged=converged,
        method="monotonicity",
        active_set=np.where(at_bound)[0],
        history=None if history is None else np.asarray(history),
    )


def solve_tikhonov(
    S: np.ndarray,
    v: np.ndarray,
    alpha: float,
    weighting: str = "noser",
) -> ReconstructionResult:
    """Regularized normal equations (S^T S + alpha W) kappa = S^T v.

    ``weighting`` selects W: "none" for the identity, "noser" for
    diag(S^T S).  The solve is exact; the result flags conditioning
    beyond 1e14.
    """
    if alpha <= 0:
        raise InversionError("regularization weight must be positive")
    if weighting not in ("none", "noser"):
        raise InversionError("weighting must be 'none' or 'noser'")
    S = np.asarray(S, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    G = S.T @ S
    d = np.diag(G)
    if weighting == "noser":
        if np.any(d <= 0):
            raise InversionError("NOSER weighting undefined: zero sensitivity column")
        W = np.diag(d)
    else:
        W = np.eye(G.shape[0])
    M = G + alpha * W
    lam = np.linalg.eigvalsh(M)
    cond = float(lam[-1] / lam[0]) if lam[0] > 0 else np.inf
    kappa = sla.solve(M, S.T @ v, assume_a="pos")
    residual = S @ kappa - v
    return ReconstructionResult(
        kappa=kappa,
        objective=float(residual @ residual),
        iterations=1,
        converged=True,
        method="tikhonov",
        active_set=np.empty(0, dtype=np.int64),
        diagnostics={"condition": cond, "ill_conditioned": cond > 1e14},
    )


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionOptions:
    """Everything the pipeline needs besides the two measurement frames."""

    radius: float = 0.1
    n_electrodes: int = 16
    electrode_arc_fraction: float = 0.0159
    recon_refinement: int = 2
    grid_n: int = 24
    method: str = "monotonicity"  # or "tikhonov"
    polarity: str = "resistive"
    sigma0: float = 1.0
    contrast: float = 0.99
    alpha: float = 0.03
    weighting: str = "noser"
    manual_cap: float | None = None
    current: float = 1e-3
    calibrate: bool = False
    tol: float = 1e-8
    max_iterations: int = 10_000


@dataclass
class ReconstructionOutput:
    result: ReconstructionResult
    constraints: ConstraintSet | None
    grid: geometry.PixelGrid
    mesh: geometry.DiskMesh
    diff: protocol.DifferenceFrame
    scale: float
    runtime_seconds: float


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, str(exc)) from exc
            return False

    return _Ctx()


def reconstruct(
    hom: forward.MeasurementFrame,
    inhom: forward.MeasurementFrame,
    opts: ReconstructionOptions,
) -> ReconstructionOutput:
    """Full pipeline: completion, optional calibration, difference,
    sensitivity, constraints, constrained (or Tikhonov) solve."""
    t0 = time.perf_counter()
    if hom.L != inhom.L:
        raise PipelineError("input", "frames have different electrode counts")
    if hom.L != opts.n_electrodes:
        raise PipelineError(
            "input",
            f"frames have L={hom.L} but the configuration says "
            f"{opts.n_electrodes}",
        )

    with _stage("completion"):
        hom_c = protocol.complete_frame(hom)
        inhom_c = protocol.complete_frame(inhom)

    with _stage("geometry"):
        mesh = geometry.build_mesh(
            opts.radius,
            opts.n_electrodes,
            opts.electrode_arc_fraction,
            opts.recon_refinement,
        )
        grid = geometry.build_pixel_grid(mesh, opts.grid_n)

    with _stage("sensitivity"):
        tensor = sensitivity.assemble_sensitivity(mesh, grid, opts.sigma0, opts.current)

    scale = 1.0
    if opts.calibrate:
        with _stage("calibration"):
            model = forward.measure_full(
                mesh,
                forward.ConductivityField(np.full(mesh.n_triangles, opts.sigma0)),
                opts.current,
            )
            model_c = protocol.complete_frame(model)
            scale = protocol.calibrate_scale(
                hom_c.U[hom_c.valid_mask], model_c.U[model_c.valid_mask]
            )

    with _stage("difference"):
        diff = protocol.build_difference(hom_c, inhom_c, scale=scale)
        data = sensitivity.vectorize_frame(diff)

    constraints = None
    if opts.method == "monotonicity":
        with _stage("constraints"):
            constraints = monotonicity.build_constraints(
                tensor,
                diff,
                opts.sigma0,
                opts.contrast,
                opts.polarity,
                manual_cap=opts.manual_cap,
            )
        with _stage("solve"):
            result = solve_constrained(
                tensor.matrix,
                data,
                constraints,
                SolverOptions(tol=opts.tol, max_iterations=opts.max_iterations),
            )
    elif opts.method == "tikhonov":
        with _stage("solve"):
            result = solve_tikhonov(
                tensor.matrix, data, opts.alpha, weighting=opts.weighting
            )
    else:
        raise PipelineError("input", f"unknown method {opts.method!r}")

    return ReconstructionOutput(
        result=result,
        constraints=constraints,
        grid=grid,
        mesh=mesh,
        diff=diff,
        scale=scale,
        runtime_seconds=time.perf_counter() - t0,
    )
