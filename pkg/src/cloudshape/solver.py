"""Damped, curvature-regularized Gauss-Newton reconstruction."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import MeasurementSet
from .geometry import GraphCloud, PolarCloud
from .jacobian import (IdentifiabilityReport, LinearizedSystem, StateVector, assemble_graph,
                       assemble_polar, diagnose, equilibrate, forward)
from .radiance import AlphaField, BetaProfile

log = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    """The (regularized) normal system has no numerically stable solution."""

    def __init__(self, message: str, report: IdentifiabilityReport | None = None):
        super().__init__(message)
        self.report = report


class GaugeError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Gauss-Newton settings.

    ``reg_weight`` is relative: the penalty added to the normal matrix is
    ``reg_weight * sigma_max(A^T A) / sigma_max(B^T B) * B^T B`` with both
    spectra taken at the initial state, so the default does not depend on
    the grid spacing. ``bc`` is ``"dirichlet"`` (graph ends fixed),
    ``"none"``, or an integer radius index held fixed for polar clouds.
    """

    reg_weight: float = 1e-4
    max_iter: int = 30
    tol_step: float = 1e-8
    tol_resid: float = 1e-10
    damping: int = 12
    bc: str | int = "dirichlet"
    singular_tol: float = 1e-10
    derivatives: str = "exact"

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.max_iter < 1 or self.damping < 0:
            raise ValueError("max_iter >= 1 and damping >= 0 required")
        if self.tol_step <= 0 or self.tol_resid <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ReconstructionResult:
    state: StateVector
    history: list[dict] = field(default_factory=list)
    diagnostics: IdentifiabilityReport | None = None
    converged: bool = False
    status: str = ""
    frozen: list[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history)


def fix_gauge(v: StateVector, normalization: str = "nadir") -> StateVector:
    """Move the scale of ``beta`` into ``alpha`` so that beta is normalized."""
    ref = v.beta.nadir_value if normalization == "nadir" else v.beta.integral
    if not ref > 0:
        raise GaugeError(f"cannot fix the gauge, reference value is {ref}")
    if ref == 1.0:
        return StateVector(v.cloud, v.alpha, BetaProfile(v.beta.knots, normalization), v.lam)
    beta = v.beta.normalized(normalization)
    return StateVector(v.cloud, v.alpha.scaled(ref), beta, v.lam)


def shape_pins(state: StateVector, bc) -> np.ndarray:
    sl = state.layout()["shape"]
    if bc == "none":
        return np.zeros(0, dtype=int)
    if bc == "dirichlet":
        if state.kind != "graph":
            raise ValueError("dirichlet boundary condition applies to graph clouds")
        return np.array([sl.start, sl.stop - 1])
    idx = int(bc)
    if not 0 <= idx < state.cloud.N:
        raise ValueError(f"pinned shape index {idx} out of range")
    return np.array([sl.start + idx])


def penalty_weight(system: LinearizedSystem, free: np.ndarray, rel: float) -> float:
    """Absolute penalty weight for a relative ``rel`` on the given columns."""
    if rel == 0:
        return 0.0
    a = np.linalg.norm(system.A[:, free], 2) ** 2
    b = np.linalg.norm(system.B[:, free], 2) ** 2
    return rel * a / b if b > 0 else 0.0


def gn_step(system: LinearizedSystem, cfg: SolverConfig = SolverConfig(), *, pinned=None,
            weight: float | None = None) -> np.ndarray:
    """Solve ``(A^T A + w B^T B) dv = A^T rhs`` over the unpinned columns.

    The stacked least-squares form is solved by SVD after column
    equilibration. ``pinned`` defaults to the gauge knot plus the shape
    boundary condition from ``cfg``; ``weight`` defaults to the relative
    ``cfg.reg_weight`` converted at this system.
    """
    if pinned is None:
        pinned = np.union1d(system.pinned, shape_pins(system.state, cfg.bc))
    free = np.setdiff1d(np.arange(system.n_cols), np.asarray(pinned, dtype=int))
    if weight is None:
        weight = penalty_weight(system, free, cfg.reg_weight)
    M = system.A[:, free]
    rhs = system.rhs
    if weight > 0:
        M = np.vstack([M, np.sqrt(weight) * system.B[:, free]])
        rhs = np.concatenate([rhs, np.zeros(system.B.shape[0])])
    Ms, scale = equilibrate(M)
    U, s, Vt = np.linalg.svd(Ms, full_matrices=False)
    if s.size < free.size or s[0] == 0 or s[-1] / s[0] < cfg.singular_tol:
        ratio = 0.0 if s.size < free.size or s[0] == 0 else s[-1] / s[0]
        raise SingularSystemError(f"normal system is singular (sigma_min/sigma_max = {ratio:.3e})",
                                  diagnose(system, pinned))
    y = Vt.T @ ((U.T @ rhs) / s)
    step = np.zeros(system.n_cols)
    step[free] = y / scale
    return step


def _misfit(data: MeasurementSet, state: StateVector) -> float:
    model = forward(state, data.detector)
    return float(np.linalg.norm(data.values - model.values))


def _project(state: StateVector, vec: np.ndarray) -> StateVector | None:
    """Clip emission unknowns at zero; return None for an invalid cloud."""
    lay = state.layout()
    vec = vec.copy()
    vec[lay["alpha"]] = np.maximum(vec[lay["alpha"]], 0.0)
    vec[lay["beta"]] = np.maximum(vec[lay["beta"]], 0.0)
    if "speed" in lay and not 0.0 < vec[lay["speed"]][0] <= 2.0:
        return None
    try:
        return state.unpack(vec)
    except ValueError:
        return None


def _assemble(state, data, cfg, with_speed):
    if state.kind == "graph":
        return assemble_graph(state, data.detector, with_speed, data=data,
                              derivatives=cfg.derivatives)
    return assemble_polar(state, data.detector, data=data)


def reconstruct(data: MeasurementSet, v_init: StateVector, cfg: SolverConfig = SolverConfig(),
                mode: str | None = None, with_speed: bool = False) -> ReconstructionResult:
    """Recover ``(alpha, beta, shape[, lambda])`` from measurements.

    The support of a graph cloud is taken from ``v_init`` and not iterated.
    Each iteration linearizes about the current state, solves the
    regularized normal system and halves the step until the actual forward
    misfit decreases.
    """
    mode = mode or v_init.kind
    if mode != v_init.kind:
        raise ValueError(f"mode {mode!r} does not match the initial state ({v_init.kind})")
    if with_speed and mode != "graph":
        raise ValueError("the speed unknown is only defined for graph clouds")
    if with_speed and v_init.lam is None:
        v_init = StateVector(v_init.cloud, v_init.alpha, v_init.beta, 1.0)
    if not with_speed and v_init.lam is not None:
        v_init = StateVector(v_init.cloud, v_init.alpha, v_init.beta, None)
    bc = cfg.bc if mode == "graph" or cfg.bc != "dirichlet" else "none"

    state = v_init
    misfit = _misfit(data, state)
    scale = max(float(np.linalg.norm(data.values)), 1e-300)
    result = ReconstructionResult(state)
    weight = None
    system = None
    if misfit / scale <= cfg.tol_resid:
        result.converged, result.status = True, "fixed point"
    for it in range(cfg.max_iter if not result.converged else 0):
        system = _assemble(state, data, cfg, with_speed)
        pinned = np.union1d(np.union1d(system.pinned, shape_pins(state, bc)), _unseen(system))
        free = np.setdiff1d(np.arange(system.n_cols), pinned)
        if weight is None:
            weight = penalty_weight(system, free, cfg.reg_weight)
        step = gn_step(system, cfg, pinned=pinned, weight=weight)
        v = state.pack()
        rel_step = float(np.linalg.norm(step) / max(np.linalg.norm(v), 1e-300))
        t = 1.0
        accepted = None
        for _ in range(cfg.damping + 1):
            trial = _project(state, v + t * step)
            if trial is not None:
                m = _misfit(data, trial)
                if m < misfit:
                    accepted = (trial, m)
                    break
            t *= 0.5
        s = np.linalg.svd(equilibrate(system.A[:, free])[0], compute_uv=False)
        entry = {"iter": it + 1, "resid": (accepted[1] if accepted else misfit) / scale,
                 "step": t * rel_step if accepted else 0.0,
                 "cond_estimate": float(s[0] / s[-1]) if s[-1] > 0 else float("inf"),
                 "rows": int(system.A.shape[0]), "dropped": system.dropped_rows}
        result.history.append(entry)
        log.debug("iteration %(iter)d: resid %(resid).3e step %(step).3e", entry)
        if accepted is None:
            done = rel_step <= cfg.tol_step
            result.converged = done
            result.status = "step below tolerance" if done else "stagnated"
            break
        state, misfit = accepted
        if misfit / scale <= cfg.tol_resid:
            result.converged, result.status = True, "residual below tolerance"
            break
        if t * rel_step <= cfg.tol_step:
            result.converged, result.status = True, "step below tolerance"
            break
    else:
        if not result.converged:
            result.status = "max_iter reached"
    result.state = state
    final = _assemble(state, data, cfg, with_speed)
    unseen = _unseen(final)
    result.frozen = [state.column_labels()[i] for i in unseen]
    result.diagnostics = diagnose(final, np.union1d(np.union1d(final.pinned,
                                                               shape_pins(state, bc)), unseen))
    return result


def _unseen(system: LinearizedSystem) -> np.ndarray:
    """Columns no active measurement depends on; they are held fixed."""
    norms = np.linalg.norm(system.A, axis=0)
    return np.flatnonzero(norms <= 1e-12 * norms.max())


def write_history(result: ReconstructionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "resid", "step", "cond_estimate"])
        for h in result.history:
            w.writerow([h["iter"], repr(h["resid"]), repr(h["step"]), repr(h["cond_estimate"])])


def initial_graph_state(x_L: float, x_R: float, h_B: float, N: int, *, height: float,
                        ends: tuple[float, float] | None = None, alpha: float = 1.0,
                        beta: BetaProfile | None = None) -> StateVector:
    """Flat initial guess at ``height`` with optional Dirichlet end values."""
    h = np.full(N, float(height))
    if ends is not None:
        h[0], h[-1] = ends
    beta = beta if beta is not None else BetaProfile.sine(10)
    return StateVector(GraphCloud(x_L, x_R, h_B, h), AlphaField.constant(alpha, N - 1), beta)


def initial_polar_state(N: int, radius: float, *, alpha: float = 1.0,
                        beta: BetaProfile | None = None, theta0: float = 0.0) -> StateVector:
    beta = beta if beta is not None else BetaProfile.sine(10)
    return StateVector(PolarCloud(np.full(N, float(radius)), theta0),
                       AlphaField.constant(alpha, N, sides=False), beta)
