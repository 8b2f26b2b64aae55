"""Linearization of the measurement operators and identifiability diagnostics.

Unknowns are packed as ``[alpha | beta knots | shape | speed]`` where shape
is the node heights (graph) or radii (polar) and the speed column is only
present when requested.

Two graph linearizations are available:

``"exact"``
    Derivative of the discrete, exactly-integrated forward map. Inside a
    segment the radiance only changes through the segment tilt, which gives
    the ``(delta h)'`` term; the ``alpha'`` and ``psi'`` terms of the
    continuous expansion become jumps at the vertices, carried by the
    motion of the vertex events along the detector.
``"pointwise"``
    The continuous expansion evaluated at the pixel-averaged hit abscissa,
    with ``alpha'`` and ``psi'`` taken from a nodal reconstruction of the
    segment values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import (DetectorCircle, DetectorLine, MeasurementSet, beta_chord_slope,
                      measure_graph, measure_polar, scan)
from .geometry import GraphCloud, PolarCloud
from .radiance import AlphaField, BetaProfile


class DegenerateGeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateVector:
    """Unknowns of the inverse problem.

    When ``lam`` is set (graph clouds only) the cloud abscissas are stored
    in detector coordinates: the physical cloud is ``cloud.stretched(lam)``.
    This keeps a support read off the data valid while ``lam`` changes.
    """

    cloud: GraphCloud | PolarCloud
    alpha: AlphaField
    beta: BetaProfile
    lam: float | None = None

    @property
    def kind(self) -> str:
        return "graph" if isinstance(self.cloud, GraphCloud) else "polar"

    @property
    def shape(self) -> np.ndarray:
        return self.cloud.heights if self.kind == "graph" else self.cloud.radii

    def layout(self) -> dict[str, slice]:
        na = self.alpha.as_vector().size
        nb = self.beta.P + 1
        ns = self.cloud.N
        out = {"alpha": slice(0, na), "beta": slice(na, na + nb),
               "shape": slice(na + nb, na + nb + ns)}
        if self.lam is not None:
            out["speed"] = slice(na + nb + ns, na + nb + ns + 1)
        return out

    def pack(self) -> np.ndarray:
        parts = [self.alpha.as_vector(), self.beta.knots, self.shape]
        if self.lam is not None:
            parts.append([self.lam])
        return np.concatenate(parts)

    def unpack(self, vec) -> "StateVector":
        vec = np.asarray(vec, dtype=float)
        lay = self.layout()
        knots = vec[lay["beta"]]
        beta = BetaProfile(knots, "none")
        lam = float(vec[lay["speed"]][0]) if "speed" in lay else None
        return StateVector(self.cloud.with_shape(vec[lay["shape"]]),
                           self.alpha.from_vector(vec[lay["alpha"]]), beta, lam)

    @property
    def physical_cloud(self):
        if self.lam is None:
            return self.cloud
        return self.cloud.stretched(self.lam)

    def column_labels(self) -> list[str]:
        labels = []
        for name, sl in self.layout().items():
            labels += [f"{name}[{i}]" for i in range(sl.stop - sl.start)]
        return labels


def forward(state: StateVector, det) -> MeasurementSet:
    if state.kind == "graph":
        return measure_graph(state.physical_cloud, state.alpha, state.beta, det,
                             1.0 if state.lam is None else state.lam)
    return measure_polar(state.cloud, state.alpha, state.beta, det)


@dataclass
class LinearizedSystem:
    """Rows are active ``(pixel, angle)`` pairs in lexicographic order."""

    A: np.ndarray
    rhs: np.ndarray
    col_map: dict[str, slice]
    B: np.ndarray
    rows: np.ndarray
    state: StateVector
    detector: DetectorLine | DetectorCircle
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    dropped_rows: int = 0
    near_tangent_rows: int = 0
    folds: np.ndarray | None = None

    @property
    def n_cols(self) -> int:
        return self.A.shape[1]


def curvature_penalty(N: int, dx: float = 1.0) -> np.ndarray:
    """Second-difference rows ``(1, -2, 1) / dx**2`` on the interior nodes."""
    if N < 3:
        raise ValueError("need N >= 3")
    B = np.zeros((N - 2, N))
    i = np.arange(N - 2)
    B[i, i] = 1.0
    B[i, i + 1] = -2.0
    B[i, i + 2] = 1.0
    return B / dx ** 2


def _periodic_curvature_penalty(N: int, dtheta: float) -> np.ndarray:
    B = np.zeros((N, N))
    i = np.arange(N)
    B[i, (i - 1) % N] = 1.0
    B[i, i] = -2.0
    B[i, (i + 1) % N] = 1.0
    return B / dtheta ** 2


def _gauge_pins(state: StateVector) -> np.ndarray:
    k = state.beta.nadir_knot
    if k is None:
        raise ValueError("nadir gauge needs an even number of beta intervals")
    return np.array([state.layout()["beta"].start + k])


def _embed_penalty(state: StateVector, n_cols: int) -> np.ndarray:
    sl = state.layout()["shape"]
    if state.kind == "graph":
        Bs = curvature_penalty(state.cloud.N, state.cloud.dx)
    else:
        Bs = _periodic_curvature_penalty(state.cloud.N, state.cloud.dtheta)
    B = np.zeros((Bs.shape[0], n_cols))
    B[:, sl] = Bs
    return B


def _finish(state, det, full, model: MeasurementSet, data, **extra) -> LinearizedSystem:
    active = model.hit.ravel()
    dropped = 0
    if data is not None:
        # dark data pixels stay in: their residual is -model and its gradient
        # keeps the step a descent direction for the full-pixel misfit
        dropped = int((data.hit.ravel() & ~active).sum())
        rhs = (data.values - model.values).ravel()[active]
    else:
        rhs = np.zeros(int(active.sum()))
    rows = np.flatnonzero(active)
    A = full[rows]
    lay = state.layout()
    return LinearizedSystem(A, rhs, lay, _embed_penalty(state, A.shape[1]), rows, state, det,
                            _gauge_pins(state), dropped_rows=dropped, folds=model.folds, **extra)


def _full_matrix(scans, n_cols) -> np.ndarray:
    # (pixel, angle) lexicographic
    return np.stack([s.jac for s in scans], axis=1).reshape(-1, n_cols)


def assemble_graph(v0: StateVector, det: DetectorLine, with_speed: bool = False, *,
                   data: MeasurementSet | None = None, derivatives: str = "exact",
                   tan_tol: float = 1e-3) -> LinearizedSystem:
    """Linearize the graph measurement operator about ``v0``.

    Rows are the pixels lit in the model. ``data`` fills ``rhs`` with the
    residual; data pixels the model leaves dark are counted as dropped.
    ``derivatives`` selects the ``"exact"`` or ``"pointwise"`` linearization
    (module docstring).
    """
    if v0.kind != "graph":
        raise TypeError("assemble_graph needs a graph state")
    if with_speed and v0.lam is None:
        v0 = StateVector(v0.cloud, v0.alpha, v0.beta, 1.0)
    if not with_speed and v0.lam is not None:
        raise ValueError("state carries a speed unknown; pass with_speed=True")
    lam = 1.0 if v0.lam is None else v0.lam
    model = forward(v0, det)
    n_cols = v0.pack().size
    near_tangent = _near_tangent_rows(v0, det, model, tan_tol)
    if derivatives == "exact":
        cloud = v0.physical_cloud
        stretch = None
        if with_speed:
            stretch = cloud.boundary().vertices * np.array([1.0 / lam, 0.0])
        scans = scan(cloud, v0.alpha, v0.beta, det, lam=lam, derivs=True, with_speed=with_speed,
                     stretch=stretch)
        full = _full_matrix(scans, n_cols)
        sys = _finish(v0, det, full, model, data, near_tangent_rows=int(near_tangent.sum()))
    elif derivatives == "pointwise":
        full = _pointwise_rows(v0, det, with_speed)
        model = MeasurementSet(model.values, np.where(near_tangent.reshape(model.mask.shape), 0,
                                                      model.mask), det, model.folds)
        sys = _finish(v0, det, full, model, data, near_tangent_rows=int(near_tangent.sum()))
        sys.dropped_rows += int(near_tangent.sum())
    else:
        raise ValueError(f"unknown derivatives mode {derivatives!r}")
    if sys.A.shape[0] == 0:
        raise DegenerateGeometryError("no usable measurement rows")
    return sys


def _near_tangent_rows(v0, det, model, tan_tol):
    """Rows whose mean hit slope makes ``|tan(phi) - h'|`` smaller than ``tan_tol``."""
    xs, frac, seg = _pixel_hits(v0.physical_cloud, det, 1.0 if v0.lam is None else v0.lam)
    slope = np.where(seg >= 0, v0.physical_cloud.slopes[np.clip(seg, 0, None)], 0.0)
    tan = np.tan(det.angles)[None, :]
    return ((np.abs(tan - slope) < tan_tol) & (frac > 0) & model.hit).ravel()


def _pixel_hits(cloud: GraphCloud, det: DetectorLine, lam: float):
    """Mean upper-surface hit abscissa, hit fraction and segment per (pixel, angle)."""
    bnd = cloud.boundary()
    m = det.subsamples
    edges = det.edges(lam)
    L = edges[1] - edges[0]
    t = (edges[:-1, None] + L * (np.arange(m) + 0.5)[None, :] / m).ravel()
    n_pix = edges.size - 1
    pixel = np.repeat(np.arange(n_pix), m)
    xs = np.zeros((n_pix, det.J))
    frac = np.zeros((n_pix, det.J))
    for j, phi in enumerate(det.angles):
        origins = np.column_stack([t, np.full_like(t, det.Z)])
        back = -np.array([[np.cos(phi), np.sin(phi)]])
        seg, s = bnd.cast(origins, back)
        upper = (seg >= 0) & (seg < cloud.N - 1)
        x = origins[:, 0] + s * back[0, 0]
        cnt = np.bincount(pixel, upper, minlength=n_pix)
        xs[:, j] = np.bincount(pixel, np.where(upper, x, 0.0), minlength=n_pix) / np.maximum(cnt, 1)
        frac[:, j] = cnt / m
    seg = np.where(frac > 0, np.clip(((xs - cloud.x_L) // cloud.dx).astype(int), 0, cloud.N - 2), -1)
    return xs, frac, seg


def nodal_derivative(seg_values: np.ndarray, spacing: float, periodic: bool = False) -> np.ndarray:
    """Node values of the derivative of a piecewise-constant field.

    Interior nodes take the difference of the two adjacent segment values;
    open ends copy their neighbour.
    """
    if periodic:
        return (seg_values - np.roll(seg_values, 1)) / spacing
    d = np.diff(seg_values) / spacing
    return np.concatenate([[d[0]], d, [d[-1]]])


def _pointwise_rows(v0: StateVector, det: DetectorLine, with_speed: bool) -> np.ndarray:
    cloud, beta = v0.physical_cloud, v0.beta
    lam = 1.0 if v0.lam is None else v0.lam
    lay = v0.layout()
    n_cols = v0.pack().size
    N, dx = cloud.N, cloud.dx
    alpha = v0.alpha.segment_values
    xs, frac, seg = _pixel_hits(cloud, det, lam)
    a_nodes = nodal_derivative(alpha, dx)
    psi_nodes = nodal_derivative(np.arctan(cloud.slopes), dx)
    n_pix = xs.shape[0]
    full = np.zeros((n_pix, det.J, n_cols))
    centers = det.centers
    for j, phi in enumerate(det.angles):
        ok = frac[:, j] > 0
        if not ok.any():
            continue
        x0 = xs[ok, j]
        sg = seg[ok, j]
        f = frac[ok, j]
        hp = cloud.slopes[sg]
        psi = np.arctan(hp)
        arg = np.clip(phi - psi, 0, np.pi)
        b0 = np.interp(arg, beta.angles, beta.knots)
        b1 = beta_chord_slope(beta, arg)
        a0 = alpha[sg]
        a1 = np.interp(x0, cloud.x, a_nodes)
        p1 = np.interp(x0, cloud.x, psi_nodes)
        c3 = (a1 * b0 + a0 * p1 * b1) / (np.tan(phi) - hp)
        c4 = -a0 * b1 / (1 + hp ** 2)
        rows = np.flatnonzero(ok)
        block = np.zeros((rows.size, n_cols))
        block[np.arange(rows.size), lay["alpha"].start + sg] = b0
        block[:, lay["beta"]] = a0[:, None] * beta.hat_weights(arg)
        # nodal hat functions on the segment containing x0
        w = (x0 - cloud.x[sg]) / dx
        s0 = lay["shape"].start
        block[np.arange(rows.size), s0 + sg] += c3 * (1 - w) - c4 / dx
        block[np.arange(rows.size), s0 + sg + 1] += c3 * w + c4 / dx
        if with_speed:
            block[:, lay["speed"].start] = c3 * centers[rows] * np.tan(phi)
        full[rows, j] = block * f[:, None]
    return full.reshape(-1, n_cols)


def assemble_polar(v0: StateVector, det: DetectorCircle, *, data: MeasurementSet | None = None,
                   method: str = "analytic", step: float = 1e-6) -> LinearizedSystem:
    """Linearize the polar measurement operator about ``v0``.

    ``method="fd"`` builds the matrix column by column from central
    differences of :func:`measure_polar`; ``"analytic"`` differentiates the
    exactly-integrated scan.
    """
    if v0.kind != "polar":
        raise TypeError("assemble_polar needs a polar state")
    model = forward(v0, det)
    n_cols = v0.pack().size
    if method == "analytic":
        full = _full_matrix(scan(v0.cloud, v0.alpha, v0.beta, det, derivs=True), n_cols)
    elif method == "fd":
        full = finite_difference_jacobian(lambda s: forward(s, det).values.ravel(), v0, step)
    else:
        raise ValueError(f"unknown method {method!r}")
    sys = _finish(v0, det, full, model, data)
    if sys.A.shape[0] == 0:
        raise DegenerateGeometryError("no usable measurement rows")
    return sys


def finite_difference_jacobian(forward_map, v0: StateVector, step: float = 1e-6) -> np.ndarray:
    """Central differences of ``forward_map(state) -> flat array`` in every packed unknown.

    The step for coordinate ``i`` is ``step * max(|v_i|, 1)``. Where the
    backward point is not a valid state (a zero emission knot, say) a
    second-order forward difference is used instead.
    """
    if not 1e-8 <= step <= 1e-3:
        raise ValueError("relative step must lie in [1e-8, 1e-3]")
    v = v0.pack()

    def f(vec):
        return np.asarray(forward_map(v0.unpack(vec)), dtype=float)

    f0 = None
    cols = []
    for i in range(v.size):
        h = step * max(abs(v[i]), 1.0)
        e = np.zeros_like(v)
        e[i] = h
        try:
            fm = f(v - e)
        except ValueError:
            if f0 is None:
                f0 = f(v)
            cols.append((-3 * f0 + 4 * f(v + e) - f(v + 2 * e)) / (2 * h))
            continue
        cols.append((f(v + e) - fm) / (2 * h))
    return np.column_stack(cols)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class IdentifiabilityReport:
    singular_values: np.ndarray
    spectrum: np.ndarray
    rank: int
    rank_deficiency: int
    free_columns: np.ndarray
    null_basis: np.ndarray
    null_labels: list[str]
    gram: np.ndarray
    gram_condition: float
    beta_cot_dependent: bool
    breakdown_nodes: np.ndarray
    speed_inseparable: bool | None
    near_tangent_rows: int = 0
    folds: np.ndarray | None = None
    unobserved: list[str] = field(default_factory=list)

    @property
    def sigma_ratio(self) -> float:
        s = self.singular_values
        return float(s[-1] / s[0]) if s.size and s[0] > 0 else 0.0

    @property
    def degeneracy_count(self) -> int:
        return int(self.rank_deficiency + self.breakdown_nodes.size)

    def summary(self) -> str:
        lines = [
            f"free unknowns        : {self.free_columns.size}",
            f"unobserved unknowns  : {', '.join(self.unobserved) or 'none'}",
            f"numeric rank         : {self.rank}",
            f"rank deficiency      : {self.rank_deficiency}",
            f"sigma_min/sigma_max  : {self.sigma_ratio:.3e}",
            f"null directions      : {', '.join(self.null_labels) or 'none'}",
            f"gram condition       : {self.gram_condition:.3e}",
            f"(ln beta)' ~ cot     : {self.beta_cot_dependent}",
            f"breakdown nodes      : {self.breakdown_nodes.tolist()}",
            f"speed inseparable    : {self.speed_inseparable}",
            f"near-tangent rows    : {self.near_tangent_rows}",
            f"degeneracy count     : {self.degeneracy_count}",
        ]
        if self.folds is not None and np.any(self.folds):
            lines.append(f"multivalued (fold) angles: {np.flatnonzero(self.folds).tolist()}")
        return "\n".join(lines)


def equilibrate(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=0)
    scale = np.where(norms > 0, norms, 1.0)
    return M / scale, scale


def gram_test(beta: BetaProfile, angles, dep_tol: float = 0.1):
    """Gram matrix of the sampled functions ``1, cot(phi), (ln beta)'(phi)``.

    Returns ``(gram, condition, dependent)`` where ``dependent`` reports that
    ``(ln beta)'`` lies within ``dep_tol`` (relative) of ``span(1, cot)``.
    """
    a = np.asarray(angles, dtype=float)
    b = np.interp(a, beta.angles, beta.knots)
    a = a[(np.sin(a) > 1e-9) & (b > 0)]
    b = np.interp(a, beta.angles, beta.knots)
    seg = np.clip(np.ceil(a / beta.spacing).astype(int) - 1, 0, beta.P - 1)
    dlnb = (np.diff(beta.knots) / beta.spacing)[seg] / b
    F = np.column_stack([np.ones_like(a), 1.0 / np.tan(a), dlnb])
    Fn = F / np.linalg.norm(F, axis=0)
    G = Fn.T @ Fn
    cond = float(np.linalg.cond(G))
    coef, *_ = np.linalg.lstsq(F[:, :2], F[:, 2], rcond=None)
    resid = np.linalg.norm(F[:, 2] - F[:, :2] @ coef) / max(np.linalg.norm(F[:, 2]), 1e-300)
    return G, cond, bool(resid < dep_tol)


def breakdown_nodes(state: StateVector, tol: float = 0.05) -> np.ndarray:
    """Nodes where both the emission gradient and the boundary curvature are small.

    Both quantities are made dimensionless with the cloud's length scale
    (width for graphs, mean radius for polar clouds).
    """
    cloud = state.physical_cloud
    alpha = state.alpha.segment_values
    abar = max(float(np.mean(alpha)), 1e-300)
    if state.kind == "graph":
        ell = cloud.x_R - cloud.x_L
        da = nodal_derivative(alpha, cloud.dx)
        dpsi = nodal_derivative(np.arctan(cloud.slopes), cloud.dx)
        small = (np.abs(da) * ell / abar <= tol) & (np.abs(dpsi) * ell <= tol)
    else:
        bnd = cloud.boundary()
        seg_len = bnd.seg_lengths
        ds = 0.5 * (seg_len + np.roll(seg_len, 1))
        rbar = float(np.mean(cloud.radii))
        da = (alpha - np.roll(alpha, 1)) / ds
        turn = (bnd.normal_angles - np.roll(bnd.normal_angles, 1) + np.pi) % (2 * np.pi) - np.pi
        kappa = turn / ds
        small = (np.abs(da) * rbar / abar <= tol) & (np.abs(kappa) * rbar <= tol)
    return np.flatnonzero(small)


def window_pins(system: LinearizedSystem) -> np.ndarray:
    """Shape columns outside the fully observed interior of a local window.

    A segment is interior when every angle has a row depending on its
    emission strength; a shape node is interior when both neighbouring
    segments are. Non-interior nodes (and graph side strengths) are
    returned, to be held fixed as boundary data. Emission strengths stay
    free so that gauge-like trade-offs remain visible.
    """
    state = system.state
    lay = state.layout()
    J = system.detector.J
    angle_of_row = system.rows % J
    n_seg = state.cloud.N - 1 if state.kind == "graph" else state.cloud.N
    A_alpha = system.A[:, lay["alpha"].start:lay["alpha"].start + n_seg] != 0
    seen = np.zeros((n_seg, J), dtype=bool)
    for j in range(J):
        seen[:, j] = A_alpha[angle_of_row == j].any(axis=0)
    interior_seg = seen.all(axis=1)
    if state.kind == "graph":
        interior_node = np.zeros(state.cloud.N, dtype=bool)
        interior_node[1:-1] = interior_seg[:-1] & interior_seg[1:]
        side_cols = np.arange(lay["alpha"].start + n_seg, lay["alpha"].stop)
    else:
        interior_node = interior_seg & np.roll(interior_seg, 1)
        side_cols = np.zeros(0, dtype=int)
    cols = [side_cols, lay["shape"].start + np.flatnonzero(~interior_node)]
    return np.concatenate(cols).astype(int)


def diagnose(system: LinearizedSystem, pinned=None, *, null_tol: float = 1e-10,
             node_tol: float = 0.05, local: bool = False) -> IdentifiabilityReport:
    """Spectral identifiability report for an assembled system.

    ``pinned`` lists columns held fixed (default: the gauge knot). Columns
    no measurement depends on are reported as unobserved and left out of
    the rank count. The rank is counted on the column-equilibrated
    operator, with eigenvalues of ``A^T A`` below ``null_tol * max``
    treated as zero. ``local`` additionally holds the unknowns at the edge
    of the observed window fixed (see :func:`window_pins`).
    """
    pinned = system.pinned if pinned is None else np.asarray(pinned, dtype=int)
    if local:
        pinned = np.union1d(pinned, window_pins(system))
    norms = np.linalg.norm(system.A, axis=0)
    unobserved = np.flatnonzero(norms <= 1e-12 * max(norms.max(), 1e-300))
    if "speed" in system.col_map:
        # a vanishing speed column is the degeneracy being diagnosed, keep it
        unobserved = unobserved[unobserved != system.col_map["speed"].start]
    free = np.setdiff1d(np.arange(system.n_cols), np.union1d(pinned, unobserved))
    A = system.A[:, free]
    As, scale = equilibrate(A)
    U, s, Vt = np.linalg.svd(As, full_matrices=False)
    if s.size < free.size:
        s = np.concatenate([s, np.zeros(free.size - s.size)])
        _, _, Vt = np.linalg.svd(np.vstack([As, np.zeros((free.size - As.shape[0], free.size))]))
    spectrum = s ** 2
    smax = spectrum[0] if spectrum.size else 0.0
    nullmask = spectrum <= null_tol * smax
    rank = int((~nullmask).sum())
    basis = np.zeros((system.n_cols, int(nullmask.sum())))
    basis[free] = Vt[nullmask].T
    state = system.state
    labels = []
    for vec in basis.T:
        weights = {name: float(np.sum(vec[sl] ** 2)) for name, sl in system.col_map.items()}
        labels.append(max(weights, key=weights.get))
    speed_flag = None
    if "speed" in system.col_map:
        col = system.col_map["speed"].start
        colnorm = np.linalg.norm(system.A[:, col])
        zero_col = colnorm <= 1e-10 * np.linalg.norm(system.A)
        in_null = bool(np.any(np.abs(basis[col]) >= 0.1)) if basis.size else False
        speed_flag = bool(zero_col or in_null)
    G, cond, dep = gram_test(state.beta, system.detector.angles)
    return IdentifiabilityReport(
        singular_values=s, spectrum=spectrum, rank=rank, rank_deficiency=free.size - rank,
        free_columns=free, null_basis=basis, null_labels=labels, gram=G, gram_condition=cond,
        beta_cot_dependent=dep, breakdown_nodes=breakdown_nodes(state, node_tol),
        speed_inseparable=speed_flag, near_tangent_rows=system.near_tangent_rows,
        folds=system.folds, unobserved=[state.column_labels()[i] for i in unobserved])
