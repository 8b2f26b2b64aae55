"""Discrete measurement operators.

Pixel values are averages of the radiance reaching the detector over the
pixel's extent. Along a detector line (or circle) the hit segment only
changes where a back-ray passes through a boundary vertex, so the detector
coordinate is split at those "vertex events" and at pixel edges; each
sub-interval sees a single segment and is integrated exactly. With
piecewise-constant alpha and piecewise-linear beta this makes the discrete
forward map continuous and piecewise smooth in the unknowns, and the same
bookkeeping yields its exact derivatives (see :mod:`cloudshape.jacobian`).

A midpoint rule with ``subsamples`` rays per pixel is available through
``quadrature="midpoint"``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import TWO_PI, Boundary, GraphCloud, PolarCloud
from .radiance import AlphaField, BetaProfile

MISS, HIT, BLOCKED = 0, 1, 2
MASK_NAMES = {MISS: "MISS", HIT: "HIT", BLOCKED: "BLOCKED"}


class NoCloudError(ValueError):
    pass


def _check_angles(angles, lo_open=True):
    a = np.asarray(angles, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("need a 1-d list of angles")
    if np.any(np.diff(a) <= 0):
        raise ValueError("angles must be strictly increasing")
    if lo_open and (a[0] <= 0 or a[-1] >= np.pi):
        raise ValueError("detector-line angles must lie in (0, pi)")
    if not lo_open and (a[0] < 0 or a[-1] > np.pi):
        raise ValueError("detector-circle angles must lie in [0, pi]")
    return a


@dataclass(frozen=True)
class SpeedParam:
    """Ratio (v_s - v_c) / v_s between cloud-frame and detector coordinates."""

    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.lam <= 2.0:
            raise ValueError("lambda must lie in (0, 2]")


def _lam(speed) -> float:
    if isinstance(speed, SpeedParam):
        return speed.lam
    return SpeedParam(float(speed)).lam


@dataclass(frozen=True)
class DetectorLine:
    """Pixels ``[n h, (n+1) h)`` for ``n_start <= n < n_stop`` at altitude ``Z``."""

    Z: float
    pixel_size: float
    n_start: int
    n_stop: int
    angles: np.ndarray
    subsamples: int = 8
    quadrature: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "angles", _check_angles(self.angles))
        if self.pixel_size <= 0 or self.n_stop <= self.n_start:
            raise ValueError("empty or invalid pixel grid")
        if self.subsamples < 1:
            raise ValueError("subsamples must be >= 1")
        if self.quadrature not in ("exact", "midpoint"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")

    kind = "line"

    @classmethod
    def covering(cls, cloud: GraphCloud, Z: float, pixel_size: float, angles,
                 margin: int = 2, **kw) -> "DetectorLine":
        """Smallest pixel range that sees the whole cloud at every angle."""
        angles = _check_angles(angles)
        v = cloud.boundary().vertices
        cot = 1.0 / np.tan(angles)
        X = v[:, 0][:, None] + (Z - v[:, 1])[:, None] * cot[None, :]
        lo = int(np.floor(X.min() / pixel_size)) - margin
        hi = int(np.ceil(X.max() / pixel_size)) + margin
        return cls(Z, pixel_size, lo, hi, angles, **kw)

    @property
    def J(self) -> int:
        return self.angles.size

    @property
    def pixel_index(self) -> np.ndarray:
        return np.arange(self.n_start, self.n_stop)

    @property
    def centers(self) -> np.ndarray:
        return (self.pixel_index + 0.5) * self.pixel_size

    def edges(self, lam: float = 1.0) -> np.ndarray:
        return lam * self.pixel_size * np.arange(self.n_start, self.n_stop + 1)


@dataclass(frozen=True)
class DetectorCircle:
    """``n_pixels`` arcs of width ``2 pi / n_pixels`` on the circle of radius ``R``.

    Angles are taken in the detector's local frame: ``pi/2`` looks at the
    origin, 0 and ``pi`` are tangent to the circle.
    """

    R: float
    n_pixels: int
    angles: np.ndarray
    subsamples: int = 8
    quadrature: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "angles", _check_angles(self.angles, lo_open=False))
        if self.R <= 0 or self.n_pixels < 1:
            raise ValueError("invalid detector circle")
        if self.quadrature not in ("exact", "midpoint"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")

    kind = "circle"

    @property
    def dTheta(self) -> float:
        return TWO_PI / self.n_pixels

    @property
    def J(self) -> int:
        return self.angles.size

    @property
    def pixel_index(self) -> np.ndarray:
        return np.arange(self.n_pixels)

    @property
    def centers(self) -> np.ndarray:
        return (self.pixel_index + 0.5) * self.dTheta

    def edges(self, lam: float = 1.0) -> np.ndarray:
        return self.dTheta * np.arange(self.n_pixels + 1)


@dataclass
class MeasurementSet:
    """Pixel-averaged radiance ``values[n, j]`` with per-entry ``mask``."""

    values: np.ndarray
    mask: np.ndarray
    detector: DetectorLine | DetectorCircle
    folds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.folds is None:
            self.folds = np.zeros(self.detector.J, dtype=bool)

    @property
    def angles(self) -> np.ndarray:
        return self.detector.angles

    @property
    def hit(self) -> np.ndarray:
        return self.mask == HIT

    def copy_with(self, values) -> "MeasurementSet":
        return replace(self, values=np.array(values, dtype=float), mask=self.mask.copy())

    def to_csv(self, path) -> None:
        det = self.detector
        center_name = "X_center" if det.kind == "line" else "Theta_center"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", center_name, "j", "phi_j", "value", "mask"])
            for i, (n, c) in enumerate(zip(det.pixel_index, det.centers)):
                for j, phi in enumerate(det.angles):
                    w.writerow([int(n), repr(float(c)), j, repr(float(phi)),
                                repr(float(self.values[i, j])), MASK_NAMES[int(self.mask[i, j])]])

    @classmethod
    def from_csv(cls, path, detector) -> "MeasurementSet":
        values = np.zeros((detector.pixel_index.size, detector.J))
        mask = np.zeros(values.shape, dtype=int)
        codes = {v: k for k, v in MASK_NAMES.items()}
        offset = int(detector.pixel_index[0])
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                i, j = int(row["n"]) - offset, int(row["j"])
                values[i, j] = float(row["value"])
                mask[i, j] = codes[row["mask"]]
        return cls(values, mask, detector)


# --------------------------------------------------------------------------
# scan engine


class _LineGeom:
    a = 0.0
    period = None

    def __init__(self, Z):
        self.Z = Z

    def rays(self, t, phi):
        origins = np.column_stack([t, np.full_like(t, self.Z)])
        return origins, np.full_like(t, phi)

    def events(self, bnd: Boundary, phi):
        V = bnd.vertices
        cot = np.cos(phi) / np.sin(phi)
        pos = V[:, 0] + (self.Z - V[:, 1]) * cot
        grad = np.tile([1.0, -cot], (len(V), 1))
        s = (self.Z - V[:, 1]) / np.sin(phi)
        return pos, grad, np.arange(len(V)), s


class _CircleGeom:
    a = 1.0
    period = TWO_PI

    def __init__(self, R):
        self.R = R

    def rays(self, t, phi):
        origins = self.R * np.column_stack([np.cos(t), np.sin(t)])
        return origins, t + phi - np.pi / 2

    def events(self, bnd: Boundary, phi):
        V = bnd.vertices
        rho = np.hypot(V[:, 0], V[:, 1])
        vartheta = np.arctan2(V[:, 1], V[:, 0])
        c = self.R * np.cos(phi) / rho
        ok = np.abs(c) < 1.0 - 1e-12
        vid = np.flatnonzero(ok)
        if vid.size == 0:
            return np.zeros(0), np.zeros((0, 2)), vid, np.zeros(0)
        acos = np.arccos(c[ok])
        root = np.sqrt(1.0 - c[ok] ** 2)
        gth = np.column_stack([-V[vid, 1], V[vid, 0]]) / rho[vid, None] ** 2
        grho = V[vid] / rho[vid, None]
        k = (self.R * np.cos(phi) / (rho[vid] ** 2 * root))[:, None]
        pos, grad, ids = [], [], []
        for sign in (1.0, -1.0):
            pos.append((vartheta[vid] - phi + sign * acos) % TWO_PI)
            grad.append(gth + sign * k * grho)
            ids.append(vid)
        pos = np.concatenate(pos)
        grad = np.vstack(grad)
        ids = np.concatenate(ids)
        P = self.R * np.column_stack([np.cos(pos), np.sin(pos)])
        s = np.linalg.norm(P - V[ids], axis=1)
        return pos, grad, ids, s


def _geom_for(det):
    return _LineGeom(det.Z) if det.kind == "line" else _CircleGeom(det.R)


def _wrap_arg(arg):
    return (arg + np.pi) % TWO_PI - np.pi


@dataclass
class _AngleScan:
    values: np.ndarray
    mask: np.ndarray
    fold: bool
    jac: np.ndarray | None = None


def _scan_angle(bnd: Boundary, geom, phi, edges, alpha, beta: BetaProfile, *,
                lam=1.0, derivs=False, with_speed=False, occlusion=True, n_shape=0,
                stretch=None):
    n_pix = edges.size - 1
    L = edges[1] - edges[0]
    span = edges[-1] - edges[0]
    tol = 1e-12 * span

    ev_pos, ev_grad, ev_vid, ev_s = geom.events(bnd, phi)
    if geom.period is None:
        reach = (ev_pos.min(), ev_pos.max())
    inside = (ev_pos > edges[0]) & (ev_pos < edges[-1])
    ev_pos, ev_grad, ev_vid, ev_s = ev_pos[inside], ev_grad[inside], ev_vid[inside], ev_s[inside]

    pts = np.sort(np.concatenate([edges, ev_pos]))
    t0, t1 = pts[:-1], pts[1:]
    keep = (t1 - t0) > tol
    t0, t1 = t0[keep], t1[keep]
    mid = 0.5 * (t0 + t1)
    pixel = np.clip(np.searchsorted(edges, mid, side="right") - 1, 0, n_pix - 1)

    origins, dirs = geom.rays(mid, phi)
    back = -np.column_stack([np.cos(dirs), np.sin(dirs)])

    if not occlusion:
        return _scan_all_hits(bnd, geom, phi, t0, t1, mid, pixel, origins, back, dirs,
                              alpha, beta, n_pix, L)

    seg, s = _cast_where(bnd, geom, origins, back, mid, reach if geom.period is None else None)
    hit = seg >= 0
    segc = np.where(hit, seg, 0)
    arg_mid = _wrap_arg(dirs - bnd.normal_angles[segc] + np.pi / 2)
    aidx = bnd.seg_alpha[segc]
    lit = hit & (aidx >= 0) & (arg_mid >= -1e-12) & (arg_mid <= np.pi + 1e-12)
    arg0 = arg_mid - geom.a * (mid - t0)
    arg1 = arg_mid + geom.a * (t1 - mid)
    alpha_k = np.where(lit, alpha[np.where(aidx >= 0, aidx, 0)], 0.0)

    if geom.a == 0.0:
        W = (t1 - t0)[:, None] * beta.hat_weights(np.clip(arg_mid, 0, np.pi))
    else:
        W = beta.integral_weights(arg0, arg1)
    Wb = W @ beta.knots
    integ = alpha_k * Wb

    values = np.bincount(pixel, integ, minlength=n_pix) / L
    any_lit = np.bincount(pixel, lit, minlength=n_pix) > 0
    any_hit = np.bincount(pixel, hit, minlength=n_pix) > 0
    mask = np.where(any_lit, HIT, np.where(any_hit, BLOCKED, MISS))

    fold = _detect_fold(bnd, geom, origins, back, s, seg, lit)
    scan = _AngleScan(values, mask, fold)
    if not derivs:
        return scan

    n_alpha = bnd.n_alpha
    P1 = beta.P + 1
    n_cols = n_alpha + P1 + n_shape + (1 if with_speed else 0)
    jac = np.zeros((n_pix, n_cols))
    li = np.flatnonzero(lit)
    pl = pixel[li]
    np.add.at(jac, (pl, aidx[li]), Wb[li] / L)
    np.add.at(jac, (pl[:, None], n_alpha + np.arange(P1)[None, :]),
              alpha_k[li, None] * W[li] / L)

    # value change through the emitting segment's normal angle
    if geom.a == 0.0:
        dI_dnu = -alpha_k * beta_chord_slope(beta, arg_mid) * (t1 - t0)
    else:
        dI_dnu = -alpha_k * (_beta_clipped(beta, arg1) - _beta_clipped(beta, arg0))
    ga, gb = bnd.normal_angle_gradients()
    sh0 = n_alpha + P1
    for end, g in ((0, ga), (1, gb)):
        v = bnd.seg_vertices[seg[li], end]
        sidx = bnd.vertex_shape[v]
        ok = sidx >= 0
        coef = dI_dnu[li] * np.sum(g[seg[li]] * bnd.vertex_dir[v], axis=1)
        np.add.at(jac, (pl[ok], sh0 + sidx[ok]), coef[ok] / L)
        if with_speed and stretch is not None:
            coef = dI_dnu[li] * np.sum(g[seg[li]] * stretch[v], axis=1)
            np.add.at(jac, (pl, n_cols - 1), coef / L)

    # value jumps moving with vertex events
    if ev_pos.size:
        order = np.argsort(ev_pos, kind="stable")
        ev_pos, ev_grad, ev_vid, ev_s = ev_pos[order], ev_grad[order], ev_vid[order], ev_s[order]
        group = np.concatenate([[0], np.cumsum(np.diff(ev_pos) > tol)])
        owner = np.ones(ev_pos.size, dtype=bool)
        gids, counts = np.unique(group, return_counts=True)
        # coincident events: the vertex nearest the detector owns the jump
        for g_id in gids[counts > 1]:
            members = np.flatnonzero(group == g_id)
            owner[members] = False
            owner[members[np.argmin(ev_s[members])]] = True
        kr = np.searchsorted(t0, ev_pos - tol)
        valid = owner & (kr >= 1) & (kr < t0.size)
        kr_c = np.clip(kr, 1, t0.size - 1)
        kl_c = kr_c - 1
        valid &= (np.abs(t0[kr_c] - ev_pos) <= 2 * tol) & (np.abs(t1[kl_c] - ev_pos) <= 2 * tol)
        v_r = alpha_k[kr_c] * _beta_clipped(beta, arg0[kr_c])
        v_l = alpha_k[kl_c] * _beta_clipped(beta, arg1[kl_c])
        jump = np.where(valid, v_l - v_r, 0.0)
        sidx = bnd.vertex_shape[ev_vid]
        dt = np.sum(ev_grad * bnd.vertex_dir[ev_vid], axis=1)
        ok = valid & (sidx >= 0)
        if stretch is not None:
            dt_speed = np.sum(ev_grad * stretch[ev_vid], axis=1) - ev_pos / lam
        else:
            dt_speed = -ev_pos / lam
        # an event on a pixel edge is a kink; split it (symmetric derivative)
        for side, w in ((kr_c, 1.0), (kl_c, 0.0)):
            share = np.where(pixel[kr_c] == pixel[kl_c], w, 0.5)
            np.add.at(jac, (pixel[side[ok]], sh0 + sidx[ok]), share[ok] * jump[ok] * dt[ok] / L)
            if with_speed:
                np.add.at(jac, (pixel[side[valid]], n_cols - 1),
                          share[valid] * jump[valid] * dt_speed[valid] / L)
    scan.jac = jac
    return scan


def _cast_where(bnd, geom, origins, back, t, reach):
    """Cast only the rays that can reach the cloud (parallel rays beyond the
    outermost vertex projections cannot)."""
    if reach is None:
        return bnd.cast(origins, back)
    cand = np.flatnonzero((t >= reach[0]) & (t <= reach[1]))
    seg = np.full(t.size, -1)
    s = np.full(t.size, np.inf)
    if cand.size:
        seg[cand], s[cand] = bnd.cast(origins[cand], back[cand])
    return seg, s


def _beta_clipped(beta, arg):
    return np.interp(np.clip(arg, 0.0, np.pi), beta.angles, beta.knots)


def beta_chord_slope(beta, arg):
    """Chord slope of beta; on an interior knot the mean of the two chords.

    The mean is what a central difference sees at the kink, and it gives
    the sine profile a level tangent at nadir.
    """
    a = np.clip(arg, 0.0, np.pi)
    slopes = np.diff(beta.knots) / beta.spacing
    u = a / beta.spacing
    k = np.rint(u).astype(int)
    on_knot = (np.abs(u - k) <= 1e-12) & (k > 0) & (k < beta.P)
    seg = np.clip(np.ceil(u).astype(int) - 1, 0, beta.P - 1)
    kk = np.clip(k, 1, beta.P - 1)
    return np.where(on_knot, 0.5 * (slopes[kk - 1] + slopes[kk]), slopes[seg])


def _scan_all_hits(bnd, geom, phi, t0, t1, mid, pixel, origins, back, dirs, alpha, beta, n_pix, L):
    S = bnd.cast(origins, back, all_hits=True)
    theta = -back
    facing = (theta @ bnd.normals.T) > 0
    ray, seg = np.nonzero(np.isfinite(S) & facing & (bnd.seg_alpha[None, :] >= 0))
    arg_mid = np.clip(_wrap_arg(dirs[ray] - bnd.normal_angles[seg] + np.pi / 2), 0, np.pi)
    if geom.a == 0.0:
        integ = (t1 - t0)[ray] * _beta_clipped(beta, arg_mid)
    else:
        a0 = arg_mid - (mid - t0)[ray]
        a1 = arg_mid + (t1 - mid)[ray]
        integ = beta.integral_weights(a0, a1) @ beta.knots
    integ = integ * alpha[bnd.seg_alpha[seg]]
    values = np.bincount(pixel[ray], integ, minlength=n_pix) / L
    lit = np.bincount(pixel[ray], minlength=n_pix) > 0
    return _AngleScan(values, np.where(lit, HIT, MISS), False)


def _detect_fold(bnd, geom, origins, back, s, seg, lit):
    """True when the visible surface coordinate runs backwards along the scan."""
    if lit.sum() < 2:
        return False
    pts = origins[lit] + s[lit, None] * back[lit]
    if geom.period is None:
        upper = bnd.seg_alpha[seg[lit]] < bnd.n_alpha - 2
        coord = pts[upper, 0]
        d = np.diff(coord)
    else:
        coord = np.arctan2(pts[:, 1], pts[:, 0])
        d = _wrap_arg(np.diff(coord))
    return bool(np.any(d < -1e-9 * bnd.diameter))


def _scan_midpoint(bnd, geom, phi, edges, m, alpha, beta, occlusion=True):
    n_pix = edges.size - 1
    L = edges[1] - edges[0]
    frac = (np.arange(m) + 0.5) / m
    t = (edges[:-1, None] + L * frac[None, :]).ravel()
    pixel = np.repeat(np.arange(n_pix), m)
    origins, dirs = geom.rays(t, phi)
    back = -np.column_stack([np.cos(dirs), np.sin(dirs)])
    if not occlusion:
        S = bnd.cast(origins, back, all_hits=True)
        facing = ((-back) @ bnd.normals.T) > 0
        ray, seg = np.nonzero(np.isfinite(S) & facing & (bnd.seg_alpha[None, :] >= 0))
    else:
        seg_all, _ = bnd.cast(origins, back)
        ray = np.flatnonzero(seg_all >= 0)
        seg = seg_all[ray]
    arg = _wrap_arg(dirs[ray] - bnd.normal_angles[seg] + np.pi / 2)
    aidx = bnd.seg_alpha[seg]
    ok = (aidx >= 0) & (arg >= 0) & (arg <= np.pi)
    val = np.where(ok, alpha[np.where(aidx >= 0, aidx, 0)] * _beta_clipped(beta, arg), 0.0)
    values = np.bincount(pixel[ray], val, minlength=n_pix) / m
    lit = np.bincount(pixel[ray], ok, minlength=n_pix) > 0
    hit = np.bincount(pixel[ray], minlength=n_pix) > 0
    return _AngleScan(values, np.where(lit, HIT, np.where(hit, BLOCKED, MISS)), False)


def scan(cloud, alpha: AlphaField, beta: BetaProfile, det, *, lam=1.0, derivs=False,
         with_speed=False, occlusion=True, stretch=None):
    """Run the measurement scan for every angle; returns the per-angle results.

    With ``with_speed`` the last Jacobian column is the derivative in
    ``lam``. ``stretch`` optionally gives the velocity of every boundary
    vertex per unit ``lam`` (for clouds whose abscissas scale with it).
    """
    bnd = cloud.boundary()
    avec = alpha.as_vector()
    if avec.size != bnd.n_alpha:
        raise ValueError(f"alpha has {avec.size} values, cloud needs {bnd.n_alpha}")
    geom = _geom_for(det)
    edges = det.edges(lam)
    out = []
    for phi in det.angles:
        if det.quadrature == "midpoint" and not derivs:
            out.append(_scan_midpoint(bnd, geom, phi, edges, det.subsamples, avec, beta, occlusion))
        else:
            out.append(_scan_angle(bnd, geom, phi, edges, avec, beta, lam=lam, derivs=derivs,
                                   with_speed=with_speed, occlusion=occlusion,
                                   n_shape=cloud.N, stretch=stretch))
    return out


def _collect(scans, det) -> MeasurementSet:
    values = np.column_stack([s.values for s in scans])
    mask = np.column_stack([s.mask for s in scans])
    values = np.where(mask == MISS, 0.0, np.maximum(values, 0.0))
    return MeasurementSet(values, mask, det, np.array([s.fold for s in scans]))


def measure_graph(cloud: GraphCloud, alpha: AlphaField, beta: BetaProfile, det: DetectorLine,
                  speed=1.0, *, occlusion=True) -> MeasurementSet:
    """Pixel-averaged radiance of a graph cloud seen from a detector line.

    Detector position ``X`` observes the cloud-frame abscissa ``lam * X``.
    """
    if det.Z <= cloud.heights.max():
        raise ValueError("detector line must lie above the cloud")
    return _collect(scan(cloud, alpha, beta, det, lam=_lam(speed), occlusion=occlusion), det)


def measure_polar(cloud: PolarCloud, alpha: AlphaField, beta: BetaProfile, det: DetectorCircle,
                  *, occlusion=True) -> MeasurementSet:
    """Arc-averaged radiance of a polar cloud seen from a detector circle."""
    if det.R <= cloud.radii.max():
        raise ValueError("detector circle must enclose the cloud")
    return _collect(scan(cloud, alpha, beta, det, occlusion=occlusion), det)


def detect_support(ms: MeasurementSet, nadir_index: int | None = None,
                   floor: float | None = None) -> tuple[float, float]:
    """Cloud extent from the first and last non-zero nadir pixels.

    Returns the left edge of the first and the right edge of the last pixel
    whose value exceeds ``floor`` (default ``1e-12`` of the row maximum).
    """
    det = ms.detector
    if det.kind != "line":
        raise ValueError("support detection needs a detector line")
    if nadir_index is None:
        close = np.flatnonzero(np.isclose(det.angles, np.pi / 2, atol=1e-12))
        if close.size == 0:
            raise ValueError("no nadir angle among the measurement directions")
        nadir_index = int(close[0])
    row = ms.values[:, nadir_index]
    peak = row.max()
    if peak <= 0:
        raise NoCloudError("nadir row is empty")
    if floor is None:
        floor = 1e-12 * peak
    nz = np.flatnonzero(row > floor)
    if nz.size == 0:
        raise NoCloudError("no nadir pixel above the support floor")
    n = det.pixel_index
    return float(n[nz[0]] * det.pixel_size), float((n[nz[-1]] + 1) * det.pixel_size)


def estimate_speed(ms: MeasurementSet, h_B: float, nadir_index: int | None = None,
                   floor: float | None = None) -> float:
    """Speed parameter from the parallax of the cloud's bottom corners.

    Looking at ``phi > pi/2`` the first lit pixel comes from the left bottom
    corner, at ``phi < pi/2`` the last one from the right corner. Their
    offsets from the nadir support are ``(Z - h_B) cot(phi) / lam``; ``lam``
    is fitted by least squares over the oblique angles whose silhouette
    lies inside the detector.
    """
    det = ms.detector
    if det.kind != "line":
        raise ValueError("speed estimation needs a detector line")
    X_L, X_R = detect_support(ms, nadir_index, floor)
    cot = 1.0 / np.tan(det.angles)
    offsets, weights = [], []
    for j in np.flatnonzero(np.abs(cot) > 1e-6):
        row = ms.values[:, j]
        thr = 1e-12 * row.max() if floor is None else floor
        nz = np.flatnonzero(row > thr)
        if nz.size == 0:
            continue
        n = det.pixel_index
        if cot[j] < 0:
            if nz[0] == 0:
                continue  # silhouette cut off by the detector edge
            offsets.append(n[nz[0]] * det.pixel_size - X_L)
        else:
            if nz[-1] == row.size - 1:
                continue
            offsets.append((n[nz[-1]] + 1) * det.pixel_size - X_R)
        weights.append((det.Z - h_B) * cot[j])
    if not offsets:
        raise ValueError("no oblique angle to estimate the speed from")
    w, o = np.array(weights), np.array(offsets)
    inv_lam = float(w @ o / (w @ w))
    if inv_lam <= 0:
        raise ValueError("silhouette offsets are inconsistent with a positive speed")
    return 1.0 / inv_lam


def add_noise(ms: MeasurementSet, sigma: float, seed: int) -> MeasurementSet:
    """Gaussian noise of std ``sigma * max(values)`` on HIT entries, clamped at 0."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(ms.values.shape) * sigma * ms.values.max()
    values = np.where(ms.hit, np.maximum(ms.values + noise, 0.0), ms.values)
    return ms.copy_with(values)
