"""Cloud boundary parameterizations and ray casting.

Angles follow one convention throughout: a direction ``phi`` is measured
from the +x axis, ``theta = (cos phi, sin phi)``, and ``0 < phi < pi`` points
upward. Rays are traced backward from the detector, i.e. along ``-theta``.

Both cloud kinds reduce to a :class:`Boundary`: a closed polygon whose
segments are oriented counter-clockwise so that the outward normal of a
segment ``a -> b`` is ``(dy, -dx) / |b - a|``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .radiance import DomainError

TWO_PI = 2.0 * np.pi


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


@dataclass(frozen=True)
class SurfaceHit:
    s: float
    x_or_theta: float
    segment_index: int
    normal: np.ndarray

    @property
    def point_on(self):
        return self.x_or_theta


@dataclass(frozen=True)
class Boundary:
    """Closed polygon with bookkeeping for emission and shape derivatives.

    ``vertex_shape[v]`` names the shape unknown that moves vertex ``v`` (or -1)
    and ``vertex_dir[v]`` is the derivative of the vertex position with
    respect to it. ``seg_alpha[k]`` indexes the alpha vector (-1 = dark).
    """

    vertices: np.ndarray
    vertex_shape: np.ndarray
    vertex_dir: np.ndarray
    seg_vertices: np.ndarray
    seg_alpha: np.ndarray
    n_alpha: int

    @property
    def n_segments(self) -> int:
        return len(self.seg_vertices)

    @cached_property
    def seg_a(self):
        return self.vertices[self.seg_vertices[:, 0]]

    @cached_property
    def seg_b(self):
        return self.vertices[self.seg_vertices[:, 1]]

    @cached_property
    def normals(self):
        d = self.seg_b - self.seg_a
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def seg_lengths(self):
        return np.linalg.norm(self.seg_b - self.seg_a, axis=1)

    @cached_property
    def normal_angles(self):
        return np.arctan2(self.normals[:, 1], self.normals[:, 0])

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.ptp(v, axis=0)))

    def normal_angle_gradients(self):
        """d(normal angle)/d(endpoint a) and /d(endpoint b), each ``(S, 2)``."""
        d = self.seg_b - self.seg_a
        g = np.stack([-d[:, 1], d[:, 0]], axis=1) / np.sum(d * d, axis=1, keepdims=True)
        return -g, g

    def cast(self, origins, back_dirs, *, all_hits=False):
        """Intersect back-rays with every segment.

        Returns ``(segment, s)`` for the nearest transversal hit with ``s > 0``
        (segment -1 and ``s = inf`` on a miss). With ``all_hits`` the full
        ``(rays, segments)`` distance matrix is returned instead.
        """
        O = np.atleast_2d(origins)
        D = np.atleast_2d(back_dirs)
        if len(D) == 1 and len(O) > 1:
            D = np.broadcast_to(D, O.shape)
        Ax, Ay = self.seg_a[:, 0][None, :], self.seg_a[:, 1][None, :]
        E = self.seg_b - self.seg_a
        Ex, Ey = E[:, 0][None, :], E[:, 1][None, :]
        Dx, Dy = D[:, :1], D[:, 1:]
        denom = Dx * Ey - Dy * Ex
        ok = np.abs(denom) > 1e-12 * self.seg_lengths[None, :]
        safe = np.where(ok, denom, 1.0)
        AOx, AOy = Ax - O[:, :1], Ay - O[:, 1:]
        s = (AOx * Ey - AOy * Ex) / safe
        u = (AOx * Dy - AOy * Dx) / safe
        tol = 1e-12
        valid = ok & (s > 1e-12 * self.diameter) & (u >= -tol) & (u <= 1 + tol)
        s = np.where(valid, s, np.inf)
        if all_hits:
            return s
        seg = np.argmin(s, axis=1)
        smin = s[np.arange(s.shape[0]), seg]
        seg = np.where(np.isfinite(smin), seg, -1)
        return seg, smin


@dataclass(frozen=True)
class GraphCloud:
    """Cloud with a piecewise-linear top, vertical sides and a flat bottom."""

    x_L: float
    x_R: float
    h_B: float
    heights: np.ndarray

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        if not self.x_L < self.x_R:
            raise ValueError("need x_L < x_R")
        if h.ndim != 1 or h.size < 3:
            raise ValueError("need at least 3 nodes")
        if np.any(h <= self.h_B):
            raise ValueError("upper boundary must lie strictly above the bottom")

    @property
    def N(self) -> int:
        return self.heights.size

    @property
    def dx(self) -> float:
        return (self.x_R - self.x_L) / (self.N - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_L, self.x_R, self.N)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.heights) / self.dx

    def with_shape(self, heights) -> "GraphCloud":
        return GraphCloud(self.x_L, self.x_R, self.h_B, heights)

    def stretched(self, factor: float) -> "GraphCloud":
        """Same heights over the horizontally scaled support."""
        return GraphCloud(factor * self.x_L, factor * self.x_R, self.h_B, self.heights)

    def boundary(self) -> Boundary:
        return self._boundary

    @cached_property
    def _boundary(self) -> Boundary:
        N = self.N
        verts = np.vstack([np.column_stack([self.x, self.heights]),
                           [[self.x_L, self.h_B], [self.x_R, self.h_B]]])
        vshape = np.concatenate([np.arange(N), [-1, -1]])
        vdir = np.zeros((N + 2, 2))
        vdir[:N, 1] = 1.0
        cL, cR = N, N + 1
        segs = [(j + 1, j) for j in range(N - 1)]
        segs += [(0, cL), (cR, N - 1), (cL, cR)]
        alpha_idx = np.concatenate([np.arange(N + 1), [-1]])
        return Boundary(verts, vshape, vdir, np.array(segs), alpha_idx, N + 1)


@dataclass(frozen=True)
class PolarCloud:
    """Closed star-shaped cloud around the origin.

    Vertices sit at ``theta_j = theta0 + 2*pi*j/N``; consecutive vertices are
    joined by straight chords and the last joins the first.
    """

    radii: np.ndarray
    theta0: float = 0.0
    check_simple: bool = True

    def __post_init__(self):
        r = np.array(self.radii, dtype=float)
        r.setflags(write=False)
        object.__setattr__(self, "radii", r)
        if r.ndim != 1 or r.size < 3:
            raise ValueError("need at least 3 radii")
        if np.any(r <= 0):
            raise ValueError("radii must be positive")
        if self.check_simple and not _is_simple(self.boundary()):
            raise ValueError("polar boundary self-intersects")

    @property
    def N(self) -> int:
        return self.radii.size

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.N

    @property
    def theta(self) -> np.ndarray:
        return self.theta0 + self.dtheta * np.arange(self.N)

    def with_shape(self, radii) -> "PolarCloud":
        return PolarCloud(radii, self.theta0, self.check_simple)

    def boundary(self) -> Boundary:
        return self._boundary

    @cached_property
    def _boundary(self) -> Boundary:
        e = np.column_stack([np.cos(self.theta), np.sin(self.theta)])
        verts = self.radii[:, None] * e
        k = np.arange(self.N)
        segs = np.column_stack([k, (k + 1) % self.N])
        return Boundary(verts, k.copy(), e, segs, k.copy(), self.N)


def _is_simple(bnd: Boundary) -> bool:
    a, b = bnd.seg_a, bnd.seg_b
    S = len(a)
    d = b - a
    # orientation of each endpoint of segment j relative to segment i
    o1 = _cross(d[:, None, :], a[None, :, :] - a[:, None, :])
    o2 = _cross(d[:, None, :], b[None, :, :] - a[:, None, :])
    cross_ij = (o1 * o2 < 0)
    proper = cross_ij & cross_ij.T
    i, j = np.indices((S, S))
    adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == S - 1)
    return not np.any(proper & ~adjacent)


def graph_eval(cloud: GraphCloud, x: float) -> tuple[float, float]:
    """Height and slope of the top boundary; interior nodes take the left slope."""
    if not cloud.x_L <= x <= cloud.x_R:
        raise DomainError(f"x={x} outside [{cloud.x_L}, {cloud.x_R}]")
    h = float(np.interp(x, cloud.x, cloud.heights))
    seg = int(np.clip(np.ceil((x - cloud.x_L) / cloud.dx) - 1, 0, cloud.N - 2))
    return h, float(cloud.slopes[seg])


def surface_normal(slope: float) -> np.ndarray:
    return np.array([-slope, 1.0]) / np.hypot(slope, 1.0)


def _hit_from(bnd, seg, s, point, coord) -> SurfaceHit | None:
    if seg < 0:
        return None
    return SurfaceHit(float(s), float(coord(point)), int(seg), bnd.normals[seg].copy())


def trace_ray_graph(cloud: GraphCloud, X: float, Z: float, phi: float) -> SurfaceHit | None:
    """Nearest boundary point seen from ``(X, Z)`` in direction ``phi``; None on a miss."""
    if not 0.0 < phi < np.pi:
        raise DomainError("phi must lie in (0, pi)")
    if Z <= cloud.heights.max():
        raise DomainError("detector must lie above the cloud")
    bnd = cloud.boundary()
    origin = np.array([X, Z])
    back = -np.array([np.cos(phi), np.sin(phi)])
    seg, s = bnd.cast(origin, back)
    return _hit_from(bnd, seg[0], s[0], origin + s[0] * back, lambda p: p[0])


def trace_ray_polar(cloud: PolarCloud, Theta: float, R: float, phi: float) -> SurfaceHit | None:
    """Back-ray from the detector at angle ``Theta`` on the circle of radius ``R``.

    ``phi`` is measured in the detector's local frame: ``phi = pi/2`` looks
    straight at the origin and the global direction angle is
    ``Theta + phi - pi/2``.
    """
    if R <= cloud.radii.max():
        raise DomainError("detector circle must enclose the cloud")
    bnd = cloud.boundary()
    origin = R * np.array([np.cos(Theta), np.sin(Theta)])
    direction = Theta + phi - np.pi / 2
    back = -np.array([np.cos(direction), np.sin(direction)])
    seg, s = bnd.cast(origin, back)
    return _hit_from(bnd, seg[0], s[0], origin + s[0] * back,
                     lambda p: np.arctan2(p[1], p[0]) % TWO_PI)


def polar_eval(cloud: PolarCloud, theta: float):
    """Boundary point, Cartesian tangent slope and outward normal at angle ``theta``.

    A vertical chord reports a slope of ``+inf`` or ``-inf``.
    """
    if not 0.0 <= theta < TWO_PI:
        raise DomainError("theta must lie in [0, 2 pi)")
    bnd = cloud.boundary()
    k = int(((theta - cloud.theta0) % TWO_PI) // cloud.dtheta) % cloud.N
    a, b = bnd.seg_a[k], bnd.seg_b[k]
    e = np.array([np.cos(theta), np.sin(theta)])
    d = b - a
    # solve r * e = a + u * d
    r = _cross(a, d) / _cross(e, d)
    dx, dy = d
    slope = dy / dx if dx != 0 else np.copysign(np.inf, dy)
    return r * e, float(slope), bnd.normals[k].copy()


def _owning_segments(bnd: Boundary, p, tol):
    a, b = bnd.seg_a, bnd.seg_b
    d = b - a
    u = np.clip(np.sum((p - a) * d, axis=1) / np.sum(d * d, axis=1), 0, 1)
    dist = np.linalg.norm(a + u[:, None] * d - p, axis=1)
    return np.flatnonzero(dist <= tol)


def is_blocked(cloud, p, phi: float, *, segment: int | None = None,
               graze: float = 1e-9) -> bool:
    """True if the half-line from surface point ``p`` in direction ``phi``
    crosses the boundary again.

    Each segment is tested through the signed distances ``d1, d2`` of its
    endpoints to the line; a sign change marks a crossing, which counts when
    it lies ahead of ``p`` by more than ``graze * diameter``. The emitting
    segment (given, or found by proximity) is excluded. The cloud lies below
    the detector line, so every crossing occurs before the detector.
    """
    bnd = cloud.boundary()
    p = np.asarray(p, dtype=float)
    eps = graze * bnd.diameter
    exclude = [segment] if segment is not None else _owning_segments(bnd, p, eps)
    theta = np.array([np.cos(phi), np.sin(phi)])
    a, b = bnd.seg_a, bnd.seg_b
    d1 = _cross(theta, a - p)
    d2 = _cross(theta, b - p)
    crossing = d1 * d2 < 0
    crossing[list(exclude)] = False
    if not crossing.any():
        return False
    w = (d1 / np.where(crossing, d1 - d2, 1.0))[:, None]
    q = a + w * (b - a)
    s = (q - p) @ theta
    return bool(np.any(crossing & (s > eps)))
