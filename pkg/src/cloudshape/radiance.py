"""Outgoing radiation at the cloud surface.

The radiance leaving a surface point in direction ``phi`` is modelled as
``alpha(x) * beta(phi - arctan h'(x))``: a spatial strength times an angular
profile measured from the local tangent. ``beta`` is stored as a continuous
piecewise-linear function with knots at ``pi * p / P``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORMALIZATIONS = ("nadir", "unit-integral", "none")


class DomainError(ValueError):
    """Argument outside the domain of a profile or geometry."""


@dataclass(frozen=True)
class BetaProfile:
    """Piecewise-linear angular emission profile on ``[0, pi]``.

    ``normalization`` records the gauge convention. Under ``"nadir"`` the
    profile must satisfy ``beta(pi/2) == 1``; ``"none"`` is used for
    intermediate, gauge-transformed profiles.
    """

    knots: np.ndarray
    normalization: str = "nadir"

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("beta needs at least two knots")
        if np.any(knots < 0) or not np.all(np.isfinite(knots)):
            raise ValueError("beta knots must be finite and non-negative")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.normalization == "nadir" and abs(self.nadir_value - 1.0) > 1e-12:
            raise ValueError(f"nadir-normalized beta has beta(pi/2) = {self.nadir_value!r}")
        if self.normalization == "unit-integral" and abs(self.integral - 1.0) > 1e-12:
            raise ValueError(f"unit-integral beta integrates to {self.integral!r}")

    @classmethod
    def sine(cls, P: int = 10) -> "BetaProfile":
        """Knots sampled from ``sin``; nadir-normalized when P is even."""
        knots = np.sin(np.pi * np.arange(P + 1) / P)
        knots[0] = knots[-1] = 0.0
        norm = "nadir" if P % 2 == 0 else "none"
        return cls(knots, norm)

    @classmethod
    def from_function(cls, fn, P: int = 10, normalization: str = "nadir") -> "BetaProfile":
        knots = np.asarray(fn(np.pi * np.arange(P + 1) / P), dtype=float)
        return cls(knots, "none").normalized(normalization)

    @property
    def P(self) -> int:
        return self.knots.size - 1

    @property
    def spacing(self) -> float:
        return np.pi / self.P

    @property
    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.P + 1) / self.P

    @property
    def nadir_value(self) -> float:
        return float(np.interp(np.pi / 2, self.angles, self.knots))

    @property
    def integral(self) -> float:
        return float(np.sum(0.5 * (self.knots[1:] + self.knots[:-1])) * self.spacing)

    @property
    def nadir_knot(self) -> int | None:
        return self.P // 2 if self.P % 2 == 0 else None

    def scaled(self, c: float) -> "BetaProfile":
        return BetaProfile(self.knots * c, "none")

    def normalized(self, normalization: str = "nadir") -> "BetaProfile":
        if normalization == "none":
            return BetaProfile(self.knots, "none")
        ref = self.nadir_value if normalization == "nadir" else self.integral
        if ref <= 0:
            raise DomainError(f"cannot normalize beta with reference value {ref}")
        return BetaProfile(self.knots / ref, normalization)

    def with_knots(self, knots) -> "BetaProfile":
        return BetaProfile(knots, "none")

    def hat_weights(self, angle) -> np.ndarray:
        """Interpolation weights, shape ``(len(angle), P+1)``."""
        a = np.atleast_1d(np.asarray(angle, dtype=float))
        u = a / self.spacing
        k = np.clip(np.floor(u).astype(int), 0, self.P - 1)
        frac = u - k
        w = np.zeros((a.size, self.P + 1))
        rows = np.arange(a.size)
        w[rows, k] = 1.0 - frac
        w[rows, k + 1] += frac
        return w

    def integral_weights(self, a0, a1) -> np.ndarray:
        """Exact integrals of each hat function over ``[a0, a1]``.

        Limits are clipped to ``[0, pi]``; the result has shape
        ``(len(a0), P+1)`` and ``W @ knots`` integrates the profile.
        """
        a0 = np.clip(np.atleast_1d(np.asarray(a0, dtype=float)), 0.0, np.pi)
        a1 = np.clip(np.atleast_1d(np.asarray(a1, dtype=float)), 0.0, np.pi)
        return self._tent_cdf(a1) - self._tent_cdf(a0)

    def _tent_cdf(self, a: np.ndarray) -> np.ndarray:
        d = self.spacing
        u = a[:, None] / d - np.arange(self.P + 1)[None, :]
        out = np.where(u <= -1, 0.0, np.where(u <= 0, 0.5 * (u + 1) ** 2,
                       np.where(u <= 1, 1.0 - 0.5 * (1 - u) ** 2, 1.0)))
        return out * d


def _check_angle(angle):
    a = np.asarray(angle, dtype=float)
    if np.any(a < 0) or np.any(a > np.pi) or not np.all(np.isfinite(a)):
        raise DomainError("emission angle must lie in [0, pi]")
    return a


def beta_eval(profile: BetaProfile, angle):
    a = _check_angle(angle)
    out = np.interp(a, profile.angles, profile.knots)
    return float(out) if out.ndim == 0 else out


def beta_slope(profile: BetaProfile, angle):
    """Slope of the interpolant; interior knots take the left segment."""
    a = _check_angle(angle)
    seg = np.clip(np.ceil(a / profile.spacing).astype(int) - 1, 0, profile.P - 1)
    slopes = np.diff(profile.knots) / profile.spacing
    out = slopes[seg]
    return float(out) if np.ndim(out) == 0 else out


def emission(alpha_value: float, profile: BetaProfile, slope: float, phi: float) -> float:
    """Radiance leaving a surface of given slope in direction ``phi``."""
    arg = phi - np.arctan(slope)
    if not 0.0 < arg < np.pi:
        raise DomainError("direction is not outgoing for this surface element")
    return alpha_value * beta_eval(profile, arg)


@dataclass(frozen=True)
class AlphaField:
    """Per-segment emission strength.

    Graph clouds carry ``N-1`` upper-segment values plus ``alpha_L`` and
    ``alpha_R`` for the vertical sides; polar clouds carry ``N`` values and
    no sides.
    """

    segment_values: np.ndarray
    alpha_L: float | None = None
    alpha_R: float | None = None

    def __post_init__(self):
        vals = np.array(self.segment_values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "segment_values", vals)
        sides = [v for v in (self.alpha_L, self.alpha_R) if v is not None]
        if np.any(vals < 0) or any(v < 0 for v in sides):
            raise ValueError("alpha values must be non-negative")
        if (self.alpha_L is None) != (self.alpha_R is None):
            raise ValueError("alpha_L and alpha_R go together")

    @property
    def has_sides(self) -> bool:
        return self.alpha_L is not None

    def as_vector(self) -> np.ndarray:
        if self.has_sides:
            return np.concatenate([self.segment_values, [self.alpha_L, self.alpha_R]])
        return np.array(self.segment_values)

    def from_vector(self, vec) -> "AlphaField":
        vec = np.asarray(vec, dtype=float)
        if self.has_sides:
            return AlphaField(vec[:-2], float(vec[-2]), float(vec[-1]))
        return AlphaField(vec)

    def scaled(self, c: float) -> "AlphaField":
        return self.from_vector(self.as_vector() * c)

    @classmethod
    def constant(cls, value: float, n_segments: int, sides: bool = True) -> "AlphaField":
        vals = np.full(n_segments, float(value))
        return cls(vals, float(value), float(value)) if sides else cls(vals)


@dataclass(frozen=True)
class SunModel:
    """Sun at elevation ``elevation`` above the horizon with shade floor ``floor``.

    The sun sits in the +x half plane unless ``mirror`` is set.
    """

    elevation: float
    floor: float = 0.2
    mirror: bool = False

    def __post_init__(self):
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError("floor must lie in [0, 1]")
        if not 0.0 < self.elevation < np.pi:
            raise ValueError("sun elevation must lie in (0, pi)")

    @property
    def direction(self) -> np.ndarray:
        """Unit vector pointing from the cloud toward the sun."""
        sx = np.cos(self.elevation)
        return np.array([-sx if self.mirror else sx, np.sin(self.elevation)])

    @property
    def direction_angle(self) -> float:
        d = self.direction
        return float(np.arctan2(d[1], d[0]))


def solar_alpha(cloud, sun: SunModel) -> AlphaField:
    """Solar-illumination strength evaluated at segment midpoints.

    Lit segments get the cosine of the incidence angle; segments facing
    away, below the floor, or shadowed by another part of the cloud get
    ``sun.floor``.
    """
    from .geometry import GraphCloud, is_blocked

    bnd = cloud.boundary()
    d = sun.direction
    vals = np.full(bnd.n_segments, sun.floor)
    for k in range(bnd.n_segments):
        if bnd.seg_alpha[k] < 0:
            continue
        mid = 0.5 * (bnd.seg_a[k] + bnd.seg_b[k])
        cosi = float(d @ bnd.normals[k])
        if cosi >= sun.floor and not is_blocked(cloud, mid, sun.direction_angle, segment=k):
            vals[k] = cosi
    out = np.zeros(bnd.n_alpha)
    emitting = bnd.seg_alpha >= 0
    out[bnd.seg_alpha[emitting]] = vals[emitting]
    if isinstance(cloud, GraphCloud):
        return AlphaField(out[:-2], float(out[-2]), float(out[-1]))
    return AlphaField(out)
