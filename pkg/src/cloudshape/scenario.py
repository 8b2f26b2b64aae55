"""Scenario documents: YAML files describing a synthetic experiment.

A scenario names the true cloud, its emission, the detector, the noise and
the initial guess for an inversion. Everything is validated against
:data:`SCHEMA` before anything is built. Bundled scenarios live in the
``scenarios`` package directory and can be referred to by file stem.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .forward import DetectorCircle, DetectorLine
from .geometry import GraphCloud, PolarCloud
from .radiance import AlphaField, BetaProfile, SunModel, solar_alpha
from .solver import SolverConfig


class ScenarioError(ValueError):
    """Invalid scenario document."""


MISR_OFFSETS_DEG = (26.1, 45.6, 60.0, 70.5)

PRESETS = {
    "desk": {"Z": 6.0, "pixel_size": 0.05},
    "misr": {"Z": 705.0, "pixel_size": 0.275},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_terms = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {"amp": _num, "freq": _num, "k": {"type": "integer"}, "phase": _num},
        "required": ["amp"],
        "additionalProperties": False,
    },
}
_series_schema = {
    "type": "object",
    "properties": {"base": _num, "slope": _num, "terms": _terms},
    "required": ["base"],
    "additionalProperties": False,
}
_values = {"type": "array", "items": _num, "minItems": 3}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["kind", "cloud", "detector"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "kind": {"enum": ["graph", "polar"]},
        "cloud": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x_L": _num, "x_R": _num, "h_B": _num, "N": {"type": "integer", "minimum": 3},
                "nodes": {"oneOf": [_values, _series_schema]},
                "radii": {"oneOf": [_values, _series_schema]},
                "theta0": _num,
            },
        },
        "alpha": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["constant", "step", "solar", "fourier", "linear", "list"]},
                "value": _num, "left": _num, "right": _num, "at": _num,
                "elevation": _num, "elevation_deg": _num, "floor": _num, "mirror": {"type": "boolean"},
                "base": _num, "terms": _terms, "start": _num, "end": _num,
                "values": {"type": "array", "items": _num},
                "sides": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            },
            "additionalProperties": False,
        },
        "beta": {"$ref": "#/$defs/beta"},
        "detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "Z": _pos, "pixel_size": _pos, "R": _pos, "n_pixels": {"type": "integer", "minimum": 1},
                "angles": {"oneOf": [{"enum": ["misr", "polar11"]},
                                     {"type": "array", "items": _num, "minItems": 1}]},
                "angles_unit": {"enum": ["rad", "deg"]},
                "window": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "margin": {"type": "integer", "minimum": 0},
                "subsamples": {"type": "integer", "minimum": 1},
                "quadrature": {"enum": ["exact", "midpoint"]},
            },
        },
        "speed": {"oneOf": [_pos, {"type": "array", "items": _pos, "minItems": 1}]},
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"sigma": {"type": "number", "minimum": 0}, "seed": {"type": "integer"}},
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "shape": {
                    "type": "object",
                    "required": ["type"],
                    "additionalProperties": False,
                    "properties": {
                        "type": {"enum": ["flat", "linear", "circle", "truth", "values"]},
                        "height": _num, "radius": _pos, "values": _values,
                    },
                },
                "alpha": _pos,
                "beta": {"$ref": "#/$defs/beta"},
                "speed": {"oneOf": [{"const": "estimate"}, _pos]},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "reg_weight": {"type": "number", "minimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "tol_step": _pos, "tol_resid": _pos,
                "damping": {"type": "integer", "minimum": 0},
                "bc": {"oneOf": [{"enum": ["dirichlet", "none"]}, {"type": "integer"}]},
                "with_speed": {"type": "boolean"},
            },
        },
        "diagnose": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"local": {"type": "boolean"}, "with_speed": {"type": "boolean"},
                           "node_tol": _pos},
        },
        "output": {"type": "string"},
    },
    "$defs": {
        "beta": {
            "type": "object",
            "required": ["type"],
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["sine", "limb", "knots"]},
                "P": {"type": "integer", "minimum": 1},
                "a": {"type": "number", "minimum": 0},
                "values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2},
                "normalization": {"enum": ["nadir", "unit-integral", "none"]},
            },
        },
    },
}


def bundled_names() -> list[str]:
    files = resources.files("cloudshape").joinpath("scenarios").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".yaml"))


def load(source: str | Path) -> dict:
    """Read a scenario from a path or a bundled name and validate it."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        res = resources.files("cloudshape").joinpath("scenarios", f"{source}.yaml")
        if not res.is_file():
            raise ScenarioError(f"no scenario file or bundled scenario named {str(source)!r}")
        text = res.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed YAML: {exc}") from exc
    return validate(doc)


def validate(doc) -> dict:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        msgs = [f"/{'/'.join(map(str, e.absolute_path))}: {e.message}" for e in errors]
        raise ScenarioError("invalid scenario:\n  " + "\n  ".join(msgs))
    cloud = doc["cloud"]
    det = doc["detector"]
    if doc["kind"] == "graph":
        need, det_need = ("x_L", "x_R", "h_B", "nodes"), ()
    else:
        need, det_need = ("radii",), ("R", "n_pixels")
    for key in need:
        if key not in cloud:
            raise ScenarioError(f"/cloud: {doc['kind']} cloud needs {key!r}")
    for key in det_need:
        if key not in det:
            raise ScenarioError(f"/detector: polar detector needs {key!r}")
    if doc["kind"] == "polar" and "nodes" in cloud:
        raise ScenarioError("/cloud: polar cloud takes 'radii', not 'nodes'")
    return doc


def apply_preset(doc: dict, preset: str | None) -> dict:
    """Fill detector defaults from a preset; explicit scenario values win."""
    if preset is None:
        return doc
    if preset not in PRESETS:
        raise ScenarioError(f"unknown preset {preset!r}")
    doc = copy.deepcopy(doc)
    if doc["kind"] == "graph":
        for key, value in PRESETS[preset].items():
            doc["detector"].setdefault(key, value)
    return doc


# --------------------------------------------------------------------------
# builders


def _series(spec, u: np.ndarray, periodic: bool) -> np.ndarray:
    """Evaluate an explicit list or a ``base + sum of terms`` series.

    Graph series use ``sin(freq * pi * u + phase)`` with ``u`` in [0, 1];
    polar series use ``cos(k * theta + phase)``.
    """
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    out = np.full(u.shape, float(spec["base"]))
    for t in spec.get("terms", []):
        if periodic:
            out += t["amp"] * np.cos(t.get("k", 1) * u + t.get("phase", 0.0))
        else:
            out += t["amp"] * np.sin(t.get("freq", 1.0) * np.pi * u + t.get("phase", 0.0))
    return out


def build_cloud(doc: dict):
    c = doc["cloud"]
    if doc["kind"] == "graph":
        nodes = c["nodes"]
        N = len(nodes) if isinstance(nodes, list) else c.get("N", 51)
        u = np.linspace(0.0, 1.0, N)
        h = _series(nodes, u, periodic=False)
        if isinstance(nodes, dict) and "slope" in nodes:
            # per unit length, about the middle of the support
            h = h + nodes["slope"] * (u - 0.5) * (c["x_R"] - c["x_L"])
        return GraphCloud(c["x_L"], c["x_R"], c["h_B"], h)
    radii = c["radii"]
    N = len(radii) if isinstance(radii, list) else c.get("N", 200)
    theta0 = c.get("theta0", 0.0)
    theta = theta0 + 2 * np.pi * np.arange(N) / N
    return PolarCloud(_series(radii, theta, periodic=True), theta0)


def sun_model(spec: dict, mirror: bool = False) -> SunModel:
    elev = spec.get("elevation")
    if elev is None:
        elev = np.radians(spec.get("elevation_deg", 90.0))
    return SunModel(float(elev), spec.get("floor", 0.2), bool(spec.get("mirror", False)) ^ mirror)


def build_alpha(doc: dict, cloud, mirror_sun: bool = False) -> AlphaField:
    spec = doc.get("alpha", {"type": "constant", "value": 1.0})
    kind = spec["type"]
    graph = doc["kind"] == "graph"
    if kind == "solar":
        return solar_alpha(cloud, sun_model(spec, mirror_sun))
    if graph:
        mids = 0.5 * (cloud.x[1:] + cloud.x[:-1])
        u = (mids - cloud.x_L) / (cloud.x_R - cloud.x_L)
    else:
        u = cloud.theta + 0.5 * cloud.dtheta
    n = u.size
    if kind == "constant":
        vals = np.full(n, float(spec.get("value", 1.0)))
        sides = [vals[0], vals[0]]
    elif kind == "step":
        at = spec.get("at", 0.5)
        vals = np.where(u < at, spec.get("left", 1.0), spec.get("right", 0.5))
        sides = [spec.get("left", 1.0), spec.get("right", 0.5)]
    elif kind == "fourier":
        series = {"base": spec.get("base", 1.0), "terms": spec.get("terms", [])}
        vals = _series(series, u, periodic=not graph)
        sides = list(_series(series, np.array([0.0, 1.0]), False)) if graph else None
    elif kind == "linear":
        a0, a1 = spec.get("start", 1.0), spec.get("end", 1.0)
        vals = a0 + (a1 - a0) * (u if graph else u / (2 * np.pi))
        sides = [a0, a1]
    else:
        vals = np.asarray(spec["values"], dtype=float)
        if vals.size != n:
            raise ScenarioError(f"/alpha/values: expected {n} values, got {vals.size}")
        sides = spec.get("sides", [vals[0], vals[-1]])
    if "sides" in spec:
        sides = spec["sides"]
    if graph:
        return AlphaField(vals, float(sides[0]), float(sides[1]))
    return AlphaField(vals)


def build_beta(spec: dict | None) -> BetaProfile:
    spec = spec or {"type": "sine", "P": 10}
    P = spec.get("P", 10)
    if spec["type"] == "sine":
        return BetaProfile.sine(P)
    if spec["type"] == "limb":
        a = spec.get("a", 0.3)
        return BetaProfile.from_function(lambda t: a + (1 - a) * np.sin(t), P)
    knots = np.asarray(spec["values"], dtype=float)
    norm = spec.get("normalization", "nadir")
    beta = BetaProfile(knots, "none")
    return beta.normalized(norm) if norm != "none" else beta


def view_angles(spec, unit: str = "rad", kind: str = "graph") -> np.ndarray:
    if spec == "misr" or (spec is None and kind == "graph"):
        off = np.radians(np.array((0.0,) + MISR_OFFSETS_DEG + tuple(-d for d in MISR_OFFSETS_DEG)))
        return np.sort(np.pi / 2 + off)
    if spec == "polar11" or spec is None:
        c = np.cos
        vals = [1, -1, c(np.pi / 4), -c(np.pi / 4), c(np.pi / 3), -c(np.pi / 3),
                c(np.pi / 2.3), -c(np.pi / 2.3), c(np.pi / 2.1), -c(np.pi / 2.1), 0]
        return np.sort(np.arccos(np.array(vals)))
    a = np.asarray(spec, dtype=float)
    return np.sort(np.radians(a) if unit == "deg" else a)


def build_detector(doc: dict, cloud, speeds=(1.0,)):
    d = doc["detector"]
    angles = view_angles(d.get("angles"), d.get("angles_unit", "rad"), doc["kind"])
    kw = {"subsamples": d.get("subsamples", 8), "quadrature": d.get("quadrature", "exact")}
    if doc["kind"] == "polar":
        return DetectorCircle(d["R"], d["n_pixels"], angles, **kw)
    if "Z" not in d or "pixel_size" not in d:
        raise ScenarioError("/detector: graph detector needs Z and pixel_size (or a preset)")
    if "window" in d:
        lo, hi = d["window"]
        return DetectorLine(d["Z"], d["pixel_size"], lo, hi, angles, **kw)
    cover = DetectorLine.covering(cloud, d["Z"], d["pixel_size"], angles,
                                  margin=d.get("margin", 2), **kw)
    lam_min = min(speeds)
    # slower apparent motion spreads the cloud over more detector pixels
    lo = int(np.floor(min(cover.n_start, cover.n_start / lam_min)))
    hi = int(np.ceil(max(cover.n_stop, cover.n_stop / lam_min)))
    return DetectorLine(d["Z"], d["pixel_size"], lo, hi, angles, **kw)


def speeds(doc: dict) -> list[float]:
    s = doc.get("speed", 1.0)
    return [float(v) for v in s] if isinstance(s, list) else [float(s)]


def solver_config(doc: dict) -> SolverConfig:
    spec = dict(doc.get("solver", {}))
    spec.pop("with_speed", None)
    if doc["kind"] == "polar":
        spec.setdefault("bc", "none")
    return SolverConfig(**spec)


@dataclass
class Truth:
    cloud: GraphCloud | PolarCloud
    alpha: AlphaField
    beta: BetaProfile


def build_truth(doc: dict, mirror_sun: bool = False) -> Truth:
    try:
        cloud = build_cloud(doc)
        return Truth(cloud, build_alpha(doc, cloud, mirror_sun), build_beta(doc.get("beta")))
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"scenario does not define a valid cloud: {exc}") from exc


def state_document(state, doc: dict) -> dict:
    """A scenario document whose truth is ``state``; detector settings come from ``doc``.

    Graph clouds are written in the physical frame, with the speed (if any)
    as the scenario's ``speed``. Emission is written as plain lists so the
    document loads back to the same state.
    """
    cloud = state.physical_cloud
    out = {"name": f"{doc.get('name', 'scenario')}_state", "kind": state.kind}
    if state.kind == "graph":
        out["cloud"] = {"x_L": float(cloud.x_L), "x_R": float(cloud.x_R), "h_B": float(cloud.h_B),
                        "nodes": [float(v) for v in cloud.heights]}
    else:
        out["cloud"] = {"theta0": float(cloud.theta0), "radii": [float(v) for v in cloud.radii]}
    alpha = {"type": "list", "values": [float(v) for v in state.alpha.segment_values]}
    if state.alpha.has_sides:
        alpha["sides"] = [float(state.alpha.alpha_L), float(state.alpha.alpha_R)]
    out["alpha"] = alpha
    out["beta"] = {"type": "knots", "values": [float(v) for v in state.beta.knots],
                   "normalization": "none"}
    out["detector"] = copy.deepcopy(doc["detector"])
    if state.lam is not None:
        out["speed"] = float(state.lam)
    return out


def dump(doc: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
