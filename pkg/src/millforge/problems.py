"""Problem-file ingestion: JSON schema, primitive CSG, patch resolution.

A problem file lists design-domain primitives (boxes, cylinders, spheres
combined with add/subtract), named preserved primitives whose faces anchor
loads and supports, material data, the volume target, the tool, and the
milling/algorithm configuration.  Loads give a total force in newtons on a
primitive face; it is converted to a uniform traction over that face.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from importlib import resources
from jsonschema import validate

from . import primitives as prim
from .fem import LoadCase, Material, PatchRegion
from .grid import GridSpec
from .levelset import LevelSet
from .milling import DirectionSet, ToolModel
from .optimizer import MillingSpec, Problem

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_SHAPE = {
    "type": "object",
    "properties": {
        "shape": {"enum": ["box", "cylinder", "sphere"]},
        "name": {"type": "string"},
        "min": _VEC, "max": _VEC,
        "p0": _VEC, "p1": _VEC,
        "center": _VEC,
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["shape"],
}
_PATCH = {
    "type": "object",
    "properties": {
        "primitive": {"type": "string"},
        "face": {"pattern": "^[+-][xyz]$"},
        "box": {"type": "object", "properties": {"min": _VEC, "max": _VEC},
                "required": ["min", "max"]},
        "normal": _VEC,
    },
}

PROBLEM_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "grid": {
            "type": "object",
            "properties": {
                "spacing": {"type": "number", "exclusiveMinimum": 0},
                "padding": {"type": "number", "minimum": 0},
            },
            "required": ["spacing"],
        },
        "design_domain": {
            "type": "array", "minItems": 1,
            "items": {
                "allOf": [_SHAPE],
                "properties": {"op": {"enum": ["add", "subtract"]}},
            },
        },
        "preserved": {"type": "array", "items": _SHAPE},
        "material": {
            "type": "object",
            "properties": {
                "youngs_modulus_pa": {"type": "number", "exclusiveMinimum": 0},
                "poisson_ratio": {"type": "number"},
            },
            "required": ["youngs_modulus_pa", "poisson_ratio"],
        },
        "load_cases": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "loads": {
                        "type": "array", "minItems": 1,
                        "items": {
                            "type": "object",
                            "properties": {
                                "patch": _PATCH,
                                "force": _VEC,
                                "traction": _VEC,
                            },
                            "required": ["patch"],
                        },
                    },
                    "fixed": {"type": "array", "minItems": 1, "items": _PATCH},
                },
                "required": ["loads", "fixed"],
            },
        },
        "volume_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "tool": {
            "type": "object",
            "properties": {
                "bit_radius": {"type": "number", "exclusiveMinimum": 0},
                "bit_length": {"type": "number", "exclusiveMinimum": 0},
                "head_radius": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["bit_radius", "bit_length", "head_radius"],
        },
        "milling": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["off", "3axis", "hemisphere", "normal", "heat"]},
                "directions": {"type": "array", "items": _VEC, "minItems": 1},
                "max_iters": {"type": "integer", "minimum": 1},
            },
            "required": ["mode"],
        },
        "symmetry_planes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"axis": {"enum": [0, 1, 2, "x", "y", "z"]},
                               "coordinate": {"type": "number"}},
                "required": ["axis", "coordinate"],
            },
        },
        "algorithm": {
            "type": "object",
            "properties": {
                "name": {"enum": ["strict", "relaxed"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "required": ["name"],
        },
        "limits": {
            "type": "object",
            "properties": {
                "max_iters": {"type": "integer", "minimum": 1},
                "conv_tol": {"type": "number", "exclusiveMinimum": 0},
                "penalty0": {"type": "number", "exclusiveMinimum": 0},
                "outer_every": {"type": "integer", "minimum": 1},
            },
        },
        "seed": {"type": "integer"},
    },
    "required": ["grid", "design_domain", "material", "load_cases", "volume_fraction"],
}

_AXIS = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def _shape_bounds(entry: dict) -> tuple[np.ndarray, np.ndarray]:
    kind = entry["shape"]
    if kind == "box":
        return np.asarray(entry["min"], float), np.asarray(entry["max"], float)
    if kind == "cylinder":
        p0 = np.asarray(entry["p0"], float)
        p1 = np.asarray(entry["p1"], float)
        r = entry["radius"]
        return np.minimum(p0, p1) - r, np.maximum(p0, p1) + r
    c = np.asarray(entry["center"], float)
    r = entry["radius"]
    return c - r, c + r


def _shape_sdf(grid: GridSpec, entry: dict) -> np.ndarray:
    kind = entry["shape"]
    if kind == "box":
        return prim.box_from_bounds(grid, entry["min"], entry["max"])
    if kind == "cylinder":
        return prim.cylinder(grid, entry["p0"], entry["p1"], entry["radius"])
    return prim.sphere(grid, entry["center"], entry["radius"])


def _face_patch(entry: dict, face: str) -> tuple[PatchRegion, float]:
    """Patch region plus the nominal face area for force-to-traction."""
    axis = _AXIS[face[1]]
    sign = 1.0 if face[0] == "+" else -1.0
    kind = entry["shape"]
    if kind == "box":
        lo = np.asarray(entry["min"], float)
        hi = np.asarray(entry["max"], float)
        plane = hi[axis] if sign > 0 else lo[axis]
        plo, phi_ = lo.copy(), hi.copy()
        plo[axis] = phi_[axis] = plane
        extents = np.delete(hi - lo, axis)
        area = float(extents[0] * extents[1])
    elif kind == "cylinder":
        p0 = np.asarray(entry["p0"], float)
        p1 = np.asarray(entry["p1"], float)
        ax_vec = p1 - p0
        if np.count_nonzero(np.abs(ax_vec) > 1e-9) != 1 or abs(ax_vec[axis]) < 1e-9:
            raise ValueError("face selectors need an axis-aligned cylinder on that axis")
        r = entry["radius"]
        cap = p1 if (ax_vec[axis] > 0) == (sign > 0) else p0
        plo = cap - r
        phi_ = cap + r
        plo[axis] = phi_[axis] = cap[axis]
        area = float(np.pi * r * r)
    else:
        raise ValueError("spheres have no planar faces to anchor patches on")
    normal = np.zeros(3)
    normal[axis] = sign
    return PatchRegion(tuple(plo), tuple(phi_), tuple(normal)), area


def _resolve_patch(spec: dict, named: dict) -> tuple[PatchRegion, float | None]:
    if "box" in spec:
        normal = tuple(spec["normal"]) if "normal" in spec else None
        lo = spec["box"]["min"]
        hi = spec["box"]["max"]
        area = float(np.prod(np.maximum(np.asarray(hi) - np.asarray(lo), 1e-12)))
        return PatchRegion(tuple(lo), tuple(hi), normal), area
    name = spec.get("primitive")
    if name not in named:
        raise ValueError(f"patch references unknown primitive {name!r}")
    if "face" not in spec:
        raise ValueError(f"patch on primitive {name!r} needs a face like '+z'")
    return _face_patch(named[name], spec["face"])


def build_problem(doc: dict) -> tuple[Problem, dict]:
    """Validate a problem document and construct the Problem."""
    validate(doc, PROBLEM_SCHEMA)
    h = float(doc["grid"]["spacing"])
    tool = None
    if "tool" in doc:
        t = doc["tool"]
        tool = ToolModel(t["bit_radius"], t["bit_length"], t["head_radius"])

    default_pad = 3.0 * h
    if tool is not None:
        default_pad = max(tool.head_radius, tool.bit_radius + 2.0 * h) + 2.0 * h
    pad = float(doc["grid"].get("padding", default_pad))

    entries = list(doc["design_domain"]) + list(doc.get("preserved", []))
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for e in entries:
        if e.get("op", "add") == "subtract":
            continue
        slo, shi = _shape_bounds(e)
        lo = np.minimum(lo, slo)
        hi = np.maximum(hi, shi)
    grid = GridSpec.from_bounds(lo - pad, hi + pad, h)

    band = max(4.0 * h, tool.band_requirement(h)) if tool else 4.0 * h
    domain_sdf = np.full(grid.dims, 1e9)
    for e in doc["design_domain"]:
        s = _shape_sdf(grid, e)
        if e.get("op", "add") == "subtract":
            domain_sdf = prim.subtract(domain_sdf, s)
        else:
            domain_sdf = prim.union(domain_sdf, s)

    named: dict[str, dict] = {}
    preserved_sdf = None
    for e in doc.get("preserved", []):
        if "name" in e:
            named[e["name"]] = e
        s = _shape_sdf(grid, e)
        preserved_sdf = s if preserved_sdf is None else prim.union(preserved_sdf, s)
    if preserved_sdf is not None:
        domain_sdf = prim.union(domain_sdf, preserved_sdf)

    domain = LevelSet.from_sdf(grid, domain_sdf, band_width=band)
    preserved = (
        LevelSet.from_sdf(grid, preserved_sdf, band_width=band)
        if preserved_sdf is not None else None
    )

    mat = doc["material"]
    material = Material(mat["youngs_modulus_pa"], mat["poisson_ratio"])

    load_cases = []
    for case in doc["load_cases"]:
        tractions = []
        for load in case["loads"]:
            patch, area = _resolve_patch(load["patch"], named)
            if "traction" in load:
                tr = np.asarray(load["traction"], float)
            elif "force" in load:
                if not area:
                    raise ValueError("force loads need a patch with a known area")
                tr = np.asarray(load["force"], float) / area
            else:
                raise ValueError("each load needs either 'force' or 'traction'")
            tractions.append((patch, tr))
        fixed = [_resolve_patch(f, named)[0] for f in case["fixed"]]
        load_cases.append(LoadCase(tractions, fixed))

    milling = MillingSpec()
    if "milling" in doc:
        m = doc["milling"]
        dirs = None
        if "directions" in m:
            d = np.asarray(m["directions"], float)
            dirs = DirectionSet(d / np.linalg.norm(d, axis=1, keepdims=True))
        milling = MillingSpec(m["mode"], dirs, m.get("max_iters", 8))

    planes = [(_AXIS[p["axis"]], float(p["coordinate"]))
              for p in doc.get("symmetry_planes", [])]

    algo = doc.get("algorithm", {"name": "strict"})
    limits = doc.get("limits", {})
    problem = Problem(
        domain=domain,
        material=material,
        load_cases=load_cases,
        volume_fraction=float(doc["volume_fraction"]),
        preserved=preserved,
        tool=tool,
        milling=milling,
        symmetry_planes=planes,
        algorithm=algo["name"],
        alpha=float(algo.get("alpha", 0.25)),
        max_iters=int(limits.get("max_iters", 200)),
        conv_tol=float(limits.get("conv_tol", 0.01)),
        penalty0=float(limits.get("penalty0", 10.0)),
        outer_every=int(limits.get("outer_every", 10)),
    )
    meta = {"name": doc.get("name", "problem"), "seed": doc.get("seed", 0)}
    return problem, meta


def load_problem(path) -> tuple[Problem, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    problem, meta = build_problem(doc)
    if meta["name"] == "problem":
        meta["name"] = Path(path).stem
    return problem, meta


def bundled_problem_path(name: str) -> Path:
    """Path of a problem file shipped with the package (e.g. 'supportstruct')."""
    res = resources.files("millforge").joinpath(f"problems/{name}.json")
    with resources.as_file(res) as p:
        return Path(p)
