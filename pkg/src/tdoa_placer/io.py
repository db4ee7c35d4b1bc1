"""Scene / placement JSON documents and result serialization."""

from __future__ import annotations

import json
import logging
import math
import re
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .geometry import (
    Box,
    Boundary,
    ExplicitSet,
    FreeSpace,
    GeometryError,
    Material,
    Obstacle,
    Placement,
    Scene,
    grid_sample_roi,
    validate_placement,
)
from .noise import LogNormalParams, NoiseParams

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 3}
_box = {"type": "object", "required": ["min", "max"], "properties": {"min": _vec, "max": _vec}}
_lognormal = {
    "type": "object",
    "required": ["mu", "s"],
    "properties": {"mu": {"type": "number"}, "s": {"type": "number", "exclusiveMinimum": 0}},
}

SCENE_SCHEMA = {
    "type": "object",
    "required": ["dimension", "bounds", "roi"],
    "properties": {
        "schema_version": {"type": "integer", "const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "dimension": {"enum": [2, 3]},
        "bounds": _box,
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["min", "max", "material"],
                "properties": {"min": _vec, "max": _vec, "material": {"type": "string"}},
            },
        },
        "roi": {
            "type": "object",
            "properties": {
                "points": {"type": "array", "items": _vec},
                "grid": {
                    "type": "object",
                    "required": ["min", "max", "spacing"],
                    "properties": {"min": _vec, "max": _vec, "spacing": {"type": "number", "exclusiveMinimum": 0}},
                },
            },
            "anyOf": [{"required": ["points"]}, {"required": ["grid"]}],
        },
        "feasible": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["free_space", "boundary", "explicit"]},
                "points": {"type": "array", "items": _vec},
            },
        },
        "operating_range": {"type": "number", "exclusiveMinimum": 0},
        "noise": {
            "type": "object",
            "properties": {
                "sigma_los": {"type": "number", "minimum": 0},
                "common_tag": _lognormal,
                "severe_tag": _lognormal,
                "common_aa_std": {"type": "number", "exclusiveMinimum": 0},
                "severe_aa_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

PLACEMENT_SCHEMA = {
    "type": "object",
    "required": ["anchors"],
    "properties": {
        "schema_version": {"type": "integer", "const": SCHEMA_VERSION},
        "anchors": {"type": "array", "items": _vec, "minItems": 2},
    },
}


class InputError(ValueError):
    """Malformed input document; ``str()`` is anchored to a file line."""

    def __init__(self, message: str, source: str = "<input>", line: Optional[int] = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


def _locate(text: str, path) -> Optional[int]:
    """Best-effort line number of the JSON element at ``path``."""
    pos = 0
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
            if m is None:
                break
            pos = m.end()
        else:
            # skip `part` complete items of the array starting at pos
            i = text.find("[", pos)
            if i < 0:
                break
            depth, k, count = 0, i + 1, 0
            while k < len(text) and count < part:
                ch = text[k]
                if ch in "[{":
                    depth += 1
                elif ch in "]}":
                    depth -= 1
                elif ch == "," and depth == 0:
                    count += 1
                k += 1
            pos = k
            while pos < len(text) and text[pos] in " \t\r\n":
                pos += 1
    return text.count("\n", 0, pos) + 1


def _fmt_path(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
    return out or "document"


def _load_json(text: str, source: str, schema: dict) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON: {e.msg} (column {e.colno})", source, e.lineno) from None
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        path = list(e.absolute_path)
        raise InputError(f"{_fmt_path(path)}: {e.message}", source, _locate(text, path)) from None
    return doc


def parse_noise(doc: Optional[dict]) -> NoiseParams:
    if doc is None:
        log.warning("scene has no 'noise' block; using default (placeholder) error-model parameters")
        return NoiseParams()
    d = NoiseParams()
    return NoiseParams(
        sigma_los=float(doc.get("sigma_los", d.sigma_los)),
        common_tag=LogNormalParams(**doc["common_tag"]) if "common_tag" in doc else d.common_tag,
        severe_tag=LogNormalParams(**doc["severe_tag"]) if "severe_tag" in doc else d.severe_tag,
        common_aa_std=float(doc.get("common_aa_std", d.common_aa_std)),
        severe_aa_std=float(doc.get("severe_aa_std", d.severe_aa_std)),
    )


def noise_to_dict(params: NoiseParams) -> dict:
    return {
        "sigma_los": params.sigma_los,
        "common_tag": {"mu": params.common_tag.mu, "s": params.common_tag.s},
        "severe_tag": {"mu": params.severe_tag.mu, "s": params.severe_tag.s},
        "common_aa_std": params.common_aa_std,
        "severe_aa_std": params.severe_aa_std,
    }


def scene_from_dict(doc: dict, source: str = "<scene>", text: Optional[str] = None) -> tuple[Scene, NoiseParams]:
    def fail(msg, path):
        raise InputError(f"{_fmt_path(path)}: {msg}", source, _locate(text, path) if text else None)

    n = doc["dimension"]

    def vec(v, path):
        if len(v) != n:
            fail(f"expected {n} coordinates, got {len(v)}", path)
        return np.asarray(v, dtype=float)

    try:
        bounds = Box(vec(doc["bounds"]["min"], ["bounds", "min"]), vec(doc["bounds"]["max"], ["bounds", "max"]))
    except GeometryError as e:
        fail(str(e), ["bounds"])

    obstacles = []
    for k, o in enumerate(doc.get("obstacles", [])):
        try:
            material = Material.parse(o["material"])
        except ValueError as e:
            fail(str(e), ["obstacles", k, "material"])
        try:
            obstacles.append(Obstacle(vec(o["min"], ["obstacles", k, "min"]), vec(o["max"], ["obstacles", k, "max"]), material))
        except GeometryError as e:
            fail(str(e), ["obstacles", k])

    roi = doc["roi"]
    pts = []
    if "grid" in roi:
        g = roi["grid"]
        try:
            pts.append(grid_sample_roi(Box(vec(g["min"], ["roi", "grid", "min"]), vec(g["max"], ["roi", "grid", "max"])),
                                       g["spacing"], obstacles=obstacles))
        except GeometryError as e:
            fail(str(e), ["roi", "grid"])
    if "points" in roi:
        pts.append(np.array([vec(p, ["roi", "points", k]) for k, p in enumerate(roi["points"])]).reshape(-1, n))
    points = np.vstack(pts) if pts else np.zeros((0, n))

    fdoc = doc.get("feasible", {"kind": "free_space"})
    kind = fdoc["kind"]
    if kind == "free_space":
        feasible = FreeSpace()
    elif kind == "boundary":
        feasible = Boundary()
    else:
        if "points" not in fdoc:
            fail("explicit feasibility needs 'points'", ["feasible"])
        try:
            feasible = ExplicitSet(np.array([vec(p, ["feasible", "points", k]) for k, p in enumerate(fdoc["points"])]))
        except GeometryError as e:
            fail(str(e), ["feasible"])

    try:
        scene = Scene(bounds, tuple(obstacles), points, feasible, float(doc.get("operating_range", math.inf)))
    except GeometryError as e:
        fail(str(e), ["roi"])
    return scene, parse_noise(doc.get("noise"))


def load_scene(path) -> tuple[Scene, NoiseParams]:
    path = Path(path)
    text = path.read_text()
    doc = _load_json(text, str(path), SCENE_SCHEMA)
    return scene_from_dict(doc, str(path), text)


def scene_to_dict(scene: Scene, params: Optional[NoiseParams] = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dimension": scene.dim,
        "bounds": {"min": scene.bounds.lo.tolist(), "max": scene.bounds.hi.tolist()},
        "obstacles": [
            {"min": o.lo.tolist(), "max": o.hi.tolist(), "material": o.material.name.lower()} for o in scene.obstacles
        ],
        "roi": {"points": scene.sample_points.tolist()},
        "feasible": scene.feasible.to_dict(),
    }
    if math.isfinite(scene.operating_range):
        doc["operating_range"] = scene.operating_range
    if params is not None:
        doc["noise"] = noise_to_dict(params)
    return doc


def load_placement(path, scene: Optional[Scene] = None) -> Placement:
    path = Path(path)
    text = path.read_text()
    doc = _load_json(text, str(path), PLACEMENT_SCHEMA)
    try:
        placement = Placement(doc["anchors"])
    except GeometryError as e:
        raise InputError(f"anchors: {e}", str(path), _locate(text, ["anchors"])) from None
    if scene is not None:
        try:
            validate_placement(placement, scene)
        except GeometryError as e:
            m = re.match(r"anchor (\d+)", str(e))
            where = ["anchors", int(m.group(1))] if m else ["anchors"]
            raise InputError(str(e), str(path), _locate(text, where)) from None
    return placement


def placement_to_dict(placement: Placement) -> dict:
    # full repr precision so a re-read placement scores identically
    return {"schema_version": SCHEMA_VERSION, "anchors": placement.anchors.tolist()}


def write_json(path, doc: Any) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def sig(x: float, digits: int = 9):
    """Round to ``digits`` significant digits; non-finite values become strings."""
    x = float(x)
    if not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return float(f"{x:.{digits}g}")


def sig_list(a) -> Any:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return sig(a)
    return [sig_list(v) for v in a]


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture scene (``name`` with or without .json)."""
    if not name.endswith(".json"):
        name += ".json"
    ref = resources.files("tdoa_placer") / "fixtures" / name
    return Path(str(ref))


def list_fixtures() -> list[str]:
    d = resources.files("tdoa_placer") / "fixtures"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))


def score_to_dict(score, scene: Scene) -> dict:
    """PlacementScore as JSON: average, per-point bound, bias and conditioning."""
    points = []
    for i, p in enumerate(scene.sample_points):
        fim = score.fim[i]
        with np.errstate(all="ignore"):
            ev = np.linalg.eigvalsh(fim) if np.all(np.isfinite(fim)) else np.array([np.nan])
            cond = ev[-1] / ev[0] if ev[0] > 0 else math.inf
        st = score.status[i][score.weight[i] > 0]
        points.append({
            "point": sig_list(p),
            "rmse": sig(math.sqrt(score.mse[i]) if math.isfinite(score.mse[i]) else math.inf),
            "mse_lb": sig(score.mse[i]),
            "bias": sig_list(score.bias[i]),
            "fim_condition": sig(cond),
            "active_pairs": int(score.active_pairs[i]),
            "nlos_links": {"common": int(np.sum(st == 1)), "severe": int(np.sum(st == 2))},
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "avg_rmse": sig(score.avg_rmse),
        "infeasible_points": list(score.infeasible_points),
        "link_counts": score.nlos_link_count(),
        "points": points,
    }


def sim_report_to_dict(report) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "avg_rmse": sig(report.avg_rmse),
        "divergences": report.divergences,
        "warnings": report.warnings,
        "points": [
            {
                "point": sig_list(s.point),
                "rmse": sig(s.rmse),
                "rmse_stderr": sig(s.rmse_stderr),
                "bias": sig_list(s.bias),
                "bias_stderr": sig_list(s.bias_stderr),
                "used": s.used,
                "diverged": s.diverged,
                "too_few": s.too_few,
            }
            for s in report.points
        ],
    }
