"""Joint motion-range tables.

The file format stores degrees (human-editable); everything in memory is
radians.  Rows follow the canonical articulated-joint order (index, middle,
ring, pinky MCP/PIP/DIP, then thumb CMC/MCP/IP); columns are (bend, splay,
twist).  Locked degrees of freedom use a zero-width interval at 0.  Every
interval must contain 0: the rest pose has to be feasible, and the dynamic
refinement scales each bound toward 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DataError, SchemaError
from .model import check_format_version

CANONICAL_JOINTS = [
    "index_mcp", "index_pip", "index_dip",
    "middle_mcp", "middle_pip", "middle_dip",
    "ring_mcp", "ring_pip", "ring_dip",
    "pinky_mcp", "pinky_pip", "pinky_dip",
    "thumb_cmc", "thumb_mcp", "thumb_ip",
]
FINGERS = ("index", "middle", "ring", "pinky")
FINGER_MCP_ROWS = [CANONICAL_JOINTS.index(f"{f}_mcp") for f in FINGERS]
FINGER_PIP_ROWS = [CANONICAL_JOINTS.index(f"{f}_pip") for f in FINGERS]
FINGER_DIP_ROWS = [CANONICAL_JOINTS.index(f"{f}_dip") for f in FINGERS]
AXIS_COLUMNS = ("bend", "splay", "twist")


@dataclass
class JointLimitTable:
    lo: np.ndarray  # (15,3) radians
    hi: np.ndarray  # (15,3) radians

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (15, 3) or self.hi.shape != (15, 3):
            raise DataError("limit table must be (15,3) per bound")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise DataError("limit table has non-finite entries")
        if np.any(self.lo > self.hi):
            raise DataError("limit table has min > max")
        if np.any(self.lo > 0) or np.any(self.hi < 0):
            raise DataError("every motion range must contain the rest angle 0")

    def to_dict(self):
        joints = []
        for j, name in enumerate(CANONICAL_JOINTS):
            entry = {"joint": name}
            for a, axis in enumerate(AXIS_COLUMNS):
                entry[axis] = [float(np.rad2deg(self.lo[j, a])),
                               float(np.rad2deg(self.hi[j, a]))]
            joints.append(entry)
        return {"format_version": "1.0", "kind": "handfit.limits",
                "units": "degrees", "joints": joints}


@dataclass
class RefinedLimits:
    """Limits after functional-anatomy refinement for a specific theta.
    Bounds may be dual-number Jets when evaluated inside the fitter."""
    lo: object  # (15,3)
    hi: object  # (15,3)


def limits_from_dict(payload):
    check_format_version(payload, "handfit.limits")
    if payload.get("units") != "degrees":
        raise SchemaError("limit file units must be 'degrees'")
    entries = payload.get("joints")
    if not isinstance(entries, list):
        raise SchemaError("limit file needs a 'joints' list")
    by_name = {}
    for e in entries:
        name = e.get("joint")
        if name not in CANONICAL_JOINTS:
            raise SchemaError(f"unknown joint name {name!r} in limit file")
        by_name[name] = e
    missing = [n for n in CANONICAL_JOINTS if n not in by_name]
    if missing:
        raise SchemaError(f"limit file missing joints: {missing}")
    lo = np.zeros((15, 3))
    hi = np.zeros((15, 3))
    for j, name in enumerate(CANONICAL_JOINTS):
        for a, axis in enumerate(AXIS_COLUMNS):
            pair = by_name[name].get(axis)
            if not isinstance(pair, list) or len(pair) != 2:
                raise SchemaError(f"{name}.{axis} must be a [min, max] pair")
            lo[j, a], hi[j, a] = np.deg2rad(pair[0]), np.deg2rad(pair[1])
            if lo[j, a] > hi[j, a]:
                raise DataError(f"{name}.{axis}: min exceeds max")
    return JointLimitTable(lo=lo, hi=hi)


def load_limits(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"limits file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"limits file is not valid JSON: {exc}") from exc
    return limits_from_dict(payload)


def save_limits(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_dict(), fh, indent=1)
        fh.write("\n")


def default_limits():
    text = resources.files("handfit").joinpath("data/default_limits.json").read_text()
    return limits_from_dict(json.loads(text))
