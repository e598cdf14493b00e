"""Strict JSON experiment configs.

A config document has the shape::

    {"command": "velocity", "seeds": [1, 2, 3], "output_dir": "runs/v",
     "params": {"n_values": [10, 50], "horizon": 300}}

Unknown keys anywhere are rejected and every violation is reported at
once. Defaults are filled in after validation.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Dict, List, Optional

import jsonschema

COMMANDS = ("simulate", "couple", "velocity", "regimes", "critical", "brw", "fbp", "sweep")
SEED_MAX = 2**64 - 1


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_real = {"type": "number"}
_n = {"type": "integer", "minimum": 1}
_reals = {"type": "array", "items": _real, "minItems": 1}
_ints = {"type": "array", "items": {"type": "integer"}, "minItems": 1}
_process = {"enum": ["bees", "nbbm"]}

# name -> (schema, default); a default of REQUIRED means the key must be given
REQUIRED = object()

PARAMS: Dict[str, Dict[str, tuple]] = {
    "simulate": {
        "process": (_process, "bees"),
        "n_particles": (_n, REQUIRED),
        "mu": (_real, 0.0),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 0.01),
        "t_burn": (_nonneg, None),
        "initial": ({"type": ["array", "null"], "items": _real}, None),
        "record_events": ({"type": "boolean"}, True),
    },
    "couple": {
        "mode": ({"enum": ["monotone", "abs"]}, "monotone"),
        "n_particles": (_n, REQUIRED),
        "mu": (_real, 0.0),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 0.01),
        "nu": ({"type": ["array", "null"], "items": _real}, None),
        "nu_other": ({"type": ["array", "null"], "items": _real}, None),
    },
    "velocity": {
        "process": (_process, "nbbm"),
        "n_values": ({"type": "array", "items": _n, "minItems": 1}, REQUIRED),
        "mu": (_real, 0.0),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 0.01),
        "t_burn": (_nonneg, None),
    },
    "regimes": {
        "n_particles": (_n, REQUIRED),
        "mu_factors": (_reals, [0.0, 0.5, -0.5, 1.5, -1.5]),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 0.01),
        "t_burn": (_nonneg, None),
        "mu_c_horizon": (_pos, None),
    },
    "critical": {
        "n_particles": (_n, REQUIRED),
        "m": (_pos, REQUIRED),
        "mu_sign": ({"enum": [1, -1]}, 1),
        "sub_step": (_pos, 0.01),
        "t_burn": (_nonneg, None),
        "mu_c_horizon": (_pos, None),
    },
    "brw": {
        "n_values": ({"type": "array", "items": _n, "minItems": 1}, REQUIRED),
        "delta": (_pos, 0.5),
        "mu": (_real, 0.0),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 1.0),
        "t_burn": (_nonneg, None),
    },
    "fbp": {
        "half_width": (_pos, 4.0),
        "h": (_pos, 0.01),
        "dt": (_pos, None),
        "mu": (_real, 0.0),
        "end_time": (_nonneg, REQUIRED),
        "initial_interval": ({"type": "array", "items": _real, "minItems": 2, "maxItems": 2},
                             [-0.5, 0.5]),
        "snapshot_every": ({"type": ["number", "null"], "exclusiveMinimum": 0}, None),
        "boundary_every": (_n, 1),
    },
    "sweep": {
        # n_values are only type-checked here; each cell validates itself so one
        # bad cell cannot stop the others
        "n_values": (_ints, REQUIRED),
        "mu_factors": (_reals, [0.0, 0.5, -0.5, 1.5, -1.5]),
        "horizon": (_pos, REQUIRED),
        "sub_step": (_pos, 0.01),
        "t_burn": (_nonneg, None),
        "mu_c_horizon": (_pos, None),
    },
}


def _params_schema(command: str) -> dict:
    fields = PARAMS[command]
    return {
        "type": "object",
        "properties": {k: v[0] for k, v in fields.items()},
        "required": [k for k, v in fields.items() if v[1] is REQUIRED],
        "additionalProperties": False,
    }


TOP_SCHEMA = {
    "type": "object",
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seeds": {"type": "array", "minItems": 1,
                  "items": {"type": "integer", "minimum": 0, "maximum": SEED_MAX}},
        "output_dir": {"type": "string"},
        "params": {"type": "object"},
    },
    "required": ["seeds", "params"],
    "additionalProperties": False,
}


@dataclass
class ExperimentConfig:
    command: str
    params: Dict[str, Any]
    seeds: List[int]
    output_dir: Optional[str] = None
    plan: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"command": self.command, "seeds": list(self.seeds),
                "output_dir": self.output_dir, "params": self.params, "plan": self.plan}


def _fmt(err: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def _errors(schema: dict, doc, prefix: str = "") -> List[str]:
    v = jsonschema.Draft202012Validator(schema)
    out = []
    for e in sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        msg = _fmt(e)
        if prefix and msg.startswith("<root>"):
            msg = prefix.rstrip(".") + msg[len("<root>"):]
        elif prefix:
            msg = prefix + msg
        out.append(msg)
    return out


def _semantic_errors(command: str, p: dict, seeds: list) -> List[str]:
    errs = []
    horizon = p.get("horizon")
    if p.get("t_burn") is not None and horizon is not None and p["t_burn"] >= horizon:
        errs.append("params.t_burn: must be smaller than params.horizon")
    n = p.get("n_particles")
    for key in ("initial", "nu", "nu_other"):
        if p.get(key) is not None and n is not None and len(p[key]) != n:
            errs.append(f"params.{key}: length must equal n_particles ({n})")
    if command == "couple":
        if p["mode"] == "abs" and p["mu"] > 0:
            errs.append("params.mu: abs coupling requires mu <= 0")
        if p["nu_other"] is not None and len(p["nu_other"]) == n:
            from .engine import compare_left_of
            nu = [0.0] * n if p["nu"] is None else p["nu"]
            if p["mode"] == "monotone" and not compare_left_of(sorted(nu), sorted(p["nu_other"])):
                errs.append("params.nu_other: nu must lie left of nu_other")
            if p["mode"] == "abs" and not compare_left_of(sorted(p["nu_other"]),
                                                          sorted(-abs(x) for x in nu)):
                errs.append("params.nu_other: nu_other must lie left of -|nu|")
    if command in ("critical", "regimes") and len(seeds) < 2:
        errs.append("seeds: at least 2 seeds are needed to estimate the critical drift")
    if command == "critical" and len(seeds) < 30:
        errs.append("seeds: critical diagnostics need at least 30 seeds")
    if command == "brw" and any(x < 2 for x in p.get("n_values", [])):
        errs.append("params.n_values: the lower process needs N >= 2")
    if command == "fbp":
        from .fbp import PDEParams
        h = p.get("h", 0.01)
        dt = p.get("dt") if p.get("dt") is not None else (h * h if h else None)
        try:
            pp = PDEParams(p.get("half_width", 4.0), h, dt, p.get("mu", 0.0), p.get("end_time", 0.0))
            pp.n_steps
        except (ValueError, TypeError) as exc:
            errs.append(f"params: {exc}")
    if len(set(seeds)) != len(seeds):
        errs.append("seeds: duplicate seeds")
    return errs


def parse_config(source, command: Optional[str] = None) -> ExperimentConfig:
    """Validate a JSON document (text or already-parsed dict) into a config.

    ``command`` (from the command line) must agree with the document's
    ``command`` field when both are present.
    """
    if isinstance(source, (str, bytes)):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root>: invalid JSON ({exc})"]) from None
    else:
        doc = copy.deepcopy(source)
    errs = _errors(TOP_SCHEMA, doc)
    if not isinstance(doc, dict):
        raise ConfigError(errs)
    cmd = doc.get("command", command)
    if command is not None and cmd != command:
        errs.append(f"command: config says {cmd!r} but {command!r} was requested")
    if cmd is None:
        errs.append("command: missing (give it in the config or on the command line)")
    params = doc.get("params")
    if cmd in COMMANDS and isinstance(params, dict):
        errs += _errors(_params_schema(cmd), params, prefix="params.")
    if errs:
        raise ConfigError(errs)

    filled = {}
    for k, (_, default) in PARAMS[cmd].items():
        filled[k] = params[k] if k in params else copy.deepcopy(default)
    if "t_burn" in filled and filled["t_burn"] is None:
        filled["t_burn"] = 0.1 * filled["horizon"] if "horizon" in filled else None
    if cmd == "critical" and filled["t_burn"] is None:
        filled["t_burn"] = 0.1 * filled["m"]
    if "mu_c_horizon" in filled and filled["mu_c_horizon"] is None:
        filled["mu_c_horizon"] = filled.get("horizon") or 4 * filled["m"]
    if cmd == "fbp" and filled["dt"] is None:
        filled["dt"] = filled["h"] ** 2
    seeds = list(doc["seeds"])
    errs = _semantic_errors(cmd, filled, seeds)
    if errs:
        raise ConfigError(errs)
    plan = []
    if cmd == "sweep":
        plan = [{"cell": i, "N": n, "mu_factor": f}
                for i, (n, f) in enumerate(product(filled["n_values"], filled["mu_factors"]))]
    return ExperimentConfig(cmd, filled, seeds, doc.get("output_dir"), plan)
