"""Scenario files: flat ``section.key = value`` lines, values in JSON.

    # scalar decay
    experiment = "solve"
    operator.kind = "matrix"
    operator.matrix = [[-1.0]]
    grid.t_end = 1.0

Lines starting with # are comments.  Bare words that are not valid JSON are
read as strings.  The nested dict is validated against a closed schema
before anything is computed.
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

EXPERIMENTS = ["solve", "dichotomy", "admissibility", "persistence",
               "example-rate", "example-scan"]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_kernel = {"enum": ["zero", "constant", "sine", "gaussian-bump", "samples"]}


def _section(props: dict, required=()) -> dict:
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        out["required"] = list(required)
    return out


SCHEMA = _section({
    "experiment": {"enum": EXPERIMENTS},
    "operator": _section({
        "kind": {"enum": ["matrix", "lifted", "descriptor", "parabolic"]},
        "matrix": _mat,
        "part": _mat,
        "lift": _mat,
        "descriptor": _mat,
        "boundary_dim": {"type": "integer", "minimum": 0},
        "omega": _num,
        "backend": {"enum": ["grid", "spectral"]},
        "N": {"type": "integer", "minimum": 2},
        "p": {"type": "number", "minimum": 1},
        "alpha": _num,
    }, required=["kind"]),
    "perturbation": _section({
        "kind": {"enum": ["zero", "constant", "periodic", "nonlocal"]},
        "matrix": _mat,
        "amplitude": _num,
        "period": _pos,
    }),
    "target": _section({
        "kind": {"enum": ["constant", "periodic", "nonlocal"]},
        "matrix": _mat,
        "amplitude": _num,
        "period": _pos,
    }),
    "kernel": _section({
        "beta0": _kernel,
        "beta1": _kernel,
        "beta0_samples": _vec,
        "beta1_samples": _vec,
        "center": _num,
        "width": _pos,
        "modulation": _num,
        "frequency": _num,
    }),
    "forcing": _section({
        "kind": {"enum": ["zero", "constant", "cosine"]},
        "value": _vec,
        "frequency": _num,
    }),
    "initial": _section({"x0": _vec}),
    "grid": _section({"t_start": _num, "t_end": _num, "step": _pos}),
    "window": _section({"t_start": _num, "t_end": _num, "margin": {"type": "number",
                                                                   "minimum": 0}}),
    "lambda": _section({
        "lambda_0": _pos,
        "growth": {"type": "number", "exclusiveMinimum": 1},
        "max_terms": {"type": "integer", "minimum": 2},
        "rel_tol": _pos,
    }),
    "tolerances": _section({
        "verify": _pos, "residual": _pos, "cocycle": _pos, "bounded": _pos,
        "rate_exponent": _pos, "rate_constant": _pos,
    }),
    "solve": _section({"route": {"enum": ["resolvent", "direct"]}}),
    "dichotomy": _section({
        "method": {"enum": ["spectral", "floquet", "subspace"]},
        "k_unstable": {"type": "integer", "minimum": 0},
        "period": _pos,
        "eta": {"type": "number", "minimum": 0},
    }),
    "admissibility": _section({
        "n_trials": _int,
        "expect": {"enum": ["UNIQUE-SOLVABLE", "ILL-POSED"]},
    }),
    "rate": _section({
        "p_values": {"type": "array", "items": {"type": "number", "minimum": 1},
                     "minItems": 1},
        "lambda_min": _pos,
        "lambda_max": _pos,
        "count": {"type": "integer", "minimum": 3},
    }),
    "scan": _section({"amplitudes": {"type": "array", "items": _num, "minItems": 1}}),
    "output": _section({
        "trace": {"type": "string"}, "report": {"type": "string"},
        "scan": {"type": "string"}, "summary": {"type": "string"},
        "table": {"type": "string"}, "rate": {"type": "string"},
    }),
})


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    cfg: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if not all(parts):
            raise ConfigError(f"line {n}: malformed key {key!r}")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {n}: {key!r} nests under a value")
        if parts[-1] in node:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        node[parts[-1]] = _value(val)
    return cfg


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    g = cfg.get("grid", {})
    if "t_start" in g and "t_end" in g and not g["t_end"] > g["t_start"]:
        raise ConfigError("grid.t_end must exceed grid.t_start")
    w = cfg.get("window", {})
    if "t_start" in w and "t_end" in w and not w["t_end"] > w["t_start"]:
        raise ConfigError("window.t_end must exceed window.t_start")
    r = cfg.get("rate", {})
    if "lambda_min" in r and "lambda_max" in r and not r["lambda_max"] > r["lambda_min"]:
        raise ConfigError("rate.lambda_max must exceed rate.lambda_min")
    return cfg


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return validate(parse_text(text))
