"""Run-config validation: every section is a flat mapping with known keys and defaults."""

from __future__ import annotations

import json

import numpy as np

REQUIRED = object()


class ConfigError(ValueError):
    """Schema violation; the CLI maps it to exit code 2."""


def section(d, schema: dict, where: str) -> dict:
    """Merge ``d`` over the schema defaults; unknown keys, missing required keys
    and values of the wrong type are rejected."""
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = {}
    for key, default in schema.items():
        if key not in d:
            if default is REQUIRED:
                raise ConfigError(f"{where}: missing required key {key!r}")
            out[key] = default
            continue
        value = d[key]
        _check_type(value, default, f"{where}.{key}")
        out[key] = value
    return out


def _check_type(value, default, where):
    if default is REQUIRED or default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")


def load(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def derive_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds of the single top-level seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


# --- section schemas ---------------------------------------------------------------

T1_SCHEMA = {"kind": REQUIRED, "epsilon": 5.0, "sigma": 1.0, "n_samples": 10000, "dim": 100, "n_test": 1000}
T2_SCHEMA = {"kind": REQUIRED, "rho": 20.0, "epsilon": 1.0, "sigma": 1.0, "K": 3, "n_samples": 10000,
             "dim": 100, "n_test": 1000}
IDX_SCHEMA = {"kind": REQUIRED, "images": REQUIRED, "labels": REQUIRED, "transforms": [], "n_test": 0,
              "classes": None}
MODEL_SCHEMA = {"kind": "mlp", "hidden": [200, 200, 200, 200], "init": "kaiming"}
TRAIN_SCHEMA = {"epochs": 500, "batch_size": 128, "max_lr": 0.1, "lr_schedule": "linear_decay",
                "momentum": 0.0, "weight_decay": 0.0}
ATTACK_SCHEMA = {"max_iter": 100, "overshoot": 0.02, "step_size": None, "radius": 1.0, "pgd_steps": 7,
                 "dykstra_iters": 5, "refine": True, "refine_steps": 40}
SCHEME_SCHEMAS = {
    "table1": {"kind": REQUIRED, "S": 3},
    "diagonal": {"kind": REQUIRED, "K": 8, "T": 1},
    "grid": {"kind": REQUIRED, "K": 8, "T": 8, "block": "full"},
    "random": {"kind": REQUIRED, "dims": REQUIRED},
    "directions": {"kind": REQUIRED, "indices": REQUIRED},
}
CONSTRAINT_SCHEMA = {"kind": "l2_ball_box", "radius": 1.0, "box": [0.0, 1.0]}


def dataset_section(d, where="dataset") -> dict:
    kind = (d or {}).get("kind")
    schemas = {"t1": T1_SCHEMA, "t2": T2_SCHEMA, "idx": IDX_SCHEMA}
    if kind not in schemas:
        raise ConfigError(f"{where}.kind must be one of {sorted(schemas)}, got {kind!r}")
    return section(d, schemas[kind], where)


def scheme_section(d, where="scheme") -> dict:
    kind = (d or {}).get("kind")
    if kind not in SCHEME_SCHEMAS:
        raise ConfigError(f"{where}.kind must be one of {sorted(SCHEME_SCHEMAS)}, got {kind!r}")
    return section(d, SCHEME_SCHEMAS[kind], where)
