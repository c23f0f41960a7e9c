"""Builders turning validated config sections into datasets, models and subspace schemes."""

from __future__ import annotations

import numpy as np

from .attacks import AttackConfig
from .config import (ATTACK_SCHEMA, MODEL_SCHEMA, TRAIN_SCHEMA, ConfigError, dataset_section, derive_seeds,
                     scheme_section, section)
from .datasets import (LabeledDataset, T1Params, T2Params, gen_t1, gen_t2, load_idx, split,
                       transform_dataset)
from .margins import table1_sequence
from .models import Model, TrainConfig
from .subspace import Subspace, SubspaceSequence, diagonal_subspaces, grid_subspaces, random_subspace_sequence


def build_datasets(d: dict, seed: int) -> tuple[LabeledDataset, LabeledDataset | None]:
    """``(train, test)`` for a dataset section; synthetic test sets share the training rotation."""
    cfg = dataset_section(d)
    s_train, s_test = derive_seeds(seed, 2)
    kind = cfg["kind"]
    try:
        if kind == "t1":
            p = T1Params(cfg["epsilon"], cfg["sigma"], cfg["n_samples"], cfg["dim"], s_train)
            train = gen_t1(p)
            test = None
            if cfg["n_test"]:
                test = gen_t1(T1Params(p.epsilon, p.sigma, cfg["n_test"], p.dim, s_test), rotation=train.rotation)
            return train, test
        if kind == "t2":
            p = T2Params(cfg["rho"], cfg["epsilon"], cfg["sigma"], cfg["K"], cfg["n_samples"], cfg["dim"], s_train)
            train = gen_t2(p)
            test = None
            if cfg["n_test"]:
                q = T2Params(p.rho, p.epsilon, p.sigma, p.K, cfg["n_test"], p.dim, s_test)
                test = gen_t2(q, rotation=train.rotation)
            return train, test
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = load_idx(cfg["images"], cfg["labels"])
    if cfg["classes"] is not None:
        keep = np.isin(ds.labels, cfg["classes"])
        ds = ds.subset(np.flatnonzero(keep))
    for op in cfg["transforms"]:
        try:
            ds = transform_dataset(ds, op)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg["n_test"]:
        if not 0 < cfg["n_test"] < len(ds):
            raise ConfigError(f"dataset.n_test must be in (0, {len(ds)})")
        test, train = split(ds, cfg["n_test"], s_test)
        return train, test
    return ds, None


def build_model(d: dict, train: LabeledDataset, seed: int) -> Model:
    cfg = section(d, MODEL_SCHEMA, "model")
    n_out = 1 if train.is_binary else train.n_classes
    if cfg["kind"] == "mlp":
        try:
            return Model.mlp(train.dim, cfg["hidden"], n_out, seed=seed, init=cfg["init"])
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
    if cfg["kind"] == "logistic":
        return Model.logistic(train.dim, n_out)
    raise ConfigError(f"model.kind must be 'mlp' or 'logistic', got {cfg['kind']!r}")


def build_train_config(d: dict, seed: int, where="train") -> TrainConfig:
    cfg = section(d, TRAIN_SCHEMA, where)
    try:
        return TrainConfig(seed=seed, **cfg)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_attack_config(d: dict, where="attack") -> AttackConfig:
    cfg = section(d, ATTACK_SCHEMA, where)
    try:
        return AttackConfig(**cfg)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_scheme(d: dict, ds: LabeledDataset, seed: int) -> SubspaceSequence:
    cfg = scheme_section(d)
    kind = cfg["kind"]
    try:
        if kind in ("table1", "directions"):
            if ds.rotation is None:
                raise ConfigError(f"scheme {kind!r} needs a synthetic dataset with a stored rotation")
            if kind == "table1":
                return table1_sequence(ds.rotation, cfg["S"], seed)
            items = [Subspace(ds.rotation[:, [i]], f"u{i + 1}") for i in cfg["indices"]]
            return SubspaceSequence(items, "directions", params={"indices": list(cfg["indices"])})
        if kind == "random":
            return random_subspace_sequence(ds.dim, cfg["dims"], seed)
        if ds.image_shape is None:
            raise ConfigError(f"scheme {kind!r} needs image data")
        if kind == "diagonal":
            return diagonal_subspaces(ds.image_shape, cfg["K"], cfg["T"])
        return grid_subspaces(ds.image_shape, cfg["K"], cfg["T"], cfg["block"])
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scheme: {exc}") from exc
