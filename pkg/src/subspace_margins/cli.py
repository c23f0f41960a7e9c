"""Command-line runner: ``subspace-margins <verb> --config run.json --out DIR``.

Every verb is a pure function of its config and input files. Outputs are
written atomically; wall-clock timestamps go only to ``run.log``.
Exit codes: 0 success, 2 invalid config or input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import experiments
from .attacks import ConstraintSet, PerturbationLog, adversarial_train
from .config import CONSTRAINT_SCHEMA, REQUIRED, ConfigError, derive_seeds, load, section
from .datasets import IdxFormatError, T1Params, load_dataset, save_dataset, write_idx
from .io import atomic_write_text, config_hash, write_csv
from .margins import (measure_campaign, summarize, write_energy_csv, write_records_csv,
                      write_summary_csv)
from .models import HistoryRow, TrainingDivergedError, load_checkpoint, save_checkpoint, train_sgd
from .pipeline import build_attack_config, build_datasets, build_model, build_scheme, build_train_config
from .theory import theory_report

log = logging.getLogger("subspace_margins")

HISTORY_HEADER = ["epoch", "loss", "train_acc", "test_acc"]


def _dump_json(path, obj):
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_data(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset directory {path!r} not found or incomplete") from exc


# --- gen-data ------------------------------------------------------------------------

GEN_SCHEMA = {"seed": 0, "dataset": REQUIRED, "write_idx": False}


def cmd_gen_data(cfg: dict, out: str) -> dict:
    c = section(cfg, GEN_SCHEMA, "config")
    train, test = build_datasets(c["dataset"], c["seed"])
    outputs = {"train": train, "test": test}
    for name, ds in outputs.items():
        if ds is None:
            continue
        save_dataset(ds, os.path.join(out, name))
        if c["write_idx"]:
            if ds.image_shape is None or ds.features.min() < 0 or ds.features.max() > 1:
                raise ConfigError("write_idx needs image data with values in [0, 1]")
            write_idx(ds, os.path.join(out, f"{name}-images.idx"), os.path.join(out, f"{name}-labels.idx"))
    info = {"config": c, "n_train": len(train), "n_test": len(test) if test is not None else 0}
    _dump_json(os.path.join(out, "dataset.json"), info)
    return info


# --- train / advtrain ----------------------------------------------------------------

TRAIN_CMD_SCHEMA = {"seed": 0, "data": REQUIRED, "test_data": None, "model": {}, "train": {},
                    "checkpoint_every": 1}
ADV_CMD_SCHEMA = dict(TRAIN_CMD_SCHEMA, attack={}, constraint={}, energy_scheme=None)


def _history_rows(history):
    return [(h.epoch, h.loss, h.train_acc, h.test_acc) for h in history]


def _history_to_json(history):
    return [[h.epoch, h.loss, h.train_acc, h.test_acc] for h in history]


def _history_from_json(rows):
    return [HistoryRow(*r) for r in rows]


def _plog_to_json(plog: PerturbationLog) -> dict:
    return {"labels": plog.labels, "epochs": plog.epochs, "sample_ids": plog.sample_ids, "norms": plog.norms,
            "energies": [list(e) for e in plog.energies], "feasible": plog.feasible}


def _plog_from_json(d: dict) -> PerturbationLog:
    return PerturbationLog(d["labels"], d["epochs"], d["sample_ids"], d["norms"],
                           [tuple(e) for e in d["energies"]], d["feasible"])


def _resume(path: str, chash: str):
    """Checkpoint payload of an interrupted (or finished) run with the same config, else None."""
    if not os.path.exists(path):
        return None
    model, state, _, payload = load_checkpoint(path, with_payload=True)
    if payload.get("config_hash") != chash:
        log.warning("existing checkpoint belongs to a different config; starting fresh")
        return None
    log.info("resuming from epoch %d", state.epoch)
    return model, state, payload


def _train_common(c: dict, adversarial: bool, out: str, chash: str) -> dict:
    train = _load_data(c["data"])
    test = _load_data(c["test_data"]) if c["test_data"] else None
    s_model, s_train, s_scheme = derive_seeds(c["seed"], 3)
    tcfg = build_train_config(c["train"], s_train)
    if c["checkpoint_every"] < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    ckpt = os.path.join(out, "checkpoint.json")
    model = build_model(c["model"], train, s_model)
    state, history, plog = None, [], None
    resumed = _resume(ckpt, chash)
    if resumed is not None:
        model, state, payload = resumed
        history = _history_from_json(payload["history"])
        if adversarial:
            plog = _plog_from_json(payload["perturbations"])

    def save(m, st, hist, pl=None):
        extra = {"config_hash": chash, "history": _history_to_json(hist)}
        if pl is not None:
            extra["perturbations"] = _plog_to_json(pl)
        save_checkpoint(ckpt, m, st, tcfg, extra)

    def on_epoch(m, row, st, pl=None):
        history.append(row)
        if st.epoch % c["checkpoint_every"] == 0 or st.epoch == tcfg.epochs:
            save(m, st, history, pl)

    if adversarial:
        attack = build_attack_config(c["attack"])
        con = section(c["constraint"], CONSTRAINT_SCHEMA, "constraint")
        try:
            constraint = ConstraintSet(con["kind"], float(con["radius"]), train.image_shape,
                                       tuple(con["box"]) if con["box"] is not None else None)
        except ValueError as exc:
            raise ConfigError(f"constraint: {exc}") from exc
        attack = type(attack)(**{**attack.__dict__, "radius": constraint.radius})
        seq = build_scheme(c["energy_scheme"], train, s_scheme) if c["energy_scheme"] else None
        model, _, plog = adversarial_train(model, train, constraint, attack, tcfg, energy_sequence=seq,
                                           test=test, state=state, on_epoch=on_epoch, plog=plog)
        write_energy_csv(os.path.join(out, "perturbations.csv"), plog, chash)
    else:
        model, _, state = train_sgd(model, train, tcfg, test=test, state=state,
                                    on_epoch=lambda m, row, st: on_epoch(m, row, st))
    if not os.path.exists(ckpt) or tcfg.epochs == 0:
        save(model, state if state is not None else None, history, plog)
    write_csv(os.path.join(out, "history.csv"), HISTORY_HEADER, _history_rows(history), chash)
    info = {"epochs": len(history), "final": _history_rows(history)[-1] if history else None}
    if adversarial:
        info["all_feasible"] = bool(all(plog.feasible))
    return info


def cmd_train(cfg: dict, out: str, chash: str) -> dict:
    return _train_common(section(cfg, TRAIN_CMD_SCHEMA, "config"), False, out, chash)


def cmd_advtrain(cfg: dict, out: str, chash: str) -> dict:
    return _train_common(section(cfg, ADV_CMD_SCHEMA, "config"), True, out, chash)


# --- measure ----------------------------------------------------------------------------

MEASURE_SCHEMA = {"seed": 0, "checkpoint": REQUIRED, "data": REQUIRED, "n_observations": None,
                  "scheme": REQUIRED, "attack": {}}


def cmd_measure(cfg: dict, out: str, chash: str) -> dict:
    c = section(cfg, MEASURE_SCHEMA, "config")
    ds = _load_data(c["data"])
    if c["n_observations"] is not None:
        if c["n_observations"] < 1:
            raise ConfigError("n_observations must be >= 1")
        ds = ds.subset(np.arange(min(c["n_observations"], len(ds))))
    try:
        model, _, _ = load_checkpoint(c["checkpoint"])
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {c['checkpoint']!r} not found") from exc
    if model.input_dim != ds.dim:
        raise ConfigError(f"model expects D={model.input_dim}, observations have D={ds.dim}")
    seq = build_scheme(c["scheme"], ds, derive_seeds(c["seed"], 1)[0])
    camp = measure_campaign(model, ds, seq, build_attack_config(c["attack"]))
    summaries = summarize(camp.records)
    write_records_csv(os.path.join(out, "records.csv"), camp.records, chash)
    write_summary_csv(os.path.join(out, "summary.csv"), summaries, chash)
    return {"n_samples": camp.n_samples, "n_skipped": camp.n_skipped, "n_subspaces": len(seq),
            "medians": {s.subspace_label: s.median for s in summaries}}


# --- theory ------------------------------------------------------------------------------

THEORY_SCHEMA = {"seed": 0, "t1": {}, "S": 3, "reps": 500, "threshold": 0.08, "reference_epsilon": None,
                 "median_rtol": 0.2}
THEORY_T1 = {"epsilon": 5.0, "sigma": 1.0, "n_samples": 10000, "dim": 100}


def cmd_theory(cfg: dict, out: str, chash: str) -> dict:
    c = section(cfg, THEORY_SCHEMA, "config")
    t = section(c["t1"], THEORY_T1, "config.t1")
    if c["reps"] < 1:
        raise ConfigError("reps must be >= 1")
    try:
        t1 = T1Params(t["epsilon"], t["sigma"], t["n_samples"], t["dim"], 0)
        report = theory_report(t1, c["S"], c["reps"], c["seed"], c["threshold"], c["reference_epsilon"],
                               c["median_rtol"], return_sample=True)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sample = report.pop("sample")
    report["config_hash"] = chash
    _dump_json(os.path.join(out, "theory_report.json"), report)
    write_csv(os.path.join(out, "xi2_samples.csv"), ["rep", "xi2"], list(enumerate(map(float, sample))), chash)
    return {"pass": report["pass"], "ks_statistic": report["ks_statistic"]}


# --- experiment ----------------------------------------------------------------------------

EXPERIMENT_SCHEMA = {"seed": 0, "experiment": REQUIRED}


def cmd_experiment(cfg: dict, out: str, chash: str) -> dict:
    c = section(cfg, EXPERIMENT_SCHEMA, "config")
    name = c["experiment"].get("name") if isinstance(c["experiment"], dict) else None
    if name not in experiments.RECIPES:
        raise ConfigError(f"experiment.name must be one of {sorted(experiments.RECIPES)}, got {name!r}")
    header, rows, report = experiments.RECIPES[name](c["experiment"], c["seed"])
    write_csv(os.path.join(out, f"{name}.csv"), header, rows, chash)
    report = dict(report, config_hash=chash)
    _dump_json(os.path.join(out, f"{name}_report.json"), report)
    return report


COMMANDS = {
    "gen-data": lambda cfg, out, chash: cmd_gen_data(cfg, out),
    "train": cmd_train,
    "advtrain": cmd_advtrain,
    "measure": cmd_measure,
    "theory": cmd_theory,
    "experiment": cmd_experiment,
}


# --- entry point ------------------------------------------------------------------------------

def _resolve_paths(obj, base: str):
    """Make relative file paths in the config relative to the config file's directory."""
    keys = {"data", "test_data", "checkpoint", "images", "labels"}
    if isinstance(obj, dict):
        return {k: (os.path.normpath(os.path.join(base, v)) if k in keys and isinstance(v, str)
                    and not os.path.isabs(v) else _resolve_paths(v, base)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_resolve_paths(v, base) for v in obj]
    return obj


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subspace-margins", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _setup_logging(out: str, verbose: bool):
    os.makedirs(out, exist_ok=True)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.handlers.clear()
    fh = logging.FileHandler(os.path.join(out, "run.log"), mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.addHandler(fh)
    log.addHandler(sh)
    return fh


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if not isinstance(cfg.get("seed", 0), int):
            raise ConfigError("seed must be an integer")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        # hash the config as written, so identical configs hash alike wherever they live
        chash = config_hash(cfg)
        cfg = _resolve_paths(cfg, os.path.dirname(os.path.abspath(args.config)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    handler = _setup_logging(args.out, args.verbose)
    limiter = nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            log.info("%s config_hash=%s", args.command, chash)
            info = COMMANDS[args.command](cfg, args.out, chash)
            log.info("done: %s", json.dumps(info, sort_keys=True, default=str))
        return 0
    except (ConfigError, IdxFormatError) as exc:
        log.error("invalid input: %s", exc)
        return 2
    except (TrainingDivergedError, ValueError, OSError, ArithmeticError) as exc:
        log.error("runtime failure: %s", exc)
        return 1
    finally:
        handler.close()
        log.removeHandler(handler)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
