"""Scripted recipes composing data generation, training and margin measurement.

Each recipe returns ``(header, rows, report)``: the rows of one consolidated
CSV and a small JSON-ready summary.
"""

from __future__ import annotations

import logging

import numpy as np

from .attacks import CONVERGED, deepfool_batch
from .config import REQUIRED, ConfigError, derive_seeds, section
from .datasets import LabeledDataset, T2Params, concat, gen_t2, transform_dataset
from .margins import measure_campaign, medians, summarize
from .models import finetune, train_sgd
from .pipeline import build_attack_config, build_datasets, build_model, build_scheme, build_train_config
from .subspace import Subspace

log = logging.getLogger(__name__)


def _median_or_none(values):
    return float(np.median(values)) if len(values) else None


def _accuracy(model, ds):
    return None if ds is None else model.accuracy(ds)


# --- transition ----------------------------------------------------------------------

TRANSITION_SCHEMA = {"name": REQUIRED, "seeds": None, "epsilons": [0.1, 0.3, 0.5, 0.7, 1.0],
                     "t2": {}, "model": {}, "train": {}, "attack": {}}
T2_FIELDS = {"rho": 20.0, "sigma": 1.0, "K": 3, "n_samples": 10000, "dim": 100, "n_test": 1000}

TRANSITION_HEADER = ["epsilon", "seed", "median_u1", "median_u2", "n_censored_u1", "n_censored_u2",
                     "n_skipped", "train_acc", "test_acc"]


def transition(cfg: dict, seed: int):
    """Sweep the size of the linearly separable feature of T2 and record median margins along u1 and u2."""
    c = section(cfg, TRANSITION_SCHEMA, "experiment")
    t2 = section(c["t2"], T2_FIELDS, "experiment.t2")
    attack = build_attack_config(c["attack"])
    seeds = c["seeds"] if c["seeds"] is not None else [seed]
    rows = []
    for s in seeds:
        s_data, s_test, s_model, s_train = derive_seeds(s, 4)
        for eps in c["epsilons"]:
            try:
                p = T2Params(t2["rho"], float(eps), t2["sigma"], t2["K"], t2["n_samples"], t2["dim"], s_data)
                train = gen_t2(p)
                test = gen_t2(T2Params(p.rho, p.epsilon, p.sigma, p.K, t2["n_test"], p.dim, s_test),
                              rotation=train.rotation)
            except ValueError as exc:
                raise ConfigError(f"experiment.t2: {exc}") from exc
            model = build_model(c["model"], train, s_model)
            model, _, _ = train_sgd(model, train, build_train_config(c["train"], s_train))
            seq = [Subspace(train.rotation[:, [0]], "u1"), Subspace(train.rotation[:, [1]], "u2")]
            camp = measure_campaign(model, test, seq, attack)
            summ = {m.subspace_label: m for m in summarize(camp.records)}
            u1, u2 = summ.get("u1"), summ.get("u2")
            rows.append((float(eps), s,
                         u1.median if u1 else None, u2.median if u2 else None,
                         u1.n_censored if u1 else 0, u2.n_censored if u2 else 0,
                         camp.n_skipped, model.accuracy(train), model.accuracy(test)))
            log.info("transition eps=%s seed=%s u1=%s u2=%s", eps, s, rows[-1][2], rows[-1][3])
    return TRANSITION_HEADER, rows, {"n_runs": len(rows)}


# --- elasticity / forgetting --------------------------------------------------------

ELASTICITY_SCHEMA = {"name": REQUIRED, "dataset": REQUIRED, "band": REQUIRED, "scheme": REQUIRED,
                     "n_observations": 500, "model": {}, "train": {}, "finetune": {}, "attack": {}}

ELASTICITY_HEADER = ["subspace_label", "block_start", "in_removed_band", "median_before", "median_after",
                     "ratio", "n_censored_before", "n_censored_after"]


def _observations(test: LabeledDataset | None, n: int) -> LabeledDataset:
    if test is None:
        raise ConfigError("recipe needs held-out observation samples (dataset.n_test > 0)")
    return test.subset(np.arange(min(n, len(test))))


def elasticity(cfg: dict, seed: int):
    """Train on full-band images, fine-tune on their low-pass version, and compare
    median margins per diagonal DCT subspace on low-pass observation samples."""
    c = section(cfg, ELASTICITY_SCHEMA, "experiment")
    s_data, s_model, s_train, s_ft = derive_seeds(seed, 4)
    train, test = build_datasets(c["dataset"], s_data)
    lp = f"low_pass:{c['band']}"
    try:
        train_lp = transform_dataset(train, lp)
        obs = transform_dataset(_observations(test, c["n_observations"]), lp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seq = build_scheme(c["scheme"], train, seed)
    attack = build_attack_config(c["attack"])
    model = build_model(c["model"], train, s_model)
    model, _, _ = train_sgd(model, train, build_train_config(c["train"], s_train))
    tuned, _, _ = finetune(model, train_lp, build_train_config(c["finetune"], s_ft, "experiment.finetune"))
    before = summarize(measure_campaign(model, obs, seq, attack).records)
    after = {m.subspace_label: m for m in summarize(measure_campaign(tuned, obs, seq, attack).records)}
    rows = []
    for s, b in zip(seq, before):
        a = after[b.subspace_label]
        start = s.offset[0] if s.offset else None
        ratio = a.median / b.median if a.median is not None and b.median else None
        rows.append((b.subspace_label, start, start is not None and start >= c["band"], b.median, a.median,
                     ratio, b.n_censored, a.n_censored))
    report = {
        "acc_full_test": _accuracy(model, test),
        "acc_lowpass_obs_before": model.accuracy(obs),
        "acc_lowpass_obs_after": tuned.accuracy(obs),
    }
    return ELASTICITY_HEADER, rows, report


FORGETTING_SCHEMA = {"name": REQUIRED, "dataset": REQUIRED, "band": REQUIRED, "scheme": REQUIRED,
                     "n_observations": 500, "model": {}, "train": {}, "forget": {}, "recover": {}, "attack": {}}

FORGETTING_HEADER = ["stage", "subspace_label", "median", "n_censored", "acc_lowpass", "acc_highpass"]


def forgetting(cfg: dict, seed: int):
    """Train on the union of low- and high-pass data, fine-tune on low-pass only
    (forget), then on the union again (recover); margins on low-pass observations."""
    c = section(cfg, FORGETTING_SCHEMA, "experiment")
    s_data, s_model, s_train, s_forget, s_recover = derive_seeds(seed, 5)
    train, test = build_datasets(c["dataset"], s_data)
    lp, hp = f"low_pass:{c['band']}", f"high_pass:{c['band']}"
    try:
        train_lp, train_hp = transform_dataset(train, lp), transform_dataset(train, hp)
        obs = _observations(test, c["n_observations"])
        obs_lp, obs_hp = transform_dataset(obs, lp), transform_dataset(obs, hp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    union = concat(train_lp, train_hp)
    seq = build_scheme(c["scheme"], train, seed)
    attack = build_attack_config(c["attack"])
    model = build_model(c["model"], train, s_model)
    stages = []
    model, _, _ = train_sgd(model, union, build_train_config(c["train"], s_train))
    stages.append(("initial", model))
    model, _, _ = finetune(model, train_lp, build_train_config(c["forget"], s_forget, "experiment.forget"))
    stages.append(("forgotten", model))
    model, _, _ = finetune(model, union, build_train_config(c["recover"], s_recover, "experiment.recover"))
    stages.append(("recovered", model))
    rows, report = [], {}
    for name, m in stages:
        acc_lp, acc_hp = m.accuracy(obs_lp), m.accuracy(obs_hp)
        report[name] = {"acc_lowpass": acc_lp, "acc_highpass": acc_hp}
        for s in summarize(measure_campaign(m, obs_lp, seq, attack).records):
            rows.append((name, s.subspace_label, s.median, s.n_censored, acc_lp, acc_hp))
    return FORGETTING_HEADER, rows, report


# --- support -------------------------------------------------------------------------

SUPPORT_SCHEMA = {"name": REQUIRED, "dataset": REQUIRED, "n_perturbed": 100, "n_control": 100,
                  "model": {}, "train": {}, "finetune": {}, "attack": {}}

SUPPORT_HEADER = ["set", "sample_id", "perturbation_norm", "margin_before", "margin_after", "ratio"]


def _directional_margins(model, x, directions, attack):
    """1-D margin of ``model`` at each row of x along the matching row of ``directions``."""
    out = []
    for xi, d in zip(x, directions):
        r = deepfool_batch(model, xi[None], Subspace((d / np.linalg.norm(d))[:, None]), attack)[0]
        out.append(r.margin if r.status == CONVERGED else None)
    return out


def support(cfg: dict, seed: int):
    """Replace a few training samples by their DeepFool points, fine-tune, and compare
    margins along the original perturbation directions for perturbed and untouched samples."""
    c = section(cfg, SUPPORT_SCHEMA, "experiment")
    s_data, s_model, s_train, s_pick, s_ft = derive_seeds(seed, 5)
    train, _ = build_datasets(c["dataset"], s_data)
    attack = build_attack_config(c["attack"])
    model = build_model(c["model"], train, s_model)
    model, _, _ = train_sgd(model, train, build_train_config(c["train"], s_train))
    correct = np.flatnonzero(model.predict(train.features) == train.labels)
    need = c["n_perturbed"] + c["n_control"]
    if need > correct.size:
        raise ConfigError(f"only {correct.size} correctly classified training samples, {need} requested")
    pick = np.random.default_rng(s_pick).permutation(correct)[:need]
    p_ids, u_ids = np.sort(pick[:c["n_perturbed"]]), np.sort(pick[c["n_perturbed"]:])
    ids = np.concatenate([p_ids, u_ids])
    res = deepfool_batch(model, train.features[ids], None, attack)
    ok = np.array([r.status == CONVERGED for r in res])
    # the adversarial example is the flipping point x + (1 + overshoot) delta, not the boundary point x + delta
    deltas = (1.0 + attack.overshoot) * np.array([r.delta for r in res])
    features = train.features.copy()
    n_p = p_ids.size
    p_ok = ok[:n_p]
    features[p_ids[p_ok]] += deltas[:n_p][p_ok]
    modified = LabeledDataset(features, train.labels, train.rotation, dict(train.meta), train.image_shape)
    tuned, _, _ = finetune(model, modified, build_train_config(c["finetune"], s_ft, "experiment.finetune"))
    keep = ok
    x = train.features[ids][keep]
    d = deltas[keep]
    before = _directional_margins(model, x, d, attack)
    after = _directional_margins(tuned, x, d, attack)
    rows, ratios = [], {"P": [], "U": []}
    for sid, is_p, delta, b, a in zip(ids[keep], (np.arange(ids.size) < n_p)[keep], d, before, after):
        ratio = a / b if a is not None and b else None
        name = "P" if is_p else "U"
        if ratio is not None:
            ratios[name].append(ratio)
        rows.append((name, int(sid), float(np.linalg.norm(delta)), b, a, ratio))
    med_p, med_u = _median_or_none(ratios["P"]), _median_or_none(ratios["U"])
    report = {
        "median_ratio_P": med_p,
        "median_ratio_U": med_u,
        "factor": med_p / med_u if med_p is not None and med_u else None,
        "n_unflipped": int((~ok).sum()),
        "train_acc_before": model.accuracy(train),
        "train_acc_after": tuned.accuracy(train),
    }
    return SUPPORT_HEADER, rows, report


RECIPES = {"transition": transition, "elasticity": elasticity, "forgetting": forgetting, "support": support}
