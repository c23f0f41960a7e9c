"""Margin-measurement campaigns over subspace sequences and their summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import CENSORED, CONVERGED, AttackConfig, deepfool_batch
from .io import write_csv
from .models import Model
from .subspace import Subspace, SubspaceSequence


@dataclass(frozen=True)
class MarginRecord:
    sample_id: int
    subspace_label: str
    margin: float
    status: str
    iterations: int


@dataclass(frozen=True)
class MarginSummary:
    subspace_label: str
    p05: float | None
    median: float | None
    p95: float | None
    n_converged: int
    n_censored: int


@dataclass(frozen=True)
class EnergyProfile:
    epoch: int
    subspace_label: str
    p95_energy_fraction: float


@dataclass
class Campaign:
    records: list
    skipped_ids: list
    n_samples: int

    @property
    def n_skipped(self) -> int:
        return len(self.skipped_ids)

    @property
    def n_measured(self) -> int:
        return self.n_samples - self.n_skipped

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def measure_campaign(model: Model, samples, sequence, config: AttackConfig | None = None,
                     labels=None, sample_ids=None) -> Campaign:
    """Run subspace-constrained DeepFool for every (sample, subspace) pair.

    ``samples`` is a dataset or a feature matrix (then ``labels`` may be given).
    Samples the model misclassifies are skipped. Records are ordered by
    (sample, subspace index). A subspace with no gradient signal at a sample is
    recorded as censored, like a run that hit ``max_iter``.
    """
    items = list(sequence)
    if not items:
        raise ValueError("empty subspace sequence")
    if hasattr(samples, "features"):
        x, labels = samples.features, samples.labels
    else:
        x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("no observation samples")
    ids = np.arange(x.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    keep = np.ones(x.shape[0], dtype=bool)
    if labels is not None:
        keep = model.predict(x) == np.asarray(labels)
    xk, idk = x[keep], ids[keep]
    per_subspace = [deepfool_batch(model, xk, s, config) for s in items]
    records = []
    for row, sid in enumerate(idk):
        for s, results in zip(items, per_subspace):
            r = results[row]
            status = CONVERGED if r.status == CONVERGED else CENSORED
            records.append(MarginRecord(int(sid), s.label, r.margin, status, r.iterations))
    return Campaign(records, [int(i) for i in ids[~keep]], x.shape[0])


def percentiles(values) -> tuple[float, float, float]:
    """5th, 50th and 95th percentiles with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=float))
    out = []
    for q in (5.0, 50.0, 95.0):
        pos = (v.size - 1) * q / 100.0
        lo = int(np.floor(pos))
        hi = min(lo + 1, v.size - 1)
        out.append(float(v[lo] + (pos - lo) * (v[hi] - v[lo])))
    return tuple(out)


def summarize(records) -> list[MarginSummary]:
    """Per-subspace percentile summary over converged records, in first-seen label order."""
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.subspace_label, []).append(r)
    out = []
    for label, recs in groups.items():
        margins = [r.margin for r in recs if r.status == CONVERGED]
        n_cens = len(recs) - len(margins)
        if margins:
            p05, med, p95 = percentiles(margins)
        else:
            p05 = med = p95 = None
        out.append(MarginSummary(label, p05, med, p95, len(margins), n_cens))
    return out


def medians(records) -> dict[str, float | None]:
    return {s.subspace_label: s.median for s in summarize(records)}


def energy_fractions(perturbations, sequence) -> np.ndarray:
    """``||P_S delta||^2 / ||delta||^2`` for each perturbation row and subspace; NaN rows for zero deltas."""
    d = np.atleast_2d(np.asarray(perturbations, dtype=float))
    items = list(sequence)
    if any(s.ambient_dim != d.shape[1] for s in items):
        raise ValueError("perturbations and subspaces must share the ambient dimension")
    total = np.sum(d * d, axis=1)
    fr = np.stack([np.sum((d @ s.basis) ** 2, axis=1) for s in items], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fr = fr / total[:, None]
    fr[total == 0] = np.nan
    return fr


def spectral_energy(perturbations, sequence, epochs=None):
    """95th-percentile energy fraction per (epoch, subspace).

    Returns ``(profiles, n_skipped)``; zero-norm perturbations are skipped.
    """
    items = list(sequence)
    fr = energy_fractions(perturbations, items)
    epochs = np.zeros(fr.shape[0], dtype=int) if epochs is None else np.asarray(epochs)
    valid = ~np.isnan(fr).any(axis=1)
    profiles = []
    for e in np.unique(epochs[valid]):
        sel = fr[valid & (epochs == e)]
        for j, s in enumerate(items):
            profiles.append(EnergyProfile(int(e), s.label, float(np.clip(percentiles(sel[:, j])[2], 0.0, 1.0))))
    return profiles, int((~valid).sum())


# --- CSV ---------------------------------------------------------------------

RECORD_HEADER = ["sample_id", "subspace_label", "margin", "status", "iterations"]
SUMMARY_HEADER = ["subspace_label", "p05", "median", "p95", "n_converged", "n_censored"]


def write_records_csv(path, records, chash=None):
    write_csv(path, RECORD_HEADER,
              [(r.sample_id, r.subspace_label, r.margin, r.status, r.iterations) for r in records], chash)


def write_summary_csv(path, summaries, chash=None):
    write_csv(path, SUMMARY_HEADER,
              [(s.subspace_label, s.p05, s.median, s.p95, s.n_converged, s.n_censored) for s in summaries], chash)


def write_energy_csv(path, plog, chash=None):
    header = ["epoch", "sample_id", "norm"] + [f"energy_{lab}" for lab in plog.labels]
    write_csv(path, header, plog.rows(), chash)


def table1_sequence(rotation: np.ndarray, S: int = 3, seed: int = 0) -> SubspaceSequence:
    """``span{u1}``, its complement, a random S-dim subspace inside the complement and a random S-dim subspace."""
    from .subspace import random_rotation

    d = rotation.shape[0]
    rng = np.random.default_rng([seed, 3])
    inner = random_rotation(d - 1, rng)[:, :S]
    items = [
        Subspace(rotation[:, :1], "u1"),
        Subspace(rotation[:, 1:], "u1_perp"),
        Subspace(rotation[:, 1:] @ inner, "S_orth"),
        Subspace(random_rotation(d, rng)[:, :S], "S_rand"),
    ]
    return SubspaceSequence(items, "table1", params={"S": S, "seed": seed})
