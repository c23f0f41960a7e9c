"""Minimal perturbations (subspace-constrained DeepFool), closed-form linear margins,
L2-PGD with box constraints and the Dykstra projection for frequency-flipped inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Model, TrainConfig, input_loss_gradient, train_sgd
from .subspace import Subspace, flip_frequency

CONVERGED = "converged"
CENSORED = "censored"
UNINFORMATIVE = "uninformative"

# projected gradients below this fraction of the full gradient norm count as zero
ZERO_GRAD_RTOL = 1e-10


class UninformativeSubspaceError(ValueError):
    pass


class InfiniteMarginError(ValueError):
    pass


@dataclass
class AttackConfig:
    max_iter: int = 100
    overshoot: float = 0.02
    step_size: float | None = None
    radius: float = 1.0
    pgd_steps: int = 7
    dykstra_iters: int = 5
    refine: bool = True
    refine_steps: int = 40

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.pgd_steps < 0 or self.dykstra_iters < 1:
            raise ValueError("pgd_steps must be >= 0 and dykstra_iters >= 1")

    @property
    def pgd_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.radius / max(self.pgd_steps, 1)


@dataclass
class PerturbationResult:
    delta: np.ndarray
    margin: float
    iterations: int
    status: str
    flipped_label: int
    original_label: int

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _jacobian(model: Model, x: np.ndarray):
    """Class logits and their Jacobian ``(N, n_classes, D)`` from one forward pass (binary: row 0 is zero)."""
    acts, pre = model._forward(x)
    logits = acts[-1]
    n = x.shape[0]
    rows = []
    for j in range(model.n_outputs):
        dout = np.zeros((n, model.n_outputs))
        dout[:, j] = 1.0
        dx, _, _ = model._backward(acts, pre, dout, need_params=False)
        rows.append(dx)
    jac = np.stack(rows, axis=1)
    if model.is_binary:
        jac = np.concatenate([np.zeros_like(jac), jac], axis=1)
        logits = np.concatenate([np.zeros_like(logits), logits], axis=1)
    return logits, jac


def deepfool_batch(model: Model, x, subspace: Subspace | None = None, config: AttackConfig | None = None):
    """Subspace-constrained DeepFool on every row of ``x``.

    Each step linearizes ``f_k - f_{k0}`` for all classes ``k != k0`` at the
    current point, restricts the gradients to the subspace, and moves to the
    closest linearized boundary. A sample stops as soon as ``x + (1 + overshoot) delta``
    changes class; its margin is ``||delta||`` without the overshoot factor.

    With ``config.refine`` the last step, which may jump well past a boundary
    where the logits are flat, is searched for the first decision change along it.
    The refined delta is kept only if ``x + (1 + overshoot) delta`` still flips.
    """
    config = config or AttackConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    basis = None
    if subspace is not None:
        if subspace.ambient_dim != d:
            raise ValueError(f"subspace lives in R^{subspace.ambient_dim}, inputs in R^{d}")
        basis = subspace.basis
    k0 = model.predict_class(x)
    delta = np.zeros_like(x)
    prev = np.zeros_like(x)
    # logit gaps max_{k != k0} f_k - f_{k0} and changed flags at both ends of the last step
    ends_gap = np.zeros((n, 2))
    ends_changed = np.zeros((n, 2), dtype=bool)
    iters = np.zeros(n, dtype=int)
    status = np.full(n, CENSORED, dtype=object)
    flipped = k0.copy()
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)
    for _ in range(config.max_iter):
        idx = rows[active]
        if idx.size == 0:
            break
        xa = x[idx] + delta[idx]
        logits, jac = _jacobian(model, xa)
        own = k0[idx]
        r = np.arange(idx.size)
        diff = logits - logits[r, own][:, None]
        gdiff = jac - jac[r, own][:, None, :]
        coords = gdiff if basis is None else gdiff @ basis
        pnorm = np.linalg.norm(coords, axis=2)
        fnorm = np.linalg.norm(gdiff, axis=2)
        usable = pnorm > ZERO_GRAD_RTOL * np.maximum(fnorm, np.finfo(float).tiny)
        usable[r, own] = False
        stuck = ~usable.any(axis=1)
        if stuck.any():
            status[idx[stuck]] = UNINFORMATIVE
            active[idx[stuck]] = False
            keep = ~stuck
            idx, own, logits, diff, coords, pnorm, usable = (
                v[keep] for v in (idx, own, logits, diff, coords, pnorm, usable))
            if idx.size == 0:
                continue
            r = np.arange(idx.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(usable, np.abs(diff) / pnorm, np.inf)
        sel = np.argmin(dist, axis=1)
        step = (np.abs(diff[r, sel]) / pnorm[r, sel] ** 2)[:, None] * coords[r, sel]
        if basis is not None:
            step = step @ basis.T
        prev[idx] = delta[idx]
        diff[r, own] = -np.inf
        ends_gap[idx, 0] = diff.max(axis=1)
        ends_changed[idx, 0] = np.argmax(logits, axis=1) != own
        delta[idx] += step
        iters[idx] += 1
        # the step end and its overshoot in one forward pass
        xe = x[idx] + delta[idx]
        both = model.class_logits(np.concatenate([xe + config.overshoot * delta[idx], xe]))
        pred = np.argmax(both[: idx.size], axis=1)
        end_logits = both[idx.size:]
        ends_changed[idx, 1] = np.argmax(end_logits, axis=1) != own
        ends_gap[idx, 1] = _gap(end_logits, own)
        done = pred != own
        status[idx[done]] = CONVERGED
        flipped[idx[done]] = pred[done]
        active[idx[done]] = False
    if config.refine:
        done = rows[status == CONVERGED]
        if done.size:
            delta[done], flipped[done] = _refine_last_step(
                model, x[done], prev[done], delta[done], k0[done], flipped[done], config,
                ends_gap[done], ends_changed[done])
    margins = np.linalg.norm(delta, axis=1)
    return [
        PerturbationResult(delta[i], float(margins[i]), int(iters[i]), str(status[i]), int(flipped[i]), int(k0[i]))
        for i in range(n)
    ]


def _gap(logits, k0):
    """``max_{k != k0} f_k - f_{k0}`` per row."""
    rows = np.arange(logits.shape[0])
    others = logits.copy()
    others[rows, k0] = -np.inf
    return others.max(axis=1) - logits[rows, k0]


def _refine_last_step(model, x, lo_delta, hi_delta, k0, flipped, config, gaps, ends):
    """Locate a decision change on the segment ``lo_delta -> hi_delta``.

    Each round probes both sides of the secant estimate of the logit-gap zero
    and the bracket midpoint in one batched forward pass, then keeps
    the leftmost probed unchanged -> changed transition. The bracket at least
    halves per round and collapses at once where the gap is linear.
    """
    n = x.shape[0]
    rows = np.arange(n)
    step = hi_delta - lo_delta
    tol = 2.0**-40

    def probe(t):
        """Changed-decision flags and logit gaps at segment positions t (n, m)."""
        m = t.shape[1]
        pts = (x + lo_delta)[:, None, :] + t[:, :, None] * step[:, None, :]
        logits = model.class_logits(pts.reshape(n * m, -1))
        kk = np.repeat(k0, m)
        changed = logits.argmax(axis=1) != kk
        return changed.reshape(n, m), _gap(logits, kk).reshape(n, m)

    # only segments whose end already changes class without the overshoot can be bracketed
    ok = ends[:, 1] & ~ends[:, 0]
    # an end already within tol of the secant zero sits on the boundary; nothing to refine
    with np.errstate(divide="ignore", invalid="ignore"):
        ok &= ~(np.abs(gaps[:, 1]) <= tol * np.abs(gaps[:, 1] - gaps[:, 0]))
    if not ok.any():
        return hi_delta, flipped
    lo, hi = np.zeros(n), np.ones(n)
    g_lo, g_hi = gaps[:, 0], gaps[:, 1]
    for _ in range(config.refine_steps):
        width = hi - lo
        active = ok & (width > tol)
        if not active.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(g_hi > g_lo, -g_lo / (g_hi - g_lo), 0.5)
        guess = lo + width * np.clip(np.nan_to_num(frac, nan=0.5), 0.0, 1.0)
        t = np.stack([guess - 0.25 * tol, guess + 0.25 * tol, 0.5 * (lo + hi)], axis=1)
        t = np.sort(np.clip(t, lo[:, None], hi[:, None]), axis=1)
        ch, g = probe(t)
        # bracket ends in probe order; the first changed entry closes the bracket
        tt = np.column_stack([lo, t, hi])
        gg = np.column_stack([g_lo, g, g_hi])
        cc = np.column_stack([ch, np.ones(n, dtype=bool)])
        j = np.argmax(cc, axis=1) + 1
        lo = np.where(active, tt[rows, j - 1], lo)
        hi = np.where(active, tt[rows, j], hi)
        g_lo = np.where(active, gg[rows, j - 1], g_lo)
        g_hi = np.where(active, gg[rows, j], g_hi)
    cand = lo_delta + hi[:, None] * step
    pred = model.predict_class(x + (1.0 + config.overshoot) * cand)
    ok &= pred != k0
    out = np.where(ok[:, None], cand, hi_delta)
    return out, np.where(ok, pred, flipped)


def deepfool(model: Model, x, subspace: Subspace | None = None, config: AttackConfig | None = None) -> PerturbationResult:
    """DeepFool for one sample; raises if the subspace carries no gradient signal at x."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("deepfool takes a single sample; use deepfool_batch for several")
    res = deepfool_batch(model, x[None], subspace, config)[0]
    if res.status == UNINFORMATIVE:
        raise UninformativeSubspaceError("subspace uninformative at x: projected gradient is zero")
    return res


def linear_margin(w, b, x, subspace: Subspace | None = None) -> float:
    """Distance from x to ``{w^T z + b = 0}`` moving only inside the subspace: ``|w^T x + b| / ||P_S w||``."""
    w = np.asarray(w, dtype=float).reshape(-1)
    pw = w if subspace is None else subspace.project(w)
    denom = np.linalg.norm(pw)
    if denom <= 1e-12:
        raise InfiniteMarginError("infinite margin in S: the normal vector has no component in the subspace")
    return float(np.abs(w @ np.asarray(x, dtype=float) + float(np.squeeze(b))) / denom)


# --- constrained perturbations ---------------------------------------------------

@dataclass
class ConstraintSet:
    """L2 ball of ``radius`` around the clean input, intersected with a pixel box.

    ``flipped_l2_ball_box`` applies to frequency-flipped inputs: the ball is in
    the flipped domain and the box constrains the image obtained by flipping back.
    ``box=None`` drops the box (synthetic, unbounded features).
    """

    kind: str = "l2_ball_box"
    radius: float = 1.0
    image_shape: tuple | None = None
    box: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("l2_ball_box", "flipped_l2_ball_box"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.kind == "flipped_l2_ball_box" and (self.image_shape is None or self.box is None):
            raise ValueError("flipped constraints need an image_shape and a box")

    def contains(self, x_ref, x_adv, tol: float = 1e-6) -> np.ndarray:
        x_ref, x_adv = np.atleast_2d(x_ref), np.atleast_2d(x_adv)
        ok = np.linalg.norm(x_adv - x_ref, axis=1) <= self.radius + tol
        if self.box is not None:
            img = x_adv if self.kind == "l2_ball_box" else _flip_rows(x_adv, self.image_shape)
            lo, hi = self.box
            slack = 0.0 if self.kind == "l2_ball_box" else 1e-12
            ok &= np.all((img >= lo - slack) & (img <= hi + slack), axis=1)
        return ok


def _row_norms(v):
    return np.linalg.norm(v, axis=-1, keepdims=True)


def _ball(v, radius):
    """Scale rows of v into the closed L2 ball."""
    norms = _row_norms(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > radius, radius / norms, 1.0)
    return v * factor


def project_l2_box(x_ref, delta, epsilon: float, box=(0.0, 1.0)) -> np.ndarray:
    """Rescale delta into the epsilon ball, then clip ``x_ref + delta`` to the box."""
    x_ref = np.asarray(x_ref, dtype=float)
    delta = _ball(np.asarray(delta, dtype=float), epsilon)
    if box is None:
        return delta
    return np.clip(x_ref + delta, box[0], box[1]) - x_ref


def _flip_rows(v, image_shape):
    v = np.asarray(v, dtype=float)
    return flip_frequency(v.reshape(v.shape[:-1] + tuple(image_shape))).reshape(v.shape)


def dykstra_project(x_hat, x_hat_ref, epsilon: float, iters: int, image_shape, box=(0.0, 1.0),
                    restore: bool = False, return_image: bool = False):
    """Project flipped-domain points onto ``{z : ||z - ref|| <= eps, flip(z) in box}``.

    Dykstra alternation between the ball and the flipped box with correction
    terms ``p`` (ball) and ``q`` (box). The plain iterate ends with a box step,
    so it satisfies the box exactly and the ball only approximately. With
    ``restore`` it is then pulled radially toward the reference when still
    outside the ball; both sets contain the reference, so the result satisfies
    both constraints. ``return_image`` also returns the clipped image-domain point.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ref = np.asarray(x_hat_ref, dtype=float)
    cur = np.array(x_hat, dtype=float)
    p = np.zeros_like(cur)
    q = np.zeros_like(cur)
    lo, hi = box
    for _ in range(iters):
        y = ref + _ball(cur + p - ref, epsilon)
        p = cur + p - y
        img = np.clip(_flip_rows(y + q, image_shape), lo, hi)
        cur = _flip_rows(img, image_shape)
        q = y + q - cur
    if restore:
        shrunk = ref + _ball(cur - ref, epsilon)
        img = np.clip(_flip_rows(shrunk, image_shape), lo, hi)
        cur = _flip_rows(img, image_shape)
    if return_image:
        return cur, img
    return cur


def pgd_l2(model: Model, x, y, constraint: ConstraintSet, config: AttackConfig | None = None) -> np.ndarray:
    """Normalized-gradient ascent on the cross-entropy, projected after every step."""
    config = config or AttackConfig(radius=constraint.radius)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eps = constraint.radius
    alpha = config.pgd_step_size
    delta = np.zeros_like(x)
    for _ in range(config.pgd_steps):
        g = input_loss_gradient(model, x + delta, y)
        gn = _row_norms(g)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(gn > 0, g / gn, 0.0)
        cand = delta + alpha * g
        if constraint.kind == "l2_ball_box":
            delta = project_l2_box(x, cand, eps, constraint.box)
        else:
            delta = dykstra_project(x + cand, x, eps, config.dykstra_iters, constraint.image_shape,
                                    constraint.box, restore=True) - x
    return x + delta


@dataclass
class PerturbationLog:
    """Every perturbation crafted during adversarial training, with its energy profile."""

    labels: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    feasible: list = field(default_factory=list)

    def rows(self):
        for e, s, n, en in zip(self.epochs, self.sample_ids, self.norms, self.energies):
            yield (e, s, n, *en)


def adversarial_train(model: Model, dataset, constraint: ConstraintSet, attack_config: AttackConfig,
                      train_config: TrainConfig, energy_sequence=None, test=None, state=None,
                      on_epoch=None, plog: PerturbationLog | None = None):
    """Adversarial training: each mini-batch is replaced by its PGD examples before the SGD step.

    Returns ``(model, history, perturbation_log)``. When ``energy_sequence`` is
    given, each perturbation's energy fraction on every subspace is logged.
    ``state``/``plog`` resume an interrupted run; ``on_epoch(model, row, state, plog)``
    is called after every epoch.
    """
    from .margins import energy_fractions

    if plog is None:
        plog = PerturbationLog(labels=list(energy_sequence.labels) if energy_sequence is not None else [])

    def craft(current, xb, yb, epoch, idx):
        adv = pgd_l2(current, xb, yb, constraint, attack_config)
        delta = adv - xb
        plog.feasible.extend(constraint.contains(xb, adv).tolist())
        plog.epochs.extend([epoch] * len(idx))
        plog.sample_ids.extend(int(i) for i in idx)
        plog.norms.extend(np.linalg.norm(delta, axis=1).tolist())
        if energy_sequence is not None:
            plog.energies.extend(map(tuple, energy_fractions(delta, energy_sequence)))
        else:
            plog.energies.extend([()] * len(idx))
        return adv

    hook = None if on_epoch is None else (lambda m, row, st: on_epoch(m, row, st, plog))
    trained, history, _ = train_sgd(model, dataset, train_config, test=test, state=state,
                                    batch_transform=craft, on_epoch=hook)
    return trained, history, plog
