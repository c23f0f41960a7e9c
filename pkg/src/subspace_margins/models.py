"""Differentiable classifiers with hand-written backprop, and SGD training loops.

Binary models have a single logit ``f`` and decide ``sign(f)``; for the
class-index API they behave as the two-class model with logits ``(0, f)``,
so class 1 is label +1 and class 0 is label -1.
"""

from __future__ import annotations

import base64
import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import LabeledDataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
KINDS = ("linear", "logistic", "mlp")
INITS = ("kaiming", "uniform")
SCHEDULES = ("linear_decay", "triangular", "piecewise_constant", "constant")


class TrainingDivergedError(RuntimeError):
    pass


class Model:
    """Fully connected ReLU network; ``linear``/``logistic`` are the zero-hidden-layer case."""

    def __init__(self, kind: str, weights, biases):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        weights = [np.array(w, dtype=float) for w in weights]
        biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        if kind != "mlp" and len(weights) != 1:
            raise ValueError(f"{kind} models have exactly one layer")
        self.kind = kind
        self.weights = weights
        self.biases = biases

    # construction -------------------------------------------------------------

    @classmethod
    def mlp(cls, input_dim: int, hidden, n_outputs: int = 1, seed=0, init: str = "kaiming") -> "Model":
        """Random ReLU network.

        ``init="kaiming"``: normal weights with std sqrt(2 / fan_in), zero biases.
        ``init="uniform"``: weights and biases uniform on +-1/sqrt(fan_in), the
        usual framework default; a much smaller function at initialization.
        """
        if init not in INITS:
            raise ValueError(f"unknown init {init!r}")
        rng = np.random.default_rng(seed)
        dims = [input_dim, *hidden, n_outputs]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            if init == "kaiming":
                weights.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
                biases.append(np.zeros(b))
            else:
                bound = 1.0 / np.sqrt(a)
                weights.append(rng.uniform(-bound, bound, (a, b)))
                biases.append(rng.uniform(-bound, bound, b))
        return cls("mlp", weights, biases)

    @classmethod
    def linear(cls, w, b=0.0, kind: str = "linear") -> "Model":
        w = np.asarray(w, dtype=float)
        w = w.reshape(-1, 1) if w.ndim == 1 else w
        return cls(kind, [w], [np.atleast_1d(np.asarray(b, dtype=float))])

    @classmethod
    def logistic(cls, input_dim: int, n_outputs: int = 1) -> "Model":
        return cls("logistic", [np.zeros((input_dim, n_outputs))], [np.zeros(n_outputs)])

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # shape info ---------------------------------------------------------------

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def is_binary(self) -> bool:
        return self.n_outputs == 1

    @property
    def n_classes(self) -> int:
        return 2 if self.is_binary else self.n_outputs

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    # inference ----------------------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"dimension mismatch: model expects {self.input_dim}, got {x.shape[-1]}")
        return x

    def _forward(self, x):
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        return acts, pre

    def _backward(self, acts, pre, dout, need_params=True):
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        dz = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if need_params:
                grads_w[i] = acts[i].T @ dz
                grads_b[i] = dz.sum(axis=0)
            dh = dz @ self.weights[i].T
            if i:
                dz = dh * (pre[i - 1] > 0)
        return dh, grads_w, grads_b

    def forward(self, x) -> np.ndarray:
        """Logits, shape ``(..., n_outputs)``."""
        x = self._check(x)
        single = x.ndim == 1
        acts, _ = self._forward(np.atleast_2d(x))
        return acts[-1][0] if single else acts[-1]

    def class_logits(self, x) -> np.ndarray:
        out = self.forward(x)
        if self.is_binary:
            return np.concatenate([np.zeros_like(out), out], axis=-1)
        return out

    def predict_class(self, x) -> np.ndarray:
        """Class index; ties resolve to the lowest index (binary: f <= 0 is class 0)."""
        return np.argmax(self.class_logits(x), axis=-1)

    def predict(self, x) -> np.ndarray:
        """Predicted label in dataset convention: +/-1 for binary models, class index otherwise."""
        cls = self.predict_class(x)
        return np.where(cls == 1, 1, -1) if self.is_binary else cls

    def input_gradient(self, x, coeffs) -> np.ndarray:
        """Gradient w.r.t. x of ``sum_j coeffs[j] * f_j(x)`` (rows of x independent)."""
        x = self._check(x)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        c = np.broadcast_to(np.asarray(coeffs, dtype=float), (x2.shape[0], self.n_outputs))
        acts, pre = self._forward(x2)
        dx, _, _ = self._backward(acts, pre, np.array(c), need_params=False)
        return dx[0] if single else dx

    def grad_logit_diff(self, x, k: int, l: int) -> np.ndarray:
        """Exact gradient of ``f_k - f_l`` w.r.t. x (a subgradient at ReLU kinks)."""
        n = self.n_classes
        if not (0 <= k < n and 0 <= l < n):
            raise ValueError(f"class indices must be in [0, {n}), got {k}, {l}")
        if self.is_binary:
            return self.input_gradient(x, [float(k - l)])
        c = np.zeros(self.n_outputs)
        c[k] += 1.0
        c[l] -= 1.0
        return self.input_gradient(x, c)

    # training objective ---------------------------------------------------------

    def loss(self, x, y) -> float:
        return loss_and_grads(self, x, y, need_grads=False)[0]

    def accuracy(self, ds: LabeledDataset) -> float:
        return float(np.mean(self.predict(ds.features) == ds.labels))

    # serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "subspace_margins.model",
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "layer_dims": self.layer_dims,
            "params": [_encode(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        if d.get("format") != "subspace_margins.model" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 model checkpoint")
        dims = d["layer_dims"]
        arrays = [_decode(p) for p in d["params"]]
        weights = [arrays[2 * i].reshape(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        biases = [arrays[2 * i + 1] for i in range(len(dims) - 1)]
        return cls(d["kind"], weights, biases)


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(float)


def _labels_to_targets(model: Model, y):
    y = np.asarray(y)
    if model.is_binary:
        if not set(np.unique(y)) <= {-1, 1}:
            raise ValueError("binary models train on labels in {-1, +1}")
        return y.astype(float)
    if y.min() < 0 or y.max() >= model.n_outputs:
        raise ValueError(f"labels must lie in [0, {model.n_outputs})")
    return y.astype(np.int64)


def output_loss(model: Model, logits: np.ndarray, y):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Binary: logistic loss ``log(1 + exp(-y f))``; multiclass: softmax cross-entropy.
    """
    t = _labels_to_targets(model, y)
    n = logits.shape[0]
    if model.is_binary:
        margin = t * logits[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, -margin)))
        # d/df log(1 + exp(-y f)) = -y * sigmoid(-y f)
        sig = np.exp(-np.logaddexp(0.0, margin))
        dlogits = (-t * sig / n)[:, None]
        return loss, dlogits
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), t]))
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n), t] -= 1.0
    return loss, probs / n


def loss_and_grads(model: Model, x, y, need_grads=True):
    """Mean training loss and its gradients w.r.t. ``model.params`` (same order)."""
    x = model._check(np.atleast_2d(x))
    acts, pre = model._forward(x)
    loss, dlogits = output_loss(model, acts[-1], y)
    if not need_grads:
        return loss, None
    _, gw, gb = model._backward(acts, pre, dlogits)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    return loss, grads


def input_loss_gradient(model: Model, x, y) -> np.ndarray:
    """Per-sample gradient of the cross-entropy w.r.t. the input rows."""
    x = model._check(np.atleast_2d(x))
    acts, pre = model._forward(x)
    _, dlogits = output_loss(model, acts[-1], y)
    dx, _, _ = model._backward(acts, pre, dlogits * x.shape[0], need_params=False)
    return dx


# --- training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    max_lr: float = 0.1
    lr_schedule: str = "linear_decay"
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """Per-step learning rate; ``step`` counts from 0."""
    frac = step / max(total_steps, 1)
    lr = config.max_lr
    if config.lr_schedule == "linear_decay":
        return lr * (1.0 - frac)
    if config.lr_schedule == "triangular":
        peak = 0.4
        return lr * (frac / peak if frac < peak else (1.0 - frac) / (1.0 - peak))
    if config.lr_schedule == "piecewise_constant":
        return lr * (1.0 if frac < 0.5 else 0.1 if frac < 0.75 else 0.01)
    return lr


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch; a pure function of (seed, epoch) so runs can resume."""
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


@dataclass
class TrainState:
    """Everything needed to resume a run: next epoch and momentum buffers."""

    epoch: int = 0
    velocity: list = field(default_factory=list)


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None = None


def train_sgd(
    model: Model,
    dataset: LabeledDataset,
    config: TrainConfig,
    test: LabeledDataset | None = None,
    state: TrainState | None = None,
    batch_transform=None,
    on_epoch=None,
):
    """Mini-batch SGD with momentum on the cross-entropy.

    Returns ``(trained_model, history, state)``; the input model is not modified.
    ``batch_transform(model, x, y, epoch, index)`` may replace each batch's inputs
    before the gradient step (used by adversarial training).
    """
    model = model.copy()
    state = copy.deepcopy(state) if state is not None else TrainState()
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in model.params]
    n = len(dataset)
    steps_per_epoch = -(-n // config.batch_size)
    total = steps_per_epoch * config.epochs
    history = []
    x_all, y_all = dataset.features, dataset.labels
    for epoch in range(state.epoch, config.epochs):
        perm = epoch_permutation(config.seed, epoch, n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if batch_transform is not None:
                xb = batch_transform(model, xb, yb, epoch, idx)
            loss, grads = loss_and_grads(model, xb, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {b} "
                    f"(lr={learning_rate(config, epoch * steps_per_epoch + b, total):.4g})"
                )
            lr = learning_rate(config, epoch * steps_per_epoch + b, total)
            for p, g, v in zip(model.params, grads, state.velocity):
                if config.weight_decay:
                    g = g + config.weight_decay * p
                v *= config.momentum
                v += g
                p -= lr * v
        train_loss = model.loss(x_all, y_all)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(f"non-finite training loss after epoch {epoch}")
        row = HistoryRow(
            epoch,
            train_loss,
            model.accuracy(dataset),
            model.accuracy(test) if test is not None else None,
        )
        history.append(row)
        state.epoch = epoch + 1
        log.debug("epoch %d loss %.6g acc %.4f", epoch, row.loss, row.train_acc)
        if on_epoch is not None:
            on_epoch(model, row, state)
    return model, history, state


def finetune(model: Model, dataset: LabeledDataset, config: TrainConfig, test=None, batch_transform=None):
    """Continue training from the given parameters with a fresh optimizer state."""
    return train_sgd(model, dataset, config, test=test, batch_transform=batch_transform)


def linear_onestep(dataset: LabeledDataset) -> Model:
    """One gradient-ascent step on ``sum_i y_i f(x_i)`` from ``w = 0`` with unit step: ``w = sum_i y_i x_i``."""
    y = dataset.labels
    if not set(np.unique(y)) <= {-1, 1}:
        raise ValueError("linear_onestep needs labels in {-1, +1}")
    w = y.astype(float) @ dataset.features
    return Model.linear(w, 0.0)


def state_to_dict(state: TrainState) -> dict:
    return {"epoch": state.epoch, "velocity": [_encode(v) for v in state.velocity]}


def state_from_dict(d: dict, model: Model) -> TrainState:
    vel = [_decode(s).reshape(p.shape) for s, p in zip(d["velocity"], model.params)]
    return TrainState(d["epoch"], vel)


def save_checkpoint(path: str, model: Model, state: TrainState | None = None, config: TrainConfig | None = None,
                    extra: dict | None = None):
    """JSON checkpoint; ``extra`` holds caller data (history, logs) stored under its own keys."""
    from .io import atomic_write_text

    payload = dict(extra or {})
    payload["model"] = model.to_dict()
    if state is not None:
        payload["state"] = state_to_dict(state)
    if config is not None:
        payload["train_config"] = asdict(config)
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str, with_payload: bool = False):
    """``(model, state, train_config)``, plus the raw payload when ``with_payload``."""
    with open(path) as f:
        payload = json.load(f)
    model = Model.from_dict(payload["model"])
    state = state_from_dict(payload["state"], model) if "state" in payload else None
    if with_payload:
        return model, state, payload.get("train_config"), payload
    return model, state, payload.get("train_config")
