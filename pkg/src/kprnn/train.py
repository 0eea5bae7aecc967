"""Sequence classifier, BPTT gradients, optimizers, gradient checking and the
training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import PruneSchedule, prune_mask, schedule_sparsity
from .cells import Cell, CellSpec, build_cell, cell_backward, sequence_forward
from .operators import DenseOperator, SparseOperator

__all__ = [
    "SequenceClassifier",
    "SequenceDataset",
    "TrainConfig",
    "TrainingDiverged",
    "FiniteDiffReport",
    "build_model",
    "clip_by_global_norm",
    "optimizer_step",
    "finite_diff_check",
    "train_model",
    "make_separable_sequences",
]

log = logging.getLogger(__name__)


@dataclass
class SequenceDataset:
    """``xs`` of shape ``(N, T, features)`` with integer ``labels`` of shape ``(N,)``."""

    xs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.xs.ndim != 3 or self.xs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"xs {self.xs.shape} and labels {self.labels.shape} do not match")

    def __len__(self):
        return self.xs.shape[0]

    @property
    def n_features(self) -> int:
        return self.xs.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def make_separable_sequences(n_samples: int = 64, timesteps: int = 16, features: int = 8,
                             n_classes: int = 2, noise: float = 0.5, seed: int = 0) -> SequenceDataset:
    """Toy task: each class adds its own fixed direction to Gaussian noise at every step.

    The time-averaged input is linearly separable by construction.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, features))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    xs = centers[labels][:, None, :] + noise * rng.standard_normal((n_samples, timesteps, features))
    return SequenceDataset(xs, labels)


class SequenceClassifier:
    """One recurrent cell (or a forward/backward pair) followed by a softmax head
    over the final hidden state."""

    def __init__(self, cells: list[Cell], W_out, b_out):
        if len(cells) not in (1, 2):
            raise ValueError("expected one cell, or two for a bidirectional model")
        self.cells = list(cells)
        self.W_out = np.array(W_out, dtype=np.float64)
        self.b_out = np.array(b_out, dtype=np.float64)
        if self.W_out.shape != (self.b_out.size, self.feature_size):
            raise ValueError(f"head shape {self.W_out.shape} incompatible with features {self.feature_size}")

    @property
    def spec(self) -> CellSpec:
        return self.cells[0].spec

    @property
    def bidirectional(self) -> bool:
        return len(self.cells) == 2

    @property
    def feature_size(self) -> int:
        return sum(c.hidden_size for c in self.cells)

    @property
    def n_classes(self) -> int:
        return self.b_out.size

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, cell in zip(("fwd", "bwd"), self.cells):
            out.update({f"{prefix}.{k}": v for k, v in cell.params().items()})
        out["head.W"] = self.W_out
        out["head.b"] = self.b_out
        return out

    def parameter_count(self) -> int:
        return sum(c.parameter_count() for c in self.cells) + self.W_out.size + self.b_out.size

    def recurrent_parameter_count(self) -> int:
        return sum(c.parameter_count() for c in self.cells)

    # xs: (T, n, batch)
    def _features(self, xs, bptt_length=None):
        feats, caches = [], []
        for cell, seq in zip(self.cells, (xs, xs[::-1])):
            T = seq.shape[0]
            k = T if bptt_length is None else min(T, bptt_length)
            state = None
            if k < T:
                state, _ = sequence_forward(cell, seq[:T - k])
            final, hs, cc = sequence_forward(cell, seq[T - k:], state, return_cache=True)
            feats.append(final.h)
            caches.append((hs, cc))
        return np.concatenate(feats, axis=0), caches

    def logits(self, xs) -> np.ndarray:
        """Class scores ``(n_classes, batch)`` for ``xs`` of shape ``(T, n, batch)``."""
        feats, _ = self._features(xs)
        return self.W_out @ feats + self.b_out[:, None]

    def predict(self, xs) -> np.ndarray:
        return np.argmax(self.logits(xs), axis=0)

    def loss(self, xs, labels) -> float:
        return _cross_entropy(self.logits(xs), labels)[0]

    def loss_and_grads(self, xs, labels, bptt_length=None):
        """Mean softmax cross-entropy over the batch and its exact gradients."""
        feats, caches = self._features(xs, bptt_length)
        z = self.W_out @ feats + self.b_out[:, None]
        loss, g_z = _cross_entropy(z, labels)
        grads = {"head.W": g_z @ feats.T, "head.b": g_z.sum(axis=1)}
        g_feats = self.W_out.T @ g_z
        offset = 0
        for prefix, cell, (hs, cc) in zip(("fwd", "bwd"), self.cells, caches):
            m = cell.hidden_size
            g_hs = np.zeros_like(hs)
            g_hs[-1] = g_feats[offset:offset + m]
            offset += m
            cg, _ = cell_backward(cell, cc, g_hs)
            grads.update({f"{prefix}.{k}": v for k, v in cg.items()})
        return loss, grads

    def clone(self) -> "SequenceClassifier":
        return copy.deepcopy(self)


def _cross_entropy(z: np.ndarray, labels) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    z = z - z.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    B = z.shape[1]
    loss = -logp[labels, np.arange(B)].mean()
    g = np.exp(logp)
    g[labels, np.arange(B)] -= 1.0
    return float(loss), g / B


def build_model(spec: CellSpec, n_classes: int, bidirectional: bool = False,
                seed: int | np.random.Generator | None = 0) -> SequenceClassifier:
    rng = np.random.default_rng(seed)
    cells = [build_cell(spec, rng) for _ in range(2 if bidirectional else 1)]
    H = spec.hidden_size * len(cells)
    limit = math.sqrt(6.0 / (H + n_classes))
    return SequenceClassifier(cells, rng.uniform(-limit, limit, (n_classes, H)), np.zeros(n_classes))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    bptt_length: int | None = None
    clip_norm: float = 5.0
    seed: int = 0
    bidirectional: bool = False
    prune_schedule: PruneSchedule | None = None
    prune_mode: str = "gradual"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.clip_norm <= 0:
            raise ValueError("learning rate, batch size and clip norm must be positive")
        if self.bptt_length is not None and self.bptt_length < 1:
            raise ValueError("bptt_length must be positive")
        if self.prune_mode not in ("gradual", "oneshot"):
            raise ValueError(f"unknown prune mode {self.prune_mode!r}")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("optimizer", "lr", "batch_size", "epochs", "bptt_length",
                                           "clip_norm", "seed", "bidirectional", "prune_mode")}
        s = self.prune_schedule
        d["prune_schedule"] = None if s is None else {
            "start_step": s.start_step, "end_step": s.end_step,
            "final_sparsity": s.final_sparsity, "interval": s.interval}
        return d


def optimizer_step(params: dict, grads: dict, state: dict, config: TrainConfig) -> dict:
    """Update ``params`` in place; returns the (mutated) optimizer state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    if config.optimizer == "sgd":
        for name, p in params.items():
            p -= config.lr * grads[name]
        return state
    t = state.get("t", 0) + 1
    state["t"] = t
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        p -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


@dataclass
class FiniteDiffReport:
    """Maximum error per parameter block, measured against the block's largest gradient."""

    errors: dict[str, float]
    tolerance: float
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def finite_diff_check(model: SequenceClassifier, xs, labels, tolerance: float = 1e-5,
                      h: float = 1e-6, max_coords: int = 200, seed: int = 0,
                      grads: dict | None = None) -> FiniteDiffReport:
    """Compare analytic gradients with central differences.

    ``xs`` has shape ``(T, n, batch)``.  Pass ``grads`` to audit an externally
    supplied gradient instead of the model's own.
    """
    rng = np.random.default_rng(seed)
    if grads is None:
        _, grads = model.loss_and_grads(xs, labels)
    errors, counts = {}, {}
    for name, p in model.params().items():
        g = grads[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        num = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            lp = model.loss(xs, labels)
            flat[k] = orig - h
            lm = model.loss(xs, labels)
            flat[k] = orig
            num[j] = (lp - lm) / (2 * h)
        ana = g.reshape(-1)[idx]
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-12)
        errors[name] = float(np.max(np.abs(ana - num)) / scale)
        counts[name] = int(idx.size)
    return FiniteDiffReport(errors, tolerance, counts)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


def _batched(xs):
    # (N, T, n) -> (T, n, N)
    return np.ascontiguousarray(np.transpose(xs, (1, 2, 0)))


def evaluate(model: SequenceClassifier, dataset: SequenceDataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (in percent) over the whole dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z = model.logits(_batched(dataset.xs))
    loss, _ = _cross_entropy(z, dataset.labels)
    acc = 100.0 * float(np.mean(np.argmax(z, axis=0) == dataset.labels))
    return loss, acc


def _masked_ops(model):
    return [c.op for c in model.cells if isinstance(c.op, DenseOperator) and c.op.mask is not None]


def _finalize_sparse(model, sparsity):
    for cell in model.cells:
        W = cell.op.materialize()
        cell.op = SparseOperator.from_dense(W, prune_mask(W, sparsity))


def train_model(spec: CellSpec, dataset: SequenceDataset, config: TrainConfig | None = None,
                n_classes: int | None = None, model: SequenceClassifier | None = None):
    """Train a sequence classifier from scratch.

    Returns ``(model, history)``; ``history`` has one ``{"epoch", "loss",
    "accuracy"}`` record per epoch, starting with the untrained model at epoch 0.
    Sparse cells are pruned on ``config.prune_schedule`` (a cubic ramp over the
    first half of training by default) and stored as CSR afterwards.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.n_features != spec.input_size:
        raise ValueError(f"dataset has {dataset.n_features} features, cell expects {spec.input_size}")
    n_classes = n_classes or max(dataset.n_classes, 2)
    rng = np.random.default_rng(config.seed)
    gradual = spec.operator == "sparse" and config.prune_mode == "gradual" and not spec.per_gate
    if model is None:
        model = build_model(replace(spec, operator="dense") if gradual else spec, n_classes,
                            config.bidirectional, rng)

    N = len(dataset)
    steps_per_epoch = math.ceil(N / config.batch_size)
    schedule = None
    if gradual:
        rows, cols = spec.operator_shape
        sparsity = spec.effective_sparsity(rows, cols)
        schedule = config.prune_schedule or PruneSchedule(
            0, max(1, steps_per_epoch * config.epochs // 2), sparsity, max(1, steps_per_epoch))
        for cell in model.cells:
            cell.op.set_mask(np.ones(cell.op.shape, dtype=bool))

    loss, acc = evaluate(model, dataset)
    history = [{"epoch": 0, "loss": loss, "accuracy": acc}]
    opt_state: dict = {}
    step = 0
    for epoch in range(1, config.epochs + 1):
        good = model.clone()
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            if schedule is not None and schedule.is_update_step(step):
                s = schedule_sparsity(schedule, step)
                for op in _masked_ops(model):
                    op.set_mask(prune_mask(op.W, s))
            batch_loss, grads = model.loss_and_grads(_batched(dataset.xs[idx]), dataset.labels[idx],
                                                     config.bptt_length)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"loss became {batch_loss} at epoch {epoch}", good, history)
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            try:
                opt_state = optimizer_step(model.params(), grads, opt_state, config)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), good, history) from exc
            for op in _masked_ops(model):
                # optimizer momentum must not revive pruned weights
                op.W[~op.mask] = 0.0
            step += 1
        if schedule is not None and epoch == config.epochs:
            _finalize_sparse(model, schedule.final_sparsity)
        loss, acc = evaluate(model, dataset)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} after epoch {epoch}", good, history)
        history.append({"epoch": epoch, "loss": loss, "accuracy": acc})
        log.debug("epoch %d loss %.6f acc %.2f", epoch, loss, acc)
    if schedule is not None and config.epochs == 0:
        _finalize_sparse(model, schedule.final_sparsity)
        loss, acc = evaluate(model, dataset)
        history[0] = {"epoch": 0, "loss": loss, "accuracy": acc}
    if schedule is not None:
        for cell in model.cells:
            cell.spec = spec
    return model, history
