"""Multi-label classifiers over (types x 4 bins) admission tensors.

Three interchangeable variants differ only in the first layer, which learns
patterns across the time dimension: a dense layer on the flattened tensor
(fcnn), a per-type convolution spanning the 4 bins (cnn), or a simple tanh
recurrence over the bins (rnn). All variants continue with dropout and two
512-wide dense layers into a sigmoid head with one output per category.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CatalogMismatch,
    DegenerateLabels,
    EmptyPartition,
    InvalidConfig,
    IoFailure,
    ShapeMismatch,
)
from .metrics import pr_auc
from .nn import (
    Adam,
    DenseLayer,
    DropoutLayer,
    FlattenLayer,
    ReluLayer,
    SimpleRnnLayer,
    TimeConvLayer,
    sigmoid,
    bce_loss,
)

VARIANTS = ("fcnn", "cnn", "rnn")


@dataclass(frozen=True)
class ChartModelConfig:
    variant: str = "cnn"
    n_types: int = 450
    n_categories: int = 281
    hidden_size: int = 512
    epochs: int = 3
    batch_size: int = 32
    lr: float = 2e-5
    dropout: float = 0.2
    conv_filters: int = 8
    rnn_hidden: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        for name in ("n_types", "n_categories", "hidden_size", "batch_size",
                     "conv_filters", "rnn_hidden"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0,1)")
        if self.lr <= 0:
            raise InvalidConfig("lr must be positive")


class ChartModel:
    """Layer stack producing logits; sigmoid turns them into probabilities."""

    def __init__(self, config: ChartModelConfig):
        config.validate()
        self.config = config
        init_rng = np.random.default_rng([config.seed, 0])
        drop_rng = np.random.default_rng([config.seed, 1])
        t, h, c = config.n_types, config.hidden_size, config.n_categories

        def drop() -> DropoutLayer:
            return DropoutLayer(config.dropout, drop_rng)

        if config.variant == "fcnn":
            first = [FlattenLayer(), DenseLayer(t * 4, h, init_rng),
                     ReluLayer()]
            width = h
        elif config.variant == "cnn":
            first = [TimeConvLayer(config.conv_filters, init_rng),
                     ReluLayer(), FlattenLayer()]
            width = t * config.conv_filters
        else:
            first = [SimpleRnnLayer(t, config.rnn_hidden, init_rng)]
            width = config.rnn_hidden

        self.layers = first + [
            drop(),
            DenseLayer(width, h, init_rng), ReluLayer(), drop(),
            DenseLayer(h, h, init_rng), ReluLayer(), drop(),
            DenseLayer(h, c, init_rng),
        ]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out = x
        for layer in self.layers:
            out = layer.forward(out, train=train)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]


@dataclass
class TrainedModel:
    model: ChartModel
    history: dict = field(default_factory=dict)
    catalog: list[str] = field(default_factory=list)
    stats_ref: str = ""  # where the normalization statistics live

    @property
    def config(self) -> ChartModelConfig:
        return self.model.config


def build(config: ChartModelConfig) -> ChartModel:
    return ChartModel(config)


def _check_inputs(config: ChartModelConfig, tensors: np.ndarray):
    if tensors.ndim != 3 or tensors.shape[1] != config.n_types \
            or tensors.shape[2] != 4:
        raise CatalogMismatch(
            f"tensors {tensors.shape} do not match "
            f"({config.n_types} types x 4 bins)"
        )


def train(
    model: ChartModel,
    tensors: np.ndarray,
    labels: np.ndarray,
    admission_ids: list[str],
    assignment: dict[str, str],
    catalog: Optional[list[str]] = None,
    stats_ref: str = "",
) -> TrainedModel:
    """Run the configured number of epochs of minibatch Adam.

    Minibatches are drawn from a fresh seeded shuffle each epoch. The log
    records the mean train loss per epoch and, when the validation split has
    both classes, its micro AU-PR. No early stopping: the epoch count is
    fixed configuration.
    """
    config = model.config
    _check_inputs(config, tensors)
    if labels.shape != (tensors.shape[0], config.n_categories):
        raise ShapeMismatch(
            f"labels {labels.shape} do not match "
            f"({tensors.shape[0]}, {config.n_categories})"
        )
    train_idx = [i for i, adm in enumerate(admission_ids)
                 if assignment.get(str(adm)) == "train"]
    val_idx = [i for i, adm in enumerate(admission_ids)
               if assignment.get(str(adm)) == "val"]
    if not train_idx:
        raise EmptyPartition("no training samples in the split")

    rng = np.random.default_rng([config.seed, 2])
    optimizer = Adam(model.params(), lr=config.lr)
    history: dict = {"train_loss": [], "val_micro_aupr": []}

    for _ in range(config.epochs):
        order = rng.permutation(len(train_idx))
        total_loss = 0.0
        total_cells = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_idx[k] for k in order[start:start + config.batch_size]]
            x = tensors[batch]
            y = labels[batch]
            logits = model.forward(x, train=True)
            probs = sigmoid(logits)
            loss, grad_logits = bce_loss(probs, y)
            model.backward(grad_logits)
            optimizer.step(model.grads())
            total_loss += loss * y.size
            total_cells += y.size
        history["train_loss"].append(total_loss / total_cells)
        if val_idx:
            val_probs = predict(model, tensors[val_idx])
            try:
                val_aupr = pr_auc(val_probs.ravel(), labels[val_idx].ravel())
            except DegenerateLabels:
                val_aupr = None
            history["val_micro_aupr"].append(val_aupr)
        else:
            history["val_micro_aupr"].append(None)

    return TrainedModel(model=model, history=history,
                        catalog=list(catalog) if catalog else [],
                        stats_ref=stats_ref)


def predict(model: ChartModel, tensors: np.ndarray,
            batch_size: int = 256) -> np.ndarray:
    """Probability matrix (N, C); deterministic, dropout disabled."""
    _check_inputs(model.config, tensors)
    chunks = []
    for start in range(0, tensors.shape[0], batch_size):
        logits = model.forward(tensors[start:start + batch_size], train=False)
        chunks.append(sigmoid(logits))
    if not chunks:
        return np.zeros((0, model.config.n_categories))
    return np.concatenate(chunks, axis=0)


# --- checkpointing ----------------------------------------------------------

_CHECKPOINT_VERSION = 1


def save_checkpoint(path, trained: TrainedModel):
    meta = {
        "version": _CHECKPOINT_VERSION,
        "config": asdict(trained.config),
        "history": trained.history,
        "catalog": trained.catalog,
        "stats_ref": trained.stats_ref,
    }
    arrays = {
        f"param_{i}": p for i, p in enumerate(trained.model.params())
    }
    try:
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> TrainedModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            arrays = [data[f"param_{i}"]
                      for i in range(len(data.files) - 1)]
    except (OSError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if meta.get("version") != _CHECKPOINT_VERSION:
        raise IoFailure(f"{path}: unsupported checkpoint version")
    cfg = meta["config"]
    config = ChartModelConfig(**cfg)
    model = build(config)
    params = model.params()
    if len(params) != len(arrays):
        raise ShapeMismatch(
            f"checkpoint has {len(arrays)} arrays, model needs {len(params)}"
        )
    for p, stored in zip(params, arrays):
        if p.shape != stored.shape:
            raise ShapeMismatch(
                f"checkpoint array {stored.shape} vs parameter {p.shape}"
            )
        p[...] = stored
    return TrainedModel(model=model, history=meta.get("history", {}),
                        catalog=[str(x) for x in meta.get("catalog", [])],
                        stats_ref=str(meta.get("stats_ref", "")))
