"""CNN flaw classifier: model presets, training loop and scan classification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, IncompatibleInputError
from .evalkit import confusion, metrics
from .nn.checkpoint import dump_checkpoint, load_checkpoint_bytes
from .nn.layers import Conv2D, Dense, Dropout, Flatten, ReLU, Softmax
from .nn.model import Sequential, count_parameters, train_step
from .nn.optim import make_optimizer
from .scan import BufferCounter, ScanHeader, ScanVolume, iter_scan_rows
from .sigproc import BUNDLE_SHAPE, BundleAssembler
from .validation import as_float_batch, check_binary_labels, check_bundle_array

logger = logging.getLogger(__name__)

#: per parameterised layer, in order (conv, conv, dense x 6)
PAPER_FULL_PARAMETER_COUNTS = (37_800, 2_250_300, 6_758_912, 65_664, 16_512, 8_256, 650, 22)
PAPER_FULL_TOTAL = 9_138_116

PRESETS = {
    "paper_full": {"conv": (300, 300), "dense": (512, 128, 128, 64, 10)},
    "ci_small": {"conv": (16, 16), "dense": (64, 32, 32, 16, 10)},
}


def build_model(preset="ci_small", dropout=0.5, seed=0, dtype=np.float64) -> Sequential:
    """Two strided 5x5 convolutions then six dense layers, ReLU throughout, softmax output.

    Dropout follows every hidden dense layer. ``paper_full`` is checked
    against its reference per-layer parameter counts at construction.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]
    layers = []
    for filters in cfg["conv"]:
        layers += [Conv2D(filters, (5, 5), (2, 2)), ReLU()]
    layers.append(Flatten())
    for units in cfg["dense"]:
        layers += [Dense(units), ReLU()]
        if dropout:
            layers.append(Dropout(dropout))
    layers += [Dense(2), Softmax()]
    model = Sequential(layers, BUNDLE_SHAPE, seed=seed, dtype=dtype)
    if preset == "paper_full":
        per_layer, total = count_parameters(model)
        assert tuple(per_layer) == PAPER_FULL_PARAMETER_COUNTS, per_layer
        assert total == PAPER_FULL_TOTAL, total
    return model


@dataclass
class TrainingState:
    """Everything needed to resume training at an epoch boundary."""

    next_epoch: int = 0
    optimizer_state: dict = field(default_factory=dict)
    best_weights: list | None = None
    best_accuracy: float = -1.0
    best_epoch: int = -1
    stale_epochs: int = 0
    history: list = field(default_factory=list)
    step: int = 0


def _epoch_metrics(model, X, y, tie_class):
    proba = model.predict_proba(as_float_batch(X, model.dtype))
    pred = decide(proba, tie_class)
    cm = confusion(pred, y)
    return metrics(cm)


def decide(proba, tie_class=0):
    """Class = argmax of the softmax; an exact tie goes to ``tie_class``."""
    proba = np.asarray(proba)
    p0, p1 = proba[:, 0], proba[:, 1]
    return np.where(p1 > p0, 1, np.where(p1 < p0, 0, tie_class)).astype(np.int64)


def train(
    model: Sequential,
    X,
    y,
    X_val=None,
    y_val=None,
    *,
    epochs=30,
    batch_size=64,
    learning_rate=1e-3,
    l2=1e-4,
    optimizer="adam",
    patience=5,
    seed=0,
    tie_class=0,
    state: TrainingState | None = None,
    on_epoch=None,
    log=None,
):
    """Mini-batch training with best-by-CV-accuracy weight tracking.

    Epoch ``e`` draws its shuffle order and dropout masks from
    ``default_rng([seed, e])``, so a run resumed from ``state`` follows the
    uninterrupted trajectory exactly. Returns the final ``TrainingState``;
    the model is left holding the best weights seen.
    """
    X = check_bundle_array(X, model.input_shape)
    y = check_binary_labels(y, X.shape[0])
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = check_bundle_array(X_val, model.input_shape)
        y_val = check_binary_labels(y_val, X_val.shape[0])
    opt = make_optimizer(optimizer, learning_rate)
    state = state or TrainingState()
    opt.load_state(state.optimizer_state, model.param_arrays())
    n = X.shape[0]
    for epoch in range(state.next_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb = as_float_batch(X[idx], model.dtype)
            losses.append(train_step(model, opt, xb, y[idx], l2=l2, rng=rng, step=state.step))
            state.step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if has_val:
            m = _epoch_metrics(model, X_val, y_val, tie_class)
            row.update(cv_accuracy=m.accuracy, cv_sensitivity=m.sensitivity, cv_specificity=m.specificity)
            score = m.accuracy
        else:
            score = -row["loss"]
        state.history.append(row)
        if score > state.best_accuracy:
            state.best_accuracy = score
            state.best_epoch = epoch
            state.best_weights = model.get_weights()
            state.stale_epochs = 0
        else:
            state.stale_epochs += 1
        state.next_epoch = epoch + 1
        state.optimizer_state = opt.state()
        if log is not None:
            log(format_history_row(row))
        if on_epoch is not None:
            on_epoch(state, model)
        if has_val and patience is not None and state.stale_epochs >= patience:
            logger.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break
    return state


def format_history_row(row) -> str:
    def fmt(v):
        return "nan" if v is None else f"{v:.6f}"

    return (
        f"epoch={row['epoch']} loss={row['loss']:.6f} cv_accuracy={fmt(row.get('cv_accuracy'))} "
        f"cv_sensitivity={fmt(row.get('cv_sensitivity'))} cv_specificity={fmt(row.get('cv_specificity'))}"
    )


class FlawCNNClassifier(ClassifierMixin, BaseEstimator):
    """Binary flaw classifier over (100, 20, 5) bundle tensors.

    ``X`` may be raw uint8 counts or floats in [0, 1]. ``fit`` accepts an
    optional cross-validation set for best-epoch selection and early
    stopping.
    """

    def __init__(
        self,
        preset="ci_small",
        epochs=30,
        batch_size=64,
        learning_rate=1e-3,
        l2=1e-4,
        dropout=0.5,
        optimizer="adam",
        patience=5,
        tie_class=0,
        dtype="float32",
        random_state=0,
    ):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2 = l2
        self.dropout = dropout
        self.optimizer = optimizer
        self.patience = patience
        self.tie_class = tie_class
        self.dtype = dtype
        self.random_state = random_state

    def _new_model(self):
        return build_model(self.preset, self.dropout, seed=self.random_state, dtype=np.dtype(self.dtype))

    def fit(self, X, y, X_val=None, y_val=None, resume: TrainingState | None = None, on_epoch=None, log=None):
        X = check_bundle_array(X, BUNDLE_SHAPE, allow_empty=True)
        if X.shape[0] == 0:
            raise ConfigError("empty training set")
        if self.tie_class not in (0, 1):
            raise ConfigError("tie_class must be 0 or 1")
        if resume is not None and getattr(self, "model_", None) is not None:
            model = self.model_
        else:
            model = self._new_model()
        state = train(
            model,
            X,
            y,
            X_val,
            y_val,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            l2=self.l2,
            optimizer=self.optimizer,
            patience=self.patience,
            seed=self.random_state,
            tie_class=self.tie_class,
            state=resume,
            on_epoch=on_epoch,
            log=log,
        )
        self.last_weights_ = model.get_weights()
        if state.best_weights is not None:
            model.set_weights(state.best_weights)
        self.model_ = model
        self.state_ = state
        self.history_ = state.history
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if getattr(self, "model_", None) is None:
            raise NotFittedError("FlawCNNClassifier is not fitted")

    def predict_proba(self, X, batch_size=256):
        self._check_fitted()
        X = check_bundle_array(X, self.model_.input_shape, allow_empty=True)
        out = []
        for s in range(0, X.shape[0], batch_size):
            out.append(self.model_.predict_proba(as_float_batch(X[s : s + batch_size], self.model_.dtype)))
        if not out:
            return np.zeros((0, 2))
        return np.concatenate(out)

    def predict(self, X):
        return decide(self.predict_proba(X), self.tie_class)

    # -- persistence -----------------------------------------------------

    def to_bytes(self, include_state=False) -> bytes:
        self._check_fitted()
        meta = {"estimator": self.get_params(), "format": "utflaw-cnn"}
        extras = {}
        if include_state:
            st = self.state_
            meta["state"] = {
                "next_epoch": st.next_epoch,
                "best_accuracy": st.best_accuracy,
                "best_epoch": st.best_epoch,
                "stale_epochs": st.stale_epochs,
                "history": st.history,
                "step": st.step,
                "adam_t": int(st.optimizer_state.get("t", 0)),
            }
            for k, v in st.optimizer_state.items():
                if k != "t":
                    extras[f"opt/{k}"] = v
            for k, w in enumerate(self.last_weights_):
                extras[f"last/{k:04d}"] = w
        return dump_checkpoint(self.model_, meta, extras)

    def save(self, path, include_state=False) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(include_state))

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlawCNNClassifier":
        model, meta, extras = load_checkpoint_bytes(data)
        params = meta.get("estimator", {})
        est = cls(**{k: v for k, v in params.items() if k in cls().get_params()})
        est.dtype = model.dtype.name
        est.model_ = model
        est.classes_ = np.array([0, 1])
        st = meta.get("state")
        if st is not None:
            opt_state = {"t": st["adam_t"]}
            opt_state.update({k[4:]: v for k, v in extras.items() if k.startswith("opt/")})
            est.state_ = TrainingState(
                next_epoch=st["next_epoch"],
                optimizer_state=opt_state,
                best_weights=model.get_weights(),
                best_accuracy=st["best_accuracy"],
                best_epoch=st["best_epoch"],
                stale_epochs=st["stale_epochs"],
                history=st["history"],
                step=st["step"],
            )
            est.history_ = est.state_.history
            est.last_weights_ = [extras[k] for k in sorted(extras) if k.startswith("last/")]
        return est

    @classmethod
    def load(cls, path) -> "FlawCNNClassifier":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def resume_state(self) -> TrainingState:
        """Training state positioned at the last completed epoch's weights (for ``fit(resume=...)``)."""
        self._check_fitted()
        self.model_.set_weights(self.last_weights_)
        return self.state_


# --------------------------------------------------------------------------
# scan classification


@dataclass(frozen=True)
class Detection:
    grid_coords: tuple
    cls: int
    score: float


@dataclass
class ScanInspection:
    header: ScanHeader
    detections: list
    tof_ns: np.ndarray
    valid: np.ndarray
    anchor: int
    dropped_waveforms: int
    counter: BufferCounter | None = None


def _as_estimator(model):
    if isinstance(model, FlawCNNClassifier):
        return model
    if isinstance(model, Sequential):
        est = FlawCNNClassifier(dtype=model.dtype.name)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est
    raise TypeError(f"expected a FlawCNNClassifier or Sequential, got {type(model).__name__}")


def inspect_rows(header: ScanHeader, rows, model, anchor=None, counter=None) -> ScanInspection:
    """Classify a scan delivered row by row; memory stays bounded by one bundle row."""
    est = _as_estimator(model)
    if tuple(est.model_.input_shape) != BUNDLE_SHAPE:
        raise IncompatibleInputError(f"model input {est.model_.input_shape} != bundle shape {BUNDLE_SHAPE}")
    asm = BundleAssembler(header, anchor)
    detections = []
    for i, row in rows:
        out = asm.push(i, row)
        if out is None:
            continue
        bi, raw = out
        proba = est.predict_proba(raw)
        cls = decide(proba, est.tie_class)
        for bj in range(raw.shape[0]):
            detections.append(Detection((bi, bj), int(cls[bj]), float(proba[bj, 1])))
    return ScanInspection(header, detections, asm.tof_ns, asm.valid, asm.anchor, asm.dropped, counter)


def inspect_scan(source, model, anchor=None, counter: BufferCounter | None = None) -> ScanInspection:
    """Stream a `.utb` path/file (or walk a ScanVolume) through bundling and the CNN."""
    if isinstance(source, ScanVolume):
        return inspect_rows(source.header, enumerate(source.rows()), model, anchor, counter)
    gen = iter_scan_rows(source, counter)
    header = next(gen)
    return inspect_rows(header, gen, model, anchor, counter)


def classify_scan(model, volume, anchor=None) -> list[Detection]:
    """One Detection per whole bundle, ordered by grid coordinates."""
    return inspect_scan(volume, model, anchor).detections
