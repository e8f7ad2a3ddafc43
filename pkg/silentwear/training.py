"""Training loop, plateau scheduling, early stopping and incremental fine-tuning."""

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from sklearn.model_selection import train_test_split

from silentwear.config import EarlyStopConfig, FineTuneConfig, PlateauConfig, TrainConfig
from silentwear.emgio import N_CLASSES, LabeledWindow, stack_windows
from silentwear.errors import ClassUnderflow, EmptyDataset, LabelOutOfRange
from silentwear.metrics import lenient_balanced_accuracy
from silentwear.nnkernels import AdamState, Mode, Tape, adam_step, softmax_cross_entropy
from silentwear.seeding import derive_seed, rng_for
from silentwear.speechnet import SpeechNet, forward, normalize_windows, predict_logits

Windows = Union[Sequence[LabeledWindow], Tuple[np.ndarray, np.ndarray]]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_balanced_accuracy: float
    lr: float


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def val_losses(self) -> List[float]:
        return [e.val_loss for e in self.epochs]

    @property
    def lrs(self) -> List[float]:
        return [e.lr for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [asdict(e) for e in self.epochs],
        }


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` bad epochs."""

    def __init__(self, cfg: PlateauConfig, lr: float):
        self.cfg = cfg
        self.lr = lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.cfg.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.cfg.patience:
            new_lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
            if new_lr < self.lr:
                logger.debug(f"[Train] plateau: lr {self.lr:.2e} -> {new_lr:.2e}")
            self.lr = min(self.lr, new_lr)
            self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, cfg: EarlyStopConfig, threshold: float):
        self.cfg = cfg
        self.threshold = threshold
        self.best = np.inf
        self.since_best = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; True if it improved on the best loss so far."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.cfg.patience


def as_arrays(windows: Windows) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(windows, tuple):
        x, y = windows
        return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.int64)
    return stack_windows(list(windows))


def _check_labels(y: np.ndarray, n_classes: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes}), got {y.min()}..{y.max()}")


def train(
    model: SpeechNet,
    train_windows: Windows,
    val_windows: Windows,
    cfg: Optional[TrainConfig] = None,
) -> Tuple[SpeechNet, TrainHistory]:
    """Train a copy of ``model``; the input model is left untouched.

    Windows are preprocessed but not normalized; per-window z-scoring is
    applied here.
    """
    cfg = cfg or TrainConfig()
    x_train, y_train = as_arrays(train_windows)
    x_val, y_val = as_arrays(val_windows)
    if len(y_train) == 0:
        raise EmptyDataset("training set is empty")
    if len(y_val) == 0:
        raise EmptyDataset("validation set is empty")
    _check_labels(y_train, model.n_classes)
    _check_labels(y_val, model.n_classes)

    model = model.clone()
    x_train = normalize_windows(x_train)
    x_val = normalize_windows(x_val)
    rng = rng_for(cfg.seed, "shuffle")
    state = AdamState(lr=cfg.lr0, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    scheduler = PlateauScheduler(cfg.plateau, cfg.lr0)
    stopper = EarlyStopping(cfg.early_stop, cfg.plateau.threshold)
    history = TrainHistory()
    best_state = model.state_dict()
    n = len(y_train)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = Tape()
            logits = forward(model, x_train[idx], Mode.TRAIN, tape=tape,
                             freeze_bn=cfg.freeze_bn_stats)
            loss, grad = softmax_cross_entropy(logits, y_train[idx])
            grads = tape.backward(grad).params
            model.params, state = adam_step(model.params, grads, state)
            total += loss * len(idx)

        val_logits = predict_logits(model, x_val)
        val_loss, _ = softmax_cross_entropy(val_logits, y_val)
        val_bacc = lenient_balanced_accuracy(val_logits.argmax(axis=1), y_val)
        history.epochs.append(EpochRecord(epoch, total / n, val_loss, val_bacc, state.lr))
        logger.debug(
            f"[Train] epoch {epoch}: train {total / n:.4f} val {val_loss:.4f} "
            f"bacc {val_bacc:.3f} lr {state.lr:.1e}"
        )

        if stopper.step(val_loss):
            history.best_epoch = epoch
            best_state = model.state_dict()
        state.lr = scheduler.step(val_loss)
        if stopper.should_stop:
            history.stopped_early = epoch < cfg.max_epochs
            break

    if cfg.early_stop.restore_best:
        model.load_state_dict(best_state)
    best = history.epochs[history.best_epoch - 1]
    logger.info(
        f"[Train] {len(history)} epochs, best epoch {history.best_epoch} "
        f"(val loss {best.val_loss:.4f}, val bacc {best.val_balanced_accuracy:.3f})"
    )
    return model, history


def carve_validation(
    x: np.ndarray, y: np.ndarray, fraction: float, seed: int
) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """Stratified ``fraction`` validation split of a training pool."""
    idx = np.arange(len(y))
    try:
        tr, va = train_test_split(idx, test_size=fraction, stratify=y, random_state=seed)
    except ValueError:
        logger.warning("[Train] pool too small for a stratified split, splitting at random")
        tr, va = train_test_split(idx, test_size=fraction, random_state=seed)
    tr, va = np.sort(tr), np.sort(va)
    return (x[tr], y[tr]), (x[va], y[va])


def fine_tune_split(
    y: np.ndarray,
    seed: int,
    train_per_class: int = 14,
    val_per_class: int = 6,
    n_classes: int = N_CLASSES,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class split indices: ``train_per_class`` / ``val_per_class`` of each class.

    Classes with more samples than needed are subsampled first.
    """
    need = train_per_class + val_per_class
    rng = rng_for(seed, "finetune-split")
    train_idx, val_idx = [], []
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        if len(members) < need:
            raise ClassUnderflow(f"class {c} has {len(members)} samples, need {need}")
        chosen = rng.permutation(members)[:need]
        train_idx.append(chosen[:train_per_class])
        val_idx.append(chosen[train_per_class:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def fine_tune(
    model: SpeechNet,
    new_batch_windows: Windows,
    cfg_ft: Optional[FineTuneConfig] = None,
) -> Tuple[SpeechNet, TrainHistory]:
    """Fine-tune on one new batch with a 70/30 stratified split."""
    cfg_ft = cfg_ft or FineTuneConfig()
    x, y = as_arrays(new_batch_windows)
    tr, va = fine_tune_split(y, cfg_ft.seed, cfg_ft.train_per_class, cfg_ft.val_per_class,
                             model.n_classes)
    logger.info(f"[Train] fine-tune split {len(tr)}/{len(va)}")
    return train(model, (x[tr], y[tr]), (x[va], y[va]), cfg_ft)


def predict_labels(model: SpeechNet, x: np.ndarray) -> np.ndarray:
    """Argmax class for preprocessed ``(n, C, T)`` windows."""
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return predict_logits(model, normalize_windows(x)).argmax(axis=1)


def with_seed(cfg: TrainConfig, seed: int, *labels) -> TrainConfig:
    """Copy of ``cfg`` with a sub-seed derived from ``seed`` and ``labels``."""
    return cfg.model_copy(update={"seed": derive_seed(seed, *labels)})
