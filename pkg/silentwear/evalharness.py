"""Evaluation protocols: leave-one-batch-out, leave-one-session-out,
incremental fine-tuning, training from scratch and the window-size ablation.

Models are subject-specific and condition-specific. Rest windows are balanced
on each training pool; test batches keep their natural composition.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from sklearn.model_selection import LeaveOneGroupOut

from silentwear import __version__
from silentwear.config import FineTuneConfig, RunConfig, SpeechNetConfig, TrainConfig
from silentwear.dsp import preprocess_recording
from silentwear.emgio import (
    BatchRef,
    Condition,
    DatasetManifest,
    LabeledWindow,
    balance_rest,
    read_recording,
    stack_windows,
    windows_from_recording,
)
from silentwear.errors import IncompleteManifest
from silentwear.metrics import balanced_accuracy, confusion, fold_itr
from silentwear.seeding import derive_seed
from silentwear.speechnet import SpeechNet, build_speechnet
from silentwear.training import carve_validation, fine_tune, predict_labels, train, with_seed

N_BATCHES = 5


class Setting(str, Enum):
    GLOBAL = "global"
    INTERSESSION = "intersession"
    INCR_A = "incr-a"
    INCR_B = "incr-b"


@dataclass(frozen=True)
class Fold:
    id: int
    train_refs: Tuple[BatchRef, ...]
    test_refs: Tuple[BatchRef, ...]


# Fold construction

def session_grid(
    manifest: DatasetManifest, subject: str, condition: Condition, n_batches: int = N_BATCHES
) -> List[BatchRef]:
    """All ``(session, batch)`` refs of a subject/condition, checked for completeness."""
    condition = Condition(condition)
    entry = next((s for s in manifest.subjects if s.id == subject), None)
    if entry is None:
        raise IncompleteManifest(f"subject {subject!r} not in manifest")
    present = set(manifest.refs(subject, condition))
    refs = []
    for session in sorted(s.session for s in entry.sessions):
        for batch in range(1, n_batches + 1):
            ref = BatchRef(subject, session, batch, condition)
            if ref not in present:
                raise IncompleteManifest(
                    f"missing batch (subject={subject}, session={session}, "
                    f"batch={batch}, condition={condition.value})"
                )
            refs.append(ref)
    if not refs:
        raise IncompleteManifest(f"subject {subject!r} has no sessions")
    return refs


def _folds_by_group(refs: List[BatchRef], groups: Sequence[int]) -> List[Fold]:
    folds = []
    splitter = LeaveOneGroupOut()
    for i, (tr, te) in enumerate(splitter.split(np.zeros(len(refs)), groups=groups)):
        folds.append(Fold(i, tuple(refs[j] for j in tr), tuple(refs[j] for j in te)))
    return folds


def make_folds_global(
    manifest: DatasetManifest, subject: str, condition: Condition, n_batches: int = N_BATCHES
) -> List[Fold]:
    """Fold ``i`` tests on batch ``i`` of every session, trains on the rest."""
    refs = session_grid(manifest, subject, condition, n_batches)
    return _folds_by_group(refs, [r.batch for r in refs])


def make_folds_intersession(
    manifest: DatasetManifest, subject: str, condition: Condition, n_batches: int = N_BATCHES
) -> List[Fold]:
    """Fold ``s`` tests on every batch of session ``s``, trains on the others."""
    refs = session_grid(manifest, subject, condition, n_batches)
    sessions = sorted({r.session for r in refs})
    if len(sessions) < 2:
        raise IncompleteManifest(f"subject {subject!r} needs at least 2 sessions")
    if len(sessions) == 2:
        logger.warning(f"[Eval] {subject}: only 2 sessions, each fold trains on one session")
    return _folds_by_group(refs, [r.session for r in refs])


# Data access

class WindowSource:
    """Preprocessed windows per batch, cached by ``(ref, window_ms)``."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._windows: Dict[Tuple[BatchRef, int], List[LabeledWindow]] = {}

    def windows(self, ref: BatchRef, window_ms: int) -> List[LabeledWindow]:
        key = (ref, window_ms)
        if key not in self._windows:
            rec = preprocess_recording(read_recording(self.manifest.path_for(ref)))
            self._windows[key] = windows_from_recording(rec, window_ms, meta=ref)
        return self._windows[key]

    def pool(self, refs: Sequence[BatchRef], window_ms: int) -> List[LabeledWindow]:
        out: List[LabeledWindow] = []
        for ref in refs:
            out.extend(self.windows(ref, window_ms))
        return out

    def arrays(self, refs: Sequence[BatchRef], window_ms: int) -> Tuple[np.ndarray, np.ndarray]:
        return stack_windows(self.pool(refs, window_ms))

    def clear(self) -> None:
        self._windows.clear()


# Reports

@dataclass
class FoldResult:
    fold_id: int
    train_refs: List[dict]
    test_refs: List[dict]
    balanced_accuracy: float
    confusion: List[List[int]]
    n_test: int
    best_epoch: int
    epochs: int
    itr: Optional[float] = None


@dataclass
class EvalReport:
    setting: str
    subject: str
    condition: str
    window_ms: int
    folds: List[FoldResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def accuracies(self) -> List[float]:
        return [f.balanced_accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.folds else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.folds else 0.0

    @property
    def mean_itr(self) -> Optional[float]:
        values = [f.itr for f in self.folds if f.itr is not None]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update(mean=self.mean, std=self.std, mean_itr=self.mean_itr)
        return data


@dataclass
class Curve:
    kind: str  # "finetuned" | "baseline" | "scratch"
    session: int
    batches: List[int]
    accuracies: List[float]


@dataclass
class IncrementalReport:
    setting: str
    subject: str
    condition: str
    window_ms: int
    curves: List[Curve] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__

    def curves_of(self, kind: str) -> List[Curve]:
        return [c for c in self.curves if c.kind == kind]

    def mean_curve(self, kind: str) -> Dict[int, float]:
        """Average accuracy per batch index across rotations."""
        per_batch: Dict[int, List[float]] = {}
        for curve in self.curves_of(kind):
            for b, acc in zip(curve.batches, curve.accuracies):
                per_batch.setdefault(b, []).append(acc)
        return {b: float(np.mean(v)) for b, v in sorted(per_batch.items())}

    def mean_accuracy(self, kind: str, batches: Optional[Sequence[int]] = None) -> float:
        curve = self.mean_curve(kind)
        values = [v for b, v in curve.items() if batches is None or b in batches]
        return float(np.mean(values)) if values else 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mean_curves"] = {
            kind: self.mean_curve(kind)
            for kind in ("finetuned", "baseline", "scratch") if self.curves_of(kind)
        }
        return data


@dataclass
class AblationRow:
    window_ms: int
    mean_accuracy: float
    std_accuracy: float
    mean_itr: Optional[float]
    fold_itr: List[Optional[float]]
    below_chance_folds: int


@dataclass
class AblationReport:
    subject: str
    condition: str
    rows: List[AblationRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def accuracy_non_decreasing(self) -> bool:
        acc = [r.mean_accuracy for r in self.rows]
        return all(b >= a for a, b in zip(acc, acc[1:]))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["accuracy_non_decreasing"] = self.accuracy_non_decreasing
        return data


def config_echo(cfg: RunConfig, **extra) -> dict:
    echo = {"seed": cfg.seed, "model": cfg.model.model_dump(mode="json"),
            "train": cfg.train.model_dump(mode="json")}
    echo.update(extra)
    return echo


def summarize_subjects(means: Dict[str, float]) -> dict:
    """Mean and std of per-subject means."""
    values = list(means.values())
    return {
        "subjects": dict(means),
        "mean": float(np.mean(values)) if values else 0.0,
        "std": float(np.std(values)) if values else 0.0,
    }


# Training helpers

def _balanced_pool(pool: List[LabeledWindow], seed: int) -> Tuple[np.ndarray, np.ndarray]:
    return stack_windows(balance_rest(pool, seed))


def train_on_pool(
    x: np.ndarray,
    y: np.ndarray,
    model_cfg: SpeechNetConfig,
    train_cfg: TrainConfig,
    seed: int,
    *labels,
):
    """Carve validation, build and train a fresh model."""
    tr, va = carve_validation(x, y, train_cfg.val_fraction, derive_seed(seed, "val", *labels))
    model = build_speechnet(config=model_cfg, seed=derive_seed(seed, "init", *labels))
    return train(model, tr, va, with_seed(train_cfg, seed, "train", *labels))


def _run_fold(
    fold: Fold,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    model_cfg: SpeechNetConfig,
    train_cfg: TrainConfig,
    seed: int,
    setting: str,
    window_ms: int,
    with_itr: bool,
) -> FoldResult:
    model, history = train_on_pool(x_train, y_train, model_cfg, train_cfg, seed,
                                   setting, fold.id)
    preds = predict_labels(model, x_test)
    bacc = balanced_accuracy(preds, y_test, model.n_classes)
    result = FoldResult(
        fold_id=fold.id,
        train_refs=[r.as_dict() for r in fold.train_refs],
        test_refs=[r.as_dict() for r in fold.test_refs],
        balanced_accuracy=bacc,
        confusion=confusion(preds, y_test, model.n_classes).tolist(),
        n_test=int(len(y_test)),
        best_epoch=history.best_epoch,
        epochs=len(history),
    )
    if with_itr:
        result.itr = fold_itr(bacc, window_ms, model.n_classes)
    return result


def run_setting(
    setting: Setting,
    manifest: DatasetManifest,
    subject: str,
    condition: Condition,
    window_ms: int,
    cfg: Optional[RunConfig] = None,
    source: Optional[WindowSource] = None,
    jobs: Optional[int] = None,
    with_itr: bool = False,
) -> EvalReport:
    """Train and test one model per fold of the Global or InterSession protocol."""
    cfg = cfg or RunConfig()
    setting = Setting(setting)
    condition = Condition(condition)
    if setting is Setting.GLOBAL:
        folds = make_folds_global(manifest, subject, condition)
    elif setting is Setting.INTERSESSION:
        folds = make_folds_intersession(manifest, subject, condition)
    else:
        raise ValueError(f"run_setting handles global/intersession, got {setting.value}")
    source = source or WindowSource(manifest)
    jobs = jobs or cfg.eval.jobs

    payloads = []
    for fold in folds:
        balance_seed = derive_seed(cfg.seed, "balance", setting.value, subject, fold.id)
        x_tr, y_tr = _balanced_pool(source.pool(fold.train_refs, window_ms), balance_seed)
        x_te, y_te = source.arrays(fold.test_refs, window_ms)
        payloads.append((fold, x_tr, y_tr, x_te, y_te))
    logger.info(
        f"[Eval] {setting.value} {subject}/{condition.value} {window_ms} ms: "
        f"{len(folds)} folds, jobs={jobs}"
    )
    results = Parallel(n_jobs=jobs)(
        delayed(_run_fold)(fold, x_tr, y_tr, x_te, y_te, cfg.model, cfg.train, cfg.seed,
                           setting.value, window_ms, with_itr)
        for fold, x_tr, y_tr, x_te, y_te in payloads
    )
    report = EvalReport(
        setting=setting.value,
        subject=subject,
        condition=condition.value,
        window_ms=window_ms,
        folds=list(results),
        config=config_echo(cfg, window_ms=window_ms, condition=condition.value,
                           subject=subject),
    )
    logger.info(f"[Eval] {setting.value} {subject}: {report.mean:.3f} +/- {report.std:.3f}")
    return report


def _accuracy(model: SpeechNet, source: WindowSource, ref: BatchRef, window_ms: int) -> float:
    x, y = source.arrays([ref], window_ms)
    return balanced_accuracy(predict_labels(model, x), y, model.n_classes)


def _batch_arrays(source: WindowSource, ref: BatchRef, window_ms: int, seed: int):
    return _balanced_pool(source.windows(ref, window_ms), seed)


def _sessions(manifest: DatasetManifest, subject: str, condition: Condition,
              only: Optional[int]) -> Tuple[List[BatchRef], List[int]]:
    refs = session_grid(manifest, subject, condition)
    sessions = sorted({r.session for r in refs})
    if only is not None:
        if only not in sessions:
            raise IncompleteManifest(f"subject {subject!r} has no session {only}")
        sessions = [only]
    return refs, sessions


def run_incremental_a(
    manifest: DatasetManifest,
    subject: str,
    condition: Condition,
    held_out_session: Optional[int],
    window_ms: int,
    cfg: Optional[RunConfig] = None,
    source: Optional[WindowSource] = None,
) -> IncrementalReport:
    """Pretrain on the other sessions, then fine-tune batch by batch.

    Per rotation the report holds the fine-tuned curve (batch 1 zero-shot,
    then batch ``k+1`` after fine-tuning on batch ``k``) and the baseline
    curve of the pretrained model on batches 1..5. ``held_out_session=None``
    runs every rotation.
    """
    cfg = cfg or RunConfig()
    condition = Condition(condition)
    source = source or WindowSource(manifest)
    refs, rotations = _sessions(manifest, subject, condition, held_out_session)
    report = IncrementalReport(
        setting=Setting.INCR_A.value, subject=subject, condition=condition.value,
        window_ms=window_ms,
        config=config_echo(cfg, window_ms=window_ms, condition=condition.value,
                           subject=subject, held_out_session=held_out_session,
                           fine_tune=cfg.fine_tune.model_dump(mode="json")),
    )
    for session in rotations:
        train_refs = [r for r in refs if r.session != session]
        if not train_refs:
            raise IncompleteManifest(f"subject {subject!r}: no sessions left to pretrain on")
        batches = sorted(r for r in refs if r.session == session)
        x, y = _balanced_pool(source.pool(train_refs, window_ms),
                              derive_seed(cfg.seed, "balance", "incr-a", subject, session))
        pretrained, _ = train_on_pool(x, y, cfg.model, cfg.train, cfg.seed,
                                      "incr-a", subject, session)

        baseline = [_accuracy(pretrained, source, ref, window_ms) for ref in batches]
        tuned = [baseline[0]]
        model = pretrained
        for k, ref in enumerate(batches[:-1]):
            batch_seed = derive_seed(cfg.seed, "balance", "incr-a", subject, session, ref.batch)
            ft_cfg = with_seed(cfg.fine_tune, cfg.seed, "finetune", subject, session, ref.batch)
            model, _ = fine_tune(model, _batch_arrays(source, ref, window_ms, batch_seed), ft_cfg)
            tuned.append(_accuracy(model, source, batches[k + 1], window_ms))

        numbers = [r.batch for r in batches]
        report.curves.append(Curve("finetuned", session, numbers, tuned))
        report.curves.append(Curve("baseline", session, numbers, baseline))
        logger.info(
            f"[Eval] incr-a {subject} session {session}: "
            f"fine-tuned {np.mean(tuned[1:]):.3f} vs baseline {np.mean(baseline[1:]):.3f}"
        )
    return report


def run_incremental_b(
    manifest: DatasetManifest,
    subject: str,
    condition: Condition,
    session: Optional[int],
    window_ms: int,
    cfg: Optional[RunConfig] = None,
    source: Optional[WindowSource] = None,
    report: Optional[IncrementalReport] = None,
) -> IncrementalReport:
    """Train one randomly initialized model batch by batch within a session.

    Round ``k`` continues from round ``k-1`` on batch ``k`` (70/30 split) and
    is evaluated on batch ``k+1``. Passing ``report`` appends the scratch
    curves to an existing scenario (a) report.
    """
    cfg = cfg or RunConfig()
    condition = Condition(condition)
    source = source or WindowSource(manifest)
    refs, sessions = _sessions(manifest, subject, condition, session)
    if report is None:
        report = IncrementalReport(
            setting=Setting.INCR_B.value, subject=subject, condition=condition.value,
            window_ms=window_ms,
            config=config_echo(cfg, window_ms=window_ms, condition=condition.value,
                               subject=subject, session=session,
                               fine_tune=cfg.fine_tune.model_dump(mode="json")),
        )
    scratch_cfg: FineTuneConfig = cfg.fine_tune.model_copy(update={"freeze_bn_stats": False})
    for s in sessions:
        batches = sorted(r for r in refs if r.session == s)
        model = build_speechnet(config=cfg.model, seed=derive_seed(cfg.seed, "init", "incr-b",
                                                                   subject, s))
        accs = []
        for k, ref in enumerate(batches[:-1]):
            batch_seed = derive_seed(cfg.seed, "balance", "incr-b", subject, s, ref.batch)
            round_cfg = with_seed(scratch_cfg, cfg.seed, "scratch", subject, s, ref.batch)
            model, _ = fine_tune(model, _batch_arrays(source, ref, window_ms, batch_seed),
                                 round_cfg)
            accs.append(_accuracy(model, source, batches[k + 1], window_ms))
        report.curves.append(Curve("scratch", s, [r.batch for r in batches[1:]], accs))
        logger.info(f"[Eval] incr-b {subject} session {s}: mean {np.mean(accs):.3f}")
    return report


def window_ablation(
    manifest: DatasetManifest,
    subject: str,
    condition: Condition,
    sizes: Optional[Sequence[int]] = None,
    cfg: Optional[RunConfig] = None,
    source: Optional[WindowSource] = None,
    jobs: Optional[int] = None,
) -> AblationReport:
    """InterSession accuracy and ITR per window size.

    ITR is computed per fold and averaged; folds below chance have no ITR
    and are left out of the mean.
    """
    cfg = cfg or RunConfig()
    condition = Condition(condition)
    sizes = list(sizes or cfg.eval.ablation_sizes)
    source = source or WindowSource(manifest)
    report = AblationReport(
        subject=subject, condition=condition.value,
        config=config_echo(cfg, sizes=sizes, condition=condition.value, subject=subject),
    )
    for window_ms in sizes:
        run = run_setting(Setting.INTERSESSION, manifest, subject, condition, window_ms, cfg,
                          source=source, jobs=jobs, with_itr=True)
        itrs = [f.itr for f in run.folds]
        below = sum(v is None for v in itrs)
        if below:
            logger.warning(
                f"[Eval] {window_ms} ms: {below} fold(s) below chance, excluded from mean ITR"
            )
        report.rows.append(AblationRow(window_ms, run.mean, run.std, run.mean_itr, itrs, below))
    if not report.accuracy_non_decreasing:
        logger.info("[Eval] accuracy does not increase monotonically with window size")
    return report
