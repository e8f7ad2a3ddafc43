"""Import externally recorded batches (CSV or NPZ tables) into SWR1 containers.

Every source file holds one batch: ``n_channels`` EMG columns plus a trigger
column. A trigger value change marks an event onset; an event runs until the
next change. Subject, session, condition and batch come from the file's path
relative to the source root.
"""

import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import Field

from silentwear.config import StrictModel
from silentwear.emgio import (
    BatchEntry,
    CommandLabel,
    Condition,
    DatasetManifest,
    EmgRecording,
    Event,
    SessionEntry,
    SubjectEntry,
    save_manifest,
    write_recording,
)
from silentwear.errors import ChannelMismatch, Corrupt, EmptyDataset, InvalidSpec

DEFAULT_PATTERN = (
    r"(?P<subject>[^/]+)/[^/]*?(?P<session>\d+)/"
    r"(?P<condition>vocalized|silent)[^/]*?(?P<batch>\d+)\.(?:csv|npz)$"
)


def _default_trigger_map() -> Dict[int, str]:
    codes = {0: CommandLabel.REST.label_name}
    codes.update({int(label) + 1: label.label_name for label in CommandLabel
                  if label is not CommandLabel.REST})
    return codes


class ImportSpec(StrictModel):
    """How to read one source tree."""

    path_pattern: str = Field(default=DEFAULT_PATTERN)
    trigger_column: str = Field(default="trigger")
    emg_columns: Optional[List[str]] = Field(default=None)
    trigger_map: Dict[int, str] = Field(default_factory=_default_trigger_map)
    fs_hz: int = Field(default=500, gt=0)
    n_channels: int = Field(default=14, gt=0)
    volts_per_count: float = Field(default=0.0, ge=0.0)


def _read_table(path: Path, spec: ImportSpec) -> Tuple[np.ndarray, np.ndarray]:
    """``(channels, n)`` samples and ``(n,)`` trigger codes."""
    if path.suffix == ".npz":
        with np.load(path) as npz:
            if "emg" not in npz or spec.trigger_column not in npz:
                raise Corrupt(f"{path}: expected arrays 'emg' and '{spec.trigger_column}'")
            emg = np.asarray(npz["emg"], dtype=np.float32)
            trigger = np.asarray(npz[spec.trigger_column])
        if emg.ndim != 2:
            raise Corrupt(f"{path}: emg array must be 2-D, got shape {emg.shape}")
        if emg.shape[0] != len(trigger):
            emg = emg.T
    else:
        df = pd.read_csv(path)
        if spec.trigger_column not in df.columns:
            raise Corrupt(f"{path}: trigger column '{spec.trigger_column}' not found")
        columns = spec.emg_columns or [c for c in df.columns if c != spec.trigger_column]
        try:
            emg = df[columns].to_numpy(dtype=np.float32)
        except (KeyError, ValueError) as e:
            raise Corrupt(f"{path}: {e}") from e
        trigger = df[spec.trigger_column].to_numpy()
    if emg.shape[1] != spec.n_channels:
        raise ChannelMismatch(f"{path}: {emg.shape[1]} EMG columns, expected {spec.n_channels}")
    return np.ascontiguousarray(emg.T), np.asarray(trigger).astype(np.int64)


def trigger_events(
    trigger: np.ndarray, trigger_map: Dict[int, str], condition: Condition
) -> List[Event]:
    """Events from trigger runs; codes outside ``trigger_map`` are skipped."""
    trigger = np.asarray(trigger)
    if trigger.size == 0:
        return []
    changes = np.flatnonzero(np.diff(trigger)) + 1
    starts = np.concatenate([[0], changes])
    ends = np.concatenate([changes, [trigger.size]])
    events, skipped = [], set()
    for start, end in zip(starts, ends):
        code = int(trigger[start])
        if code not in trigger_map:
            skipped.add(code)
            continue
        events.append(Event(onset_sample=int(start), end_sample=int(end),
                            label=trigger_map[code], condition=condition))
    if skipped:
        logger.warning(f"[Import] skipped unmapped trigger codes {sorted(skipped)}")
    return events


def import_dataset(
    src: Union[str, Path], out_dir: Union[str, Path], spec: Optional[ImportSpec] = None
) -> DatasetManifest:
    """Convert every matching file under ``src`` and write a manifest."""
    spec = spec or ImportSpec()
    src, out_dir = Path(src), Path(out_dir)
    try:
        pattern = re.compile(spec.path_pattern)
    except re.error as e:
        raise InvalidSpec(f"bad path pattern: {e}") from e

    found: Dict[str, Dict[int, List[BatchEntry]]] = {}
    for path in sorted(p for p in src.rglob("*") if p.suffix in (".csv", ".npz")):
        rel = path.relative_to(src).as_posix()
        match = pattern.search(rel)
        if match is None:
            logger.debug(f"[Import] ignoring {rel}")
            continue
        subject = match.group("subject")
        session = int(match.group("session"))
        condition = Condition(match.group("condition").lower())
        batch = int(match.group("batch"))

        samples, trigger = _read_table(path, spec)
        rec = EmgRecording(
            fs_hz=spec.fs_hz,
            samples=samples,
            events=tuple(trigger_events(trigger, spec.trigger_map, condition)),
            volts_per_count=spec.volts_per_count,
        )
        target = f"{subject}/session{session}/{condition.value}_batch{batch}.swr1"
        write_recording(rec, out_dir / target)
        found.setdefault(subject, {}).setdefault(session, []).append(
            BatchEntry(batch=batch, condition=condition, path=target)
        )
        logger.info(f"[Import] {rel} -> {target} ({len(rec.events)} events)")

    if not found:
        raise EmptyDataset(f"no files under {src} match {spec.path_pattern!r}")
    subjects = [
        SubjectEntry(id=sid, sessions=[
            SessionEntry(session=k, batches=sorted(v, key=lambda b: (b.condition.value, b.batch)))
            for k, v in sorted(sessions.items())
        ])
        for sid, sessions in sorted(found.items())
    ]
    manifest = DatasetManifest(
        fs_hz=spec.fs_hz, n_channels=spec.n_channels, subjects=subjects
    ).with_root(out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
