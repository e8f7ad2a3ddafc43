"""Seeded synthetic EMG datasets with the canonical recording protocol.

Each class owns a spatial pattern over the electrodes and a temporal activation
envelope (a Hann burst with a class-specific delay and duration). The envelope
modulates a shared 20-250 Hz carrier; per-channel background noise, 50 Hz
mains interference and sub-20 Hz drift are added on top.

Sessions can be perturbed the way electrode repositioning and day-to-day
variation perturb real recordings: per-channel gain changes, a partial
permutation of the spatial patterns across channels and a change of
articulation pace.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from loguru import logger
from scipy import signal

from silentwear.config import SynthSpec
from silentwear.emgio import (
    N_CLASSES,
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
from silentwear.errors import InvalidSpec
from silentwear.seeding import rng_for

CARRIER_BAND_HZ = (20.0, 250.0)
DRIFT_CUTOFF_HZ = 5.0
MAINS_HZ = 50.0
REST_LEVEL = 0.05
SILENT_GAIN = 0.7


def subject_id(index: int) -> str:
    return f"S{index + 1:02d}"


def batch_path(subject: str, session: int, condition: Condition, batch: int) -> str:
    return f"{subject}/session{session}/{Condition(condition).value}_batch{batch}.swr1"


def check_spec(spec: SynthSpec) -> None:
    for name in ("n_subjects", "n_sessions", "n_batches", "reps_per_command",
                 "fs_hz", "n_channels"):
        value = getattr(spec, name)
        if value <= 0:
            raise InvalidSpec(f"{name} must be positive, got {value}")
    if spec.n_channels < N_CLASSES:
        raise InvalidSpec(
            f"n_channels must be >= {N_CLASSES} for distinct spatial patterns, "
            f"got {spec.n_channels}"
        )
    if not spec.conditions:
        raise InvalidSpec("at least one condition is required")


@dataclass(frozen=True)
class SubjectPatterns:
    """Per-subject class patterns: ``spatial`` is ``(classes, channels)``."""

    spatial: np.ndarray
    delays_s: np.ndarray
    durations_s: np.ndarray


@dataclass(frozen=True)
class SessionShift:
    gains: np.ndarray
    permutation: np.ndarray
    pace: float

    @classmethod
    def identity(cls, n_channels: int) -> "SessionShift":
        return cls(np.ones(n_channels), np.arange(n_channels), 1.0)


def subject_patterns(spec: SynthSpec, seed: int, subject: int) -> SubjectPatterns:
    """Class patterns for one subject.

    Each class drives its own disjoint group of channels with positive seeded
    weights, so the spatial vectors are mutually orthogonal. The channel
    groups are assigned to classes in a per-subject order.
    """
    rng = rng_for(seed, "synth", "patterns", subject)
    c = spec.n_channels
    groups = np.array_split(rng.permutation(c), N_CLASSES)
    spatial = np.zeros((N_CLASSES, c))
    for k, members in enumerate(groups):
        spatial[k, members] = rng.uniform(0.5, 1.0, len(members))
    spatial /= spatial.max(axis=1, keepdims=True)

    classes = np.arange(N_CLASSES)
    delays = 0.02 + 0.03 * rng.permutation(classes)
    durations = 0.4 + 0.1 * rng.permutation(classes)
    return SubjectPatterns(spatial=spatial, delays_s=delays, durations_s=durations)


def session_shift(spec: SynthSpec, seed: int, subject: int, session: int) -> SessionShift:
    strength = spec.session_shift_strength
    c = spec.n_channels
    if strength == 0:
        return SessionShift.identity(c)
    rng = rng_for(seed, "synth", "shift", subject, session)
    gains = np.exp(rng.standard_normal(c) * strength * 0.3)
    permutation = np.arange(c)
    n_moved = int(round(min(strength, 1.0) * c / 2))
    if n_moved >= 2:
        moved = np.sort(rng.choice(c, size=n_moved, replace=False))
        permutation[moved] = moved[rng.permutation(n_moved)]
    pace = 1.0 + 0.25 * strength * rng.uniform(-1.0, 1.0)
    return SessionShift(gains=gains, permutation=permutation, pace=float(pace))


def _carrier(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    lo, hi = CARRIER_BAND_HZ
    if hi >= fs / 2:
        sos = signal.butter(4, lo, btype="highpass", fs=fs, output="sos")
    else:
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n))
    return x / (x.std() + 1e-12)


def _drift(rng: np.random.Generator, c: int, n: int, fs: float) -> np.ndarray:
    sos = signal.butter(2, DRIFT_CUTOFF_HZ, btype="lowpass", fs=fs, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal((c, n)), axis=-1)
    return x / (x.std(axis=-1, keepdims=True) + 1e-12)


def synth_recording(
    spec: SynthSpec,
    seed: int,
    subject: int,
    session: int,
    condition: Condition,
    batch: int,
) -> EmgRecording:
    """One batch: ``reps_per_command`` of every command in random order."""
    check_spec(spec)
    condition = Condition(condition)
    fs = spec.fs_hz
    c = spec.n_channels
    patterns = subject_patterns(spec, seed, subject)
    shift = session_shift(spec, seed, subject, session)
    rng = rng_for(seed, "synth", "batch", subject, session, condition.value, batch)

    prod = int(round(spec.production_s * fs))
    rest = int(round(spec.rest_s * fs))
    lead = int(round(spec.lead_s * fs))
    commands = np.repeat(np.arange(N_CLASSES - 1), spec.reps_per_command)
    order = commands[rng.permutation(len(commands))]
    n = lead + len(order) * (prod + rest)

    envelopes = np.zeros((N_CLASSES, n))
    envelopes[CommandLabel.REST] = REST_LEVEL
    events: List[Event] = []
    for i, label in enumerate(order):
        onset = lead + i * (prod + rest)
        events.append(Event(onset_sample=onset, end_sample=onset + prod,
                            label=int(label), condition=condition))
        events.append(Event(onset_sample=onset + prod, end_sample=onset + prod + rest,
                            label=CommandLabel.REST, condition=condition))
        delay = patterns.delays_s[label] * shift.pace + rng.uniform(-0.02, 0.02)
        duration = patterns.durations_s[label] * shift.pace
        start = onset + max(0, int(round(delay * fs)))
        length = min(int(round(duration * fs)), onset + prod - start)
        if length > 1:
            amp = np.exp(0.1 * rng.standard_normal())
            envelopes[label, start:start + length] += amp * np.hanning(length)

    spatial = patterns.spatial[:, shift.permutation] * shift.gains[None, :]
    amplitude = spec.signal_amplitude * (SILENT_GAIN if condition is Condition.SILENT else 1.0)
    activity = amplitude * (spatial.T @ envelopes) * _carrier(rng, n, fs)[None, :]

    t = np.arange(n) / fs
    mains = spec.mains_amplitude * np.sin(2 * np.pi * MAINS_HZ * t + rng.uniform(0, 2 * np.pi))
    noise = spec.noise_floor * rng.standard_normal((c, n))
    drift = spec.drift_amplitude * _drift(rng, c, n, fs)
    samples = activity + noise + drift + mains[None, :]
    return EmgRecording(fs_hz=fs, samples=samples.astype(np.float32), events=tuple(events))


def synth_dataset(
    spec: SynthSpec, seed: int, out_dir: Union[str, Path]
) -> DatasetManifest:
    """Write recordings, sidecars and ``manifest.json`` under ``out_dir``."""
    check_spec(spec)
    out_dir = Path(out_dir)
    subjects = []
    for s in range(spec.n_subjects):
        sid = subject_id(s)
        sessions = []
        for session in range(1, spec.n_sessions + 1):
            entries = []
            for condition in spec.conditions:
                for batch in range(1, spec.n_batches + 1):
                    rel = batch_path(sid, session, condition, batch)
                    rec = synth_recording(spec, seed, s, session, condition, batch)
                    write_recording(rec, out_dir / rel)
                    entries.append(BatchEntry(batch=batch, condition=condition, path=rel))
            sessions.append(SessionEntry(session=session, batches=entries))
        subjects.append(SubjectEntry(id=sid, sessions=sessions))
        logger.info(f"[Synth] {sid}: {spec.n_sessions} sessions written")

    manifest = DatasetManifest(
        fs_hz=spec.fs_hz, n_channels=spec.n_channels, subjects=subjects
    ).with_root(out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
