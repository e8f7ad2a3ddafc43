"""Recording container, dataset manifest, segmentation and windowing.

Container layout (little-endian)::

    "SWR1" | u16 version | u16 n_channels | u32 fs_hz | u64 n_samples |
    f64 volts_per_count | n_channels * n_samples float32, channel-major

Events live in a JSON sidecar next to the container (``<stem>.events.json``).
"""

import json
import struct
from collections import Counter
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationError,
    field_serializer,
    field_validator,
    model_validator,
)

from silentwear.errors import (
    BadMagic,
    Corrupt,
    EventOutOfRange,
    IncompleteManifest,
    InsufficientRest,
    SegmentTooShort,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
)

MAGIC = b"SWR1"
VERSION = 1
HEADER = struct.Struct("<4sHHIQd")
EVENTS_SUFFIX = ".events.json"


class CommandLabel(IntEnum):
    """The 8 spoken commands plus rest."""

    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    FORWARD = 4
    BACKWARD = 5
    START = 6
    STOP = 7
    REST = 8

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "CommandLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown command label: {name!r}") from None


COMMANDS = tuple(label for label in CommandLabel if label is not CommandLabel.REST)
N_CLASSES = len(CommandLabel)


class Condition(str, Enum):
    VOCALIZED = "vocalized"
    SILENT = "silent"


class BatchRef(NamedTuple):
    """Identifies one recorded batch; also used as window provenance."""

    subject: str
    session: int
    batch: int
    condition: Condition

    def as_dict(self) -> dict:
        return {
            "subject": self.subject,
            "session": self.session,
            "batch": self.batch,
            "condition": self.condition.value,
        }


class Event(BaseModel):
    """One trigger-delimited utterance or rest period."""

    model_config = ConfigDict(frozen=True)

    onset_sample: int = Field(ge=0)
    end_sample: int
    label: CommandLabel
    condition: Condition = Condition.VOCALIZED

    @field_validator("label", mode="before")
    @classmethod
    def _parse_label(cls, value):
        if isinstance(value, str):
            return CommandLabel.from_name(value)
        return value

    @field_serializer("label")
    def _serialize_label(self, label: CommandLabel) -> str:
        return label.label_name

    @model_validator(mode="after")
    def _check_span(self) -> "Event":
        if self.end_sample <= self.onset_sample:
            raise ValueError("end_sample must be greater than onset_sample")
        return self

    @property
    def length(self) -> int:
        return self.end_sample - self.onset_sample


def _coerce_events(events: Iterable[Union[Event, dict]]) -> Tuple[Event, ...]:
    out = []
    for i, ev in enumerate(events):
        if isinstance(ev, Event):
            out.append(ev)
            continue
        try:
            out.append(Event(**ev))
        except (ValidationError, TypeError) as e:
            raise EventOutOfRange(f"event {i}: {e}") from e
    return tuple(out)


def validate_events(events: Sequence[Event], n_samples: int) -> None:
    """Events must be sorted, non-overlapping and inside ``[0, n_samples)``."""
    prev_end = 0
    for i, ev in enumerate(events):
        if ev.end_sample > n_samples:
            raise EventOutOfRange(
                f"event {i}: end_sample {ev.end_sample} exceeds n_samples {n_samples}"
            )
        if ev.onset_sample < prev_end:
            raise EventOutOfRange(
                f"event {i}: onset {ev.onset_sample} overlaps the previous event"
            )
        prev_end = ev.end_sample


@dataclass(frozen=True, eq=False)
class EmgRecording:
    """One continuous multichannel acquisition with labeled trigger events."""

    fs_hz: int
    samples: np.ndarray
    events: Tuple[Event, ...] = ()
    volts_per_count: float = 0.0

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float32, order="C", copy=True)
        if samples.ndim != 2:
            raise ShapeMismatch(f"samples must be 2-D, got shape {samples.shape}")
        if self.fs_hz <= 0 or samples.shape[0] == 0:
            raise Corrupt(f"fs_hz={self.fs_hz}, n_channels={samples.shape[0]}")
        samples.setflags(write=False)
        events = _coerce_events(self.events)
        validate_events(events, samples.shape[1])
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "events", events)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "EmgRecording":
        """Copy with replaced samples; events and metadata preserved."""
        return EmgRecording(
            fs_hz=self.fs_hz,
            samples=samples,
            events=self.events,
            volts_per_count=self.volts_per_count,
        )


# Container codec

def serialize_recording(rec: EmgRecording) -> bytes:
    header = HEADER.pack(
        MAGIC, VERSION, rec.n_channels, rec.fs_hz, rec.n_samples, rec.volts_per_count
    )
    return header + rec.samples.astype("<f4").tobytes(order="C")


def parse_recording(
    data: bytes, events: Optional[Iterable[Union[Event, dict]]] = None
) -> EmgRecording:
    """Decode an SWR1 container; ``events`` come from the sidecar when present."""
    if len(data) < HEADER.size:
        raise TruncatedPayload(
            f"header truncated at byte offset {len(data)} (needs {HEADER.size} bytes)"
        )
    magic, version, n_channels, fs_hz, n_samples, volts_per_count = HEADER.unpack_from(
        data, 0
    )
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise VersionMismatch(f"container version {version} at byte offset 4")

    count = n_channels * n_samples
    expected = HEADER.size + 4 * count
    if len(data) < expected:
        raise TruncatedPayload(
            f"payload ends at byte offset {len(data)}, header declares {expected}"
        )
    if len(data) > expected:
        raise Corrupt(f"{len(data) - expected} trailing bytes after offset {expected}")

    samples = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER.size)
    return EmgRecording(
        fs_hz=fs_hz,
        samples=samples.reshape(n_channels, n_samples),
        events=_coerce_events(events or ()),
        volts_per_count=volts_per_count,
    )


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(EVENTS_SUFFIX)


def events_to_json(events: Sequence[Event]) -> str:
    return json.dumps([ev.model_dump(mode="json") for ev in events], indent=1) + "\n"


def write_recording(rec: EmgRecording, path: Union[str, Path]) -> Path:
    """Write the container and its events sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_recording(rec))
    sidecar_path(path).write_text(events_to_json(rec.events), encoding="utf-8")
    return path


def read_recording(path: Union[str, Path]) -> EmgRecording:
    """Read a container plus its sidecar (if present)."""
    path = Path(path)
    events = None
    sidecar = sidecar_path(path)
    if sidecar.exists():
        try:
            events = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise Corrupt(f"{sidecar}: {e}") from e
    return parse_recording(path.read_bytes(), events)


# Segmentation and windowing

@dataclass(frozen=True, eq=False)
class Segment:
    event: Event
    data: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    """Fixed-length window with its class id and provenance."""

    data: np.ndarray
    label: int
    meta: Optional[BatchRef] = None


def segment(rec: EmgRecording) -> List[Segment]:
    """One segment per event, covering ``[onset_sample, end_sample)``."""
    return [
        Segment(event=ev, data=rec.samples[:, ev.onset_sample:ev.end_sample])
        for ev in rec.events
    ]


def window_samples(window_ms: int, fs_hz: int) -> int:
    return int(round(window_ms * fs_hz / 1000))


def extract_window(
    seg: Segment, window_ms: int, fs_hz: int, meta: Optional[BatchRef] = None
) -> LabeledWindow:
    """Take the first ``W`` samples of a segment, anchored at trigger onset."""
    w = window_samples(window_ms, fs_hz)
    length = seg.data.shape[1]
    if length < w:
        raise SegmentTooShort(
            f"segment at onset {seg.event.onset_sample} has {length} samples, "
            f"window needs {w}"
        )
    data = np.array(seg.data[:, :w], dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise Corrupt(f"non-finite samples in window at onset {seg.event.onset_sample}")
    return LabeledWindow(data=data, label=int(seg.event.label), meta=meta)


def windows_from_recording(
    rec: EmgRecording, window_ms: int, meta: Optional[BatchRef] = None
) -> List[LabeledWindow]:
    return [extract_window(s, window_ms, rec.fs_hz, meta) for s in segment(rec)]


def class_counts(windows: Sequence[LabeledWindow], n_classes: int = N_CLASSES) -> np.ndarray:
    return np.bincount([w.label for w in windows], minlength=n_classes)


def balance_rest(windows: Sequence[LabeledWindow], seed: int) -> List[LabeledWindow]:
    """Downsample rest to the largest per-command count.

    Selection is uniform without replacement; surviving windows keep their order.
    """
    rest_idx = [i for i, w in enumerate(windows) if w.label == CommandLabel.REST]
    command_counts = Counter(w.label for w in windows if w.label != CommandLabel.REST)
    target = max(command_counts.values(), default=0)
    if len(rest_idx) < target:
        raise InsufficientRest(f"{len(rest_idx)} rest windows, need {target}")

    rng = np.random.default_rng(seed)
    keep = set(rng.choice(rest_idx, size=target, replace=False).tolist()) if target else set()
    dropped = len(rest_idx) - len(keep)
    if dropped:
        logger.debug(f"[Balance] rest {len(rest_idx)} -> {target}")
    return [
        w for i, w in enumerate(windows) if w.label != CommandLabel.REST or i in keep
    ]


def stack_windows(windows: Sequence[LabeledWindow]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(n, C, W)`` data and ``(n,)`` labels."""
    if not windows:
        return np.zeros((0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    x = np.stack([w.data for w in windows]).astype(np.float32, copy=False)
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


# Dataset manifest

class BatchEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch: int = Field(ge=1)
    condition: Condition
    path: str


class SessionEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    session: int = Field(ge=1)
    batches: List[BatchEntry] = Field(default_factory=list)


class SubjectEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    sessions: List[SessionEntry] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    """Subjects -> sessions -> batches -> recording paths (relative to the manifest)."""

    model_config = ConfigDict(extra="forbid")

    version: int = Field(default=1)
    fs_hz: int = Field(default=500, gt=0)
    n_channels: int = Field(default=14, gt=0)
    subjects: List[SubjectEntry] = Field(default_factory=list)

    _root: Path = PrivateAttr(default_factory=Path)

    @model_validator(mode="after")
    def _check_unique(self) -> "DatasetManifest":
        seen = set()
        for ref in self.refs():
            if ref in seen:
                raise ValueError(f"duplicate batch reference {tuple(ref)}")
            seen.add(ref)
        return self

    @property
    def root(self) -> Path:
        return self._root

    def with_root(self, root: Union[str, Path]) -> "DatasetManifest":
        self._root = Path(root)
        return self

    def refs(
        self, subject: Optional[str] = None, condition: Optional[Condition] = None
    ) -> List[BatchRef]:
        out = []
        for subj in self.subjects:
            if subject is not None and subj.id != subject:
                continue
            for sess in subj.sessions:
                for b in sess.batches:
                    if condition is not None and b.condition != condition:
                        continue
                    out.append(BatchRef(subj.id, sess.session, b.batch, b.condition))
        return out

    def subject_ids(self) -> List[str]:
        return [s.id for s in self.subjects]

    def path_for(self, ref: BatchRef) -> Path:
        for subj in self.subjects:
            if subj.id != ref.subject:
                continue
            for sess in subj.sessions:
                if sess.session != ref.session:
                    continue
                for b in sess.batches:
                    if b.batch == ref.batch and b.condition == ref.condition:
                        return self._root / b.path
        raise IncompleteManifest(f"no batch for {tuple(ref)}")

    def check_files(self) -> None:
        for ref in self.refs():
            path = self.path_for(ref)
            if not path.exists():
                raise IncompleteManifest(f"missing recording {path} for {tuple(ref)}")


def load_manifest(path: Union[str, Path], check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise IncompleteManifest(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise Corrupt(f"{path}: {e}") from e
    try:
        manifest = DatasetManifest(**data).with_root(path.parent)
    except ValidationError as e:
        raise Corrupt(f"{path}: {e.errors()[0]['msg']}") from e
    if check_files:
        manifest.check_files()
    return manifest


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8"
    )
    return path
