"""Sliding-window streaming classification with the quantized model.

A prediction is emitted once ``window`` samples are buffered and then every
``step`` samples. Each window is zero-phase filtered on its own (high-pass then
notch), z-scored and run through the integer path.
"""

import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from silentwear.config import StreamConfig
from silentwear.dsp import Preprocessor, get_preprocessor
from silentwear.emgio import CommandLabel, EmgRecording
from silentwear.errors import ChannelMismatch, SampleRateMismatch, SourceUnderrun
from silentwear.nnkernels import softmax
from silentwear.quantize import QuantizedSpeechNet, load_quantized, qforward
from silentwear.seeding import rng_for
from silentwear.speechnet import normalize_windows

Source = Union[EmgRecording, Iterable[np.ndarray]]


@dataclass(frozen=True, eq=False)
class TimedPrediction:
    end_sample: int  # exclusive
    label: CommandLabel
    probabilities: np.ndarray
    latency_ms: float
    logits: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "end_sample": self.end_sample,
            "label": self.label.label_name,
            "probabilities": [round(float(p), 6) for p in self.probabilities],
            "latency_ms": round(self.latency_ms, 3),
        }


def classify_window(
    qmodel: QuantizedSpeechNet, pre: Preprocessor, window: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and probabilities for one raw ``(C, W)`` window."""
    x = normalize_windows(pre.apply(window))
    logits = qforward(qmodel, x)
    return logits, softmax(logits)


class RingBuffer:
    """Last ``capacity`` samples of a multichannel feed."""

    def __init__(self, n_channels: int, capacity: int):
        self._buf = np.zeros((n_channels, capacity), dtype=np.float32)
        self.capacity = capacity
        self.count = 0

    def write(self, chunk: np.ndarray) -> None:
        n = chunk.shape[1]
        if n >= self.capacity:
            self._buf[:] = chunk[:, n - self.capacity:]
            self.count += n
            # keep the write position consistent with the total count
            self._buf = np.roll(self._buf, self.count % self.capacity, axis=1)
            return
        pos = self.count % self.capacity
        first = min(n, self.capacity - pos)
        self._buf[:, pos:pos + first] = chunk[:, :first]
        self._buf[:, :n - first] = chunk[:, first:]
        self.count += n

    def latest(self) -> np.ndarray:
        """The buffered samples, oldest first."""
        pos = self.count % self.capacity
        return np.concatenate([self._buf[:, pos:], self._buf[:, :pos]], axis=1)


class StreamClassifier:
    """One stream: a ring buffer and a hop counter over a shared model."""

    def __init__(self, qmodel: QuantizedSpeechNet, cfg: StreamConfig, strict: bool = False):
        self.qmodel = qmodel
        self.cfg = cfg
        self.strict = strict
        self.window = cfg.window_samples
        self.step = cfg.step_samples
        self.pre = get_preprocessor(cfg.fs_hz)
        self.buffer = RingBuffer(qmodel.n_channels, self.window)
        self.next_end = self.window
        self.underrun: Optional[str] = None

    @property
    def received(self) -> int:
        return self.buffer.count

    def push(self, chunk: np.ndarray) -> List[TimedPrediction]:
        """Feed ``(C, n)`` samples; returns the predictions they complete."""
        chunk = np.asarray(chunk, dtype=np.float32)
        if chunk.ndim != 2 or chunk.shape[0] != self.qmodel.n_channels:
            raise ChannelMismatch(
                f"chunk shape {chunk.shape}, expected {self.qmodel.n_channels} channels"
            )
        out = []
        offset = 0
        n = chunk.shape[1]
        while offset < n:
            take = min(n - offset, self.next_end - self.received)
            self.buffer.write(chunk[:, offset:offset + take])
            offset += take
            if self.received == self.next_end:
                out.append(self._predict())
                self.next_end += self.step
        return out

    def _predict(self) -> TimedPrediction:
        start = time.perf_counter()
        logits, probs = classify_window(self.qmodel, self.pre, self.buffer.latest())
        latency = (time.perf_counter() - start) * 1000.0
        label = CommandLabel(int(np.argmax(probs)))
        return TimedPrediction(self.next_end, label, probs, latency, logits)

    def finish(self) -> None:
        """Close the stream; a trailing partial window is dropped."""
        last_end = self.next_end - self.step
        if self.received < self.window:
            self.underrun = (
                f"stream ended after {self.received} samples, window needs {self.window}"
            )
        elif self.received > last_end:
            self.underrun = (
                f"{self.received - last_end} samples after end_sample {last_end} "
                f"dropped (partial window)"
            )
        if self.underrun:
            if self.strict:
                raise SourceUnderrun(self.underrun)
            logger.info(f"[Stream] underrun: {self.underrun}")


def _chunks(source: Source, cfg: StreamConfig, chunk_samples: Optional[int]) -> Iterator[np.ndarray]:
    if isinstance(source, EmgRecording):
        if source.fs_hz != cfg.fs_hz:
            raise SampleRateMismatch(f"recording at {source.fs_hz} Hz, stream expects {cfg.fs_hz} Hz")
        size = chunk_samples or cfg.step_samples
        for start in range(0, source.n_samples, size):
            yield source.samples[:, start:start + size]
    else:
        yield from source


def stream_classify(
    cfg: StreamConfig,
    source: Source,
    qmodel: Optional[QuantizedSpeechNet] = None,
    chunk_samples: Optional[int] = None,
    strict: bool = False,
) -> Iterator[TimedPrediction]:
    """Predictions in order of ``end_sample`` for a recording or chunk feed."""
    qmodel = qmodel or load_quantized(cfg.model_path)
    clf = StreamClassifier(qmodel, cfg, strict=strict)
    for chunk in _chunks(source, cfg, chunk_samples):
        yield from clf.push(chunk)
    clf.finish()


def window_ends(n_samples: int, window: int, step: int) -> List[int]:
    """Exclusive end samples of the sliding grid."""
    if n_samples < window:
        return []
    return list(range(window, n_samples + 1, step))


def batch_classify(
    cfg: StreamConfig, recording: EmgRecording, qmodel: Optional[QuantizedSpeechNet] = None
) -> List[Tuple[int, np.ndarray]]:
    """``(end_sample, logits)`` over the streaming grid, without a buffer."""
    qmodel = qmodel or load_quantized(cfg.model_path)
    pre = get_preprocessor(cfg.fs_hz)
    w = cfg.window_samples
    return [
        (end, classify_window(qmodel, pre, recording.samples[:, end - w:end])[0])
        for end in window_ends(recording.n_samples, w, cfg.step_samples)
    ]


@dataclass
class ThroughputReport:
    n_timed: int
    warmup: int
    mean_ms: float
    std_ms: float
    inferences_per_s: float

    @property
    def valid(self) -> bool:
        return self.mean_ms > 0 and self.std_ms / self.mean_ms < 0.5

    def to_dict(self) -> dict:
        return {
            "n_timed": self.n_timed,
            "warmup": self.warmup,
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "inferences_per_s": self.inferences_per_s,
            "valid": self.valid,
        }


def bench_throughput(
    cfg: StreamConfig,
    n_windows: int = 100,
    qmodel: Optional[QuantizedSpeechNet] = None,
    warmup: int = 10,
    seed: int = 0,
) -> ThroughputReport:
    """Single-threaded per-window latency (filtering + integer inference)."""
    qmodel = qmodel or load_quantized(cfg.model_path)
    pre = get_preprocessor(cfg.fs_hz)
    rng = rng_for(seed, "bench")
    windows = rng.standard_normal((n_windows + warmup, qmodel.n_channels,
                                   cfg.window_samples)).astype(np.float32)
    for w in windows[:warmup]:
        classify_window(qmodel, pre, w)
    times = np.empty(n_windows)
    for i, w in enumerate(windows[warmup:]):
        start = time.perf_counter()
        classify_window(qmodel, pre, w)
        times[i] = (time.perf_counter() - start) * 1000.0
    mean = float(times.mean())
    report = ThroughputReport(n_windows, warmup, mean, float(times.std()),
                              1000.0 / mean if mean > 0 else float("inf"))
    logger.info(
        f"[Stream] {report.mean_ms:.2f} +/- {report.std_ms:.2f} ms/inference, "
        f"{report.inferences_per_s:.1f}/s"
    )
    return report
