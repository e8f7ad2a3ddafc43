"""IIR filter design and zero-phase filtering.

Filters are kept as cascades of second-order sections in float64; recordings
come back as float32.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy import signal

from silentwear.emgio import EmgRecording
from silentwear.errors import InvalidCenter, InvalidCutoff, SignalTooShort, UnstableFilter

HIGHPASS_HZ = 20.0
HIGHPASS_ORDER = 4
NOTCH_HZ = 50.0
NOTCH_Q = 30.0


@dataclass(frozen=True)
class FilterDescriptor:
    kind: str  # "highpass" | "notch"
    freq_hz: float
    order: int
    q: Optional[float] = None


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """Cascade of biquads, rows ``(b0, b1, b2, 1, a1, a2)`` as in scipy ``sos``."""

    sos: np.ndarray
    fs_hz: float
    descriptor: FilterDescriptor

    @property
    def order(self) -> int:
        return self.descriptor.order

    @property
    def padlen(self) -> int:
        """Odd-reflection pad length used by :func:`filtfilt`."""
        return 3 * (2 * self.order + 1)

    def poles(self) -> np.ndarray:
        _, p, _ = signal.sos2zpk(self.sos)
        return p

    def response(self, freqs_hz: Union[float, Sequence[float]]) -> np.ndarray:
        """Single-pass complex response at the given frequencies."""
        freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        _, h = signal.sosfreqz(self.sos, worN=freqs, fs=self.fs_hz)
        return h


def _checked(sos: np.ndarray, fs_hz: float, descriptor: FilterDescriptor) -> FilterSpec:
    sos = np.ascontiguousarray(sos, dtype=np.float64)
    if not np.all(np.isfinite(sos)):
        raise UnstableFilter(f"non-finite coefficients for {descriptor}")
    spec = FilterSpec(sos=sos, fs_hz=float(fs_hz), descriptor=descriptor)
    if np.any(np.abs(spec.poles()) >= 1.0):
        raise UnstableFilter(f"pole on or outside the unit circle for {descriptor}")
    return spec


def design_butterworth_highpass(order: int, fc_hz: float, fs_hz: float) -> FilterSpec:
    """Butterworth high-pass via analog prototype + prewarped bilinear transform."""
    if order <= 0 or order % 2:
        raise InvalidCutoff(f"order must be a positive even integer, got {order}")
    if not 0.0 < fc_hz < fs_hz / 2.0:
        raise InvalidCutoff(f"cutoff {fc_hz} Hz outside (0, {fs_hz / 2.0}) Hz")
    sos = signal.butter(order, fc_hz, btype="highpass", fs=fs_hz, output="sos")
    return _checked(sos, fs_hz, FilterDescriptor("highpass", float(fc_hz), order))


def design_notch(f0_hz: float, q: float, fs_hz: float) -> FilterSpec:
    """Standard biquad notch; zero pair on the unit circle at ``f0_hz``."""
    if not 0.0 < f0_hz < fs_hz / 2.0:
        raise InvalidCenter(f"center {f0_hz} Hz outside (0, {fs_hz / 2.0}) Hz")
    if q <= 0:
        raise InvalidCenter(f"q must be positive, got {q}")
    b, a = signal.iirnotch(f0_hz, q, fs=fs_hz)
    sos = signal.tf2sos(b, a)
    return _checked(sos, fs_hz, FilterDescriptor("notch", float(f0_hz), 2, float(q)))


def filtfilt(spec: FilterSpec, x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Forward-backward filtering along ``axis``; float64 in and out."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] <= spec.padlen:
        raise SignalTooShort(
            f"signal has {x.shape[axis]} samples, needs more than {spec.padlen}"
        )
    return signal.sosfiltfilt(spec.sos, x, axis=axis, padtype="odd", padlen=spec.padlen)


class Preprocessor:
    """High-pass then notch, each as its own zero-phase pass."""

    def __init__(
        self,
        fs_hz: float,
        highpass_hz: float = HIGHPASS_HZ,
        highpass_order: int = HIGHPASS_ORDER,
        notch_hz: float = NOTCH_HZ,
        notch_q: float = NOTCH_Q,
    ):
        self.fs_hz = fs_hz
        self.highpass = design_butterworth_highpass(highpass_order, highpass_hz, fs_hz)
        self.notch = design_notch(notch_hz, notch_q, fs_hz)

    def apply(self, samples: np.ndarray) -> np.ndarray:
        """Filter a ``(channels, n)`` array; returns float32."""
        y = filtfilt(self.highpass, samples, axis=-1)
        y = filtfilt(self.notch, y, axis=-1)
        return y.astype(np.float32)


_preprocessors = {}


def get_preprocessor(fs_hz: float) -> Preprocessor:
    if fs_hz not in _preprocessors:
        _preprocessors[fs_hz] = Preprocessor(fs_hz)
    return _preprocessors[fs_hz]


def preprocess_recording(rec: EmgRecording) -> EmgRecording:
    """20 Hz high-pass then 50 Hz notch on every channel; events unchanged."""
    pre = get_preprocessor(rec.fs_hz)
    logger.debug(
        f"[DSP] preprocessing {rec.n_channels}x{rec.n_samples} at {rec.fs_hz} Hz"
    )
    return rec.with_samples(pre.apply(rec.samples))
