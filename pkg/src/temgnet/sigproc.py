"""Signal conditioning: Butterworth low-pass, amplitude scaling, mu-law companding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    ContractError,
    DegenerateChannelError,
    FilterSpecError,
    LengthError,
    NumericDomainError,
)
from .recording import EmgRecording

log = logging.getLogger(__name__)

DEFAULT_MU = 255.0
DEFAULT_TRAIN_REPS = (1, 3, 4, 6)
DEFAULT_TEST_REPS = (2, 5)


@dataclass(frozen=True)
class FilterSpec:
    order: int = 2
    cutoff_hz: float = 500.0
    sample_rate_hz: float = 2000.0
    zero_phase: bool = True

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise FilterSpecError(f"filter order must be a positive integer, got {self.order}")
        if self.sample_rate_hz <= 0:
            raise FilterSpecError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not 0 < self.cutoff_hz < self.sample_rate_hz / 2:
            raise FilterSpecError(
                f"cutoff {self.cutoff_hz} Hz must lie in (0, Nyquist={self.sample_rate_hz / 2} Hz)"
            )

    @property
    def padlen(self):
        return 3 * self.order


def butter_sos(order, cutoff_hz, sample_rate_hz):
    """Digital Butterworth low-pass as second-order sections.

    Analog prototype poles are mapped through the bilinear transform with
    frequency pre-warping so the -3 dB point lands exactly on ``cutoff_hz``.
    Each section is normalised to unit DC gain. Rows are
    ``[b0, b1, b2, 1, a1, a2]``.
    """
    FilterSpec(order, cutoff_hz, sample_rate_hz)
    fs2 = 2.0 * sample_rate_hz
    warped = fs2 * math.tan(math.pi * cutoff_hz / sample_rate_hz)
    sections = []
    for k in range(1, order // 2 + 1):
        s = warped * complex(math.cos(math.pi * (2 * k + order - 1) / (2 * order)),
                             math.sin(math.pi * (2 * k + order - 1) / (2 * order)))
        z = (fs2 + s) / (fs2 - s)
        a1 = -2.0 * z.real
        a2 = abs(z) ** 2
        g = (1.0 + a1 + a2) / 4.0
        sections.append([g, 2.0 * g, g, 1.0, a1, a2])
    if order % 2:
        z = (fs2 - warped) / (fs2 + warped)
        g = (1.0 - z) / 2.0
        sections.append([g, g, 0.0, 1.0, -z, 0.0])
    return np.array(sections, dtype=np.float64)


def sos_steady_state(sos):
    """Per-section initial state giving a constant unit-input steady state."""
    zi = np.zeros((sos.shape[0], 2))
    level = 1.0
    for i, (b0, b1, b2, _, a1, a2) in enumerate(sos):
        gain = (b0 + b1 + b2) / (1.0 + a1 + a2)
        out = gain * level
        zi[i, 1] = b2 * level - a2 * out
        zi[i, 0] = b1 * level - a1 * out + zi[i, 1]
        level = out
    return zi


def sosfilt(sos, x, initial=None, backend=None):
    """Run each row of ``x`` through ``sos``.

    ``initial`` scales the steady-state initial conditions per row (typically
    the first sample); ``None`` starts from rest.
    """
    impl = kernels.get_backend(backend)
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    sos = np.ascontiguousarray(sos, dtype=np.float64)
    if initial is None:
        zi = np.zeros((x.shape[0], sos.shape[0], 2))
    else:
        zi = sos_steady_state(sos)[None, :, :] * np.asarray(initial, dtype=np.float64).reshape(-1, 1, 1)
        zi = np.ascontiguousarray(zi)
    return impl.sosfilt(sos, x, zi)


def butterworth_lowpass(signal, spec=None, backend=None):
    """Low-pass filter a (channels, samples) or (samples,) array.

    With ``spec.zero_phase`` the filter runs forward then backward over an
    odd-reflected extension of ``3 * order`` samples at each end; otherwise a
    single causal pass is made. Both start from steady state at the first
    sample, so DC passes unchanged.
    """
    spec = spec or FilterSpec()
    x = np.asarray(signal, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[1]
    if n <= spec.padlen:
        raise LengthError(f"signal of {n} samples is too short for order {spec.order} (need > {spec.padlen})")
    sos = butter_sos(spec.order, spec.cutoff_hz, spec.sample_rate_hz)

    if not spec.zero_phase:
        y = sosfilt(sos, x, x[:, 0], backend=backend)
    else:
        p = spec.padlen
        ext = np.concatenate(
            [2 * x[:, :1] - x[:, p:0:-1], x, 2 * x[:, -1:] - x[:, -2:-p - 2:-1]], axis=1
        )
        y = sosfilt(sos, ext, ext[:, 0], backend=backend)
        y = sosfilt(sos, y[:, ::-1], y[:, -1], backend=backend)[:, ::-1]
        y = np.ascontiguousarray(y[:, p:-p])
    return y[0] if squeeze else y


def mu_law(x, mu=DEFAULT_MU):
    """sign(x) * ln(1 + mu|x|) / ln(1 + mu), elementwise on [-1, 1]."""
    if mu <= 0:
        raise ContractError(f"mu must be positive, got {mu}")
    arr = np.asarray(x, dtype=np.float64)
    bad = ~(np.abs(arr) <= 1.0)
    if np.any(bad):
        where = tuple(int(i) for i in np.argwhere(bad)[0]) if arr.ndim else ()
        label = f"channel {where[0]}, sample {where[1]}" if len(where) == 2 else f"index {where}"
        raise NumericDomainError(f"mu_law input outside [-1, 1] at {label}: {arr[bad].flat[0]!r}")
    out = np.sign(arr) * np.log1p(mu * np.abs(arr)) / math.log1p(mu)
    return float(out) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class ChannelScaleStats:
    """Per-channel max-abs amplitude, fitted on training repetitions."""

    max_abs: tuple

    def __post_init__(self):
        arr = np.asarray(self.max_abs, dtype=np.float64)
        dead = np.flatnonzero(~(arr > 0))
        if dead.size:
            raise DegenerateChannelError(f"channel(s) {dead.tolist()} have zero max-abs amplitude")
        object.__setattr__(self, "max_abs", tuple(float(v) for v in arr))

    @property
    def array(self):
        return np.asarray(self.max_abs)


def fit_channel_scale(recording: EmgRecording, train_reps=DEFAULT_TRAIN_REPS) -> ChannelScaleStats:
    mask = np.isin(recording.repetitions, list(train_reps))
    if not mask.any():
        raise ContractError(f"no samples belong to training repetitions {sorted(train_reps)}")
    return ChannelScaleStats(tuple(np.abs(recording.signal[:, mask]).max(axis=1)))


def channel_scale(recording: EmgRecording, stats: ChannelScaleStats):
    """Divide each channel by its training max-abs, clamping overflow to [-1, 1].

    Returns the scaled recording and the number of clamped samples.
    """
    scale = stats.array
    if scale.shape[0] != recording.n_channels:
        raise ContractError(
            f"scale stats cover {scale.shape[0]} channels, recording has {recording.n_channels}"
        )
    scaled = recording.signal / scale[:, None]
    over = np.abs(scaled) > 1.0
    n_clamped = int(over.sum())
    if n_clamped:
        log.warning("clamped %d samples to [-1, 1] after channel scaling (subject %s)",
                    n_clamped, recording.subject)
        scaled = np.clip(scaled, -1.0, 1.0)
    out = recording.with_signal(scaled)
    out.meta["clamped_samples"] = n_clamped
    return out, n_clamped


def preprocess(recording: EmgRecording, filter_spec=None, mu=DEFAULT_MU,
               train_reps=DEFAULT_TRAIN_REPS, backend=None):
    """Filter, scale with training-repetition statistics, then mu-law compand.

    Returns ``(recording, stats, n_clamped)``.
    """
    filtered = recording.with_signal(butterworth_lowpass(recording.signal, filter_spec, backend))
    stats = fit_channel_scale(filtered, train_reps)
    scaled, n_clamped = channel_scale(filtered, stats)
    out = scaled.with_signal(mu_law(scaled.signal, mu))
    return out, stats, n_clamped
