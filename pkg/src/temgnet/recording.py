"""Multichannel sEMG recording container."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError

N_CHANNELS = 12
SAMPLE_RATE_HZ = 2000.0
N_MOVEMENTS = 17
N_REPETITIONS = 6
#: repetition index assigned to samples outside any repetition (rest between trials)
REST_REPETITION = 0


@dataclass
class EmgRecording:
    """Channel-major signal with per-sample movement label and repetition index.

    Labels are 0 for rest and 1..17 for movements; repetitions are 1..6, with
    ``REST_REPETITION`` (0) marking inter-trial samples.
    """

    signal: np.ndarray
    labels: np.ndarray
    repetitions: np.ndarray
    subject: int = 0
    sample_rate_hz: float = SAMPLE_RATE_HZ
    label_source: str = "raw"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.repetitions = np.asarray(self.repetitions, dtype=np.uint8)
        if self.signal.ndim != 2:
            raise SchemaError(f"signal must be (channels, samples), got shape {self.signal.shape}")
        n = self.signal.shape[1]
        if self.labels.shape != (n,) or self.repetitions.shape != (n,):
            raise SchemaError(
                f"labels {self.labels.shape} and repetitions {self.repetitions.shape} "
                f"must both have length {n}"
            )
        if n and self.labels.max() > N_MOVEMENTS:
            raise SchemaError(f"labels must lie in 0..{N_MOVEMENTS}, found {int(self.labels.max())}")
        if n and self.repetitions.max() > N_REPETITIONS:
            raise SchemaError(
                f"repetitions must lie in 0..{N_REPETITIONS}, found {int(self.repetitions.max())}"
            )

    @property
    def n_channels(self):
        return self.signal.shape[0]

    @property
    def n_samples(self):
        return self.signal.shape[1]

    def with_signal(self, signal):
        return replace(self, signal=signal, meta=dict(self.meta))
