"""Sliding-window segmentation and repetition-based train/test split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, LengthError
from .recording import EmgRecording

POLICIES = ("pure", "majority")


def ms_to_samples(ms, sample_rate_hz):
    return int(round(ms * sample_rate_hz / 1000.0))


@dataclass
class SegmentDataset:
    """Windows indexed into one or more source signals.

    Windows are not copied: window ``i`` is
    ``sources[source[i]][:, start[i]:start[i] + window]``. Use
    :meth:`windows` to materialise a batch.
    """

    sources: list
    source: np.ndarray
    start: np.ndarray
    labels: np.ndarray
    repetitions: np.ndarray
    subjects: np.ndarray
    window: int
    step: int

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.int64)
        self.start = np.asarray(self.start, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.repetitions = np.asarray(self.repetitions, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)

    def __len__(self):
        return len(self.start)

    @property
    def n_channels(self):
        return self.sources[0].shape[0] if self.sources else 0

    def windows(self, idx=None):
        """Return an array of shape (len(idx), channels, window)."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx, dtype=np.int64)
        out = np.empty((len(idx), self.n_channels, self.window))
        offsets = np.arange(self.window)
        for src_id in np.unique(self.source[idx]):
            sel = np.flatnonzero(self.source[idx] == src_id)
            cols = self.start[idx[sel]][:, None] + offsets[None, :]
            out[sel] = np.transpose(self.sources[src_id][:, cols], (1, 0, 2))
        return out

    @property
    def X(self):
        return self.windows()

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentDataset(self.sources, self.source[idx], self.start[idx], self.labels[idx],
                              self.repetitions[idx], self.subjects[idx], self.window, self.step)

    @classmethod
    def empty(cls, window, step, sources=None):
        z = np.zeros(0, dtype=np.int64)
        return cls(list(sources or []), z, z, z, z, z, window, step)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            raise ContractError("nothing to concatenate")
        window, step = parts[0].window, parts[0].step
        if any(p.window != window for p in parts):
            raise ContractError("all datasets must share one window length")
        sources, fields = [], {k: [] for k in ("source", "start", "labels", "repetitions", "subjects")}
        for p in parts:
            fields["source"].append(p.source + len(sources))
            sources.extend(p.sources)
            for k in ("start", "labels", "repetitions", "subjects"):
                fields[k].append(getattr(p, k))
        return cls(sources, *(np.concatenate(fields[k]) for k in fields), window, step)


def _runs(*keys):
    """Start/end indices of maximal runs over which every key array is constant."""
    n = len(keys[0])
    change = np.zeros(n, dtype=bool)
    change[0] = True
    for k in keys:
        change[1:] |= k[1:] != k[:-1]
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], n)
    return starts, ends


def segment(recording: EmgRecording, window_ms=200.0, step_ms=10.0, policy="pure"):
    """Cut a recording into fixed-length windows.

    ``pure``: windows are laid out from the start of every contiguous
    (label, repetition) region and kept only if the region is a movement,
    so each region of length T yields ``floor((T - W) / step) + 1`` windows.
    ``majority``: a global grid from sample 0; the label is the most frequent
    one in the window (ties to the lowest), and rest-majority windows are
    dropped.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown label policy {policy!r}; choose from {POLICIES}")
    fs = recording.sample_rate_hz
    W = ms_to_samples(window_ms, fs)
    step = ms_to_samples(step_ms, fs)
    if W < 1 or step < 1:
        raise ContractError(f"window ({W}) and step ({step}) must be at least one sample")
    T = recording.n_samples
    if W > T:
        raise LengthError(f"window of {W} samples is longer than the recording ({T} samples)")

    labels, reps = recording.labels, recording.repetitions
    if policy == "pure":
        starts, ends = _runs(labels, reps)
        chunks = []
        for s, e in zip(starts, ends):
            if labels[s] == 0 or e - s < W:
                continue
            chunks.append(np.arange(s, e - W + 1, step))
        start = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        y = labels[start].astype(np.int64)
        r = reps[start].astype(np.int64)
    else:
        grid = np.arange(0, T - W + 1, step)
        keep, y, r = [], [], []
        for s in grid:
            lab = labels[s:s + W]
            counts = np.bincount(lab, minlength=1)
            best = int(np.argmax(counts))
            if best == 0:
                continue
            rr = np.bincount(reps[s:s + W][lab == best])
            keep.append(s)
            y.append(best)
            r.append(int(np.argmax(rr)))
        start = np.asarray(keep, dtype=np.int64)

    n = len(start)
    return SegmentDataset(
        [recording.signal], np.zeros(n, dtype=np.int64), start, y, r,
        np.full(n, recording.subject, dtype=np.int64), W, step,
    )


class Split(NamedTuple):
    train: SegmentDataset
    test: SegmentDataset
    dropped: int


def split_by_repetition(ds: SegmentDataset, train_reps=(1, 3, 4, 6), test_reps=(2, 5)) -> Split:
    """Route windows by repetition index; windows in neither set are dropped and counted."""
    train_reps, test_reps = set(train_reps), set(test_reps)
    overlap = train_reps & test_reps
    if overlap:
        raise ContractError(f"train and test repetitions overlap: {sorted(overlap)}")
    in_train = np.isin(ds.repetitions, sorted(train_reps))
    in_test = np.isin(ds.repetitions, sorted(test_reps))
    dropped = int(len(ds) - in_train.sum() - in_test.sum())
    return Split(ds.take(np.flatnonzero(in_train)), ds.take(np.flatnonzero(in_test)), dropped)
