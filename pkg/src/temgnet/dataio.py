"""Recording files, NinaPro array import and the synthetic sEMG generator.

Canonical binary layout (all little-endian)::

    offset  size  field
    0       8     magic b"TEMGREC1"
    8       4     uint32 format version (1)
    12      4     uint32 subject id
    16      4     uint32 channel count C
    20      4     uint32 flags (bit 0: labels are refined re-labels)
    24      8     float64 sample rate in Hz
    32      8     uint64 sample count T
    40      4*C*T float32 signal, channel-major (channel 0 samples first)
    ...     T     uint8 labels
    ...     T     uint8 repetitions

Nothing may follow the repetition block.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, SchemaError, VersionError
from .recording import N_CHANNELS, N_MOVEMENTS, N_REPETITIONS, REST_REPETITION, SAMPLE_RATE_HZ, EmgRecording

MAGIC = b"TEMGREC1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIdQ")
FLAG_REFINED = 1


def save_canonical(path, rec: EmgRecording):
    flags = FLAG_REFINED if rec.label_source == "refined" else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(rec.subject), rec.n_channels, flags,
                              float(rec.sample_rate_hz), rec.n_samples))
        fh.write(np.ascontiguousarray(rec.signal, dtype="<f4").tobytes())
        fh.write(rec.labels.astype(np.uint8).tobytes())
        fh.write(rec.repetitions.astype(np.uint8).tobytes())


def load_canonical(path) -> EmgRecording:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    magic, version, subject, C, flags, fs, n = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported format version {version}", offset=8)
    pos = _HEADER.size
    sig_bytes = 4 * C * n
    expected = pos + sig_bytes + 2 * n
    if len(raw) != expected:
        what = "truncated" if len(raw) < expected else "trailing data"
        raise FormatError(
            f"{path}: length mismatch ({what}): header declares {n} samples x {C} channels "
            f"({expected} bytes) but file has {len(raw)} bytes",
            offset=min(len(raw), expected),
        )
    signal = np.frombuffer(raw, dtype="<f4", count=C * n, offset=pos).reshape(C, n).astype(np.float64)
    pos += sig_bytes
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).copy()
    reps = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos + n).copy()
    try:
        return EmgRecording(signal, labels, reps, subject=subject, sample_rate_hz=fs,
                            label_source="refined" if flags & FLAG_REFINED else "raw")
    except SchemaError as exc:
        raise FormatError(f"{path}: {exc}", offset=_HEADER.size + sig_bytes) from None


def save_delimited(path, rec: EmgRecording):
    """One row per sample: ch1..chC, label, repetition, with a header row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"ch{i + 1}" for i in range(rec.n_channels)] + ["label", "repetition"])
        for t in range(rec.n_samples):
            w.writerow([repr(float(v)) for v in rec.signal[:, t]]
                       + [int(rec.labels[t]), int(rec.repetitions[t])])


def load_delimited(path, subject=0, sample_rate_hz=SAMPLE_RATE_HZ, refined=False) -> EmgRecording:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file", offset=0) from None
        if header[-2:] != ["label", "repetition"]:
            raise FormatError(f"{path}: header must end with 'label,repetition', got {header[-2:]}", offset=0)
        rows = [r for r in reader if r]
    n_ch = len(header) - 2
    try:
        data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from None
    return import_ninapro(data[:, :n_ch], data[:, n_ch], data[:, n_ch + 1], subject=subject,
                          refined=refined, sample_rate_hz=sample_rate_hz, n_channels=n_ch)


def import_ninapro(emg, stimulus, repetition, subject=0, refined=False,
                   sample_rate_hz=SAMPLE_RATE_HZ, n_channels=N_CHANNELS) -> EmgRecording:
    """Build a recording from DB2-style arrays.

    ``emg`` is (T, 12) as stored in the database files; ``stimulus`` and
    ``repetition`` are length-T (pass ``restimulus``/``rerepetition`` with
    ``refined=True`` when using the corrected labels). Stimulus 0 is rest;
    repetition 0 becomes ``REST_REPETITION``.
    """
    emg = np.asarray(emg, dtype=np.float64)
    stim = np.asarray(stimulus).reshape(-1)
    rep = np.asarray(repetition).reshape(-1)
    if emg.ndim != 2 or emg.shape[1] != n_channels:
        raise SchemaError(f"expected a (T, {n_channels}) EMG matrix, got shape {emg.shape}")
    T = emg.shape[0]
    if stim.shape[0] != T or rep.shape[0] != T:
        raise SchemaError(f"stimulus ({stim.shape[0]}) and repetition ({rep.shape[0]}) must have {T} entries")
    for name, arr, hi in (("stimulus", stim, N_MOVEMENTS), ("repetition", rep, N_REPETITIONS)):
        if T and (np.any(arr != np.round(arr)) or arr.min() < 0 or arr.max() > hi):
            raise SchemaError(f"{name} values must be integers in 0..{hi}")
    rep = np.where(rep == 0, REST_REPETITION, rep)
    return EmgRecording(emg.T.copy(), stim.astype(np.uint8), rep.astype(np.uint8), subject=subject,
                        sample_rate_hz=sample_rate_hz, label_source="refined" if refined else "raw")


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic protocol: every class is repeated ``n_repetitions`` times,
    each movement followed by rest.

    Class k's signal is Gaussian noise band-passed around its own centre
    frequency and scaled per channel by a bump centred on its own channel.
    ``noise`` is the standard deviation of white noise added everywhere,
    relative to the unit RMS of the movement signal.
    """

    n_classes: int = 17
    n_channels: int = N_CHANNELS
    sample_rate_hz: float = SAMPLE_RATE_HZ
    n_repetitions: int = N_REPETITIONS
    movement_s: float = 5.0
    rest_s: float = 3.0
    noise: float = 0.1
    f_low_hz: float = 30.0
    f_high_hz: float = 450.0
    bandwidth_hz: float = 15.0
    floor_gain: float = 0.1
    seed: int = 0
    subject: int = 1

    def __post_init__(self):
        if not 1 <= self.n_classes <= N_MOVEMENTS:
            raise SchemaError(f"n_classes must be in 1..{N_MOVEMENTS}")
        if self.movement_s <= 0 or self.rest_s < 0 or self.n_repetitions < 1:
            raise SchemaError("durations and repetition count must be positive")
        if not 0 < self.f_low_hz < self.f_high_hz < self.sample_rate_hz / 2:
            raise SchemaError("signature band must lie inside (0, Nyquist)")

    def centre_frequencies(self):
        if self.n_classes == 1:
            return np.array([0.5 * (self.f_low_hz + self.f_high_hz)])
        return np.linspace(self.f_low_hz, self.f_high_hz, self.n_classes)

    def channel_profiles(self):
        """(n_classes, n_channels) amplitude profile; class k peaks on its own channel."""
        C = self.n_channels
        centres = (np.arange(self.n_classes) * C / self.n_classes) % C
        ch = np.arange(C)
        dist = np.minimum(np.abs(ch[None, :] - centres[:, None]), C - np.abs(ch[None, :] - centres[:, None]))
        width = 1.0 + (np.arange(self.n_classes) % 3)[:, None] * 0.75
        return self.floor_gain + (1 - self.floor_gain) * np.exp(-0.5 * (dist / width) ** 2)

    def to_dict(self):
        return asdict(self)


def _band_noise(rng, shape, fc, bw, fs):
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec *= np.exp(-0.5 * ((f - fc) / bw) ** 2)
    x = np.fft.irfft(spec, n=n, axis=-1)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    return x / np.where(rms > 0, rms, 1.0)


def synth_generate(spec: SynthSpec) -> EmgRecording:
    """Deterministic synthetic recording following ``spec``.

    Layout: for class 1..K, for repetition 1..R: movement region then rest
    (label 0, repetition ``REST_REPETITION``).
    """
    rng = np.random.default_rng(spec.seed)
    fs = spec.sample_rate_hz
    n_move = int(round(spec.movement_s * fs))
    n_rest = int(round(spec.rest_s * fs))
    per_trial = n_move + n_rest
    total = spec.n_classes * spec.n_repetitions * per_trial
    C = spec.n_channels
    signal = np.zeros((C, total))
    labels = np.zeros(total, dtype=np.uint8)
    reps = np.full(total, REST_REPETITION, dtype=np.uint8)
    centres = spec.centre_frequencies()
    profiles = spec.channel_profiles()
    pos = 0
    for k in range(spec.n_classes):
        for r in range(1, spec.n_repetitions + 1):
            burst = _band_noise(rng, (C, n_move), centres[k], spec.bandwidth_hz, fs)
            signal[:, pos:pos + n_move] = burst * profiles[k][:, None]
            labels[pos:pos + n_move] = k + 1
            reps[pos:pos + n_move] = r
            pos += per_trial
    if spec.noise > 0:
        signal += spec.noise * rng.standard_normal(signal.shape)
    return EmgRecording(signal, labels, reps, subject=spec.subject, sample_rate_hz=fs,
                        meta={"synth": spec.to_dict()})
