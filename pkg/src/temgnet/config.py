"""Run configuration: a TOML file with strict keys and a default for everything but inputs.

Example::

    [paths]
    inputs = ["data/subject01.temg", {path = "data/s2.csv", subject = 2}]
    run_dir = "runs/model1_300ms"

    [preprocess]
    filter_order = 2
    cutoff_hz = 500.0
    zero_phase = true
    mu = 255.0

    [segment]
    window_ms = 300
    step_ms = 10.0
    policy = "pure"
    train_reps = [1, 3, 4, 6]
    test_reps = [2, 5]

    [model]
    model_id = 1            # published variant 1..4, or 0 for a custom shape
    seed = 0

    [train]
    learning_rate = 1e-4
    epochs = 100
    mode = "per_subject"    # or "pooled"
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import MODEL_IDS, VARIANTS, ModelConfig
from .recording import N_CHANNELS, SAMPLE_RATE_HZ
from .segmentation import POLICIES, ms_to_samples
from .sigproc import FilterSpec
from .training import TrainConfig

DEFAULTS = {
    "paths": {"inputs": None, "run_dir": "run"},
    "preprocess": {"filter_order": 2, "cutoff_hz": 500.0, "zero_phase": True, "mu": 255.0,
                   "sample_rate_hz": SAMPLE_RATE_HZ},
    "segment": {"window_ms": 200, "step_ms": 10.0, "policy": "pure",
                "train_reps": [1, 3, 4, 6], "test_reps": [2, 5]},
    "model": {"model_id": 1, "n_layers": None, "d_model": None, "mlp_size": None, "n_heads": None,
              "n_classes": 17, "qkv_bias": False, "dropout_rate": 0.0, "seed": 0},
    "train": {"learning_rate": 1e-4, "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.001,
              "decoupled_weight_decay": False, "batch_size": 512, "epochs": 100, "seed": 0,
              "mode": "per_subject"},
    "evaluate": {"batch_size": 1024, "wilcoxon_mode": "auto"},
}
TRAIN_MODES = ("per_subject", "pooled")


def _merge(raw):
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            cfg[section][key] = value
    return cfg


@dataclass
class InputSpec:
    path: Path
    subject: int | None = None
    refined: bool = False


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        cfg = cls(_merge(raw), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def __getitem__(self, section):
        return self.raw[section]

    # -------------------------------------------------------------- derived objects

    def validate(self):
        self.filter_spec()
        self.model_config()
        self.train_config()
        seg = self.raw["segment"]
        if seg["policy"] not in POLICIES:
            raise ConfigError(f"segment.policy must be one of {POLICIES}, got {seg['policy']!r}")
        if set(seg["train_reps"]) & set(seg["test_reps"]):
            raise ConfigError("segment.train_reps and segment.test_reps overlap")
        if self.raw["train"]["mode"] not in TRAIN_MODES:
            raise ConfigError(f"train.mode must be one of {TRAIN_MODES}")
        if self.raw["evaluate"]["wilcoxon_mode"] not in ("auto", "exact", "approx"):
            raise ConfigError("evaluate.wilcoxon_mode must be auto, exact or approx")
        if self.raw["paths"]["inputs"] is not None:
            self.inputs()

    def inputs(self):
        entries = self.raw["paths"]["inputs"]
        if entries is None:
            raise ConfigError("paths.inputs is required")
        if isinstance(entries, (str, dict)):
            entries = [entries]
        out = []
        for e in entries:
            if isinstance(e, str):
                out.append(InputSpec(self.resolve(e)))
            elif isinstance(e, dict):
                unknown = set(e) - {"path", "subject", "refined"}
                if unknown or "path" not in e:
                    raise ConfigError(f"input entries take path/subject/refined, got {sorted(e)}")
                out.append(InputSpec(self.resolve(e["path"]), e.get("subject"), bool(e.get("refined", False))))
            else:
                raise ConfigError(f"bad input entry {e!r}")
        return out

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def run_dir(self):
        return self.resolve(self.raw["paths"]["run_dir"])

    def filter_spec(self):
        p = self.raw["preprocess"]
        try:
            return FilterSpec(int(p["filter_order"]), float(p["cutoff_hz"]), float(p["sample_rate_hz"]),
                              bool(p["zero_phase"]))
        except ValueError as exc:
            raise ConfigError(f"[preprocess]: {exc}") from None

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        window_ms = self.raw["segment"]["window_ms"]
        fs = float(self.raw["preprocess"]["sample_rate_hz"])
        mid = m["model_id"]
        if mid == 0:
            missing = [k for k in ("n_layers", "d_model", "mlp_size", "n_heads") if m[k] is None]
            if missing:
                raise ConfigError(f"model_id = 0 (custom) requires {missing}")
            arch = {k: m[k] for k in ("n_layers", "d_model", "mlp_size", "n_heads")}
        else:
            if mid not in MODEL_IDS:
                raise ConfigError(f"model.model_id = {mid!r} is invalid; valid ids are 1-4 (or 0 for custom)")
            key = (int(window_ms), mid) if (int(window_ms), mid) in VARIANTS else (300, mid)
            L, d, mlp, h, _ = VARIANTS[key]
            arch = {"n_layers": L, "d_model": d, "mlp_size": mlp, "n_heads": h}
            arch.update({k: m[k] for k in arch if m[k] is not None})
        try:
            return ModelConfig(patch_size=N_CHANNELS, window=ms_to_samples(window_ms, fs),
                               n_classes=int(m["n_classes"]), qkv_bias=bool(m["qkv_bias"]),
                               dropout_rate=float(m["dropout_rate"]), **arch)
        except TypeError as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = {k: v for k, v in self.raw["train"].items() if k != "mode"}
        t["betas"] = tuple(t["betas"])
        return TrainConfig(**t)
