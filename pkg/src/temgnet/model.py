"""ViT-style transformer classifier over sEMG windows.

A window X of shape (S, W) is cut into N = floor(W / S) square S x S
patches, each flattened, linearly projected to ``d_model`` and prefixed with
a learned class token; learned position embeddings are added and the
sequence runs through ``n_layers`` pre-norm encoder layers. The class-token
row of the final layer, layer-normalised, feeds a linear head.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, VersionError
from .tensor import Tensor

#: (window_ms, model_id) -> (layers, d_model, mlp_size, heads, published parameter count)
VARIANTS = {
    (200, 1): (1, 32, 128, 8, 20049),
    (200, 2): (2, 32, 128, 8, 32657),
    (200, 3): (3, 32, 128, 8, 45265),
    (200, 4): (1, 64, 256, 8, 64625),
    (300, 1): (1, 32, 128, 8, 20593),
    (300, 2): (2, 32, 128, 8, 33201),
    (300, 3): (3, 32, 128, 8, 45809),
    (300, 4): (1, 64, 256, 8, 65713),
}
MODEL_IDS = (1, 2, 3, 4)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 1
    d_model: int = 32
    mlp_size: int = 128
    n_heads: int = 8
    patch_size: int = 12
    window: int = 600
    n_classes: int = 17
    qkv_bias: bool = False
    dropout_rate: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.window < self.patch_size:
            raise ConfigError(f"window={self.window} is shorter than patch_size={self.patch_size}")
        if min(self.n_layers, self.d_model, self.mlp_size, self.n_heads, self.n_classes) < 1:
            raise ConfigError("layer count, widths, heads and classes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_patches(self):
        return self.window // self.patch_size

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def seq_len(self):
        return self.n_patches + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def variant_config(model_id, window_ms=300, sample_rate_hz=2000.0, **overrides):
    """ModelConfig for a published architecture variant."""
    if (window_ms, model_id) not in VARIANTS:
        raise ConfigError(
            f"no published variant for model_id={model_id}, window_ms={window_ms}; "
            f"valid model ids are {MODEL_IDS} with windows 200 or 300 ms"
        )
    L, d, mlp, h, _ = VARIANTS[(window_ms, model_id)]
    window = int(round(window_ms * sample_rate_hz / 1000.0))
    return ModelConfig(n_layers=L, d_model=d, mlp_size=mlp, n_heads=h, window=window, **overrides)


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable scalar count."""
    d, m, S = config.d_model, config.mlp_size, config.patch_size
    per_layer = (
        2 * 2 * d                       # two LayerNorms
        + d * 3 * d                     # QKV
        + (3 * d if config.qkv_bias else 0)
        + d * d + d                     # MSA output projection
        + d * m + m + m * d + d         # MLP
    )
    return (
        S * S * d + d                   # patch projection
        + d                             # class token
        + config.seq_len * d            # position table
        + config.n_layers * per_layer
        + 2 * d                         # final LayerNorm
        + d * config.n_classes + config.n_classes
    )


def param_shapes(config: ModelConfig):
    d, m, S = config.d_model, config.mlp_size, config.patch_size
    shapes = OrderedDict()
    shapes["patch.weight"] = (S * S, d)
    shapes["patch.bias"] = (d,)
    shapes["cls"] = (d,)
    shapes["pos"] = (config.seq_len, d)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "qkv.weight"] = (d, 3 * d)
        if config.qkv_bias:
            shapes[p + "qkv.bias"] = (3 * d,)
        shapes[p + "proj.weight"] = (d, d)
        shapes[p + "proj.bias"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp1.weight"] = (d, m)
        shapes[p + "mlp1.bias"] = (m,)
        shapes[p + "mlp2.weight"] = (m, d)
        shapes[p + "mlp2.bias"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (d, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_params(config: ModelConfig, seed=0):
    """Fresh model: weights and position table from N(0, 0.02) clipped at
    +/-2 sigma; biases, LayerNorm betas and the class token zero; gammas one."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight") or name == "pos":
            arr = _trunc_normal(rng, shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return TemgNet(config, params, seed)


# ---------------------------------------------------------------- building blocks


def patchify(X, patch_size=12):
    """Split (..., S, W) windows into (..., N, S*S) flattened patches.

    Patch j covers samples [jS, (j+1)S); its vector lists all channels of the
    first sample, then all channels of the next, and so on. Trailing
    ``W mod S`` samples are dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    S, W = X.shape[-2], X.shape[-1]
    if S != patch_size:
        raise DimensionError(f"window has {S} channels but patch side is {patch_size}")
    if W < S:
        raise DimensionError(f"window of {W} samples is shorter than the patch side {S}")
    N = W // S
    lead = X.shape[:-2]
    blocks = X[..., : N * S].reshape(*lead, S, N, S)        # (..., channel, patch, sample)
    blocks = np.moveaxis(blocks, -3, -1)                     # (..., patch, sample, channel)
    return np.ascontiguousarray(blocks).reshape(*lead, N, S * S)


def embed(patches, weight, bias, cls, pos):
    """Z0 = [cls; x_1 E; ...; x_N E] + E_pos, for (..., N, S*S) patches."""
    patches = T.as_tensor(patches)
    n = patches.shape[-2]
    if patches.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch length {patches.shape[-1]} does not match projection {weight.shape}")
    if pos.shape[0] != n + 1:
        raise DimensionError(f"position table has {pos.shape[0]} rows, need N+1 = {n + 1}")
    tokens = T.linear(patches, weight, bias)
    lead = patches.shape[:-2]
    d = weight.shape[1]
    cls_row = T.add(T.reshape(cls, (1,) * len(lead) + (1, d)), np.zeros(lead + (1, d)))
    return T.add(T.concat([cls_row, tokens], axis=-2), pos)


def self_attention(Z, w_qkv, capture=None):
    """Single head: [Q, K, V] = Z W; softmax(Q K^T / sqrt(d_h)) V."""
    Z, w_qkv = T.as_tensor(Z), T.as_tensor(w_qkv)
    if w_qkv.shape[-1] % 3 or w_qkv.shape[0] != Z.shape[-1]:
        raise DimensionError(f"QKV weight {w_qkv.shape} incompatible with input {Z.shape}")
    dh = w_qkv.shape[-1] // 3
    qkv = T.matmul(Z, w_qkv)
    q, k, v = qkv[..., :dh], qkv[..., dh:2 * dh], qkv[..., 2 * dh:]
    P = T.softmax_rows(T.mul(T.matmul(q, T.swapaxes(k)), 1.0 / math.sqrt(dh)))
    if capture is not None:
        capture.append(P.data)
    return T.matmul(P, v)


def head_weights(w_qkv, n_heads):
    """Per-head (d, 3 d_h) blocks of the stacked QKV weight, in head order."""
    w = T.as_tensor(w_qkv)
    block = w.shape[-1] // n_heads
    return [w[:, i * block:(i + 1) * block] for i in range(n_heads)]


def msa(Z, w_qkv, w_out, b_out, n_heads, qkv_bias=None, capture=None):
    """[SA_1(Z), ..., SA_h(Z)] W_out + b_out, with all heads evaluated in one batch.

    ``w_qkv`` is (d, 3d); columns ``[3 d_h i, 3 d_h (i+1))`` hold head i's
    query, key and value blocks in that order.
    """
    Z = T.as_tensor(Z)
    d = Z.shape[-1]
    if w_qkv.shape != (d, 3 * d) or d % n_heads:
        raise DimensionError(f"QKV weight {w_qkv.shape} / {n_heads} heads incompatible with d={d}")
    if w_out.shape[0] != d:
        raise DimensionError(f"output projection {w_out.shape} expects width {w_out.shape[0]}, heads give {d}")
    dh = d // n_heads
    lead = Z.shape[:-2]
    n = Z.shape[-2]
    nl = len(lead)
    qkv = T.linear(Z, w_qkv, qkv_bias)
    qkv = T.reshape(qkv, lead + (n, n_heads, 3, dh))
    qkv = T.transpose(qkv, tuple(range(nl)) + (nl + 2, nl + 1, nl, nl + 3))  # (..., 3, h, n, dh)
    q, k, v = qkv[..., 0, :, :, :], qkv[..., 1, :, :, :], qkv[..., 2, :, :, :]
    P = T.softmax_rows(T.mul(T.matmul(q, T.swapaxes(k)), 1.0 / math.sqrt(dh)))
    if capture is not None:
        capture.append(P.data)
    heads = T.matmul(P, v)                                                      # (..., h, n, dh)
    heads = T.transpose(heads, tuple(range(nl)) + (nl + 1, nl, nl + 2))         # (..., n, h, dh)
    return T.linear(T.reshape(heads, lead + (n, d)), w_out, b_out)


def mlp(Z, w1, b1, w2, b2, dropout_rate=0.0, rng=None):
    hidden = T.gelu(T.linear(Z, w1, b1))
    if dropout_rate and rng is not None:
        hidden = T.dropout(hidden, dropout_rate, rng)
    return T.linear(hidden, w2, b2)


def encoder_layer(Z, p, prefix, config, capture=None, rng=None):
    """Z' = MSA(LN(Z)) + Z;  out = MLP(LN(Z')) + Z'."""
    eps = config.ln_eps
    g = lambda name: p[prefix + name]  # noqa: E731
    a = msa(T.layer_norm(Z, g("ln1.gamma"), g("ln1.beta"), eps), g("qkv.weight"),
            g("proj.weight"), g("proj.bias"), config.n_heads,
            qkv_bias=p.get(prefix + "qkv.bias"), capture=capture)
    Z1 = T.add(a, Z)
    m = mlp(T.layer_norm(Z1, g("ln2.gamma"), g("ln2.beta"), eps), g("mlp1.weight"),
            g("mlp1.bias"), g("mlp2.weight"), g("mlp2.bias"), config.dropout_rate, rng)
    return T.add(m, Z1)


class TemgNet:
    """Instantiated network: a config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params, seed=0):
        self.config = config
        self.params = OrderedDict(params)
        self.seed = seed
        expected = param_shapes(config)
        if list(expected) != list(self.params):
            raise DimensionError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        T.zero_grad(self.params.values())

    def copy(self):
        params = OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items())
        return TemgNet(self.config, params, self.seed)

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # -------------------------------------------------------------- forward

    def encode(self, X, capture=None, rng=None):
        """Final-layer token states Z_L, shape (..., N+1, d)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.config.window:
            raise DimensionError(f"window has {X.shape[-1]} samples, model expects {self.config.window}")
        p = self.params
        Z = embed(patchify(X, self.config.patch_size), p["patch.weight"], p["patch.bias"], p["cls"], p["pos"])
        if self.config.dropout_rate and rng is not None:
            Z = T.dropout(Z, self.config.dropout_rate, rng)
        if capture is not None:
            capture.setdefault("attention", [])
            capture["hidden"] = [Z.data]
        for i in range(self.config.n_layers):
            Z = encoder_layer(Z, p, f"layers.{i}.", self.config,
                              capture=None if capture is None else capture["attention"], rng=rng)
            if capture is not None:
                capture["hidden"].append(Z.data)
        return Z

    def classify(self, ZL):
        """Logits from the class-token row of Z_L."""
        p = self.params
        z0 = T.as_tensor(ZL)[..., :1, :]
        logits = T.linear(T.layer_norm(z0, p["norm.gamma"], p["norm.beta"], self.config.ln_eps),
                          p["head.weight"], p["head.bias"])
        return logits[..., 0, :]

    def forward_batch(self, X, capture=None, rng=None):
        """Logits tensor (B, n_classes) for windows X of shape (B, S, W).

        Passing an ``rng`` enables dropout (when configured).
        """
        return self.classify(self.encode(X, capture=capture, rng=rng))

    def forward(self, X):
        """Logits (n_classes,) for a single (S, W) window, as a numpy array."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError(f"forward expects one (S, W) window, got shape {X.shape}")
        return self.forward_batch(X[None])[0].data.copy()

    __call__ = forward_batch


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"TEMGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: TemgNet, metadata=None):
    """Write config, seed and named little-endian float64 tensors.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header (sorted keys), then the raw tensor data in header order.
    Output bytes depend only on the model and ``metadata``.
    """
    entries, offset = [], 0
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": entries,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, with_metadata=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}", offset=8)
    start = 20 + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    try:
        header = json.loads(raw[20:start].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})", offset=20) from None
    config = ModelConfig.from_dict(header["config"])
    params = OrderedDict()
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + 8 * n > len(raw):
            raise FormatError(f"{path}: tensor {e['name']} truncated", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=True)
    model = TemgNet(config, params, header["seed"])
    return (model, header.get("metadata", {})) if with_metadata else model
