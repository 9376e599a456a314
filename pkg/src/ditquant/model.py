"""Desk-scale transformer-only denoiser with quantization hooks.

The model predicts the noise in x_t: patchify -> linear embed -> add
sinusoidal timestep embedding and label embedding -> depth x (layernorm,
self-attention, layernorm, GELU MLP, both with residuals) -> linear
unpatchify. Conditioning is an embedding-table lookup; label index
num_classes is the null (unconditional) label.

All weights are drawn from one seeded PCG64 generator in a fixed,
documented order, so initialization is bit-reproducible. Parameter values
are snapped to float32 (computation stays float64), which makes the
float32 checkpoint round-trip bit-exact.

Quantization hooks overlay the stored weights: attaching fake-quant to a
layer never mutates the originals, and detaching restores full precision
bit-exactly. Weights stay immutable during inference; attach/detach must
not run concurrently with forwards.
"""

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .backend import kernels
from .errors import ConfigError, ContractError, ShapeError
from .numerics import as_tensor
from .quant import QuantParams, fake_quant, PER_TENSOR

CHECKPOINT_MAGIC = b"DITQCKPT"
CHECKPOINT_VERSION = 1

LABEL_EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    hidden_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return 4 * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


@dataclass(frozen=True)
class LayerHandle:
    layer_id: str
    kind: str
    weight_shape: tuple[int, int]


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for every parameter, in draw order."""
    d, p, m = cfg.hidden_dim, cfg.patch_dim, cfg.mlp_dim
    specs = [
        ("patch_embed.weight", (d, p), "fan_in"),
        ("patch_embed.bias", (d,), "zeros"),
    ]
    for i in range(cfg.depth):
        specs += [
            (f"block{i}.ln1.gain", (d,), "ones"),
            (f"block{i}.ln1.bias", (d,), "zeros"),
            (f"block{i}.attn.qkv.weight", (3 * d, d), "fan_in"),
            (f"block{i}.attn.qkv.bias", (3 * d,), "zeros"),
            (f"block{i}.attn.out.weight", (d, d), "fan_in"),
            (f"block{i}.attn.out.bias", (d,), "zeros"),
            (f"block{i}.ln2.gain", (d,), "ones"),
            (f"block{i}.ln2.bias", (d,), "zeros"),
            (f"block{i}.mlp.fc1.weight", (m, d), "fan_in"),
            (f"block{i}.mlp.fc1.bias", (m,), "zeros"),
            (f"block{i}.mlp.fc2.weight", (d, m), "fan_in"),
            (f"block{i}.mlp.fc2.bias", (d,), "zeros"),
        ]
    specs += [
        ("head.weight", (p, d), "fan_in"),
        ("head.bias", (p,), "zeros"),
        ("label_embed.table", (cfg.num_classes + 1, d), "embed"),
    ]
    return specs


def _quantizable_ids(cfg: ModelConfig) -> list[str]:
    ids = ["patch_embed"]
    for i in range(cfg.depth):
        ids += [
            f"block{i}.attn.qkv",
            f"block{i}.attn.out",
            f"block{i}.mlp.fc1",
            f"block{i}.mlp.fc2",
        ]
    ids.append("head")
    return ids


def snap_f32(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage."""
    return x.astype(np.float32).astype(np.float64)


class DenoiserModel:
    """Toy diffusion transformer; weights plus quantization hook state."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        expected = {name: shape for name, shape, _ in _param_specs(config)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ConfigError(
                    f"parameter {name} has shape {arr.shape}, expected {expected[name]}"
                )
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
        # (weight_params, act_params) overlays; originals are never touched
        self._hooks: dict[str, tuple[QuantParams | None, QuantParams | None]] = {}
        self._wt: dict[str, np.ndarray] = {}  # transposed weights for the matmul kernel
        self._wt_q: dict[str, np.ndarray] = {}  # fake-quantized transposed weights
        self.observer = None  # callable(layer_id, x) set by range collection
        self._rebuild_weight_cache()

    # -- structure ---------------------------------------------------------

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.channels, c.image_size, c.image_size)

    @property
    def null_label(self) -> int:
        return self.config.num_classes

    def check_label(self, label: int) -> None:
        if not 0 <= label <= self.config.num_classes:
            raise ConfigError(
                f"label {label} outside [0, {self.config.num_classes}] "
                f"(index {self.config.num_classes} is the null label)"
            )

    def enumerate_layers(self) -> list[LayerHandle]:
        """Quantizable linear layers in a fixed documented order.

        Covers the patch embed, every block's qkv / attention-out / MLP
        matrices, and the output head. Layernorm parameters, biases and
        the label embedding stay full precision.
        """
        return [
            LayerHandle(lid, "linear", self.params[lid + ".weight"].shape)
            for lid in _quantizable_ids(self.config)
        ]

    def weight(self, layer_id: str) -> np.ndarray:
        self._check_layer(layer_id)
        return self.params[layer_id + ".weight"]

    def _check_layer(self, layer_id: str) -> None:
        if layer_id not in _quantizable_ids(self.config):
            raise ConfigError(f"unknown quantizable layer {layer_id!r}")

    def _rebuild_weight_cache(self) -> None:
        self._wt = {
            lid: np.ascontiguousarray(self.params[lid + ".weight"].T)
            for lid in _quantizable_ids(self.config)
        }
        self._wt_q = {}
        for lid, (wp, _) in self._hooks.items():
            if wp is not None:
                w_hat = fake_quant(self.params[lid + ".weight"], wp)
                self._wt_q[lid] = np.ascontiguousarray(w_hat.T)

    # -- quantization hooks --------------------------------------------------

    def attach_fake_quant(
        self,
        layer_id: str,
        weight_params: QuantParams | None = None,
        act_params: QuantParams | None = None,
    ) -> None:
        """Overlay fake quantization on a layer's weight and/or input.

        Subsequent forwards use the fake-quantized weight and quantize the
        layer's input activation. Reversible via detach_fake_quant.
        """
        self._check_layer(layer_id)
        if weight_params is None and act_params is None:
            raise ConfigError("attach_fake_quant needs weight_params or act_params")
        if act_params is not None and act_params.granularity.kind != PER_TENSOR:
            raise ConfigError("activation quantization is per-tensor only")
        if weight_params is not None:
            w_hat = fake_quant(self.params[layer_id + ".weight"], weight_params)
            self._wt_q[layer_id] = np.ascontiguousarray(w_hat.T)
        else:
            self._wt_q.pop(layer_id, None)
        self._hooks[layer_id] = (weight_params, act_params)

    def detach_fake_quant(self, layer_id: str) -> None:
        self._check_layer(layer_id)
        self._hooks.pop(layer_id, None)
        self._wt_q.pop(layer_id, None)

    def detach_all(self) -> None:
        self._hooks.clear()
        self._wt_q.clear()

    @property
    def has_hooks(self) -> bool:
        return bool(self._hooks)

    def hooked_layers(self) -> dict[str, tuple[QuantParams | None, QuantParams | None]]:
        return dict(self._hooks)

    # -- forward -------------------------------------------------------------

    def _linear(self, layer_id: str, x: np.ndarray) -> np.ndarray:
        if self.observer is not None:
            self.observer(layer_id, x)
        hook = self._hooks.get(layer_id)
        if hook is not None and hook[1] is not None:
            x = fake_quant(x, hook[1])
        wt = self._wt_q.get(layer_id)
        if wt is None:
            wt = self._wt[layer_id]
        y = kernels.matmul(x, wt)
        y += self.params[layer_id + ".bias"][None, :]
        return y

    def _timestep_embedding(self, t: int) -> np.ndarray:
        d = self.config.hidden_dim
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        args = float(t) * freqs
        emb = np.concatenate([np.sin(args), np.cos(args)])
        if emb.size < d:  # odd hidden dim: pad one zero
            emb = np.concatenate([emb, np.zeros(d - emb.size)])
        return emb

    def _attention(self, i: int, h: np.ndarray) -> np.ndarray:
        c = self.config
        n, d = h.shape
        qkv = self._linear(f"block{i}.attn.qkv", h)  # (n, 3d)
        dh = c.head_dim
        # (heads, n, dh) contiguous blocks per head
        q = np.ascontiguousarray(qkv[:, 0:d].reshape(n, c.heads, dh).transpose(1, 0, 2))
        k = np.ascontiguousarray(qkv[:, d : 2 * d].reshape(n, c.heads, dh).transpose(1, 0, 2))
        v = np.ascontiguousarray(qkv[:, 2 * d : 3 * d].reshape(n, c.heads, dh).transpose(1, 0, 2))
        scale = 1.0 / math.sqrt(dh)
        ctx = np.empty((c.heads, n, dh))
        for head in range(c.heads):
            scores = kernels.matmul(q[head], np.ascontiguousarray(k[head].T))
            scores *= scale
            att = kernels.softmax_rows(scores)
            ctx[head] = kernels.matmul(att, v[head])
        merged = np.ascontiguousarray(ctx.transpose(1, 0, 2).reshape(n, d))
        return self._linear(f"block{i}.attn.out", merged)

    def _layer_norm(self, name: str, h: np.ndarray) -> np.ndarray:
        gain = self.params[name + ".gain"]
        bias = self.params[name + ".bias"]
        return kernels.layer_norm_rows(h, gain, bias, 1e-5)

    def patchify(self, x: np.ndarray) -> np.ndarray:
        """(C, H, W) image -> (num_patches, C*p*p) tokens, row-major grid."""
        c = self.config
        g, p = c.grid, c.patch_size
        x = x.reshape(c.channels, g, p, g, p)
        return np.ascontiguousarray(
            x.transpose(1, 3, 0, 2, 4).reshape(c.num_patches, c.patch_dim)
        )

    def unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        c = self.config
        g, p = c.grid, c.patch_size
        x = tokens.reshape(g, g, c.channels, p, p)
        return np.ascontiguousarray(
            x.transpose(2, 0, 3, 1, 4).reshape(c.channels, c.image_size, c.image_size)
        )

    def forward(self, x_t: np.ndarray, t: int, cond: int) -> np.ndarray:
        """Predict the noise in x_t; output has the input's shape."""
        x_t = as_tensor(x_t)
        if x_t.shape != self.sample_shape:
            raise ShapeError(
                f"input shape {x_t.shape} does not match model shape {self.sample_shape}"
            )
        if t < 0:
            raise ConfigError(f"timestep must be >= 0, got {t}")
        self.check_label(cond)

        h = self._linear("patch_embed", self.patchify(x_t))
        h = h + self._timestep_embedding(t)[None, :]
        h = h + self.params["label_embed.table"][cond][None, :]
        for i in range(self.config.depth):
            h = h + self._attention(i, self._layer_norm(f"block{i}.ln1", h))
            a = self._layer_norm(f"block{i}.ln2", h)
            a = self._linear(f"block{i}.mlp.fc1", a)
            a = kernels.gelu(a.reshape(-1)).reshape(a.shape)
            h = h + self._linear(f"block{i}.mlp.fc2", a)
        return self.unpatchify(self._linear("head", h))


def init_model(cfg: ModelConfig) -> DenoiserModel:
    """Seeded, bit-reproducible initialization.

    Weights are scaled normal with std 1/sqrt(fan_in), biases zero,
    layernorm gain one, label embedding std 0.02, drawn in declaration
    order from one PCG64 stream and snapped to float32 values.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "fan_in":
            arr = rng.standard_normal(shape) / math.sqrt(shape[1])
        elif kind == "embed":
            arr = rng.standard_normal(shape) * LABEL_EMBED_STD
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = snap_f32(arr)
    return DenoiserModel(cfg, params)


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(cfg))


def inject_weight_outliers(
    model: DenoiserModel, rate: float = 0.01, magnitude: float = 50.0, seed: int = 0
) -> None:
    """Scatter magnified outliers through every quantizable weight.

    Mimics the dispersed per-channel outliers that make low-bit
    per-channel weight quantization hard: a seeded `rate` fraction of each
    weight's entries is multiplied by `magnitude`. Deterministic; weights
    are re-snapped to float32 afterwards.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"outlier rate must be in [0, 1], got {rate}")
    if model.has_hooks:
        raise ContractError("inject_weight_outliers requires a hook-free model")
    rng = np.random.default_rng(seed)
    for lid in _quantizable_ids(model.config):
        w = model.params[lid + ".weight"]
        mask = rng.random(w.shape) < rate
        w[mask] *= magnitude
        model.params[lid + ".weight"] = snap_f32(w)
    model._rebuild_weight_cache()


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(model: DenoiserModel, path) -> None:
    """Write the flat tensor archive: magic, JSON manifest, raw <f4 payload."""
    names = [name for name, _, _ in _param_specs(model.config)]
    tensors = []
    payload = bytearray()
    for name in names:
        raw = model.params[name].astype("<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(model.params[name].shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload += raw
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def _manifest_field(header: dict, field: str):
    if field not in header:
        raise ConfigError(f"checkpoint manifest missing field {field!r}")
    return header[field]


def load_checkpoint(path) -> DenoiserModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file (bad magic): {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"checkpoint manifest is not valid JSON: {exc}") from exc
        payload = fh.read()
    version = _manifest_field(header, "format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version}")
    config_dict = _manifest_field(header, "config")
    try:
        cfg = ModelConfig(**config_dict)
    except TypeError as exc:
        raise ConfigError(f"checkpoint manifest config is invalid: {exc}") from exc
    params = {}
    for entry in _manifest_field(header, "tensors"):
        name = _manifest_field(entry, "name")
        shape = tuple(_manifest_field(entry, "shape"))
        offset = _manifest_field(entry, "offset")
        nbytes = _manifest_field(entry, "nbytes")
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise ConfigError(f"checkpoint payload truncated at tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"checkpoint tensor {name!r} size does not match shape {shape}")
        params[name] = arr.reshape(shape)
    return DenoiserModel(cfg, params)
