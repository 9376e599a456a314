"""Optional seeded training loop for the toy denoiser.

A few hundred steps of plain gradient descent on the standard
noise-prediction loss (mean squared error between predicted and true
noise) over synthetic class-conditioned images. Nothing downstream
requires a trained model; training just makes activation dynamics less
degenerate than random init. Deterministic for a given seed.

The backward pass is hand-derived for the exact forward graph; a cached
forward here must match DenoiserModel.forward bit-for-bit (tested), and
gradients are validated against finite differences.
"""

import math

import numpy as np

from .backend import kernels
from .errors import ContractError
from .model import DenoiserModel, snap_f32

GELU_COEFF = kernels.GELU_TANH_COEFF
_GELU_SCALE = math.sqrt(2.0 / math.pi)


def _ct(a):
    return np.ascontiguousarray(a)


def _linear_fwd(model, lid, x, cache):
    cache[lid + ".x"] = x
    y = kernels.matmul(x, model._wt[lid])
    y += model.params[lid + ".bias"][None, :]
    return y


def _linear_bwd(model, lid, dy, grads):
    x = grads["_cache"][lid + ".x"]
    w = model.params[lid + ".weight"]
    grads[lid + ".weight"] += kernels.matmul(_ct(dy.T), x)
    grads[lid + ".bias"] += dy.sum(axis=0)
    return kernels.matmul(dy, w)


def _ln_fwd(model, name, x, cache):
    gain = model.params[name + ".gain"]
    bias = model.params[name + ".bias"]
    y = kernels.layer_norm_rows(x, gain, bias, 1e-5)
    n = x.shape[1]
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + 1e-5)
    cache[name + ".xhat"] = (x - mean) * inv
    cache[name + ".inv"] = inv
    return y


def _ln_bwd(model, name, dy, grads):
    cache = grads["_cache"]
    xhat = cache[name + ".xhat"]
    inv = cache[name + ".inv"]
    gain = model.params[name + ".gain"]
    grads[name + ".gain"] += (dy * xhat).sum(axis=0)
    grads[name + ".bias"] += dy.sum(axis=0)
    dxhat = dy * gain[None, :]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _gelu_fwd(x, cache, key):
    cache[key] = x
    return kernels.gelu(x.reshape(-1)).reshape(x.shape)


def _gelu_bwd(dy, cache, key):
    x = cache[key]
    u = _GELU_SCALE * (x + GELU_COEFF * x**3)
    th = np.tanh(u)
    du = _GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x**2)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du)


def _attn_fwd(model, i, h, cache):
    c = model.config
    n, d = h.shape
    qkv = _linear_fwd(model, f"block{i}.attn.qkv", h, cache)
    dh = c.head_dim
    q = _ct(qkv[:, 0:d].reshape(n, c.heads, dh).transpose(1, 0, 2))
    k = _ct(qkv[:, d : 2 * d].reshape(n, c.heads, dh).transpose(1, 0, 2))
    v = _ct(qkv[:, 2 * d : 3 * d].reshape(n, c.heads, dh).transpose(1, 0, 2))
    scale = 1.0 / math.sqrt(dh)
    ctx = np.empty((c.heads, n, dh))
    atts = np.empty((c.heads, n, n))
    for head in range(c.heads):
        scores = kernels.matmul(q[head], _ct(k[head].T))
        scores *= scale
        att = kernels.softmax_rows(scores)
        atts[head] = att
        ctx[head] = kernels.matmul(att, v[head])
    cache[f"block{i}.attn.qkv_heads"] = (q, k, v)
    cache[f"block{i}.attn.att"] = atts
    merged = _ct(ctx.transpose(1, 0, 2).reshape(n, d))
    return _linear_fwd(model, f"block{i}.attn.out", merged, cache)


def _attn_bwd(model, i, dy, grads):
    c = model.config
    cache = grads["_cache"]
    q, k, v = cache[f"block{i}.attn.qkv_heads"]
    atts = cache[f"block{i}.attn.att"]
    n = q.shape[1]
    d = c.hidden_dim
    dh = c.head_dim
    scale = 1.0 / math.sqrt(dh)
    dmerged = _linear_bwd(model, f"block{i}.attn.out", dy, grads)
    dctx = _ct(dmerged.reshape(n, c.heads, dh).transpose(1, 0, 2))
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for head in range(c.heads):
        att = atts[head]
        datt = kernels.matmul(dctx[head], _ct(v[head].T))
        dv[head] = kernels.matmul(_ct(att.T), dctx[head])
        # softmax backward, row-wise
        dscores = att * (datt - (datt * att).sum(axis=1, keepdims=True))
        dscores *= scale
        dq[head] = kernels.matmul(dscores, k[head])
        dk[head] = kernels.matmul(_ct(dscores.T), q[head])
    dqkv = np.concatenate(
        [
            _ct(dq.transpose(1, 0, 2)).reshape(n, d),
            _ct(dk.transpose(1, 0, 2)).reshape(n, d),
            _ct(dv.transpose(1, 0, 2)).reshape(n, d),
        ],
        axis=1,
    )
    return _linear_bwd(model, f"block{i}.attn.qkv", dqkv, grads)


def forward_cached(model: DenoiserModel, x_t, t: int, cond: int):
    """Forward pass mirroring DenoiserModel.forward, retaining activations.

    Requires a hook-free model; output is bit-identical to model.forward.
    """
    if model.has_hooks:
        raise ContractError("training requires a hook-free (full-precision) model")
    cache: dict = {"cond": cond}
    h = _linear_fwd(model, "patch_embed", model.patchify(np.ascontiguousarray(x_t, dtype=np.float64)), cache)
    h = h + model._timestep_embedding(t)[None, :]
    h = h + model.params["label_embed.table"][cond][None, :]
    for i in range(model.config.depth):
        h = h + _attn_fwd(model, i, _ln_fwd(model, f"block{i}.ln1", h, cache), cache)
        a = _ln_fwd(model, f"block{i}.ln2", h, cache)
        a = _linear_fwd(model, f"block{i}.mlp.fc1", a, cache)
        a = _gelu_fwd(a, cache, f"block{i}.mlp.gelu_in")
        h = h + _linear_fwd(model, f"block{i}.mlp.fc2", a, cache)
    out = model.unpatchify(_linear_fwd(model, "head", h, cache))
    return out, cache


def backward(model: DenoiserModel, cache: dict, dout) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every parameter, given d(loss)/d(output)."""
    grads: dict = {name: np.zeros_like(p) for name, p in model.params.items()}
    grads["_cache"] = cache
    dh = _linear_bwd(model, "head", model.patchify(np.ascontiguousarray(dout, dtype=np.float64)), grads)
    for i in reversed(range(model.config.depth)):
        da = _linear_bwd(model, f"block{i}.mlp.fc2", dh, grads)
        da = _gelu_bwd(da, cache, f"block{i}.mlp.gelu_in")
        da = _linear_bwd(model, f"block{i}.mlp.fc1", da, grads)
        dh = dh + _ln_bwd(model, f"block{i}.ln2", da, grads)
        dattn = _attn_bwd(model, i, dh, grads)
        dh = dh + _ln_bwd(model, f"block{i}.ln1", dattn, grads)
    grads["label_embed.table"][cache["cond"]] += dh.sum(axis=0)
    _linear_bwd(model, "patch_embed", dh, grads)
    del grads["_cache"]
    return grads


def synthetic_templates(model_cfg, seed: int) -> np.ndarray:
    """One smooth seeded pattern per class label, max-abs-normalized."""
    c = model_cfg
    out = np.empty((c.num_classes, c.channels, c.image_size, c.image_size))
    coords = np.arange(c.image_size) / c.image_size
    hh, ww = np.meshgrid(coords, coords, indexing="ij")
    for label in range(c.num_classes):
        rng = np.random.default_rng([seed, label])
        img = np.zeros((c.channels, c.image_size, c.image_size))
        for _ in range(3):
            fh, fw = rng.integers(1, 5, size=2)
            ph, pw = rng.uniform(0, 2 * np.pi, size=2)
            amp = rng.uniform(0.3, 1.0, size=c.channels)
            wave = np.sin(2 * np.pi * fh * hh + ph) * np.sin(2 * np.pi * fw * ww + pw)
            img += amp[:, None, None] * wave[None, :, :]
        out[label] = img / np.max(np.abs(img))
    return out


def train_denoiser(
    model: DenoiserModel,
    sched,
    steps: int,
    lr: float = 0.02,
    batch: int = 4,
    seed: int = 0,
    label_dropout: float = 0.1,
) -> list[float]:
    """Plain gradient descent on the noise-prediction MSE.

    Each step averages gradients over `batch` synthetic examples (class
    template + small perturbation, diffused to a random timestep) and
    updates every parameter. The label is dropped to the null label with
    probability `label_dropout` so guidance stays meaningful. Parameters
    are snapped back to float32 values when training finishes.
    """
    from .diffusion import forward_diffuse

    if model.has_hooks:
        raise ContractError("train_denoiser requires a hook-free model")
    cfg = model.config
    rng = np.random.default_rng(seed)
    templates = synthetic_templates(cfg, seed)
    losses = []
    for _ in range(steps):
        total = {name: np.zeros_like(p) for name, p in model.params.items()}
        loss_acc = 0.0
        for _ in range(batch):
            label = int(rng.integers(0, cfg.num_classes))
            x0 = templates[label] + 0.1 * rng.standard_normal(model.sample_shape)
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(model.sample_shape)
            x_t = forward_diffuse(x0, t, eps, sched)
            cond = model.null_label if rng.random() < label_dropout else label
            pred, cache = forward_cached(model, x_t, t, cond)
            diff = pred - eps
            loss_acc += float(np.mean(diff * diff))
            grads = backward(model, cache, (2.0 / diff.size) * diff)
            for name, g in grads.items():
                total[name] += g
        losses.append(loss_acc / batch)
        for name in model.params:
            model.params[name] -= (lr / batch) * total[name]
        model._rebuild_weight_cache()
    for name in model.params:
        model.params[name] = snap_f32(model.params[name])
    model._rebuild_weight_cache()
    return losses
