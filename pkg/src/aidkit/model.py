"""Toy conditional noise predictor with hand-written gradients.

Images are 16x16 in [-1, 1], cut into sixteen 4x4 patches. Each patch is a
token; tokens pass through pre-norm transformer blocks, each with
self-attention, cross-attention to the condition tokens, and a tanh MLP.
Conditions are rows of a learned class table (``n_cond`` tokens per class).

Two forward paths exist. :func:`forward` runs one image and routes every
attention layer through a :class:`~aidkit.attention.ProcessorSelector`; it is
what the samplers use. :func:`loss_and_grads` runs a batch with plain
attention and backpropagates by hand.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import attention as attn
from .errors import ArchiveError, ConfigError, DimensionError, TrainingError
from .numerics import SeededRng
from .scheduler import NoiseSchedule, add_noise

IMAGE_SIZE = 16
PATCH = 4
N_TOKENS = (IMAGE_SIZE // PATCH) ** 2
PATCH_DIM = PATCH * PATCH
LN_EPS = 1e-5
RESIDUAL_INIT_SCALE = 0.1

CLASS_NAMES = ("circle", "ring", "square", "cross", "hbar", "vbar")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    n_blocks: int = 2
    hidden: int = 32
    n_classes: int = len(CLASS_NAMES)
    n_cond: int = 2
    train_steps: int = 100


class DenoiserWeights:
    """Named float64 parameter arrays plus the config they were built for."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> "DenoiserWeights":
        return DenoiserWeights(self.config, {k: np.zeros_like(v) for k, v in self.params.items()})

    def attention(self, block: int, kind: str) -> attn.AttentionParams:
        p = f"blocks.{block}.{kind}_attn."
        return attn.AttentionParams(self[p + "w_q"], self[p + "w_k"], self[p + "w_v"])

    def condition(self, label: int) -> "ConditionEmbedding":
        return ConditionEmbedding(self["class_embed"][label].copy(), CLASS_NAMES[label])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def digest(self) -> str:
        return hashlib.sha256(serialize_weights(self)).hexdigest()


@dataclass(frozen=True)
class ConditionEmbedding:
    tokens: np.ndarray
    source: str = "custom"

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f"condition tokens must be 2-D, got {self.tokens.shape}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed": (PATCH_DIM, d),
        "pos_embed": (N_TOKENS, d),
        "time_embed": (cfg.train_steps, d),
        "class_embed": (cfg.n_classes, cfg.n_cond, d),
    }
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        for kind in ("self", "cross"):
            for w in ("w_q", "w_k", "w_v"):
                shapes[f"{p}{kind}_attn.{w}"] = (d, d)
        for n in ("norm1", "norm2", "norm3"):
            shapes[f"{p}{n}.scale"] = (d,)
            shapes[f"{p}{n}.shift"] = (d,)
        shapes[p + "mlp.w1"] = (d, h)
        shapes[p + "mlp.w2"] = (h, d)
    shapes["patch_unembed"] = (d, PATCH_DIM)
    return shapes


def init_weights(cfg: ModelConfig, rng: SeededRng) -> DenoiserWeights:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            params[name] = np.ones(shape)
        elif name.endswith(".shift"):
            params[name] = np.zeros(shape)
        elif name in ("pos_embed", "time_embed"):
            params[name] = 0.1 * rng.normal(shape)
        elif name == "class_embed":
            params[name] = rng.normal(shape)
        else:
            params[name] = rng.normal(shape) / np.sqrt(shape[0])
            if name.endswith(("w_v", "mlp.w2")):
                # residual branches start small so the stack begins near identity
                params[name] *= RESIDUAL_INIT_SCALE
    # start from eps_pred ~= z, which is already close to optimal at high noise
    params["patch_unembed"] = np.linalg.pinv(params["patch_embed"])
    return DenoiserWeights(cfg, params)


# -- image <-> tokens -------------------------------------------------------


def patchify(img: np.ndarray) -> np.ndarray:
    """(..., 16, 16) image -> (..., 16 tokens, 16 values), row-major patches."""
    if img.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise DimensionError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {img.shape}")
    g = IMAGE_SIZE // PATCH
    lead = img.shape[:-2]
    x = img.reshape(*lead, g, PATCH, g, PATCH)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, g * g, PATCH_DIM)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    if tokens.shape[-2:] != (N_TOKENS, PATCH_DIM):
        raise DimensionError(f"expected ({N_TOKENS}, {PATCH_DIM}) tokens, got {tokens.shape}")
    g = IMAGE_SIZE // PATCH
    lead = tokens.shape[:-2]
    x = tokens.reshape(*lead, g, g, PATCH, PATCH)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, IMAGE_SIZE, IMAGE_SIZE)


# -- layer pieces -----------------------------------------------------------


def layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def layer_norm_backward(dy, scale, cache):
    xhat, inv = cache
    dxhat = dy * scale
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def embed(z: np.ndarray, j, w: DenoiserWeights) -> np.ndarray:
    return patchify(z) @ w["patch_embed"] + w["pos_embed"] + w["time_embed"][j]


# -- single-image forward with attention routing -----------------------------


class KVRecord(dict):
    """Per-layer keys/values exported by a branch: ``{(block, kind): (k, v)}``."""


def forward(
    z: np.ndarray,
    cond: ConditionEmbedding,
    j: int,
    w: DenoiserWeights,
    proc: Optional[attn.ProcessorSelector] = None,
    peers: Optional[tuple[KVRecord, KVRecord]] = None,
    record: Optional[KVRecord] = None,
) -> np.ndarray:
    """Predict the noise in ``z`` at timestep ``j``.

    ``peers`` carries the two source branches' records from the same step;
    it is required whenever ``proc`` interpolates. If ``record`` is given,
    this branch's own keys/values are written into it.
    """
    proc = proc or attn.ProcessorSelector()
    if proc.interpolating and peers is None:
        raise ConfigError(f"attention mode {proc.mode!r} needs source peers")
    if cond.tokens.shape[1] != w.config.d:
        raise DimensionError(f"condition width {cond.tokens.shape[1]} != model width {w.config.d}")

    x = embed(z, j, w)
    for b in range(w.config.n_blocks):
        p = f"blocks.{b}."

        a, _ = layer_norm(x, w[p + "norm1.scale"], w[p + "norm1.shift"])
        sa = w.attention(b, "self")
        q, k, v = a @ sa.w_q, a @ sa.w_k, a @ sa.w_v
        if record is not None:
            record[(b, "self")] = (k, v)
        if proc.routes_self(j):
            (k1, v1), (km, vm) = peers[0][(b, "self")], peers[1][(b, "self")]
            x = x + attn.interpolated(proc.mode, q, k1, km, v1, vm, proc.t, k, v)
        else:
            x = x + attn.attend(q, k, v)

        a, _ = layer_norm(x, w[p + "norm2.scale"], w[p + "norm2.shift"])
        ca = w.attention(b, "cross")
        q, k, v = a @ ca.w_q, cond.tokens @ ca.w_k, cond.tokens @ ca.w_v
        if record is not None:
            record[(b, "cross")] = (k, v)
        if proc.guided:
            x = x + attn.guided_cross(q, k, v)
        elif proc.routes_cross(j):
            # fusion with the branch's own tokens is a self-attention concept;
            # cross-attention uses the unfused variant of the same family
            mode = proc.mode.replace("fused_", "")
            (k1, v1), (km, vm) = peers[0][(b, "cross")], peers[1][(b, "cross")]
            x = x + attn.interpolated(mode, q, k1, km, v1, vm, proc.t)
        else:
            x = x + attn.attend(q, k, v)

        a, _ = layer_norm(x, w[p + "norm3.scale"], w[p + "norm3.shift"])
        x = x + np.tanh(a @ w[p + "mlp.w1"]) @ w[p + "mlp.w2"]

    return unpatchify(x @ w["patch_unembed"])


def encoder_features(img: np.ndarray, w: DenoiserWeights) -> np.ndarray:
    """Mean-pooled tokens after the first block at timestep 0.

    The first block's cross-attention sublayer is skipped so features do not
    depend on any condition.
    """
    x = embed(img, 0, w)
    a, _ = layer_norm(x, w["blocks.0.norm1.scale"], w["blocks.0.norm1.shift"])
    sa = w.attention(0, "self")
    x = x + attn.attend(a @ sa.w_q, a @ sa.w_k, a @ sa.w_v)
    a, _ = layer_norm(x, w["blocks.0.norm3.scale"], w["blocks.0.norm3.shift"])
    x = x + np.tanh(a @ w["blocks.0.mlp.w1"]) @ w["blocks.0.mlp.w2"]
    return x.mean(axis=0)


# -- batched training path ---------------------------------------------------


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _attn_fwd(q, k, v):
    scale = 1.0 / np.sqrt(k.shape[-1])
    pm = _softmax(q @ np.swapaxes(k, -1, -2) * scale)
    return pm @ v, pm


def _attn_bwd(dout, q, k, v, pm):
    scale = 1.0 / np.sqrt(k.shape[-1])
    dv = np.swapaxes(pm, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    ds = pm * (dp - (dp * pm).sum(axis=-1, keepdims=True)) * scale
    return ds @ k, np.swapaxes(ds, -1, -2) @ q, dv


def _wgrad(a, d):
    """Sum over the batch of a^T d for stacked (B, n, i) and (B, n, o)."""
    return a.reshape(-1, a.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def forward_batch(w: DenoiserWeights, zt, labels, js, keep_cache=False):
    """Plain-attention forward for a batch. Returns token-space predictions."""
    cfg = w.config
    labels = np.asarray(labels)
    js = np.asarray(js)
    patches = patchify(zt)
    cond = w["class_embed"][labels]
    x = patches @ w["patch_embed"] + w["pos_embed"] + w["time_embed"][js][:, None, :]
    cache = {"patches": patches, "cond": cond, "labels": labels, "js": js, "blocks": []}
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        bc = {}
        a1, bc["ln1"] = layer_norm(x, w[p + "norm1.scale"], w[p + "norm1.shift"])
        q, k, v = a1 @ w[p + "self_attn.w_q"], a1 @ w[p + "self_attn.w_k"], a1 @ w[p + "self_attn.w_v"]
        o, pm = _attn_fwd(q, k, v)
        bc["self"] = (a1, q, k, v, pm)
        x = x + o

        a2, bc["ln2"] = layer_norm(x, w[p + "norm2.scale"], w[p + "norm2.shift"])
        q = a2 @ w[p + "cross_attn.w_q"]
        k, v = cond @ w[p + "cross_attn.w_k"], cond @ w[p + "cross_attn.w_v"]
        o, pm = _attn_fwd(q, k, v)
        bc["cross"] = (a2, q, k, v, pm)
        x = x + o

        a3, bc["ln3"] = layer_norm(x, w[p + "norm3.scale"], w[p + "norm3.shift"])
        g = np.tanh(a3 @ w[p + "mlp.w1"])
        bc["mlp"] = (a3, g)
        x = x + g @ w[p + "mlp.w2"]
        cache["blocks"].append(bc)

    cache["y"] = x
    out = x @ w["patch_unembed"]
    return (out, cache) if keep_cache else out


def _backward(w: DenoiserWeights, dout, cache) -> DenoiserWeights:
    cfg = w.config
    grads = w.zeros_like()
    gp = grads.params

    gp["patch_unembed"] += _wgrad(cache["y"], dout)
    dx = dout @ w["patch_unembed"].T
    dcond = np.zeros_like(cache["cond"])

    for b in reversed(range(cfg.n_blocks)):
        p = f"blocks.{b}."
        bc = cache["blocks"][b]

        a3, g = bc["mlp"]
        gp[p + "mlp.w2"] += _wgrad(g, dx)
        dh = (dx @ w[p + "mlp.w2"].T) * (1.0 - g * g)
        gp[p + "mlp.w1"] += _wgrad(a3, dh)
        da = dh @ w[p + "mlp.w1"].T
        dres, gp[p + "norm3.scale"], gp[p + "norm3.shift"] = layer_norm_backward(
            da, w[p + "norm3.scale"], bc["ln3"]
        )
        dx = dx + dres

        a2, q, k, v, pm = bc["cross"]
        dq, dk, dv = _attn_bwd(dx, q, k, v, pm)
        gp[p + "cross_attn.w_q"] += _wgrad(a2, dq)
        gp[p + "cross_attn.w_k"] += _wgrad(cache["cond"], dk)
        gp[p + "cross_attn.w_v"] += _wgrad(cache["cond"], dv)
        dcond += dk @ w[p + "cross_attn.w_k"].T + dv @ w[p + "cross_attn.w_v"].T
        da = dq @ w[p + "cross_attn.w_q"].T
        dres, gp[p + "norm2.scale"], gp[p + "norm2.shift"] = layer_norm_backward(
            da, w[p + "norm2.scale"], bc["ln2"]
        )
        dx = dx + dres

        a1, q, k, v, pm = bc["self"]
        dq, dk, dv = _attn_bwd(dx, q, k, v, pm)
        for name, dproj in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
            gp[p + "self_attn." + name] += _wgrad(a1, dproj)
        da = (
            dq @ w[p + "self_attn.w_q"].T
            + dk @ w[p + "self_attn.w_k"].T
            + dv @ w[p + "self_attn.w_v"].T
        )
        dres, gp[p + "norm1.scale"], gp[p + "norm1.shift"] = layer_norm_backward(
            da, w[p + "norm1.scale"], bc["ln1"]
        )
        dx = dx + dres

    gp["patch_embed"] += _wgrad(cache["patches"], dx)
    gp["pos_embed"] += dx.sum(axis=0)
    np.add.at(gp["time_embed"], cache["js"], dx.sum(axis=1))
    np.add.at(gp["class_embed"], cache["labels"], dcond)
    return grads


def batch_loss(w: DenoiserWeights, x0, labels, eps, js, sched: NoiseSchedule) -> float:
    zt = np.stack([add_noise(x, e, int(j), sched) for x, e, j in zip(x0, eps, js)])
    out = forward_batch(w, zt, labels, js)
    return float(np.mean((out - patchify(eps)) ** 2))


def loss_and_grads(batch, w: DenoiserWeights, sched: Optional[NoiseSchedule] = None):
    """MSE between predicted and true noise, with exact gradients.

    ``batch`` is ``(x0, labels, eps, js)`` with ``x0`` and ``eps`` shaped
    (B, 16, 16). The loss is a mean over every pixel of every item.
    """
    sched = sched or NoiseSchedule(w.config.train_steps)
    x0, labels, eps, js = batch
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape or x0.ndim != 3:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} must match as (B, 16, 16)")
    zt = np.stack([add_noise(x, e, int(j), sched) for x, e, j in zip(x0, eps, js)])
    out, cache = forward_batch(w, zt, labels, js, keep_cache=True)
    diff = out - patchify(eps)
    loss = float(np.mean(diff * diff))
    grads = _backward(w, 2.0 * diff / diff.size, cache)
    return loss, grads


# -- synthetic dataset -------------------------------------------------------


@dataclass
class ShapeDataset:
    images: np.ndarray  # (N, 16, 16) in [-1, 1]
    labels: np.ndarray  # (N,) class ids
    seed: int

    def __len__(self):
        return len(self.labels)


def render_shape(label: int, params: np.ndarray) -> np.ndarray:
    """Draw one shape; ``params`` are four uniforms in [0, 1) controlling placement."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    cx = 5.0 + 5.0 * params[0]
    cy = 5.0 + 5.0 * params[1]
    size = params[2]
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    name = CLASS_NAMES[label]
    if name == "circle":
        mask = r <= 2.5 + 2.0 * size
    elif name == "ring":
        mask = np.abs(r - (3.0 + 1.5 * size)) <= 0.8
    elif name == "square":
        s = 2.0 + 2.0 * size
        mask = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif name == "cross":
        arm = 3.0 + 2.0 * size
        mask = ((np.abs(dx) <= 0.8) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= 0.8) & (np.abs(dx) <= arm))
    elif name == "hbar":
        mask = (np.abs(dy) <= 1.0) & (np.abs(dx) <= 4.0 + 3.0 * size)
    elif name == "vbar":
        mask = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 4.0 + 3.0 * size)
    else:  # pragma: no cover
        raise ConfigError(f"unknown class {label}")
    return np.where(mask, 1.0, -1.0)


def make_dataset(n_per_class: int = 200, seed: int = 0) -> ShapeDataset:
    rng = SeededRng(seed)
    n_classes = len(CLASS_NAMES)
    labels = np.tile(np.arange(n_classes), n_per_class)
    params = rng.uniform((len(labels), 4))
    images = np.stack([render_shape(int(c), p) for c, p in zip(labels, params)])
    return ShapeDataset(images, labels, seed)


# -- training ----------------------------------------------------------------

HELD_OUT_SEED_OFFSET = 0x5EED


def sample_batch(rng: SeededRng, data: ShapeDataset, batch_size: int, train_steps: int):
    idx = rng.integers(len(data), batch_size)
    js = rng.integers(train_steps, batch_size)
    eps = rng.normal((batch_size, IMAGE_SIZE, IMAGE_SIZE))
    return data.images[idx], data.labels[idx], eps, js


def held_out_batch(seed: int, cfg: ModelConfig, batch_size: int = 64):
    data = make_dataset(n_per_class=max(1, batch_size // cfg.n_classes + 1), seed=seed + HELD_OUT_SEED_OFFSET)
    rng = SeededRng(seed + HELD_OUT_SEED_OFFSET)
    return sample_batch(rng, data, batch_size, cfg.train_steps)


def train(
    dataset: ShapeDataset,
    steps: int = 5000,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 16,
    cfg: ModelConfig = ModelConfig(),
    callback=None,
) -> DenoiserWeights:
    """Plain SGD on the noise-prediction loss.

    ``callback(step, loss)`` is called after every update when given.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    rng = SeededRng(seed)
    w = init_weights(cfg, rng)
    sched = NoiseSchedule(cfg.train_steps)
    for step in range(steps):
        batch = sample_batch(rng, dataset, batch_size, cfg.train_steps)
        # overflow shows up as a non-finite loss, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(batch, w, sched)
        if not np.isfinite(loss):
            raise TrainingError(step)
        for name, g in grads.params.items():
            w.params[name] -= lr * g
        if callback is not None:
            callback(step, loss)
    if not w.all_finite():
        raise TrainingError(steps, "weights became non-finite")
    return w


# -- checkpoint file ----------------------------------------------------------
#
# magic b"AIDKITW\0", u32 version, u32 record count, then per record:
# u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, f64 little-endian data.
# Scalar config fields are stored as 0-d records under "config.<field>".

MAGIC = b"AIDKITW\x00"
VERSION = 1


def serialize_weights(w: DenoiserWeights) -> bytes:
    records = [(f"config.{k}", np.array(float(v))) for k, v in vars(w.config).items()]
    records += list(w.params.items())
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_weights(blob: bytes) -> DenoiserWeights:
    if blob[:8] != MAGIC:
        raise ArchiveError("not an aidkit weight file")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ArchiveError(f"unsupported weight file version {version}")
        off = 16
        config, params = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            if name.startswith("config."):
                config[name[7:]] = int(arr)
            else:
                params[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"truncated or corrupt weight file: {exc}") from exc
    if off != len(blob):
        raise ArchiveError("trailing bytes in weight file")
    cfg = ModelConfig(**config)
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ArchiveError("weight records do not match the stored config")
    return DenoiserWeights(cfg, params)


def save_weights(w: DenoiserWeights, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize_weights(w))
    tmp.replace(path)


def load_weights(path) -> DenoiserWeights:
    return deserialize_weights(Path(path).read_bytes())
