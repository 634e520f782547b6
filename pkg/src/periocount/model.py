"""Visual stack: video encoder, periodicity transformer, projector, text encoder.

All modules are built from the same primitives: affine layers (optionally
carrying a low-rank adapter), multi-head attention over whole 2-d
matrices, and post-norm transformer blocks. Parameters are exposed as a
flat name -> Tensor mapping so training stages can select ownership
groups and checkpoints can address tensors by name.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "ConfigurationError",
    "Affine",
    "LayerNorm",
    "MultiHeadAttention",
    "FeedForward",
    "EncoderBlock",
    "QFormerBlock",
    "VideoEncoder",
    "PeriodicityTransformer",
    "Projector",
    "TextEncoder",
    "similarity_g",
    "resample_matrix",
]


class ConfigurationError(ValueError):
    """Model dimensions or adapter settings are inconsistent."""


def _init_weight(rng, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))


class Affine:
    """y = x W + b, with an optional additive low-rank adapter path.

    The adapter computes scale * (x A) B with B zero-initialized, so a
    freshly attached adapter leaves the layer's output bit-identical.
    """

    def __init__(self, d_in: int, d_out: int, rng):
        self.d_in, self.d_out = d_in, d_out
        self.w = Tensor(_init_weight(rng, d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros((1, d_out)), requires_grad=True)
        self.adapter_a = None
        self.adapter_b = None
        self.adapter_scale = 0.0

    def attach_adapter(self, rank: int, scale: float, rng):
        if rank < 1 or rank > min(self.d_in, self.d_out):
            raise ConfigurationError(
                f"adapter rank {rank} not in 1..min({self.d_in},{self.d_out})"
            )
        self.adapter_a = Tensor(_init_weight(rng, self.d_in, rank), requires_grad=True)
        self.adapter_b = Tensor(np.zeros((rank, self.d_out)), requires_grad=True)
        self.adapter_scale = float(scale)

    def __call__(self, x) -> Tensor:
        out = nm.add(nm.matmul(x, self.w), self.b)
        if self.adapter_a is not None:
            bypass = nm.matmul(nm.matmul(x, self.adapter_a), self.adapter_b)
            out = nm.add(out, nm.mul(bypass, self.adapter_scale))
        return out

    def named_params(self):
        out = {"w": self.w, "b": self.b}
        if self.adapter_a is not None:
            out["adapter_a"] = self.adapter_a
            out["adapter_b"] = self.adapter_b
        return out


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones((1, d)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, d)), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta)

    def named_params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    """Multi-head scaled dot-product attention over 2-d sequences.

    kv_dim lets the key/value source live in a different width than the
    query stream (the periodicity transformer reads D_V features with
    D_Z queries).
    """

    def __init__(self, d_model: int, heads: int, rng, kv_dim: int | None = None):
        if d_model % heads != 0:
            raise ConfigurationError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model, self.heads = d_model, heads
        self.d_head = d_model // heads
        kv = d_model if kv_dim is None else kv_dim
        self.wq = Affine(d_model, d_model, rng)
        self.wk = Affine(kv, d_model, rng)
        self.wv = Affine(kv, d_model, rng)
        self.wo = Affine(d_model, d_model, rng)

    def __call__(self, x, kv=None, mask=None) -> Tensor:
        source = x if kv is None else kv
        q, k, v = self.wq(x), self.wk(source), self.wv(source)
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            outs.append(
                nm.scaled_dot_attention(
                    nm.narrow(q, 1, lo, hi),
                    nm.narrow(k, 1, lo, hi),
                    nm.narrow(v, 1, lo, hi),
                    mask=mask,
                )
            )
        return self.wo(nm.concat(outs, axis=1))

    def named_params(self):
        out = {}
        for tag, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, t in layer.named_params().items():
                out[f"{tag}.{k}"] = t
        return out

    def projection_layers(self):
        return (self.wq, self.wk, self.wv, self.wo)


class FeedForward:
    def __init__(self, d: int, rng, hidden: int | None = None):
        h = 2 * d if hidden is None else hidden
        self.f1 = Affine(d, h, rng)
        self.f2 = Affine(h, d, rng)

    def __call__(self, x) -> Tensor:
        return self.f2(nm.gelu(self.f1(x)))

    def named_params(self):
        out = {}
        for tag, layer in (("f1", self.f1), ("f2", self.f2)):
            for k, t in layer.named_params().items():
                out[f"{tag}.{k}"] = t
        return out


class EncoderBlock:
    """Post-norm block: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, d: int, heads: int, rng):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)
        self.ln2 = LayerNorm(d)

    def __call__(self, x, mask=None) -> Tensor:
        x = self.ln1(nm.add(x, self.attn(x, mask=mask)))
        return self.ln2(nm.add(x, self.ffn(x)))

    def named_params(self):
        out = {}
        for tag, sub in (("attn", self.attn), ("ln1", self.ln1), ("ffn", self.ffn), ("ln2", self.ln2)):
            for k, t in sub.named_params().items():
                out[f"{tag}.{k}"] = t
        return out


class QFormerBlock:
    """Query self-attention, cross-attention into features, feed-forward."""

    def __init__(self, d: int, heads: int, kv_dim: int, rng):
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng, kv_dim=kv_dim)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)
        self.ln3 = LayerNorm(d)

    def __call__(self, z, features) -> Tensor:
        z = self.ln1(nm.add(z, self.self_attn(z)))
        z = self.ln2(nm.add(z, self.cross_attn(z, kv=features)))
        return self.ln3(nm.add(z, self.ffn(z)))

    def named_params(self):
        out = {}
        subs = (
            ("self_attn", self.self_attn),
            ("ln1", self.ln1),
            ("cross_attn", self.cross_attn),
            ("ln2", self.ln2),
            ("ffn", self.ffn),
            ("ln3", self.ln3),
        )
        for tag, sub in subs:
            for k, t in sub.named_params().items():
                out[f"{tag}.{k}"] = t
        return out


def resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Averaging matrix mapping n_in rows to n_out rows.

    Output row i averages the input segment [floor(i*n_in/n_out),
    floor((i+1)*n_in/n_out)), widened to at least one element; works for
    both down- and up-sampling and is the identity when sizes match.
    """
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = max(((i + 1) * n_in) // n_out, lo + 1)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def sinusoid_positions(n: int, d: int, min_period: float = 2.0,
                       max_period: float = 64.0, amplitude: float = 1.0) -> np.ndarray:
    """n x d sin/cos position table with periods spanning [min, max] frames.

    Counting needs rows at the same cycle phase to stay distinguishable,
    so the period range is matched to the cycle lengths that actually
    occur rather than the usual huge-corpus spread.
    """
    table = np.zeros((n, d))
    pairs = d // 2
    t = np.arange(n)[:, None]
    span = max_period / min_period
    periods = min_period * span ** (np.arange(pairs) / max(pairs - 1, 1))
    ang = 2.0 * np.pi * t / periods[None, :]
    table[:, 0:2 * pairs:2] = np.sin(ang)
    table[:, 1:2 * pairs:2] = np.cos(ang)
    return amplitude * table


class VideoEncoder:
    """Patchify frames, embed patches, run temporal attention, pool to m rows.

    Each frame is cut into patch*patch tiles which are linearly embedded
    and mean-pooled into one vector per frame; two self-attention blocks
    mix information across time; the frame axis is then resampled to a
    fixed m so downstream shapes do not depend on clip length.
    """

    def __init__(self, rng, frame_h: int = 16, frame_w: int = 16, patch: int = 4,
                 max_frames: int = 32, m: int = 32, d_v: int = 64, heads: int = 4,
                 layers: int = 2):
        if frame_h % patch or frame_w % patch:
            raise ConfigurationError(f"frame {frame_h}x{frame_w} not divisible by patch {patch}")
        self.frame_h, self.frame_w, self.patch = frame_h, frame_w, patch
        self.max_frames, self.m, self.d_v = max_frames, m, d_v
        self.patches_per_frame = (frame_h // patch) * (frame_w // patch)
        self.patch_embed = Affine(patch * patch, d_v, rng)
        self.pos_patch = Tensor(rng.normal(0, 0.02, (self.patches_per_frame, d_v)), requires_grad=True)
        # Frame tags must survive against content features (std ~0.13) or
        # same-phase frames from different cycles become indistinguishable
        # downstream, which caps counting accuracy.
        self.pos_time = Tensor(
            sinusoid_positions(max_frames, d_v, amplitude=0.2), requires_grad=True)
        self.blocks = [EncoderBlock(d_v, heads, rng) for _ in range(layers)]

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        t, h, w = frames.shape
        p = self.patch
        tiles = frames.reshape(t, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
        return tiles.reshape(t * self.patches_per_frame, p * p)

    def __call__(self, frames: np.ndarray) -> Tensor:
        if frames.ndim != 3 or frames.shape[1:] != (self.frame_h, self.frame_w):
            raise nm.DimensionError(
                f"expected T x {self.frame_h} x {self.frame_w} frames, got {frames.shape}"
            )
        t = frames.shape[0]
        if not 1 <= t <= self.max_frames:
            raise nm.DimensionError(f"clip length {t} not in 1..{self.max_frames}")

        x = self.patch_embed(Tensor(self._patchify(np.asarray(frames, dtype=np.float64))))
        npf = self.patches_per_frame
        # Constant routing matrices let position embeddings stay 2-d while
        # being tiled per frame / repeated per patch.
        tile_patch = np.tile(np.eye(npf), (t, 1))
        repeat_time = np.repeat(np.eye(t), npf, axis=0)
        x = nm.add(x, nm.matmul(Tensor(tile_patch), self.pos_patch))
        x = nm.add(x, nm.matmul(Tensor(repeat_time), nm.narrow(self.pos_time, 0, 0, t)))

        frame_pool = np.repeat(np.eye(t) / npf, npf, axis=1)
        x = nm.matmul(Tensor(frame_pool), x)
        for block in self.blocks:
            x = block(x)
        return nm.matmul(Tensor(resample_matrix(self.m, t)), x)

    def named_params(self):
        out = {"pos_patch": self.pos_patch, "pos_time": self.pos_time}
        for k, tns in self.patch_embed.named_params().items():
            out[f"patch_embed.{k}"] = tns
        for i, block in enumerate(self.blocks):
            for k, tns in block.named_params().items():
                out[f"block{i}.{k}"] = tns
        return out

    def attention_layers(self):
        for block in self.blocks:
            yield from block.attn.projection_layers()


class PeriodicityTransformer:
    """Learnable queries attend over video features to distill periodicity."""

    def __init__(self, rng, n_queries: int = 8, d_z: int = 64, d_v: int = 64,
                 m: int = 32, heads: int = 4, layers: int = 2,
                 use_feature_positions: bool = True):
        self.n_queries, self.d_z = n_queries, d_z
        self.use_feature_positions = use_feature_positions
        self.queries = Tensor(rng.normal(0, 0.02, (n_queries, d_z)), requires_grad=True)
        # Sinusoid start, trainable: encoder rows come out near unit std,
        # so a 0.02-noise table would leave the queries effectively blind
        # to temporal order.
        self.pos_features = Tensor(
            sinusoid_positions(m, d_v, amplitude=0.5), requires_grad=True)
        self.blocks = [QFormerBlock(d_z, heads, kv_dim=d_v, rng=rng) for _ in range(layers)]

    def __call__(self, features) -> Tensor:
        if self.use_feature_positions:
            features = nm.add(features, self.pos_features)
        z = self.queries
        for block in self.blocks:
            z = block(z, features)
        return z

    def named_params(self):
        out = {"queries": self.queries, "pos_features": self.pos_features}
        for i, block in enumerate(self.blocks):
            for k, tns in block.named_params().items():
                out[f"block{i}.{k}"] = tns
        return out


class Projector:
    """Row-wise affine map from periodic representations to LM embeddings."""

    def __init__(self, rng, d_z: int = 64, d_l: int = 128):
        self.affine = Affine(d_z, d_l, rng)

    def __call__(self, z) -> Tensor:
        return self.affine(z)

    def named_params(self):
        return {f"affine.{k}": t for k, t in self.affine.named_params().items()}


class TextEncoder:
    """Mean-pooled self-attention encoder producing a unit-norm embedding."""

    def __init__(self, rng, vocab_size: int, d_z: int = 64, heads: int = 4,
                 layers: int = 2, max_len: int = 256):
        self.max_len = max_len
        self.table = Tensor(rng.normal(0, 0.02, (vocab_size, d_z)), requires_grad=True)
        self.pos = Tensor(rng.normal(0, 0.02, (max_len, d_z)), requires_grad=True)
        self.blocks = [EncoderBlock(d_z, heads, rng) for _ in range(layers)]

    def __call__(self, ids) -> Tensor:
        if len(ids) == 0:
            raise nm.ParameterError("cannot encode empty text")
        if len(ids) > self.max_len:
            raise nm.DimensionError(f"text length {len(ids)} exceeds maximum {self.max_len}")
        x = nm.add(nm.embedding_rows(self.table, ids), nm.narrow(self.pos, 0, 0, len(ids)))
        for block in self.blocks:
            x = block(x)
        return nm.l2_normalize(nm.mean(x, axis=0, keepdims=True))

    def named_params(self):
        out = {"table": self.table, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            for k, tns in block.named_params().items():
                out[f"block{i}.{k}"] = tns
        return out


def similarity_g(z, e) -> Tensor:
    """Max over rows of cosine(row, e); rows with zero norm contribute -1."""
    z, e = nm.as_tensor(z), nm.as_tensor(e)
    if e.data.ndim == 1:
        e = nm.reshape(e, (1, e.data.shape[0]))
    if z.data.shape[1] != e.data.shape[1]:
        raise nm.DimensionError(f"width mismatch: {z.data.shape} vs {e.data.shape}")
    dot = nm.matmul(z, nm.transpose(e))
    nz = nm.sqrt(nm.add(nm.tsum(nm.mul(z, z), axis=1, keepdims=True), 1e-12))
    ne = nm.sqrt(nm.add(nm.tsum(nm.mul(e, e)), 1e-12))
    cos = nm.div(nm.div(dot, nz), ne)
    keep = (np.linalg.norm(z.data, axis=1, keepdims=True) > 0.0).astype(z.data.dtype)
    # Zero-norm rows have no direction; pin their score to the floor of
    # the cosine range instead of propagating 0/0.
    cos = nm.add(nm.mul(cos, Tensor(keep)), Tensor(keep - 1.0))
    return nm.vecmax(cos)
