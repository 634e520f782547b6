"""Command-line surface: config files, checkpoints, and run orchestration.

Subcommands: gen-data, train, eval, count, grad-check,
inspect-checkpoint. Every command is deterministic given its config and
seeds. Exit codes: 0 success, 1 usage/config error, 2 data or format
error, 3 numeric abort.

Config is a flat key=value text file; any key can also be overridden on
the command line as ``--key value``. The ``profile`` key picks a preset
(desk or paper) that the remaining keys refine.
"""

import os


def _cap_threads():
    cap = os.environ.get("PERIOCOUNT_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()  # must precede the numpy import below

import argparse
import dataclasses
import hashlib
import struct
import sys
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .eval import EvalError, ProtocolSpec, count_video, render_report, run_protocol
from .lm import DecoderLM, Vocabulary
from .model import (
    Affine,
    ConfigurationError,
    EncoderBlock,
    FeedForward,
    MultiHeadAttention,
    PeriodicityTransformer,
    QFormerBlock,
    TextEncoder,
    VideoEncoder,
    similarity_g,
)
from .numerics import Tensor
from .plots import plot_loss_curve, render_eval_figures
from .synthdata import (
    DatasetCompositionError,
    DatasetFormatError,
    SpecError,
    make_dataset,
    read_dataset,
    write_dataset,
)
from .training import (
    CountingPipeline,
    NumericAbort,
    PipelineConfig,
    StageOrderError,
    StagePlan,
    loss_llm,
    loss_ptc,
    loss_vtc,
    train_stage,
)

__all__ = [
    "ConfigError",
    "CheckpointFormatError",
    "UsageError",
    "RunConfig",
    "load_config",
    "config_digest",
    "pipeline_from_config",
    "plans_from_config",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
    "grad_check_suite",
    "default_grad_cases",
    "main",
]


class ConfigError(ValueError):
    """Bad config key, value, or combination."""


class UsageError(ValueError):
    """Command line cannot be acted on."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes violate the format; offset names the position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    # Desk defaults run in float32: the calibrated end-to-end budget needs
    # it, and correctness checks run in high precision regardless.
    precision: str = "standard"
    # model dimensions
    m: int = 32
    d_v: int = 64
    n_queries: int = 8
    d_z: int = 64
    d_l: int = 128
    pt_layers: int = 2
    heads: int = 4
    lm_layers: int = 4
    lm_heads: int = 4
    context_length: int = 256
    adapter_rank: int = 16
    adapter_scale: float = 1.0
    adapter_targets: str = "both"
    # ablation switches
    include_description: bool = True
    count_token_answers: bool = False
    use_feature_positions: bool = True
    count_token_limit: int = 17
    lm_pretrain_steps: int = 400
    skip_stage2: bool = False
    # per-stage training plan (desk calibration; paper preset overrides)
    epochs1: int = 3
    epochs2: int = 6
    epochs3: int = 16
    batch1: int = 32
    batch2: int = 32
    batch3: int = 8
    lr1: float = 1e-3
    lr2: float = 1e-3
    lr3: float = 1e-3
    frames1: int = 16
    frames2: int = 16
    frames3: int = 32
    # data and seeds
    train_profile: str = "family-a"
    n_train: int = 2000
    n_eval: int = 200
    aperiodic_fraction: float = 0.1
    data_seed: int = 0
    model_seed: int = 0
    train_seed: int = 100
    split_seed: int = 1


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}

_PAPER_PRESET = {"n_queries": 64, "pt_layers": 12, "precision": "high",
                 "epochs1": 10, "epochs2": 50, "epochs3": 50,
                 "batch3": 32, "lr3": 3e-4}

# Keys that determine the trained artifact; eval-time knobs (n_eval,
# split_seed) and the preset label itself are excluded so a checkpoint
# stays loadable across evaluation settings.
_DIGEST_EXCLUDED = ("profile", "n_eval", "split_seed")

_ENUMS = {
    "profile": ("desk", "paper"),
    "precision": ("high", "standard"),
    "adapter_targets": ("both", "video", "lm"),
    "train_profile": ("family-a", "family-b"),
}

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    try:
        if kind == "bool" or kind is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[word]
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"config key {key!r} got {raw!r}, expected {kind}") from None


def parse_config_text(text: str):
    """Flat key=value lines; '#' comments and blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = body.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Resolve preset -> file -> command-line overrides, rejecting unknown keys."""
    file_kv = {}
    if path is not None:
        with open(path, "r", encoding="ascii") as fh:
            file_kv = parse_config_text(fh.read())
    overrides = dict(overrides or {})

    for source in (file_kv, overrides):
        for key in source:
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")

    profile = str(overrides.get("profile", file_kv.get("profile", "desk"))).strip()
    if profile not in _ENUMS["profile"]:
        raise ConfigError(f"unknown profile {profile!r}, expected one of {_ENUMS['profile']}")

    values = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    values["profile"] = profile
    if profile == "paper":
        values.update(_PAPER_PRESET)
    for source in (file_kv, overrides):
        for key, raw in source.items():
            values[key] = raw if key == "profile" else _coerce(key, str(raw))

    cfg = RunConfig(**values)
    for key, allowed in _ENUMS.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"config key {key!r} must be one of {allowed}")
    for key in ("n_train", "n_eval", "batch1", "batch2", "batch3"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"config key {key!r} must be >= 1")
    for key in ("epochs1", "epochs2", "epochs3", "lm_pretrain_steps"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"config key {key!r} must be >= 0")
    if not 0.0 <= cfg.aperiodic_fraction <= 1.0:
        raise ConfigError("aperiodic_fraction must lie in [0, 1]")
    return cfg


def config_digest(cfg: RunConfig) -> bytes:
    """sha256 over the canonical text of the artifact-determining keys."""
    lines = [
        f"{name}={getattr(cfg, name)!r}"
        for name in sorted(_FIELDS)
        if name not in _DIGEST_EXCLUDED
    ]
    return hashlib.sha256("\n".join(lines).encode("ascii")).digest()


def pipeline_from_config(cfg: RunConfig) -> CountingPipeline:
    pc = PipelineConfig(
        m=cfg.m, d_v=cfg.d_v, n_queries=cfg.n_queries, d_z=cfg.d_z, d_l=cfg.d_l,
        pt_layers=cfg.pt_layers, heads=cfg.heads, lm_layers=cfg.lm_layers,
        lm_heads=cfg.lm_heads, context_length=cfg.context_length,
        adapter_rank=cfg.adapter_rank, adapter_scale=cfg.adapter_scale,
        adapter_targets=cfg.adapter_targets,
        count_token_answers=cfg.count_token_answers,
        include_description=cfg.include_description,
        use_feature_positions=cfg.use_feature_positions,
        count_token_limit=cfg.count_token_limit,
        lm_pretrain_steps=cfg.lm_pretrain_steps,
    )
    return CountingPipeline(pc, seed=cfg.model_seed)


def plans_from_config(cfg: RunConfig):
    return {
        1: StagePlan(1, cfg.epochs1, cfg.batch1, cfg.lr1, cfg.frames1),
        2: StagePlan(2, cfg.epochs2, cfg.batch2, cfg.lr2, cfg.frames2),
        3: StagePlan(3, cfg.epochs3, cfg.batch3, cfg.lr3, cfg.frames3),
    }


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"PCKP"
_CKPT_VERSION = 1


def _provenance_text(pipeline, ablate: str) -> str:
    stages = ",".join(f"{k}:{v}" for k, v in sorted(pipeline.completed.items()))
    return f"stages={stages or 'none'} ablate={ablate}"


def _parse_provenance(text: str):
    out = {"stages": {}, "ablate": "none"}
    for part in text.split():
        key, _, value = part.partition("=")
        if key == "ablate":
            out["ablate"] = value
        elif key == "stages" and value != "none":
            for item in value.split(","):
                stage, _, status = item.partition(":")
                out["stages"][int(stage)] = status
    return out


def save_checkpoint(path, pipeline, cfg: RunConfig, ablate: str = "none"):
    """Named tensors in sorted order; payloads little-endian in the active width."""
    width = np.dtype(nm.active_dtype()).itemsize
    blob = [struct.pack("<4sI", _CKPT_MAGIC, _CKPT_VERSION), config_digest(cfg),
            struct.pack("<B", width)]
    prov = _provenance_text(pipeline, ablate).encode("ascii")
    blob.append(struct.pack("<I", len(prov)))
    blob.append(prov)
    params = pipeline.named_params()
    blob.append(struct.pack("<I", len(params)))
    code = f"<f{width}"
    for name in sorted(params):
        data = params[name].data
        encoded = name.encode("ascii")
        blob.append(struct.pack("<I", len(encoded)))
        blob.append(encoded)
        blob.append(struct.pack("<I", data.ndim))
        blob.append(struct.pack(f"<{data.ndim}I", *data.shape))
        blob.append(np.ascontiguousarray(data, dtype=code).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.offset)
        piece = self.data[self.offset : self.offset + n]
        self.offset += n
        return piece

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Raw decode: (version, digest, width, provenance, {name: array})."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic, version = reader.unpack("<4sI", "header")
    if magic != _CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0)
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    digest = reader.take(32, "config digest")
    (width,) = reader.unpack("<B", "precision width")
    if width not in (4, 8):
        raise CheckpointFormatError(f"bad float width {width}", reader.offset - 1)
    (prov_len,) = reader.unpack("<I", "provenance length")
    provenance = reader.take(prov_len, "provenance").decode("ascii")
    (count,) = reader.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("ascii")
        (rank,) = reader.unpack("<I", "tensor rank")
        shape = reader.unpack(f"<{rank}I", "tensor extents") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(size * width, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=f"<f{width}").reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise CheckpointFormatError("trailing bytes after last tensor", reader.offset)
    return version, digest, width, provenance, tensors


def load_checkpoint(path, cfg: RunConfig, force: bool = False):
    """Rebuild a pipeline from a checkpoint; returns (pipeline, provenance dict)."""
    _, digest, width, prov_text, tensors = read_checkpoint(path)
    if digest != config_digest(cfg) and not force:
        raise CheckpointFormatError(
            "checkpoint was written under a different config digest "
            f"({digest.hex()[:12]}… vs {config_digest(cfg).hex()[:12]}…); "
            "pass --force to load anyway", 8)
    if width != np.dtype(nm.active_dtype()).itemsize:
        raise CheckpointFormatError(
            f"checkpoint holds {width}-byte floats but precision "
            f"{nm.get_precision()!r} is active", 8)
    pipeline = pipeline_from_config(cfg)
    if any(".adapter_" in name for name in tensors):
        pipeline.enable_adapters()
    params = pipeline.named_params()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointFormatError(
            f"tensor names disagree with the config (missing {missing[:3]}, "
            f"unexpected {extra[:3]})", 8)
    for name, tensor in params.items():
        saved = tensors[name]
        if saved.shape != tensor.data.shape:
            raise CheckpointFormatError(
                f"tensor {name} has shape {saved.shape}, expected {tensor.data.shape}", 8)
        tensor.data = saved.astype(nm.active_dtype(), copy=True)
    provenance = _parse_provenance(prov_text)
    pipeline.completed.update(provenance["stages"])
    return pipeline, provenance


# ---------------------------------------------------------------------------
# Gradient-check harness


def _contract(out, rng):
    """Random linear functional; turns any tensor-valued op into a scalar."""
    w = Tensor(rng.normal(size=out.data.shape))
    return lambda t: nm.tsum(nm.mul(t, w))


def default_grad_cases():
    """(name, fn) pairs; each fn draws one random input and returns the
    max relative error between analytic and central-difference gradients."""
    cases = []

    def case(name):
        def register(fn):
            cases.append((name, fn))
            return fn
        return register

    def rand(rng, *shape):
        return Tensor(rng.normal(size=shape))

    @case("add")
    def _(rng):
        y, x = rand(rng, 2, 3), rand(rng, 2, 3)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(nm.add(t, y)), x)

    @case("sub")
    def _(rng):
        y, x = rand(rng, 2, 3), rand(rng, 2, 3)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(nm.sub(y, t)), x)

    @case("mul")
    def _(rng):
        y, x = rand(rng, 2, 3), rand(rng, 2, 3)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(nm.mul(t, y)), x)

    @case("div")
    def _(rng):
        x = rand(rng, 2, 3)
        y = Tensor(rng.normal(size=(2, 3)) + np.where(rng.random((2, 3)) < 0.5, -3.0, 3.0))
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.div(t, y)), x),
                   nm.grad_check(lambda t: c(nm.div(x, t)), y))

    @case("exp/log/sqrt")
    def _(rng):
        x = Tensor(np.abs(rng.normal(size=(2, 3))) + 0.5)
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.exp(nm.mul(t, 0.3))), x),
                   nm.grad_check(lambda t: c(nm.log(t)), x),
                   nm.grad_check(lambda t: c(nm.sqrt(t)), x))

    @case("tanh/gelu/sigmoid")
    def _(rng):
        x = rand(rng, 2, 4)
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.tanh(t)), x),
                   nm.grad_check(lambda t: c(nm.gelu(t)), x),
                   nm.grad_check(lambda t: c(nm.sigmoid(t)), x))

    @case("pow/neg/clip")
    def _(rng):
        x = rand(rng, 2, 3)
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.pow_const(t, 2.0)), x),
                   nm.grad_check(lambda t: c(nm.neg(t)), x),
                   nm.grad_check(lambda t: c(nm.clip(t, -6.0, 6.0)), x))

    @case("matmul")
    def _(rng):
        a, b = rand(rng, 2, 3), rand(rng, 3, 2)
        out_c = _contract(Tensor(np.zeros((2, 2))), rng)
        return max(nm.grad_check(lambda t: out_c(nm.matmul(t, b)), a),
                   nm.grad_check(lambda t: out_c(nm.matmul(a, t)), b))

    @case("transpose/reshape")
    def _(rng):
        x = rand(rng, 2, 3)
        c = _contract(Tensor(np.zeros((3, 2))), rng)
        return max(nm.grad_check(lambda t: c(nm.transpose(t)), x),
                   nm.grad_check(lambda t: c(nm.reshape(t, (3, 2))), x))

    @case("narrow/concat")
    def _(rng):
        x, y = rand(rng, 2, 4), rand(rng, 2, 4)
        c = _contract(Tensor(np.zeros((2, 2))), rng)
        c2 = _contract(Tensor(np.zeros((4, 4))), rng)
        return max(nm.grad_check(lambda t: c(nm.narrow(t, 1, 1, 3)), x),
                   nm.grad_check(lambda t: c2(nm.concat([t, y], axis=0)), x))

    @case("sum/mean")
    def _(rng):
        x = rand(rng, 3, 4)
        c = _contract(Tensor(np.zeros((3, 1))), rng)
        return max(nm.grad_check(lambda t: nm.tsum(t), x),
                   nm.grad_check(lambda t: c(nm.mean(t, axis=1, keepdims=True)), x))

    @case("embedding-rows")
    def _(rng):
        table = rand(rng, 5, 3)
        ids = [0, 2, 2, 4]  # repeats exercise gradient accumulation
        c = _contract(Tensor(np.zeros((4, 3))), rng)
        return nm.grad_check(lambda t: c(nm.embedding_rows(t, ids)), table)

    @case("vecmax")
    def _(rng):
        x = Tensor(rng.normal(size=(1, 6)) + np.arange(6) * 2.0)
        return nm.grad_check(lambda t: nm.vecmax(t), x)

    @case("softmax")
    def _(rng):
        x = rand(rng, 2, 5)
        tau = Tensor(np.full((1, 1), 0.7))
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.softmax(t, tau)), x),
                   nm.grad_check(lambda t: c(nm.softmax(x, t)), tau))

    @case("cross-entropy")
    def _(rng):
        x = rand(rng, 2, 4)
        target = np.eye(4)[rng.integers(0, 4, size=2)]
        return nm.grad_check(
            lambda t: nm.cross_entropy(Tensor(target), nm.rows_softmax(t)), x)

    @case("binary-cross-entropy")
    def _(rng):
        g = Tensor(np.full((), float(rng.normal())))
        y = float(rng.integers(0, 2))
        return nm.grad_check(lambda t: nm.binary_cross_entropy(y, nm.sigmoid(t)), g)

    @case("scaled-dot-attention")
    def _(rng):
        q, k, v = rand(rng, 2, 4), rand(rng, 3, 4), rand(rng, 3, 4)
        mask = np.zeros((2, 3))
        mask[0, 2] = -np.inf
        c = _contract(Tensor(np.zeros((2, 4))), rng)
        return max(
            nm.grad_check(lambda t: c(nm.scaled_dot_attention(t, k, v, mask)), q),
            nm.grad_check(lambda t: c(nm.scaled_dot_attention(q, t, v, mask)), k),
            nm.grad_check(lambda t: c(nm.scaled_dot_attention(q, k, t, mask)), v))

    @case("layer-norm")
    def _(rng):
        x, gamma, beta = rand(rng, 3, 4), rand(rng, 1, 4), rand(rng, 1, 4)
        c = _contract(x, rng)
        return max(nm.grad_check(lambda t: c(nm.layer_norm(t, gamma, beta)), x),
                   nm.grad_check(lambda t: c(nm.layer_norm(x, t, beta)), gamma),
                   nm.grad_check(lambda t: c(nm.layer_norm(x, gamma, t)), beta))

    @case("l2-normalize")
    def _(rng):
        x = Tensor(rng.normal(size=(2, 4)) + 0.3)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(nm.l2_normalize(t)), x)

    @case("affine")
    def _(rng):
        layer = Affine(3, 2, rng)
        x = rand(rng, 2, 3)
        c = _contract(Tensor(np.zeros((2, 2))), rng)
        return max(nm.grad_check(lambda t: c(_hold(layer, "w", t) and layer(x)), layer.w),
                   nm.grad_check(lambda t: c(_hold(layer, "b", t) and layer(x)), layer.b))

    @case("adapter")
    def _(rng):
        layer = Affine(3, 3, rng)
        layer.attach_adapter(rank=2, scale=0.5, rng=rng)
        layer.adapter_b.data = rng.normal(size=layer.adapter_b.data.shape)
        x = rand(rng, 2, 3)
        c = _contract(Tensor(np.zeros((2, 3))), rng)
        return max(
            nm.grad_check(lambda t: c(_hold(layer, "adapter_a", t) and layer(x)),
                          layer.adapter_a),
            nm.grad_check(lambda t: c(_hold(layer, "adapter_b", t) and layer(x)),
                          layer.adapter_b))

    @case("multi-head-attention")
    def _(rng):
        attn = MultiHeadAttention(4, 2, rng)
        x = rand(rng, 3, 4)
        c = _contract(Tensor(np.zeros((3, 4))), rng)
        return nm.grad_check(lambda t: c(_hold(attn.wq, "w", t) and attn(x)), attn.wq.w)

    @case("cross-attention")
    def _(rng):
        attn = MultiHeadAttention(4, 2, rng, kv_dim=6)
        z, kv = rand(rng, 2, 4), rand(rng, 3, 6)
        c = _contract(Tensor(np.zeros((2, 4))), rng)
        return nm.grad_check(lambda t: c(_hold(attn.wk, "w", t) and attn(z, kv=kv)),
                             attn.wk.w)

    @case("feed-forward")
    def _(rng):
        ff = FeedForward(4, rng)
        x = rand(rng, 2, 4)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(_hold(ff.f1, "w", t) and ff(x)), ff.f1.w)

    @case("encoder-block")
    def _(rng):
        block = EncoderBlock(4, 2, rng)
        x = rand(rng, 3, 4)
        c = _contract(x, rng)
        return nm.grad_check(lambda t: c(block(t)), x)

    @case("qformer-block")
    def _(rng):
        block = QFormerBlock(4, 2, 6, rng)
        z, kv = rand(rng, 2, 4), rand(rng, 3, 6)
        c = _contract(z, rng)
        return nm.grad_check(lambda t: c(block(t, kv)), z)

    @case("similarity")
    def _(rng):
        z, e = rand(rng, 3, 4), Tensor(nm.l2_normalize(rand(rng, 1, 4)).data)
        return nm.grad_check(lambda t: similarity_g(t, e), z)

    @case("contrastive-loss")
    def _(rng):
        zs = [rand(rng, 2, 4) for _ in range(2)]
        es = [rand(rng, 1, 4) for _ in range(2)]
        tau = Tensor(np.full((1, 1), 0.4))
        return max(nm.grad_check(lambda t: loss_vtc([t, zs[1]], es, tau), zs[0]),
                   nm.grad_check(lambda t: loss_vtc(zs, es, t), tau))

    @case("binary-alignment-loss")
    def _(rng):
        g = Tensor(np.full((), float(rng.normal())))
        h = Tensor(np.full((), float(rng.normal())))
        return nm.grad_check(lambda t: loss_ptc([t, h], [1, 0]), g)

    @case("answer-loss")
    def _(rng):
        logits = rand(rng, 3, 8)
        targets = [int(i) for i in rng.integers(0, 8, size=3)]
        return nm.grad_check(lambda t: loss_llm(t, targets), logits)

    @case("video-encoder")
    def _(rng):
        enc = VideoEncoder(rng, frame_h=8, frame_w=8, patch=4, max_frames=2,
                           m=2, d_v=4, heads=2, layers=1)
        frames = rng.random((2, 8, 8))
        c = _contract(Tensor(np.zeros((2, 4))), rng)
        return nm.grad_check(lambda t: c(_hold(enc, "pos_time", t) and enc(frames)),
                             enc.pos_time)

    @case("periodicity-transformer")
    def _(rng):
        pt = PeriodicityTransformer(rng, n_queries=2, d_z=4, d_v=4, m=2,
                                    heads=2, layers=1)
        feats = rand(rng, 2, 4)
        c = _contract(Tensor(np.zeros((2, 4))), rng)
        return nm.grad_check(lambda t: c(_hold(pt, "queries", t) and pt(feats)),
                             pt.queries)

    @case("text-encoder")
    def _(rng):
        enc = TextEncoder(rng, vocab_size=6, d_z=4, heads=2, layers=1, max_len=8)
        ids = [int(i) for i in rng.integers(0, 6, size=5)]
        c = _contract(Tensor(np.zeros((1, 4))), rng)
        return nm.grad_check(lambda t: c(_hold(enc, "table", t) and enc(ids)),
                             enc.table)

    @case("decoder-lm")
    def _(rng):
        lm = DecoderLM(Vocabulary(), rng, d_l=8, layers=1, heads=2, context_length=8)
        ids = [1, 10, 11, 12, 2]
        c = _contract(Tensor(np.zeros((5, len(lm.vocab)))), rng)
        return nm.grad_check(lambda t: c(_hold(lm, "pos", t) and lm.forward_ids(ids)),
                             lm.pos)

    return cases


def _hold(obj, attr, tensor):
    """Substitute a parameter tensor in place; truthy so it chains with `and`."""
    setattr(obj, attr, tensor)
    return True


def grad_check_suite(trials: int = 20, seed: int = 0, cases=None, tolerance: float = 1e-4):
    """Run every case `trials` times in high precision.

    Returns rows of (name, max relative error, passed).
    """
    if cases is None:
        cases = default_grad_cases()
    rows = []
    with nm.precision("high"):
        for index, (name, fn) in enumerate(cases):
            worst = 0.0
            for trial in range(trials):
                rng = np.random.default_rng(seed + 1000 * index + trial)
                worst = max(worst, float(fn(rng)))
            rows.append((name, worst, worst < tolerance))
    return rows


# ---------------------------------------------------------------------------
# Commands


def _overrides_from(args) -> dict:
    return {k: getattr(args, k) for k in _FIELDS if getattr(args, k, None) is not None}


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config, _overrides_from(args))
    if getattr(args, "ablate", None):
        patch = {
            "none": {},
            "no-description": {"include_description": False},
            "learned-count-token": {"count_token_answers": True},
            "no-stage2": {"skip_stage2": True},
        }[args.ablate]
        cfg = dataclasses.replace(cfg, **patch)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    with nm.precision(cfg.precision):
        dataset = make_dataset(cfg.n_train, cfg.train_profile, seed=cfg.data_seed,
                               aperiodic_fraction=cfg.aperiodic_fraction)
        write_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} {cfg.train_profile} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    stage = args.stage
    ablate = args.ablate or "none"
    with nm.precision(cfg.precision):
        dataset = read_dataset(args.data)
        if stage == 1:
            pipeline = pipeline_from_config(cfg)
        else:
            if not args.init:
                raise UsageError(
                    f"stage {stage} resumes an earlier checkpoint; pass --init")
            pipeline, _ = load_checkpoint(args.init, cfg, force=args.force)
        if cfg.skip_stage2 and stage == 3 and 2 not in pipeline.completed:
            pipeline.mark_skipped(2)
        if cfg.skip_stage2 and stage == 2:
            pipeline.mark_skipped(2)
            trace = []
            print("stage 2 skipped by ablation; checkpoint passes through")
        else:
            plan = plans_from_config(cfg)[stage]
            trace = train_stage(pipeline, plan, dataset, seed=cfg.train_seed + stage)
        save_checkpoint(args.out, pipeline, cfg, ablate=ablate)
    if args.trace:
        with open(args.trace, "w", encoding="ascii") as fh:
            for row in trace:
                fh.write(f"{row[0]} {row[1]} {row[2]} {row[3]:.6f}\n")
    if args.plot and trace:
        plot_loss_curve(trace, args.plot)
    last = f", final loss {trace[-1][3]:.4f}" if trace else ""
    print(f"stage {stage}: {len(trace)} steps{last}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    with nm.precision(cfg.precision):
        if args.oracle:
            pipeline = None
        else:
            if not args.checkpoint:
                raise UsageError("eval needs --checkpoint unless --oracle is set")
            pipeline, _ = load_checkpoint(args.checkpoint, cfg, force=args.force)
        other = {"family-a": "family-b", "family-b": "family-a"}
        test_profile = cfg.train_profile if args.protocol == "in-domain" \
            else other[cfg.train_profile]
        spec = ProtocolSpec(cfg.train_profile, test_profile, split_seed=cfg.split_seed)
        result = run_protocol(pipeline, spec, cfg.n_eval, oracle=args.oracle,
                              report_path=args.report,
                              config_digest=config_digest(cfg).hex(),
                              aperiodic_fraction=cfg.aperiodic_fraction)
    if args.figures and args.report:
        render_eval_figures(result, args.report)
    footer = render_report(result, spec).strip().splitlines()[-1]
    print(footer)
    return 0


def cmd_count(args) -> int:
    cfg = _config_from(args)
    with nm.precision(cfg.precision):
        pipeline, _ = load_checkpoint(args.checkpoint, cfg, force=args.force)
        dataset = read_dataset(args.data)
        if not 0 <= args.video_id < len(dataset):
            raise UsageError(
                f"video id {args.video_id} outside dataset of {len(dataset)}")
        video, annotation = dataset[args.video_id]
        prediction, diag = count_video(pipeline, video.frames)
    for i, (answer, text) in enumerate(zip(diag["answers"], diag["texts"])):
        print(f"clip {i}: count={answer.count} start_incomplete={answer.start_incomplete} "
              f"end_incomplete={answer.end_incomplete} reply={text!r}")
    bridges = prediction - sum(a.count for a in diag["answers"])
    if bridges:
        print(f"boundary-spanning cycles reconciled: +{bridges}")
    if diag["parse_failures"]:
        print(f"{diag['parse_failures']} clip replies failed to parse "
              "and counted as [0000,0,0]")
    print(f"video {args.video_id}: predicted {prediction}, annotated {annotation.count}")
    return 0


def cmd_grad_check(args) -> int:
    rows = grad_check_suite(trials=args.trials, seed=args.seed)
    width = max(len(name) for name, _, _ in rows)
    failures = 0
    for name, err, ok in rows:
        status = "pass" if ok else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
        failures += 0 if ok else 1
    print(f"{len(rows) - failures}/{len(rows)} operations within tolerance")
    return 0 if failures == 0 else 3


def cmd_inspect(args) -> int:
    version, digest, width, provenance, tensors = read_checkpoint(args.checkpoint)
    total = sum(int(np.prod(a.shape)) if a.ndim else 1 for a in tensors.values())
    print(f"version: {version}")
    print(f"config digest: {digest.hex()}")
    print(f"float width: {width} bytes")
    print(f"provenance: {provenance}")
    print(f"tensors: {len(tensors)} ({total} parameters)")
    for name in sorted(tensors):
        print(f"  {name}  {tensors[name].shape}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_options(sub):
    sub.add_argument("--config", metavar="FILE", help="flat key=value config file")
    for name in _FIELDS:
        sub.add_argument(f"--{name}", dest=name, metavar="V",
                         help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="periocount",
                     description="desk-scale repetitive action counting")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = subs.add_parser("gen-data", help="render a synthetic dataset file")
    p.add_argument("--out", required=True)
    _add_config_options(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint from the previous stage")
    p.add_argument("--trace", help="write per-step losses here")
    p.add_argument("--plot", help="write a loss-curve PNG here")
    p.add_argument("--ablate", choices=("none", "no-description",
                                        "learned-count-token", "no-stage2"))
    p.add_argument("--force", action="store_true")
    _add_config_options(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on held-out videos")
    p.add_argument("--protocol", required=True, choices=("in-domain", "cross"))
    p.add_argument("--checkpoint")
    p.add_argument("--report", help="write the report file here")
    p.add_argument("--oracle", action="store_true",
                   help="replace the decoder with ground-truth labels")
    p.add_argument("--figures", action="store_true",
                   help="render scatter/histogram PNGs next to the report")
    p.add_argument("--ablate", choices=("none", "no-description",
                                        "learned-count-token", "no-stage2"))
    p.add_argument("--force", action="store_true")
    _add_config_options(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("count", help="count one video and show per-clip answers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video-id", type=int, required=True)
    p.add_argument("--ablate", choices=("none", "no-description",
                                        "learned-count-token", "no-stage2"))
    p.add_argument("--force", action="store_true")
    _add_config_options(p)
    p.set_defaults(func=cmd_count)

    p = subs.add_parser("grad-check", help="verify every backward rule numerically")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = subs.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (CheckpointFormatError, DatasetFormatError, DatasetCompositionError,
            SpecError, StageOrderError, EvalError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericAbort as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
