"""Progressive three-stage training of the counting pipeline.

Stage 1 contrastively aligns periodic representations with scene
captions; stage 2 aligns them with the periodicity description through a
binary objective; stage 3 instruction-tunes the whole stack with low-rank
adapters so the language model emits formatted clip answers.

Parameter ownership is enforced by name: every tensor belongs to exactly
one group, each stage updates a fixed set of groups, and everything else
must come out of a stage bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .lm import DecoderLM, Vocabulary
from .model import (
    Affine,
    PeriodicityTransformer,
    Projector,
    TextEncoder,
    VideoEncoder,
    similarity_g,
)
from .numerics import Tensor
from .protocol import (
    PERIODICITY_DESCRIPTION,
    QUESTION_VARIANTS,
    ClipAnswer,
    build_instruction,
    encode_answer,
)
from .synthdata import caption_of, make_stage2_pairs, split_into_clips

__all__ = [
    "BatchError",
    "StageOrderError",
    "NumericAbort",
    "PipelineConfig",
    "CountingPipeline",
    "StagePlan",
    "default_plans",
    "Adam",
    "clip_global_norm",
    "loss_vtc",
    "loss_vtc_from_matrix",
    "loss_ptc",
    "loss_llm",
    "answer_ids_for",
    "instruction_ids_for",
    "answer_logit_rows",
    "train_stage",
    "TAU_INIT",
    "TAU_MIN",
    "TAU_MAX",
    "GRAD_CLIP_NORM",
    "TRAINABLE_GROUPS",
]

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0
GRAD_CLIP_NORM = 1.0

# Stage -> parameter groups it may update. Stage 2 keeps the stage-1 text
# encoder frozen and compares against a fixed description embedding; the
# language model base never trains, only its adapters do.
TRAINABLE_GROUPS = {
    1: ("pt", "text_encoder", "text_head", "tau"),
    2: ("pt", "text_head", "tau"),
    3: ("pt", "projector", "adapters"),
}


class BatchError(ValueError):
    """Batch shape or size makes the requested loss meaningless."""


class StageOrderError(ValueError):
    """Stages must run in order unless a skip is declared explicitly."""


class NumericAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class PipelineConfig:
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
    max_frames: int = 32
    adapter_rank: int = 16
    adapter_scale: float = 1.0
    adapter_targets: str = "both"  # both | lm | video
    count_token_answers: bool = False
    include_description: bool = True
    use_feature_positions: bool = True
    # Per-clip counts at desk scale never exceed clip_len / min cycle
    # length; one spare id keeps the range check honest.
    count_token_limit: int = 17
    # Steps of answer-grammar pretraining baked into pipeline creation.
    # The stages assume a frozen language model that already speaks; a
    # frozen *random* one cannot express digit decisions through its
    # untrained classifier, so the readout starves without this.
    lm_pretrain_steps: int = 400


@dataclass(frozen=True)
class StagePlan:
    stage: int
    epochs: int
    batch_size: int
    learning_rate: float
    clip_frames: int

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"unknown stage {self.stage}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def default_plans(profile: str = "desk"):
    if profile == "desk":
        # Calibrated: stage-3 convergence needs many optimizer steps more
        # than large batches, and the contrastive stages flatten early.
        return {
            1: StagePlan(1, epochs=3, batch_size=32, learning_rate=1e-3, clip_frames=16),
            2: StagePlan(2, epochs=6, batch_size=32, learning_rate=1e-3, clip_frames=16),
            3: StagePlan(3, epochs=16, batch_size=8, learning_rate=1e-3, clip_frames=32),
        }
    if profile == "paper":
        return {
            1: StagePlan(1, epochs=10, batch_size=32, learning_rate=1e-3, clip_frames=16),
            2: StagePlan(2, epochs=50, batch_size=32, learning_rate=1e-3, clip_frames=16),
            3: StagePlan(3, epochs=50, batch_size=32, learning_rate=3e-4, clip_frames=32),
        }
    raise ValueError(f"unknown training profile {profile!r}")


class CountingPipeline:
    """The full model: visual stack, text stack, projector, language model."""

    def __init__(self, config: PipelineConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.vocab = Vocabulary(
            count_token_limit=config.count_token_limit if config.count_token_answers else 0
        )
        self.video_encoder = VideoEncoder(
            rng, max_frames=config.max_frames, m=config.m, d_v=config.d_v,
            heads=config.heads,
        )
        self.pt = PeriodicityTransformer(
            rng, n_queries=config.n_queries, d_z=config.d_z, d_v=config.d_v,
            m=config.m, heads=config.heads, layers=config.pt_layers,
            use_feature_positions=config.use_feature_positions,
        )
        self.text_encoder = TextEncoder(
            rng, vocab_size=len(self.vocab), d_z=config.d_z, heads=config.heads,
            max_len=config.context_length,
        )
        self.text_head = Affine(config.d_z, config.d_z, rng)
        self.projector = Projector(rng, d_z=config.d_z, d_l=config.d_l)
        self.lm = DecoderLM(
            self.vocab, rng, d_l=config.d_l, layers=config.lm_layers,
            heads=config.lm_heads, context_length=config.context_length,
        )
        self.tau = Tensor(np.full((1, 1), TAU_INIT), requires_grad=True)
        self._adapter_rng_seed = int(np.random.default_rng(seed + 1).integers(0, 2**63))
        self.adapters_enabled = False
        self.completed = {}  # stage -> "trained" | "skipped"
        self._pretrain_lm(rng)

    def _pretrain_lm(self, rng):
        """Teach the base model to read answers out of the periodic rows.

        Each item plants the embeddings of its own (uniformly sampled)
        answer tokens into the leading periodic-token rows, so the base
        learns the answer grammar plus a copy circuit from those rows to
        the answer positions. Later stages then only need to steer the
        visual stack to emit the right embeddings; nothing about actual
        videos leaks in here. Runs on the full base (adapters do not exist
        yet) and is part of deterministic pipeline construction.
        """
        steps = self.config.lm_pretrain_steps
        if steps <= 0:
            return
        params = {f"lm.{k}": t for k, t in self.lm.named_params().items()}
        opt = Adam()
        n, d_l = self.config.n_queries, self.config.d_l
        count_tokens = self.config.count_token_answers
        include_desc = self.config.include_description
        top = self.vocab.count_token_limit if count_tokens else 10
        # Answer indices that actually vary: the count token and both flags.
        informative = (1, 3, 5) if count_tokens else (4, 6, 8)
        batch = 8
        for _ in range(steps):
            _zero_grads(params)
            for _ in range(batch):
                label = ClipAnswer(int(rng.integers(0, top)),
                                   int(rng.integers(0, 2)), int(rng.integers(0, 2)))
                variant = int(rng.integers(0, len(QUESTION_VARIANTS)))
                instr = instruction_ids_for(self.vocab, variant, include_desc)
                ans = answer_ids_for(self.vocab, label, count_tokens)
                slots = np.asarray(0.5 * rng.normal(size=(n, d_l)))
                table = self.lm.table.data
                for row, idx in enumerate(informative[:n]):
                    slots[row] = table[ans[idx]]
                rows, targets = answer_logit_rows(self, Tensor(slots), instr, ans)
                loss_llm(rows, targets).backward(seed=1.0 / batch)
            clip_global_norm(params)
            opt.step(params, 1e-3)

    def enable_adapters(self):
        """Attach low-rank adapters to attention projections; idempotent."""
        if self.adapters_enabled:
            return
        rng = np.random.default_rng(self._adapter_rng_seed)
        targets = []
        if self.config.adapter_targets in ("both", "video"):
            targets += list(self.video_encoder.attention_layers())
        if self.config.adapter_targets in ("both", "lm"):
            targets += list(self.lm.attention_layers())
        if not targets:
            raise ValueError(f"unknown adapter_targets {self.config.adapter_targets!r}")
        for layer in targets:
            layer.attach_adapter(self.config.adapter_rank, self.config.adapter_scale, rng)
        self.adapters_enabled = True

    def named_params(self):
        out = {}
        prefixed = (
            ("video_encoder", self.video_encoder.named_params()),
            ("pt", self.pt.named_params()),
            ("text_encoder", self.text_encoder.named_params()),
            ("text_head", self.text_head.named_params()),
            ("projector", self.projector.named_params()),
            ("lm", self.lm.named_params()),
        )
        for prefix, params in prefixed:
            for k, t in params.items():
                out[f"{prefix}.{k}"] = t
        out["tau"] = self.tau
        return out

    @staticmethod
    def group_of(name: str) -> str:
        if name == "tau":
            return "tau"
        if ".adapter_" in name:
            return "adapters"
        return name.split(".", 1)[0]

    def trainable_params(self, stage: int):
        groups = TRAINABLE_GROUPS[stage]
        return {
            name: t for name, t in self.named_params().items()
            if self.group_of(name) in groups
        }

    # Forward paths

    def features(self, frames):
        return self.video_encoder(frames)

    def periodic_repr(self, frames):
        return self.pt(self.video_encoder(frames))

    def aligned_repr(self, frames):
        """Periodic representation mapped into the text embedding space."""
        return self.text_head(self.periodic_repr(frames))

    def periodic_tokens(self, frames):
        return self.projector(self.periodic_repr(frames))

    def text_embedding(self, text: str):
        return self.text_encoder(self.vocab.tokenize(text))

    def description_embedding(self):
        """E for the periodicity description, detached from the encoder."""
        e = self.text_embedding(PERIODICITY_DESCRIPTION)
        return Tensor(e.data.copy())

    # Stage bookkeeping

    def require_stage_before(self, stage: int):
        if stage > 1 and (stage - 1) not in self.completed:
            raise StageOrderError(
                f"stage {stage} requires stage {stage - 1} to have run (or an explicit skip)"
            )

    def mark_skipped(self, stage: int):
        self.require_stage_before(stage)
        self.completed[stage] = "skipped"


def loss_vtc_from_matrix(g, tau) -> Tensor:
    """Symmetric contrastive loss given a K x K similarity matrix.

    Row i holds similarities of representation i against every text in
    the batch; the diagonal is ground truth. Both softmax directions are
    temperature-scaled and their cross-entropies averaged over the batch.
    """
    g = nm.as_tensor(g)
    k = g.data.shape[0]
    if g.data.ndim != 2 or g.data.shape[1] != k:
        raise BatchError(f"similarity matrix must be square, got {g.data.shape}")
    if k < 2:
        raise BatchError("contrastive batches need K >= 2 (K=1 has no negatives)")
    tau_c = nm.clip(tau, TAU_MIN, TAU_MAX)
    eye = np.eye(k)
    p_v2t = nm.softmax(g, tau_c)
    p_t2v = nm.softmax(nm.transpose(g), tau_c)
    total = nm.add(nm.cross_entropy(Tensor(eye), p_v2t), nm.cross_entropy(Tensor(eye), p_t2v))
    return nm.mul(total, 1.0 / k)


def loss_vtc(z_list, e_list, tau) -> Tensor:
    """Contrastive loss over matched (Z, E) pairs via similarity_g."""
    k = len(z_list)
    if k != len(e_list):
        raise BatchError(f"batch halves differ: {k} vs {len(e_list)}")
    if k < 2:
        raise BatchError("contrastive batches need K >= 2 (K=1 has no negatives)")
    rows = []
    for i in range(k):
        cells = [nm.reshape(similarity_g(z_list[i], e_list[j]), (1, 1)) for j in range(k)]
        rows.append(nm.concat(cells, axis=1))
    return loss_vtc_from_matrix(nm.concat(rows, axis=0), tau)


def loss_ptc(g_list, labels) -> Tensor:
    """Mean BCE of sigmoid(similarity) against binary periodicity labels."""
    if len(g_list) != len(labels):
        raise BatchError(f"got {len(g_list)} similarities for {len(labels)} labels")
    if not g_list:
        raise BatchError("empty batch")
    total = None
    for g, y in zip(g_list, labels):
        term = nm.binary_cross_entropy(float(y), nm.sigmoid(g))
        total = term if total is None else nm.add(total, term)
    return nm.mul(total, 1.0 / len(g_list))


def loss_llm(logit_rows, target_ids) -> Tensor:
    """Summed cross-entropy of answer-position logits against target ids."""
    n = logit_rows.data.shape[0]
    if n != len(target_ids):
        raise nm.DimensionError(f"{n} logit rows for {len(target_ids)} targets")
    onehot = np.zeros((n, logit_rows.data.shape[1]))
    onehot[np.arange(n), np.asarray(target_ids, dtype=np.int64)] = 1.0
    return nm.cross_entropy(Tensor(onehot), nm.rows_softmax(logit_rows))


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state = {}

    def step(self, named_params, lr: float):
        self.t += 1
        for name in sorted(named_params):
            p = named_params[name]
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericAbort(f"non-finite gradient in {name}")
            m, v = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.state[name] = (m, v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(named_params, max_norm: float = GRAD_CLIP_NORM):
    """Scale all gradients down if their joint L2 norm exceeds max_norm."""
    total = 0.0
    for name in sorted(named_params):
        g = named_params[name].grad
        if g is not None:
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in named_params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def instruction_ids_for(vocab: Vocabulary, variant: int, include_description: bool = True):
    rec = build_instruction(variant, include_description=include_description)
    return vocab.tokenize(rec.text)


def answer_ids_for(vocab: Vocabulary, label: ClipAnswer, count_tokens: bool = False):
    """Target ids for one clip answer, in the active answer format."""
    if not count_tokens:
        return vocab.tokenize(encode_answer(label))
    return [
        vocab.id_of("["),
        vocab.count_token_id(label.count),
        vocab.id_of(","),
        vocab.id_of(str(label.start_incomplete)),
        vocab.id_of(","),
        vocab.id_of(str(label.end_incomplete)),
        vocab.id_of("]"),
    ]


def answer_logit_rows(pipeline: CountingPipeline, p_tokens, instr_ids, ans_ids):
    """Forward one conversation; return logits rows aligned with targets.

    The sequence is [periodic tokens, instruction, answer, EOS]; position
    i predicts position i+1, so the rows from (prefix length - 1) onward
    predict the answer characters and the closing EOS.
    """
    lm = pipeline.lm
    eos = pipeline.vocab.eos_id
    full_ids = list(instr_ids) + list(ans_ids) + [eos]
    embs = nm.concat([p_tokens, lm.embed_ids(full_ids)], axis=0)
    logits = lm.forward_embedded(embs)
    start = p_tokens.data.shape[0] + len(instr_ids) - 1
    rows = nm.narrow(logits, 0, start, start + len(ans_ids) + 1)
    return rows, list(ans_ids) + [eos]


def _check_finite(value: float, stage: int, epoch: int, step: int):
    if not math.isfinite(value):
        raise NumericAbort(f"stage {stage} epoch {epoch} step {step}: loss is {value}")


def _random_window(rng, frames, length: int):
    t = frames.shape[0]
    if t <= length:
        return frames
    start = int(rng.integers(0, t - length + 1))
    return frames[start : start + length]


def _zero_grads(named_params):
    for p in named_params.values():
        p.grad = None


def train_stage(pipeline: CountingPipeline, plan: StagePlan, dataset, seed: int):
    """Run one training stage over the dataset; returns the loss trace.

    The trace is a list of (stage, epoch, step, loss) records. Data order,
    window choices, and question variants all come from one generator
    seeded with `seed`, so a rerun reproduces the trace exactly.
    """
    pipeline.require_stage_before(plan.stage)
    if plan.stage == 3:
        pipeline.enable_adapters()

    all_params = pipeline.named_params()
    trainable = pipeline.trainable_params(plan.stage)
    opt = Adam()
    rng = np.random.default_rng(seed)
    trace = []

    if plan.stage == 1:
        items = [(video, caption_of(video.spec)) for video, _ in dataset]
        for epoch in range(plan.epochs):
            order = rng.permutation(len(items))
            step = 0
            for lo in range(0, len(order), plan.batch_size):
                batch = [items[i] for i in order[lo : lo + plan.batch_size]]
                if len(batch) < 2:
                    continue
                _zero_grads(all_params)
                z_list, e_list = [], []
                for video, caption in batch:
                    window = _random_window(rng, video.frames, plan.clip_frames)
                    z_list.append(pipeline.aligned_repr(window))
                    e_list.append(pipeline.text_embedding(caption))
                loss = loss_vtc(z_list, e_list, pipeline.tau)
                value = loss.item()
                _check_finite(value, 1, epoch, step)
                loss.backward()
                clip_global_norm(trainable)
                opt.step(trainable, plan.learning_rate)
                trace.append((1, epoch, step, value))
                step += 1

    elif plan.stage == 2:
        pairs = make_stage2_pairs(
            dataset, clip_len=plan.clip_frames, sample_interval=1,
            seed=int(rng.integers(0, 2**32)),
        )
        e_per = pipeline.description_embedding()
        for epoch in range(plan.epochs):
            order = rng.permutation(len(pairs))
            step = 0
            for lo in range(0, len(order), plan.batch_size):
                batch = [pairs[i] for i in order[lo : lo + plan.batch_size]]
                _zero_grads(all_params)
                g_list = [similarity_g(pipeline.aligned_repr(clip), e_per) for clip, _ in batch]
                loss = loss_ptc(g_list, [y for _, y in batch])
                value = loss.item()
                _check_finite(value, 2, epoch, step)
                loss.backward()
                clip_global_norm(trainable)
                opt.step(trainable, plan.learning_rate)
                trace.append((2, epoch, step, value))
                step += 1

    else:
        count_tokens = pipeline.config.count_token_answers
        include_desc = pipeline.config.include_description
        for epoch in range(plan.epochs):
            order = rng.permutation(len(dataset))
            step = 0
            for lo in range(0, len(order), plan.batch_size):
                batch_idx = order[lo : lo + plan.batch_size]
                _zero_grads(all_params)
                batch_total = 0.0
                k = len(batch_idx)
                for i in batch_idx:
                    video, annotation = dataset[i]
                    clips = split_into_clips(video, annotation, plan.clip_frames, 1)
                    clip, label = clips[int(rng.integers(0, len(clips)))]
                    variant = int(rng.integers(0, len(QUESTION_VARIANTS)))
                    instr = instruction_ids_for(pipeline.vocab, variant, include_desc)
                    ans = answer_ids_for(pipeline.vocab, label, count_tokens)
                    p_tokens = pipeline.periodic_tokens(clip)
                    rows, targets = answer_logit_rows(pipeline, p_tokens, instr, ans)
                    loss = loss_llm(rows, targets)
                    batch_total += loss.item()
                    loss.backward(seed=1.0 / k)
                value = batch_total / k
                _check_finite(value, 3, epoch, step)
                clip_global_norm(trainable)
                opt.step(trainable, plan.learning_rate)
                trace.append((3, epoch, step, value))
                step += 1

    pipeline.completed[plan.stage] = "trained"
    return trace
