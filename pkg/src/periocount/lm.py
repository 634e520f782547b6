"""Character-level decoder language model and its vocabulary.

The tokenizer is deliberately trivial: one lowercase character per id, so
the ten-symbol answer string is exactly ten tokens and digits can never
merge. Periodic tokens are injected as raw embeddings in front of the
text; they never correspond to a vocabulary id. An optional block of
count tokens (one id per count value, surfaced as "<0007>") supports the
single-token answer variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .model import Affine, EncoderBlock
from .numerics import Tensor

__all__ = [
    "TokenizationError",
    "ContextOverflowError",
    "Vocabulary",
    "TokenSequence",
    "KIND_PERIODIC",
    "KIND_TEXTUAL",
    "KIND_GENERATED",
    "DecoderLM",
]


class TokenizationError(ValueError):
    def __init__(self, char: str, position: int):
        super().__init__(f"character {char!r} at position {position} is not in the vocabulary")
        self.char = char
        self.position = position


class ContextOverflowError(ValueError):
    """Sequence does not fit in the model's context window."""


_SPECIALS = ("<pad>", "<bos>", "<eos>", "<per>")
_TEXT_SYMBOLS = "abcdefghijklmnopqrstuvwxyz0123456789 [],.?:-"


class Vocabulary:
    """Fixed symbol table: specials, then characters, then count tokens.

    The ordering is a constant of the implementation, so the id mapping
    is stable across processes without persisting anything beyond
    count_token_limit.
    """

    def __init__(self, count_token_limit: int = 0):
        if count_token_limit < 0:
            raise ValueError("count_token_limit must be >= 0")
        self.count_token_limit = count_token_limit
        self._surfaces = list(_SPECIALS) + list(_TEXT_SYMBOLS)
        self._count_base = len(self._surfaces)
        self._surfaces += [f"<{k:04d}>" for k in range(count_token_limit)]
        self._char_ids = {
            ch: len(_SPECIALS) + i for i, ch in enumerate(_TEXT_SYMBOLS)
        }

    def __len__(self):
        return len(self._surfaces)

    pad_id = 0
    bos_id = 1
    eos_id = 2
    slot_id = 3

    def id_of(self, char: str) -> int:
        if char not in self._char_ids:
            raise TokenizationError(char, 0)
        return self._char_ids[char]

    def count_token_id(self, count: int) -> int:
        if not 0 <= count < self.count_token_limit:
            raise ValueError(
                f"count token {count} outside configured range 0..{self.count_token_limit - 1}"
            )
        return self._count_base + count

    def tokenize(self, text: str):
        ids = []
        for pos, ch in enumerate(text.lower()):
            if ch not in self._char_ids:
                raise TokenizationError(ch, pos)
            ids.append(self._char_ids[ch])
        return ids

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self._surfaces):
                raise ValueError(f"id {i} outside vocabulary of size {len(self._surfaces)}")
            if i >= len(_SPECIALS):  # specials render as nothing
                out.append(self._surfaces[i])
        return "".join(out)


KIND_PERIODIC = "periodic"
KIND_TEXTUAL = "textual"
KIND_GENERATED = "generated"


@dataclass
class TokenSequence:
    """Ids plus a per-position kind tag; periodic slots carry no real id."""

    ids: list
    kinds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.kinds:
            self.kinds = [KIND_TEXTUAL] * len(self.ids)
        if len(self.kinds) != len(self.ids):
            raise ValueError("ids and kinds must align")
        # Periodic slots may only form a prefix: once text starts, no
        # further embedding injection.
        seen_text = False
        for kind in self.kinds:
            if kind != KIND_PERIODIC:
                seen_text = True
            elif seen_text:
                raise ValueError("periodic positions must precede all textual positions")


def causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


class DecoderLM:
    """Decoder-only transformer over embedded sequences.

    The forward pass takes embeddings rather than ids so callers can mix
    vocabulary lookups with injected periodic-token rows.
    """

    def __init__(self, vocab: Vocabulary, rng, d_l: int = 128, layers: int = 4,
                 heads: int = 4, context_length: int = 256):
        if d_l % heads != 0:
            raise ValueError(f"embedding width {d_l} not divisible by heads {heads}")
        self.vocab = vocab
        self.d_l = d_l
        self.context_length = context_length
        self.table = Tensor(rng.normal(0, 0.02, (len(vocab), d_l)), requires_grad=True)
        self.pos = Tensor(rng.normal(0, 0.02, (context_length, d_l)), requires_grad=True)
        self.blocks = [EncoderBlock(d_l, heads, rng) for _ in range(layers)]
        self.head = Affine(d_l, len(vocab), rng)

    def embed_ids(self, ids) -> Tensor:
        return nm.embedding_rows(self.table, ids)

    def forward_embedded(self, embs: Tensor) -> Tensor:
        n = embs.data.shape[0]
        if n > self.context_length:
            raise ContextOverflowError(
                f"sequence length {n} exceeds context {self.context_length}"
            )
        x = nm.add(embs, nm.narrow(self.pos, 0, 0, n))
        mask = causal_mask(n)
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.head(x)

    def forward_ids(self, ids) -> Tensor:
        return self.forward_embedded(self.embed_ids(ids))

    def generate(self, p_tokens, instruction_ids, max_len: int):
        """Greedy decoding; returns (text, generated ids).

        Re-runs the full forward per emitted symbol (no cache); argmax
        ties break toward the lowest id. Stops at EOS, max_len, or a full
        context window.
        """
        parts = []
        if p_tokens is not None:
            parts.append(p_tokens)
        if len(instruction_ids) > 0:
            parts.append(self.embed_ids(list(instruction_ids)))
        if not parts:
            raise ValueError("generation needs a non-empty context")
        ctx = nm.concat(parts, axis=0) if len(parts) > 1 else parts[0]

        out_ids = []
        for _ in range(max_len):
            if ctx.data.shape[0] > self.context_length:
                break
            logits = self.forward_embedded(ctx)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == self.vocab.eos_id:
                break
            out_ids.append(next_id)
            ctx = nm.concat([ctx, self.embed_ids([next_id])], axis=0)
        return self.vocab.detokenize(out_ids), out_ids

    def named_params(self):
        out = {"table": self.table, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            for k, t in block.named_params().items():
                out[f"block{i}.{k}"] = t
        for k, t in self.head.named_params().items():
            out[f"head.{k}"] = t
        return out

    def attention_layers(self):
        for block in self.blocks:
            yield from block.attn.projection_layers()
