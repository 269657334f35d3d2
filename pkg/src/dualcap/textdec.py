"""Masked text decoder with always-on cross-attention to image features.

Text is lowercased, punctuation becomes whitespace, and tokens map
through a frequency-ordered vocabulary with four reserved ids (PAD=0,
BOS=1, EOS=2, UNK=3).  The decoder itself is a stack of post-norm
transformer blocks: causal self-attention (a position sees itself and
earlier positions only; PAD keys are masked out), cross-attention over
encoder patch features, and a GELU feed-forward.  The output head is
tied to the input embedding, so logits are hidden @ W_emb^T.

The cross-attention sublayer always runs.  With context=None its
attention term is exactly zero, which makes no-context decoding
bitwise identical to decoding against a zero context with zero
cross-value weights; the contrastive text pathway relies on this.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import (
    MASK_VALUE,
    Tensor,
    add,
    add_bias,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_axis,
    softmax,
    transpose,
)
from .encoder import sinusoidal_positions
from .errors import ConfigError, ContractError, VocabError
from .init import ones_init, uniform_init, zeros_init

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Lowercase, map punctuation to spaces, split on whitespace."""
    lowered = text.lower()
    cleaned = "".join(ch if ch.isalnum() else " " for ch in lowered)
    return cleaned.split()


class Vocabulary:
    """Token <-> id map with four reserved ids and frequency ordering.

    Real tokens get ids from 4 upward, ordered by descending corpus
    frequency with ties broken lexicographically, so a vocabulary is a
    pure function of its corpus.
    """

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = list(RESERVED_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise VocabError(f"invalid vocabulary token {tok!r}")
            if tok in self._token_to_id:
                raise VocabError(f"duplicate vocabulary token {tok!r}")
            self._token_to_id[tok] = len(self._id_to_token)
            self._id_to_token.append(tok)

    @classmethod
    def from_corpus(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        kept = [t for t, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_token):
            raise VocabError(f"token id {token_id} out of range for vocabulary of {len(self)}")
        return self._id_to_token[token_id]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token(i) for i in ids]

    def save(self, path) -> None:
        """One real token per line; line number equals id - 4."""
        Path(path).write_text("".join(t + "\n" for t in self._id_to_token[4:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = []
        for i, line in enumerate(lines):
            tok = line.strip()
            if not tok:
                raise VocabError(f"{path}: empty token on line {i + 1}")
            if tok in RESERVED_TOKENS:
                raise VocabError(f"{path}: reserved token {tok!r} on line {i + 1}")
            tokens.append(tok)
        try:
            return cls(tokens)
        except VocabError as e:
            raise VocabError(f"{path}: {e}") from e


@dataclass(frozen=True)
class TokenSequence:
    """Token ids in decoder order: BOS, words, EOS, then PAD only.

    ``length`` counts the real tokens (BOS through EOS inclusive);
    ``ids[length:]`` must be PAD.
    """

    ids: tuple[int, ...]
    length: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if not 2 <= self.length <= len(ids):
            raise ContractError(f"sequence length {self.length} invalid for {len(ids)} ids")
        if ids[0] != BOS_ID:
            raise ContractError(f"sequence must start with BOS, got id {ids[0]}")
        if ids[self.length - 1] != EOS_ID:
            raise ContractError(f"sequence position {self.length - 1} must be EOS, got id {ids[self.length - 1]}")
        body = ids[1:self.length - 1]
        if any(i in (PAD_ID, BOS_ID, EOS_ID) for i in body):
            raise ContractError("reserved id inside the sequence body")
        if any(i != PAD_ID for i in ids[self.length:]):
            raise ContractError("non-PAD id after EOS")

    def words(self) -> tuple[int, ...]:
        """The ids between BOS and EOS."""
        return self.ids[1:self.length - 1]


def encode_caption(vocab: Vocabulary, text: str, max_len: int | None = None) -> TokenSequence:
    """Text -> BOS + token ids + EOS, padded to max_len when given.

    Captions longer than max_len - 2 tokens are truncated so EOS always
    fits.
    """
    word_ids = vocab.encode(tokenize(text))
    if max_len is not None:
        if max_len < 3:
            raise ContractError(f"max_len must be >= 3, got {max_len}")
        word_ids = word_ids[:max_len - 2]
    ids = [BOS_ID, *word_ids, EOS_ID]
    length = len(ids)
    if max_len is not None:
        ids.extend([PAD_ID] * (max_len - length))
    return TokenSequence(ids=tuple(ids), length=length)


@dataclass(frozen=True)
class DecoderConfig:
    """Static shape of the text decoder.

    context_width is the row width of the encoder features the
    cross-attention keys and values read from.
    """

    vocab_size: int
    dim: int = 32
    heads: int = 2
    depth: int = 1
    context_width: int = 32
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.vocab_size < len(RESERVED_TOKENS):
            raise ConfigError(f"vocab_size must be >= {len(RESERVED_TOKENS)}, got {self.vocab_size}")
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be positive and even, got {self.dim}")
        if self.heads <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} does not divide dim {self.dim}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.context_width <= 0:
            raise ConfigError(f"context_width must be positive, got {self.context_width}")
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class DecoderOutput:
    hidden: Tensor  # T x C
    logits: Tensor  # T x V, tied to the embedding


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator, prefix: str = "dec") -> dict[str, Tensor]:
    """Fresh trainable parameters for the configured decoder."""
    c, c_h = cfg.dim, cfg.head_dim
    params: dict[str, Tensor] = {}
    params[f"{prefix}.emb"] = uniform_init(rng, (cfg.vocab_size, c), fan_in=c)
    hidden = c * cfg.ffn_expansion
    for i in range(cfg.depth):
        b = f"{prefix}.b{i}"
        for h in range(cfg.heads):
            for name in ("wq", "wk", "wv"):
                params[f"{b}.self.h{h}.{name}"] = uniform_init(rng, (c_h, c_h))
            params[f"{b}.cross.h{h}.wq"] = uniform_init(rng, (c_h, c_h))
            params[f"{b}.cross.h{h}.wk"] = uniform_init(rng, (cfg.context_width, c_h))
            params[f"{b}.cross.h{h}.wv"] = uniform_init(rng, (cfg.context_width, c_h))
        params[f"{b}.ln1.g"] = ones_init(c)
        params[f"{b}.ln1.b"] = zeros_init(c)
        params[f"{b}.ln2.g"] = ones_init(c)
        params[f"{b}.ln2.b"] = zeros_init(c)
        params[f"{b}.ffn.w1"] = uniform_init(rng, (c, hidden))
        params[f"{b}.ffn.b1"] = zeros_init(hidden)
        params[f"{b}.ffn.w2"] = uniform_init(rng, (hidden, c))
        params[f"{b}.ffn.b2"] = zeros_init(c)
        params[f"{b}.ln3.g"] = ones_init(c)
        params[f"{b}.ln3.b"] = zeros_init(c)
    return params


def attention_masks(ids: Sequence[int]) -> Tensor:
    """Additive T x T mask: 0 where key j is visible to query i, else -1e30.

    Position i sees positions j <= i whose token is not PAD.  The mask
    value is finite but large enough that softmax underflows those
    entries to exactly zero.
    """
    ids = np.asarray(ids)
    t = ids.shape[0]
    mask = np.zeros((t, t))
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    mask[future] = MASK_VALUE
    mask[:, ids == PAD_ID] = MASK_VALUE
    if ids[0] == PAD_ID:
        raise ContractError("first position must not be PAD")
    return Tensor(mask)


def _heads_split(x: Tensor, n: int):
    c = x.shape[1]
    c_h = c // n
    if n == 1:
        return [x]
    return [slice_axis(x, 1, i * c_h, (i + 1) * c_h) for i in range(n)]


def decode_text(
    tokens: TokenSequence | Sequence[int],
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    context: Tensor | None = None,
    prefix: str = "dec",
) -> DecoderOutput:
    """Run the decoder over a full sequence with teacher forcing.

    Returns hidden states and tied logits for every position, including
    PAD positions (mask their targets out of the loss instead).
    """
    ids = list(tokens.ids) if isinstance(tokens, TokenSequence) else [int(i) for i in tokens]
    if not ids:
        raise ContractError("decode_text: empty token sequence")
    if any(not 0 <= i < cfg.vocab_size for i in ids):
        raise VocabError(f"token id out of range for vocabulary of {cfg.vocab_size}")
    if context is not None and (context.data.ndim != 2 or context.shape[1] != cfg.context_width):
        raise ConfigError(
            f"context rows must have width {cfg.context_width}, got {context.shape}"
        )
    t = len(ids)
    c, n_h, c_h = cfg.dim, cfg.heads, cfg.head_dim
    emb = params[f"{prefix}.emb"]
    h = add(embedding_lookup(emb, ids), sinusoidal_positions(t, c))
    mask = attention_masks(ids)
    inv_sqrt = 1.0 / math.sqrt(c_h)

    for i in range(cfg.depth):
        b = f"{prefix}.b{i}"
        outs = []
        for hd, xh in enumerate(_heads_split(h, n_h)):
            q = matmul(xh, params[f"{b}.self.h{hd}.wq"])
            k = matmul(xh, params[f"{b}.self.h{hd}.wk"])
            v = matmul(xh, params[f"{b}.self.h{hd}.wv"])
            scores = add(scale(matmul(q, transpose(k)), inv_sqrt), mask)
            outs.append(matmul(softmax(scores, axis=1), v))
        self_out = concat(outs, axis=1) if n_h > 1 else outs[0]
        h = layer_norm(add(h, self_out), params[f"{b}.ln1.g"], params[f"{b}.ln1.b"])

        if context is not None:
            outs = []
            for hd, xh in enumerate(_heads_split(h, n_h)):
                q = matmul(xh, params[f"{b}.cross.h{hd}.wq"])
                k = matmul(context, params[f"{b}.cross.h{hd}.wk"])
                v = matmul(context, params[f"{b}.cross.h{hd}.wv"])
                scores = scale(matmul(q, transpose(k)), inv_sqrt)
                outs.append(matmul(softmax(scores, axis=1), v))
            cross_out = concat(outs, axis=1) if n_h > 1 else outs[0]
            h = layer_norm(add(h, cross_out), params[f"{b}.ln2.g"], params[f"{b}.ln2.b"])
        else:
            # context-free pass: the attention term is exactly zero, so
            # the residual add is skipped and only the norm runs
            h = layer_norm(h, params[f"{b}.ln2.g"], params[f"{b}.ln2.b"])

        inner = gelu(add_bias(matmul(h, params[f"{b}.ffn.w1"]), params[f"{b}.ffn.b1"]))
        ffn_out = add_bias(matmul(inner, params[f"{b}.ffn.w2"]), params[f"{b}.ffn.b2"])
        h = layer_norm(add(h, ffn_out), params[f"{b}.ln3.g"], params[f"{b}.ln3.b"])

    logits = matmul(h, transpose(emb))
    return DecoderOutput(hidden=h, logits=logits)
