"""Masked transformer caption decoder.

Teacher-forced training replaces a random share of the input words with a
MASK embedding; generation is greedy and feeds back its own tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, FeedForward, ProjectionSet, multi_head
from .nn import LayerNorm, param
from .tensor import Tensor, no_grad

PAD, BOS, EOS, MASK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>")


class DecoderConfigError(ValueError):
    pass


def tokenize(sentence: str) -> list[str]:
    return sentence.lower().split()


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self.ids: dict[str, int] = {w: i for i, w in enumerate(self.tokens)}
        for w in words:
            self.add(w)

    @classmethod
    def from_corpus(cls, sentences: Iterable[str]) -> Vocabulary:
        return cls(sorted({w for s in sentences for w in tokenize(s)}))

    def add(self, word: str) -> int:
        if word not in self.ids:
            self.ids[word] = len(self.tokens)
            self.tokens.append(word)
        return self.ids[word]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, sentence: str) -> list[int]:
        try:
            return [BOS] + [self.ids[w] for w in tokenize(sentence)] + [EOS]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == EOS:
                break
            if i >= len(RESERVED):
                words.append(self.tokens[i])
        return " ".join(words)


@dataclass
class CaptionBatch:
    ids: np.ndarray
    lengths: np.ndarray
    mask_positions: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]]) -> CaptionBatch:
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            if len(s) < 2 or s[0] != BOS or s[-1] != EOS:
                raise ValueError(f"sequence {b} must start with BOS and end with EOS")
            ids[b, : len(s)] = s
        return cls(ids, np.array([len(s) for s in seqs]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def eligible(self) -> np.ndarray:
        ids = self.ids
        return (ids != PAD) & (ids != BOS) & (ids != EOS)

    def with_random_mask(self, rate: float, rng: np.random.Generator) -> CaptionBatch:
        draws = rng.random(self.ids.shape)
        return CaptionBatch(self.ids, self.lengths, self.eligible() & (draws < rate))


@dataclass
class DecoderLayer:
    norm_self: LayerNorm
    self_attn: ProjectionSet
    norm_cross: LayerNorm
    cross_attn: ProjectionSet
    norm_ffn: LayerNorm
    ffn: FeedForward


@dataclass
class DecoderParams:
    embedding: Tensor
    layers: list[DecoderLayer]
    norm_out: LayerNorm
    max_len: int = 32
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.positions = sinusoidal_positions(self.max_len, self.embedding.shape[1])

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        dim: int,
        num_heads: int,
        num_layers: int = 1,
        max_len: int = 32,
        memory_dim: int | None = None,
    ) -> DecoderParams:
        acfg = AttentionConfig(dim, num_heads)
        layers = [
            DecoderLayer(
                LayerNorm.create(dim),
                ProjectionSet.create(rng, acfg),
                LayerNorm.create(dim),
                ProjectionSet.create(rng, acfg, kv_dim=memory_dim or dim),
                LayerNorm.create(dim),
                FeedForward.create(rng, dim),
            )
            for _ in range(num_layers)
        ]
        emb = param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        return cls(emb, layers, LayerNorm.create(dim), max_len)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _decode_row(ids: np.ndarray, memory: Tensor, params: DecoderParams) -> Tensor:
    n = len(ids)
    x = T.scale(T.take_rows(params.embedding, ids), np.sqrt(params.dim))
    x = T.add(x, params.positions[:n])
    causal = _causal_mask(n)
    for layer in params.layers:
        x = T.add(x, multi_head(layer.norm_self(x), layer.self_attn, causal))
        x = T.add(x, multi_head(layer.norm_cross(x), layer.cross_attn, None, memory=memory))
        x = T.add(x, layer.ffn(layer.norm_ffn(x)))
    x = params.norm_out(x)
    return T.matmul(x, T.transpose(params.embedding))


def decode_train(batch: CaptionBatch, memory: Tensor, params: DecoderParams) -> Tensor:
    """Logits of shape (B, S, |V|); position t scores the token at t + 1."""
    b, s = batch.shape
    if s > params.max_len:
        raise DecoderConfigError(f"sequence length {s} exceeds positional table of {params.max_len}")
    ids = batch.ids
    if batch.mask_positions is not None:
        ids = np.where(batch.mask_positions, MASK, ids)
    rows = [_decode_row(ids[i], memory, params) for i in range(b)]
    return T.stack(rows, axis=0)


def caption_loss(logits: Tensor, token_ids: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over non-PAD targets."""
    targets = np.asarray(token_ids)[:, 1:]
    bi, ti = np.nonzero(targets != PAD)
    if bi.size == 0:
        return Tensor(0.0)
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[bi, ti, targets[bi, ti]]
    return T.scale(T.reduce_mean(picked), -1.0)


def token_accuracy(logits: Tensor, token_ids: np.ndarray) -> tuple[int, int]:
    """(correct, total) argmax predictions over non-PAD next-token targets."""
    targets = np.asarray(token_ids)[:, 1:]
    pred = logits.data[:, :-1].argmax(axis=-1)
    live = targets != PAD
    return int(((pred == targets) & live).sum()), int(live.sum())


def generate(memory: Tensor, params: DecoderParams, max_len: int | None = None) -> list[int]:
    """Greedy decoding from BOS; returns ids after BOS, without the final EOS."""
    limit = min(max_len or params.max_len, params.max_len)
    seq = [BOS]
    with no_grad():
        while len(seq) < limit:
            logits = _decode_row(np.asarray(seq), memory, params)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            seq.append(nxt)
    return seq[1:]
