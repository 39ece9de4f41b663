"""Prompt tokenizer, closed vocabulary, and the mean-pooling prompt encoder."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Embedding, Linear, Module
from .tensor import Tensor

UNK = "<unk>"
_SPLIT = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, drop empties."""
    return [t for t in _SPLIT.split(text.lower()) if t]


class Vocabulary:
    """Frozen token -> id map. Id 0 is the reserved UNK slot."""

    def __init__(self, tokens: Sequence[str]):
        ordered = sorted(set(tokens) - {UNK})
        self.id_of = {UNK: 0}
        for i, tok in enumerate(ordered, start=1):
            self.id_of[tok] = i
        self.tokens = [UNK] + ordered

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.id_of.get(tok, 0) for tok in tokenize(text)]

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    @classmethod
    def from_captions(cls, captions: Iterable[str], extra_tokens: Sequence[str] = ()) -> "Vocabulary":
        toks: list[str] = []
        for cap in captions:
            toks.extend(tokenize(cap))
        for tok in extra_tokens:
            toks.extend(tokenize(tok))
        return cls(toks)


class PromptEncoder(Module):
    """Embeds prompt tokens, mean-pools them (order-invariant by construction)
    and mixes through a 2-layer perceptron. The empty prompt returns the
    learned null-conditioning vector used for classifier-free guidance."""

    def __init__(self, vocab: Vocabulary, cond_dim: int, rng: np.random.Generator):
        self._vocab = vocab
        self.cond_dim = cond_dim
        self.embed = Embedding(len(vocab), cond_dim, rng)
        self.mix1 = Linear(cond_dim, cond_dim, rng)
        self.mix2 = Linear(cond_dim, cond_dim, rng)
        self.null_cond = Tensor(rng.normal(0.0, 0.02, cond_dim), requires_grad=True)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def encode_batch(self, prompts: Sequence[str]) -> Tensor:
        """Encode a batch of prompts to (B, cond_dim) conditioning vectors."""
        n = len(prompts)
        id_lists = [self._vocab.encode(p) for p in prompts]
        max_len = max((len(ids) for ids in id_lists), default=0)
        empty_rows = np.array([len(ids) == 0 for ids in id_lists])
        if max_len == 0:
            return T.reshape(self.null_cond, (1, self.cond_dim)) * Tensor(np.ones((n, 1)))
        ids = np.zeros((n, max_len), dtype=np.int64)
        weights = np.zeros((n, max_len, 1), dtype=T.get_default_dtype())
        for i, row in enumerate(id_lists):
            if row:
                ids[i, : len(row)] = row
                weights[i, : len(row), 0] = 1.0 / len(row)
        emb = self.embed(ids)  # (B, L, D)
        pooled = T.tsum(T.mul(emb, Tensor(weights)), axis=1)
        mixed = self.mix2(T.silu(self.mix1(pooled)))
        if empty_rows.any():
            keep = (~empty_rows).astype(T.get_default_dtype()).reshape(n, 1)
            swap = empty_rows.astype(T.get_default_dtype()).reshape(n, 1)
            mixed = T.mul(mixed, Tensor(keep)) + T.mul(
                T.reshape(self.null_cond, (1, self.cond_dim)), Tensor(swap)
            )
        return mixed

    def encode(self, prompt: str) -> np.ndarray:
        with T.no_grad():
            return self.encode_batch([prompt]).data[0].copy()

    def null_vector(self) -> np.ndarray:
        return self.null_cond.data.copy()
