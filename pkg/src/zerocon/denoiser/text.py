"""Toy text conditioning: word tokenizer and a learned embedding table."""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
from torch import nn

PAD, UNK = "<pad>", "<unk>"
_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextEmbedding:
    """Token-level conditioning ``(L, d)`` and its pooled summary ``(d,)``.

    ``pooled`` is always the mean over all ``L`` token rows, so any additive
    change to ``tokens`` moves it linearly.
    """

    tokens: torch.Tensor
    pooled: torch.Tensor

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor) -> "TextEmbedding":
        if tokens.ndim != 2:
            raise ValueError(f"token embedding must be (L, d), got {tuple(tokens.shape)}")
        if not torch.isfinite(tokens).all():
            raise ValueError("token embedding has non-finite entries")
        return cls(tokens=tokens, pooled=tokens.mean(dim=0))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.tokens.shape)


class WordTokenizer:
    """Lower-cases, splits on non-alphanumerics, pads/truncates to ``max_len``."""

    def __init__(self, vocab: list[str], max_len: int = 16):
        words = [w for w in vocab if w not in (PAD, UNK)]
        self.vocab = [PAD, UNK] + sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len

    def words(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def __call__(self, text: str) -> list[int]:
        ids = [self.index.get(w, 1) for w in self.words(text)][: self.max_len]
        return ids + [0] * (self.max_len - len(ids))


class ToyTextEncoder(nn.Module):
    """Context-free token embedding table; trained jointly with the toy denoiser."""

    def __init__(self, vocab: list[str], max_len: int = 16, dim: int = 16):
        super().__init__()
        self.tokenizer = WordTokenizer(vocab, max_len)
        self.max_len = max_len
        self.dim = dim
        self.table = nn.Embedding(len(self.tokenizer.vocab), dim)
        nn.init.normal_(self.table.weight, std=1.0)

    @property
    def vocab(self) -> list[str]:
        return self.tokenizer.vocab

    def token_ids(self, texts: list[str]) -> torch.Tensor:
        return torch.tensor([self.tokenizer(t) for t in texts], dtype=torch.long)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)

    def forward(self, texts: list[str]) -> torch.Tensor:
        return self.embed_ids(self.token_ids(texts))

    @torch.no_grad()
    def encode(self, text: str) -> TextEmbedding:
        if not text.strip():
            raise ValueError("cannot encode an empty prompt")
        return TextEmbedding.from_tokens(self([text])[0].detach().clone())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.max_len, self.dim)
