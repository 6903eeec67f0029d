"""Frozen text embeddings: a deterministic hashed-token provider standing in for a large language model."""

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch

_TOKEN = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")
EMPTY_TOKEN = "<empty>"


def tokenize(caption):
    return _TOKEN.findall(caption.lower())


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    tokens: np.ndarray  # (L, D)
    pooled: np.ndarray  # (D,)
    is_null: bool = False

    @property
    def dim(self):
        return self.tokens.shape[1]


class HashedTextEncoder:
    """Maps each normalized token to a fixed pseudo-random vector.

    The vector for a token depends only on ``(seed, token)`` through a
    BLAKE2b digest, so the provider is frozen and needs no stored table.
    Vectors have i.i.d. N(0, 1/dim) entries.
    """

    def __init__(self, dim=64, seed=0):
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache = {}

    def token_vector(self, token):
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim) / np.sqrt(self.dim)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    def embed(self, caption):
        if caption is None:
            zeros = np.zeros((1, self.dim))
            return TextEmbedding(zeros, zeros[0], is_null=True)
        toks = tokenize(caption) or [EMPTY_TOKEN]
        tokens = np.stack([self.token_vector(t) for t in toks])
        return TextEmbedding(tokens, tokens.mean(axis=0), is_null=False)

    def pooled(self, captions):
        return np.stack([self.embed(c).pooled for c in captions])

    def to_dict(self):
        return {"kind": "hashed", "dim": self.dim, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(dim=d["dim"], seed=d["seed"])


def embed_text(provider, caption):
    return provider.embed(caption)


@dataclass
class TextBatch:
    """Padded batch of text embeddings as torch tensors."""

    tokens: torch.Tensor  # (B, L, D)
    mask: torch.Tensor  # (B, L) bool, True = real token
    pooled: torch.Tensor  # (B, D)
    is_null: torch.Tensor  # (B,) bool

    @classmethod
    def collate(cls, embeddings, dtype=torch.float32):
        B = len(embeddings)
        L = max(e.tokens.shape[0] for e in embeddings)
        D = embeddings[0].dim
        tokens = np.zeros((B, L, D))
        mask = np.zeros((B, L), dtype=bool)
        for i, e in enumerate(embeddings):
            n = e.tokens.shape[0]
            tokens[i, :n] = e.tokens
            mask[i, :n] = True
        return cls(
            tokens=torch.as_tensor(tokens, dtype=dtype),
            mask=torch.as_tensor(mask),
            pooled=torch.as_tensor(np.stack([e.pooled for e in embeddings]), dtype=dtype),
            is_null=torch.as_tensor([e.is_null for e in embeddings], dtype=torch.bool),
        )

    @classmethod
    def null(cls, batch_size, dim, dtype=torch.float32):
        return cls(
            tokens=torch.zeros(batch_size, 1, dim, dtype=dtype),
            mask=torch.ones(batch_size, 1, dtype=torch.bool),
            pooled=torch.zeros(batch_size, dim, dtype=dtype),
            is_null=torch.ones(batch_size, dtype=torch.bool),
        )

    def __len__(self):
        return self.tokens.shape[0]

    def to(self, dtype):
        return TextBatch(self.tokens.to(dtype), self.mask, self.pooled.to(dtype), self.is_null)

    def select(self, index):
        return TextBatch(self.tokens[index], self.mask[index], self.pooled[index], self.is_null[index])

    def with_null(self, drop):
        """Copy with rows where ``drop`` is True marked as null text."""
        return TextBatch(self.tokens, self.mask, self.pooled, self.is_null | drop)
