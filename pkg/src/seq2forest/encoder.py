"""Token encoder: character CNN + position embeddings, self-attention
blocks, and a width-reducing convolution.

The reduced states double as the initial scratchpad the decoder writes
to, so their width is deliberately smaller than the contextual width.
A corpus-parallel file of precomputed per-token vectors can replace the
whole contextual stack, in which case only the reducing convolution has
trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    Conv1dSame,
    Embedding,
    Linear,
    ParamStore,
    ShapeError,
    TransformerBlock,
)


@dataclass(frozen=True)
class EncoderConfig:
    """Desk-scale defaults; see ``encoder_preset`` for the full-scale set."""

    char_dim: int = 50
    pos_dim: int = 30
    char_kernels: tuple[int, ...] = (3, 4, 5)
    char_filters: int = 200
    char_vocab_size: int = 128
    max_token_chars: int = 32
    num_blocks: int = 2
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: int | None = None
    reduce_kernel: int = 3
    reduced_dim: int = 64
    max_positions: int = 512
    precomputed: bool = False

    def __post_init__(self) -> None:
        dims = (
            self.char_dim,
            self.pos_dim,
            self.char_filters,
            self.char_vocab_size,
            self.max_token_chars,
            self.hidden_dim,
            self.reduced_dim,
            self.max_positions,
        )
        if any(d <= 0 for d in dims):
            raise ValueError("all encoder dimensions must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if not self.precomputed and self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.reduced_dim >= self.hidden_dim:
            raise ValueError("reduced_dim must be smaller than hidden_dim")
        if any(k < 1 for k in (*self.char_kernels, self.reduce_kernel)):
            raise ValueError("kernel sizes must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.char_dim + self.pos_dim

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.hidden_dim


def encoder_preset(name: str) -> EncoderConfig:
    """Named configurations: "desk" trains in minutes on a CPU, "paper"
    is the documented full-scale setting."""
    if name == "desk":
        return EncoderConfig()
    if name == "paper":
        return EncoderConfig(
            num_blocks=12, hidden_dim=768, num_heads=12, reduced_dim=128
        )
    raise ValueError(f"unknown encoder preset {name!r}")


@dataclass
class EncoderOutput:
    """Per-token states for one sentence."""

    contextual: Tensor  # (n, hidden_dim)
    reduced: Tensor  # (n, reduced_dim); the decoder's initial scratchpad
    final_state: Tensor  # (hidden_dim,)

    @property
    def length(self) -> int:
        return self.contextual.shape[0]


class Encoder:
    def __init__(self, store: ParamStore, config: EncoderConfig, name: str = "encoder"):
        self.config = config
        self.dtype = store.dtype
        if not config.precomputed:
            self.char_table = Embedding(
                store, f"{name}/chars", config.char_vocab_size, config.char_dim
            )
            self.char_convs = [
                Conv1dSame(
                    store, f"{name}/char_conv{k}", config.char_dim, config.char_filters, k
                )
                for k in config.char_kernels
            ]
            self.char_proj = Linear(
                store,
                f"{name}/char_proj",
                config.char_filters * len(config.char_kernels),
                config.char_dim,
            )
            self.pos_table = Embedding(
                store, f"{name}/positions", config.max_positions, config.pos_dim
            )
            self.input_proj = Linear(
                store, f"{name}/input_proj", config.input_dim, config.hidden_dim
            )
            self.blocks = [
                TransformerBlock(
                    store, f"{name}/block{i}", config.hidden_dim, config.num_heads, config.ffn
                )
                for i in range(config.num_blocks)
            ]
        self.reduce_conv = Conv1dSame(
            store,
            f"{name}/reduce",
            config.hidden_dim,
            config.reduced_dim,
            config.reduce_kernel,
        )

    def _char_ids(self, tokens: Sequence[str]) -> np.ndarray:
        cfg = self.config
        width = max(1, min(cfg.max_token_chars, max(len(t) for t in tokens)))
        ids = np.zeros((len(tokens), width), dtype=np.intp)
        for row, token in enumerate(tokens):
            for col, ch in enumerate(token[: cfg.max_token_chars]):
                if col >= width:
                    break
                ids[row, col] = min(ord(ch), cfg.char_vocab_size - 1)
        return ids

    def embed_tokens(self, tokens: Sequence[str]) -> Tensor:
        """Concatenated character-CNN and absolute-position embeddings."""
        cfg = self.config
        char_emb = self.char_table(self._char_ids(tokens))  # (n, chars, char_dim)
        pooled = [ad.amax(conv(char_emb), axis=1) for conv in self.char_convs]
        char_repr = self.char_proj(ad.concat(pooled, axis=1))
        positions = np.minimum(np.arange(len(tokens)), cfg.max_positions - 1)
        pos_repr = self.pos_table(positions)
        return ad.concat([char_repr, pos_repr], axis=1)

    def contextualize(self, embedded: Tensor) -> Tensor:
        """Stacked self-attention over the embedded tokens."""
        hidden = self.input_proj(embedded)
        for block in self.blocks:
            hidden = block(hidden)
        return hidden

    def reduce(self, contextual: Tensor) -> Tensor:
        """Length-preserving convolution down to the scratchpad width."""
        return self.reduce_conv(contextual)

    def encode(
        self, tokens: Sequence[str], precomputed: np.ndarray | None = None
    ) -> EncoderOutput:
        if self.config.precomputed:
            if precomputed is None:
                raise ShapeError(
                    "encoder is configured for precomputed embeddings but none were given"
                )
            vectors = np.asarray(precomputed, dtype=self.dtype)
            if vectors.ndim != 2 or vectors.shape != (len(tokens), self.config.hidden_dim):
                raise ShapeError(
                    f"precomputed embeddings of shape {vectors.shape} do not match "
                    f"({len(tokens)}, {self.config.hidden_dim})"
                )
            contextual = Tensor(vectors)
        else:
            contextual = self.contextualize(self.embed_tokens(tokens))
        reduced = self.reduce(contextual)
        return EncoderOutput(
            contextual=contextual,
            reduced=reduced,
            final_state=contextual[len(tokens) - 1],
        )


def load_precomputed_embeddings(path) -> list[np.ndarray]:
    """Read the corpus-parallel JSON-lines file of per-token vectors."""
    import json

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            vectors = np.asarray(record["vectors"], dtype=np.float64)
            if vectors.ndim != 2:
                raise ShapeError(f"line {lineno}: 'vectors' must be a 2-D array")
            out.append(vectors)
    return out
