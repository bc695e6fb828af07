"""Depth-limited autoregressive decoding of the entity forest.

Decoding starts from a begin marker, scores first fragments for every
type at depth 1, then grows each surviving (type, fragment) path
independently: the parent fragment is embedded from the path's own
scratchpad, an LSTM step advances the path state, the scratchpad is
rewritten through attention so later steps see what was generated, and
the detector proposes continuation fragments that must start strictly
after the parent ends.  A path ends when nothing clears the threshold
or the depth cap is hit; only path ends are emitted as entities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EntityForest, ForestNode, Fragment
from .detector import BiaffineDetector, decode_grid, upper_triangle_mask
from .encoder import EncoderOutput
from .layers import Conv1dSame, Embedding, Linear, LSTMCell, ParamStore


class DepthLimitError(Exception):
    """An LSTM step was requested past the decoding depth cap."""


@dataclass(frozen=True)
class DecoderConfig:
    type_dim: int = 32
    hidden: int | None = None  # defaults to the scratchpad width
    attention_dim: int = 64
    conv_kernel: int = 3
    length_table_size: int = 32

    def __post_init__(self) -> None:
        dims = (self.type_dim, self.attention_dim, self.conv_kernel, self.length_table_size)
        if any(d <= 0 for d in dims):
            raise ValueError("all decoder dimensions must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    """max_depth 1 decodes contiguous entities only; 3 allows fragments."""

    max_depth: int = 3
    threshold: float = 0.5
    max_children: int = 8

    def __post_init__(self) -> None:
        if self.max_depth not in (1, 2, 3):
            raise ValueError("max_depth must be 1, 2, or 3")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")
        if self.max_children < 1:
            raise ValueError("max_children must be >= 1")


@dataclass
class DecoderState:
    """Per-path decoder state; never mutated, so forking a path is free."""

    hidden: tuple[Tensor, Tensor]
    scratchpad: Tensor  # (n, state_dim)
    next_input: Tensor
    depth: int

    @property
    def length(self) -> int:
        return self.scratchpad.shape[0]


class ForestDecoder:
    def __init__(
        self,
        store: ParamStore,
        config: DecoderConfig,
        state_dim: int,
        encoder_hidden: int,
        num_types: int,
        name: str = "decoder",
    ):
        self.config = config
        self.state_dim = state_dim
        self.num_types = num_types
        self.hidden_size = config.hidden if config.hidden is not None else state_dim
        input_dim = state_dim + config.type_dim
        self.lstm = LSTMCell(store, f"{name}/lstm", input_dim, self.hidden_size)
        self.begin_input = store.create(f"{name}/begin", (input_dim,), "normal")
        self.type_table = Embedding(store, f"{name}/types", num_types, config.type_dim)
        self.length_table = Embedding(
            store, f"{name}/lengths", config.length_table_size, state_dim
        )
        self.inner_lstm = LSTMCell(store, f"{name}/inner_lstm", state_dim, state_dim)
        self.attn_memory = Linear(
            store, f"{name}/attn_memory", state_dim, config.attention_dim
        )
        self.attn_query = Linear(
            store, f"{name}/attn_query", self.hidden_size, config.attention_dim, bias=False
        )
        self.attn_vector = store.create(
            f"{name}/attn_vector", (config.attention_dim,), "normal"
        )
        self.rewrite_conv = Conv1dSame(
            store, f"{name}/rewrite", 2 * state_dim, state_dim, config.conv_kernel
        )
        self.init_proj = (
            Linear(store, f"{name}/init_proj", encoder_hidden, self.hidden_size)
            if encoder_hidden != self.hidden_size
            else None
        )

    # ------------------------------------------------------------------
    # spec'd operations

    def init_state(self, encoder_output: EncoderOutput) -> DecoderState:
        """Depth-0 state: encoder final state seeds the LSTM, reduced
        states seed the scratchpad, and the begin marker is queued."""
        h0 = encoder_output.final_state
        if self.init_proj is not None:
            h0 = self.init_proj(h0)
        c0 = Tensor(np.zeros(self.hidden_size, dtype=h0.dtype))
        return DecoderState(
            hidden=(h0, c0),
            scratchpad=encoder_output.reduced,
            next_input=self.begin_input,
            depth=0,
        )

    def fragment_embedding(
        self, fragment: Fragment, type_index: int, scratchpad: Tensor
    ) -> Tensor:
        """Input vector for continuing a path below the given fragment.

        Sums an LSTM summary of the fragment's scratchpad rows, a
        fragment-length embedding (lengths clamp into the table), and
        the sum of the boundary rows; the type embedding is concatenated.
        """
        rows = scratchpad[fragment.start : fragment.end + 1]
        inner = self.inner_lstm.run(rows)
        length_index = min(
            fragment.end - fragment.start, self.config.length_table_size - 1
        )
        length_emb = self.length_table(length_index)
        boundary = scratchpad[fragment.start] + scratchpad[fragment.end]
        fragment_repr = inner + length_emb + boundary
        type_emb = self.type_table(type_index)
        return ad.concat([fragment_repr, type_emb], axis=0)

    def step(self, state: DecoderState, x: Tensor, max_depth: int = 3) -> DecoderState:
        """One LSTM step; the scratchpad is untouched (see scratchpad_update)."""
        if state.depth >= max_depth:
            raise DepthLimitError(
                f"cannot step at depth {state.depth} with max depth {max_depth}"
            )
        hidden = self.lstm(x, state.hidden)
        return replace(state, hidden=hidden, depth=state.depth + 1)

    def scratchpad_update(self, scratchpad: Tensor, query: Tensor) -> Tensor:
        """Rewrite the scratchpad given the new decoder hidden state.

        Additive attention over positions produces a context vector; the
        context is concatenated onto every position and a convolution
        maps the result back to the scratchpad width.
        """
        n = scratchpad.shape[0]
        scores = ad.einsum2(
            "a,na->n",
            self.attn_vector,
            ad.tanh(self.attn_memory(scratchpad) + self.attn_query(query)),
        )
        weights = ad.softmax(scores, axis=-1)
        context = ad.einsum2("n,nd->d", weights, scratchpad)
        tiled = Tensor(np.zeros((n, 1), dtype=scratchpad.dtype)) + context
        return self.rewrite_conv(ad.concat([tiled, scratchpad], axis=1))

    def advance(self, state: DecoderState, x: Tensor, max_depth: int = 3) -> DecoderState:
        """step + scratchpad_update, returning the full next-depth state."""
        stepped = self.step(state, x, max_depth)
        scratchpad = self.scratchpad_update(state.scratchpad, stepped.hidden[0])
        return replace(stepped, scratchpad=scratchpad)

    # ------------------------------------------------------------------
    # inference

    def decode_forest(
        self,
        encoder_output: EncoderOutput,
        detector: BiaffineDetector,
        config: DecodeConfig,
        type_labels: Sequence[str],
    ) -> EntityForest:
        """Grow the full forest for one sentence.

        Only path ends become entities: an inner node that spawned
        children is treated as a prefix, not a mention of its own.
        """
        with ad.no_grad():
            return self._decode(encoder_output, detector, config, type_labels)

    def _decode(self, encoder_output, detector, config, type_labels):
        n = encoder_output.length
        initial = self.init_state(encoder_output)
        state = self.advance(initial, initial.next_input, config.max_depth)
        grid, _ = detector.biaffine_scores(state.scratchpad)
        roots = decode_grid(grid, config.threshold, max_children=config.max_children)
        forest = EntityForest()
        for type_index, fragment in sorted(roots):
            tree = forest.trees.setdefault(type_labels[type_index], {})
            node = tree.setdefault(fragment, ForestNode(fragment))
            self._extend(
                node, (fragment,), type_index, state, detector, config, n
            )
        return forest

    def _extend(self, node, chain, type_index, state, detector, config, n):
        depth = len(chain)
        if depth >= config.max_depth or chain[-1].end + 1 >= n:
            node.is_entity = True
            return
        parent = chain[-1]
        x = self.fragment_embedding(parent, type_index, state.scratchpad)
        next_state = self.advance(state, x, config.max_depth)
        grid, _ = detector.biaffine_scores(next_state.scratchpad)
        mask = upper_triangle_mask(n, self.num_types, min_start=parent.end + 1)
        children = decode_grid(
            grid,
            config.threshold,
            mask=mask,
            restrict_type=type_index,
            max_children=config.max_children,
        )
        if not children:
            node.is_entity = True
            return
        for _, fragment in sorted(children):
            child = node.children.setdefault(fragment, ForestNode(fragment))
            self._extend(
                child, chain + (fragment,), type_index, next_state, detector, config, n
            )
