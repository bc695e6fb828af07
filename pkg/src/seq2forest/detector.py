"""Biaffine scoring of (start, type, end) triples.

Every token pair is scored for every entity type in one shot: two MLPs
produce start- and end-sensitive views of each token state, a per-type
bilinear form plus a per-type linear term over the start view gives the
logit, and a sigmoid turns it into an independent probability per cell.
Decoding thresholds the grid; training applies a summed binary cross
entropy over the unmasked cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Fragment
from .layers import MLP, ParamStore


@dataclass(frozen=True)
class DetectorConfig:
    mlp_hidden: int = 64
    biaffine_dim: int = 64
    activation: str = "tanh"
    per_type_bias: bool = False  # the plain bilinear+linear form has no bias


@dataclass
class ScoreGrid:
    """Probabilities p[start, type, end], all strictly inside (0, 1)."""

    probabilities: np.ndarray

    @property
    def length(self) -> int:
        return self.probabilities.shape[0]

    @property
    def num_types(self) -> int:
        return self.probabilities.shape[1]


@dataclass
class GoldGrid:
    """Binary supervision y[start, type, end] with its cell mask."""

    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.targets.shape != self.mask.shape:
            raise ValueError("gold grid and mask shapes differ")
        if np.any((self.targets != 0) & ~self.mask.astype(bool)):
            raise ValueError("gold cell set outside the mask")


def upper_triangle_mask(n: int, num_types: int, min_start: int = 0) -> np.ndarray:
    """Boolean (n, K, n) mask of cells with start <= end and start >= min_start."""
    starts = np.arange(n)
    ends = np.arange(n)
    ok = (starts[:, None] <= ends[None, :]) & (starts[:, None] >= min_start)
    return np.broadcast_to(ok[:, None, :], (n, num_types, n)).copy()


class BiaffineDetector:
    def __init__(
        self,
        store: ParamStore,
        config: DetectorConfig,
        num_types: int,
        input_dim: int,
        name: str = "detector",
    ):
        if num_types < 1:
            raise ValueError("num_types must be >= 1")
        self.config = config
        self.num_types = num_types
        self.start_mlp = MLP(
            store,
            f"{name}/start_mlp",
            input_dim,
            config.mlp_hidden,
            config.biaffine_dim,
            config.activation,
        )
        self.end_mlp = MLP(
            store,
            f"{name}/end_mlp",
            input_dim,
            config.mlp_hidden,
            config.biaffine_dim,
            config.activation,
        )
        db = config.biaffine_dim
        self.bilinear = store.create(f"{name}/U", (num_types, db, db), "normal")
        self.linear = store.create(f"{name}/V", (num_types, db), "normal")
        self.bias = (
            store.create(f"{name}/bias", (num_types,), "zeros")
            if config.per_type_bias
            else None
        )

    def score_logits(self, states: Tensor) -> Tensor:
        """Raw (n, K, n) logits over start x type x end."""
        start_view = self.start_mlp(states)
        end_view = self.end_mlp(states)
        partial = ad.einsum2("kbc,ic->ikb", self.bilinear, start_view)
        logits = ad.einsum2("ikb,jb->ikj", partial, end_view)
        linear = ad.einsum2("kc,ic->ik", self.linear, start_view)
        n = states.shape[0]
        logits = logits + linear.reshape(n, self.num_types, 1)
        if self.bias is not None:
            logits = logits + self.bias.reshape(1, self.num_types, 1)
        return logits

    def biaffine_scores(self, states: Tensor) -> tuple[ScoreGrid, Tensor]:
        """Sigmoid probabilities for the full grid plus the raw logits.

        Cells with start > end are scored too; masking them is the
        caller's business (loss mask, decode mask).
        """
        logits = self.score_logits(states)
        probs = ad._sigmoid(logits.data.astype(np.float64))
        return ScoreGrid(probs), logits


def span_loss(logits: Tensor, gold: GoldGrid) -> Tensor:
    """Summed binary cross entropy over unmasked cells, from raw logits.

    An entirely masked grid contributes exactly 0, which is what
    termination supervision relies on.
    """
    if logits.shape != gold.targets.shape:
        raise ValueError(
            f"logit shape {logits.shape} does not match gold shape {gold.targets.shape}"
        )
    return ad.bce_with_logits_sum(logits, gold.targets, gold.mask)


def decode_grid(
    grid: ScoreGrid | np.ndarray,
    threshold: float,
    mask: np.ndarray | None = None,
    restrict_type: int | None = None,
    max_children: int = 8,
) -> set[tuple[int, Fragment]]:
    """Cells strictly above threshold, as (type index, fragment) pairs.

    Start > end cells are always dropped.  If more than ``max_children``
    cells survive, the highest-probability ones win (ties broken by cell
    index, so decoding is deterministic).
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    probs = grid.probabilities if isinstance(grid, ScoreGrid) else np.asarray(grid)
    n, num_types, _ = probs.shape
    allowed = probs > threshold
    allowed &= upper_triangle_mask(n, num_types)
    if mask is not None:
        allowed &= mask.astype(bool)
    if restrict_type is not None:
        channel = np.zeros(num_types, dtype=bool)
        channel[restrict_type] = True
        allowed &= channel[None, :, None]
    cells = np.argwhere(allowed)
    if len(cells) > max_children:
        ranked = sorted(
            (tuple(c) for c in cells),
            key=lambda c: (-probs[c], c[0], c[1], c[2]),
        )
        cells = ranked[:max_children]
    return {(int(k), Fragment(int(i), int(j))) for i, k, j in cells}
