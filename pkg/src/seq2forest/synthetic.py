"""Synthetic corpus generation with controllable entity structure.

Generates deterministic corpora whose entities exhibit the structural
phenomena the decoder must handle: flat, nested, overlapping, and
discontinuous (two- and three-fragment) mentions.  Structure draws are
per-entity Bernoulli trials, so the realized proportions converge to the
configured probabilities; the generator keeps its own bookkeeping so
downstream statistics can be checked against ground truth.
"""

from __future__ import annotations

import random
import string
from collections import Counter
from dataclasses import dataclass, field

from .corpus import AnnotatedSentence, CorpusStats, Entity, Fragment

_MAX_PLACEMENT_TRIES = 40


class ConfigError(Exception):
    """The requested configuration cannot produce a valid corpus."""


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generator.

    ``p_two_fragment`` and ``p_three_fragment`` are per-entity
    probabilities of drawing a discontinuous structure; ``p_nested`` and
    ``p_overlapping`` are per-entity probabilities (after the first
    entity of a sentence) of anchoring the new entity inside, or onto,
    an already placed one.  Entities not drawn as nested/overlapping are
    placed on unused tokens, so token sharing only arises where drawn.
    """

    num_sentences: int = 1000
    vocab_size: int = 60
    sentence_length: tuple[int, int] = (8, 14)
    num_types: int = 3
    entities_per_sentence: tuple[int, int] = (1, 3)
    p_two_fragment: float = 0.15
    p_three_fragment: float = 0.05
    p_nested: float = 0.10
    p_overlapping: float = 0.10
    max_fragment_len: int = 2

    def validate(self) -> None:
        lo, hi = self.sentence_length
        elo, ehi = self.entities_per_sentence
        if self.num_sentences < 0:
            raise ConfigError("num_sentences must be >= 0")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.num_types < 1:
            raise ConfigError("num_types must be >= 1")
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad sentence_length range ({lo}, {hi})")
        if not (0 <= elo <= ehi):
            raise ConfigError(f"bad entities_per_sentence range ({elo}, {ehi})")
        if self.max_fragment_len < 1:
            raise ConfigError("max_fragment_len must be >= 1")
        probs = (
            self.p_two_fragment,
            self.p_three_fragment,
            self.p_nested,
            self.p_overlapping,
        )
        if any(p < 0 or p > 1 for p in probs):
            raise ConfigError("probabilities must be in [0, 1]")
        if self.p_two_fragment + self.p_three_fragment > 1:
            raise ConfigError("p_two_fragment + p_three_fragment must be <= 1")
        if self.p_nested + self.p_overlapping > 1:
            raise ConfigError("p_nested + p_overlapping must be <= 1")
        # Minimum room: m unit fragments separated by single-token gaps.
        if self.p_three_fragment > 0 and lo < 5:
            raise ConfigError("three-fragment entities need sentences of >= 5 tokens")
        if self.p_two_fragment > 0 and lo < 3:
            raise ConfigError("two-fragment entities need sentences of >= 3 tokens")


@dataclass
class SynthReport:
    """What the generator actually emitted, counted as it emitted it."""

    sentence_count: int = 0
    entity_count: int = 0
    discontinuous_count: int = 0
    overlapping_count: int = 0
    fragment_count_histogram: Counter = field(default_factory=Counter)
    drawn_two_fragment: int = 0
    drawn_three_fragment: int = 0
    drawn_nested: int = 0
    drawn_overlapping: int = 0
    placement_fallbacks: int = 0
    dropped_entities: int = 0

    def stats(self) -> CorpusStats:
        pct = (
            lambda k: 100.0 * k / self.entity_count if self.entity_count else 0.0
        )  # noqa: E731
        return CorpusStats(
            sentence_count=self.sentence_count,
            entity_count=self.entity_count,
            overlapping_pct=pct(self.overlapping_count),
            discontinuous_pct=pct(self.discontinuous_count),
            fragment_count_histogram=dict(self.fragment_count_histogram),
        )


def _make_vocab(size: int, rng: random.Random) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < size:
        word = "".join(
            rng.choice(string.ascii_lowercase) for _ in range(rng.randint(3, 8))
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _free_fragment_starts(
    length: int, n: int, lower: int, occupied: set[int]
) -> list[int]:
    starts = []
    for s in range(lower, n - length + 1):
        if all(i not in occupied for i in range(s, s + length)):
            starts.append(s)
    return starts


def _place_free(
    rng: random.Random, n: int, m: int, max_len: int, occupied: set[int]
) -> tuple[Fragment, ...] | None:
    """Place m fragments on unoccupied tokens with >=1-token gaps."""
    for lens in (
        [rng.randint(1, max_len) for _ in range(m)],
        [1] * m,  # fallback: minimal footprint
    ):
        frags: list[Fragment] = []
        lower = 0
        ok = True
        for length in lens:
            # Leave room for the remaining fragments when choosing a start.
            remaining = len(lens) - len(frags) - 1
            tail_need = sum(lens[len(frags) + 1 :]) + remaining
            starts = [
                s
                for s in _free_fragment_starts(length, n, lower, occupied)
                if s + length + tail_need <= n
            ]
            if not starts:
                ok = False
                break
            s = rng.choice(starts)
            frags.append(Fragment(s, s + length - 1))
            lower = s + length + 1
        if ok:
            return tuple(frags)
    return None


def _place_anchored(
    rng: random.Random,
    n: int,
    m: int,
    max_len: int,
    anchor_token: int,
) -> tuple[Fragment, ...] | None:
    """Place m fragments so the first one covers anchor_token."""
    length = rng.randint(1, max_len)
    lo = max(0, anchor_token - length + 1)
    hi = min(anchor_token, n - length)
    if lo > hi:
        length = 1
        lo = hi = anchor_token
        if anchor_token >= n:
            return None
    start = rng.randint(lo, hi)
    frags = [Fragment(start, start + length - 1)]
    lower = frags[0].end + 2
    for j in range(1, m):
        tail_need = (m - j - 1) * 2
        if lower + tail_need >= n:
            return None
        s = rng.randint(lower, n - 1 - tail_need)
        frags.append(Fragment(s, s))
        lower = s + 2
    return tuple(frags)


def _place_nested(
    rng: random.Random, container: Fragment
) -> tuple[Fragment, ...] | None:
    """A single fragment strictly inside the container fragment."""
    if len(container) < 2:
        return None
    sub_len = rng.randint(1, len(container) - 1)
    start = rng.randint(container.start, container.end - sub_len + 1)
    return (Fragment(start, start + sub_len - 1),)


def generate_with_report(
    config: SynthConfig, seed: int
) -> tuple[list[AnnotatedSentence], SynthReport]:
    """Generate a corpus and the bookkeeping describing it."""
    config.validate()
    rng = random.Random(seed)
    vocab = _make_vocab(config.vocab_size, rng)
    types = [f"T{i}" for i in range(config.num_types)]
    report = SynthReport()
    sentences: list[AnnotatedSentence] = []

    for _ in range(config.num_sentences):
        n = rng.randint(*config.sentence_length)
        tokens = tuple(rng.choice(vocab) for _ in range(n))
        target = rng.randint(*config.entities_per_sentence)
        entities: list[Entity] = []
        occupied: set[int] = set()

        for _slot in range(target):
            placed = False
            for _try in range(_MAX_PLACEMENT_TRIES):
                r = rng.random()
                if r < config.p_three_fragment:
                    m = 3
                elif r < config.p_three_fragment + config.p_two_fragment:
                    m = 2
                else:
                    m = 1
                relation = "free"
                if entities:
                    r2 = rng.random()
                    if r2 < config.p_nested and m == 1:
                        relation = "nested"
                    elif r2 < config.p_nested + config.p_overlapping:
                        relation = "overlap"

                frags: tuple[Fragment, ...] | None = None
                if relation == "nested":
                    containers = [
                        f
                        for ent in entities
                        for f in ent.fragments
                        if len(f) >= 2
                    ]
                    if containers:
                        frags = _place_nested(rng, rng.choice(containers))
                    if frags is None:
                        relation = "free"
                        report.placement_fallbacks += 1
                if relation == "overlap":
                    host = rng.choice(entities)
                    anchor = rng.choice(sorted(host.token_indices()))
                    frags = _place_anchored(
                        rng, n, m, config.max_fragment_len, anchor
                    )
                    if frags is None:
                        relation = "free"
                        report.placement_fallbacks += 1
                if relation == "free":
                    frags = _place_free(
                        rng, n, m, config.max_fragment_len, occupied
                    )
                if frags is None:
                    continue

                entity = Entity(rng.choice(types), frags)
                if entity in entities:
                    continue

                entities.append(entity)
                occupied.update(entity.token_indices())
                report.entity_count += 1
                report.fragment_count_histogram[m] += 1
                if m == 2:
                    report.drawn_two_fragment += 1
                    report.discontinuous_count += 1
                elif m == 3:
                    report.drawn_three_fragment += 1
                    report.discontinuous_count += 1
                if relation == "nested":
                    report.drawn_nested += 1
                elif relation == "overlap":
                    report.drawn_overlapping += 1
                placed = True
                break
            if not placed:
                report.dropped_entities += 1

        coverage: Counter[int] = Counter()
        for ent in entities:
            coverage.update(ent.token_indices())
        report.overlapping_count += sum(
            1
            for ent in entities
            if any(coverage[i] > 1 for i in ent.token_indices())
        )

        report.sentence_count += 1
        sentences.append(AnnotatedSentence(tokens, frozenset(entities)))

    return sentences, report


def generate_synthetic(config: SynthConfig, seed: int) -> list[AnnotatedSentence]:
    """Deterministic synthetic corpus for the given config and seed."""
    sentences, _ = generate_with_report(config, seed)
    return sentences
