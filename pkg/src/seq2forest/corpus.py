"""Data model for complex entity corpora.

Sentences are token sequences annotated with typed entities.  An entity
is an ordered list of one or more disjoint token spans ("fragments"):
a single fragment is an ordinary contiguous mention, two or more make
the entity discontinuous.  The module also provides the entity-forest
view consumed by the decoder (one tree per entity type, fragments as
nodes, shared fragment prefixes merged), JSON-lines (de)serialization,
and corpus statistics.

All objects are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence


class CorpusError(Exception):
    """Base class for corpus-level failures."""


class ParseError(CorpusError):
    """A record could not be parsed; message includes the line number."""


class ValidationError(CorpusError):
    """An otherwise well-formed record violates a data-model invariant."""


@dataclass(frozen=True, order=True)
class Fragment:
    """A contiguous token span, inclusive on both ends, 0-based."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise ValidationError(
                f"invalid fragment ({self.start}, {self.end}): need 0 <= start <= end"
            )

    def __len__(self) -> int:
        return self.end - self.start + 1

    def token_indices(self) -> range:
        return range(self.start, self.end + 1)

    def overlaps(self, other: "Fragment") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class Entity:
    """A typed mention made of one or more disjoint fragments.

    Fragments are normalized to sorted-by-start order on construction;
    two entities with the same type and the same fragments compare equal
    regardless of the order the fragments were given in.  Each fragment
    must start strictly after the previous one ends.

    The decoder only handles entities with at most three fragments, but
    that cap is enforced where it matters (forest construction, training
    supervision) rather than here, so that corpora containing longer
    entities can still be loaded and counted.
    """

    type_id: str
    fragments: tuple[Fragment, ...]

    def __post_init__(self) -> None:
        frags = tuple(sorted(self.fragments))
        if not frags:
            raise ValidationError("entity must have at least one fragment")
        for prev, cur in zip(frags, frags[1:]):
            if cur.start <= prev.end:
                raise ValidationError(
                    f"entity {self.type_id}: fragments {tuple((f.start, f.end) for f in frags)} "
                    "overlap or are out of order"
                )
        object.__setattr__(self, "fragments", frags)

    @property
    def is_discontinuous(self) -> bool:
        return len(self.fragments) > 1

    def token_indices(self) -> set[int]:
        out: set[int] = set()
        for frag in self.fragments:
            out.update(frag.token_indices())
        return out

    def describe(self) -> str:
        spans = ";".join(f"{f.start}-{f.end}" for f in self.fragments)
        return f"{self.type_id}[{spans}]"


@dataclass(frozen=True)
class AnnotatedSentence:
    """Tokens plus the set of gold entities over them."""

    tokens: tuple[str, ...]
    entities: frozenset[Entity]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "entities", frozenset(self.entities))
        if len(self.tokens) == 0:
            raise ValidationError("sentence must have at least one token")
        n = len(self.tokens)
        for ent in self.entities:
            if ent.fragments[-1].end >= n:
                raise ValidationError(
                    f"entity {ent.describe()} exceeds sentence length {n}"
                )

    def sorted_entities(self) -> list[Entity]:
        """Entities in a deterministic canonical order (for serialization)."""
        return sorted(self.entities, key=lambda e: (e.type_id, e.fragments))


@dataclass
class ForestNode:
    """One fragment in an entity tree.

    ``is_entity`` marks that the root-to-here fragment chain is itself a
    complete entity; without the marker a one-fragment entity would be
    indistinguishable from the mere prefix of a two-fragment one.
    """

    fragment: Fragment
    is_entity: bool = False
    children: dict[Fragment, "ForestNode"] = field(default_factory=dict)

    def sorted_children(self) -> list["ForestNode"]:
        return [self.children[f] for f in sorted(self.children)]


# Fragment chains deeper than this cannot be decoded.
MAX_FRAGMENTS = 3


@dataclass
class EntityForest:
    """Per-type fragment trees with shared prefixes merged.

    The forest object itself plays the role of the sentence-level dummy
    root; the children of that root are the entity types, and each type
    holds the first fragments of its entities as tree roots.
    """

    trees: dict[str, dict[Fragment, ForestNode]] = field(default_factory=dict)

    def walk(self) -> Iterator[tuple[str, tuple[Fragment, ...], ForestNode]]:
        """Yield (type_id, fragment chain, node) depth-first in canonical order."""
        for type_id in sorted(self.trees):
            stack = [
                ((node.fragment,), node)
                for node in reversed(
                    [self.trees[type_id][f] for f in sorted(self.trees[type_id])]
                )
            ]
            while stack:
                chain, node = stack.pop()
                yield type_id, chain, node
                for child in reversed(node.sorted_children()):
                    stack.append((chain + (child.fragment,), child))

    def node_count(self) -> int:
        return sum(1 for _ in self.walk())


def build_forest(entities: Iterable[Entity]) -> EntityForest:
    """Merge entities into per-type trees keyed by shared fragment prefixes.

    Raises ValidationError for entities with more than MAX_FRAGMENTS
    fragments; callers that want to tolerate them must filter first.
    """
    forest = EntityForest()
    for ent in entities:
        if len(ent.fragments) > MAX_FRAGMENTS:
            raise ValidationError(
                f"entity {ent.describe()} has {len(ent.fragments)} fragments; "
                f"at most {MAX_FRAGMENTS} are representable"
            )
        roots = forest.trees.setdefault(ent.type_id, {})
        level = roots
        node: ForestNode | None = None
        for frag in ent.fragments:
            node = level.get(frag)
            if node is None:
                node = ForestNode(frag)
                level[frag] = node
            level = node.children
        assert node is not None
        node.is_entity = True
    return forest


def flatten_forest(forest: EntityForest) -> frozenset[Entity]:
    """Inverse of build_forest: one entity per end-marked node."""
    out = []
    for type_id, chain, node in forest.walk():
        if node.is_entity:
            out.append(Entity(type_id, chain))
    return frozenset(out)


@dataclass(frozen=True)
class CorpusStats:
    """Aggregate corpus statistics.

    Overlapping means the entity shares at least one token with a
    different entity in the same sentence (nesting included);
    discontinuous means the entity has more than one fragment.
    Percentages are in [0, 100].
    """

    sentence_count: int
    entity_count: int
    overlapping_pct: float
    discontinuous_pct: float
    fragment_count_histogram: dict[int, int]

    def to_json_dict(self) -> dict:
        return {
            "sentence_count": self.sentence_count,
            "entity_count": self.entity_count,
            "overlapping_pct": self.overlapping_pct,
            "discontinuous_pct": self.discontinuous_pct,
            "fragment_count_histogram": {
                str(k): v for k, v in sorted(self.fragment_count_histogram.items())
            },
        }


def overlapping_entities(sentence: AnnotatedSentence) -> set[Entity]:
    """Entities that share at least one token with another entity."""
    coverage: Counter[int] = Counter()
    for ent in sentence.entities:
        coverage.update(ent.token_indices())
    return {
        ent
        for ent in sentence.entities
        if any(coverage[i] > 1 for i in ent.token_indices())
    }


def compute_stats(corpus: Sequence[AnnotatedSentence]) -> CorpusStats:
    n_entities = 0
    n_overlapping = 0
    n_discontinuous = 0
    histogram: Counter[int] = Counter()
    for sent in corpus:
        n_entities += len(sent.entities)
        n_overlapping += len(overlapping_entities(sent))
        for ent in sent.entities:
            histogram[len(ent.fragments)] += 1
            if ent.is_discontinuous:
                n_discontinuous += 1
    pct = lambda k: 100.0 * k / n_entities if n_entities else 0.0  # noqa: E731
    return CorpusStats(
        sentence_count=len(corpus),
        entity_count=n_entities,
        overlapping_pct=pct(n_overlapping),
        discontinuous_pct=pct(n_discontinuous),
        fragment_count_histogram=dict(histogram),
    )


def _sentence_from_record(record: dict, lineno: int) -> AnnotatedSentence:
    try:
        tokens = record["tokens"]
        raw_entities = record.get("entities", [])
    except (TypeError, KeyError) as exc:
        raise ParseError(f"line {lineno}: missing field {exc}") from exc
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise ParseError(f"line {lineno}: 'tokens' must be a list of strings")
    entities = []
    for raw in raw_entities:
        try:
            type_id = raw["type"]
            fragments = tuple(Fragment(int(s), int(e)) for s, e in raw["fragments"])
            entities.append(Entity(type_id, fragments))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"line {lineno}: malformed entity record: {exc}") from exc
    if len(entities) != len(set(entities)):
        raise ValidationError(f"line {lineno}: duplicate entities in record")
    try:
        return AnnotatedSentence(tuple(tokens), frozenset(entities))
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def parse_jsonl(stream: IO | Iterable[str | bytes]) -> list[AnnotatedSentence]:
    """Parse newline-delimited corpus records in file order.

    Each record is ``{"tokens": [...], "entities": [{"type": ...,
    "fragments": [[start, end], ...]}, ...]}`` with inclusive 0-based
    token indices.  Blank lines are skipped.  Errors carry the 1-based
    line number.
    """
    sentences = []
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: invalid JSON: {exc.msg}") from exc
        sentences.append(_sentence_from_record(record, lineno))
    return sentences


def load_jsonl(path) -> list[AnnotatedSentence]:
    with open(path, "rb") as fh:
        return parse_jsonl(fh)


def sentence_to_record(sentence: AnnotatedSentence) -> dict:
    return {
        "tokens": list(sentence.tokens),
        "entities": [
            {
                "type": ent.type_id,
                "fragments": [[f.start, f.end] for f in ent.fragments],
            }
            for ent in sentence.sorted_entities()
        ],
    }


def serialize_jsonl(corpus: Iterable[AnnotatedSentence], stream: IO[str]) -> None:
    """Write corpus records in canonical (byte-deterministic) form."""
    for sent in corpus:
        stream.write(json.dumps(sentence_to_record(sent), ensure_ascii=False))
        stream.write("\n")


def dump_jsonl(corpus: Iterable[AnnotatedSentence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        serialize_jsonl(corpus, fh)


def type_inventory(corpus: Iterable[AnnotatedSentence]) -> list[str]:
    """Sorted list of entity type labels present in the corpus."""
    types = {ent.type_id for sent in corpus for ent in sent.entities}
    return sorted(types)
