"""Import of character-offset standoff annotations.

Supports the common clinical-corpus convention where an annotation line
is ``ID<TAB>TYPE START END[;START END]*<TAB>SURFACE`` with half-open
character offsets into an accompanying text file.  Offsets are mapped
onto a whitespace/punctuation tokenization of the text; each character
span becomes the minimal covering token range, and touching or
overlapping token ranges are merged into one fragment.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import AnnotatedSentence, CorpusError, Entity, Fragment

log = logging.getLogger(__name__)

_PUNCT = set(string.punctuation)

CharSpan = tuple[int, int]


class AlignmentError(CorpusError):
    """A character span does not line up with token boundaries (strict mode)."""


@dataclass(frozen=True)
class Token:
    text: str
    start: int  # character offset, inclusive
    end: int  # character offset, exclusive


def tokenize(text: str) -> list[Token]:
    """Split on whitespace, then peel leading/trailing punctuation.

    Internal punctuation (hyphens, apostrophes) stays attached, so
    "joint-pain" is one token but "pain," is two.
    """
    tokens: list[Token] = []
    offset = 0
    for chunk in text.split():
        start = text.index(chunk, offset)
        offset = start + len(chunk)
        lo, hi = 0, len(chunk)
        while lo < hi and chunk[lo] in _PUNCT:
            tokens.append(Token(chunk[lo], start + lo, start + lo + 1))
            lo += 1
        trailing: list[Token] = []
        while hi > lo and chunk[hi - 1] in _PUNCT:
            trailing.append(Token(chunk[hi - 1], start + hi - 1, start + hi))
            hi -= 1
        if lo < hi:
            tokens.append(Token(chunk[lo:hi], start + lo, start + hi))
        tokens.extend(reversed(trailing))
    return tokens


def _covering_token_range(
    span: CharSpan, tokens: Sequence[Token], strict: bool
) -> tuple[int, int]:
    cs, ce = span
    if cs >= ce:
        raise AlignmentError(f"empty character span ({cs}, {ce})")
    covered = [
        i for i, tok in enumerate(tokens) if tok.start < ce and tok.end > cs
    ]
    if not covered:
        raise AlignmentError(
            f"character span ({cs}, {ce}) covers no token"
        )
    first, last = covered[0], covered[-1]
    aligned = tokens[first].start == cs and tokens[last].end == ce
    if not aligned:
        if strict:
            raise AlignmentError(
                f"character span ({cs}, {ce}) does not align with token "
                f"boundaries [{tokens[first].start}, {tokens[last].end})"
            )
        log.warning(
            "span (%d, %d) snapped to covering tokens %d..%d", cs, ce, first, last
        )
    return first, last


def _merge_token_ranges(ranges: list[tuple[int, int]]) -> list[Fragment]:
    """Sort ranges and merge any that overlap or touch."""
    merged: list[list[int]] = []
    for start, end in sorted(ranges):
        if merged and start <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [Fragment(s, e) for s, e in merged]


def import_standoff(
    text: str,
    annotations: Iterable[tuple[str, Sequence[CharSpan]]],
    strict: bool = True,
) -> AnnotatedSentence:
    """Map character-offset annotations onto a tokenized sentence.

    ``annotations`` pairs an entity type with its half-open character
    spans.  In strict mode a span that starts or ends mid-token raises
    AlignmentError; in lenient mode it snaps to the covering tokens and
    a warning is logged.
    """
    tokens = tokenize(text)
    if not tokens:
        raise AlignmentError("text has no tokens")
    entities = set()
    for type_id, spans in annotations:
        ranges = [_covering_token_range(span, tokens, strict) for span in spans]
        entities.add(Entity(type_id, tuple(_merge_token_ranges(ranges))))
    return AnnotatedSentence(tuple(tok.text for tok in tokens), frozenset(entities))


def parse_span_list(spec: str) -> list[CharSpan]:
    """Parse the "START END[;START END]*" span-list convention."""
    spans = []
    for part in spec.split(";"):
        fields = part.split()
        if len(fields) != 2:
            raise AlignmentError(f"malformed span list {spec!r}")
        spans.append((int(fields[0]), int(fields[1])))
    return spans


def parse_standoff(
    text: str, annotation_lines: Iterable[str], strict: bool = True
) -> AnnotatedSentence:
    """Parse annotation lines of the form ID<TAB>TYPE SPANS<TAB>SURFACE."""
    annotations = []
    for lineno, line in enumerate(annotation_lines, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise AlignmentError(f"annotation line {lineno}: expected tab-separated fields")
        body = fields[1]
        type_id, _, span_spec = body.partition(" ")
        if not span_spec:
            raise AlignmentError(f"annotation line {lineno}: missing span list")
        spans = parse_span_list(span_spec)
        if len(fields) >= 3:
            surface = fields[2]
            joined = " ".join(text[s:e] for s, e in spans)
            if surface and joined != surface:
                log.warning(
                    "annotation line %d: surface %r differs from text %r",
                    lineno,
                    surface,
                    joined,
                )
        annotations.append((type_id, spans))
    return import_standoff(text, annotations, strict=strict)


def load_standoff_file(text_path, annotation_path, strict: bool = True) -> AnnotatedSentence:
    with open(text_path, encoding="utf-8") as fh:
        text = fh.read().rstrip("\n")
    with open(annotation_path, encoding="utf-8") as fh:
        return parse_standoff(text, fh, strict=strict)
