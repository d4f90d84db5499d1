"""Entity categories, category-classes, spans, BIO tag schemes and corpus handling.

Everything in this module is plain Python and immutable after construction;
tensors enter the picture only downstream of here.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)


class EntityCategory(Enum):
    """The nine entity categories of the medical corpus."""

    DIS = "dis"
    SYM = "sym"
    PRO = "pro"
    EQU = "equ"
    DRU = "dru"
    ITE = "ite"
    BOD = "bod"
    DEP = "dep"
    MIC = "mic"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


#: Canonical category order, used wherever a deterministic ordering is needed.
CATEGORY_ORDER: tuple[EntityCategory, ...] = tuple(EntityCategory)

_CATEGORY_BY_NAME = {c.value: c for c in EntityCategory}

#: Categories that may contain other entities nested inside them.
NESTING_OUTER = EntityCategory.SYM


class CorpusError(ValueError):
    """Base class for corpus loading problems."""


class CorpusParseError(CorpusError):
    """Malformed JSON; message carries the line number."""


class CorpusSchemaError(CorpusError):
    """Structurally wrong record (unknown category, missing key, bad type)."""


class CorpusDataError(CorpusError):
    """Semantically invalid example; message names the example index."""


@dataclass(frozen=True)
class CategoryClassPartition:
    """Ordered partition of the nine categories into disjoint category-classes.

    The class order defines class ids: class 0 is decoded by the first CRF and,
    in the default partition, holds the nesting-outer category.
    """

    classes: tuple[frozenset[EntityCategory], ...]

    def __post_init__(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("a partition needs at least two category-classes")
        seen: set[EntityCategory] = set()
        for i, cls in enumerate(self.classes):
            if not cls:
                raise ValueError(f"category-class {i} is empty")
            if seen & cls:
                raise ValueError(f"category-class {i} overlaps an earlier class")
            seen |= cls
        if seen != set(EntityCategory):
            missing = sorted(c.value for c in set(EntityCategory) - seen)
            raise ValueError(f"partition does not cover categories: {missing}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_of(self, category: EntityCategory) -> int:
        for i, cls in enumerate(self.classes):
            if category in cls:
                return i
        raise KeyError(category)  # unreachable: partition covers everything

    def ordered_members(self, class_id: int) -> tuple[EntityCategory, ...]:
        """Members of one class, in canonical category order."""
        cls = self.classes[class_id]
        return tuple(c for c in CATEGORY_ORDER if c in cls)

    @classmethod
    def from_names(cls, groups: Sequence[Sequence[str]]) -> "CategoryClassPartition":
        return cls(tuple(frozenset(parse_category(n) for n in g) for g in groups))

    @classmethod
    def parse(cls, text: str) -> "CategoryClassPartition":
        """Parse the flat-config syntax ``sym|dis,pro,...`` (classes split on |)."""
        groups = [part.split(",") for part in text.split("|")]
        return cls.from_names([[n.strip() for n in g if n.strip()] for g in groups])

    def serialize(self) -> str:
        return "|".join(
            ",".join(c.value for c in self.ordered_members(i))
            for i in range(self.num_classes)
        )


def parse_category(name: str) -> EntityCategory:
    try:
        return _CATEGORY_BY_NAME[name]
    except KeyError:
        raise CorpusSchemaError(f"unknown entity category {name!r}") from None


def default_partition() -> CategoryClassPartition:
    """Two classes: the nesting-outer category alone, then the other eight."""
    outer = frozenset({NESTING_OUTER})
    rest = frozenset(set(EntityCategory) - outer)
    return CategoryClassPartition((outer, rest))


@dataclass(frozen=True)
class Sentence:
    """A character-level sentence; every position is one text unit."""

    text: str

    def __post_init__(self) -> None:
        if len(self.text) < 1:
            raise ValueError("sentence must contain at least one character")

    def __len__(self) -> int:
        return len(self.text)


@dataclass(frozen=True)
class EntitySpan:
    """Inclusive character span [start, end] carrying one category."""

    start: int
    end: int
    category: EntityCategory

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise ValueError(f"bad span bounds ({self.start}, {self.end})")

    def __contains__(self, other: "EntitySpan") -> bool:
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start <= other.end and other.start <= self.end

    def __len__(self) -> int:
        return self.end - self.start + 1


def span_sort_key(span: EntitySpan) -> tuple[int, int, str]:
    return (span.start, span.end, span.category.value)


@dataclass(frozen=True)
class LabeledExample:
    """A sentence plus its gold entity spans."""

    sentence: Sentence
    spans: frozenset[EntitySpan]

    def __post_init__(self) -> None:
        n = len(self.sentence)
        for s in self.spans:
            if s.end >= n:
                raise CorpusDataError(
                    f"span ({s.start}, {s.end}, {s.category.value}) exceeds "
                    f"sentence length {n}"
                )
        violation = nesting_violation(self.spans)
        if violation:
            raise CorpusDataError(violation)


def nesting_violation(spans: Iterable[EntitySpan]) -> str | None:
    """Return a diagnostic if the span set breaks the corpus nesting rule.

    Overlapping spans must stand in a containment relation and the container
    must belong to the nesting-outer category; same-category spans must never
    partially overlap.
    """
    ordered = sorted(spans, key=span_sort_key)
    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            if b.start > a.end:
                break
            if not a.overlaps(b):
                continue
            if a.category == b.category and not (b in a or a in b):
                return (
                    f"same-category spans ({a.start},{a.end}) and "
                    f"({b.start},{b.end}) of {a.category.value!r} partially overlap"
                )
            if b in a and a in b:
                # identical extents: either span may play the container role
                if a.category != b.category and NESTING_OUTER not in (a.category, b.category):
                    return (
                        f"coextensive spans ({a.start},{a.end}) of "
                        f"{a.category.value!r} and {b.category.value!r}; only "
                        f"{NESTING_OUTER.value!r} may contain other entities"
                    )
            elif b in a or a in b:
                outer = a if b in a else b
                if outer.category is not NESTING_OUTER and a.category != b.category:
                    return (
                        f"span nested inside ({outer.start},{outer.end},"
                        f"{outer.category.value}); only {NESTING_OUTER.value!r} "
                        "may contain other entities"
                    )
            else:
                return (
                    f"spans ({a.start},{a.end},{a.category.value}) and "
                    f"({b.start},{b.end},{b.category.value}) partially overlap"
                )
    return None


# --------------------------------------------------------------------------
# BIO tag schemes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TagScheme:
    """BIO tag inventory for one category-class.

    Tag id 0 is O; each member category c contributes B-c then I-c in canonical
    order; the last id (``num_tags - 1``) is the reserved padding slot, which
    never appears at a valid position.
    """

    class_id: int
    categories: tuple[EntityCategory, ...]

    @classmethod
    def for_class(
        cls, partition: CategoryClassPartition, class_id: int
    ) -> "TagScheme":
        return cls(class_id, partition.ordered_members(class_id))

    @property
    def tags(self) -> tuple[str, ...]:
        out = ["O"]
        for c in self.categories:
            out += [f"B-{c.value}", f"I-{c.value}"]
        return tuple(out)

    @property
    def num_tags(self) -> int:
        """d_t: O + B/I per category + one padding slot."""
        return 2 * len(self.categories) + 2

    @property
    def pad_id(self) -> int:
        return self.num_tags - 1

    @property
    def outside_id(self) -> int:
        return 0

    def begin_id(self, category: EntityCategory) -> int:
        return 1 + 2 * self.categories.index(category)

    def inside_id(self, category: EntityCategory) -> int:
        return 2 + 2 * self.categories.index(category)

    def split(self, tag_id: int) -> tuple[EntityCategory | None, bool]:
        """Map a tag id to (category, is_begin); O and padding give (None, False)."""
        if tag_id == 0 or tag_id == self.pad_id:
            return None, False
        cat = self.categories[(tag_id - 1) // 2]
        return cat, (tag_id - 1) % 2 == 0


@dataclass(frozen=True)
class TagSequence:
    """Tag ids for one class over one sentence, padded with the padding id."""

    class_id: int
    ids: tuple[int, ...]
    valid_len: int

    def __post_init__(self) -> None:
        if not (1 <= self.valid_len <= len(self.ids)):
            raise ValueError(
                f"valid_len {self.valid_len} out of range for {len(self.ids)} ids"
            )


def project_to_class_tags(
    example: LabeledExample,
    partition: CategoryClassPartition,
    class_id: int,
    max_len: int | None = None,
) -> TagSequence:
    """Flatten one class's spans of an example into a BIO tag sequence.

    Spans outside the class are ignored. If two in-class spans overlap, the
    longer one wins; equal lengths are broken by the smaller start index.
    """
    scheme = TagScheme.for_class(partition, class_id)
    members = set(scheme.categories)
    n = len(example.sentence)
    length = n if max_len is None else max_len
    if length < n:
        raise ValueError(f"max_len {max_len} shorter than sentence length {n}")

    candidates = [s for s in example.spans if s.category in members]
    candidates.sort(key=lambda s: (-len(s), s.start, s.end, s.category.value))
    taken = [False] * n
    ids = [scheme.outside_id] * n
    for s in candidates:
        if any(taken[s.start : s.end + 1]):
            continue
        for p in range(s.start, s.end + 1):
            taken[p] = True
            ids[p] = scheme.begin_id(s.category) if p == s.start else scheme.inside_id(s.category)
    ids += [scheme.pad_id] * (length - n)
    return TagSequence(class_id, tuple(ids), n)


def extract_spans(tags: TagSequence, scheme: TagScheme) -> frozenset[EntitySpan]:
    """Recover entity spans as maximal B-c (I-c)* runs.

    Ill-formed sequences (as Viterbi may emit) are repaired: an I-c without a
    compatible predecessor opens a new span; the repair is logged.
    """
    spans: list[EntitySpan] = []
    open_cat: EntityCategory | None = None
    open_start = 0

    def close(end: int) -> None:
        nonlocal open_cat
        if open_cat is not None:
            spans.append(EntitySpan(open_start, end, open_cat))
            open_cat = None

    for p in range(tags.valid_len):
        cat, is_begin = scheme.split(tags.ids[p])
        if cat is None:
            close(p - 1)
        elif is_begin:
            close(p - 1)
            open_cat, open_start = cat, p
        else:
            if open_cat is not cat:
                log.debug(
                    "repaired orphan I-%s at position %d (class %d)",
                    cat.value, p, tags.class_id,
                )
                close(p - 1)
                open_cat, open_start = cat, p
    close(tags.valid_len - 1)
    return frozenset(spans)


# --------------------------------------------------------------------------
# Corpus JSON
# --------------------------------------------------------------------------


def load_corpus(
    path: str | Path, fmt: str = "cmeee", strict: bool = True
) -> list[LabeledExample]:
    """Load a corpus file in the documented JSON schema.

    The schema is a list of objects ``{"text": ..., "entities": [...]}`` with
    entities ``{"start_idx", "end_idx", "type", "entity"}`` and end_idx
    inclusive. With ``strict`` (the default) any invalid example aborts the
    load; otherwise invalid examples are skipped with a logged diagnostic.
    """
    if fmt != "cmeee":
        raise ValueError(f"unknown corpus format {fmt!r}")
    raw = Path(path).read_text(encoding="utf-8")
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CorpusParseError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(records, list):
        raise CorpusSchemaError(f"{path}: top-level value must be a list")

    examples: list[LabeledExample] = []
    for idx, rec in enumerate(records):
        try:
            examples.append(_parse_record(rec, idx))
        except CorpusDataError as e:
            if strict:
                raise
            log.warning("skipping example %d: %s", idx, e)
    return examples


def _parse_record(rec: object, idx: int) -> LabeledExample:
    if not isinstance(rec, dict):
        raise CorpusSchemaError(f"example {idx}: record must be an object")
    text = rec.get("text")
    if not isinstance(text, str) or not text:
        raise CorpusSchemaError(f"example {idx}: missing or empty 'text'")
    raw_entities = rec.get("entities", [])
    if not isinstance(raw_entities, list):
        raise CorpusSchemaError(f"example {idx}: 'entities' must be a list")

    spans = set()
    for ent in raw_entities:
        if not isinstance(ent, dict):
            raise CorpusSchemaError(f"example {idx}: entity must be an object")
        try:
            start = int(ent["start_idx"])
            end = int(ent["end_idx"])
            category = parse_category(str(ent["type"]))
        except KeyError as e:
            raise CorpusSchemaError(f"example {idx}: entity missing key {e}") from None
        except (TypeError, ValueError) as e:
            raise CorpusSchemaError(f"example {idx}: bad entity field: {e}") from None
        if not (0 <= start <= end < len(text)):
            raise CorpusDataError(
                f"example {idx}: span ({start}, {end}) out of bounds for "
                f"text of length {len(text)}"
            )
        spans.add(EntitySpan(start, end, category))

    violation = nesting_violation(spans)
    if violation:
        raise CorpusDataError(f"example {idx}: {violation}")
    try:
        return LabeledExample(Sentence(text), frozenset(spans))
    except CorpusError as e:
        raise CorpusDataError(f"example {idx}: {e}") from None


def corpus_to_json(examples: Iterable[LabeledExample]) -> list[dict]:
    out = []
    for ex in examples:
        entities = [
            {
                "start_idx": s.start,
                "end_idx": s.end,
                "type": s.category.value,
                "entity": ex.sentence.text[s.start : s.end + 1],
            }
            for s in sorted(ex.spans, key=span_sort_key)
        ]
        out.append({"text": ex.sentence.text, "entities": entities})
    return out


def save_corpus(examples: Iterable[LabeledExample], path: str | Path) -> None:
    """Write a corpus in the same schema load_corpus reads (byte-deterministic)."""
    payload = json.dumps(corpus_to_json(examples), ensure_ascii=False, indent=1)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def category_counts(examples: Iterable[LabeledExample]) -> dict[str, int]:
    counts = {c.value: 0 for c in CATEGORY_ORDER}
    for ex in examples:
        for s in ex.spans:
            counts[s.category.value] += 1
    return counts


# --------------------------------------------------------------------------
# Synthetic nested corpus
# --------------------------------------------------------------------------

# Disjoint single-character alphabets. Each flat category is recoverable from
# character identity plus run context; the nesting-outer category wraps its
# own characters around an optional nested inner span, so inner-vs-standalone
# is decidable from the flanking characters.
FILLER_CHARS = "abcdefghijkl"
_ALPHABETS: dict[EntityCategory, str] = {
    EntityCategory.SYM: "ABCDEFGH",
    EntityCategory.BOD: "012345",
    EntityCategory.DIS: "mnopqr",
    EntityCategory.DRU: "stuvwx",
    EntityCategory.ITE: "IJKLMN",
    EntityCategory.PRO: "OPQRST",
}
#: Inner category nested inside the outer one in synthetic sentences.
NESTED_INNER = EntityCategory.BOD
#: Probability that an outer-category span contains a nested inner span.
NESTING_PROB = 0.5
#: Probability that a filler position draws an ambiguous (entity-alphabet) char.
NOISE_PROB = 0.02
MIN_SENT_LEN, MAX_SENT_LEN = 5, 30

_FLAT_CATEGORIES = (
    EntityCategory.BOD,
    EntityCategory.DIS,
    EntityCategory.DRU,
    EntityCategory.ITE,
    EntityCategory.PRO,
)
_FLAT_WEIGHTS = (0.30, 0.25, 0.15, 0.15, 0.15)


def _filler(rng: random.Random, length: int) -> str:
    noisy = _ALPHABETS[EntityCategory.SYM] + _ALPHABETS[NESTED_INNER]
    return "".join(
        rng.choice(noisy) if rng.random() < NOISE_PROB else rng.choice(FILLER_CHARS)
        for _ in range(length)
    )


def _entity_text(rng: random.Random, category: EntityCategory, length: int) -> str:
    return "".join(rng.choice(_ALPHABETS[category]) for _ in range(length))


def _emit_outer(rng: random.Random, pos: int, budget: int) -> tuple[str, list[EntitySpan]]:
    """One nesting-outer span: prefix [+ nested inner] + suffix.

    The nested coin is flipped before any size is drawn and both outcomes fit
    within any budget >= 5, so the observed nesting rate stays at the coin's
    probability instead of drifting with sentence-length pressure.
    """
    nested = rng.random() < NESTING_PROB
    prefix_n = rng.randint(2, 4)
    suffix_n = rng.randint(1, 3)
    inner_n = rng.randint(2, 3) if nested else 0
    while prefix_n + inner_n + suffix_n > budget:
        if prefix_n > 2:
            prefix_n -= 1
        elif inner_n > 2:
            inner_n -= 1
        else:
            suffix_n -= 1
    prefix = _entity_text(rng, NESTING_OUTER, prefix_n)
    inner = _entity_text(rng, NESTED_INNER, inner_n) if nested else ""
    suffix = _entity_text(rng, NESTING_OUTER, suffix_n)
    text = prefix + inner + suffix
    spans = [EntitySpan(pos, pos + len(text) - 1, NESTING_OUTER)]
    if nested:
        spans.append(
            EntitySpan(pos + len(prefix), pos + len(prefix) + len(inner) - 1, NESTED_INNER)
        )
    return text, spans


def _emit_flat(rng: random.Random, pos: int, budget: int) -> tuple[str, list[EntitySpan]]:
    cat = rng.choices(_FLAT_CATEGORIES, weights=_FLAT_WEIGHTS)[0]
    text = _entity_text(rng, cat, min(rng.randint(2, 4), budget))
    return text, [EntitySpan(pos, pos + len(text) - 1, cat)]


def _build_sentence(rng: random.Random) -> LabeledExample:
    target = rng.randint(MIN_SENT_LEN, MAX_SENT_LEN)
    parts: list[str] = []
    spans: list[EntitySpan] = []
    pos = 0
    need_sep = False  # entities are always separated by at least one filler char
    while pos < target:
        budget = target - pos
        if not need_sep and budget >= 2 and rng.random() < 0.55:
            if budget >= 5 and rng.random() < 0.45:
                text, new = _emit_outer(rng, pos, budget)
            else:
                text, new = _emit_flat(rng, pos, budget)
            need_sep = True
        else:
            text, new = _filler(rng, min(budget, rng.randint(1, 3))), []
            need_sep = False
        parts.append(text)
        spans.extend(new)
        pos += len(text)
    return LabeledExample(Sentence("".join(parts)), frozenset(spans))


def generate_synthetic_corpus(seed: int, size: int) -> list[LabeledExample]:
    """Deterministic nested-entity corpus from a small template grammar.

    Each outer-category span contains a nested inner-category span with
    probability NESTING_PROB; sentence lengths lie in [5, 30]; six categories
    appear across the two default classes.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = random.Random(seed)
    return [_build_sentence(rng) for _ in range(size)]


def nesting_frequency(examples: Iterable[LabeledExample]) -> float:
    """Fraction of nesting-outer spans that contain another entity span."""
    outer_total = 0
    outer_nested = 0
    for ex in examples:
        outers = [s for s in ex.spans if s.category is NESTING_OUTER]
        rest = [s for s in ex.spans if s.category is not NESTING_OUTER]
        outer_total += len(outers)
        outer_nested += sum(1 for o in outers if any(r in o for r in rest))
    return outer_nested / outer_total if outer_total else 0.0
