"""Word-level tokenization, sentence splitting, vocabulary, and POS tagging.

Everything downstream (highlight masks, question generation, model inputs)
runs on the lowercased word tokens produced here. A closed lexicon plus a
handful of suffix heuristics stand in for a trained POS tagger; only
membership in the content-word tagset matters to the rest of the pipeline.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from importlib import resources
from itertools import groupby
from typing import Iterable, NamedTuple, Sequence

PAD_ID = 0
START_ID = 1
DELIM_ID = 2
END_ID = 3
UNK_ID = 4

PAD_SURFACE = "<pad>"
START_SURFACE = "["
DELIM_SURFACE = "$"
END_SURFACE = "]"
UNK_SURFACE = "<unk>"

RESERVED_SURFACES = (PAD_SURFACE, START_SURFACE, DELIM_SURFACE, END_SURFACE, UNK_SURFACE)

SENTENCE_TERMINATORS = frozenset({".", "!", "?"})

NONE_TAG = "NONE"

PTB_TAGS = frozenset({
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD",
    "NN", "NNS", "NNP", "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR",
    "RBS", "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG", "VBN", "VBP",
    "VBZ", "WDT", "WP", "WP$", "WRB",
})

ALL_TAGS = PTB_TAGS | {NONE_TAG}

# Tags whose bearers count as content words for highlighting: nouns, verbs,
# adjectives, adverbs, numerals, and foreign words.
CONTENT_TAGS = frozenset({
    "NN", "NNP", "NNPS", "NNS",
    "VB", "VBD", "VBG", "VBN", "VBP", "VBZ",
    "JJ", "JJR", "JJS",
    "RB", "RBR", "RBS",
    "CD", "FW",
})


def is_content(tag: str) -> bool:
    """True if the tag marks a content word (noun/verb/adj/adv/numeral/FW)."""
    return tag in CONTENT_TAGS


@dataclass(frozen=True)
class Token:
    """One lowercased surface word with its vocabulary id."""

    surface: str
    id: int


class SentenceSpan(NamedTuple):
    """Half-open [start, end) token range of one sentence."""

    start: int
    end: int


class Vocab:
    """Immutable surface <-> id mapping with the five reserved entries first.

    Ids 0..4 are PAD, START "[", DELIM "$", END "]", UNK. Everything above
    comes from corpus frequency (ties broken lexicographically), so the same
    corpus and size always produce the same vocabulary.
    """

    def __init__(self, surfaces: Sequence[str]):
        surfaces = list(surfaces)
        if tuple(surfaces[:5]) != RESERVED_SURFACES:
            raise ValueError("vocabulary must start with the five reserved surfaces")
        self._surfaces = surfaces
        self._ids = {s: i for i, s in enumerate(surfaces)}
        if len(self._ids) != len(surfaces):
            raise ValueError("duplicate surface in vocabulary")

    def __len__(self) -> int:
        return len(self._surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._ids

    def id_of(self, surface: str) -> int:
        return self._ids.get(surface, UNK_ID)

    def surface_of(self, token_id: int) -> str:
        return self._surfaces[token_id]

    def encode(self, surfaces: Iterable[str]) -> list[int]:
        ids = self._ids
        return [ids.get(s, UNK_ID) for s in surfaces]

    def to_list(self) -> list[str]:
        return list(self._surfaces)

    @classmethod
    def from_list(cls, surfaces: Sequence[str]) -> "Vocab":
        return cls(surfaces)


def _split_surfaces(text: str) -> list[str]:
    """Lowercase and split into maximal alphanumeric runs and single marks.

    A token is either a run of alphanumeric characters or one non-space,
    non-alphanumeric character; whitespace only separates.
    """
    out: list[str] = []
    for is_word, group in groupby(text.lower(), key=str.isalnum):
        chars = list(group)
        if is_word:
            out.append("".join(chars))
        else:
            out.extend(c for c in chars if not c.isspace())
    return out


def tokenize(text: str, vocab: Vocab | None = None) -> list[Token]:
    """Tokenize text into lowercased word/punctuation tokens.

    Without a vocabulary every token gets the UNK id; the surfaces are what
    most of the pipeline consumes.
    """
    if vocab is None:
        return [Token(s, UNK_ID) for s in _split_surfaces(text)]
    return [Token(s, vocab.id_of(s)) for s in _split_surfaces(text)]


def surfaces(tokens: Sequence[Token | str]) -> list[str]:
    """Surface strings of a token sequence (accepts raw strings too)."""
    return [t.surface if isinstance(t, Token) else t for t in tokens]


def split_sentences(tokens: Sequence[Token | str]) -> list[SentenceSpan]:
    """Partition a token sequence into sentence spans.

    A sentence ends right after a terminator token (".", "!", "?"); a
    trailing unterminated fragment forms its own sentence. The spans cover
    [0, len) exactly once.
    """
    spans: list[SentenceSpan] = []
    start = 0
    for i, surface in enumerate(surfaces(tokens)):
        if surface in SENTENCE_TERMINATORS:
            spans.append(SentenceSpan(start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append(SentenceSpan(start, len(tokens)))
    return spans


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Build a frequency vocabulary over tokenized corpus text.

    Keeps the most frequent surfaces up to max_size (reserved entries
    included in the budget), breaking frequency ties lexicographically.
    """
    if max_size <= len(RESERVED_SURFACES):
        raise ValueError(f"max_size must exceed {len(RESERVED_SURFACES)} reserved entries")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_split_surfaces(text))
    for reserved in RESERVED_SURFACES:
        counts.pop(reserved, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max_size - len(RESERVED_SURFACES)
    kept = [surface for surface, _ in ranked[:budget]]
    return Vocab(list(RESERVED_SURFACES) + kept)


def load_lexicon(path: str | None = None) -> dict[str, str]:
    """Load a surface<TAB>TAG lexicon; defaults to the bundled one."""
    if path is None:
        data = resources.files("mrc.data").joinpath("lexicon.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            data = fh.read()
    lexicon: dict[str, str] = {}
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            surface, tag = line.split("\t")
        except ValueError:
            raise ValueError(f"lexicon line {lineno}: expected 'surface<TAB>TAG'") from None
        if tag not in ALL_TAGS:
            raise ValueError(f"lexicon line {lineno}: unknown tag {tag!r}")
        lexicon[surface.lower()] = tag
    return lexicon


_BUNDLED_LEXICON: dict[str, str] | None = None


def bundled_lexicon() -> dict[str, str]:
    global _BUNDLED_LEXICON
    if _BUNDLED_LEXICON is None:
        _BUNDLED_LEXICON = load_lexicon()
    return _BUNDLED_LEXICON


def _tag_one(surface: str, lexicon: dict[str, str]) -> str:
    if not any(c.isalnum() for c in surface):
        return NONE_TAG
    tag = lexicon.get(surface)
    if tag is not None:
        return tag
    if surface[0].isdigit():
        return "CD"
    if len(surface) > 4 and surface.endswith("ing"):
        return "VBG"
    if len(surface) > 3 and surface.endswith("ed"):
        return "VBD"
    if len(surface) > 2 and surface.endswith("ly"):
        return "RB"
    return "NN"


def pos_tag(tokens: Sequence[Token | str], lexicon: dict[str, str] | None = None) -> list[str]:
    """Tag each token with its majority lexicon tag or a suffix heuristic.

    Punctuation gets NONE; unknown words fall back on digit/-ing/-ed/-ly
    suffix rules and default to NN.
    """
    if lexicon is None:
        lexicon = bundled_lexicon()
    return [_tag_one(s, lexicon) for s in surfaces(tokens)]
