"""Input-order schemes, highlight masks, and model input sequence assembly.

An order scheme arranges the document (D), question (Q), and option (O)
segments around the delimiter token; the highlight mask marks document
tokens that are content words shared with the question or option, which the
model later offsets with one of two trained vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .text import (
    DELIM_ID,
    END_ID,
    START_ID,
    Token,
    is_content,
    surfaces,
)

SEGMENTS = ("D", "Q", "O")

# Reserved positions per sequence: start, delimiter, end, plus one slack slot
# so a sequence never occupies the full context window.
RESERVED_POSITIONS = 4


class SchemeError(ValueError):
    """Raised for malformed order scheme specifications."""


@dataclass(frozen=True)
class OrderScheme:
    """Segments before and after the delimiter, in emission order."""

    pre: tuple[str, ...]
    post: tuple[str, ...]

    def __post_init__(self):
        combined = self.pre + self.post
        if sorted(combined) != sorted(SEGMENTS) or not self.pre or not self.post:
            raise SchemeError(
                f"scheme must split D, Q, O into two non-empty groups, got {combined}")

    @property
    def name(self) -> str:
        return "".join(self.pre).lower() + "_" + "".join(self.post).lower()

    def __str__(self) -> str:
        return self.name


DQ_O = OrderScheme(("D", "Q"), ("O",))
O_QD = OrderScheme(("O",), ("Q", "D"))
QD_O = OrderScheme(("Q", "D"), ("O",))
O_DQ = OrderScheme(("O",), ("D", "Q"))

PRESETS = {s.name: s for s in (DQ_O, O_QD, QD_O, O_DQ)}


def all_schemes() -> list[OrderScheme]:
    """All 12 valid schemes: 6 segment orders x 2 delimiter placements."""
    out = []
    for perm in itertools.permutations(SEGMENTS):
        for cut in (1, 2):
            out.append(OrderScheme(tuple(perm[:cut]), tuple(perm[cut:])))
    return out


def parse_scheme(spec: str) -> OrderScheme:
    """Parse a preset name ("dq_o") or the generic "pre:post" form ("qd:o")."""
    spec = spec.strip().lower()
    if spec in PRESETS:
        return PRESETS[spec]
    sep = ":" if ":" in spec else "_"
    parts = spec.split(sep)
    if len(parts) != 2:
        raise SchemeError(f"cannot parse scheme {spec!r}")
    try:
        return OrderScheme(tuple(parts[0].upper()), tuple(parts[1].upper()))
    except SchemeError:
        raise
    except Exception:
        raise SchemeError(f"cannot parse scheme {spec!r}") from None


def reverse_scheme(scheme: OrderScheme) -> OrderScheme:
    """The scheme whose segment sequence is the reverse of the input's.

    Segment order flips around the delimiter while token order inside each
    segment stays untouched, pairing dq_o with o_qd and qd_o with o_dq.
    """
    seq = scheme.pre + scheme.post
    rev = tuple(reversed(seq))
    cut = len(scheme.post)
    return OrderScheme(rev[:cut], rev[cut:])


def compute_highlight_mask(doc_tokens: Sequence[Token | str], doc_tags: Sequence[str],
                           question_tokens: Sequence[Token | str],
                           option_tokens: Sequence[Token | str]) -> np.ndarray:
    """Per-document-token relevance bits.

    Bit j is 1 exactly when token j bears a content-word tag and its surface
    appears (exact lowercased match) in the question or the option.
    """
    doc = surfaces(doc_tokens)
    if len(doc) != len(doc_tags):
        raise ValueError(f"{len(doc)} document tokens but {len(doc_tags)} tags")
    relevant = set(surfaces(question_tokens)) | set(surfaces(option_tokens))
    mask = np.zeros(len(doc), dtype=np.uint8)
    for j, (surface, tag) in enumerate(zip(doc, doc_tags)):
        if is_content(tag) and surface in relevant:
            mask[j] = 1
    return mask


@dataclass(frozen=True)
class BuiltSequence:
    """A model-ready token id sequence with per-position segment labels.

    ``doc_map`` maps sequence positions of document tokens back to the index
    of that token in the (truncated) document, so a highlight mask computed
    over document tokens can be applied at the right positions.
    """

    ids: tuple[int, ...]
    segments: tuple[str, ...]
    doc_map: dict[int, int]

    def __len__(self) -> int:
        return len(self.ids)


def build_sequence(doc_ids: Sequence[int], question_ids: Sequence[int],
                   option_ids: Sequence[int], scheme: OrderScheme,
                   max_len: int) -> BuiltSequence:
    """Assemble [start, pre-segments, delimiter, post-segments, end].

    Only the document is ever truncated, from its tail, to fit the length
    budget; a question and option that cannot fit alongside the specials is
    an error.
    """
    budget = max_len - RESERVED_POSITIONS - len(question_ids) - len(option_ids)
    if budget < 0:
        raise ValueError(
            f"question ({len(question_ids)}) + option ({len(option_ids)}) tokens "
            f"cannot fit in max_len {max_len}")
    doc_ids = list(doc_ids[:budget])

    by_segment = {"D": doc_ids, "Q": list(question_ids), "O": list(option_ids)}
    ids = [START_ID]
    segments = ["START"]
    doc_map: dict[int, int] = {}

    def emit(group: tuple[str, ...]):
        for seg in group:
            for k, token_id in enumerate(by_segment[seg]):
                if seg == "D":
                    doc_map[len(ids)] = k
                ids.append(token_id)
                segments.append(seg)

    emit(scheme.pre)
    ids.append(DELIM_ID)
    segments.append("DELIM")
    emit(scheme.post)
    ids.append(END_ID)
    segments.append("END")
    return BuiltSequence(ids=tuple(ids), segments=tuple(segments), doc_map=doc_map)


def highlight_signs(seq: BuiltSequence, mask: np.ndarray | Sequence[int]) -> np.ndarray:
    """Per-position highlight selector: +1 for masked document tokens, -1 for
    the remaining document tokens, 0 for everything else."""
    mask = np.asarray(mask)
    signs = np.zeros(len(seq), dtype=np.int8)
    for pos, doc_index in seq.doc_map.items():
        signs[pos] = 1 if mask[doc_index] else -1
    return signs
