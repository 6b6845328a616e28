"""MRC instance data model, JSONL ingestion, and TF-IDF sentence retrieval."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .text import tokenize

DEFAULT_TOP_K = 50


class DatasetError(ValueError):
    """Raised when a dataset file fails validation; message carries the line."""


@dataclass(frozen=True)
class MrcInstance:
    """One document/question/options record with its gold label set.

    ``document`` may be empty (story-completion style tasks keep the text in
    the options) and ``question`` may be empty (no explicit question).
    ``per_option_documents``, when set, gives each option its own reference
    document, as produced by corpus retrieval; ``tags`` optionally carries
    pre-computed POS tags for the document tokens, grouped per sentence.
    """

    id: str
    document: str
    question: str
    options: tuple[str, ...]
    gold: frozenset[int]
    per_option_documents: tuple[str, ...] | None = None
    tags: tuple[tuple[str, ...], ...] | None = None

    def document_for(self, option_index: int) -> str:
        if self.per_option_documents is not None:
            return self.per_option_documents[option_index]
        return self.document

    def flat_tags(self) -> list[str] | None:
        if self.tags is None:
            return None
        return [t for group in self.tags for t in group]


@dataclass
class Dataset:
    """Ordered instances plus task-level flags."""

    instances: list[MrcInstance] = field(default_factory=list)
    multi_answer: bool = False
    corpus_only: bool = False

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i: int) -> MrcInstance:
        return self.instances[i]


def _validate_instance(obj: dict, lineno: int) -> MrcInstance:
    def fail(msg: str) -> DatasetError:
        return DatasetError(f"line {lineno}: {msg}")

    for key in ("id", "document", "question", "options", "gold"):
        if key not in obj:
            raise fail(f"missing field {key!r}")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise fail("id must be a non-empty string")
    if not isinstance(obj["document"], str) or not isinstance(obj["question"], str):
        raise fail("document and question must be strings")
    options = obj["options"]
    if (not isinstance(options, list) or len(options) < 2
            or not all(isinstance(o, str) for o in options)):
        raise fail("options must be a list of >= 2 strings")
    gold = obj["gold"]
    if not isinstance(gold, list) or not all(isinstance(g, int) for g in gold):
        raise fail("gold must be a list of option indices")
    for g in gold:
        if not 0 <= g < len(options):
            raise fail(f"gold index {g} out of range for {len(options)} options")
    if len(set(gold)) != len(gold):
        raise fail("duplicate gold index")

    per_option = obj.get("documents")
    if per_option is not None:
        if (not isinstance(per_option, list) or len(per_option) != len(options)
                or not all(isinstance(d, str) for d in per_option)):
            raise fail("documents must list one string per option")
        per_option = tuple(per_option)

    tags = obj.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or not all(
                isinstance(group, list) and all(isinstance(t, str) for t in group)
                for group in tags):
            raise fail("tags must be a list of per-sentence tag lists")
        if per_option is not None:
            raise fail("tags cannot be combined with per-option documents")
        flat = [t for group in tags for t in group]
        n_doc_tokens = len(tokenize(obj["document"]))
        if len(flat) != n_doc_tokens:
            raise fail(f"tags cover {len(flat)} tokens but document has {n_doc_tokens}")
        tags = tuple(tuple(group) for group in tags)

    return MrcInstance(
        id=obj["id"],
        document=obj["document"],
        question=obj["question"],
        options=tuple(options),
        gold=frozenset(gold),
        per_option_documents=per_option,
        tags=tags,
    )


def load_jsonl(path: str, multi_answer: bool | None = None,
               corpus_only: bool = False) -> Dataset:
    """Load and validate a JSONL dataset.

    ``multi_answer=None`` infers the flag from the data (any instance with
    more than one gold index); passing an explicit value enforces it and a
    violating instance aborts the load. All validation errors name the
    offending line and abort.
    """
    instances: list[MrcInstance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            inst = _validate_instance(obj, lineno)
            if inst.id in seen_ids:
                raise DatasetError(f"line {lineno}: duplicate id {inst.id!r}")
            seen_ids.add(inst.id)
            if multi_answer is False and len(inst.gold) > 1:
                raise DatasetError(
                    f"line {lineno}: {len(inst.gold)} gold answers in a single-answer dataset")
            instances.append(inst)
    if multi_answer is None:
        multi_answer = any(len(inst.gold) > 1 for inst in instances)
    return Dataset(instances=instances, multi_answer=multi_answer, corpus_only=corpus_only)


def instance_to_json(inst: MrcInstance) -> str:
    """Canonical one-line JSON for an instance (stable key order, compact)."""
    obj: dict = {
        "id": inst.id,
        "document": inst.document,
        "question": inst.question,
        "options": list(inst.options),
        "gold": sorted(inst.gold),
    }
    if inst.per_option_documents is not None:
        obj["documents"] = list(inst.per_option_documents)
    if inst.tags is not None:
        obj["tags"] = [list(group) for group in inst.tags]
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def save_jsonl(instances: Iterable[MrcInstance], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst) + "\n")


@dataclass(frozen=True)
class SentenceEntry:
    """One retrievable sentence with its tokenization and term counts."""

    text: str
    tokens: tuple[str, ...]
    counts: dict[str, int]

    @classmethod
    def from_text(cls, text: str) -> "SentenceEntry":
        toks = tuple(t.surface for t in tokenize(text))
        return cls(text=text, tokens=toks, counts=dict(Counter(toks)))


def load_sentence_corpus(path: str) -> list[SentenceEntry]:
    """Read a one-sentence-per-line UTF-8 corpus file."""
    entries: list[SentenceEntry] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(SentenceEntry.from_text(line))
    return entries


_STOPWORDS: frozenset[str] | None = None


def stopwords() -> frozenset[str]:
    """The fixed 120-word stopword list shipped with the package."""
    global _STOPWORDS
    if _STOPWORDS is None:
        data = resources.files("mrc.data").joinpath("stopwords.txt").read_text("utf-8")
        _STOPWORDS = frozenset(w.strip() for w in data.splitlines() if w.strip())
    return _STOPWORDS


def query_terms(question: str, option: str) -> set[str]:
    """Non-stopword token surfaces of the question and one option, unioned."""
    sw = stopwords()
    terms = {t.surface for t in tokenize(question)} | {t.surface for t in tokenize(option)}
    return {t for t in terms if t not in sw}


def inverse_document_frequencies(corpus: Sequence[SentenceEntry]) -> dict[str, float]:
    """Smoothed IDF per term: ln((N+1)/(df+1)) + 1."""
    df: Counter[str] = Counter()
    for entry in corpus:
        df.update(set(entry.tokens))
    n = len(corpus)
    return {term: math.log((n + 1) / (count + 1)) + 1.0 for term, count in df.items()}


def retrieve_sentences(corpus: Sequence[SentenceEntry], question: str, option: str,
                       k: int = DEFAULT_TOP_K,
                       idf: dict[str, float] | None = None) -> str:
    """Concatenate the top-k TF-IDF-scored corpus sentences for a query.

    The query is the set of non-stopword tokens of the question and option;
    each sentence scores the sum over query terms of term-frequency times
    smoothed IDF. Sentences come back joined by spaces in descending score
    order, ties broken by corpus position; fewer than k sentences means all
    of them.
    """
    if not corpus:
        raise ValueError("retrieval corpus is empty")
    if k < 1:
        raise ValueError("k must be positive")
    if idf is None:
        idf = inverse_document_frequencies(corpus)
    terms = query_terms(question, option)
    scored: list[tuple[float, int]] = []
    for pos, entry in enumerate(corpus):
        score = 0.0
        for term in terms:
            tf = entry.counts.get(term)
            if tf:
                score += tf * idf.get(term, 0.0)
        scored.append((score, pos))
    scored.sort(key=lambda sp: (-sp[0], sp[1]))
    return " ".join(corpus[pos].text for _, pos in scored[:k])


def dataset_stats(dataset: Dataset) -> dict:
    """Summary counts used by the stats command."""
    option_hist: Counter[int] = Counter(len(inst.options) for inst in dataset)
    doc_lengths = [len(tokenize(inst.document)) for inst in dataset]
    labeled = sum(1 for inst in dataset if inst.gold)
    return {
        "instances": len(dataset),
        "labeled": labeled,
        "multi_answer": dataset.multi_answer,
        "option_histogram": {str(m): option_hist[m] for m in sorted(option_hist)},
        "mean_document_tokens": (sum(doc_lengths) / len(doc_lengths)) if doc_lengths else 0.0,
    }
