"""Self-assessment practice question generation.

Each practice instance removes a few short spans from a handful of document
sentences: the leftover text becomes the question, the removed spans (in
order) become the correct option, and three distractors are forged by
swapping random spans into the correct option.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import Dataset, MrcInstance
from .text import SentenceSpan, split_sentences, tokenize

# Placement retries for a single span before the whole question attempt fails.
SPAN_PLACEMENT_TRIES = 20


@dataclass(frozen=True)
class GenConfig:
    """Generation bounds: questions per document, sentences, spans, span length."""

    n_q: int = 10
    n_s: int = 3
    n_c: int = 4
    n_t: int = 4
    seed: int = 0
    max_attempts_per_question: int = 10

    def __post_init__(self):
        for name in ("n_q", "n_s", "n_c", "n_t", "max_attempts_per_question"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class SpanPick:
    """A removed span: owning sentence slot and token offsets within the
    concatenated selected sentences."""

    sentence: int
    start: int
    end: int


@dataclass(frozen=True)
class GeneratedInstance:
    """One practice question with provenance for independent validation."""

    document: str
    question: str
    options: tuple[str, str, str, str]
    gold: frozenset[int]
    sentence_indices: tuple[int, ...]  # document sentence indices, ascending
    spans: tuple[SpanPick, ...]        # ascending by start offset

    def to_mrc_instance(self, instance_id: str) -> MrcInstance:
        return MrcInstance(
            id=instance_id,
            document=self.document,
            question=self.question,
            options=self.options,
            gold=self.gold,
        )


def make_distractors(correct_spans: list[list[str]], doc_tokens: list[str],
                     n_t: int, rng: random.Random,
                     max_attempts: int = 10) -> list[str] | None:
    """Forge three wrong options by span replacement, or None on exhaustion.

    Each distractor replaces a uniformly chosen non-empty subset of the
    correct option's spans with random document spans of up to n_t tokens,
    resampling on collision with the correct option or an earlier distractor.
    """
    if not doc_tokens:
        raise ValueError("document must have at least one token")
    correct = " ".join(t for span in correct_spans for t in span)
    taken = {correct}
    distractors: list[str] = []
    n_spans = len(correct_spans)
    for _ in range(3):
        for _attempt in range(max_attempts):
            subset = rng.randrange(1, 1 << n_spans)
            pieces = []
            for i, span in enumerate(correct_spans):
                if subset >> i & 1:
                    length = rng.randint(1, min(n_t, len(doc_tokens)))
                    start = rng.randrange(len(doc_tokens) - length + 1)
                    pieces.append(doc_tokens[start:start + length])
                else:
                    pieces.append(span)
            candidate = " ".join(t for span in pieces for t in span)
            if candidate not in taken:
                taken.add(candidate)
                distractors.append(candidate)
                break
        else:
            return None
    return distractors


def _place_spans(segment_bounds: list[tuple[int, int]], count: int, n_t: int,
                 rng: random.Random) -> list[tuple[int, int, int]] | None:
    """Pick non-overlapping (slot, start, end) spans, one sentence each."""
    placed: list[tuple[int, int, int]] = []
    for _ in range(count):
        for _try in range(SPAN_PLACEMENT_TRIES):
            slot = rng.randrange(len(segment_bounds))
            seg_start, seg_end = segment_bounds[slot]
            seg_len = seg_end - seg_start
            length = rng.randint(1, min(n_t, seg_len))
            start = seg_start + rng.randrange(seg_len - length + 1)
            end = start + length
            if all(end <= s or start >= e for _, s, e in placed):
                placed.append((slot, start, end))
                break
        else:
            return None
    return sorted(placed, key=lambda p: p[1])


def _attempt_question(doc_tokens: list[str], sentences: list[SentenceSpan],
                      cfg: GenConfig, rng: random.Random) -> GeneratedInstance | None:
    n_pick = rng.randint(1, min(cfg.n_s, len(sentences)))
    chosen = sorted(rng.sample(range(len(sentences)), n_pick))

    concat: list[str] = []
    bounds: list[tuple[int, int]] = []
    for si in chosen:
        span = sentences[si]
        bounds.append((len(concat), len(concat) + span.end - span.start))
        concat.extend(doc_tokens[span.start:span.end])

    n_spans = rng.randint(1, cfg.n_c)
    placed = _place_spans(bounds, n_spans, cfg.n_t, rng)
    if placed is None:
        return None

    removed = [False] * len(concat)
    for _, start, end in placed:
        for i in range(start, end):
            removed[i] = True
    question_tokens = [t for t, gone in zip(concat, removed) if not gone]
    correct_spans = [concat[start:end] for _, start, end in placed]

    distractors = make_distractors(correct_spans, doc_tokens, cfg.n_t, rng,
                                   cfg.max_attempts_per_question)
    if distractors is None:
        return None

    correct = " ".join(t for span in correct_spans for t in span)
    options = [correct] + distractors
    order = list(range(4))
    rng.shuffle(order)
    shuffled = tuple(options[i] for i in order)
    gold_index = order.index(0)

    return GeneratedInstance(
        document=" ".join(doc_tokens),
        question=" ".join(question_tokens),
        options=shuffled,  # type: ignore[arg-type]
        gold=frozenset({gold_index}),
        sentence_indices=tuple(chosen),
        spans=tuple(SpanPick(slot, start, end) for slot, start, end in placed),
    )


def generate_for_document(document: str, cfg: GenConfig,
                          rng: random.Random) -> list[GeneratedInstance]:
    """Generate at most n_q practice instances from one document.

    Attempts exactly n_q questions; an attempt that cannot satisfy the span
    or distractor constraints within the retry budget is dropped. All
    randomness flows through the supplied generator, so a fixed seed fixes
    the output.
    """
    doc_tokens = [t.surface for t in tokenize(document)]
    if not doc_tokens:
        return []
    sentences = split_sentences(doc_tokens)
    out: list[GeneratedInstance] = []
    for _ in range(cfg.n_q):
        for _attempt in range(cfg.max_attempts_per_question):
            inst = _attempt_question(doc_tokens, sentences, cfg, rng)
            if inst is not None:
                out.append(inst)
                break
    return out


@dataclass
class GenerationReport:
    """Counts from a corpus generation run."""

    documents: int = 0
    instances: int = 0
    attempted: int = 0
    generated: list[MrcInstance] = field(default_factory=list)

    @property
    def discard_rate(self) -> float:
        if self.attempted == 0:
            return 0.0
        return 1.0 - self.instances / self.attempted

    def dataset(self) -> Dataset:
        return Dataset(instances=list(self.generated), multi_answer=False)


def generate_corpus(documents: list[str], cfg: GenConfig) -> GenerationReport:
    """Generate practice instances for every document.

    Each document draws from its own generator seeded with seed XOR index,
    so output is stable no matter how documents are batched or parallelized.
    """
    report = GenerationReport(documents=len(documents))
    for doc_index, document in enumerate(documents):
        rng = random.Random(cfg.seed ^ doc_index)
        generated = generate_for_document(document, cfg, rng)
        if document.strip():
            report.attempted += cfg.n_q
        for j, gen in enumerate(generated):
            report.generated.append(gen.to_mrc_instance(f"sa-{doc_index}-{j}"))
        report.instances += len(generated)
    return report
