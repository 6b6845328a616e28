"""Practice-question generation tests.

Two independent oracles:

* validate_generated checks a GeneratedInstance against its own provenance
  (span bounds, non-overlap, single-sentence containment, token conservation,
  option structure) using a sentence splitter written here.
* reconstructable() ignores provenance entirely and searches for ANY legal
  sentence selection + span removal that produces the question and gold
  option, so the public MrcInstance view is validated on its own.
"""

import functools
import itertools
import random

import pytest

from mrc import selfassess as SA
from mrc.corpus import save_jsonl

TERMINATORS = {".", "!", "?"}


def split_sentences_oracle(tokens):
    spans, start = [], 0
    for i, tok in enumerate(tokens):
        if tok in TERMINATORS:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def sample_documents(n, seed, n_sentences=(2, 5), sentence_len=(3, 9)):
    rng = random.Random(seed)
    vocab = [f"word{i}" for i in range(50)]
    docs = []
    for _ in range(n):
        parts = []
        for _ in range(rng.randint(*n_sentences)):
            parts.extend(rng.choices(vocab, k=rng.randint(*sentence_len)))
            parts.append(rng.choice(sorted(TERMINATORS)))
        docs.append(" ".join(parts))
    return docs


def validate_generated(gen: SA.GeneratedInstance, cfg: SA.GenConfig):
    """Assert every structural invariant of one generated instance."""
    doc_tokens = gen.document.split(" ")
    sentences = split_sentences_oracle(doc_tokens)

    # sentence selection: ascending distinct in-range indices, bounded count
    assert 1 <= len(gen.sentence_indices) <= min(cfg.n_s, len(sentences))
    assert list(gen.sentence_indices) == sorted(set(gen.sentence_indices))
    assert all(0 <= si < len(sentences) for si in gen.sentence_indices)

    # rebuild the concatenation the spans index into
    concat, bounds = [], []
    for si in gen.sentence_indices:
        s, e = sentences[si]
        bounds.append((len(concat), len(concat) + e - s))
        concat.extend(doc_tokens[s:e])

    # spans: bounded count, single sentence each, within n_t, sorted, disjoint
    assert 1 <= len(gen.spans) <= cfg.n_c
    for span in gen.spans:
        lo, hi = bounds[span.sentence]
        assert lo <= span.start < span.end <= hi
        assert 1 <= span.end - span.start <= cfg.n_t
    starts = [s.start for s in gen.spans]
    assert starts == sorted(starts)
    for a, b in itertools.combinations(gen.spans, 2):
        assert a.end <= b.start or b.end <= a.start

    # token conservation: kept tokens form the question, removed the answer
    removed = [False] * len(concat)
    for span in gen.spans:
        for i in range(span.start, span.end):
            removed[i] = True
    assert gen.question == " ".join(
        t for t, gone in zip(concat, removed) if not gone)
    correct = " ".join(t for s in gen.spans for t in concat[s.start:s.end])

    # options: exactly 4, distinct, singleton gold pointing at the correct one
    assert len(gen.options) == 4
    assert len(set(gen.options)) == 4
    assert len(gen.gold) == 1
    gold = next(iter(gen.gold))
    assert gen.options[gold] == correct

    # distractors only recombine document tokens
    doc_set = set(doc_tokens)
    for j, option in enumerate(gen.options):
        if j != gold:
            assert option != correct
            assert set(option.split(" ")) <= doc_set


def reconstructable(document, question, gold_option, cfg):
    """Provenance-free feasibility search over sentence subsets and spans."""
    doc_tokens = document.split(" ")
    sentences = split_sentences_oracle(doc_tokens)
    q_toks = question.split(" ") if question else []
    o_toks = gold_option.split(" ")

    for r in range(1, min(cfg.n_s, len(sentences)) + 1):
        for subset in itertools.combinations(range(len(sentences)), r):
            concat, seg_of = [], []
            for gi, si in enumerate(subset):
                s, e = sentences[si]
                concat.extend(doc_tokens[s:e])
                seg_of.extend([gi] * (e - s))
            if len(q_toks) + len(o_toks) != len(concat):
                continue

            @functools.lru_cache(maxsize=None)
            def walk(ci, qi, oi, runs, run_len):
                if ci == len(concat):
                    return (qi == len(q_toks) and oi == len(o_toks)
                            and 1 <= runs <= cfg.n_c)
                tok = concat[ci]
                if (qi < len(q_toks) and tok == q_toks[qi]
                        and walk(ci + 1, qi + 1, oi, runs, 0)):
                    return True
                if oi < len(o_toks) and tok == o_toks[oi]:
                    if (0 < run_len < cfg.n_t and seg_of[ci] == seg_of[ci - 1]
                            and walk(ci + 1, qi, oi + 1, runs, run_len + 1)):
                        return True
                    if runs < cfg.n_c and walk(ci + 1, qi, oi + 1, runs + 1, 1):
                        return True
                return False

            found = walk(0, 0, 0, 0, 0)
            walk.cache_clear()
            if found:
                return True
    return False


class TestGenerate:
    def test_every_instance_passes_the_validator(self):
        cfg = SA.GenConfig(n_q=6, seed=13)
        total = 0
        for doc_index, doc in enumerate(sample_documents(40, seed=2)):
            rng = random.Random(cfg.seed ^ doc_index)
            for gen in SA.generate_for_document(doc, cfg, rng):
                validate_generated(gen, cfg)
                total += 1
        assert total > 100

    def test_small_bounds_are_respected_too(self):
        cfg = SA.GenConfig(n_q=4, n_s=1, n_c=2, n_t=1, seed=5)
        for doc_index, doc in enumerate(sample_documents(15, seed=8)):
            rng = random.Random(cfg.seed ^ doc_index)
            for gen in SA.generate_for_document(doc, cfg, rng):
                validate_generated(gen, cfg)
                assert len(gen.sentence_indices) == 1
                assert all(s.end - s.start == 1 for s in gen.spans)

    def test_public_view_is_reconstructable_without_provenance(self):
        cfg = SA.GenConfig(n_q=3, seed=21)
        docs = sample_documents(20, seed=4, n_sentences=(2, 3),
                                sentence_len=(3, 6))
        report = SA.generate_corpus(docs, cfg)
        assert report.instances >= 30
        for inst in report.generated[:60]:
            gold = next(iter(inst.gold))
            assert reconstructable(inst.document, inst.question,
                                   inst.options[gold], cfg)

    def test_reconstructable_rejects_forgeries(self):
        cfg = SA.GenConfig()
        doc = "alpha beta gamma . delta epsilon ."
        assert not reconstructable(doc, "alpha beta gamma", "zeta", cfg)
        assert not reconstructable(doc, "alpha gamma .", "beta beta", cfg)
        assert reconstructable(doc, "alpha gamma .", "beta", cfg)

    def test_same_seed_same_output(self):
        docs = sample_documents(10, seed=3)
        cfg = SA.GenConfig(n_q=5, seed=99)
        a = SA.generate_corpus(docs, cfg)
        b = SA.generate_corpus(docs, cfg)
        assert a.generated == b.generated
        assert (a.documents, a.instances, a.attempted) == \
            (b.documents, b.instances, b.attempted)

    def test_serialized_output_byte_identical(self, tmp_path):
        docs = sample_documents(10, seed=6)
        cfg = SA.GenConfig(n_q=5, seed=1)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(SA.generate_corpus(docs, cfg).generated, p1)
        save_jsonl(SA.generate_corpus(docs, cfg).generated, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_per_document_seeding_is_batch_independent(self):
        docs = sample_documents(6, seed=10)
        cfg = SA.GenConfig(n_q=4, seed=17)
        whole = SA.generate_corpus(docs, cfg)
        # document k alone reproduces its slice, modulo the id's doc index
        for k, doc in enumerate(docs):
            rng = random.Random(cfg.seed ^ k)
            alone = SA.generate_for_document(doc, cfg, rng)
            mine = [i for i in whole.generated if i.id.startswith(f"sa-{k}-")]
            assert [g.question for g in alone] == [i.question for i in mine]
            assert [g.options for g in alone] == [i.options for i in mine]

    def test_different_seeds_differ(self):
        docs = sample_documents(8, seed=12)
        a = SA.generate_corpus(docs, SA.GenConfig(seed=0))
        b = SA.generate_corpus(docs, SA.GenConfig(seed=1))
        assert [i.question for i in a.generated] != \
            [i.question for i in b.generated]


class TestAccounting:
    def test_attempted_counts_and_discard_rate(self):
        docs = sample_documents(5, seed=1) + ["", "   "]
        cfg = SA.GenConfig(n_q=7, seed=2)
        report = SA.generate_corpus(docs, cfg)
        assert report.documents == 7
        assert report.attempted == 7 * 5
        assert 0 <= report.instances <= report.attempted
        assert report.discard_rate == pytest.approx(
            1.0 - report.instances / report.attempted)
        assert len(report.generated) == report.instances

    def test_empty_corpus(self):
        report = SA.generate_corpus([], SA.GenConfig())
        assert (report.documents, report.instances, report.attempted) == (0, 0, 0)
        assert report.discard_rate == 0.0

    def test_blank_document_yields_nothing(self):
        assert SA.generate_for_document("", SA.GenConfig(),
                                        random.Random(0)) == []

    def test_dataset_view(self):
        docs = sample_documents(4, seed=9)
        report = SA.generate_corpus(docs, SA.GenConfig(n_q=3, seed=3))
        ds = report.dataset()
        assert len(ds) == report.instances
        assert not ds.multi_answer
        ids = [i.id for i in ds]
        assert len(set(ids)) == len(ids)


class TestDistractors:
    def test_three_distinct_non_correct(self):
        rng = random.Random(4)
        doc = [f"w{i}" for i in range(30)]
        for _ in range(50):
            spans = [["w1", "w2"], ["w9"]]
            got = SA.make_distractors(spans, doc, n_t=4, rng=rng)
            assert got is not None and len(got) == 3
            assert len(set(got + ["w1 w2 w9"])) == 4

    def test_exhaustion_returns_none(self):
        # one-token document: every forgery equals the correct option
        rng = random.Random(0)
        assert SA.make_distractors([["a"]], ["a"], n_t=1, rng=rng) is None

    def test_replacement_length_capped_by_n_t(self):
        rng = random.Random(7)
        doc = [f"w{i}" for i in range(20)]
        for _ in range(40):
            got = SA.make_distractors([["x", "y", "z"]], doc, n_t=2, rng=rng)
            assert got is not None
            for d in got:
                assert d != "x y z"
                assert len(d.split(" ")) <= 2  # single span, replaced, <= n_t


class TestGenConfig:
    @pytest.mark.parametrize("field", ["n_q", "n_s", "n_c", "n_t",
                                       "max_attempts_per_question"])
    def test_bounds_must_be_positive(self, field):
        with pytest.raises(ValueError, match=field):
            SA.GenConfig(**{field: 0})
