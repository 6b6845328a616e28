"""Shared synthetic-data builders for the test suite."""

from __future__ import annotations

import random

import pytest

from mrc.corpus import MrcInstance
from mrc.model import ModelConfig

# Pool words are unknown to the bundled lexicon, so the tagger's NN default
# makes every one a content word.
POOL = [f"tok{i}" for i in range(120)]

# Notes registered by acceptance tests, echoed in the terminal summary.
ACCEPTANCE_NOTES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows: dict[str, str] = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if "test_acceptance" not in rep.nodeid or \
                    not name.startswith("test_criterion_"):
                continue
            if status == "passed" and getattr(rep, "when", "call") != "call":
                continue
            rows[name] = "PASS" if status == "passed" else "FAIL"
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(rows):
        note = ACCEPTANCE_NOTES.get(name, "")
        suffix = f"  [{note}]" if note else ""
        terminalreporter.write_line(f"{name}: {rows[name]}{suffix}")


def word_match_instances(n: int, seed: int, n_options: int = 4,
                         doc_words: int = 8, prefix: str = "wm") -> list[MrcInstance]:
    """Instances where the answer is the unique option sharing a document word.

    The question is built from non-content tokens only, so that shared word
    is the entire signal (and the only position Eq.-style highlighting marks).
    """
    rng = random.Random(seed)
    out = []
    for i in range(n):
        words = rng.sample(POOL, doc_words)
        target = rng.choice(words)
        distractors = rng.sample([w for w in POOL if w not in words], n_options - 1)
        options = distractors + [target]
        rng.shuffle(options)
        out.append(MrcInstance(
            id=f"{prefix}{i}",
            document=" ".join(words) + " .",
            question="which of these ?",
            options=tuple(options),
            gold=frozenset({options.index(target)}),
        ))
    return out


def random_instances(n: int, seed: int, n_options: int = 4,
                     multi_answer: bool = False, prefix: str = "r") -> list[MrcInstance]:
    """Structureless instances for plumbing tests (no learnable signal)."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        doc = " ".join(rng.choices(POOL, k=rng.randint(4, 12))) + " ."
        question = " ".join(rng.choices(POOL, k=rng.randint(2, 6))) + " ?"
        options = tuple(" ".join(rng.choices(POOL, k=rng.randint(1, 4)))
                        for _ in range(n_options))
        if multi_answer:
            gold = frozenset(rng.sample(range(n_options),
                                        rng.randint(0, n_options)))
        else:
            gold = frozenset({rng.randrange(n_options)})
        out.append(MrcInstance(id=f"{prefix}{i}", document=doc,
                               question=question, options=options, gold=gold))
    return out


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(vocab_size=64, layers=1, heads=2, d_model=8, d_ff=16,
                       max_len=32, dropout=0.0)


def fd_gradcheck(params, cfg, instances, lam, head,
                 coords_per_param=None, h=1e-5, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    Sweeps every coordinate of every parameter unless coords_per_param caps
    the per-tensor sample. The relative error uses a 1e-6 denominator floor so
    exactly-zero gradient coordinates measure finite-difference noise instead
    of dividing by zero.
    """
    import numpy as np

    from mrc.model import batch_loss_and_grads

    _, grads, _ = batch_loss_and_grads(params, cfg, instances, lam, head)
    rng = np.random.default_rng(seed)

    def total():
        breakdown, _, _ = batch_loss_and_grads(params, cfg, instances, lam, head)
        return breakdown.total

    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        if coords_per_param is None or coords_per_param >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_param, replace=False)
        gflat = grads[name].reshape(-1)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = total()
            flat[i] = keep - h
            down = total()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            analytic = gflat[i]
            rel = abs(numeric - analytic) / max(1e-6, abs(numeric) + abs(analytic))
            worst = max(worst, rel)
    return worst
