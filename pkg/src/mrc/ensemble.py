"""Logit-averaging ensembles over saved checkpoints.

Each member encodes an instance under its own order scheme, vocabulary, and
highlight setting, scores the options, and the ensemble prediction is the
unweighted mean of the member scores (argmax ties go to the lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import Dataset, MrcInstance
from .model import score_batch
from .strategies import OrderScheme, parse_scheme, reverse_scheme
from .train import encode_dataset, metrics_from_scores


class EnsembleError(ValueError):
    """Raised for invalid member combinations or score mismatches."""


@dataclass(eq=False)
class Member:
    """One ensemble member: a checkpoint plus how to encode inputs for it."""

    ckpt: ckpt_io.Checkpoint
    scheme: OrderScheme
    highlight: bool
    label: str = ""


def member_from_checkpoint(ckpt: ckpt_io.Checkpoint,
                           scheme: str | OrderScheme | None = None,
                           highlight: bool | None = None,
                           label: str = "") -> Member:
    """Wrap a checkpoint, defaulting scheme/highlight from its metadata."""
    if scheme is None:
        scheme = ckpt.meta.get("scheme")
        if scheme is None:
            raise EnsembleError("checkpoint metadata has no scheme; pass one explicitly")
    if isinstance(scheme, str):
        scheme = parse_scheme(scheme)
    if highlight is None:
        highlight = bool(ckpt.meta.get("highlight", False))
    return Member(ckpt=ckpt, scheme=scheme, highlight=highlight, label=label)


def load_member(path: str | Path, scheme: str | OrderScheme | None = None,
                highlight: bool | None = None) -> Member:
    return member_from_checkpoint(ckpt_io.load(path), scheme, highlight,
                                  label=str(path))


def validate_members(members: Sequence[Member]) -> str:
    """Check the shared-vocab/shared-head contract; returns the common head."""
    if not members:
        raise EnsembleError("ensemble needs at least one member")
    head = members[0].ckpt.meta.get("head", "softmax")
    vocab_list = members[0].ckpt.vocab.to_list()
    for m in members[1:]:
        if m.ckpt.meta.get("head", "softmax") != head:
            raise EnsembleError("ensemble members use different heads")
        if m.ckpt.vocab.to_list() != vocab_list:
            raise EnsembleError("ensemble members use different vocabularies")
    return head


def ensemble_scores(instance: MrcInstance, members: Sequence[Member],
                    lexicon: dict[str, str] | None = None) -> np.ndarray:
    """Unweighted mean of the members' option scores for one instance."""
    validate_members(members)
    total: np.ndarray | None = None
    for m in members:
        enc = encode_dataset([instance], m.ckpt.vocab, m.scheme,
                             m.ckpt.config.max_len, m.highlight, lexicon)
        (scores,) = score_batch(m.ckpt.params, m.ckpt.config, enc)
        if total is None:
            total = scores.copy()
        elif scores.shape != total.shape:
            raise EnsembleError("members returned different numbers of option scores")
        else:
            total += scores
    assert total is not None
    return total / len(members)


def ensemble_score_dataset(dataset: Dataset | Sequence[MrcInstance],
                           members: Sequence[Member],
                           lexicon: dict[str, str] | None = None) -> list[np.ndarray]:
    """Mean member scores for every instance, evaluated member-by-member."""
    validate_members(members)
    sums: list[np.ndarray] | None = None
    for m in members:
        enc = encode_dataset(dataset, m.ckpt.vocab, m.scheme,
                             m.ckpt.config.max_len, m.highlight, lexicon)
        scores = score_batch(m.ckpt.params, m.ckpt.config, enc)
        if sums is None:
            sums = [s.copy() for s in scores]
        else:
            for acc, s in zip(sums, scores, strict=True):
                if acc.shape != s.shape:
                    raise EnsembleError(
                        "members returned different numbers of option scores")
                acc += s
    assert sums is not None
    return [s / len(members) for s in sums]


def evaluate_ensemble(members: Sequence[Member],
                      dataset: Dataset | Sequence[MrcInstance],
                      include_members: bool = False,
                      lexicon: dict[str, str] | None = None) -> dict:
    """Metric report for the ensemble (and optionally each member alone)."""
    head = validate_members(members)
    golds = [inst.gold for inst in dataset]
    if any(not g for g in golds):
        raise EnsembleError("dataset has unlabeled instances; cannot evaluate")
    result = {"members": len(members),
              "ensemble": metrics_from_scores(
                  ensemble_score_dataset(dataset, members, lexicon), golds, head)}
    if include_members:
        solos = []
        for m in members:
            enc = encode_dataset(dataset, m.ckpt.vocab, m.scheme,
                                 m.ckpt.config.max_len, m.highlight, lexicon)
            scores = score_batch(m.ckpt.params, m.ckpt.config, enc)
            solo = metrics_from_scores(scores, golds, head)
            solo["label"] = m.label or m.scheme.name
            solo["scheme"] = m.scheme.name
            solos.append(solo)
        result["member_metrics"] = solos
    return result


def back_and_forth_eval(ckpt_forward: ckpt_io.Checkpoint,
                        ckpt_reverse: ckpt_io.Checkpoint,
                        base_scheme: str | OrderScheme,
                        dataset: Dataset | Sequence[MrcInstance],
                        lexicon: dict[str, str] | None = None) -> dict:
    """Two-member ensemble of a scheme and its reverse, with solo metrics.

    The checkpoints' recorded training schemes must match base_scheme and
    reverse_scheme(base_scheme) respectively.
    """
    base = parse_scheme(base_scheme) if isinstance(base_scheme, str) else base_scheme
    paired = reverse_scheme(base)
    for ckpt, want, role in ((ckpt_forward, base, "forward"),
                             (ckpt_reverse, paired, "reverse")):
        recorded = ckpt.meta.get("scheme")
        if recorded is not None and recorded != want.name:
            raise EnsembleError(
                f"{role} checkpoint was trained with scheme {recorded!r}, "
                f"expected {want.name!r}")
    members = [member_from_checkpoint(ckpt_forward, base, label="forward"),
               member_from_checkpoint(ckpt_reverse, paired, label="reverse")]
    report = evaluate_ensemble(members, dataset, include_members=True,
                               lexicon=lexicon)
    report["base_scheme"] = base.name
    report["reverse_scheme"] = paired.name
    return report
