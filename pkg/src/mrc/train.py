"""Staged fine-tuning: dataset encoding, Adam training with best-on-dev
selection, metric computation, and the multi-stage pipeline.

A pipeline runs its stages in order (practice questions, then a source task,
then the target task), each starting from the previous stage's selected
checkpoint. Selection serializes the winning parameters through checkpoint
bytes, so a stage's output is bit-for-bit what a save/load round trip yields.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import Dataset, MrcInstance, load_jsonl
from .model import (EncodedInstance, HEADS, ModelConfig, batch_loss_and_grads,
                    encode_choice_instance, init_params, score_batch)
from .strategies import build_sequence, compute_highlight_mask, parse_scheme
from .text import Vocab, build_vocab, pos_tag, tokenize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0
WARMUP_FRACTION = 0.02
DEFAULT_VOCAB_CAP = 50_000

SELECTION_KEY = {"softmax": "accuracy", "sigmoid": "f1_a"}


class TrainingError(RuntimeError):
    """Raised when optimization fails (e.g. the loss goes non-finite)."""


# ---------------------------------------------------------------------------
# stage and plan configuration


@dataclass(frozen=True)
class StageConfig:
    """One fine-tuning stage of the pipeline."""

    data: str
    name: str = ""
    dev_data: str | None = None
    epochs: int = 1
    scheme: str = "dq_o"
    head: str = "softmax"
    lam: float = 2.0
    lr: float = 2.5e-4
    batch_size: int = 8
    seed: int = 0
    highlight: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        parse_scheme(self.scheme)


@dataclass(frozen=True)
class PipelinePlan:
    """Model settings plus an ordered list of stages.

    model holds ModelConfig fields; its vocab_size acts as a cap, with the
    effective size fixed once the vocabulary is built from the stage data.
    """

    stages: tuple[StageConfig, ...]
    model: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan has no stages")
        unknown = set(self.model) - {
            "vocab_size", "layers", "heads", "d_model", "d_ff",
            "max_len", "dropout", "init_std"}
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")


def plan_from_json(obj: dict, base_dir: str | Path | None = None) -> PipelinePlan:
    """Parse a plan from its JSON form, resolving data paths if asked."""
    if not isinstance(obj, dict):
        raise ValueError("plan must be a JSON object")
    unknown = set(obj) - {"stages", "model", "seed"}
    if unknown:
        raise ValueError(f"unknown plan fields: {sorted(unknown)}")
    raw_stages = obj.get("stages")
    if not isinstance(raw_stages, list) or not raw_stages:
        raise ValueError("plan.stages must be a non-empty list")

    def resolve(p):
        if p is None or base_dir is None:
            return p
        return str(Path(base_dir) / p)

    stages = []
    for i, raw in enumerate(raw_stages):
        if not isinstance(raw, dict) or "data" not in raw:
            raise ValueError(f"stage {i}: must be an object with a 'data' path")
        try:
            stage = StageConfig(**raw)
        except TypeError as exc:
            raise ValueError(f"stage {i}: {exc}") from None
        except ValueError as exc:
            raise ValueError(f"stage {i}: {exc}") from None
        stages.append(StageConfig(**{**raw, "data": resolve(stage.data),
                                     "dev_data": resolve(stage.dev_data)}))
    model = obj.get("model", {})
    if not isinstance(model, dict):
        raise ValueError("plan.model must be an object")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise ValueError("plan.seed must be an integer")
    return PipelinePlan(stages=tuple(stages), model=dict(model), seed=seed)


# ---------------------------------------------------------------------------
# dataset encoding


def corpus_text(dataset: Dataset | Iterable[MrcInstance]) -> Iterable[str]:
    """Every text field of every instance, for vocabulary building."""
    for inst in dataset:
        for i in range(len(inst.options)):
            yield inst.document_for(i)
        yield inst.question
        yield from inst.options


def build_plan_vocab(datasets: Sequence[Dataset], max_size: int) -> Vocab:
    def stream():
        for ds in datasets:
            yield from corpus_text(ds)
    return build_vocab(stream(), max_size=max_size)


def encode_dataset(dataset: Dataset | Sequence[MrcInstance], vocab: Vocab,
                   scheme, max_len: int, highlight: bool = False,
                   lexicon: dict[str, str] | None = None) -> list[EncodedInstance]:
    """Build per-option model inputs (and highlight masks if requested)."""
    scheme = parse_scheme(scheme) if isinstance(scheme, str) else scheme
    out: list[EncodedInstance] = []
    for inst in dataset:
        q_tokens = tokenize(inst.question, vocab)
        q_ids = tuple(t.id for t in q_tokens)
        shared_doc = inst.per_option_documents is None
        d_tokens = tokenize(inst.document, vocab) if shared_doc else None
        if highlight and shared_doc:
            shared_tags = inst.flat_tags() or pos_tag(d_tokens, lexicon)
        sequences, masks = [], []
        try:
            for i, option in enumerate(inst.options):
                if not shared_doc:
                    d_tokens = tokenize(inst.document_for(i), vocab)
                o_tokens = tokenize(option, vocab)
                seq = build_sequence(tuple(t.id for t in d_tokens), q_ids,
                                     tuple(t.id for t in o_tokens),
                                     scheme, max_len)
                sequences.append(seq)
                if highlight:
                    tags = shared_tags if shared_doc else pos_tag(d_tokens, lexicon)
                    masks.append(compute_highlight_mask(
                        d_tokens, tags, q_tokens, o_tokens))
        except ValueError as exc:
            raise ValueError(f"instance {inst.id!r}: {exc}") from None
        out.append(encode_choice_instance(
            sequences, masks if highlight else None, inst.gold))
    return out


# ---------------------------------------------------------------------------
# metrics


def predict(scores: np.ndarray, head: str) -> frozenset[int]:
    """Argmax (ties to the lowest index) or per-option threshold at 0.5."""
    if head == "softmax":
        return frozenset({int(np.argmax(scores))})
    return frozenset(int(i) for i in np.nonzero(scores > 0.0)[0])


def metrics_from_scores(score_list: Sequence[np.ndarray],
                        gold_list: Sequence[frozenset[int]],
                        head: str) -> dict[str, float]:
    """Accuracy for the softmax head; F1_m / F1_a / EM0 for sigmoid."""
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    if len(score_list) != len(gold_list):
        raise ValueError("scores and golds differ in length")
    n = len(score_list)
    if n == 0:
        raise ValueError("cannot compute metrics over zero questions")
    preds = [predict(s, head) for s in score_list]
    if head == "softmax":
        correct = sum(1 for p, g in zip(preds, gold_list) if next(iter(p)) in g)
        return {"n": n, "accuracy": correct / n}
    f1_sum = 0.0
    tp = fp = fn = exact = 0
    for p, g in zip(preds, gold_list):
        inter = len(p & g)
        f1_sum += 1.0 if not p and not g else 2.0 * inter / (len(p) + len(g))
        tp += inter
        fp += len(p - g)
        fn += len(g - p)
        exact += p == g
    denom = 2 * tp + fp + fn
    return {"n": n,
            "f1_m": f1_sum / n,
            "f1_a": 2.0 * tp / denom if denom else 1.0,
            "em0": exact / n}


def evaluate(params: dict[str, np.ndarray], cfg: ModelConfig,
             encoded: Sequence[EncodedInstance], head: str) -> dict[str, float]:
    scores = score_batch(params, cfg, encoded)
    return metrics_from_scores(scores, [e.gold for e in encoded], head)


# ---------------------------------------------------------------------------
# optimization


def learning_rate(step: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup over the first 2% of steps, then linear decay."""
    warmup = max(1, round(WARMUP_FRACTION * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * max(0.0, (total_steps - step) / max(1, total_steps - warmup))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM) -> float:
    """Scale gradients in place to a global norm cap; returns the raw norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass(eq=False)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# stage training


@dataclass
class TrainReport:
    """Per-epoch trajectories and the selection outcome of one stage."""

    stage: str
    epochs: int
    train_loss: list[float]
    classification_loss: list[float]
    lm_loss: list[float]
    dev_metrics: list[dict[str, float]]
    selection_key: str | None
    selected_epoch: int
    selected_metric: float | None
    wall_time_s: float

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "train_loss": self.train_loss,
            "classification_loss": self.classification_loss,
            "lm_loss": self.lm_loss,
            "dev_metrics": self.dev_metrics,
            "selection_key": self.selection_key,
            "selected_epoch": self.selected_epoch,
            "selected_metric": self.selected_metric,
            "wall_time_s": self.wall_time_s,
        }


def _check_head_compat(encoded: Sequence[EncodedInstance], head: str, label: str) -> None:
    if head == "softmax":
        bad = next((e for e in encoded if len(e.gold) != 1), None)
        if bad is not None:
            raise ValueError(
                f"{label}: softmax head requires exactly one gold option per instance")
    else:
        if any(not e.gold for e in encoded):
            raise ValueError(f"{label}: unlabeled instance cannot be trained on")


def train_stage(params: dict[str, np.ndarray], cfg: ModelConfig,
                stage: StageConfig, train_enc: Sequence[EncodedInstance],
                dev_enc: Sequence[EncodedInstance] | None, vocab: Vocab,
                log: Callable[[str], None] | None = None,
                ) -> tuple[ckpt_io.Checkpoint, TrainReport]:
    """Adam fine-tuning with per-epoch dev evaluation and best-on-dev selection.

    The returned checkpoint holds the selected parameters after a float32
    serialization round trip, so saving it to disk and reloading changes
    nothing. Without a dev set the final epoch's parameters are selected.
    Ties on the dev metric keep the earliest epoch.
    """
    if not train_enc:
        raise ValueError(f"stage {stage.name!r}: empty training data")
    _check_head_compat(train_enc, stage.head, f"stage {stage.name!r}")
    started = time.perf_counter()
    params = {k: v.copy() for k, v in params.items()}
    meta = {"scheme": parse_scheme(stage.scheme).name, "head": stage.head,
            "highlight": stage.highlight, "stage": stage.name}

    n = len(train_enc)
    steps_per_epoch = math.ceil(n / stage.batch_size)
    total_steps = steps_per_epoch * stage.epochs
    adam = AdamState.fresh(params)
    sel_key = SELECTION_KEY[stage.head]

    train_loss: list[float] = []
    cls_loss: list[float] = []
    lm_loss: list[float] = []
    dev_metrics: list[dict[str, float]] = []
    best: tuple[float, int, bytes] | None = None
    step = 0
    for epoch in range(stage.epochs):
        shuffle_rng = np.random.default_rng((stage.seed, epoch))
        drop_rng = np.random.default_rng((stage.seed, epoch, 1))
        perm = shuffle_rng.permutation(n)
        epoch_total = epoch_cls = epoch_lm = 0.0
        for lo in range(0, n, stage.batch_size):
            batch = [train_enc[i] for i in perm[lo:lo + stage.batch_size]]
            breakdown, grads, _ = batch_loss_and_grads(
                params, cfg, batch, stage.lam, stage.head, drop_rng=drop_rng)
            if not math.isfinite(breakdown.total):
                raise TrainingError(
                    f"stage {stage.name!r}: non-finite loss {breakdown.total} "
                    f"at epoch {epoch} step {step}")
            clip_gradients(grads)
            adam.step(params, grads, learning_rate(step, total_steps, stage.lr))
            step += 1
            epoch_total += breakdown.total * len(batch)
            epoch_cls += breakdown.classification * len(batch)
            epoch_lm += breakdown.lm * len(batch)
        train_loss.append(epoch_total / n)
        cls_loss.append(epoch_cls / n)
        lm_loss.append(epoch_lm / n)

        if dev_enc:
            report = evaluate(params, cfg, dev_enc, stage.head)
            dev_metrics.append(report)
            if best is None or report[sel_key] > best[0]:
                best = (report[sel_key], epoch,
                        ckpt_io.to_bytes(ckpt_io.Checkpoint(cfg, params, vocab, meta)))
        if log:
            tail = f" dev {sel_key}={dev_metrics[-1][sel_key]:.4f}" if dev_enc else ""
            log(f"stage {stage.name!r} epoch {epoch + 1}/{stage.epochs} "
                f"loss={train_loss[-1]:.4f}{tail}")

    if best is None:
        selected_epoch, selected_metric = stage.epochs - 1, None
        blob = ckpt_io.to_bytes(ckpt_io.Checkpoint(cfg, params, vocab, meta))
    else:
        selected_metric, selected_epoch, blob = best
    selected = ckpt_io.from_bytes(blob)
    report = TrainReport(
        stage=stage.name, epochs=stage.epochs, train_loss=train_loss,
        classification_loss=cls_loss, lm_loss=lm_loss,
        dev_metrics=dev_metrics, selection_key=sel_key if dev_enc else None,
        selected_epoch=selected_epoch, selected_metric=selected_metric,
        wall_time_s=time.perf_counter() - started)
    return selected, report


# ---------------------------------------------------------------------------
# the pipeline


@dataclass(eq=False)
class PipelineResult:
    config: ModelConfig
    vocab: Vocab
    params: dict[str, np.ndarray]
    reports: list[TrainReport]
    checkpoint_paths: list[Path]
    final_checkpoint: ckpt_io.Checkpoint


def run_pipeline(plan: PipelinePlan, run_dir: str | Path | None = None,
                 lexicon: dict[str, str] | None = None,
                 log: Callable[[str], None] | None = None) -> PipelineResult:
    """Execute every stage in order, threading the selected parameters through.

    Stage datasets are loaded up front; the vocabulary is built once over all
    stages' training text. With run_dir set, each stage's selected checkpoint
    and a report.json land there.
    """
    loaded: list[tuple[Dataset, Dataset | None]] = []
    for stage in plan.stages:
        train_ds = load_jsonl(stage.data)
        dev_ds = load_jsonl(stage.dev_data) if stage.dev_data else None
        if stage.head == "softmax" and train_ds.multi_answer:
            raise ValueError(
                f"stage {stage.name!r}: multi-answer data needs the sigmoid head")
        loaded.append((train_ds, dev_ds))

    cap = plan.model.get("vocab_size", DEFAULT_VOCAB_CAP)
    vocab = build_plan_vocab([t for t, _ in loaded], max_size=cap)
    cfg_fields = {k: v for k, v in plan.model.items() if k != "vocab_size"}
    cfg = ModelConfig(vocab_size=len(vocab), **cfg_fields)
    params = init_params(cfg, plan.seed)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    reports: list[TrainReport] = []
    paths: list[Path] = []
    final_ckpt: ckpt_io.Checkpoint | None = None
    for i, (stage, (train_ds, dev_ds)) in enumerate(zip(plan.stages, loaded)):
        stage_label = stage.name or f"stage{i + 1}"
        stage = dataclasses.replace(stage, name=stage_label)
        train_enc = encode_dataset(train_ds, vocab, stage.scheme, cfg.max_len,
                                   stage.highlight, lexicon)
        dev_enc = (encode_dataset(dev_ds, vocab, stage.scheme, cfg.max_len,
                                  stage.highlight, lexicon)
                   if dev_ds is not None else None)
        selected, report = train_stage(params, cfg, stage, train_enc, dev_enc,
                                       vocab, log=log)
        params = selected.params
        final_ckpt = selected
        reports.append(report)
        if run_dir is not None:
            path = run_dir / f"stage{i + 1}-{stage_label}.ckpt"
            path.write_bytes(ckpt_io.to_bytes(selected))
            paths.append(path)

    if run_dir is not None:
        (run_dir / "report.json").write_text(
            json.dumps([r.to_json() for r in reports], indent=2) + "\n",
            encoding="utf-8")
    assert final_ckpt is not None
    return PipelineResult(config=cfg, vocab=vocab, params=params,
                          reports=reports, checkpoint_paths=paths,
                          final_checkpoint=final_ckpt)
