"""Command-line entry point tying the whole pipeline together.

Subcommands: gen (practice-question generation), retrieve (per-option
document materialization), train (staged pipeline from a JSON plan), eval,
ensemble, inspect (sequence/highlight rendering), stats.

Contract: machine-readable results go to stdout as a JSON envelope
{"command", "ok", "result"} that validates against data/cli_result.schema.json;
diagnostics go to stderr; exit status is 0 on success, 1 on validation
errors, 2 on I/O errors. The MRC_THREADS environment variable caps BLAS
thread usage (0 = deterministic single-threaded mode).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from importlib import resources
from pathlib import Path

from . import checkpoint as ckpt_io
from . import report as report_mod
from .corpus import (dataset_stats, inverse_document_frequencies, load_jsonl,
                     load_sentence_corpus, retrieve_sentences, save_jsonl)
from .ensemble import evaluate_ensemble, load_member
from .selfassess import GenConfig, generate_corpus
from .strategies import (SchemeError, build_sequence, compute_highlight_mask,
                         highlight_signs, parse_scheme)
from .text import (DELIM_SURFACE, END_SURFACE, START_SURFACE, pos_tag,
                   surfaces, tokenize)
from .train import TrainingError, encode_dataset, evaluate, plan_from_json, run_pipeline

_SEGMENT_SURFACES = {"START": START_SURFACE, "DELIM": DELIM_SURFACE,
                     "END": END_SURFACE}

# Keeps the BLAS limit applied for the whole process lifetime.
_THREAD_LIMITER = None


def result_schema() -> dict:
    """The shipped JSON schema that every CLI result envelope satisfies."""
    data = resources.files("mrc.data").joinpath("cli_result.schema.json")
    return json.loads(data.read_text("utf-8"))


def _apply_thread_cap() -> None:
    global _THREAD_LIMITER
    raw = os.environ.get("MRC_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MRC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("MRC_THREADS must be >= 0")
    import threadpoolctl

    _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=1 if n == 0 else n)


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# subcommand implementations, each returning the result dict


def _read_documents(path: str) -> list[str]:
    """Documents from a plain one-per-line file or a dataset JSONL file."""
    first = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                first = line.strip()
                break
    if first.startswith("{"):
        return [inst.document for inst in load_jsonl(path)]
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def cmd_gen(args: argparse.Namespace) -> dict:
    documents = _read_documents(args.docs)
    cfg = GenConfig(n_q=args.nq, n_s=args.ns, n_c=args.nc, n_t=args.nt,
                    seed=args.seed,
                    max_attempts_per_question=args.max_attempts_per_question)
    rep = generate_corpus(documents, cfg)
    save_jsonl(rep.generated, args.out)
    _log(f"gen: {rep.instances} instances from {rep.documents} documents "
         f"(discard rate {rep.discard_rate:.3f}) -> {args.out}")
    return {"documents": rep.documents, "attempted": rep.attempted,
            "instances": rep.instances, "discard_rate": rep.discard_rate,
            "out": str(args.out)}


def cmd_retrieve(args: argparse.Namespace) -> dict:
    corpus = load_sentence_corpus(args.corpus)
    dataset = load_jsonl(args.data)
    idf = inverse_document_frequencies(corpus)
    rewritten = []
    for inst in dataset:
        docs = tuple(retrieve_sentences(corpus, inst.question, opt, args.k, idf)
                     for opt in inst.options)
        rewritten.append(dataclasses.replace(
            inst, per_option_documents=docs, tags=None))
    save_jsonl(rewritten, args.out)
    _log(f"retrieve: {len(rewritten)} instances, top-{args.k} of "
         f"{len(corpus)} sentences -> {args.out}")
    return {"instances": len(rewritten), "k": args.k,
            "corpus_sentences": len(corpus), "out": str(args.out)}


def cmd_train(args: argparse.Namespace) -> dict:
    plan_path = Path(args.plan)
    plan = plan_from_json(json.loads(plan_path.read_text("utf-8")),
                          base_dir=plan_path.parent)
    run_dir = Path(args.run_dir) if args.run_dir else (
        plan_path.parent / f"{plan_path.stem}-run")
    result = run_pipeline(plan, run_dir=run_dir, log=_log)
    csv_path = report_mod.save_metrics_csv(result.reports, run_dir / "metrics.csv")
    fig_path = report_mod.save_training_figure(result.reports, run_dir / "training.png")
    return {"run_dir": str(run_dir),
            "stages": [r.to_json() for r in result.reports],
            "checkpoints": [str(p) for p in result.checkpoint_paths],
            "metrics_csv": str(csv_path), "figure": str(fig_path)}


def _require_labels(dataset) -> None:
    unlabeled = sum(1 for inst in dataset if not inst.gold)
    if unlabeled:
        raise ValueError(f"{unlabeled} instances have no gold label; "
                         "evaluation needs labeled data")


def cmd_eval(args: argparse.Namespace) -> dict:
    ckpt = ckpt_io.load(args.ckpt)
    dataset = load_jsonl(args.data)
    _require_labels(dataset)
    head = "sigmoid" if args.sigmoid else str(ckpt.meta.get("head", "softmax"))
    scheme = parse_scheme(args.scheme or ckpt.meta.get("scheme", "dq_o"))
    highlight = (bool(ckpt.meta.get("highlight", False))
                 if args.highlight is None else args.highlight)
    encoded = encode_dataset(dataset, ckpt.vocab, scheme,
                             ckpt.config.max_len, highlight)
    metrics = evaluate(ckpt.params, ckpt.config, encoded, head)
    return {"ckpt": str(args.ckpt), "data": str(args.data),
            "scheme": scheme.name, "head": head, "highlight": highlight,
            "metrics": metrics}


def _parse_member_spec(token: str):
    """Split "path:scheme" — the scheme suffix is optional."""
    token = token.strip()
    if ":" in token:
        path, tail = token.rsplit(":", 1)
        try:
            return path, parse_scheme(tail)
        except SchemeError:
            pass
    return token, None


def cmd_ensemble(args: argparse.Namespace) -> dict:
    specs = [s for s in args.members.split(",") if s.strip()]
    if not specs:
        raise ValueError("--members needs at least one checkpoint")
    members = []
    for spec in specs:
        path, scheme = _parse_member_spec(spec)
        members.append(load_member(path, scheme))
    dataset = load_jsonl(args.data)
    _require_labels(dataset)
    result = evaluate_ensemble(members, dataset, include_members=True)
    result["data"] = str(args.data)
    if args.report_dir:
        report_dir = Path(args.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        result["metrics_csv"] = str(report_mod.save_ensemble_csv(
            result, report_dir / "ensemble.csv"))
        result["figure"] = str(report_mod.save_ensemble_figure(
            result, report_dir / "ensemble.png"))
    return result


def _inspect_rows(d_toks, q_toks, o_toks, scheme, max_len, mask):
    seq = build_sequence(range(len(d_toks)), range(len(q_toks)),
                         range(len(o_toks)), scheme, max_len)
    signs = highlight_signs(seq, mask)
    by_segment = {"D": d_toks, "Q": q_toks, "O": o_toks}
    rows = []
    for pos, (ref, seg) in enumerate(zip(seq.ids, seq.segments)):
        surface = _SEGMENT_SURFACES.get(seg) or by_segment[seg][ref]
        rows.append({"position": pos, "surface": surface, "segment": seg,
                     "sign": int(signs[pos])})
    return rows


def cmd_inspect(args: argparse.Namespace) -> dict:
    dataset = load_jsonl(args.data)
    if not 0 <= args.index < len(dataset):
        raise ValueError(f"index {args.index} out of range "
                         f"for {len(dataset)} instances")
    inst = dataset[args.index]
    if not 0 <= args.option < len(inst.options):
        raise ValueError(f"option {args.option} out of range "
                         f"for {len(inst.options)} options")
    scheme = parse_scheme(args.scheme)
    d_toks = surfaces(tokenize(inst.document_for(args.option)))
    q_toks = surfaces(tokenize(inst.question))
    o_toks = surfaces(tokenize(inst.options[args.option]))
    tags = inst.flat_tags() or pos_tag(d_toks)
    mask = compute_highlight_mask(d_toks, tags, q_toks, o_toks)
    return {"index": args.index, "option": args.option, "scheme": scheme.name,
            "max_len": args.max_len,
            "tokens": _inspect_rows(d_toks, q_toks, o_toks, scheme,
                                    args.max_len, mask),
            "mask": [int(b) for b in mask],
            "document_tokens": list(d_toks), "tags": list(tags)}


def _render_inspect(result: dict) -> str:
    marks = {1: "+1", -1: "-1", 0: " ."}
    lines = [f"scheme {result['scheme']}  instance {result['index']}  "
             f"option {result['option']}"]
    for row in result["tokens"]:
        lines.append(f"{row['position']:4d}  {row['segment']:<5} "
                     f"{marks[row['sign']]}  {row['surface']}")
    return "\n".join(lines)


def cmd_stats(args: argparse.Namespace) -> dict:
    result = dataset_stats(load_jsonl(args.data))
    result["data"] = str(args.data)
    return result


# ---------------------------------------------------------------------------
# parser and dispatch


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="emit the result envelope as compact JSON only")

    parser = _Parser(prog="mrc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common],
                       help="generate practice questions from raw documents")
    p.add_argument("--docs", required=True,
                   help="documents: one per line, or a dataset JSONL file")
    p.add_argument("--out", required=True, help="output dataset JSONL path")
    p.add_argument("--nq", type=int, default=10,
                   help="questions attempted per document")
    p.add_argument("--ns", type=int, default=3, help="max sentences per question")
    p.add_argument("--nc", type=int, default=4, help="max spans removed")
    p.add_argument("--nt", type=int, default=4, help="max tokens per span")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-attempts-per-question", type=int, default=10)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("retrieve", parents=[common],
                       help="attach per-option retrieved documents to a dataset")
    p.add_argument("--corpus", required=True, help="one sentence per line")
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--k", type=int, default=50, help="sentences per query")
    p.add_argument("--out", required=True, help="output dataset JSONL path")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", parents=[common],
                       help="run a staged fine-tuning pipeline from a JSON plan")
    p.add_argument("--plan", required=True, help="pipeline plan JSON path")
    p.add_argument("--run-dir",
                   help="output directory (default: <plan stem>-run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scheme", help="segment order (default: from checkpoint)")
    p.add_argument("--sigmoid", action="store_true",
                   help="force per-option sigmoid metrics")
    p.add_argument("--highlight", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="override the checkpoint's highlight setting")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", parents=[common],
                       help="evaluate a score-averaging ensemble")
    p.add_argument("--members", required=True,
                   help="comma-separated ckpt[:scheme] list")
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir",
                   help="also write ensemble.csv and ensemble.png here")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("inspect", parents=[common],
                       help="render one option's input sequence with highlights")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True, help="instance index")
    p.add_argument("--option", type=int, default=0, help="option index")
    p.add_argument("--scheme", default="dq_o")
    p.add_argument("--max-len", type=int, default=256)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stats", parents=[common],
                       help="summarize a dataset file")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        result = args.func(args)
    except OSError as exc:
        print(f"mrc {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingError) as exc:
        print(f"mrc {args.command}: {exc}", file=sys.stderr)
        return 1
    envelope = {"command": args.command, "ok": True, "result": result}
    if args.json:
        print(json.dumps(envelope, ensure_ascii=False))
    elif args.command == "inspect":
        print(_render_inspect(result))
    else:
        print(json.dumps(envelope, indent=2, ensure_ascii=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
