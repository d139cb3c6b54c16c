"""Command-line entry point: ``qops <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
first prints its resolved configuration as one ``CONFIG: {...}`` line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from qops import autodiff as ad
from qops import checkpoint
from qops.data import (
    LexiconTagger,
    Vocab,
    build_vocab,
    make_batch,
    read_break_csv,
    read_jsonl,
    synthetic_corpus,
    write_jsonl,
)
from qops.evaluation import evaluate_pairs, export_attention

GRADCHECK_TOL = 1e-4

log = logging.getLogger("qops")


class UsageError(Exception):
    pass


def echo_config(cmd: str, config: dict) -> None:
    print("CONFIG: " + json.dumps({"command": cmd, **config}, sort_keys=True, default=str))


def read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in checkpoint.parse_config(text).items()}


def resolve_seed(args, file_cfg: dict[str, str], default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if os.environ.get("QOPS_SEED"):
        return int(os.environ["QOPS_SEED"])
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    return default


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_corpus(path: str | None):
    corpus = read_jsonl(_need_file(path, "corpus path"))
    if not corpus:
        raise UsageError(f"corpus {path} is empty")
    return corpus


# ---------------------------------------------------------------- commands


def cmd_convert(args) -> int:
    src = _need_file(args.break_csv, "BREAK CSV")
    tagger = LexiconTagger.load(args.lexicon) if args.lexicon else LexiconTagger.bundled()
    echo_config("convert", {"break_csv": str(src), "lexicon": args.lexicon or "<bundled>",
                            "out": args.out, "copynet_out": args.copynet_out, "strict": not args.no_strict})
    examples, stats, records = read_break_csv(src, tagger, strict=not args.no_strict)
    for line_no, msg in stats.skipped:
        print(f"skipped line {line_no}: {msg}", file=sys.stderr)
    write_jsonl(examples, args.out)
    if args.copynet_out:
        from qops.copynet import from_break_record, write_copy_jsonl

        write_copy_jsonl([from_break_record(r, ex.pos) for r, ex in zip(records, examples)], args.copynet_out)
    print(json.dumps(stats.summary()))
    return 0


def _train_config(args, file_cfg):
    from qops.training import TrainConfig

    preset = args.preset or file_cfg.get("preset")
    if not preset:
        raise UsageError("give --preset ex1|ex2 or a config file with preset=...")
    fields = {
        "epochs": int, "lr0": float, "batch_size": int, "teacher_forcing_ratio": float,
        "lr_step": int, "lr_gamma": float, "optimizer": str, "clip_norm": float,
    }
    over = {}
    for name, conv in fields.items():
        if name in file_cfg:
            over[name] = conv(file_cfg[name])
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    model_over = {}
    if args.g_state or file_cfg.get("g_state_choice"):
        model_over["g_state_choice"] = args.g_state or file_cfg["g_state_choice"]
    over["seed"] = resolve_seed(args, file_cfg)
    try:
        return TrainConfig.preset(preset, model_overrides=model_over, **over)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    from qops.training import save_checkpoint, train

    file_cfg = read_config_file(args.config)
    corpus_path = args.corpus or file_cfg.get("corpus")
    corpus = _load_corpus(corpus_path)
    dev = read_jsonl(args.dev) if args.dev else None
    cfg = _train_config(args, file_cfg)
    echo_config("train", {"corpus": corpus_path, "out": args.out, "report": args.report, **cfg.to_dict()})
    model, report = train(cfg, corpus, dev)
    save_checkpoint(model, args.out, cfg)
    if args.report:
        report.to_csv(args.report)
    last = report.epochs[-1]
    print(json.dumps({"epochs": len(report.epochs), "final_loss": last.loss, "train_acc": last.train_acc,
                      "dev_acc": last.dev_acc, "final_lr": report.final_lr, "seconds": round(report.seconds, 3)}))
    return 0


def cmd_eval(args) -> int:
    from qops.training import load_checkpoint

    model = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    corpus = _load_corpus(args.corpus)
    echo_config("eval", {"checkpoint": args.checkpoint, "corpus": args.corpus, "max_len": args.max_len})
    pairs = [(model.predict_symbols(ex.pos, args.max_len)[0], ex.ops) for ex in corpus]
    print(evaluate_pairs(pairs, model.op_vocab.content_symbols()).to_json())
    return 0


def cmd_predict(args) -> int:
    from qops.training import load_checkpoint

    model = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    if not args.pos_tags:
        raise UsageError("give at least one POS tag")
    echo_config("predict", {"checkpoint": args.checkpoint, "pos": args.pos_tags, "max_len": args.max_len})
    ops, _ = model.predict_symbols(args.pos_tags, args.max_len)
    print(" ".join(ops))
    return 0


def gradcheck_preset(preset: str, seed: int = 0) -> float:
    """Relative gradient error of the teacher-forced NLL on a 2-example batch."""
    from qops.seq2seq import ModelConfig, init_params
    from qops.training import batch_loss

    corpus = synthetic_corpus(2, seed=seed)
    pos_vocab = build_vocab(corpus, "pos")
    op_vocab = build_vocab(corpus, "ops", strict=True)
    cfg = ModelConfig.preset(preset, pos_vocab_size=len(pos_vocab), op_vocab_size=len(op_vocab))
    params = init_params(cfg, seed)
    # larger weights than the default init so every gate is exercised
    rng = np.random.default_rng(seed + 1)
    for t in params.tensors():
        t.data[...] = rng.normal(0.0, 0.5, size=t.shape)
    batch = make_batch(corpus, pos_vocab, op_vocab)
    f = lambda: batch_loss(batch, params, cfg, 1.0, np.random.default_rng(0))  # noqa: E731
    return ad.grad_check(f, params.tensors(), 1e-4)


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args, {})
    echo_config("gradcheck", {"preset": args.preset, "seed": seed, "eps": 1e-4, "tolerance": GRADCHECK_TOL})
    err = gradcheck_preset(args.preset, seed)
    print(f"max_relative_error={err:.3e}")
    return 0 if err <= GRADCHECK_TOL else 1


def cmd_attention(args) -> int:
    from qops.data import EOS
    from qops.training import load_checkpoint

    model = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    corpus = _load_corpus(args.corpus)
    matches = [ex for ex in corpus if ex.id == args.example_id]
    if not matches:
        raise UsageError(f"example {args.example_id!r} not in {args.corpus}")
    ex = matches[0]
    echo_config("attention", {"checkpoint": args.checkpoint, "corpus": args.corpus,
                              "example_id": args.example_id, "out": args.out})
    ops, trace = model.predict_symbols(ex.pos, args.max_len)
    labels = ops + [EOS] if len(ops) < trace.shape[0] else ops
    export_attention(trace, ex.pos, labels, args.out)
    print(" ".join(ops))
    return 0


def _sop_for(corpus, op_vocab, predictor_path):
    from qops.copynet import gold_sop, predicted_sop
    from qops.training import load_checkpoint

    if predictor_path:
        predictor = load_checkpoint(_need_file(predictor_path, "predictor checkpoint"))
        return predicted_sop(corpus, predictor, op_vocab, LexiconTagger.bundled())
    return gold_sop(corpus, op_vocab)


def cmd_copynet_train(args) -> int:
    from qops.copynet import CopyNetConfig, read_copy_jsonl, save_copynet, train_copynet
    from qops.data import OPERATORS

    corpus = read_copy_jsonl(_need_file(args.corpus, "corpus path"))
    if not corpus:
        raise UsageError("copy corpus is empty")
    seed = resolve_seed(args, {})
    op_vocab = Vocab(OPERATORS)
    sop = _sop_for(corpus, op_vocab, args.predictor)
    cfg = CopyNetConfig(emb_dim=args.dim, enc_hid_dim=args.dim, dec_hid_dim=args.dim, sop_dim=args.sop_dim)
    echo_config("copynet-train", {"corpus": args.corpus, "predictor": args.predictor or "<gold ops>",
                                  "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                  "seed": seed, **cfg.to_dict()})
    model, losses = train_copynet(corpus, sop, cfg, args.epochs, args.lr, args.batch_size, seed, op_vocab=op_vocab)
    save_copynet(model, args.out)
    print(json.dumps({"epochs": len(losses), "first_loss": losses[0], "final_loss": losses[-1]}))
    return 0


def cmd_copynet_eval(args) -> int:
    from qops.copynet import evaluate_copynet, load_copynet, read_copy_jsonl

    model = load_copynet(_need_file(args.checkpoint, "checkpoint"))
    corpus = read_copy_jsonl(_need_file(args.corpus, "corpus path"))
    if not corpus:
        raise UsageError("copy corpus is empty")
    echo_config("copynet-eval", {"checkpoint": args.checkpoint, "corpus": args.corpus,
                                 "predictor": args.predictor or "<gold ops>"})
    sop = _sop_for(corpus, model.op_vocab, args.predictor)
    print(json.dumps(evaluate_copynet(model, corpus, sop)))
    return 0


def cmd_tree_train(args) -> int:
    from qops.tree_scorer import MarginConfig, read_instances, save_scorer, train_scorer

    instances = read_instances(_need_file(args.instances, "instance file"))
    if not instances:
        raise UsageError("instance file is empty")
    seed = resolve_seed(args, {})
    cfg = MarginConfig(lam=args.lam, max_leaves=args.max_leaves, dim=args.dim, valence_weight=args.valence_weight)
    echo_config("tree-train", {"instances": args.instances, "steps": args.steps, "lr": args.lr,
                               "seed": seed, "lam": cfg.lam, "max_leaves": cfg.max_leaves, "dim": cfg.dim,
                               "valence_weight": cfg.valence_weight})
    model = train_scorer(instances, cfg, args.steps, args.lr, seed)
    save_scorer(model, args.out)
    print(json.dumps({"steps": len(model.history), "final_J": model.history[-1]}))
    return 0


def cmd_tree_eval(args) -> int:
    from qops.tree_scorer import load_scorer, objective, predict_tree, read_instances

    model = load_scorer(_need_file(args.checkpoint, "checkpoint"))
    instances = read_instances(_need_file(args.instances, "instance file"))
    if not instances:
        raise UsageError("instance file is empty")
    echo_config("tree-eval", {"checkpoint": args.checkpoint, "instances": args.instances})
    exact = sum(int(predict_tree(model, inst.leaves) == inst.tree) for inst in instances)
    _, results = objective(instances, model)
    print(json.dumps({"n": len(instances), "exact_tree": exact / len(instances),
                      "mean_J": float(np.mean([r.value for r in results]))}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qops", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="BREAK CSV -> tagged JSONL corpus")
    c.add_argument("break_csv")
    c.add_argument("--lexicon", help="word<TAB>TAG file (default: bundled lexicon)")
    c.add_argument("--out", required=True)
    c.add_argument("--copynet-out", help="also write a copy-decoder corpus")
    c.add_argument("--no-strict", action="store_true", help="accept operators outside the 13-symbol set")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train the operator predictor")
    t.add_argument("--corpus")
    t.add_argument("--dev")
    t.add_argument("--preset", choices=["ex1", "ex2"])
    t.add_argument("--config", help="key=value file; CLI flags override it")
    t.add_argument("--out", required=True)
    t.add_argument("--report", help="per-epoch CSV report")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--teacher-forcing-ratio", type=float)
    t.add_argument("--lr-step", type=int)
    t.add_argument("--lr-gamma", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--g-state", choices=["previous", "current"])
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="token accuracy / exact match / confusion as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--max-len", type=int, default=20)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict operators for a POS-tag sequence")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("pos_tags", nargs="*")
    pr.add_argument("--max-len", type=int, default=20)
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of the model gradient")
    g.add_argument("--preset", choices=["ex1", "ex2"], default="ex1")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("attention", help="export the attention matrix of one example as CSV")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--example-id", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--max-len", type=int, default=20)
    a.set_defaults(func=cmd_attention)

    ct = sub.add_parser("copynet-train", help="train the operator-conditioned copy decoder")
    ct.add_argument("--corpus", required=True)
    ct.add_argument("--predictor", help="operator-predictor checkpoint (default: gold operators)")
    ct.add_argument("--out", required=True)
    ct.add_argument("--epochs", type=int, default=30)
    ct.add_argument("--lr", type=float, default=1e-2)
    ct.add_argument("--batch-size", type=int, default=4)
    ct.add_argument("--dim", type=int, default=8)
    ct.add_argument("--sop-dim", type=int, default=4)
    ct.add_argument("--seed", type=int)
    ct.set_defaults(func=cmd_copynet_train)

    ce = sub.add_parser("copynet-eval", help="greedy-decode a copy corpus")
    ce.add_argument("--checkpoint", required=True)
    ce.add_argument("--corpus", required=True)
    ce.add_argument("--predictor")
    ce.set_defaults(func=cmd_copynet_eval)

    tt = sub.add_parser("tree-train", help="train the margin tree scorer")
    tt.add_argument("--instances", required=True)
    tt.add_argument("--out", required=True)
    tt.add_argument("--steps", type=int, default=500)
    tt.add_argument("--lr", type=float, default=1e-2)
    tt.add_argument("--lam", type=float, default=0.1)
    tt.add_argument("--dim", type=int, default=4)
    tt.add_argument("--max-leaves", type=int, default=10)
    tt.add_argument("--valence-weight", type=float, default=0.0)
    tt.add_argument("--seed", type=int)
    tt.set_defaults(func=cmd_tree_train)

    te = sub.add_parser("tree-eval", help="exact-tree rate and mean objective")
    te.add_argument("--checkpoint", required=True)
    te.add_argument("--instances", required=True)
    te.set_defaults(func=cmd_tree_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qops {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, checkpoint.FormatError) as exc:
        print(f"qops {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
