"""Command-line surface: data generation, training, fine-tuning, gradient
checking, evaluation, 2-D projection, and the contrastive-only vs
contrastive+contextual comparison harness.

Configuration is a flat key=value text file; command-line flags override file
values. All emitted tables are CSV with a header row; report paths also render
matplotlib figures beside the CSVs. Exit codes: 0 success, 1 usage error,
2 data/I-O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import data as D
from . import encoders as enc
from . import evaluation as ev
from . import figures
from . import losses
from . import tensor as T
from . import training as tr

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


SUBCOMMANDS = ("gen-data", "train", "fine-tune", "grad-check",
               "eval-zeroshot", "eval-retrieve", "project", "compare")

# every config key with its documented default
CONFIG_DEFAULTS = {
    # optimization
    "epochs": 30, "batch_size": 32, "lr_image": 1e-4, "lr_text": 1e-6,
    "weight_decay": 1e-3, "decoupled_decay": 0, "seed": 0,
    # objective
    "tau": 1.0, "lambda_w": 0.75, "alpha": 0.5, "h": 0.5, "eps": 1e-5,
    # corpus
    "n_classes": 8, "n_pairs": 512, "d_img": 64, "vocab_size": 128,
    "tokens_per_caption": 12, "class_token_block": 8, "noise_sigma": 0.1,
    # architecture
    "d_hid": 256, "d_i": 256, "d_emb": 32, "d_t": 48, "d_e": 32,
    # evaluation
    "k": 5,
}

_INT_KEYS = {"epochs", "batch_size", "seed", "n_classes", "n_pairs", "d_img",
             "vocab_size", "tokens_per_caption", "class_token_block",
             "d_hid", "d_i", "d_emb", "d_t", "d_e", "k",
             "decoupled_decay"}


def read_config(path):
    """Flat key=value file; '#' starts a comment; unknown keys rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise D.CorpusFormatError(
                    f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_DEFAULTS:
                raise D.CorpusFormatError(
                    f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = int(value) if key in _INT_KEYS else float(value)
    return values


def resolve_config(args):
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for flag in ("seed", "alpha", "epochs", "k"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = value
    return cfg


def corpus_spec(cfg):
    return D.CorpusSpec(
        n_classes=cfg["n_classes"], n_pairs=cfg["n_pairs"],
        d_img=cfg["d_img"], vocab_size=cfg["vocab_size"],
        tokens_per_caption=cfg["tokens_per_caption"],
        class_token_block=cfg["class_token_block"],
        noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])


def loss_config(cfg, alpha=None):
    return losses.LossConfig(
        tau=cfg["tau"], lambda_w=cfg["lambda_w"],
        alpha=cfg["alpha"] if alpha is None else alpha,
        h=cfg["h"], eps=cfg["eps"])


def train_config(cfg, alpha=None):
    return tr.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lr_image=cfg["lr_image"], lr_text=cfg["lr_text"],
        weight_decay=cfg["weight_decay"],
        decoupled_decay=bool(cfg["decoupled_decay"]),
        loss=loss_config(cfg, alpha), seed=cfg["seed"])


def model_dims(cfg):
    return enc.Dims(d_img=cfg["d_img"], d_hid=cfg["d_hid"], d_i=cfg["d_i"],
                    d_emb=cfg["d_emb"], d_t=cfg["d_t"], d_e=cfg["d_e"],
                    vocab_size=cfg["vocab_size"])


def parse_args(argv):
    parser = _Parser(prog="ctxalign", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand")
    common = dict(config=("--config", str), seed=("--seed", int),
                  out=("--out", str), corpus=("--corpus", str),
                  checkpoint=("--checkpoint", str), alpha=("--alpha", float),
                  epochs=("--epochs", int), k=("--k", int))

    def add(name, *flags):
        p = sub.add_parser(name)
        for f in flags:
            flag, typ = common[f]
            p.add_argument(flag, type=typ)
        return p

    add("gen-data", "config", "seed", "out")
    add("train", "config", "seed", "out", "corpus", "alpha", "epochs")
    add("fine-tune", "config", "seed", "out", "corpus", "checkpoint",
        "epochs")
    add("grad-check", "config", "seed", "out")
    add("eval-zeroshot", "config", "out", "corpus", "checkpoint", "k")
    add("eval-retrieve", "config", "out", "corpus", "checkpoint", "k")
    add("project", "config", "out", "corpus", "checkpoint")
    add("compare", "config", "seed", "out", "corpus", "alpha", "epochs")

    args = parser.parse_args(argv)
    if args.subcommand is None:
        raise UsageError("a subcommand is required")
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name} is required for {args.subcommand}")


def _outdir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_corpus(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus file not found: {path}")
    return D.load_corpus(path)


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = _outdir(args)
    corpus = D.generate(corpus_spec(cfg))
    path = os.path.join(out, "corpus.jsonl")
    D.save_corpus(corpus, path)
    print(f"wrote {len(corpus)} pairs to {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    _require(args, "corpus")
    out = _outdir(args)
    corpus = _load_corpus(args.corpus)
    tcfg = train_config(cfg)
    params = enc.init_params(cfg["seed"], model_dims(cfg))
    ckpt, report = tr.train(tcfg, corpus, params)
    ckpt_path = os.path.join(out, "checkpoint.txt")
    tr.save_checkpoint(ckpt, ckpt_path)
    _write_csv(os.path.join(out, "loss_history.csv"),
               ["epoch", "loss", "contrastive", "contextual"],
               [(e, repr(t), repr(c), repr(x)) for e, t, c, x in report.history])
    if report.history:
        figures.render_loss_curves(report.history,
                                   os.path.join(out, "loss_curves.png"))
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_fine_tune(args):
    cfg = resolve_config(args)
    _require(args, "corpus", "checkpoint")
    out = _outdir(args)
    ckpt = tr.load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    tcfg = train_config(cfg)
    result = tr.fine_tune(ckpt, corpus, tcfg, n_classes=cfg["n_classes"])
    tr.save_checkpoint(result.checkpoint,
                       os.path.join(out, "finetuned_checkpoint.txt"))
    _write_csv(os.path.join(out, "finetune_metrics.csv"),
               ["metric", "value"],
               [("top1", repr(result.top1)), ("top5", repr(result.top5))])
    print(f"fine-tune top1={result.top1:.4f} top5={result.top5:.4f}")
    return EXIT_OK


def cmd_grad_check(args):
    cfg = resolve_config(args)
    lcfg = loss_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    n, d = 4, 8

    def f_total(x):
        u = x[:n * d].reshape(n, d)
        v = x[n * d:].reshape(n, d)
        tape = T.Tape()
        ut, vt = tape.leaf(u), tape.leaf(v)
        loss, _ = losses.total_loss(vt, ut, vt, ut, lcfg)
        grads = T.backward(loss)
        flat = np.concatenate([grads[ut.node_id], grads[vt.node_id]])
        return loss.item(), flat

    x0 = rng.standard_normal(2 * n * d)
    err = T.grad_check(f_total, x0, step=1e-5)
    print(f"max relative gradient error: {err:.3e}")
    if args.out:
        out = _outdir(args)
        tape = T.Tape()
        u = tape.leaf(rng.standard_normal((n, d)))
        v = tape.leaf(rng.standard_normal((n, d)))
        report = losses.contextual_affinity(u, v, lcfg)
        losses.write_affinity_report(
            report, os.path.join(out, "affinity_report.txt"))
    if err >= 1e-4:
        print("FAIL: gradient error above 1e-4", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _eval_checkpoint(args, cfg):
    ckpt = tr.load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    return ckpt, corpus


def cmd_eval_zeroshot(args):
    cfg = resolve_config(args)
    _require(args, "corpus", "checkpoint")
    out = _outdir(args)
    ckpt, corpus = _eval_checkpoint(args, cfg)
    spec = corpus_spec(cfg)
    class_embeds = ev.build_class_embeddings(
        ckpt.params, ev.default_prompts(spec))
    k = min(cfg["k"], spec.n_classes)
    result = ev.zero_shot_classify(ckpt.params, corpus.images(),
                                   corpus.class_ids(), class_embeds, k=k)
    _write_csv(os.path.join(out, "zeroshot.csv"), ["metric", "value"],
               [("top1", repr(result.top1)), ("top5", repr(result.top5)),
                (f"top{k}", repr(result.topk))])
    print(f"zero-shot top1={result.top1:.4f} top5={result.top5:.4f}")
    return EXIT_OK


def _retrieval_recalls(params, corpus, ks):
    """Text-to-image retrieval over the corpus; same-class images are the
    relevant set for each caption query."""
    rankings = []
    truth = []
    by_class = {}
    for r in corpus.records:
        by_class.setdefault(r.class_id, set()).add(r.id)
    kmax = max(ks)
    for r in corpus.records:
        ranked = ev.retrieve(params, r.tokens, corpus, min(kmax, len(corpus)))
        rankings.append([rid for rid, _ in ranked])
        truth.append(by_class[r.class_id])
    return {k: ev.recall_at_k(rankings, truth, k) for k in ks}


def cmd_eval_retrieve(args):
    cfg = resolve_config(args)
    _require(args, "corpus", "checkpoint")
    out = _outdir(args)
    ckpt, corpus = _eval_checkpoint(args, cfg)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    k = min(cfg["k"], len(corpus))
    recalls = _retrieval_recalls(ckpt.params, corpus, sorted({1, k}))
    _write_csv(os.path.join(out, "retrieval.csv"), ["metric", "value"],
               [(f"recall@{kk}", repr(val)) for kk, val in recalls.items()])
    print(" ".join(f"recall@{kk}={val:.4f}" for kk, val in recalls.items()))
    return EXIT_OK


def cmd_project(args):
    cfg = resolve_config(args)
    _require(args, "corpus", "checkpoint")
    out = _outdir(args)
    ckpt, corpus = _eval_checkpoint(args, cfg)
    if len(corpus) < 2:
        raise ValueError("projection needs at least 2 corpus records")
    embeds = enc.image_embeddings(ckpt.params, corpus.images())
    coords = ev.project_2d(embeds)
    classes = corpus.class_ids()
    rows = [(r.id, c, repr(float(x)), repr(float(y)))
            for r, c, (x, y) in zip(corpus.records, classes, coords)]
    _write_csv(os.path.join(out, "projection.csv"),
               ["id", "class", "x", "y"], rows)
    figures.render_projection(coords, classes,
                              os.path.join(out, "projection.png"))
    print(f"wrote projection for {len(corpus)} embeddings to {out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = resolve_config(args)
    _require(args, "corpus")
    out = _outdir(args)
    corpus = _load_corpus(args.corpus)
    if len(corpus) == 0:
        raise ValueError("compare needs a non-empty corpus")
    train_part, _val, held_out = tr.split_corpus(
        corpus, cfg["seed"], fractions=(0.8, 0.0, 0.2))
    if len(held_out) == 0:
        raise ValueError("corpus too small to hold out an evaluation split")
    spec = corpus_spec(cfg)
    prompts = ev.default_prompts(spec)
    alphas = (0.0, cfg["alpha"] if cfg["alpha"] else 0.5)
    results = []
    for alpha in alphas:
        params = enc.init_params(cfg["seed"], model_dims(cfg))
        ckpt, _report = tr.train(train_config(cfg, alpha=alpha),
                                 train_part, params)
        class_embeds = ev.build_class_embeddings(ckpt.params, prompts)
        zs = ev.zero_shot_classify(ckpt.params, held_out.images(),
                                   held_out.class_ids(), class_embeds,
                                   k=min(5, spec.n_classes))
        recalls = _retrieval_recalls(ckpt.params, held_out, [1])
        results.append({"recall@1": recalls[1], "zeroshot_top1": zs.top1,
                        "zeroshot_top5": zs.top5})
    metrics = [(name, results[0][name], results[1][name])
               for name in ("recall@1", "zeroshot_top1", "zeroshot_top5")]
    _write_csv(os.path.join(out, "comparison.csv"),
               ["metric", "alpha0", f"alpha{alphas[1]:g}"],
               [(name, repr(a), repr(b)) for name, a, b in metrics])
    figures.render_comparison(
        metrics, os.path.join(out, "comparison.png"),
        labels=("alpha=0", f"alpha={alphas[1]:g}"))
    for name, a, b in metrics:
        print(f"{name}: alpha=0 {a:.4f} | alpha={alphas[1]:g} {b:.4f}")
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fine-tune": cmd_fine_tune,
    "grad-check": cmd_grad_check,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-retrieve": cmd_eval_retrieve,
    "project": cmd_project,
    "compare": cmd_compare,
}


def dispatch(args):
    return _HANDLERS[args.subcommand](args)


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        print(f"subcommands: {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return dispatch(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, D.CorpusFormatError, tr.CheckpointFormatError,
            ValueError) as e:
        if isinstance(e, (T.NumericError, T.ShapeError)):
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (T.NumericError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint():
    sys.exit(main())
