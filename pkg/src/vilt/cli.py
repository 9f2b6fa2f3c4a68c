"""Command-line entry point: ``vilt <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad arguments, missing files, invalid
config), 2 internal error. Outputs go under ``--out`` or, if omitted, under
``$VILT_OUT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import torch

from . import __version__

logger = logging.getLogger("vilt")

TASKS = ("cls", "nlvr2-pair", "retrieval")
HEAD_KEYS = {"cls": "cls", "nlvr2-pair": "nlvr2", "retrieval": "sim"}


class UserError(Exception):
    """Problem with the invocation or its inputs rather than with the code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _out_root(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("VILT_OUT", "runs")) / default_name


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UserError(f"{what} not found: {path}")
    return path


# -- config assembly --------------------------------------------------------------

def _run_config(args, vocab_size: int):
    from .config import RunConfig, ablation_configs, desk_config

    try:
        cfg = RunConfig.load(args.config) if args.config else desk_config(vocab_size)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UserError(f"invalid config: {exc}") from exc
    if getattr(args, "ablation_row", None) is not None:
        rows = ablation_configs(cfg)
        if not 1 <= args.ablation_row <= len(rows):
            raise UserError(f"--ablation-row must be in 1..{len(rows)}")
        cfg = rows[args.ablation_row - 1]
    overrides = {
        "seed": args.seed,
        "steps": getattr(args, "steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "base_lr": getattr(args, "lr", None),
        "use_wpa": getattr(args, "use_wpa", None),
        "use_mpp": getattr(args, "use_mpp", None),
        "wwm": getattr(args, "wwm", None),
        "augment": getattr(args, "augment", None),
        "threads": args.threads,
    }
    try:
        cfg = cfg.with_overrides(**overrides)
    except (ValueError, TypeError) as exc:
        raise UserError(f"invalid config override: {exc}") from exc
    if cfg.model.vocab_size < vocab_size:
        raise UserError(f"model vocab_size {cfg.model.vocab_size} is smaller than the corpus vocabulary ({vocab_size})")
    return cfg


def _corpus(data, cfg, split):
    from .data import Corpus

    root = _require(data, "corpus")
    try:
        return Corpus(root, cfg, split)
    except (FileNotFoundError, ValueError) as exc:
        raise UserError(str(exc)) from exc


def _load(path):
    from .train import load_checkpoint

    try:
        return load_checkpoint(_require(path, "checkpoint"))
    except (KeyError, ValueError) as exc:
        raise UserError(f"cannot read checkpoint {path}: {exc}") from exc


def _report(task, split, metrics, cfg, ckpt_path) -> dict:
    from .checkpoint import file_hash

    return {
        "task": task,
        "split": split,
        "metrics": metrics,
        "config_hash": cfg.hash(),
        "checkpoint_hash": file_hash(ckpt_path),
        "code_version": __version__,
    }


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synth import generate_corpus, manifest_hash

    out = _out_root(args, "data")
    try:
        manifest = generate_corpus(args.n, args.seed, out, canvas=args.canvas, grid=args.grid,
                                   min_objects=args.min_objects, max_objects=args.max_objects,
                                   val_fraction=args.val_fraction)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    print(json.dumps({"manifest": str(manifest), "pairs": args.n, "sha256": manifest_hash(manifest)}))
    return 0


def cmd_pretrain(args) -> int:
    from .text import Vocabulary
    from .train import evaluate_itm, pretrain

    data = _require(args.data, "corpus")
    vocab = Vocabulary.load(_require(data / "vocab.txt", "vocabulary"))
    if args.resume:
        cfg = _load(args.resume)[0]
    else:
        cfg = _run_config(args, len(vocab))
    out = _out_root(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    _write_json(out / "provenance.json", cfg.provenance())
    train = _corpus(data, cfg, "train")
    model, heads, rows = pretrain(train, cfg, out, resume=args.resume)
    summary = {"steps": cfg.steps, "final": rows[-1] if rows else None, "checkpoint": str(out / "last.ckpt"),
               **cfg.provenance()}
    if args.eval_split:
        summary["itm_accuracy"] = evaluate_itm(model, heads, _corpus(data, cfg, args.eval_split), cfg.seed)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_finetune(args) -> int:
    from .train import (
        evaluate_cls, evaluate_nlvr2, evaluate_retrieval, finetune_cls, finetune_nlvr2,
        finetune_retrieval, save_checkpoint,
    )

    cfg, model, heads, _, meta = _load(args.checkpoint)
    if "pretrain" not in heads:
        raise UserError("fine-tuning needs a pre-trained checkpoint with ITM/MLM heads")
    overrides = {"augment": args.augment, "seed": args.seed, "threads": args.threads}
    cfg = cfg.with_overrides(**overrides)
    torch.set_num_threads(cfg.threads)
    out = _out_root(args, f"finetune-{args.task}")
    out.mkdir(parents=True, exist_ok=True)
    train = _corpus(args.data, cfg, "train")
    val = _corpus(args.data, cfg, args.split)
    augment_log = [] if cfg.augment else None
    log_path = out / "log.jsonl"
    log_path.write_text("")
    kw = dict(steps=args.steps, lr=args.lr, seed=cfg.seed, log_path=log_path, augment_log=augment_log)
    if args.task == "retrieval":
        head, _ = finetune_retrieval(model, heads["pretrain"], train, cfg, **kw)
        metrics, _ = evaluate_retrieval(model, head, val, n=args.gallery)
    elif args.task == "cls":
        head, _ = finetune_cls(model, train, cfg, **kw)
        metrics = {"accuracy": evaluate_cls(model, head, val), "train_accuracy": evaluate_cls(model, head, train)}
    else:
        head, _ = finetune_nlvr2(model, train, cfg, **kw)
        metrics = {"accuracy": evaluate_nlvr2(model, head, val, seed=cfg.seed)}
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, cfg, model, {HEAD_KEYS[args.task]: head},
                    meta={"stage": "finetune", "task": args.task, "parent": str(args.checkpoint),
                          "parent_step": meta.get("step")})
    if augment_log is not None:
        from .data import write_jsonl

        (out / "augment.jsonl").write_text("")
        write_jsonl(out / "augment.jsonl", augment_log)
    cfg.save(out / "config.json")
    report = _report(args.task, args.split, metrics, cfg, ckpt)
    _write_json(out / "report.json", report)
    print(json.dumps(report))
    return 0


def cmd_evaluate(args) -> int:
    from .train import evaluate_cls, evaluate_itm, evaluate_nlvr2, evaluate_retrieval

    cfg, model, heads, _, _ = _load(args.checkpoint)
    torch.set_num_threads(args.threads or cfg.threads)
    corpus = _corpus(args.data, cfg, args.split)
    if args.task == "itm":
        if "pretrain" not in heads:
            raise UserError("checkpoint has no ITM head")
        metrics = {"accuracy": evaluate_itm(model, heads["pretrain"], corpus, cfg.seed)}
    else:
        key = HEAD_KEYS[args.task]
        if key not in heads:
            if args.task == "retrieval" and "pretrain" in heads:
                # zero-shot: score with the true-pair row of the pre-trained ITM head
                from .downstream import SimilarityHead

                heads[key] = SimilarityHead.from_itm(heads["pretrain"])
            else:
                raise UserError(f"checkpoint has no {key!r} head for task {args.task!r} (has {sorted(heads)})")
        head = heads[key]
        if args.task == "retrieval":
            metrics, _ = evaluate_retrieval(model, head, corpus, n=args.gallery)
        elif args.task == "cls":
            metrics = {"accuracy": evaluate_cls(model, head, corpus)}
        else:
            metrics = {"accuracy": evaluate_nlvr2(model, head, corpus, seed=cfg.seed)}
    report = _report(args.task, args.split, metrics, cfg, args.checkpoint)
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps(report))
    return 0


def cmd_heatmap(args) -> int:
    from .data import prepare_image
    from .heatmap import alignment_plan, word_position
    from .image import load_image
    from .ot import export_heatmap
    from .text import tokenize_batch

    cfg, model, _, _, meta = _load(args.checkpoint)
    torch.set_num_threads(args.threads or cfg.threads)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.image).resolve().parent.parent / "vocab.txt"
    from .text import Vocabulary

    vocab = Vocabulary.load(_require(vocab_path, "vocabulary (pass --vocab)"))
    try:
        img = load_image(_require(args.image, "image"))
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    max_len = cfg.model.max_text_len + 1
    try:
        pos = word_position(args.caption, args.token, vocab, max_len)
    except KeyError as exc:
        raise UserError(str(exc.args[0])) from exc
    tokens = tokenize_batch([args.caption], vocab, max_len)
    images = prepare_image(img, cfg)
    plan = alignment_plan(model, tokens, images, iters=args.iters)
    out = Path(args.out) if args.out else _out_root(args, "heatmap") / "heatmap.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    grid = images.grid_shapes[0]
    from .image import resize_keep_aspect

    shown = resize_keep_aspect(img, cfg.image_short, cfg.image_long)
    values = export_heatmap(plan, pos - 1, grid, images.grid_pos[0].numpy(), out, image=shown,
                            patch_size=cfg.model.patch_size)
    info = {"png": str(out), "plan": str(out.with_suffix(".json")), "token": args.token, "token_row": pos - 1,
            "iters": args.iters, "min": float(values.min()), "max": float(values.max()), **cfg.provenance()}
    print(json.dumps(info))
    return 0


def cmd_analyze(args) -> int:
    from .complexity import bench_latency, count_flops, count_params
    from .config import RunConfig, desk_model
    from .model import ModelConfig

    if args.config:
        try:
            model_cfg = RunConfig.load(_require(args.config, "config")).model
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise UserError(f"invalid config: {exc}") from exc
    else:
        model_cfg = {"base": ModelConfig.base, "desk": desk_model, "tiny": ModelConfig.tiny}[args.preset]()
    sizes = []
    for s in args.sizes:
        try:
            nv, nt = (int(x) for x in s.split("+"))
        except ValueError as exc:
            raise UserError(f"size {s!r} is not of the form VISUAL+TEXT") from exc
        sizes.append((nv, nt))
    params = count_params(model_cfg, include_text_embedder=args.include_text_embedder)
    out = {"model": model_cfg.to_dict(), "params": params.to_dict(),
           "flops": {f"{nv}+{nt}": count_flops(model_cfg, nv, nt).to_dict() for nv, nt in sizes}}
    if args.latency:
        torch.set_num_threads(args.threads)
        out["latency"] = bench_latency(model_cfg, sizes, reps=args.reps).to_dict()
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(params.table())
        for nv, nt in sizes:
            print()
            print(count_flops(model_cfg, nv, nt).table())
        if args.latency:
            print()
            print(bench_latency(model_cfg, sizes, reps=args.reps).table())
    if args.out:
        _write_json(Path(args.out), out)
    return 0


# -- parser -----------------------------------------------------------------------

def _flag(p, name, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction, default=None,
                   help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output path (default under $VILT_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vilt", description="Desk-scale single-stream vision-and-language transformer.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic shapes corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--canvas", type=int, default=48)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--val-fraction", type=float, default=0.125)
    p.set_defaults(func=cmd_gen_data, seed_default=0)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train with ITM/MLM (+WPA, +MPP)")
    p.add_argument("--data", required=True, help="corpus directory with manifest.jsonl")
    p.add_argument("--config", help="RunConfig JSON; flags override its values")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    _flag(p, "use-wpa", "word-patch alignment term")
    _flag(p, "use-mpp", "masked patch prediction term")
    _flag(p, "wwm", "whole word masking")
    _flag(p, "augment", "RandAugment during fine-tuning (recorded in the config)")
    p.add_argument("--ablation-row", type=int, help="start from ablation row 1..7")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval-split", default="val", help="split for the final ITM accuracy ('' to skip)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a pre-trained checkpoint")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", help="evaluation split")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--gallery", type=int, default=32, help="retrieval gallery size")
    _flag(p, "augment", "RandAugment on training images")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--task", choices=("itm",) + TASKS, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--gallery", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", parents=[common], help="word-patch transport heatmap for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--token", required=True, help="caption word to visualise")
    p.add_argument("--vocab", help="vocab.txt (default: the corpus next to the image)")
    p.add_argument("--iters", type=int, default=1000)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("analyze", parents=[common], help="parameter/FLOPs accounting and latency")
    p.add_argument("--preset", choices=("base", "desk", "tiny"), default="base")
    p.add_argument("--config", help="RunConfig JSON (overrides --preset)")
    p.add_argument("--sizes", nargs="+", default=["240+40"], help="VISUAL+TEXT token counts")
    p.add_argument("--include-text-embedder", action="store_true")
    p.add_argument("--latency", action="store_true")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = getattr(args, "seed_default", None)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - top-level guard maps crashes to exit code 2
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
