"""Command-line interface.

Subcommands::

    synth   write train/val/test splits of synthetic scenes plus manifests
    train   fit a model on a manifest; writes a checkpoint and a JSON-lines log
    infer   checkpoint + pairs -> probability tensors and binary PNG masks
    refine  probability map + mask sets -> refined PNG mask
    eval    predicted PNG masks vs ground truth -> pooled metrics
    sweep   alpha/beta grid over several seeds -> delimited table

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import ImagePair, MaskSet, S2CError
from .data.config import (dump_train_config, mapping_config, read_sections, refine_config, synth_config,
                          train_config)
from .data.manifest import load_manifest, write_split
from .data.synth import gen_dataset
from .data.tensorio import (read_checkpoint, read_image_png, read_mask_png, read_prob_map, write_checkpoint,
                            write_mask_png, write_prob_map)
from .encoder import EncoderSpec, Siamese
from .evaluation import format_sweep, pooled_metrics, sweep
from .mapping import ColorComponentProposer, binarize, extract_prompts, iou_refine
from .train import evaluate_f1, fit, predict_probs

log = logging.getLogger("s2c")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


# -- checkpoints -----------------------------------------------------------------

def save_model(path, model: Siamese, config_text: str = "", extra: Optional[dict] = None) -> None:
    meta = {"specs": {k: s.to_dict() for k, s in model.specs.items()}, "config": config_text, **(extra or {})}
    write_checkpoint(path, model.flat(), meta)


def load_model(path) -> tuple[Siamese, dict]:
    tensors, meta = read_checkpoint(path)
    specs = {k: EncoderSpec.from_dict(d) for k, d in meta["specs"].items()}
    params: dict = {k: {} for k in specs}
    for key, arr in tensors.items():
        branch, name = key.split("/", 1)
        params[branch][name] = torch.from_numpy(arr.copy())
    return Siamese(specs, params), meta


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args, sections) -> int:
    modality = "pseudo-sar" if args.mode == "mmcd" else None
    cfg = synth_config(sections, seed=args.seed, modality=modality)
    out = Path(args.out)
    counts = dict(zip(SPLITS, (args.n_train, args.n_val, args.n_test)))
    for i, split in enumerate(SPLITS):
        pairs = gen_dataset(cfg, counts[split], seed=cfg.seed * 1000 + i + 1)
        write_split(out, split, pairs)
        print(f"{split}: {len(pairs)} pairs -> {out / (split + '.json')}")
    return 0


def _load_pairs(path) -> list[ImagePair]:
    return load_manifest(path).load()


def _train_cfg(args, sections):
    return train_config(sections, seed=args.seed, mode=args.mode, epochs=getattr(args, "epochs", None))


def cmd_train(args, sections) -> int:
    cfg = _train_cfg(args, sections)
    train = _load_pairs(args.train)
    val = _load_pairs(args.val) if args.val else []
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".jsonl")
    with open(log_path, "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
        state = fit(train, val, cfg, on_record=on_record)
    save_model(args.out, state.best_model(), dump_train_config(cfg),
               {"best_epoch": state.best.epoch, "best_val_f1": state.best.f1})
    print(f"best epoch {state.best.epoch} val F1 {state.best.f1:.6f} -> {args.out}")
    return 0


def cmd_infer(args, sections) -> int:
    model, _ = load_model(args.checkpoint)
    mcfg = mapping_config(sections)
    if args.manifest:
        pairs = _load_pairs(args.manifest)
    elif args.t1 and args.t2:
        pairs = [ImagePair(read_image_png(args.t1), read_image_png(args.t2))]
    else:
        raise UsageError("infer needs --manifest or both --t1 and --t2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (yc, pair) in enumerate(zip(predict_probs(model, pairs, mcfg), pairs)):
        write_prob_map(out / f"{i:04d}_prob.s2ct", yc)
        write_mask_png(out / f"{i:04d}_pred.png", binarize(yc, args.thresh, pair.shape))
    print(f"{len(pairs)} predictions -> {out}")
    return 0


def _mask_set(paths: Sequence[str]) -> MaskSet:
    return MaskSet(tuple(read_mask_png(p) for p in paths))


def cmd_refine(args, sections) -> int:
    cfg = refine_config(sections)
    yc = read_prob_map(args.prob)
    if args.m1 is not None and args.m2 is not None:
        M1, M2 = _mask_set(args.m1), _mask_set(args.m2)
        shape = M1.masks[0].bits.shape if M1.masks else (M2.masks[0].bits.shape if M2.masks else None)
    elif args.t1 and args.t2:
        t1, t2 = read_image_png(args.t1), read_image_png(args.t2)
        shape = t1.shape
        prompts = extract_prompts(yc, args.prompt_thresh, args.max_points, shape)
        proposer = ColorComponentProposer()
        M1, M2 = proposer.propose(t1, prompts), proposer.propose(t2, prompts)
    else:
        raise UsageError("refine needs --m1/--m2 mask lists or --t1/--t2 images")
    if shape is None:
        raise UsageError("refine needs at least one mask or the image pair")
    write_mask_png(args.out, iou_refine(yc, M1, M2, cfg, shape))
    print(f"refined mask -> {args.out}")
    return 0


def cmd_eval(args, sections) -> int:
    if args.manifest:
        man = load_manifest(args.manifest)
        truths = [read_mask_png(man.resolve(item.label)) for item in man.items]
        pred_dir = Path(args.pred_dir or ".")
        preds = [read_mask_png(pred_dir / f"{i:04d}_pred.png") for i in range(len(truths))]
    elif args.pred and args.truth:
        if len(args.pred) != len(args.truth):
            raise UsageError("--pred and --truth need the same number of files")
        preds = [read_mask_png(p) for p in args.pred]
        truths = [read_mask_png(p) for p in args.truth]
    else:
        raise UsageError("eval needs --manifest or --pred/--truth lists")
    m = pooled_metrics(preds, truths)
    print(f"F1={m.f1!r} OA={m.oa!r} precision={m.precision!r} recall={m.recall!r}")
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def cmd_sweep(args, sections) -> int:
    base = _train_cfg(args, sections)
    train, val = _load_pairs(args.train), _load_pairs(args.val)
    seeds = [int(s) for s in _floats(args.seeds)]

    def run(alpha, beta, seed):
        cfg = dataclasses.replace(base, seed=seed,
                                  weights=dataclasses.replace(base.weights, alpha=alpha, beta=beta))
        return evaluate_f1(fit(train, val, cfg).best_model(), val, cfg.mapping)

    print(format_sweep(sweep(_floats(args.alphas), _floats(args.betas), run, seeds)))
    return 0


# -- argument parsing ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2c", description="Unsupervised change detection with contrastive encoders.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="key = value config file with [sections]")
    p.add_argument("--mode", choices=("homogeneous", "mmcd"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=64)
    s.add_argument("--n-val", type=int, default=16)
    s.add_argument("--n-test", type=int, default=32)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit a model")
    s.add_argument("--train", required=True, help="training manifest")
    s.add_argument("--val", help="validation manifest")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSON-lines log (default: checkpoint path with .jsonl)")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict change maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--t1")
    s.add_argument("--t2")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--thresh", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("refine", help="refine a change map with mask sets")
    s.add_argument("--prob", required=True)
    s.add_argument("--m1", nargs="*", help="mask PNGs of the first date")
    s.add_argument("--m2", nargs="*", help="mask PNGs of the second date")
    s.add_argument("--t1")
    s.add_argument("--t2")
    s.add_argument("--prompt-thresh", type=float, default=0.5)
    s.add_argument("--max-points", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", help="score predicted masks")
    s.add_argument("--manifest", help="ground-truth manifest")
    s.add_argument("--pred-dir", help="directory of NNNN_pred.png files")
    s.add_argument("--pred", nargs="*")
    s.add_argument("--truth", nargs="*")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="alpha/beta grid search")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--alphas", default="0.1,0.2,0.5")
    s.add_argument("--betas", default="0.5,1.0,2.0")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"s2c: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        sections = read_sections(args.config)
        return args.func(args, sections)
    except UsageError as exc:
        print(f"s2c {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (S2CError, OSError, KeyError, ValueError) as exc:
        print(f"s2c {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
