"""Command-line pipeline driver.

Subcommands: synth, train-vq, tokenize, train-lm, finetune-head, generate,
eval. Every failure prints one machine-parsable JSON line on stderr
({"code", "message", "context"}) and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import data, pipeline
from .config import RunConfig, load_run_config
from .errors import CliUsageError, LoomError
from .finetune import count_trainable
from .vocab import VocabLayout


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through the JSON path
        raise CliUsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig file")
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--out", help="output path or directory")


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = pipeline.with_seed(cfg, args.seed)
    return cfg


def _require_out(args) -> str:
    if not args.out:
        raise CliUsageError("--out is required for this command")
    return args.out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenloom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="render the synthetic shape corpus")
    p.add_argument("--count", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("train-vq", help="train the discrete image tokenizer")
    p.add_argument("--data", required=True, help="dataset manifest (JSONL)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log-every", type=int, default=200)
    _add_common(p)

    p = sub.add_parser("tokenize", help="encode manifest images to token grids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    _add_common(p)

    p = sub.add_parser("train-lm", help="pre-train the LM on interleaved sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--vq", required=True, help="tokenizer checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=200)
    _add_common(p)

    p = sub.add_parser("finetune-head", help="selective fine-tune of image head rows")
    p.add_argument("--base", required=True, help="pre-trained LM checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=200)
    _add_common(p)

    p = sub.add_parser("generate", help="grammar-constrained interleaved generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--force-image", action="store_true", help="seed a BOI right after the prompt")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--max-images", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--image-temperature", type=float)
    _add_common(p)

    p = sub.add_parser("eval", help="reconstruction/CE/label-agreement metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--base", help="base checkpoint for CE comparison")
    p.add_argument("--gen-prompts", type=int, default=0)
    p.add_argument("--image-temperature", type=float)
    _add_common(p)
    return parser


def _cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    seed = args.seed if args.seed is not None else cfg.seed
    manifest = data.synth_corpus(args.count, seed, out, hw=cfg.vq.image_hw)
    print(f"manifest: {manifest}")
    print(f"samples: {args.count}")
    return 0


def _cmd_train_vq(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    tok = pipeline.train_vq(cfg, args.data, args.steps, args.batch_size, log_every=args.log_every)
    pipeline.save_bundle(out, cfg, tok, None, stage="vq")
    print(f"checkpoint: {out}")
    return 0


def _cmd_tokenize(args) -> int:
    bundle = pipeline.load_bundle(args.ckpt)
    out = _require_out(args)
    records, images = data.load_corpus_images(args.data)
    grids = []
    for start in range(0, images.shape[0], 64):
        grids.append(data.tokenize_images(bundle.vq, images[start : start + 64]))
    grids = np.concatenate(grids)
    image_records = [r for r in records if r.image is not None]
    with open(out, "w", encoding="utf-8") as fh:
        for rec, grid in zip(image_records, grids):
            fh.write(json.dumps({"image": rec.image, "tokens": grid.reshape(-1).tolist()}) + "\n")
    print(f"tokenized: {len(image_records)} images -> {out}")
    return 0


def _cmd_train_lm(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    vq_bundle = pipeline.load_bundle(args.vq)
    cfg = dataclasses.replace(cfg, vq=vq_bundle.run_cfg.vq)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, steps=args.steps))
    params = pipeline.pretrain_lm(cfg, args.data, vq_bundle.vq, log_every=args.log_every)
    pipeline.save_bundle(out, cfg, vq_bundle.vq, params, stage="lm")
    print(f"checkpoint: {out}")
    return 0


def _cmd_finetune_head(args) -> int:
    out = _require_out(args)
    bundle = pipeline.load_bundle(args.base, need_lm=True)
    cfg = bundle.run_cfg
    if args.config:
        cfg = dataclasses.replace(load_run_config(args.config), vq=cfg.vq, model=cfg.model)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, finetune=dataclasses.replace(cfg.finetune, seed=args.seed)
        )
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, steps=args.steps))
    layout = VocabLayout.from_vq_config(cfg.vq)
    counts = count_trainable(layout, cfg.model, cfg.finetune.train_sentinel_rows)
    print(f"trainable parameters: {counts.total:,}")
    tuned, report = pipeline.finetune_head(
        cfg, args.data, bundle.vq, bundle.lm_params, log_every=args.log_every
    )
    pipeline.save_bundle(out, cfg, bundle.vq, tuned, stage="finetuned")
    report_path = f"{out}.report.txt"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(f"checkpoint: {out}")
    print(f"report: {report_path}")
    print(f"final_loss: {report.final_loss:.6f}")
    print(f"max_frozen_drift: {report.max_drift}")
    return 0


def _cmd_generate(args) -> int:
    out = _require_out(args)
    bundle = pipeline.load_bundle(args.ckpt, need_lm=True)
    sampling = bundle.run_cfg.sampling
    if args.seed is not None:
        sampling = dataclasses.replace(sampling, seed=args.seed)
    if args.max_tokens is not None:
        sampling = dataclasses.replace(sampling, max_tokens=args.max_tokens)
    if args.max_images is not None:
        sampling = dataclasses.replace(sampling, max_images=args.max_images)
    if args.temperature is not None:
        sampling = dataclasses.replace(sampling, temperature=args.temperature)
    if args.image_temperature is not None:
        sampling = dataclasses.replace(sampling, image_temperature=args.image_temperature)
    result = pipeline.generate_to_dir(
        bundle, args.prompt, out, sampling, force_image=args.force_image
    )
    info = result["info"]
    print(f"report: {result['report']}")
    print(f"generated_tokens: {info.new_tokens}")
    print(f"images: {info.images}")
    return 0


def _cmd_eval(args) -> int:
    bundle = pipeline.load_bundle(args.ckpt)
    base = pipeline.load_bundle(args.base, need_lm=True) if args.base else None
    seed = args.seed if args.seed is not None else bundle.run_cfg.sampling.seed
    sampling = bundle.run_cfg.sampling
    if args.image_temperature is not None:
        sampling = dataclasses.replace(sampling, image_temperature=args.image_temperature)
    metrics = pipeline.evaluate(
        bundle, args.data, base_bundle=base, gen_prompts=args.gen_prompts, gen_seed=seed,
        sampling=sampling,
    )
    lines = [f"{key}: {value:.6f}" for key, value in sorted(metrics.items())]
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train-vq": _cmd_train_vq,
    "tokenize": _cmd_tokenize,
    "train-lm": _cmd_train_lm,
    "finetune-head": _cmd_finetune_head,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
}


def _emit_error(exc: LoomError) -> None:
    record = {"code": exc.code, "message": exc.message, "context": exc.context}
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliUsageError as exc:
        _emit_error(exc)
        return 2
    except LoomError as exc:
        _emit_error(exc)
        return 1
    except Exception as exc:  # single-line contract even for unexpected bugs
        print(
            json.dumps({"code": "internal", "message": repr(exc), "context": {}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
