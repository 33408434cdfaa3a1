"""End-to-end pipeline stages: corpus -> VQ -> LM pre-train -> selective
head fine-tune -> constrained generation -> evaluation.

Pre-training down-weights image-token loss so the base model's image
generation stays latent; the head fine-tune then trains only the image-token
rows of the output head at full weight, which is what unlocks conditional
image generation in the toy recipe.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint, data, decoding, finetune, model, nn, vq as vq_mod
from .config import RunConfig, SamplingParams, run_config_from_dict, run_config_to_dict
from .errors import ConfigError
from .vocab import ByteTokenizer, MultimodalDocument, TextSegment, VocabLayout
from .vq import VqTokenizer, decoder_forward, psnr


@dataclass
class Bundle:
    """A loaded checkpoint: configs plus tokenizer and (optionally) LM params."""

    run_cfg: RunConfig
    layout: VocabLayout
    vq: VqTokenizer
    lm_params: dict[str, np.ndarray] | None
    stage: str


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every stage seed with one pipeline seed."""
    return dataclasses.replace(
        cfg,
        seed=seed,
        vq=dataclasses.replace(cfg.vq, seed=seed),
        model=dataclasses.replace(cfg.model, seed=seed),
        sampling=dataclasses.replace(cfg.sampling, seed=seed),
        pretrain=dataclasses.replace(cfg.pretrain, seed=seed),
        finetune=dataclasses.replace(cfg.finetune, seed=seed),
    )


def save_bundle(
    path: str | os.PathLike,
    run_cfg: RunConfig,
    vq: VqTokenizer,
    lm_params: dict[str, np.ndarray] | None,
    stage: str,
) -> None:
    layout = VocabLayout.from_vq_config(run_cfg.vq)
    header = {
        "run_config": run_config_to_dict(run_cfg),
        "vocab": layout.to_dict(),
        "stage": stage,
    }
    tensors = vq.state_tensors()
    if lm_params is not None:
        tensors.update(lm_params)
    checkpoint.save(path, header, tensors)


def load_bundle(path: str | os.PathLike, need_lm: bool = False) -> Bundle:
    header, tensors = checkpoint.load(path)
    if "run_config" not in header:
        raise ConfigError(f"checkpoint {path} has no run_config header")
    run_cfg = run_config_from_dict(header["run_config"])
    layout = VocabLayout.from_vq_config(run_cfg.vq)
    checkpoint.require_sections(tensors, "vq.encoder.", str(path))
    checkpoint.require_section(tensors, "vq.codebook", str(path))
    vq = VqTokenizer.from_tensors(run_cfg.vq, tensors)
    lm_params = {k: v for k, v in tensors.items() if k.startswith("lm.")}
    if need_lm and not lm_params:
        checkpoint.require_sections(tensors, "lm.", str(path))
    return Bundle(
        run_cfg=run_cfg,
        layout=layout,
        vq=vq,
        lm_params=lm_params or None,
        stage=header.get("stage", "unknown"),
    )


def train_vq(
    run_cfg: RunConfig,
    manifest_path: str,
    steps: int | None = None,
    batch_size: int | None = None,
    log_every: int = 0,
) -> VqTokenizer:
    """Train the image tokenizer on all images referenced by the manifest."""
    steps = steps if steps is not None else run_cfg.vq_steps
    batch_size = batch_size if batch_size is not None else run_cfg.vq_batch_size
    _, images = data.load_corpus_images(manifest_path)
    tok = VqTokenizer(run_cfg.vq)
    rng = nn.rng_for(run_cfg.vq.seed + 1)  # batch sampling stream, separate from init
    for step in range(steps):
        idx = rng.integers(0, images.shape[0], size=min(batch_size, images.shape[0]))
        loss = tok.train_step(images[idx])
        if log_every and (step + 1) % log_every == 0:
            print(
                f"train-vq step {step + 1}/{steps} recon {loss.reconstruction:.5f} "
                f"commit {loss.commitment:.5f} usage {loss.code_usage:.2f}"
            )
    return tok


def _batch_stream(sequences, layout, seq_len, batch_size, seed, mode, image_loss_weight):
    epoch = 0
    while True:
        for batch in data.make_batches(
            sequences, layout, seq_len, batch_size, seed + epoch, mode, image_loss_weight
        ):
            yield batch
        epoch += 1


def pretrain_lm(
    run_cfg: RunConfig,
    manifest_path: str,
    vq: VqTokenizer,
    log_every: int = 0,
) -> dict[str, np.ndarray]:
    """Pre-train the LM on interleaved caption+image sequences."""
    layout = VocabLayout.from_vq_config(run_cfg.vq)
    tok = ByteTokenizer()
    records = data.read_manifest(manifest_path)
    base_dir = os.path.dirname(os.fspath(manifest_path))
    docs = [data.record_to_document(r, base_dir) for r in records]
    sequences = data.encode_documents(docs, layout, tok, vq)

    pcfg = run_cfg.pretrain
    mcfg = run_cfg.model
    params = model.init_params(mcfg)
    opt = nn.SgdMomentum(momentum=pcfg.momentum)
    frozen_rows = None
    if pcfg.freeze_image_head_rows:
        frozen_rows = np.zeros(layout.total, dtype=bool)
        frozen_rows[layout.image_start : layout.image_end] = True
    stream = _batch_stream(
        sequences, layout, mcfg.max_seq_len, pcfg.batch_size, pcfg.seed, "pretrain",
        pcfg.image_loss_weight,
    )
    for step in range(pcfg.steps):
        batch = next(stream)
        loss = model.train_step(
            params, batch.tokens, batch.weights(), opt, mcfg, pcfg.learning_rate,
            grad_clip=pcfg.grad_clip, step_index=step, frozen_head_rows=frozen_rows,
        )
        if log_every and (step + 1) % log_every == 0:
            print(f"train-lm step {step + 1}/{pcfg.steps} loss {loss:.4f}")
    return params


def finetune_head(
    run_cfg: RunConfig,
    manifest_path: str,
    vq: VqTokenizer,
    params: dict[str, np.ndarray],
    log_every: int = 0,
) -> tuple[dict[str, np.ndarray], finetune.FinetuneReport]:
    """Selective head fine-tune on the image-bearing documents; params are
    copied, the base stays untouched."""
    layout = VocabLayout.from_vq_config(run_cfg.vq)
    tok = ByteTokenizer()
    records = data.read_manifest(manifest_path)
    base_dir = os.path.dirname(os.fspath(manifest_path))
    docs = [data.record_to_document(r, base_dir) for r in records]
    sequences = data.encode_documents(docs, layout, tok, vq)

    ftcfg = run_cfg.finetune
    mcfg = run_cfg.model
    tuned = {k: v.copy() for k, v in params.items()}
    if sequences and ftcfg.steps:
        per_epoch = data.make_batches(
            sequences, layout, mcfg.max_seq_len, ftcfg.batch_size, ftcfg.seed, "finetune"
        )
        epochs = -(-ftcfg.steps // len(per_epoch))
        batches = []
        for e in range(epochs):
            batches.extend(
                data.make_batches(
                    sequences, layout, mcfg.max_seq_len, ftcfg.batch_size, ftcfg.seed + e,
                    "finetune",
                )
            )
    else:
        batches = []
    report = finetune.finetune_run(tuned, batches, layout, mcfg, ftcfg, log_every=log_every)
    return tuned, report


def eval_image_ce(
    params: dict[str, np.ndarray],
    mcfg,
    batches: list[data.Batch],
) -> float:
    """Cross-entropy over image-token targets, averaged across all batches."""
    total_nll = 0.0
    total_n = 0
    for batch in batches:
        inputs = batch.tokens[:, :-1]
        targets = batch.tokens[:, 1:]
        mask = batch.loss_mask[:, 1:]
        n = int(mask.sum())
        if n == 0:
            continue
        logits = model.forward(params, inputs, mcfg)
        total_nll += model.loss(logits, targets, mask) * n
        total_n += n
    if total_n == 0:
        raise ConfigError("no image-token targets found for CE evaluation")
    return total_nll / total_n


def eval_reconstruction_psnr(vq: VqTokenizer, images: np.ndarray, chunk: int = 64) -> float:
    """Mean PSNR of encode->quantize->decode over a stack of images."""
    values = []
    for start in range(0, images.shape[0], chunk):
        block = images[start : start + chunk].astype(np.float32)
        ids = data.tokenize_images(vq, block)
        zq = vq.codebook.entries[ids]
        recon, _ = decoder_forward(vq.params, zq, vq.config)
        recon = np.clip(recon, 0.0, 1.0)
        for a, b in zip(block, recon):
            values.append(psnr(a, b))
    return float(np.mean(values))


def eval_label_agreement(
    bundle_params: dict[str, np.ndarray],
    mcfg,
    vq: VqTokenizer,
    layout: VocabLayout,
    sampling: SamplingParams,
    n_prompts: int = 50,
    seed: int = 0,
) -> tuple[float, list[tuple[str, str | None]]]:
    """Generate one forced image per caption prompt; score with the label
    checker. Prompts cycle the full {color} x {shape} caption set."""
    captions = data.all_captions()
    results: list[tuple[str, str | None]] = []
    hits = 0
    for i in range(n_prompts):
        caption = captions[i % len(captions)]
        params_i = dataclasses.replace(
            sampling,
            seed=seed + i,
            max_tokens=layout.block_len + 2,
            max_images=1,
        )
        doc = MultimodalDocument([TextSegment(caption)])
        out_doc, _ = decoding.generate(
            doc, bundle_params, mcfg, vq, layout, params_i, force_image=True
        )
        images = out_doc.image_segments()
        label = None
        if images:
            pred = data.classify_image(images[0].image)
            if pred is not None:
                label = data.caption_for(*pred)
        results.append((caption, label))
        if label == caption:
            hits += 1
    return hits / max(n_prompts, 1), results


def evaluate(
    bundle: Bundle,
    manifest_path: str,
    base_bundle: Bundle | None = None,
    gen_prompts: int = 0,
    gen_seed: int = 0,
    sampling: SamplingParams | None = None,
) -> dict[str, float]:
    """Reconstruction, image-token CE (optionally vs a base model), and
    generation label agreement."""
    metrics: dict[str, float] = {}
    _, images = data.load_corpus_images(manifest_path)
    metrics["recon_psnr_db"] = eval_reconstruction_psnr(bundle.vq, images)

    if bundle.lm_params is not None:
        tok = ByteTokenizer()
        records = data.read_manifest(manifest_path)
        base_dir = os.path.dirname(os.fspath(manifest_path))
        docs = [data.record_to_document(r, base_dir) for r in records]
        sequences = data.encode_documents(docs, bundle.layout, tok, bundle.vq)
        batches = data.make_batches(
            sequences, bundle.layout, bundle.run_cfg.model.max_seq_len, 32, 0, "image-only"
        )
        metrics["image_token_ce"] = eval_image_ce(bundle.lm_params, bundle.run_cfg.model, batches)
        if base_bundle is not None and base_bundle.lm_params is not None:
            base_ce = eval_image_ce(base_bundle.lm_params, base_bundle.run_cfg.model, batches)
            metrics["image_token_ce_base"] = base_ce
            metrics["image_ce_relative_reduction"] = (base_ce - metrics["image_token_ce"]) / base_ce
        if gen_prompts:
            agreement, _ = eval_label_agreement(
                bundle.lm_params,
                bundle.run_cfg.model,
                bundle.vq,
                bundle.layout,
                sampling if sampling is not None else bundle.run_cfg.sampling,
                n_prompts=gen_prompts,
                seed=gen_seed,
            )
            metrics["label_agreement"] = agreement
    return metrics


def generate_to_dir(
    bundle: Bundle,
    prompt_text: str,
    out_dir: str,
    sampling: SamplingParams,
    force_image: bool = False,
) -> dict:
    if bundle.lm_params is None:
        raise ConfigError("checkpoint has no language-model sections; train-lm first")
    doc = MultimodalDocument([TextSegment(prompt_text)] if prompt_text else [])
    out_doc, info = decoding.generate(
        doc, bundle.lm_params, bundle.run_cfg.model, bundle.vq, bundle.layout,
        sampling, force_image=force_image,
    )
    os.makedirs(out_dir, exist_ok=True)
    paths = decoding.render(out_doc, out_dir)
    decoding.write_generation_manifest(out_dir, prompt_text, sampling, info)
    return {"document": out_doc, "info": info, **paths}
