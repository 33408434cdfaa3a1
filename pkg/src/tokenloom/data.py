"""Synthetic corpus, dataset manifests, and batch construction.

The corpus is one colored shape (circle/square/triangle, 6 colors) on a
plain dark background, captioned "a {color} {shape}". A programmatic label
checker inverts the generator (foreground color direction + shape profile
statistics) and is used as the generation-quality metric.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import vocab as vocab_mod
from .errors import ManifestError, ShapeError
from .imageio import read_image, write_ppm
from .vocab import ByteTokenizer, ImageSegment, MultimodalDocument, TextSegment, VocabLayout
from .vq import VqTokenizer, encoder_forward, nearest_codes

BACKGROUND = np.asarray([0.12, 0.12, 0.12], dtype=np.float32)

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.10, 0.85),
    "cyan": (0.10, 0.85, 0.85),
}

SHAPES = ("circle", "square", "triangle")


def caption_for(color: str, shape: str) -> str:
    return f"a {color} {shape}"


def all_captions() -> list[str]:
    return [caption_for(c, s) for s in SHAPES for c in COLORS]


def parse_caption(caption: str) -> tuple[str, str] | None:
    parts = caption.strip().split()
    if len(parts) == 3 and parts[0] == "a" and parts[1] in COLORS and parts[2] in SHAPES:
        return parts[1], parts[2]
    return None


def render_shape(
    shape: str,
    color: tuple[float, float, float],
    hw: tuple[int, int] = (32, 32),
    center: tuple[int, int] | None = None,
    half_size: int = 7,
) -> np.ndarray:
    h, w = hw
    cy, cx = center if center is not None else (h // 2, w // 2)
    ys, xs = np.mgrid[0:h, 0:w]
    if shape == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= half_size**2
    elif shape == "square":
        mask = (np.abs(xs - cx) <= half_size) & (np.abs(ys - cy) <= half_size)
    elif shape == "triangle":
        rel = ys - (cy - half_size)
        mask = (rel >= 0) & (ys <= cy + half_size) & (np.abs(xs - cx) <= rel / 2.0)
    else:
        raise ShapeError(f"unknown shape {shape!r}")
    img = np.broadcast_to(BACKGROUND, (h, w, 3)).copy()
    img[mask] = np.asarray(color, dtype=np.float32)
    return img.astype(np.float32)


def classify_image(image: np.ndarray, fg_threshold: float = 0.22) -> tuple[str, str] | None:
    """Recover (color, shape) from an image; None if no clear foreground.

    Color: cosine match of the mean foreground offset from the background
    against the reference color offsets. Shape: triangles have row widths
    growing linearly top to bottom; circles and squares are separated by
    corner occupancy and bounding-box fill. The foreground threshold adapts
    to the image contrast so VQ-blurred edges do not smear the mask;
    feature cuts are calibrated on VQ reconstructions of the corpus.
    """
    dist = np.linalg.norm(image.astype(np.float32) - BACKGROUND, axis=-1)
    thr = max(fg_threshold, 0.5 * float(dist.max()))
    fg = dist > thr
    if int(fg.sum()) < 12:
        return None

    offset = image[fg].mean(axis=0) - BACKGROUND
    norm = float(np.linalg.norm(offset))
    if norm < 1e-6:
        return None
    best_color, best_sim = None, -2.0
    for name, ref in COLORS.items():
        ref_off = np.asarray(ref, dtype=np.float32) - BACKGROUND
        sim = float(offset @ ref_off) / (norm * float(np.linalg.norm(ref_off)))
        if sim > best_sim:
            best_color, best_sim = name, sim

    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    sub = fg[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    box_h, box_w = sub.shape
    fill = float(sub.sum()) / float(box_h * box_w)
    widths = sub.sum(axis=1).astype(np.float64)
    if widths.size >= 3 and widths.std() > 1e-9:
        corr = float(np.corrcoef(np.arange(widths.size, dtype=np.float64), widths)[0, 1])
    else:
        corr = 0.0
    qh, qw = max(1, box_h // 4), max(1, box_w // 4)
    corners = (
        float(sub[:qh, :qw].mean())
        + float(sub[:qh, -qw:].mean())
        + float(sub[-qh:, :qw].mean())
        + float(sub[-qh:, -qw:].mean())
    ) / 4.0

    if corr >= 0.6:
        shape = "triangle"
    elif corners >= 0.55 or fill >= 0.93:
        shape = "square"
    else:
        shape = "circle"
    return best_color, shape


@dataclass(frozen=True)
class Record:
    caption: str | None = None
    image: str | None = None
    order: tuple[str, ...] = ("text", "image")

    def __post_init__(self):
        if self.caption is None and self.image is None:
            raise ManifestError("record needs a caption or an image", line=0)


def synth_corpus(
    count: int,
    seed: int,
    out_dir: str | os.PathLike,
    hw: tuple[int, int] = (32, 32),
) -> str:
    """Render ``count`` captioned shape images; returns the manifest path."""
    if count < 1:
        raise ManifestError("corpus count must be >= 1", line=0)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    color_names = list(COLORS)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    h, w = hw
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for i in range(count):
            color = color_names[int(rng.integers(len(color_names)))]
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            cy = h // 2 + int(rng.integers(-3, 4))
            cx = w // 2 + int(rng.integers(-3, 4))
            half = int(rng.integers(6, 10))
            img = render_shape(shape, COLORS[color], hw, center=(cy, cx), half_size=half)
            name = f"img_{i:05}.ppm"
            write_ppm(os.path.join(out_dir, name), img)
            rec = {"caption": caption_for(color, shape), "image": name, "order": ["text", "image"]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(path: str | os.PathLike) -> list[Record]:
    records: list[Record] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}", line=0) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed manifest JSON: {exc}", line=lineno) from exc
            if not isinstance(raw, dict):
                raise ManifestError("manifest record must be a JSON object", line=lineno)
            known = {"caption", "image", "order"}
            unknown = set(raw) - known
            if unknown:
                raise ManifestError(f"unknown record fields {sorted(unknown)}", line=lineno)
            try:
                records.append(
                    Record(
                        caption=raw.get("caption"),
                        image=raw.get("image"),
                        order=tuple(raw.get("order", ("text", "image"))),
                    )
                )
            except ManifestError as exc:
                raise ManifestError(exc.message, line=lineno) from exc
    return records


def record_to_document(record: Record, base_dir: str) -> MultimodalDocument:
    segments: list = []
    for kind in record.order:
        if kind == "text" and record.caption is not None:
            segments.append(TextSegment(record.caption))
        elif kind == "image" and record.image is not None:
            segments.append(ImageSegment(image=read_image(os.path.join(base_dir, record.image))))
    return MultimodalDocument(segments=segments)


def tokenize_images(vq: VqTokenizer, images: np.ndarray) -> np.ndarray:
    """Batch encode+quantize: (B, H, W, 3) -> (B, Hg, Wg) local ids."""
    z, _ = encoder_forward(vq.params, images.astype(np.float32, copy=False), vq.config)
    b, gh, gw, d = z.shape
    ids = nearest_codes(z.reshape(-1, d), vq.codebook.entries)
    return ids.reshape(b, gh, gw)


def encode_documents(
    docs: list[MultimodalDocument],
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer,
    vq: VqTokenizer,
    tokenize_chunk: int = 64,
) -> list[np.ndarray]:
    """Compose every document to a flat global-id sequence (images in chunks)."""
    pending: list[tuple[int, int]] = []  # (doc index, segment index)
    images: list[np.ndarray] = []
    for di, doc in enumerate(docs):
        for si, seg in enumerate(doc.segments):
            if isinstance(seg, ImageSegment) and seg.tokens is None:
                pending.append((di, si))
                images.append(seg.image)
    for start in range(0, len(images), tokenize_chunk):
        chunk = np.stack(images[start : start + tokenize_chunk])
        grids = tokenize_images(vq, chunk)
        for offset, (di, si) in enumerate(pending[start : start + tokenize_chunk]):
            docs[di].segments[si].tokens = grids[offset]
    return [vocab_mod.compose(doc, layout, text_tokenizer) for doc in docs]


@dataclass
class Batch:
    """Padded token batch with target-position loss mask and weights.

    ``loss_mask[b, t]`` is True when predicting token t (from its prefix)
    contributes to the loss; position 0 is never a target. ``loss_weights``
    refines the mask with per-position weights (None means 1.0 on the mask).
    """

    tokens: np.ndarray
    loss_mask: np.ndarray
    loss_weights: np.ndarray | None = None

    def weights(self) -> np.ndarray:
        if self.loss_weights is not None:
            return self.loss_weights
        return self.loss_mask.astype(np.float32)


def target_weights(
    tokens: np.ndarray,
    layout: VocabLayout,
    mode: str,
    image_loss_weight: float = 1.0,
) -> np.ndarray:
    """Per-position loss weights for a padded (B, T) token batch.

    pretrain: every real target, image tokens scaled by image_loss_weight.
    finetune: image tokens and BOI/EOI only. image-only: image tokens only.
    """
    is_img = (tokens >= layout.image_start) & (tokens < layout.image_end)
    is_boundary = (tokens == layout.boi) | (tokens == layout.eoi)
    valid = tokens != layout.pad
    valid[:, 0] = False
    if mode == "pretrain":
        w = valid.astype(np.float32)
        w[is_img & valid] = np.float32(image_loss_weight)
    elif mode == "finetune":
        w = ((is_img | is_boundary) & valid).astype(np.float32)
    elif mode == "image-only":
        w = (is_img & valid).astype(np.float32)
    else:
        raise ShapeError(f"unknown loss mode {mode!r}")
    return w


def make_batches(
    sequences: list[np.ndarray],
    layout: VocabLayout,
    seq_len: int,
    batch_size: int,
    seed: int,
    mode: str = "pretrain",
    image_loss_weight: float = 1.0,
) -> list[Batch]:
    """Pad, weight, and group sequences; deterministic shuffle per seed."""
    for i, seq in enumerate(sequences):
        if seq.size > seq_len:
            raise ShapeError(
                f"sequence {i} has {seq.size} tokens, exceeding seq_len {seq_len}"
            )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sequences))
    batches: list[Batch] = []
    for start in range(0, len(sequences), batch_size):
        idx = order[start : start + batch_size]
        toks = np.full((len(idx), seq_len), layout.pad, dtype=np.int64)
        for row, j in enumerate(idx):
            toks[row, : sequences[j].size] = sequences[j]
        w = target_weights(toks, layout, mode, image_loss_weight)
        batches.append(Batch(tokens=toks, loss_mask=w > 0, loss_weights=w))
    return batches


def ingest(
    manifest_path: str | os.PathLike,
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer,
    vq: VqTokenizer,
    seq_len: int,
    batch_size: int,
    seed: int,
    mode: str = "pretrain",
    image_loss_weight: float = 1.0,
) -> list[Batch]:
    """Manifest -> composed documents -> padded, shuffled token batches."""
    base_dir = os.path.dirname(os.fspath(manifest_path))
    records = read_manifest(manifest_path)
    docs = []
    for lineno, rec in enumerate(records, start=1):
        try:
            docs.append(record_to_document(rec, base_dir))
        except FileNotFoundError as exc:
            raise ManifestError(f"image file missing: {rec.image}", line=lineno) from exc
        except ShapeError as exc:
            raise ManifestError(f"bad image for record: {exc}", line=lineno) from exc
    sequences = encode_documents(docs, layout, text_tokenizer, vq)
    return make_batches(sequences, layout, seq_len, batch_size, seed, mode, image_loss_weight)


def load_corpus_images(manifest_path: str | os.PathLike) -> tuple[list[Record], np.ndarray]:
    """All image pixels referenced by a manifest, stacked (B, H, W, 3)."""
    base_dir = os.path.dirname(os.fspath(manifest_path))
    records = read_manifest(manifest_path)
    images = []
    for lineno, rec in enumerate(records, start=1):
        if rec.image is None:
            continue
        try:
            images.append(read_image(os.path.join(base_dir, rec.image)))
        except FileNotFoundError as exc:
            raise ManifestError(f"image file missing: {rec.image}", line=lineno) from exc
    if not images:
        raise ManifestError("manifest references no images", line=0)
    return records, np.stack(images)
