"""Grammar-constrained sampling of interleaved image-text sequences.

A modality state machine (TEXT vs IMAGE with a position counter) masks the
logits so that every emitted sequence matches
``BOS (text | BOI image^N EOI)* EOS`` and never truncates an image block:
BOI is only allowed when the remaining budget fits a full block plus the
final EOS, and with one token left only EOS remains.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np

from . import model, vocab
from .config import ModelConfig, SamplingParams
from .errors import DecodeStuckError, GrammarError, PromptTooLongError, ShapeError
from .imageio import write_image
from .vocab import ByteTokenizer, ImageSegment, MultimodalDocument, TextSegment, VocabLayout
from .vq import VqTokenizer


class Mode(enum.Enum):
    TEXT = "text"
    IMAGE = "image"


@dataclass
class DecoderState:
    """Modality state plus budget counters for one generation session."""

    layout: VocabLayout
    max_new_tokens: int
    max_images: int
    context_limit: int
    tokens: list[int] = field(default_factory=list)
    mode: Mode = Mode.TEXT
    image_count: int = 0  # tokens emitted inside the open image block
    images_done: int = 0
    new_tokens: int = 0
    finished: bool = False

    @classmethod
    def from_prompt(
        cls,
        prompt_ids: np.ndarray,
        layout: VocabLayout,
        max_new_tokens: int,
        max_images: int,
        context_limit: int,
    ) -> "DecoderState":
        """Replay a prompt (BOS + well-formed prefix) through the state machine."""
        ids = [int(t) for t in np.asarray(prompt_ids).reshape(-1)]
        if not ids or ids[0] != layout.bos:
            raise GrammarError("prompt must start with BOS", position=0)
        if len(ids) >= context_limit:
            raise PromptTooLongError(
                f"prompt length {len(ids)} leaves no room in context {context_limit}"
            )
        state = cls(
            layout=layout,
            max_new_tokens=max_new_tokens,
            max_images=max_images,
            context_limit=context_limit,
            tokens=[ids[0]],
        )
        for pos, tid in enumerate(ids[1:], start=1):
            if state.finished:
                raise GrammarError("prompt continues after EOS", position=pos)
            state._transition(tid, pos)
            state.tokens.append(tid)
        return state

    def _transition(self, tid: int, pos: int) -> None:
        lay = self.layout
        if self.mode is Mode.IMAGE:
            if lay.is_image(tid):
                self.image_count += 1
                if self.image_count > lay.block_len:
                    raise GrammarError("image block overflow", position=pos)
            elif tid == lay.eoi and self.image_count == lay.block_len:
                self.mode = Mode.TEXT
                self.image_count = 0
            else:
                raise GrammarError("invalid token inside image block", position=pos)
        else:
            if lay.is_text(tid):
                pass
            elif tid == lay.boi:
                self.mode = Mode.IMAGE
                self.image_count = 0
            elif tid == lay.eos:
                self.finished = True
            else:
                raise GrammarError("invalid token in text mode", position=pos)

    def advance(self, tid: int) -> None:
        """Record one generated token."""
        self._transition(tid, len(self.tokens))
        if self.mode is Mode.TEXT and tid == self.layout.eoi:
            self.images_done += 1
        self.tokens.append(tid)
        self.new_tokens += 1

    @property
    def remaining(self) -> int:
        return min(self.max_new_tokens - self.new_tokens, self.context_limit - len(self.tokens))


def allowed_mask(state: DecoderState, layout: VocabLayout) -> np.ndarray:
    """Boolean vector over the vocabulary: which ids may be sampled next."""
    mask = np.zeros(layout.total, dtype=bool)
    if state.mode is Mode.IMAGE:
        if state.image_count < layout.block_len:
            mask[layout.image_start : layout.image_end] = True
        else:
            mask[layout.eoi] = True  # forced transition
        return mask
    remaining = state.remaining
    if remaining <= 1:
        mask[layout.eos] = True
        return mask
    mask[: layout.text_size] = True
    mask[layout.eos] = True
    # a full image block needs BOI + N + EOI, plus the final EOS
    if state.images_done < state.max_images and remaining >= layout.block_len + 3:
        mask[layout.boi] = True
    return mask


def sample_next(
    logits: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    temperature: float,
    top_k: int = 0,
    top_p: float = 1.0,
) -> int:
    """Sample one token id; forbidden ids have probability exactly zero.

    Temperature 0 is greedy (ties to the lowest id). top_k/top_p restrict
    the candidate set after masking; both 0/1 disable them.
    """
    allowed = np.flatnonzero(mask)
    if allowed.size == 0:
        raise DecodeStuckError("no tokens allowed in current decoder state")
    sub = logits[allowed].astype(np.float64)

    if temperature == 0.0:
        return int(allowed[np.argmax(sub)])

    sub = sub / temperature
    # stable order: descending logit, ties to lowest id
    order = np.lexsort((allowed, -sub))
    if top_k and top_k < order.size:
        order = order[:top_k]
    probs = np.exp(sub[order] - sub[order].max())
    probs /= probs.sum()
    if top_p < 1.0:
        csum = np.cumsum(probs)
        cut = int(np.searchsorted(csum, top_p, side="left")) + 1
        order = order[:cut]
        probs = probs[:cut]
        probs /= probs.sum()
    choice = rng.choice(order.size, p=probs)
    return int(allowed[order[choice]])


@dataclass
class GenerationInfo:
    token_ids: np.ndarray
    prompt_len: int
    new_tokens: int
    images: int

    @property
    def total_len(self) -> int:
        return int(self.token_ids.size)


def generate(
    prompt: MultimodalDocument,
    params: dict[str, np.ndarray],
    mcfg: ModelConfig,
    vq: VqTokenizer,
    layout: VocabLayout,
    sampling: SamplingParams,
    text_tokenizer: ByteTokenizer | None = None,
    force_image: bool = False,
) -> tuple[MultimodalDocument, GenerationInfo]:
    """Autoregressive generation under the interleaved grammar.

    Returns the parsed document for the full sequence (prompt + generation),
    with image blocks decoded to pixels by the VQ decoder.
    """
    tok = text_tokenizer or ByteTokenizer()
    prompt_ids = vocab.compose_prompt(prompt, layout, tok, vq)
    if force_image:
        prompt_ids = np.concatenate([prompt_ids, [layout.boi]])
    state = DecoderState.from_prompt(
        prompt_ids,
        layout,
        max_new_tokens=sampling.max_tokens,
        max_images=sampling.max_images,
        context_limit=mcfg.max_seq_len,
    )
    rng = np.random.default_rng(sampling.seed)

    while not state.finished and state.remaining > 0:
        ids = np.asarray(state.tokens, dtype=np.int64)[None, :]
        logits = model.forward(params, ids, mcfg)[0, -1]
        mask = allowed_mask(state, layout)
        temp, top_k, top_p = sampling.knobs(image_mode=state.mode is Mode.IMAGE)
        tid = sample_next(logits, mask, rng, temperature=temp, top_k=top_k, top_p=top_p)
        state.advance(tid)

    seq = np.asarray(state.tokens, dtype=np.int64)
    doc = vocab.parse(seq, layout, tok)
    for seg in doc.image_segments():
        seg.image = vq.decode(seg.tokens)
    info = GenerationInfo(
        token_ids=seq,
        prompt_len=int(prompt_ids.size),
        new_tokens=state.new_tokens,
        images=sum(1 for _ in doc.image_segments()),
    )
    return doc, info


def render(doc: MultimodalDocument, out_dir: str | os.PathLike, image_format: str = "ppm") -> dict:
    """Write images plus a markdown report interleaving text and image refs."""
    out_dir = os.fspath(out_dir)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    lines: list[str] = []
    image_paths: list[str] = []
    idx = 0
    for seg in doc.segments:
        if isinstance(seg, TextSegment):
            lines.append(seg.text)
        else:
            rel = f"images/img_{idx:03}.{image_format}"
            if seg.image is None:
                raise ShapeError(f"image segment {idx} has no decoded pixels")
            write_image(os.path.join(out_dir, rel), seg.image)
            lines.append(f"![image {idx}]({rel})")
            image_paths.append(rel)
            idx += 1
    report_path = os.path.join(out_dir, "report.md")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(lines) + "\n")
    return {"report": report_path, "images": image_paths}


def write_generation_manifest(
    out_dir: str | os.PathLike,
    prompt_text: str,
    sampling: SamplingParams,
    info: GenerationInfo,
) -> str:
    """Reproducibility record (key: value lines) next to the report."""
    path = os.path.join(os.fspath(out_dir), "generation.txt")
    lines = [
        f"prompt: {prompt_text!r}",
        f"seed: {sampling.seed}",
        f"temperature: {sampling.temperature}",
        f"top_k: {sampling.top_k}",
        f"top_p: {sampling.top_p}",
        f"image_temperature: {sampling.image_temperature}",
        f"image_top_k: {sampling.image_top_k}",
        f"image_top_p: {sampling.image_top_p}",
        f"max_tokens: {sampling.max_tokens}",
        f"max_images: {sampling.max_images}",
        f"prompt_tokens: {info.prompt_len}",
        f"generated_tokens: {info.new_tokens}",
        f"total_tokens: {info.total_len}",
        f"images: {info.images}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
