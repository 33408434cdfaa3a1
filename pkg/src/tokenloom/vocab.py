"""Unified token space over text bytes, image codes, and sentinels.

Global id layout: text ids [0, V_text), image ids [V_text, V_text+K),
then BOS, EOS, BOI, EOI, PAD. Documents are ordered lists of text and image
segments; ``compose`` flattens them to ``BOS (text | BOI image^N EOI)* EOS``
and ``parse`` is its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

import numpy as np

from .config import NUM_SENTINELS, TEXT_VOCAB_SIZE, VqConfig
from .errors import GrammarError, ShapeError, TokenizeError, TokenRangeError

if TYPE_CHECKING:
    from .vq import VqTokenizer

SENTINEL_NAMES = ("BOS", "EOS", "BOI", "EOI", "PAD")


@dataclass(frozen=True)
class VocabLayout:
    """Partition of the global id space; all ranges are contiguous."""

    text_size: int
    image_size: int  # K
    grid_hw: tuple[int, int]

    def __post_init__(self):
        if self.text_size < 1 or self.image_size < 1:
            raise ShapeError("text and image vocab sizes must be positive")

    @classmethod
    def from_vq_config(cls, cfg: VqConfig, text_size: int = TEXT_VOCAB_SIZE) -> "VocabLayout":
        return cls(text_size=text_size, image_size=cfg.codebook_size, grid_hw=cfg.grid_hw)

    @property
    def block_len(self) -> int:
        """Tokens per image (N)."""
        return self.grid_hw[0] * self.grid_hw[1]

    @property
    def image_start(self) -> int:
        return self.text_size

    @property
    def image_end(self) -> int:
        return self.text_size + self.image_size

    @property
    def bos(self) -> int:
        return self.image_end

    @property
    def eos(self) -> int:
        return self.image_end + 1

    @property
    def boi(self) -> int:
        return self.image_end + 2

    @property
    def eoi(self) -> int:
        return self.image_end + 3

    @property
    def pad(self) -> int:
        return self.image_end + 4

    @property
    def total(self) -> int:
        return self.text_size + self.image_size + NUM_SENTINELS

    def is_text(self, tid: int) -> bool:
        return 0 <= tid < self.text_size

    def is_image(self, tid: int) -> bool:
        return self.image_start <= tid < self.image_end

    def is_sentinel(self, tid: int) -> bool:
        return self.image_end <= tid < self.total

    def classify(self, tid: int) -> str:
        if self.is_text(tid):
            return "text"
        if self.is_image(tid):
            return "image"
        if self.is_sentinel(tid):
            return "sentinel"
        raise TokenRangeError(f"id {tid} outside vocabulary [0, {self.total})")

    def to_dict(self) -> dict:
        return {
            "text_size": self.text_size,
            "image_size": self.image_size,
            "grid_hw": list(self.grid_hw),
            "block_len": self.block_len,
            "sentinels": {name: getattr(self, name.lower()) for name in SENTINEL_NAMES},
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VocabLayout":
        return cls(
            text_size=int(data["text_size"]),
            image_size=int(data["image_size"]),
            grid_hw=tuple(int(v) for v in data["grid_hw"]),
        )


def to_global(local_id: int, layout: VocabLayout) -> int:
    """Local image-token id -> global id."""
    if not 0 <= local_id < layout.image_size:
        raise TokenRangeError(f"local image id {local_id} outside [0, {layout.image_size})")
    return layout.image_start + local_id


def to_local(global_id: int, layout: VocabLayout) -> int:
    """Global id -> local image-token id; errors outside the image range."""
    if not layout.image_start <= global_id < layout.image_end:
        raise TokenRangeError(
            f"global id {global_id} outside image range "
            f"[{layout.image_start}, {layout.image_end})"
        )
    return global_id - layout.image_start


class ByteTokenizer:
    """Lossless byte-level text tokenizer (UTF-8), vocabulary size 256."""

    vocab_size = TEXT_VOCAB_SIZE

    def encode(self, text: str) -> np.ndarray:
        try:
            raw = text.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise TokenizeError(f"text is not UTF-8 encodable: {exc}") from exc
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def decode(self, ids: np.ndarray) -> str:
        arr = np.asarray(ids)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise TokenRangeError("byte token id outside [0, 256)")
        # model-generated byte streams may not be valid UTF-8
        return arr.astype(np.uint8).tobytes().decode("utf-8", errors="replace")


@dataclass
class TextSegment:
    text: str


@dataclass
class ImageSegment:
    tokens: np.ndarray | None = None  # (Hg, Wg) local ids
    image: np.ndarray | None = None  # (H, W, 3) float pixels

    def __post_init__(self):
        if self.tokens is None and self.image is None:
            raise ShapeError("ImageSegment needs tokens or pixels")


Segment = Union[TextSegment, ImageSegment]


@dataclass
class MultimodalDocument:
    segments: list[Segment] = field(default_factory=list)

    def text_segments(self) -> list[TextSegment]:
        return [s for s in self.segments if isinstance(s, TextSegment)]

    def image_segments(self) -> list[ImageSegment]:
        return [s for s in self.segments if isinstance(s, ImageSegment)]


def _segment_ids(
    seg: Segment,
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer,
    vq_tokenizer: "VqTokenizer | None",
) -> list[int]:
    if isinstance(seg, TextSegment):
        return text_tokenizer.encode(seg.text).tolist()
    grid = seg.tokens
    if grid is None:
        if vq_tokenizer is None:
            raise ShapeError("composing a pixel image segment requires a VQ tokenizer")
        grid = vq_tokenizer.tokenize(seg.image)
    grid = np.asarray(grid)
    if grid.size != layout.block_len:
        raise ShapeError(
            f"image segment has {grid.size} tokens, layout expects {layout.block_len}"
        )
    flat = grid.reshape(-1)
    if flat.min() < 0 or flat.max() >= layout.image_size:
        raise TokenRangeError("image segment contains out-of-range local ids")
    return [layout.boi] + [layout.image_start + int(t) for t in flat] + [layout.eoi]


def compose_prompt(
    doc: MultimodalDocument,
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer,
    vq_tokenizer: "VqTokenizer | None" = None,
) -> np.ndarray:
    """BOS + flattened segments, without the trailing EOS (for generation)."""
    ids: list[int] = [layout.bos]
    for seg in doc.segments:
        ids.extend(_segment_ids(seg, layout, text_tokenizer, vq_tokenizer))
    return np.asarray(ids, dtype=np.int64)


def compose(
    doc: MultimodalDocument,
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer,
    vq_tokenizer: "VqTokenizer | None" = None,
) -> np.ndarray:
    """Flatten a document to ``BOS (text | BOI image^N EOI)* EOS``."""
    ids = compose_prompt(doc, layout, text_tokenizer, vq_tokenizer)
    return np.concatenate([ids, np.asarray([layout.eos], dtype=np.int64)])


def parse(
    sequence: np.ndarray,
    layout: VocabLayout,
    text_tokenizer: ByteTokenizer | None = None,
) -> MultimodalDocument:
    """Inverse of :func:`compose`; raises :class:`GrammarError` at the first
    offending position for malformed sequences."""
    tok = text_tokenizer or ByteTokenizer()
    seq = [int(t) for t in np.asarray(sequence).reshape(-1)]
    if not seq:
        raise GrammarError("empty sequence (expected BOS)", position=0)
    if seq[0] != layout.bos:
        raise GrammarError(f"sequence must start with BOS, got id {seq[0]}", position=0)

    segments: list[Segment] = []
    text_run: list[int] = []
    image_run: list[int] | None = None  # local ids inside an open image block
    closed = False
    gh, gw = layout.grid_hw

    def flush_text():
        nonlocal text_run
        if text_run:
            segments.append(TextSegment(tok.decode(np.asarray(text_run))))
            text_run = []

    for pos in range(1, len(seq)):
        tid = seq[pos]
        if closed:
            raise GrammarError("token after EOS", position=pos)
        if tid >= layout.total or tid < 0:
            raise GrammarError(f"id {tid} outside vocabulary", position=pos)
        if image_run is not None:
            if layout.is_image(tid):
                if len(image_run) == layout.block_len:
                    raise GrammarError(
                        f"image block longer than {layout.block_len} tokens", position=pos
                    )
                image_run.append(tid - layout.image_start)
            elif tid == layout.eoi:
                if len(image_run) != layout.block_len:
                    raise GrammarError(
                        f"image block has {len(image_run)} tokens, expected {layout.block_len}",
                        position=pos,
                    )
                grid = np.asarray(image_run, dtype=np.int64).reshape(gh, gw)
                segments.append(ImageSegment(tokens=grid))
                image_run = None
            else:
                raise GrammarError("non-image token inside image block", position=pos)
        elif layout.is_text(tid):
            text_run.append(tid)
        elif tid == layout.boi:
            flush_text()
            image_run = []
        elif tid == layout.eos:
            flush_text()
            closed = True
        elif layout.is_image(tid):
            raise GrammarError("image token outside image block", position=pos)
        elif tid == layout.eoi:
            raise GrammarError("EOI without matching BOI", position=pos)
        elif tid == layout.bos:
            raise GrammarError("BOS repeated inside sequence", position=pos)
        else:  # PAD
            raise GrammarError("PAD token inside document", position=pos)

    if image_run is not None:
        raise GrammarError("unterminated image block at end of sequence", position=len(seq) - 1)
    if not closed:
        raise GrammarError("sequence does not end with EOS", position=len(seq) - 1)
    return MultimodalDocument(segments=segments)


def composed_length(doc: MultimodalDocument, text_tokenizer: ByteTokenizer, layout: VocabLayout) -> int:
    """Length of compose(doc): 2 + sum(text lens) + (N+2) * image count."""
    n_text = sum(len(text_tokenizer.encode(s.text)) for s in doc.text_segments())
    return 2 + n_text + (layout.block_len + 2) * len(doc.image_segments())
