"""Token-segment layouts for every input variant, plus text prompt templates."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from typing import Sequence


class SegmentKind(str, enum.Enum):
    INSTRUCTION = "instruction"
    IMAGE = "image"
    IMAGE_QUESTION = "image_question"
    CONTEXT = "context"
    CONTEXT_QUESTION = "context_question"
    QUESTION = "question"
    GENERATED = "generated"


class Variant(str, enum.Enum):
    CLOSED_BOOK = "closedbook"
    VANILLA_RAG = "rag"
    SWAP_QC = "swap"
    DUAL_QUESTION_NO_INT = "dualq"
    MADRAG = "madrag"

    @classmethod
    def parse(cls, name: str | "Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "closedbook": cls.CLOSED_BOOK, "cb": cls.CLOSED_BOOK,
            "rag": cls.VANILLA_RAG, "vanillarag": cls.VANILLA_RAG,
            "swap": cls.SWAP_QC, "swapqc": cls.SWAP_QC,
            "dualq": cls.DUAL_QUESTION_NO_INT, "dualquestionnoint": cls.DUAL_QUESTION_NO_INT,
            "madrag": cls.MADRAG,
        }
        if key not in aliases:
            raise ValueError(f"unknown variant {name!r}")
        return aliases[key]

    @property
    def dual_question(self) -> bool:
        return self in (Variant.DUAL_QUESTION_NO_INT, Variant.MADRAG)


_ORDER = {
    Variant.CLOSED_BOOK: (SegmentKind.IMAGE, SegmentKind.QUESTION),
    Variant.VANILLA_RAG: (SegmentKind.IMAGE, SegmentKind.QUESTION, SegmentKind.CONTEXT),
    Variant.SWAP_QC: (SegmentKind.IMAGE, SegmentKind.CONTEXT, SegmentKind.QUESTION),
    Variant.DUAL_QUESTION_NO_INT: (SegmentKind.IMAGE, SegmentKind.IMAGE_QUESTION,
                                   SegmentKind.CONTEXT, SegmentKind.CONTEXT_QUESTION),
    Variant.MADRAG: (SegmentKind.IMAGE, SegmentKind.IMAGE_QUESTION,
                     SegmentKind.CONTEXT, SegmentKind.CONTEXT_QUESTION),
}

_QUESTION_KINDS = (SegmentKind.QUESTION, SegmentKind.IMAGE_QUESTION, SegmentKind.CONTEXT_QUESTION)


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def indices(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class SequenceLayout:
    """Ordered, contiguous segments covering ``[0, length)``.

    The instruction segment, when non-empty, sits at the front.
    Zero-length segments are kept so every variant exposes the same kinds.
    """

    variant: Variant
    segments: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        for seg in self.segments:
            if seg.start != pos or seg.length < 0:
                raise LayoutError(f"segments not contiguous at {seg}")
            pos = seg.stop

    @property
    def length(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def prompt_length(self) -> int:
        return self.length - self.span(SegmentKind.GENERATED).length

    def span(self, kind: SegmentKind) -> Segment:
        for seg in self.segments:
            if seg.kind is kind:
                return seg
        return Segment(kind, self.length, 0)

    def indices(self, kind: SegmentKind) -> range:
        return self.span(kind).indices()

    @property
    def question_length(self) -> int:
        return sum(self.span(k).length for k in (SegmentKind.QUESTION, SegmentKind.IMAGE_QUESTION))

    def kind_at(self, pos: int) -> SegmentKind:
        for seg in self.segments:
            if seg.start <= pos < seg.stop:
                return seg.kind
        raise IndexError(pos)

    def with_generated(self, n: int) -> "SequenceLayout":
        """Copy with the generated segment grown to ``n`` tokens."""
        base = tuple(s for s in self.segments if s.kind is not SegmentKind.GENERATED)
        end = base[-1].stop if base else 0
        return SequenceLayout(self.variant, base + (Segment(SegmentKind.GENERATED, end, n),))

    def describe(self) -> dict[str, tuple[int, int]]:
        return {s.kind.value: (s.start, s.stop) for s in self.segments if s.length}


def build_layout(variant, V: int, T: int, Cn: int = 0, S: int = 0,
                 max_seq: int | None = None) -> SequenceLayout:
    variant = Variant.parse(variant)
    if V < 0 or Cn < 0 or S < 0:
        raise LayoutError("segment lengths must be non-negative")
    if T < 1:
        raise LayoutError("question needs at least one token")
    if variant is Variant.CLOSED_BOOK and Cn > 0:
        raise LayoutError("closed-book layout cannot carry context tokens")
    sizes = {SegmentKind.IMAGE: V, SegmentKind.CONTEXT: Cn,
             SegmentKind.QUESTION: T, SegmentKind.IMAGE_QUESTION: T,
             SegmentKind.CONTEXT_QUESTION: T}
    segments = [Segment(SegmentKind.INSTRUCTION, 0, S)]
    pos = S
    for kind in _ORDER[variant]:
        segments.append(Segment(kind, pos, sizes[kind]))
        pos += sizes[kind]
    segments.append(Segment(SegmentKind.GENERATED, pos, 0))
    layout = SequenceLayout(variant, tuple(segments))
    if max_seq is not None and layout.length > max_seq:
        raise LayoutError(f"layout length {layout.length} exceeds max_seq {max_seq}")
    return layout


IMAGE_SLOT = -1  # placeholder id at image positions of a token stream


def assemble_tokens(layout: SequenceLayout, question: Sequence[int],
                    context: Sequence[int] = (), instruction: Sequence[int] = (),
                    generated: Sequence[int] = ()) -> list[int]:
    """Full-length id stream for ``layout``; image positions hold IMAGE_SLOT."""
    question = list(question)
    fill = {
        SegmentKind.INSTRUCTION: list(instruction),
        SegmentKind.IMAGE: [IMAGE_SLOT] * layout.span(SegmentKind.IMAGE).length,
        SegmentKind.QUESTION: question,
        SegmentKind.IMAGE_QUESTION: question,
        SegmentKind.CONTEXT_QUESTION: question,
        SegmentKind.CONTEXT: list(context),
        SegmentKind.GENERATED: list(generated),
    }
    stream: list[int] = []
    for seg in layout.segments:
        toks = fill[seg.kind]
        if len(toks) != seg.length:
            raise LayoutError(f"{seg.kind.value} expects {seg.length} tokens, got {len(toks)}")
        stream.extend(toks)
    return stream


def duplicate_question(layout: SequenceLayout, question_tokens: Sequence[int],
                       context: Sequence[int] = ()) -> list[int]:
    """Token stream for a dual-question layout with the question at both slots."""
    if not layout.variant.dual_question:
        raise LayoutError(f"{layout.variant.value} is not a dual-question layout")
    return assemble_tokens(layout, question_tokens, context)


def question_slots(layout: SequenceLayout, stream: Sequence[int]) -> tuple[list[int], list[int]]:
    qi = [stream[i] for i in layout.indices(SegmentKind.IMAGE_QUESTION)]
    qc = [stream[i] for i in layout.indices(SegmentKind.CONTEXT_QUESTION)]
    return qi, qc


# -- text prompts ---------------------------------------------------------------

DATASET_STYLES = ("okvqa", "evqa_infoseek")
PROMPT_MODES = ("closed_book", "rag")


def load_template(dataset_style: str, mode: str) -> str:
    if dataset_style not in DATASET_STYLES:
        raise ValueError(f"unknown dataset style {dataset_style!r}")
    if mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    name = f"{dataset_style}_{mode}.txt"
    return resources.files("attnmix.templates").joinpath(name).read_text(encoding="utf-8")


def render_prompt(dataset_style: str, mode: str, question: str, context: str | None = None) -> str:
    if not question:
        raise ValueError("question must be non-empty")
    if mode == "rag" and not context:
        raise ValueError("rag prompts need a non-empty context")
    if mode == "closed_book" and context:
        raise ValueError("closed-book prompts take no context")
    text = load_template(dataset_style, mode)
    # str.replace, not format(): questions may contain braces
    text = text.replace("{question}", question)
    if mode == "rag":
        text = text.replace("{context}", context)
    return text
