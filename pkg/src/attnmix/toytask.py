"""Synthetic grid-lookup task standing in for knowledge-based VQA.

Each "image" is a grid of cells; every cell carries a one-hot symbol plus
one-hot row/column channels. The question names a cell address and the
answer is the symbol stored there. Retrieved context is a list of chunks,
each a token triple (row, col, symbol); relevant chunks restate the true
answer, distractors assert some other symbol.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .instrumentation import AttentionStats, compute_ratios
from .intervention import MixConfig, MixHook
from .layout import SegmentKind, SequenceLayout, Variant, assemble_tokens, build_layout
from .transformer import ModelConfig, ModelWeights, decode

EOS = 0
QMARK = 1
SEP = 2
_FIRST_SYMBOL = 3


@dataclass(frozen=True)
class ToyVocab:
    n_symbols: int = 8
    grid_rows: int = 4
    grid_cols: int = 4

    def symbol(self, s: int) -> int:
        return _FIRST_SYMBOL + s

    def row(self, r: int) -> int:
        return _FIRST_SYMBOL + self.n_symbols + r

    def col(self, c: int) -> int:
        return _FIRST_SYMBOL + self.n_symbols + self.grid_rows + c

    @property
    def size(self) -> int:
        return _FIRST_SYMBOL + self.n_symbols + self.grid_rows + self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.n_symbols + self.grid_rows + self.grid_cols

    @property
    def n_cells(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class ToySample:
    sample_id: int
    grid: np.ndarray                 # rows×cols symbol indices
    target: tuple[int, int]
    question_tokens: list[int]
    answer_token: int
    context_tokens: list[int] = field(default_factory=list)
    chunk_relevant: list[bool] = field(default_factory=list)
    n_symbols: int = 8

    @property
    def vocab(self) -> ToyVocab:
        return ToyVocab(self.n_symbols, *self.grid.shape)

    @property
    def image_features(self) -> np.ndarray:
        return image_features(self.grid, self.n_symbols)

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "grid": self.grid.tolist(),
                "target": list(self.target), "question_tokens": self.question_tokens,
                "answer_token": self.answer_token, "context_tokens": self.context_tokens,
                "chunk_relevant": self.chunk_relevant, "n_symbols": self.n_symbols}

    @classmethod
    def from_json(cls, d: dict) -> "ToySample":
        return cls(d["sample_id"], np.asarray(d["grid"], dtype=np.int64), tuple(d["target"]),
                   list(d["question_tokens"]), int(d["answer_token"]), list(d["context_tokens"]),
                   [bool(b) for b in d["chunk_relevant"]], int(d["n_symbols"]))


def image_features(grid: np.ndarray, n_symbols: int) -> np.ndarray:
    rows, cols = grid.shape
    feats = np.zeros((rows * cols, n_symbols + rows + cols))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            feats[i, grid[r, c]] = 1.0
            feats[i, n_symbols + r] = 1.0
            feats[i, n_symbols + rows + c] = 1.0
    return feats


def lookup_answer(features: np.ndarray, question_tokens: Sequence[int], vocab: ToyVocab) -> int:
    """Brute-force closed-book answer read straight off the image features."""
    r = question_tokens[0] - vocab.row(0)
    c = question_tokens[1] - vocab.col(0)
    for f in features:
        if f[vocab.n_symbols + r] == 1.0 and f[vocab.n_symbols + vocab.grid_rows + c] == 1.0:
            return vocab.symbol(int(np.argmax(f[:vocab.n_symbols])))
    raise LookupError("addressed cell not present")


def generate_dataset(seed: int, n_samples: int, grid_rows: int = 4, grid_cols: int = 4,
                     n_symbols: int = 8, chunks_per_sample: int = 0,
                     distractor_fraction: float = 0.0, start_id: int = 0) -> list[ToySample]:
    if n_symbols < 2:
        raise ValueError("need at least two symbols")
    if grid_rows < 1 or grid_cols < 1 or n_samples < 0 or chunks_per_sample < 0:
        raise ValueError("inconsistent dataset sizes")
    if not 0.0 <= distractor_fraction <= 1.0:
        raise ValueError("distractor_fraction must be in [0, 1]")
    vocab = ToyVocab(n_symbols, grid_rows, grid_cols)
    n_distract = int(round(distractor_fraction * chunks_per_sample))
    samples = []
    for i in range(n_samples):
        sid = start_id + i
        # separate streams: grid/question do not depend on the chunk settings
        rng = np.random.default_rng([seed, sid, 0])
        crng = np.random.default_rng([seed, sid, 1])
        grid = rng.integers(0, n_symbols, size=(grid_rows, grid_cols))
        r, c = int(rng.integers(grid_rows)), int(rng.integers(grid_cols))
        answer = int(grid[r, c])
        relevant = [False] * n_distract + [True] * (chunks_per_sample - n_distract)
        relevant = [relevant[j] for j in crng.permutation(chunks_per_sample)]
        context: list[int] = []
        for is_rel in relevant:
            if is_rel:
                cr, cc, sym = r, c, answer
            else:
                cr, cc = int(crng.integers(grid_rows)), int(crng.integers(grid_cols))
                sym = int(crng.integers(n_symbols - 1))
                sym += sym >= answer   # any symbol except the true answer
            context += [vocab.row(cr), vocab.col(cc), vocab.symbol(sym)]
        samples.append(ToySample(sid, grid, (r, c),
                                 [vocab.row(r), vocab.col(c), QMARK],
                                 vocab.symbol(answer), context, relevant, n_symbols))
    return samples


def save_dataset(path: str | Path, samples: Iterable[ToySample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[ToySample]:
    with open(path) as fh:
        return [ToySample.from_json(json.loads(line)) for line in fh if line.strip()]


def model_config_for(vocab: ToyVocab, **overrides) -> ModelConfig:
    """Tiny preset sized for ``vocab``."""
    base = dict(n_layers=2, n_heads=2, d_model=32, d_k=16, d_ff=64,
                vocab_size=max(64, vocab.size), max_seq=64, image_patch_dim=vocab.patch_dim)
    base.update(overrides)
    return ModelConfig(**base)


# -- evaluation -----------------------------------------------------------------

def sample_layout(sample: ToySample, variant, max_seq: int | None = None) -> SequenceLayout:
    variant = Variant.parse(variant)
    Cn = 0 if variant is Variant.CLOSED_BOOK else len(sample.context_tokens)
    return build_layout(variant, sample.vocab.n_cells, len(sample.question_tokens), Cn,
                        max_seq=max_seq)


def sample_tokens(sample: ToySample, layout: SequenceLayout) -> list[int]:
    ctx = sample.context_tokens if layout.span(SegmentKind.CONTEXT).length else []
    return assemble_tokens(layout, sample.question_tokens, ctx)


def make_hook(weights: ModelWeights, layout: SequenceLayout, variant: Variant,
              mix: MixConfig | None):
    if variant is Variant.MADRAG:
        return MixHook(layout, mix or MixConfig(), weights.config.n_layers)
    return None


@dataclass
class EvalResult:
    variant: Variant
    correct: np.ndarray
    predictions: list[list[int]]
    stats: AttentionStats
    sample_ids: list[int]
    traces: list | None = None

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean()) if len(self.correct) else float("nan")


def evaluate(weights: ModelWeights, samples: Sequence[ToySample], variant,
             mix: MixConfig | None = None, max_new_tokens: int = 1, layer: int = -1,
             keep_traces: bool = False) -> EvalResult:
    """Greedy decode every sample; exact match of the tokens before EOS."""
    variant = Variant.parse(variant)
    if variant is Variant.MADRAG and mix is None:
        mix = MixConfig()
    correct, preds, stats, traces = [], [], AttentionStats(), []
    for s in samples:
        layout = sample_layout(s, variant, weights.config.max_seq)
        tokens = sample_tokens(s, layout)
        hook = make_hook(weights, layout, variant, mix)
        res = decode(weights, layout, s.image_features, tokens, hook, max_new_tokens, EOS)
        answer = res.tokens[:-1] if res.tokens[-1] == EOS else res.tokens
        correct.append(answer == [s.answer_token])
        preds.append(res.tokens)
        stats.add(compute_ratios(res.trace, res.layout, step=1, layer=layer))
        if keep_traces:
            traces.append((res.trace, res.layout, tokens + res.tokens[:-1]))
    return EvalResult(variant, np.array(correct, dtype=bool), preds, stats,
                      [s.sample_id for s in samples], traces if keep_traces else None)
