"""Attention diagnostics: modality ratios, sink filtering, heatmaps, head ranking."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layout import SegmentKind, SequenceLayout
from .transformer import ForwardTrace


class EmptyPrefixError(ValueError):
    pass


class DegenerateFilterError(ValueError):
    pass


# -- ratios ---------------------------------------------------------------------

@dataclass(frozen=True)
class RatioEntry:
    step: int
    layer: int
    rho_image: float
    rho_context: float
    head: int | None = None   # None when head-averaged


@dataclass
class AttentionStats:
    entries: list[RatioEntry] = field(default_factory=list)

    def add(self, entry: RatioEntry) -> None:
        self.entries.append(entry)

    def mean_rho_image(self) -> float:
        return float(np.mean([e.rho_image for e in self.entries])) if self.entries else float("nan")

    def mean_rho_context(self) -> float:
        return float(np.mean([e.rho_context for e in self.entries])) if self.entries else float("nan")


def query_row(layout: SequenceLayout, step: int) -> int:
    """Position whose attention row produces generated token ``step`` (1-based)."""
    if step < 1:
        raise EmptyPrefixError("decode steps are 1-based; step 0 has no preceding query row")
    row = layout.prompt_length + step - 2
    if row < 0:
        raise EmptyPrefixError("empty prefix")
    if row >= layout.length:
        raise IndexError(f"step {step} beyond the traced sequence")
    return row


def compute_ratios(trace: ForwardTrace, layout: SequenceLayout, step: int = 1,
                   layer: int = -1, average_heads: bool = True,
                   head: int | None = None) -> RatioEntry:
    """Image and context attention mass of the row that emits token ``step``.

    Defaults follow the last-layer, head-averaged protocol. Pass
    ``average_heads=False`` together with ``head`` for a single head.
    """
    n_layers = trace.n_layers
    if not -n_layers <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for {n_layers} layers")
    layer = layer % n_layers
    row = query_row(layout, step)
    att = trace.attention[layer][:, row, :]
    if average_heads:
        vec = att.mean(axis=0)
        head = None
    else:
        if head is None:
            raise ValueError("head index required when average_heads is False")
        vec = att[head]
    img = layout.span(SegmentKind.IMAGE)
    ctx = layout.span(SegmentKind.CONTEXT)
    return RatioEntry(step, layer, float(vec[img.start:img.stop].sum()),
                      float(vec[ctx.start:ctx.stop].sum()), head)


def segment_masses(trace: ForwardTrace, layout: SequenceLayout, row: int, layer: int,
                   head: int) -> dict[SegmentKind, float]:
    vec = trace.attention[layer][head, row]
    return {s.kind: float(vec[s.start:s.stop].sum()) for s in layout.segments}


# -- sink filtering ---------------------------------------------------------------

@dataclass(frozen=True)
class SinkFilterConfig:
    threshold_multiplier: float = 5.0
    statistic: str = "median"
    renormalize: bool = False

    def __post_init__(self):
        if not self.threshold_multiplier > 1.0:
            raise ValueError("threshold multiplier must exceed 1")
        if self.statistic not in ("median", "mean"):
            raise ValueError(f"unknown baseline statistic {self.statistic!r}")


def filter_sinks(image_attention, cfg: SinkFilterConfig = SinkFilterConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Zero image tokens whose head-averaged mass exceeds tau x baseline.

    ``image_attention`` is heads×V (a 1-D row is treated as a single head).
    Returns ``(mask, filtered)`` where ``mask[j]`` is True for sinks and
    ``filtered`` is the head-averaged row with sinks zeroed.
    """
    att = np.asarray(image_attention, dtype=np.float64)
    if att.ndim == 1:
        att = att[None, :]
    if att.ndim != 2 or att.shape[1] < 1:
        raise ValueError(f"expected heads x V with V >= 1, got shape {att.shape}")
    if (att < 0).any():
        raise ValueError("attention masses must be non-negative")
    masses = att.mean(axis=0)
    base = np.median(masses) if cfg.statistic == "median" else masses.mean()
    mask = masses > cfg.threshold_multiplier * base
    if mask.all():
        raise DegenerateFilterError("every image token was classified as a sink")
    filtered = np.where(mask, 0.0, masses)
    if cfg.renormalize:
        total = filtered.sum()
        if total > 0:
            filtered = filtered / total
    return mask, filtered


# -- head selection / context tokens ---------------------------------------------

def select_visual_heads(trace: ForwardTrace, layout: SequenceLayout, k: int,
                        row: int | None = None) -> list[tuple[int, int]]:
    """Top-k (layer, head) pairs by image-key mass from the final query row."""
    if not trace.attention:
        raise ValueError("empty trace")
    total = trace.n_layers * trace.n_heads
    if not 0 <= k <= total:
        raise ValueError(f"k={k} outside [0, {total}]")
    row = layout.length - 1 if row is None else row
    img = layout.span(SegmentKind.IMAGE)
    scored = []
    for l, a in enumerate(trace.attention):
        for h in range(a.shape[0]):
            scored.append((-float(a[h, row, img.start:img.stop].sum()), l, h))
    scored.sort()
    return [(l, h) for _, l, h in scored[:k]]


def top_context_tokens(trace: ForwardTrace, layout: SequenceLayout, token_ids: Sequence[int],
                       k: int = 3, layer: int = -1, step: int = 1) -> list[tuple[int, int, float]]:
    """Context positions with the highest head-averaged mass from the row that
    emits the first answer token. Descending mass, ties by position."""
    ctx = layout.span(SegmentKind.CONTEXT)
    if ctx.length == 0:
        raise ValueError("layout has no context tokens")
    if k < 1:
        raise ValueError("k must be >= 1")
    row = query_row(layout, step)
    vec = trace.attention[layer][:, row, ctx.start:ctx.stop].mean(axis=0)
    order = sorted(range(ctx.length), key=lambda j: (-vec[j], j))[:k]
    return [(ctx.start + j, int(token_ids[ctx.start + j]), float(vec[j])) for j in order]


# -- heatmaps -------------------------------------------------------------------

@dataclass
class Heatmap:
    grid: np.ndarray       # normalised to [0, 1] for rendering
    raw: np.ndarray        # pre-normalisation grid (after sink filtering)
    normalization: str = "minmax"
    sink_mask: np.ndarray | None = None

    def to_pgm(self, path: str | Path, comments: Iterable[str] = ()) -> None:
        """Plain (P2) PGM, values scaled to 0..255."""
        rows, cols = self.grid.shape
        levels = np.rint(self.grid * 255).astype(int)
        lines = ["P2"] + [f"# {c}" for c in comments] + [f"{cols} {rows}", "255"]
        lines += [" ".join(str(v) for v in r) for r in levels]
        Path(path).write_text("\n".join(lines) + "\n")

    def to_csv(self, path: str | Path, comments: Iterable[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh)
            for r in self.raw:
                w.writerow([repr(float(v)) for v in r])


def export_heatmap(image_attention, grid_rows: int, grid_cols: int,
                   sink_cfg: SinkFilterConfig | None = None) -> Heatmap:
    att = np.asarray(image_attention, dtype=np.float64)
    V = att.shape[-1]
    if grid_rows * grid_cols != V:
        raise ValueError(f"{V} image tokens do not fit a {grid_rows}x{grid_cols} grid")
    sink_mask = None
    if sink_cfg is not None:
        sink_mask, row = filter_sinks(att, sink_cfg)
    else:
        row = att.mean(axis=0) if att.ndim == 2 else att
    raw = row.reshape(grid_rows, grid_cols)
    lo, hi = raw.min(), raw.max()
    # constant grid renders as all zeros
    grid = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return Heatmap(grid, raw.copy(), "minmax",
                   None if sink_mask is None else sink_mask.reshape(grid_rows, grid_cols))


STATS_COLUMNS = ("sample_id", "variant", "step", "layer", "rho_image", "rho_context")


def write_stats_csv(path: str | Path, rows: Iterable[tuple], comments: Iterable[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4])), repr(float(r[5]))])
