"""Attention mixing between the image-question and context-question groups.

Two forms are provided:

* ``OutputMix`` (canonical): per head and question position t,
  ``O_hat[t] = alpha * O(Q_I)[t] + (1 - alpha) * O(Q_C)[t]``.
* ``StrictWeightMix``: mixes weight rows, injecting only Q_I's image-key mass,
  ``A_hat[t] = alpha * [A(Q_I, I)[t], 0, ...] + (1 - alpha) * A(Q_C, all)[t]``,
  then ``O_hat = A_hat @ V``. Rows of ``A_hat`` are generally sub-stochastic.

The two differ by exactly ``alpha * A(Q_I, non-image keys) @ V_non-image``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layout import LayoutError, SegmentKind, SequenceLayout
from .tensor_core import DimensionError
from .transformer import HookContext, HookResult


class MixForm(str, enum.Enum):
    OUTPUT_MIX = "output"
    STRICT_WEIGHT_MIX = "strict"

    @classmethod
    def parse(cls, name) -> "MixForm":
        if isinstance(name, MixForm):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        if key in ("output", "outputmix", "eq4"):
            return cls.OUTPUT_MIX
        if key in ("strict", "strictweightmix", "weight", "eq3"):
            return cls.STRICT_WEIGHT_MIX
        raise ValueError(f"unknown mixing form {name!r}")


LAYER_PRESETS = ("all", "early", "middle", "later")


def preset_layers(preset: str, n_layers: int) -> tuple[int, ...]:
    """Early/middle/later are contiguous thirds cut at round(n/3), round(2n/3)."""
    preset = preset.lower()
    if preset == "all":
        return tuple(range(n_layers))
    b1 = int(n_layers / 3 + 0.5)
    b2 = int(2 * n_layers / 3 + 0.5)
    ranges = {"early": range(0, b1), "middle": range(b1, b2), "later": range(b2, n_layers)}
    if preset not in ranges:
        raise ValueError(f"unknown layer preset {preset!r}")
    return tuple(ranges[preset])


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.5
    layers: str | tuple[int, ...] = "all"
    form: MixForm = MixForm.OUTPUT_MIX

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        object.__setattr__(self, "form", MixForm.parse(self.form))
        if isinstance(self.layers, str):
            if self.layers.lower() not in LAYER_PRESETS:
                raise ValueError(f"unknown layer preset {self.layers!r}")
            object.__setattr__(self, "layers", self.layers.lower())
        else:
            layers = tuple(sorted({int(i) for i in self.layers}))
            if any(i < 0 for i in layers):
                raise ValueError("layer indices must be non-negative")
            object.__setattr__(self, "layers", layers)

    def layer_set(self, n_layers: int) -> frozenset[int]:
        if isinstance(self.layers, str):
            return frozenset(preset_layers(self.layers, n_layers))
        bad = [i for i in self.layers if i >= n_layers]
        if bad:
            raise ValueError(f"layers {bad} outside [0, {n_layers})")
        return frozenset(self.layers)

    def to_dict(self) -> dict:
        layers = self.layers if isinstance(self.layers, str) else list(self.layers)
        return {"alpha": self.alpha, "layers": layers, "form": self.form.value}

    @classmethod
    def from_dict(cls, d: dict) -> "MixConfig":
        layers = d.get("layers", "all")
        if not isinstance(layers, str):
            layers = tuple(layers)
        return cls(alpha=float(d.get("alpha", 0.5)), layers=layers,
                   form=MixForm.parse(d.get("form", "output")))


@dataclass
class MixedAttention:
    weights: np.ndarray               # H×T×K mixed rows
    outputs: np.ndarray | None = None  # H×T×d_k, when values were supplied


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")


def mix_outputs(o_qi, o_qc, alpha: float) -> np.ndarray:
    o_qi = np.asarray(o_qi, dtype=np.float64)
    o_qc = np.asarray(o_qc, dtype=np.float64)
    _check_alpha(alpha)
    if o_qi.shape != o_qc.shape:
        raise DimensionError(f"question groups disagree: {o_qi.shape} vs {o_qc.shape}")
    return alpha * o_qi + (1.0 - alpha) * o_qc


def mix_weights_strict(a_qi_image, a_qc_all, alpha: float, key_map: Sequence[int],
                       values=None) -> MixedAttention:
    """``key_map[j]`` is the column of ``a_qc_all`` holding image key j."""
    a_qi_image = np.asarray(a_qi_image, dtype=np.float64)
    a_qc_all = np.asarray(a_qc_all, dtype=np.float64)
    _check_alpha(alpha)
    H, T, V = a_qi_image.shape
    if a_qc_all.ndim != 3 or a_qc_all.shape[:2] != (H, T):
        raise DimensionError(f"a_qc_all shape {a_qc_all.shape} does not match {(H, T)}")
    K = a_qc_all.shape[2]
    cols = np.asarray(key_map, dtype=np.int64)
    if cols.shape != (V,) or (V and (cols.min() < 0 or cols.max() >= K)) or len(set(cols.tolist())) != V:
        raise DimensionError(f"key_map {cols.tolist()} does not align {V} image keys into {K} columns")
    injected = np.zeros_like(a_qc_all)
    injected[:, :, cols] = a_qi_image
    mixed = alpha * injected + (1.0 - alpha) * a_qc_all
    out = None
    if values is not None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[:2] != (H, K):
            raise DimensionError(f"values shape {values.shape} does not match {(H, K)}")
        out = np.matmul(mixed, values)
    return MixedAttention(mixed, out)


def strict_row_sum(a_qi_image, a_qc_all, alpha: float) -> np.ndarray:
    """Expected row sums of the strict mix: alpha*rho_I + (1-alpha)*sigma."""
    return alpha * np.asarray(a_qi_image).sum(-1) + (1.0 - alpha) * np.asarray(a_qc_all).sum(-1)


def apply_intervention(ctx: HookContext, layout: SequenceLayout, cfg: MixConfig) -> HookResult:
    """Replacement Q_C attention outputs (and effective weight rows) for one layer."""
    if not layout.variant.dual_question:
        raise LayoutError(f"intervention needs a dual-question layout, got {layout.variant.value}")
    qi = layout.span(SegmentKind.IMAGE_QUESTION)
    qc = layout.span(SegmentKind.CONTEXT_QUESTION)
    if qi.length != qc.length:
        raise DimensionError(f"Q_I has {qi.length} tokens but Q_C has {qc.length}")
    a, o, alpha = ctx.weights, ctx.outputs, cfg.alpha
    a_qi = a[:, qi.start:qi.stop]
    a_qc = a[:, qc.start:qc.stop]
    if cfg.form is MixForm.OUTPUT_MIX:
        out = mix_outputs(o[:, qi.start:qi.stop], o[:, qc.start:qc.stop], alpha)
        # effective weights: Q_I rows are zero beyond their causal prefix, so
        # this row reproduces `out` when multiplied with the values
        w = alpha * a_qi + (1.0 - alpha) * a_qc
    else:
        img = layout.span(SegmentKind.IMAGE)
        mixed = mix_weights_strict(a_qi[:, :, img.start:img.stop], a_qc, alpha,
                                   list(img.indices()), ctx.values)
        out, w = mixed.outputs, mixed.weights
    return HookResult(rows=range(qc.start, qc.stop), outputs=out, weights=w)


class MixHook:
    """Forward hook applying :func:`apply_intervention` on the configured layers.

    Spans and checks are resolved once here so each call only does arithmetic.
    """

    def __init__(self, layout: SequenceLayout, cfg: MixConfig, n_layers: int):
        if not layout.variant.dual_question:
            raise LayoutError(f"intervention needs a dual-question layout, got {layout.variant.value}")
        qi = layout.span(SegmentKind.IMAGE_QUESTION)
        qc = layout.span(SegmentKind.CONTEXT_QUESTION)
        if qi.length != qc.length:
            raise DimensionError(f"Q_I has {qi.length} tokens but Q_C has {qc.length}")
        self.layout = layout
        self.cfg = cfg
        self.layers = cfg.layer_set(n_layers)
        # output mix as one gather + matmul: [alpha*I | (1-alpha)*I] @ [rows(Q_I); rows(Q_C)]
        self._gather = np.r_[qi.start:qi.stop, qc.start:qc.stop]
        eye = np.eye(qc.length)
        self._mix = np.hstack([cfg.alpha * eye, (1.0 - cfg.alpha) * eye])
        self._rows = range(qc.start, qc.stop)

    def __call__(self, ctx: HookContext) -> HookResult | None:
        if ctx.layer not in self.layers:
            return None
        if self.cfg.form is not MixForm.OUTPUT_MIX:
            return apply_intervention(ctx, self.layout, self.cfg)
        g = self._gather
        return HookResult(rows=self._rows, outputs=self._mix @ ctx.outputs[:, g],
                          weights=self._mix @ ctx.weights[:, g])
