"""Small pre-norm decoder with image-feature embedding, attention capture and a
per-head hook point before the output projection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .layout import IMAGE_SLOT, SegmentKind, SequenceLayout
from .tensor_core import DTYPE, CausalMask, DimensionError, multihead_causal_attention


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_k: int = 16
    d_ff: int = 64
    vocab_size: int = 64
    max_seq: int = 64
    image_patch_dim: int = 16
    ln_eps: float = 1e-5
    pos_scale: float = 1.0   # amplitude of the fixed sinusoidal encoding

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_k", "d_ff", "vocab_size",
                     "max_seq", "image_patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_k:
            raise ValueError(f"d_model={self.d_model} != n_heads*d_k={self.n_heads * self.d_k}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, D),
        "img_proj_w": (cfg.image_patch_dim, D),
        "img_proj_b": (D,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1_g": (D,), p + "ln1_b": (D,),
            p + "wq": (D, D), p + "wk": (D, D), p + "wv": (D, D), p + "wo": (D, D),
            p + "ln2_g": (D,), p + "ln2_b": (D,),
            p + "w1": (D, F), p + "b1": (F,), p + "w2": (F, D), p + "b2": (D,),
        })
    shapes.update({"lnf_g": (D,), "lnf_b": (D,),
                   "out_w": (D, cfg.vocab_size), "out_b": (cfg.vocab_size,)})
    return shapes


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.params):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        frozen = {}
        for name, arr in self.params.items():
            arr = np.array(arr, dtype=DTYPE, copy=True)
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} has non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def replace(self, **updates: np.ndarray) -> "ModelWeights":
        return ModelWeights(self.config, {**self.params, **updates})


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            params[name] = np.zeros(shape)
        elif leaf in ("wq", "wk", "wv", "wo", "w1", "w2", "img_proj_w", "out_w"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            params[name] = rng.normal(0.0, 1.0, size=shape)
    return ModelWeights(cfg, params)


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=DTYPE)[:, None]
    i = np.arange(0, d_model, 2, dtype=DTYPE)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model), dtype=DTYPE)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


# -- embedding ------------------------------------------------------------------

def embed_sequence(weights: ModelWeights, layout: SequenceLayout, image_features,
                   token_ids: Sequence[int]) -> np.ndarray:
    """Image positions get projected features, text positions get table rows,
    and every position gets a sinusoidal encoding.

    ``token_ids`` is the full-length stream with IMAGE_SLOT at image positions.
    """
    cfg = weights.config
    L = layout.length
    feats = np.asarray(image_features, dtype=DTYPE).reshape(-1, cfg.image_patch_dim)
    img = layout.span(SegmentKind.IMAGE)
    if feats.shape[0] != img.length:
        raise DimensionError(f"layout has {img.length} image slots, got {feats.shape[0]} features")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape != (L,):
        raise DimensionError(f"expected {L} token ids, got {ids.shape[0] if ids.ndim else ids}")
    if L > cfg.max_seq:
        raise DimensionError(f"sequence length {L} exceeds max_seq {cfg.max_seq}")
    img_slots = ids[img.start:img.stop]
    if (img_slots != IMAGE_SLOT).any():
        raise DimensionError("image positions must hold IMAGE_SLOT")
    text = np.ones(L, dtype=bool)
    text[img.start:img.stop] = False
    text_ids = ids[text]
    if ((text_ids < 0) | (text_ids >= cfg.vocab_size)).any():
        raise DimensionError("token id out of vocabulary range")

    x = np.empty((L, cfg.d_model), dtype=DTYPE)
    x[text] = weights["tok_emb"][text_ids]
    if img.length:
        x[img.start:img.stop] = feats @ weights["img_proj_w"] + weights["img_proj_b"]
    return x + cfg.pos_scale * sinusoidal_positions(L, cfg.d_model)


# -- hooks ----------------------------------------------------------------------

class HookContractError(RuntimeError):
    """An attention hook returned something the forward pass cannot use."""


@dataclass
class HookContext:
    """Arrays belong to the forward pass and are overwritten in place with the
    hook's result once it returns; copy anything that must outlive the call."""
    layer: int
    weights: np.ndarray   # H×L×L post-softmax
    outputs: np.ndarray   # H×L×d_k per-head attention outputs (pre-W_O)
    values: np.ndarray    # H×L×d_k


@dataclass
class HookResult:
    rows: range                      # query positions being replaced
    outputs: np.ndarray              # H×len(rows)×d_k
    weights: np.ndarray | None = None  # H×len(rows)×L effective weights for the record


class AttentionHook(Protocol):
    layers: frozenset[int]

    def __call__(self, ctx: HookContext) -> HookResult | None: ...


# -- forward --------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    head: int
    rows: np.ndarray


@dataclass
class ForwardTrace:
    logits: np.ndarray                 # L×vocab
    attention: list[np.ndarray]        # per layer, H×L×L
    hidden: list[np.ndarray] | None = None  # residual stream after each layer (index 0 = embedding)
    intervened_rows: dict[int, range] = field(default_factory=dict)

    @property
    def records(self) -> list[AttentionRecord]:
        return [AttentionRecord(l, h, a[h]) for l, a in enumerate(self.attention)
                for h in range(a.shape[0])]

    @property
    def n_layers(self) -> int:
        return len(self.attention)

    @property
    def n_heads(self) -> int:
        return self.attention[0].shape[0]


def forward(weights: ModelWeights, embedded: np.ndarray, mask: CausalMask | None = None,
            hook: AttentionHook | None = None, capture_hidden: bool = False) -> ForwardTrace:
    cfg = weights.config
    x = np.asarray(embedded, dtype=DTYPE)
    L = x.shape[0]
    if x.shape != (L, cfg.d_model):
        raise DimensionError(f"embedded shape {x.shape} != (L, {cfg.d_model})")
    if L > cfg.max_seq:
        raise DimensionError(f"sequence length {L} exceeds max_seq {cfg.max_seq}")
    mask = mask or CausalMask(L)
    H, dk = cfg.n_heads, cfg.d_k
    hook_layers = hook.layers if hook is not None else frozenset()

    attention = []
    hidden = [x] if capture_hidden else None
    intervened = {}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = layer_norm(x, weights[p + "ln1_g"], weights[p + "ln1_b"], cfg.ln_eps)
        q = (h @ weights[p + "wq"]).reshape(L, H, dk).transpose(1, 0, 2)
        k = (h @ weights[p + "wk"]).reshape(L, H, dk).transpose(1, 0, 2)
        v = (h @ weights[p + "wv"]).reshape(L, H, dk).transpose(1, 0, 2)
        a, o = multihead_causal_attention(q, k, v, mask)
        if i in hook_layers:
            res = hook(HookContext(i, a, o, v))
            if res is not None:
                a, o = _apply_hook_result(res, a, o, H, L, dk)
                intervened[i] = res.rows
        attention.append(a)
        x = x + o.transpose(1, 0, 2).reshape(L, cfg.d_model) @ weights[p + "wo"]
        h2 = layer_norm(x, weights[p + "ln2_g"], weights[p + "ln2_b"], cfg.ln_eps)
        x = x + gelu(h2 @ weights[p + "w1"] + weights[p + "b1"]) @ weights[p + "w2"] + weights[p + "b2"]
        if capture_hidden:
            hidden.append(x)
    hf = layer_norm(x, weights["lnf_g"], weights["lnf_b"], cfg.ln_eps)
    logits = hf @ weights["out_w"] + weights["out_b"]
    return ForwardTrace(logits, attention, hidden, intervened)


def _apply_hook_result(res: HookResult, a, o, H, L, dk):
    rows = res.rows
    if not isinstance(rows, range) or rows.step != 1 or rows.start < 0 or rows.stop > L:
        raise HookContractError(f"hook rows {rows!r} invalid for length {L}")
    n = len(rows)
    out = np.asarray(res.outputs)
    if out.shape != (H, n, dk):
        raise HookContractError(f"hook outputs shape {out.shape}, expected {(H, n, dk)}")
    if not np.isfinite(out).all():
        raise HookContractError("hook produced non-finite outputs")
    w = None if res.weights is None else np.asarray(res.weights)
    if w is not None and w.shape != (H, n, L):
        raise HookContractError(f"hook weights shape {w.shape}, expected {(H, n, L)}")
    o[:, rows.start:rows.stop] = out
    if w is not None:
        a[:, rows.start:rows.stop] = w
    return a, o


# -- decoding -------------------------------------------------------------------

@dataclass
class DecodeResult:
    tokens: list[int]
    trace: ForwardTrace      # trace of the last full-recompute pass
    layout: SequenceLayout   # layout including the generated segment


def decode(weights: ModelWeights, layout: SequenceLayout, image_features, token_ids: Sequence[int],
           hook: AttentionHook | None = None, max_new_tokens: int = 1,
           eos_id: int | None = None) -> DecodeResult:
    """Greedy decoding by full recompute; the returned trace covers prompt plus
    all generated tokens except the last (which is never fed back)."""
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    cfg = weights.config
    prompt = list(token_ids)
    generated: list[int] = []
    trace = None
    cur = layout
    while True:
        cur = layout.with_generated(len(generated))
        if cur.length > cfg.max_seq:
            raise DimensionError(f"decoding would exceed max_seq {cfg.max_seq}")
        x = embed_sequence(weights, cur, image_features, prompt + generated)
        trace = forward(weights, x, CausalMask(cur.length), hook)
        # argmax returns the first maximum, i.e. the lowest token id on ties
        nxt = int(np.argmax(trace.logits[-1]))
        generated.append(nxt)
        if len(generated) >= max_new_tokens or (eos_id is not None and nxt == eos_id):
            break
    return DecodeResult(generated, trace, cur)


def greedy_decode(weights: ModelWeights, layout: SequenceLayout, image_features,
                  token_ids: Sequence[int], hook: AttentionHook | None = None,
                  max_new_tokens: int = 1, eos_id: int | None = None) -> list[int]:
    return decode(weights, layout, image_features, token_ids, hook, max_new_tokens, eos_id).tokens


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "attnmix-weights-v1"


def save_weights(path: str | Path, weights: ModelWeights) -> None:
    """``.npz`` archive: one float64 array per parameter plus ``__config__`` (JSON)."""
    meta = json.dumps({"format": CHECKPOINT_FORMAT, "config": asdict(weights.config)}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __config__=np.array(meta), **weights.params)


def load_weights(path: str | Path) -> ModelWeights:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__config__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognised checkpoint format {meta.get('format')!r}")
        params = {k: data[k] for k in data.files if k != "__config__"}
    return ModelWeights(ModelConfig(**meta["config"]), params)
