"""Batched forward/backward for the decoder and a small Adam trainer.

Gradients are derived by hand; :func:`gradient_check` compares them with
central finite differences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layout import IMAGE_SLOT
from .tensor_core import NEG_INF
from .toytask import SEP, ToySample
from .transformer import ModelConfig, ModelWeights, _GELU_C, init_weights, sinusoidal_positions

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    grad_check: bool = False
    # each step draws an instruction-prefix length in [0, max_instruction] so
    # the model sees the question at many absolute positions
    max_instruction: int = 0
    log_every: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.max_instruction < 0:
            raise ValueError("max_instruction must be >= 0")


@dataclass
class Batch:
    features: np.ndarray   # B×V×P
    ids: np.ndarray        # B×L, IMAGE_SLOT at image positions
    img: tuple[int, int]   # image span, shared by the batch
    target_pos: np.ndarray  # B
    targets: np.ndarray     # B


class ClosedBookPool:
    """Pre-tokenised closed-book samples; batches are cut with a shared
    instruction-prefix length ``S`` (filled with SEP tokens)."""

    def __init__(self, samples: Sequence[ToySample]):
        if not samples:
            raise ValueError("no training samples")
        self.features = np.stack([s.image_features for s in samples])
        self.questions = np.array([s.question_tokens for s in samples], dtype=np.int64)
        self.answers = np.array([s.answer_token for s in samples], dtype=np.int64)

    def __len__(self):
        return len(self.answers)

    def batch(self, idx, S: int = 0) -> Batch:
        idx = np.asarray(idx)
        B, V = len(idx), self.features.shape[1]
        ids = np.hstack([np.full((B, S), SEP, dtype=np.int64),
                         np.full((B, V), IMAGE_SLOT, dtype=np.int64),
                         self.questions[idx]])
        return Batch(self.features[idx], ids, (S, S + V),
                     np.full(B, ids.shape[1] - 1, dtype=np.int64), self.answers[idx])


def make_batch(samples: Sequence[ToySample], S: int = 0) -> Batch:
    """Closed-book batch: predict the answer at the last question position."""
    pool = ClosedBookPool(samples)
    return pool.batch(np.arange(len(pool)), S)


# -- primitives -------------------------------------------------------------------

def _ln_fwd(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axes), dy.sum(axes)


def _gelu_fwd(z):
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z * z))
    return 0.5 * z * (1.0 + t), t


def _gelu_bwd(z, t):
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _sum2(a, b):
    """a^T b over all leading axes: (..., m), (..., n) -> m×n."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# -- forward / backward -------------------------------------------------------------

def forward_batch(params: dict, cfg: ModelConfig, batch: Batch):
    B, L = batch.ids.shape
    H, dk, D = cfg.n_heads, cfg.d_k, cfg.d_model
    i0, i1 = batch.img
    text = batch.ids != IMAGE_SLOT
    x = np.zeros((B, L, D))
    x[text] = params["tok_emb"][batch.ids[text]]
    x[:, i0:i1] = batch.features @ params["img_proj_w"] + params["img_proj_b"]
    x = x + cfg.pos_scale * sinusoidal_positions(L, D)
    mask = np.triu(np.full((L, L), NEG_INF), k=1)
    scale = 1.0 / np.sqrt(dk)
    caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h, ln1 = _ln_fwd(x, params[p + "ln1_g"], params[p + "ln1_b"], cfg.ln_eps)
        q = (h @ params[p + "wq"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        k = (h @ params[p + "wk"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        v = (h @ params[p + "wv"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) * scale + mask
        s = s - s.max(-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        x_mid = x + o @ params[p + "wo"]
        h2, ln2 = _ln_fwd(x_mid, params[p + "ln2_g"], params[p + "ln2_b"], cfg.ln_eps)
        z = h2 @ params[p + "w1"] + params[p + "b1"]
        g, t = _gelu_fwd(z)
        x_out = x_mid + g @ params[p + "w2"] + params[p + "b2"]
        caches.append((h, ln1, q, k, v, a, o, h2, ln2, z, g, t))
        x = x_out
    rows = np.arange(B)
    xf = x[rows, batch.target_pos]
    hf, lnf = _ln_fwd(xf, params["lnf_g"], params["lnf_b"], cfg.ln_eps)
    logits = hf @ params["out_w"] + params["out_b"]
    return logits, (caches, hf, lnf, text)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    B = len(targets)
    loss = -logp[np.arange(B), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), targets] -= 1.0
    return float(loss), dlogits / B


def loss_and_grads(weights: ModelWeights, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    cfg, params = weights.config, weights.params
    B, L = batch.ids.shape
    H, dk, D = cfg.n_heads, cfg.d_k, cfg.d_model
    logits, (caches, hf, lnf, text) = forward_batch(params, cfg, batch)
    loss, dlogits = cross_entropy(logits, batch.targets)
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = hf.T @ dlogits
    grads["out_b"] = dlogits.sum(0)
    dxf, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dlogits @ params["out_w"].T, lnf)
    dx = np.zeros((B, L, D))
    dx[np.arange(B), batch.target_pos] = dxf
    scale = 1.0 / np.sqrt(dk)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        h, ln1, q, k, v, a, o, h2, ln2, z, g, t = caches[i]
        # feed-forward
        grads[p + "w2"] = _sum2(g, dx)
        grads[p + "b2"] = dx.sum((0, 1))
        dz = (dx @ params[p + "w2"].T) * _gelu_bwd(z, t)
        grads[p + "w1"] = _sum2(h2, dz)
        grads[p + "b1"] = dz.sum((0, 1))
        dh2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_bwd(dz @ params[p + "w1"].T, ln2)
        dx = dx + dh2
        # attention
        grads[p + "wo"] = _sum2(o, dx)
        do = (dx @ params[p + "wo"].T).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dkk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda y: y.transpose(0, 2, 1, 3).reshape(B, L, D)
        dq, dkk, dv = merge(dq), merge(dkk), merge(dv)
        grads[p + "wq"] = _sum2(h, dq)
        grads[p + "wk"] = _sum2(h, dkk)
        grads[p + "wv"] = _sum2(h, dv)
        dh = dq @ params[p + "wq"].T + dkk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dh1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_bwd(dh, ln1)
        dx = dx + dh1
    i0, i1 = batch.img
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, batch.ids[text], dx[text])
    grads["tok_emb"] = dtok
    grads["img_proj_w"] = _sum2(batch.features, dx[:, i0:i1])
    grads["img_proj_b"] = dx[:, i0:i1].sum((0, 1))
    return loss, grads


def batch_loss(weights: ModelWeights, batch: Batch) -> float:
    logits, _ = forward_batch(weights.params, weights.config, batch)
    return cross_entropy(logits, batch.targets)[0]


def dataset_loss(weights: ModelWeights, batch: Batch, chunk: int = 512, with_accuracy: bool = False):
    """Mean loss (and accuracy) over a large batch, evaluated in chunks."""
    n = len(batch.targets)
    total, hits = 0.0, 0
    for start in range(0, n, chunk):
        sub = _subset(batch, np.arange(start, min(n, start + chunk)))
        logits, _ = forward_batch(weights.params, weights.config, sub)
        total += cross_entropy(logits, sub.targets)[0] * len(sub.targets)
        hits += int((logits.argmax(-1) == sub.targets).sum())
    if with_accuracy:
        return total / n, hits / n
    return total / n


# -- gradient check -----------------------------------------------------------------

@dataclass
class GradCheckReport:
    entries: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    def __len__(self):
        return len(self.entries)


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(weights: ModelWeights, batch: Batch, n_params: int = 200, seed: int = 0,
                   h: float = 1e-5) -> GradCheckReport:
    """Central differences on ``n_params`` randomly chosen scalar parameters."""
    _, grads = loss_and_grads(weights, batch)
    rng = np.random.default_rng(seed)
    names = sorted(weights.params)
    report = GradCheckReport()
    for _ in range(n_params):
        # sample names uniformly, then an index, so small tensors are covered
        name = names[rng.integers(len(names))]
        base = weights.params[name]
        idx = tuple(int(rng.integers(d)) for d in base.shape)
        vals = []
        for sign in (+1, -1):
            arr = base.copy()
            arr[idx] += sign * h
            vals.append(batch_loss(weights.replace(**{name: arr}), batch))
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[name][idx])
        report.entries.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return report


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float]
    initial_loss: float
    final_loss: float
    train_accuracy: float
    grad_check: GradCheckReport | None = None


def train(cfg: ModelConfig, samples: Sequence[ToySample], tc: TrainConfig = TrainConfig(),
          init: ModelWeights | None = None) -> TrainResult:
    """Adam on answer-token cross-entropy over closed-book layouts."""
    weights = init or init_weights(cfg, tc.seed)
    rng = np.random.default_rng(tc.seed + 1)
    pool = ClosedBookPool(samples)
    full = pool.batch(np.arange(len(pool)))
    report = None
    if tc.grad_check:
        report = gradient_check(weights, pool.batch(np.arange(min(8, len(pool))), 2),
                                n_params=200, seed=tc.seed)
    initial = dataset_loss(weights, full)
    params = {k: v.copy() for k, v in weights.params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    warmup = min(100, tc.steps // 10 + 1)
    max_s = min(tc.max_instruction, cfg.max_seq - full.ids.shape[1])
    losses = []
    n = len(pool)
    for step in range(1, tc.steps + 1):
        idx = rng.choice(n, size=min(tc.batch_size, n), replace=False)
        S = int(rng.integers(max_s + 1))
        loss, grads = loss_and_grads(ModelWeights(cfg, params), pool.batch(idx, S))
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became {loss} at step {step}; last finite losses {losses[-5:]}")
        losses.append(loss)
        # linear warmup then cosine decay
        lr = tc.learning_rate * min(1.0, step / warmup) * 0.5 * (1 + np.cos(np.pi * step / tc.steps))
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            s[k] = b2 * s[k] + (1 - b2) * grads[k] ** 2
            mh = m[k] / (1 - b1 ** step)
            sh = s[k] / (1 - b2 ** step)
            params[k] = params[k] - lr * mh / (np.sqrt(sh) + eps)
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    final = ModelWeights(cfg, params)
    loss, acc = dataset_loss(final, full, with_accuracy=True)
    return TrainResult(final, losses, initial, loss, acc, report)


def _subset(batch: Batch, idx) -> Batch:
    return Batch(batch.features[idx], batch.ids[idx], batch.img,
                 batch.target_pos[idx], batch.targets[idx])
