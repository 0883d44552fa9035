"""Experiment runner: variant comparisons, quadrant analysis, sweeps, timing.

Every emitted file carries the seed, a config hash and the package version.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .instrumentation import (
    SinkFilterConfig, export_heatmap, query_row, top_context_tokens, write_stats_csv,
)
from .intervention import LAYER_PRESETS, MixConfig
from .layout import SegmentKind, Variant, assemble_tokens, build_layout
from .toytask import (
    SEP, EvalResult, ToySample, ToyVocab, evaluate, generate_dataset, make_hook, model_config_for,
    sample_layout, sample_tokens,
)
from .training import TrainConfig, train
from .transformer import ModelWeights, decode, load_weights, save_weights

log = logging.getLogger(__name__)

ALL_VARIANTS = tuple(v.value for v in Variant)
REPORTS = ("table", "quadrant", "sweep", "timing")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # dataset
    n_train: int = 20000
    n_eval: int = 500
    grid_rows: int = 4
    grid_cols: int = 4
    n_symbols: int = 8
    chunks_per_sample: int = 3
    distractor_fraction: float = 1.0
    # model
    model: dict = field(default_factory=dict)      # ModelConfig overrides of the tiny preset
    train: dict = field(default_factory=dict)      # TrainConfig overrides
    checkpoint: str | None = None
    train_model: bool = True
    # runs
    variants: list[str] = field(default_factory=lambda: list(ALL_VARIANTS))
    mix: MixConfig = field(default_factory=MixConfig)
    reports: list[str] = field(default_factory=lambda: ["table"])
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    layer_presets: list[str] = field(default_factory=lambda: list(LAYER_PRESETS))
    chunk_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 6])
    timing_samples: int = 100
    timing_warmup: int = 3
    heatmap_samples: int = 4
    sink_threshold: float = 5.0
    out_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.mix, dict):
            self.mix = MixConfig.from_dict(self.mix)
        self.variants = [Variant.parse(v).value for v in self.variants]
        bad = [r for r in self.reports if r not in REPORTS]
        if bad:
            raise ExperimentError(f"unknown report(s) {bad}; choose from {REPORTS}")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ExperimentError(f"alphas must lie in [0, 1]: {self.alphas}")
        if any(c < 0 for c in self.chunk_counts):
            raise ExperimentError("chunk counts must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["mix"] = self.mix.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def vocab(self) -> ToyVocab:
        return ToyVocab(self.n_symbols, self.grid_rows, self.grid_cols)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    # seeds of the independent data streams
    @property
    def train_seed(self) -> int:
        return 1_000_003 * self.seed + 1

    @property
    def eval_seed(self) -> int:
        return 1_000_003 * self.seed + 2

    def eval_samples(self, chunks: int | None = None) -> list[ToySample]:
        return generate_dataset(self.eval_seed, self.n_eval, self.grid_rows, self.grid_cols,
                                self.n_symbols,
                                self.chunks_per_sample if chunks is None else chunks,
                                self.distractor_fraction)


# -- file helpers ----------------------------------------------------------------

def _provenance(cfg: ExperimentConfig) -> list[str]:
    return [f"seed={cfg.seed}", f"config_hash={cfg.config_hash()}", f"version={__version__}"]


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows, cfg: ExperimentConfig) -> Path:
    with open(path, "w", newline="") as fh:
        for c in _provenance(cfg):
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])
    return path


# -- model ------------------------------------------------------------------------

@dataclass
class ModelBundle:
    weights: ModelWeights
    train_info: dict


def obtain_weights(cfg: ExperimentConfig, out: Path | None = None) -> ModelBundle:
    if cfg.checkpoint and Path(cfg.checkpoint).exists():
        return ModelBundle(load_weights(cfg.checkpoint), {"checkpoint": str(cfg.checkpoint)})
    if not cfg.train_model:
        raise ExperimentError(f"checkpoint {cfg.checkpoint!r} not found and training disabled")
    model_cfg = model_config_for(cfg.vocab, **cfg.model)
    samples = generate_dataset(cfg.train_seed, cfg.n_train, cfg.grid_rows, cfg.grid_cols,
                               cfg.n_symbols)
    t0 = time.perf_counter()
    log.info("training seed %d on %d closed-book samples", cfg.seed, len(samples))
    res = train(model_cfg, samples, cfg.train_config())
    info = {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "train_accuracy": res.train_accuracy, "train_seconds": time.perf_counter() - t0}
    if out is not None:
        save_weights(out / "model.npz", res.weights)
    if cfg.checkpoint:
        save_weights(cfg.checkpoint, res.weights)
    return ModelBundle(res.weights, info)


# -- analyses ---------------------------------------------------------------------

@dataclass
class QuadrantCell:
    cb_correct: bool
    rag_correct: bool
    n: int
    method_accuracy: float
    baseline_accuracy: float
    delta: float

    @property
    def tag(self) -> str:
        return "attention-distraction cases" if self.cb_correct and not self.rag_correct else ""


@dataclass
class QuadrantReport:
    cells: dict[tuple[bool, bool], QuadrantCell]
    members: dict[tuple[bool, bool], list[int]]

    @property
    def total(self) -> int:
        return sum(c.n for c in self.cells.values())

    def rows(self):
        for key in ((True, True), (True, False), (False, True), (False, False)):
            c = self.cells[key]
            yield (int(c.cb_correct), int(c.rag_correct), c.n, c.method_accuracy,
                   c.baseline_accuracy, c.delta, c.tag)


QUADRANT_COLUMNS = ("cb_correct", "rag_correct", "n", "method_accuracy", "rag_accuracy",
                    "delta", "tag")


def quadrant_analysis(cb_correct, rag_correct, method_correct) -> QuadrantReport:
    """Split samples by (closed-book correct, RAG correct); within each cell
    compare the method with RAG, whose accuracy is fixed by the cell."""
    cb = np.asarray(cb_correct, dtype=bool)
    rag = np.asarray(rag_correct, dtype=bool)
    method = np.asarray(method_correct, dtype=bool)
    if not (cb.shape == rag.shape == method.shape) or cb.ndim != 1:
        raise ValueError(f"vector lengths differ: {cb.shape}, {rag.shape}, {method.shape}")
    cells, members = {}, {}
    for c in (True, False):
        for r in (True, False):
            idx = np.flatnonzero((cb == c) & (rag == r))
            n = len(idx)
            acc = float(method[idx].mean()) if n else float("nan")
            base = float(r) if n else float("nan")
            cells[(c, r)] = QuadrantCell(c, r, n, acc, base, acc - base)
            members[(c, r)] = idx.tolist()
    return QuadrantReport(cells, members)


@dataclass
class SweepRow:
    key: object
    accuracy: float
    mean_rho_image: float
    correct: np.ndarray


def alpha_sweep(weights: ModelWeights, samples: Sequence[ToySample], alphas: Sequence[float],
                base: MixConfig = MixConfig()) -> list[SweepRow]:
    rows = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        r = evaluate(weights, samples, Variant.MADRAG, replace(base, alpha=float(a)))
        rows.append(SweepRow(float(a), r.accuracy, r.stats.mean_rho_image(), r.correct))
    return rows


def layer_sweep(weights: ModelWeights, samples: Sequence[ToySample], presets: Sequence[str],
                base: MixConfig = MixConfig()) -> list[SweepRow]:
    rows = []
    for p in presets:
        r = evaluate(weights, samples, Variant.MADRAG, replace(base, layers=p))
        rows.append(SweepRow(p, r.accuracy, r.stats.mean_rho_image(), r.correct))
    return rows


@dataclass
class ChunkSweepRow:
    chunks: int
    rag_accuracy: float
    madrag_accuracy: float
    rag_rho_image: float
    madrag_rho_image: float

    @property
    def gap(self) -> float:
        return self.madrag_accuracy - self.rag_accuracy


def context_quantity_sweep(weights: ModelWeights, cfg: ExperimentConfig,
                           chunk_counts: Sequence[int]) -> list[ChunkSweepRow]:
    rows = []
    for n in chunk_counts:
        if n < 0:
            raise ValueError("chunk counts must be >= 0")
        samples = cfg.eval_samples(chunks=n)
        rag = evaluate(weights, samples, Variant.VANILLA_RAG)
        mad = evaluate(weights, samples, Variant.MADRAG, cfg.mix)
        rows.append(ChunkSweepRow(n, rag.accuracy, mad.accuracy, rag.stats.mean_rho_image(),
                                  mad.stats.mean_rho_image()))
    return rows


@dataclass
class TimingRow:
    label: str
    seq_len: float
    mean_seconds: float
    ratio_vs_rag: float
    ratio_vs_matched: float


def _timed_inputs(sample: ToySample, label: str, weights: ModelWeights, mix: MixConfig):
    if label == "rag_matched":
        # vanilla layout padded with T filler context tokens: same length as the dual layout
        ctx = sample.context_tokens + [SEP] * len(sample.question_tokens)
        layout = build_layout(Variant.VANILLA_RAG, sample.vocab.n_cells,
                              len(sample.question_tokens), len(ctx))
        return layout, assemble_tokens(layout, sample.question_tokens, ctx), None
    variant = Variant.parse(label)
    layout = sample_layout(sample, variant)
    return layout, sample_tokens(sample, layout), make_hook(weights, layout, variant, mix)


def timing_benchmark(weights: ModelWeights, samples: Sequence[ToySample], mix: MixConfig = MixConfig(),
                     warmup: int = 3, repeats: int = 3) -> list[TimingRow]:
    """Mean wall-clock seconds per sample of greedy decoding (prefill + one token).

    Labels are timed interleaved per sample so drift hits every label alike;
    each sample's time is the minimum over ``repeats`` runs.
    """
    labels = ("rag", "rag_matched", "dualq", "madrag")
    prepared = [{lab: _timed_inputs(s, lab, weights, mix) for lab in labels} for s in samples]
    feats = [s.image_features for s in samples]
    for i in range(min(warmup, len(samples))):
        for lab in labels:
            lay, toks, hook = prepared[i][lab]
            decode(weights, lay, feats[i], toks, hook, 1)
    times = {lab: [] for lab in labels}
    lengths = {lab: [] for lab in labels}
    for i, prep in enumerate(prepared):
        order = labels[i % len(labels):] + labels[:i % len(labels)]
        best = {lab: float("inf") for lab in labels}
        for _ in range(repeats):
            for lab in order:
                lay, toks, hook = prep[lab]
                t0 = time.perf_counter()
                decode(weights, lay, feats[i], toks, hook, 1)
                best[lab] = min(best[lab], time.perf_counter() - t0)
        for lab in labels:
            times[lab].append(best[lab])
            lengths[lab].append(prep[lab][0].length)
    means = {lab: float(np.mean(times[lab])) for lab in labels}
    return [TimingRow(lab, float(np.mean(lengths[lab])), means[lab], means[lab] / means["rag"],
                      means[lab] / means["rag_matched"]) for lab in labels]


# -- the runner -------------------------------------------------------------------

@dataclass
class ResultBundle:
    out_dir: Path
    summary: dict
    results: dict[str, EvalResult]
    files: list[Path]
    weights: ModelWeights


def run_experiment(cfg: ExperimentConfig, weights: ModelWeights | None = None) -> ResultBundle:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    if weights is None:
        bundle = obtain_weights(cfg, out)
        weights, train_info = bundle.weights, bundle.train_info
        if (out / "model.npz").exists():
            files.append(out / "model.npz")
    else:
        train_info = {"provided": True}
    samples = cfg.eval_samples()
    results: dict[str, EvalResult] = {}
    for name in cfg.variants:
        v = Variant.parse(name)
        log.info("evaluating %s on %d samples", v.value, len(samples))
        results[v.value] = evaluate(weights, samples, v, cfg.mix if v is Variant.MADRAG else None,
                                    keep_traces=True)

    summary = {"seed": cfg.seed, "config_hash": cfg.config_hash(), "version": __version__,
               "config": cfg.to_dict(), "train": train_info, "variants": {}}
    table = []
    for name, r in results.items():
        table.append((name, len(r.correct), r.accuracy, r.stats.mean_rho_image(),
                      r.stats.mean_rho_context()))
        summary["variants"][name] = {"accuracy": r.accuracy,
                                     "mean_rho_image": r.stats.mean_rho_image(),
                                     "mean_rho_context": r.stats.mean_rho_context(),
                                     "n": int(len(r.correct))}
    files.append(write_csv(out / "variants.csv",
                           ("variant", "n", "accuracy", "mean_rho_image", "mean_rho_context"), table, cfg))
    per_sample = []
    stats_rows = []
    by_id = {s.sample_id: s for s in samples}
    for name, r in results.items():
        for sid, pred, ok, e in zip(r.sample_ids, r.predictions, r.correct, r.stats.entries):
            per_sample.append((sid, name, by_id[sid].answer_token, " ".join(map(str, pred)), ok))
            stats_rows.append((sid, name, e.step, e.layer, e.rho_image, e.rho_context))
    per_sample.sort(key=lambda x: (x[0], x[1]))
    stats_rows.sort(key=lambda x: (x[0], x[1]))
    files.append(write_csv(out / "per_sample.csv",
                           ("sample_id", "variant", "answer", "prediction", "correct"), per_sample, cfg))
    stats_path = out / "stats.csv"
    write_stats_csv(stats_path, stats_rows, _provenance(cfg))
    files.append(stats_path)
    files += _write_diagnostics(cfg, results, out)

    if "rag" in results and "closedbook" in results:
        cb, rag = summary["variants"]["closedbook"], summary["variants"]["rag"]
        if cb["mean_rho_image"] > 0:
            summary["rho_image_relative_drop"] = 1.0 - rag["mean_rho_image"] / cb["mean_rho_image"]

    if "quadrant" in cfg.reports:
        need = {"closedbook", "rag", "madrag"}
        if not need <= set(results):
            raise ExperimentError(f"quadrant report needs variants {sorted(need)}")
        q = quadrant_analysis(results["closedbook"].correct, results["rag"].correct,
                              results["madrag"].correct)
        files.append(write_csv(out / "quadrant.csv", QUADRANT_COLUMNS, q.rows(), cfg))
        summary["quadrant"] = [dict(zip(QUADRANT_COLUMNS, r)) for r in q.rows()]

    if "sweep" in cfg.reports:
        rows = alpha_sweep(weights, samples, cfg.alphas, cfg.mix)
        rag_acc = results["rag"].accuracy if "rag" in results else \
            evaluate(weights, samples, Variant.VANILLA_RAG).accuracy
        files.append(write_csv(out / "alpha_sweep.csv",
                               ("alpha", "accuracy", "mean_rho_image", "rag_accuracy"),
                               [(r.key, r.accuracy, r.mean_rho_image, rag_acc) for r in rows], cfg))
        summary["alpha_sweep"] = {str(r.key): r.accuracy for r in rows}
        lrows = layer_sweep(weights, samples, cfg.layer_presets, cfg.mix)
        files.append(write_csv(out / "layer_sweep.csv", ("layers", "accuracy", "mean_rho_image"),
                               [(r.key, r.accuracy, r.mean_rho_image) for r in lrows], cfg))
        summary["layer_sweep"] = {str(r.key): r.accuracy for r in lrows}
        crows = context_quantity_sweep(weights, cfg, cfg.chunk_counts)
        files.append(write_csv(out / "chunk_sweep.csv",
                               ("chunks", "rag_accuracy", "madrag_accuracy", "gap",
                                "rag_rho_image", "madrag_rho_image"),
                               [(r.chunks, r.rag_accuracy, r.madrag_accuracy, r.gap,
                                 r.rag_rho_image, r.madrag_rho_image) for r in crows], cfg))
        summary["chunk_sweep"] = {str(r.chunks): {"rag": r.rag_accuracy, "madrag": r.madrag_accuracy}
                                  for r in crows}

    if "timing" in cfg.reports:
        tsamples = samples[: cfg.timing_samples]
        trows = timing_benchmark(weights, tsamples, cfg.mix, cfg.timing_warmup)
        # wall-clock numbers are not reproducible; kept out of the deterministic tables
        files.append(write_csv(out / "timing.csv",
                               ("label", "seq_len", "mean_seconds", "ratio_vs_rag", "ratio_vs_matched"),
                               [(r.label, r.seq_len, r.mean_seconds, r.ratio_vs_rag, r.ratio_vs_matched)
                                for r in trows], cfg))
        summary["timing"] = {r.label: asdict(r) for r in trows}

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(_finite(summary), indent=2, sort_keys=True,
                                       default=_json_default, allow_nan=False))
    files.append(summary_path)
    return ResultBundle(out, summary, results, files, weights)


def _finite(o):
    """NaN (empty quadrant cells) becomes null so the file stays strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, (float, np.floating)) and not np.isfinite(o):
        return None
    return o


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_diagnostics(cfg: ExperimentConfig, results: dict[str, EvalResult], out: Path) -> list[Path]:
    """Heatmaps of last-layer image attention and top context tokens for a few samples."""
    hm_dir = out / "heatmaps"
    hm_dir.mkdir(exist_ok=True)
    files = []
    sink = SinkFilterConfig(cfg.sink_threshold)
    prov = _provenance(cfg)
    top_rows = []
    for name, r in results.items():
        for sid, (trace, layout, toks) in list(zip(r.sample_ids, r.traces or []))[: cfg.heatmap_samples]:
            img = layout.span(SegmentKind.IMAGE)
            row = query_row(layout, 1)
            hm = export_heatmap(trace.attention[-1][:, row, img.start:img.stop],
                                cfg.grid_rows, cfg.grid_cols, sink)
            for ext, writer in (("pgm", hm.to_pgm), ("csv", hm.to_csv)):
                files.append(hm_dir / f"{name}_{sid}.{ext}")
                writer(files[-1], prov)
            if layout.span(SegmentKind.CONTEXT).length:
                for pos, tok, mass in top_context_tokens(trace, layout, toks, k=3):
                    top_rows.append((sid, name, pos, tok, mass))
    if top_rows:
        files.append(write_csv(out / "top_context.csv",
                               ("sample_id", "variant", "position", "token", "mass"), top_rows, cfg))
    return files


# -- directional claims and the seed panel --------------------------------------------

def directional_checks(summary: dict) -> dict[str, bool]:
    """Pass/fail of the directional claims that a summary has the data for."""
    v = summary["variants"]
    out = {}
    if {"closedbook", "rag"} <= set(v):
        out["rho_image_rag_below_closedbook"] = v["rag"]["mean_rho_image"] < v["closedbook"]["mean_rho_image"]
        out["acc_rag_below_closedbook"] = v["rag"]["accuracy"] < v["closedbook"]["accuracy"]
    if {"rag", "madrag"} <= set(v):
        out["acc_madrag_at_least_rag"] = v["madrag"]["accuracy"] >= v["rag"]["accuracy"]
    if "alpha_sweep" in summary and "rag" in v:
        low = [acc for a, acc in summary["alpha_sweep"].items() if 0.1 <= float(a) <= 0.5]
        out["alpha_sweep_at_least_rag"] = bool(low) and all(acc >= v["rag"]["accuracy"] for acc in low)
    if "chunk_sweep" in summary:
        rag = [summary["chunk_sweep"][c]["rag"] for c in sorted(summary["chunk_sweep"], key=int)]
        out["rag_non_increasing_in_chunks"] = all(b <= a for a, b in zip(rag, rag[1:]))
    return out


def robustness_panel(base: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> dict:
    """Run ``base`` once per seed; report each directional claim's pass count."""
    per_seed = {}
    for s in seeds:
        cfg = replace(base, seed=s, out_dir=str(Path(base.out_dir) / f"seed{s}"), checkpoint=None)
        summary = run_experiment(cfg).summary
        per_seed[s] = {"checks": directional_checks(summary),
                       "accuracy": {k: v["accuracy"] for k, v in summary["variants"].items()}}
    claims = sorted({c for r in per_seed.values() for c in r["checks"]})
    counts = {c: sum(r["checks"].get(c, False) for r in per_seed.values()) for c in claims}
    return {"seeds": list(seeds), "passes": counts, "per_seed": per_seed}
