import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmix.cli import main
from attnmix.experiments import (
    ExperimentConfig, ExperimentError, alpha_sweep, context_quantity_sweep, directional_checks,
    quadrant_analysis, run_experiment, timing_benchmark,
)
from attnmix.intervention import MixConfig
from attnmix.layout import LayoutError
from attnmix.toytask import evaluate
from attnmix.transformer import save_weights


def small_cfg(tmp_path, **kw):
    base = dict(n_eval=12, chunks_per_sample=2, out_dir=str(tmp_path / "out"), heatmap_samples=2,
                train_model=False)
    base.update(kw)
    return ExperimentConfig(**base)


def read_table(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- config -------------------------------------------------------------------------

def test_config_roundtrip_and_hash():
    cfg = ExperimentConfig(seed=3, mix=MixConfig(alpha=0.2, layers=(0,), form="strict"))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()
    assert ExperimentConfig(seed=3, out_dir="elsewhere").config_hash() == ExperimentConfig(seed=3).config_hash()
    assert ExperimentConfig(seed=4).config_hash() != ExperimentConfig(seed=3).config_hash()


def test_config_rejects_bad_fields():
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({"sede": 1})
    with pytest.raises(ExperimentError):
        ExperimentConfig(reports=["plot"])
    with pytest.raises(ExperimentError):
        ExperimentConfig(alphas=[1.5])
    with pytest.raises(ValueError):
        ExperimentConfig(variants=["rag", "openbook"])


def test_seed_streams_differ():
    a, b = ExperimentConfig(seed=0), ExperimentConfig(seed=1)
    assert len({a.train_seed, a.eval_seed, b.train_seed, b.eval_seed}) == 4


# -- quadrants ----------------------------------------------------------------------

def test_quadrant_each_cell_once():
    q = quadrant_analysis([1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0])
    assert all(c.n == 1 for c in q.cells.values())
    assert q.cells[(True, False)].tag == "attention-distraction cases"
    assert [c.tag for k, c in q.cells.items() if k != (True, False)] == ["", "", ""]


def test_quadrant_method_equal_to_rag_gives_zero_deltas():
    rag = [1, 0, 1, 1, 0, 0]
    q = quadrant_analysis([1, 1, 0, 0, 1, 0], rag, rag)
    assert all(c.delta == 0.0 for c in q.cells.values() if c.n)


def test_quadrant_length_mismatch():
    with pytest.raises(ValueError):
        quadrant_analysis([1, 0], [1, 0, 1], [0, 0])


def test_quadrant_empty_cell_is_nan():
    q = quadrant_analysis([1, 1], [1, 1], [1, 0])
    assert q.cells[(False, False)].n == 0
    assert np.isnan(q.cells[(False, False)].delta)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_quadrant_partitions_samples(bits):
    cb, rag, m = map(list, zip(*bits))
    q = quadrant_analysis(cb, rag, m)
    assert q.total == len(bits)
    seen = sorted(i for members in q.members.values() for i in members)
    assert seen == list(range(len(bits)))
    for (c, r), members in q.members.items():
        assert all(cb[i] == c and rag[i] == r for i in members)
        if members:
            assert q.cells[(c, r)].method_accuracy == pytest.approx(np.mean([m[i] for i in members]))


# -- sweeps ---------------------------------------------------------------------------

def test_alpha_zero_row_matches_dualq(random_weights, rag_samples):
    rows = alpha_sweep(random_weights, rag_samples, [0.0])
    base = evaluate(random_weights, rag_samples, "dualq")
    assert len(rows) == 1
    assert rows[0].accuracy == base.accuracy
    np.testing.assert_array_equal(rows[0].correct, base.correct)


def test_alpha_sweep_rows_and_range(random_weights, rag_samples):
    alphas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    rows = alpha_sweep(random_weights, rag_samples[:4], alphas)
    assert [r.key for r in rows] == alphas
    with pytest.raises(ValueError):
        alpha_sweep(random_weights, rag_samples[:2], [-0.1])


def test_chunk_sweep_zero_is_closed_book(random_weights, tmp_path):
    cfg = small_cfg(tmp_path)
    rows = context_quantity_sweep(random_weights, cfg, [0, 2])
    cb = evaluate(random_weights, cfg.eval_samples(chunks=0), "closedbook")
    assert rows[0].rag_accuracy == cb.accuracy
    assert rows[0].rag_rho_image == pytest.approx(cb.stats.mean_rho_image(), abs=1e-12)
    assert rows[1].gap == rows[1].madrag_accuracy - rows[1].rag_accuracy
    with pytest.raises(ValueError):
        context_quantity_sweep(random_weights, cfg, [-1])


def test_chunk_sweep_overflow(random_weights, tmp_path):
    with pytest.raises(LayoutError):
        context_quantity_sweep(random_weights, small_cfg(tmp_path), [40])


def test_timing_table(random_weights, rag_samples):
    rows = {r.label: r for r in timing_benchmark(random_weights, rag_samples[:4], warmup=1, repeats=1)}
    assert rows["rag"].ratio_vs_rag == 1.0
    assert rows["rag_matched"].ratio_vs_matched == 1.0
    assert rows["madrag"].seq_len == rows["rag_matched"].seq_len == rows["rag"].seq_len + 3


# -- runner -----------------------------------------------------------------------------

def test_closed_book_context_ratio_column_is_zero(random_weights, tmp_path):
    cfg = small_cfg(tmp_path, chunks_per_sample=0, variants=["closedbook"])
    run_experiment(cfg, random_weights)
    rows = read_table(tmp_path / "out" / "stats.csv")
    assert len(rows) == cfg.n_eval
    assert all(float(r["rho_context"]) == 0.0 for r in rows)


def test_dualq_and_alpha_zero_identical(random_weights, tmp_path):
    cfg = small_cfg(tmp_path, variants=["dualq", "madrag"], mix=MixConfig(alpha=0.0))
    res = run_experiment(cfg, random_weights).results
    np.testing.assert_array_equal(res["dualq"].correct, res["madrag"].correct)
    assert res["dualq"].predictions == res["madrag"].predictions


def test_full_run_emits_files(random_weights, tmp_path):
    cfg = small_cfg(tmp_path, reports=["table", "quadrant", "sweep", "timing"], timing_samples=3,
                    timing_warmup=1, chunk_counts=[0, 1])
    bundle = run_experiment(cfg, random_weights)
    out = tmp_path / "out"
    for name in ("variants.csv", "per_sample.csv", "stats.csv", "top_context.csv", "quadrant.csv",
                 "alpha_sweep.csv", "layer_sweep.csv", "chunk_sweep.csv", "timing.csv", "summary.json"):
        assert (out / name).exists(), name
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 5 * 2
    head = f"# seed=0\n# config_hash={cfg.config_hash()}\n# version="
    for f in bundle.files:
        if f.suffix == ".csv":
            assert f.read_text().startswith(head), f
        elif f.suffix == ".pgm":
            assert f.read_text().startswith("P2\n" + head), f
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 0 and summary["config_hash"] == cfg.config_hash()
    assert set(summary["variants"]) == {"closedbook", "rag", "swap", "dualq", "madrag"}
    per_sample = read_table(out / "per_sample.csv")
    keys = [(int(r["sample_id"]), r["variant"]) for r in per_sample]
    assert keys == sorted(keys) and len(keys) == 5 * cfg.n_eval


def test_rerun_is_byte_identical(random_weights, tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = small_cfg(tmp_path, out_dir=str(tmp_path / name), reports=["table", "quadrant"])
        run_experiment(cfg, random_weights)
        outs.append(tmp_path / name)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        if rel.name != "summary.json":
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_missing_checkpoint_without_training(tmp_path):
    cfg = small_cfg(tmp_path, checkpoint=str(tmp_path / "nope.npz"))
    with pytest.raises(ExperimentError):
        run_experiment(cfg)


def test_quadrant_report_requires_variants(random_weights, tmp_path):
    with pytest.raises(ExperimentError):
        run_experiment(small_cfg(tmp_path, variants=["rag"], reports=["quadrant"]), random_weights)


def test_directional_checks_on_synthetic_summary():
    v = lambda acc, rho: {"accuracy": acc, "mean_rho_image": rho}
    summary = {"variants": {"closedbook": v(0.9, 0.5), "rag": v(0.4, 0.3), "madrag": v(0.4, 0.4)},
               "alpha_sweep": {"0.0": 0.1, "0.1": 0.5, "0.5": 0.39},
               "chunk_sweep": {"0": {"rag": 0.9}, "2": {"rag": 0.5}, "10": {"rag": 0.5}}}
    assert directional_checks(summary) == {
        "rho_image_rag_below_closedbook": True, "acc_rag_below_closedbook": True,
        "acc_madrag_at_least_rag": True, "alpha_sweep_at_least_rag": False,
        "rag_non_increasing_in_chunks": True}
    assert directional_checks({"variants": {"rag": v(0.1, 0.1)}}) == {}


# -- CLI ------------------------------------------------------------------------------------

def test_cli_success(random_weights, tmp_path, capsys):
    ckpt = tmp_path / "w.npz"
    save_weights(ckpt, random_weights)
    code = main(["--mode", "rag", "--mode", "madrag", "--alpha", "0.3", "--layers", "0,1",
                 "--checkpoint", str(ckpt), "--no-train", "--n-eval", "5", "--chunks", "1",
                 "--distractor-frac", "1", "--out", str(tmp_path / "cli")])
    assert code == 0
    text = capsys.readouterr().out
    assert "madrag" in text and "rag" in text
    summary = json.loads((tmp_path / "cli" / "summary.json").read_text())
    assert summary["config"]["mix"] == {"alpha": 0.3, "layers": [0, 1], "form": "output"}
    assert summary["config"]["distractor_fraction"] == 1.0


def test_cli_config_file_and_override(random_weights, tmp_path):
    ckpt = tmp_path / "w.npz"
    save_weights(ckpt, random_weights)
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"n_eval": 4, "variants": ["closedbook"], "checkpoint": str(ckpt),
                                "train_model": False, "seed": 5}))
    assert main(["--config", str(conf), "--seed", "2", "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["seed"] == 2 and summary["config"]["n_eval"] == 4


def test_cli_error_is_json(tmp_path, capsys):
    code = main(["--checkpoint", str(tmp_path / "missing.npz"), "--no-train", "--out", str(tmp_path / "x")])
    assert code != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ExperimentError" and "missing.npz" in err["message"]


def test_cli_bad_layers(tmp_path, capsys):
    assert main(["--layers", "first", "--out", str(tmp_path / "x")]) != 0
    assert "layers" in json.loads(capsys.readouterr().err)["message"]


def test_module_entry_point_help():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "attnmix", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--distractor-frac" in r.stdout
