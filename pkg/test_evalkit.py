#!/usr/bin/env python3
"""
Metrics, ordering diagnostics, the forge-train-evaluate pipeline and the ablation harness.
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from negrank import evalkit, plots
from negrank.config import build_config
from negrank.corpus import ClipSpan, MomentSpan, Split
from negrank.errors import ConfigError, EmptyGrid, EmptyPredictions, MissingFile, MissingTrack
from negrank.evalkit import (
    AblationCell,
    EvalReport,
    hierarchy_violation_rate,
    iou_1d,
    mean_iou,
    ordering_accuracy,
    pooled_record,
    recall_at,
    resolve_grid,
)
from negrank.losses import ROLES
from negrank.synthgen import gen_corpus, write_corpus
from negrank.toymodel import ModelConfig, ModelParams, TrainingExample, Vocabulary

TINY_SETTINGS = {
    "synth.n_train": "20",
    "synth.n_test": "4",
    "synth.T": "8",
    "synth.d_v": "4",
    "synth.min_span": "2",
    "synth.max_span": "4",
    "train.epochs": "1",
    "train.batch": "4",
    "train.d_e": "4",
    "train.d_h": "8",
    "train.n_queries": "2",
}


@pytest.fixture(scope="module")
def tiny_cfg():
    return build_config(TINY_SETTINGS)


@pytest.fixture(scope="module")
def tiny_corpus(tiny_cfg):
    return gen_corpus(tiny_cfg.synth, seed=0)


def _record(*values):
    return dict(zip(ROLES, values))


def test_iou_1d():
    assert iou_1d((0, 10), (0, 10)) == pytest.approx(1.0)
    assert iou_1d((0, 10), (5, 15)) == pytest.approx(5 / 15)
    assert iou_1d((0, 4), (6, 8)) == 0.0
    assert iou_1d(MomentSpan(start=2.0, end=4.0), (3.0, 4.0)) == pytest.approx(0.5)


def test_recall_at_uses_strict_threshold():
    gts = [(0.0, 10.0), (0.0, 10.0)]
    preds = [[(0.0, 5.0)], [(0.0, 10.0)]]
    assert recall_at(preds, gts, n=1, m=0.5) == pytest.approx(0.5)
    assert recall_at(preds, gts, n=1, m=0.4) == pytest.approx(1.0)


def test_recall_at_top_n():
    gts = [(0.0, 10.0)]
    preds = [[(20.0, 30.0), (1.0, 10.0)]]
    assert recall_at(preds, gts, n=1, m=0.5) == 0.0
    assert recall_at(preds, gts, n=2, m=0.5) == 1.0


def test_recall_is_monotone_in_threshold():
    rng = np.random.default_rng(0)
    gts, preds = [], []
    for _ in range(50):
        s = rng.uniform(0, 20)
        gts.append((s, s + rng.uniform(1, 10)))
        ranked = []
        for _ in range(3):
            p = rng.uniform(0, 20)
            ranked.append((p, p + rng.uniform(1, 10)))
        preds.append(ranked)
    values = [recall_at(preds, gts, n=1, m=m) for m in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert values == sorted(values, reverse=True)
    assert recall_at(preds, gts, n=3, m=0.5) >= recall_at(preds, gts, n=1, m=0.5)


def test_recall_rejects_empty_predictions():
    with pytest.raises(EmptyPredictions):
        recall_at([], [])
    with pytest.raises(EmptyPredictions):
        recall_at([[]], [(0.0, 1.0)])
    with pytest.raises(EmptyPredictions):
        recall_at([[(0.0, 1.0)]], [(0.0, 1.0), (1.0, 2.0)])


def test_mean_iou():
    assert mean_iou([(0, 10), (0, 5)], [(0, 10), (0, 10)]) == pytest.approx(0.75)
    with pytest.raises(EmptyPredictions):
        mean_iou([], [])


def test_ordering_accuracy_and_violation_rate():
    records = [
        _record(0.9, 0.7, 0.5, 0.3, 0.1),
        _record(0.9, 0.5, 0.7, 0.3, 0.1),
    ]
    assert ordering_accuracy(records) == pytest.approx(0.5)
    assert hierarchy_violation_rate(records) == pytest.approx(1 / 8)


def test_ties_count_as_violations():
    records = [_record(0.5, 0.5, 0.5, 0.5, 0.5)]
    assert ordering_accuracy(records) == 0.0
    assert hierarchy_violation_rate(records) == pytest.approx(1.0)


def test_ordering_needs_every_track():
    with pytest.raises(MissingTrack):
        ordering_accuracy([{"S_p": 1.0, "S_hn1": 0.5}])
    with pytest.raises(EmptyPredictions):
        hierarchy_violation_rate([])


def test_pooled_record_averages_top_in_span_clips():
    base = np.zeros(6)
    tracks = {role: base + 0.1 * (len(ROLES) - i) for i, role in enumerate(ROLES)}
    tracks["S_p"] = np.array([0.0, 0.8, 0.4, 0.6, 0.0, 0.0])
    record = pooled_record(tracks, ClipSpan(1, 5), q=2)
    assert record["S_p"] == pytest.approx(0.7)
    assert record["S_n"] == pytest.approx(0.1)
    assert ordering_accuracy([record]) == 1.0


def test_eval_report_rejects_values_outside_unit_interval():
    EvalReport(splits={"novel_word": {"mIoU": 0.3}}, fingerprint="abc", seed=0)
    with pytest.raises(ValidationError):
        EvalReport(splits={"novel_word": {"mIoU": 1.3}}, fingerprint="abc", seed=0)


def test_resolve_grid_presets():
    coarse = resolve_grid("coarse")
    assert [cell.label for cell in coarse][0] == "base"
    assert len(coarse) == 4
    assert len(resolve_grid("fine")) == 9
    assert len(resolve_grid("coarse, modes")) == 6
    absolute = next(cell for cell in resolve_grid("modes") if cell.label == "absolute")
    assert absolute.overrides["loss.mode"] == "absolute"
    with pytest.raises(ConfigError):
        resolve_grid("coarse, nonsense")


def test_every_preset_builds_a_valid_config(tiny_cfg):
    for name in evalkit.PRESETS:
        for cell in resolve_grid(name):
            evalkit._cell_config(tiny_cfg, cell)


def test_ablate_rejects_empty_grid(tmp_path, tiny_cfg):
    with pytest.raises(EmptyGrid):
        evalkit.ablate([], tmp_path / "corpus", [0], tiny_cfg, tmp_path / "out")
    with pytest.raises(EmptyGrid):
        evalkit.ablate("coarse", tmp_path / "corpus", [], tiny_cfg, tmp_path / "out")


def test_plot_data_and_files(tmp_path):
    cfg = ModelConfig(d_v=3, d_e=4, d_h=8, n_queries=2)
    params = ModelParams.init(cfg, 6, seed=1)
    example = TrainingExample(
        sample_id="train_00000",
        features=np.random.default_rng(2).normal(size=(6, 3)),
        span=ClipSpan(1, 4),
        roles=((0, 1, 2), (0, 3, 2), (0, 3, 4), (0, 3, 5), (0, 1, 5)),
    )
    texts = ["a", "b", "c", "d", "e"]
    data = evalkit.plot_data(params, example, texts)
    assert data["span"] == [1, 4]
    assert set(data["tracks"]) == set(ROLES)
    assert all(len(track) == 6 for track in data["tracks"].values())
    assert data["queries"]["S_n"] == "e"

    path = plots.write_plot_data(data, tmp_path / "plots" / "train_00000.json")
    assert plots.read_plot_data(path) == json.loads(json.dumps(data))
    svg = plots.render_svg(data, tmp_path / "plots" / "train_00000.svg")
    assert svg.read_text(encoding="utf-8").lstrip().startswith("<?xml")

    del data["tracks"]["S_hn2"]
    with pytest.raises(MissingTrack):
        plots.write_plot_data(data, tmp_path / "broken.json")
    with pytest.raises(MissingFile):
        plots.read_plot_data(tmp_path / "absent.json")


def test_split_metrics_need_easy_negatives(tiny_cfg):
    params = ModelParams.init(ModelConfig(d_v=3, d_e=4, d_h=8, n_queries=2), 6, seed=1)
    example = TrainingExample(
        sample_id="s",
        features=np.zeros((6, 3)),
        span=ClipSpan(1, 4),
        roles=((0, 1, 2), (0, 3, 2), (0, 3, 4), (0, 3, 5)),
    )
    with pytest.raises(ValueError):
        evalkit.split_metrics(params, [example], tiny_cfg)


def test_pipeline_trains_and_reports_every_test_split(tmp_path, tiny_cfg, tiny_corpus):
    report, result = evalkit.run_pipeline(tiny_cfg, tiny_corpus, seed=0, out_dir=tmp_path)
    assert set(report.splits) == {"test_trivial", "novel_composition", "novel_word"}
    for metrics in report.splits.values():
        assert set(metrics) == {"R1@0.5", "R1@0.7", "mIoU", "ordering_accuracy", "hierarchy_violation_rate"}
        assert metrics["R1@0.7"] <= metrics["R1@0.5"]
    assert set(report.composition_miou) == {"verb-noun"}
    assert report.fingerprint == tiny_cfg.fingerprint()
    assert result.checkpoint.is_file()
    assert (tmp_path / "negatives.jsonl").is_file()
    saved = EvalReport.model_validate_json((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert saved == report


def test_pipeline_is_deterministic(tmp_path, tiny_cfg, tiny_corpus):
    first, _ = evalkit.run_pipeline(tiny_cfg, tiny_corpus, seed=1, out_dir=tmp_path / "a")
    second, _ = evalkit.run_pipeline(tiny_cfg, tiny_corpus, seed=1, out_dir=tmp_path / "b")
    assert first == second


def test_ablation_marks_failed_cells_and_continues(tmp_path, tiny_cfg, tiny_corpus):
    corpus_dir = write_corpus(tiny_corpus, tmp_path / "corpus")
    unwritable = tmp_path / "cache-is-a-directory"
    unwritable.mkdir()
    grid = [
        AblationCell("base", {"loss.use_coarse": "false", "loss.use_fine": "false"}),
        AblationCell("unwritable cache", {"forge.cache": str(unwritable)}),
    ]
    table = evalkit.ablate(grid, corpus_dir, [0, 1], tiny_cfg, tmp_path / "ablation")
    base, broken = table.rows
    assert "failed" not in base
    assert set(base["mean"]) == {"test_trivial", "novel_composition", "novel_word"}
    assert base["std"]["novel_word"]["mIoU"] >= 0.0
    assert set(broken["failed"]) == {"0", "1"}
    assert "IoFailure" in broken["failed"]["0"]
    assert "FAILED" in table.render()
    saved = json.loads((tmp_path / "ablation" / "ablation.json").read_text(encoding="utf-8"))
    assert saved["seeds"] == [0, 1]
    assert (tmp_path / "ablation" / "ablation.txt").is_file()


def test_evaluate_skips_splits_without_hierarchies(tmp_path, tiny_cfg, tiny_corpus):
    _, result = evalkit.run_pipeline(tiny_cfg, tiny_corpus, seed=0, out_dir=tmp_path)
    hierarchies = evalkit.prepare_hierarchies(tiny_corpus, tiny_cfg, 0, tmp_path / "negatives.jsonl", [Split.NOVEL_WORD])
    report = evalkit.evaluate(result.params, tiny_corpus, hierarchies, Vocabulary(tiny_corpus.vocabulary()), tiny_cfg, 0)
    assert set(report.splits) == {"novel_word"}
    assert report.composition_miou == {}


def test_ablation_skips_llm_cells_without_a_key(tmp_path, tiny_cfg, tiny_corpus, monkeypatch, caplog):
    monkeypatch.delenv("NEGRANK_TEST_MISSING_KEY", raising=False)
    corpus_dir = write_corpus(tiny_corpus, tmp_path / "corpus")
    grid = [
        AblationCell("base", {"loss.use_coarse": "false", "loss.use_fine": "false"}),
        AblationCell("llm without key", {"forge.filler": "llm", "llm.api_key_env": "NEGRANK_TEST_MISSING_KEY"}),
    ]
    with caplog.at_level("WARNING", logger="negrank.evalkit"):
        table = evalkit.ablate(grid, corpus_dir, [0], tiny_cfg, tmp_path / "ablation")
    base, llm = table.rows
    assert "mean" in base
    assert "failed" not in llm and "mean" not in llm
    assert "NEGRANK_TEST_MISSING_KEY" in llm["skipped"]
    assert "Skipping ablation cell 'llm without key'" in caplog.text
    assert "SKIPPED" in table.render()
    assert not list((tmp_path / "ablation").glob("cell01-*"))
