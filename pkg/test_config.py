#!/usr/bin/env python3
"""
Layered run configuration: file parsing, overrides, validation and fingerprints.
"""

import pytest

from negrank.config import RunConfig, build_config, input_digest, load_config, parse_config_lines, to_flat
from negrank.corpus import Filler
from negrank.errors import ConfigError
from negrank.losses import FineMode
from negrank.tagger import PrimitiveClass


def test_defaults():
    cfg = RunConfig()
    assert cfg.forge.ratios == (0.25, 0.5, 0.75)
    assert cfg.forge.filler is Filler.LEXICON
    assert cfg.loss.margins == (0.25, 0.25, 0.25, 0.25)
    assert cfg.loss.mode is FineMode.RELATIVE
    assert cfg.eval.iou_thresholds == (0.5, 0.7)
    assert cfg.seeds == (0,)


def test_parse_config_lines():
    lines = [
        "# comment",
        "",
        "loss.h1 = 0.5   # inline",
        "forge.ratios = 0.2, 0.4, 0.6",
        "seeds=0,1,2",
    ]
    assert parse_config_lines(lines) == {"loss.h1": "0.5", "forge.ratios": "0.2, 0.4, 0.6", "seeds": "0,1,2"}
    with pytest.raises(ConfigError):
        parse_config_lines(["loss.h1 0.5"])
    with pytest.raises(ConfigError):
        parse_config_lines([" = 3"])


def test_overrides_win_over_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("loss.h1 = 0.5\nloss.h2 = 3.0\nforge.excluded_classes = prep, adv\n", encoding="utf-8")
    cfg = load_config(path, {"loss.h2": "4.0", "seeds": "5, 6"})
    assert cfg.loss.h1 == 0.5
    assert cfg.loss.h2 == 4.0
    assert cfg.seeds == (5, 6)
    assert cfg.forge.excluded_classes == (PrimitiveClass.PREP, PrimitiveClass.ADV)


def test_none_and_empty_values():
    cfg = build_config({"train.clip_norm": "none", "forge.excluded_classes": ""})
    assert cfg.train.clip_norm is None
    assert cfg.forge.excluded_classes == ()


def test_invalid_values_name_the_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        build_config({"loss.nonsense": "1"})
    assert info.value.key == "loss.nonsense"
    with pytest.raises(ConfigError) as info:
        build_config({"loss.q": "0"})
    assert info.value.key == "loss.q"
    with pytest.raises(ConfigError):
        build_config({"loss.margins": "0.1, 0.2"})
    with pytest.raises(ConfigError):
        build_config({"a.b.c": "1"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_flat_form_round_trips():
    cfg = build_config({
        "loss.mode": "absolute",
        "loss.fine_terms": "true, true, false, true",
        "train.clip_norm": "none",
        "synth.composition_types": "verb-noun, adj-noun",
        "seeds": "1, 2",
    })
    assert build_config(to_flat(cfg)) == cfg
    assert build_config(to_flat(RunConfig())) == RunConfig()


def test_fingerprint_tracks_effective_values(tmp_path):
    a = build_config({"loss.h1": "1.0"})
    b = build_config({"loss.h1": "1"})
    c = build_config({"loss.h1": "2.0"})
    assert a.fingerprint() == b.fingerprint() == RunConfig().fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert a.run_dir(tmp_path, "train") == tmp_path / f"train-{a.fingerprint()}"


def test_objective_carries_the_loss_section():
    cfg = build_config({"loss.margins": "0.1, 0.3, 0.5, 0.7", "loss.mode": "absolute", "loss.use_inter": "false"})
    objective = cfg.loss.objective()
    assert (objective.fine.m0, objective.fine.m3) == (0.1, 0.7)
    assert objective.fine.mode is FineMode.ABSOLUTE
    assert objective.coarse.use_inter is False


def test_run_dir_includes_an_input_digest(tmp_path):
    cfg = RunConfig()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    a.write_text("first\n", encoding="utf-8")
    b.write_text("second\n", encoding="utf-8")
    assert cfg.run_dir(tmp_path, "forge", [a]) != cfg.run_dir(tmp_path, "forge", [b])
    assert cfg.run_dir(tmp_path, "forge", [a]) == cfg.run_dir(tmp_path, "forge", [a])
    assert cfg.run_dir(tmp_path, "forge", [a]).name.startswith(f"forge-{cfg.fingerprint()}-")

    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "train.jsonl").write_text("x\n", encoding="utf-8")
    before = input_digest([corpus])
    (corpus / "train.jsonl").write_text("y\n", encoding="utf-8")
    assert input_digest([corpus]) != before
    assert cfg.run_dir(tmp_path, "train", [None]) == cfg.run_dir(tmp_path, "train")
