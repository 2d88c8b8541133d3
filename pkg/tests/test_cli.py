import hashlib
import json

import pytest

from refexp.cli import EXIT_CODES, main
from refexp.data import write_features

from conftest import make_doc


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "usage: refexp" in out
    for sub in ("data", "synth", "train", "comprehend", "generate", "eval", "report"):
        assert sub in out


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "synth", "--out-dir", "x", "--frobnicate")
    assert code == 2
    assert err.startswith("error: usage:") and len(err.strip().splitlines()) == 1


def test_exit_code_table_is_complete():
    assert sorted(EXIT_CODES) == [0, 1, 2, 3, 4]


def test_corrupt_feature_file(capsys, tmp_path, small_doc):
    doc, feats = small_doc
    (tmp_path / "a.json").write_text(json.dumps(doc))
    write_features(tmp_path / "f.rfea", feats)
    blob = (tmp_path / "f.rfea").read_bytes()
    (tmp_path / "f.rfea").write_bytes(blob[:-3])
    code, _, err = run(capsys, "data", "validate", tmp_path / "a.json", tmp_path / "f.rfea")
    assert code == 3
    assert err.startswith("error: feature-integrity:")


def test_integrity_and_io_categories(capsys, tmp_path, small_doc):
    doc, feats = small_doc
    doc["refs"].append({"id": 9, "ann_id": 77, "raw": "ghost"})
    (tmp_path / "a.json").write_text(json.dumps(doc))
    write_features(tmp_path / "f.rfea", feats)
    code, _, err = run(capsys, "data", "validate", tmp_path / "a.json", tmp_path / "f.rfea")
    assert (code, err.split(":")[1].strip()) == (3, "annotation-integrity")
    code, _, err = run(capsys, "data", "validate", tmp_path / "missing.json", tmp_path / "f.rfea")
    assert code in (1, 3) and err.startswith("error: ")


def test_bad_config_value(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"relative_fraction": 4}))
    code, _, err = run(capsys, "synth", "--config", tmp_path / "c.json", "--out-dir", tmp_path / "o")
    assert code == 2 and err.startswith("error: config:")


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pipeline(capsys, root):
    d, m, e = root / "data", root / "model", root / "eval"
    data = ["--annotations", d / "synth.json", "--features", d / "synth.rfea", "--split-file", d / "split.json"]
    root.mkdir(parents=True)
    (root / "train.json").write_text(json.dumps({"epochs": 2, "word_dim": 6, "visual_dim": 6,
                                                 "hidden_dim": 8}))
    steps = [
        ["synth", "--num-scenes", 60, "--seed", 4, "--out-dir", d],
        ["data", "split", d / "synth.json", d / "synth.rfea", "--mode", "people-vs-objects",
         "--test-fraction", 0.4, "--seed", 4, "--out", d / "split.json"],
        ["train", "--config", root / "train.json", *data, "--objective", "mmi", "--seed", 4, "--out-dir", m],
        ["comprehend", "--checkpoint", m / "model.rexp", *data, "--split", "testB", "--out", root / "c.json"],
        ["generate", "--checkpoint", m, *data, "--split", "test", "--mode", "beam", "--out", root / "g.json"],
        ["eval", "--task", "comprehension", "--checkpoint", m, *data, "--workers", 2, "--out", e / "comp.json"],
        ["eval", "--task", "generation", "--checkpoint", m, *data, "--tied", "--out", e / "gen.json"],
        ["report", e / "comp.json", e / "gen.json", "--out-dir", root / "report"],
    ]
    for argv in steps:
        code, _, err = run(capsys, *argv)
        assert code == 0, (argv[0], err)
    return {p.relative_to(root).as_posix(): _digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_and_determinism(capsys, tmp_path):
    first = _pipeline(capsys, tmp_path / "a")
    second = _pipeline(capsys, tmp_path / "b")
    # resolved configs record their own paths, so compare everything else byte for byte
    differing = sorted(k for k in first if first[k] != second[k])
    assert all(k.endswith("config.resolved.json") for k in differing), differing
    assert set(first) == set(second)
    for name in ("data/config.resolved.json", "model/config.resolved.json", "model/model.rexp",
                 "model/model.json", "model/train_log.csv", "report/report.txt", "report/report.csv"):
        assert name in first
    text = (tmp_path / "a" / "report" / "report.txt").read_text()
    for section in ("Comprehension accuracy", "Generation on testA", "Generation on testB", "Generation on all"):
        assert section in text
    for col in ("BLEU-1", "BLEU-2", "ROUGE-L", "METEOR", "duplicates"):
        assert col in text
    rep = json.loads((tmp_path / "a" / "eval" / "gen.json").read_text())
    assert set(rep["splits"]) == {"testA", "testB"}
    assert {"bleu1", "bleu2", "rouge_l", "meteor", "duplicate_rate"} <= set(rep["metrics"])
    resolved = json.loads((tmp_path / "a" / "model" / "config.resolved.json").read_text())
    assert resolved["train"]["seed"] == 4 and resolved["train"]["objective"] == "mmi"
    assert resolved["train"]["epochs"] == 2


def test_flags_override_config_file(capsys, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"num_scenes": 5, "seed": 1}))
    code, _, _ = run(capsys, "synth", "--config", tmp_path / "s.json", "--seed", 7, "--out-dir", tmp_path / "o")
    assert code == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert resolved["synth"]["seed"] == 7 and resolved["synth"]["num_scenes"] == 5


def test_checkpoint_vocabulary_tamper(capsys, tmp_path):
    root = tmp_path
    run(capsys, "synth", "--num-scenes", 12, "--out-dir", root / "d")
    data = ["--annotations", root / "d" / "synth.json", "--features", root / "d" / "synth.rfea"]
    (root / "t.json").write_text(json.dumps({"epochs": 1, "word_dim": 4, "visual_dim": 4, "hidden_dim": 4}))
    assert run(capsys, "train", "--config", root / "t.json", *data, "--out-dir", root / "m")[0] == 0
    side = json.loads((root / "m" / "model.json").read_text())
    side["vocabulary"].append("zzz")
    (root / "m" / "model.json").write_text(json.dumps(side))
    code, _, err = run(capsys, "comprehend", "--checkpoint", root / "m", *data, "--split", "all",
                       "--out", root / "c.json")
    assert code == 3 and err.startswith("error: checkpoint-integrity:")


def test_dataset_vocabulary_mismatch(capsys, tmp_path):
    run(capsys, "synth", "--num-scenes", 12, "--out-dir", tmp_path / "d")
    ann, feat = tmp_path / "d" / "synth.json", tmp_path / "d" / "synth.rfea"
    (tmp_path / "t.json").write_text(json.dumps({"epochs": 1, "word_dim": 4, "visual_dim": 4, "hidden_dim": 4}))
    assert run(capsys, "train", "--config", tmp_path / "t.json", "--annotations", ann, "--features", feat,
               "--out-dir", tmp_path / "m")[0] == 0
    doc = json.loads(ann.read_text())
    doc["refs"].append({"id": 10 ** 6, "ann_id": doc["annotations"][0]["id"], "raw": "the zebra"})
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    code, _, err = run(capsys, "comprehend", "--checkpoint", tmp_path / "m", "--annotations", other,
                       "--features", feat, "--split", "all", "--out", tmp_path / "c.json")
    assert code == 3 and "vocabulary" in err
