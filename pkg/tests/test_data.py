import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refexp import data as D
from refexp.errors import AnnotationIntegrityError, FeatureIntegrityError, ParseError

from conftest import make_doc


def test_empty_annotations(write_dataset):
    ann, feat = write_dataset(make_doc([]), {}, dim=4)
    ds = D.load_dataset(ann, feat)
    assert ds.counts() == (0, 0, 0)


def test_small_fixture_counts_and_links(write_dataset, small_doc):
    doc, feats = small_doc
    ds = D.load_dataset(*write_dataset(doc, feats))
    assert ds.counts() == (1, 2, 3)
    assert [e.expression_id for e in ds.expressions_of(10)] == [100, 101]
    assert ds.scene_of(11).scene_id == 1
    assert ds.regions[11].box == D.BoundingBox(50, 40, 80, 70)
    assert ds.expressions[1].words == ("man", "left")
    assert np.array_equal(ds.regions[10].feature, [1.0, 0.0, 0.5])
    assert ds.categories == {1: "person", 2: "ball"}


def test_unknown_region_reference(write_dataset, small_doc):
    doc, feats = small_doc
    doc["refs"].append({"id": 103, "ann_id": 99, "raw": "ghost"})
    with pytest.raises(AnnotationIntegrityError):
        D.load_dataset(*write_dataset(doc, feats))


def test_missing_feature_row(write_dataset, small_doc):
    doc, feats = small_doc
    del feats[11]
    with pytest.raises(FeatureIntegrityError):
        D.load_dataset(*write_dataset(doc, feats))


def test_duplicate_region_id(write_dataset, small_doc):
    doc, feats = small_doc
    doc["annotations"].append(dict(doc["annotations"][0]))
    with pytest.raises(AnnotationIntegrityError):
        D.load_dataset(*write_dataset(doc, feats))


def test_box_outside_image(write_dataset, small_doc):
    doc, feats = small_doc
    doc["annotations"][1]["bbox"] = [90, 40, 30, 30]
    with pytest.raises(AnnotationIntegrityError):
        D.load_dataset(*write_dataset(doc, feats))


def test_malformed_json(tmp_path, small_doc):
    ann = tmp_path / "bad.json"
    ann.write_text("{not json", encoding="utf-8")
    feat = tmp_path / "f.rfea"
    D.write_features(feat, small_doc[1])
    with pytest.raises(ParseError):
        D.load_dataset(ann, feat)
    ann.write_text(json.dumps({"images": {}}), encoding="utf-8")
    with pytest.raises(ParseError):
        D.load_dataset(ann, feat)


def test_context_rows_attach_to_scene(write_dataset, small_doc):
    doc, feats = small_doc
    feats[D.context_key(1, "global")] = np.array([0.5, 0.5, 0.375])
    feats[D.context_key(1, "scale3")] = np.array([1.0, 2.0, 3.0])
    ds = D.load_dataset(*write_dataset(doc, feats))
    assert set(ds.scenes[1].context_features) == {"global", "scale3"}
    assert D.split_context_key(D.context_key(1, "scale3")) == (1, "scale3")
    assert D.split_context_key(11) is None


def test_feature_file_round_trip_bit_exact():
    rows = {3: np.array([0.1, -2.5], dtype=np.float32), 1: np.array([1e-30, 7.0], dtype=np.float32)}
    buf = D.feature_bytes(rows)
    dim, back = D.parse_features(buf)
    assert dim == 2
    assert D.feature_bytes(back) == buf
    for k, v in rows.items():
        assert back[k].astype(np.float32).tobytes() == v.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"RFEX" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\0\0",
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
])
def test_feature_file_corruption(mutate):
    buf = D.feature_bytes({1: np.ones(3), 2: np.zeros(3)})
    with pytest.raises(FeatureIntegrityError):
        D.parse_features(mutate(buf))


def test_feature_file_rejects_nan_and_duplicates():
    with pytest.raises(FeatureIntegrityError):
        D.parse_features(D.feature_bytes({1: np.array([np.nan])}))
    buf = D.feature_bytes([(1, np.ones(2)), (1, np.ones(2))])
    with pytest.raises(FeatureIntegrityError):
        D.parse_features(buf)


def test_vocabulary_min_count():
    vocab = D.build_vocabulary(["red", "red", "ball"], min_count=2)
    assert vocab.itos == ["<bos>", "<end>", "<unk>", "red"]
    assert vocab.encode(["ball"]) == [vocab.unk_id, vocab.end_id]


def test_vocabulary_min_count_one_and_empty():
    vocab = D.build_vocabulary([["a", "b"], ["b", "c"]], min_count=1)
    assert set(vocab.itos[3:]) == {"a", "b", "c"}
    assert D.build_vocabulary([], 1).itos == list(D.Vocabulary.SPECIALS)
    with pytest.raises(ValueError):
        D.build_vocabulary([], 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from(["red", "ball", "left", "dog", "the", "zebra", "x"]), min_size=1, max_size=8))
def test_encode_decode_round_trip(words):
    vocab = D.build_vocabulary([["red", "ball", "the", "dog"]], 1)
    ids = vocab.encode(words)
    assert ids[-1] == vocab.end_id
    assert vocab.decode(ids) == [w if w in vocab else D.Vocabulary.UNK for w in words]


def test_tokenize():
    assert D.tokenize("The man, on the LEFT!") == ["the", "man", "on", "the", "left"]
    assert D.tokenize("  ") == []


def _ten_region_dataset():
    regs = [(1, 200, 200, [(r, 1, [r, r, 5, 5]) for r in range(1, 6)]),
            (2, 200, 200, [(r, 1, [r, r, 5, 5]) for r in range(6, 11)])]
    doc = make_doc(regs, [(100 + r, r, "obj") for r in range(1, 11)])
    return D.parse_annotations(doc, {r: np.zeros(2) for r in range(1, 11)}, 2)


def test_split_per_object_ten_regions():
    ds = _ten_region_dataset()
    train, test = D.split_per_object(ds, 0.8, seed=4)
    assert len(train.region_ids) == 8 and len(test.region_ids) == 2
    assert train.region_ids | test.region_ids == set(ds.regions)
    assert not train.region_ids & test.region_ids
    # seeded shuffle oracle
    ids = np.arange(1, 11)
    perm = np.random.default_rng(4).permutation(10)
    assert test.region_ids == set(ids[perm[8:]].tolist())
    again = D.split_per_object(ds, 0.8, seed=4)
    assert again == (train, test)


def test_split_per_object_single_region():
    doc = make_doc([(1, 10, 10, [(1, 1, [0, 0, 1, 1])])])
    ds = D.parse_annotations(doc, {1: np.zeros(1)}, 1)
    train, test = D.split_per_object(ds, 1 - 1e-9, seed=0)
    assert train.region_ids == {1} and not test.region_ids


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_per_object_partition_property(ratio, seed):
    ds = _ten_region_dataset()
    train, test = D.split_per_object(ds, ratio, seed)
    assert train.region_ids | test.region_ids == set(ds.regions)
    assert not train.region_ids & test.region_ids


def _people_fixture():
    # scene: (person count, giraffe count, zebra count); every region referred
    layout = {1: (3, 0, 0), 2: (0, 2, 0), 3: (1, 1, 1), 4: (2, 2, 0), 5: (1, 0, 2), 6: (1, 0, 0)}
    scenes, refs, rid = [], [], 1
    for sid, counts in layout.items():
        regs = []
        for cat, n in zip((1, 2, 3), counts):
            for _ in range(n):
                regs.append((rid, cat, [rid % 50, 0, 5, 5]))
                refs.append((1000 + rid, rid, "thing"))
                rid += 1
        scenes.append((sid, 100, 100, regs))
    doc = make_doc(scenes, refs, {1: "person", 2: "giraffe", 3: "zebra"})
    return D.parse_annotations(doc, {r: np.zeros(1) for r in range(1, rid)}, 1)


def test_people_vs_objects_eligibility_by_hand():
    ds = _people_fixture()
    elig_a, elig_b = D.people_vs_objects_eligibility(ds, 1)
    assert elig_a == [1, 4]          # >= 2 people
    assert elig_b == [2, 5]          # >= 2 of one other category, not already testA


def test_people_vs_objects_split_assignment():
    ds = _people_fixture()
    train, test_a, test_b = D.split_people_vs_objects(ds, 1, test_fraction=0.5, seed=0)
    assert len(test_a.scene_ids) == 1 and test_a.scene_ids <= {1, 4}
    assert len(test_b.scene_ids) == 1 and test_b.scene_ids <= {2, 5}
    assert train.scene_ids == set(ds.scenes) - test_a.scene_ids - test_b.scene_ids
    for s in (train, test_a, test_b):
        assert s.region_ids == {r.region_id for sid in s.scene_ids for r in ds.scenes[sid].regions}
    assert not (train.scene_ids & test_a.scene_ids or train.scene_ids & test_b.scene_ids
                or test_a.scene_ids & test_b.scene_ids)
    full = D.split_people_vs_objects(ds, 1, test_fraction=1.0, seed=0)
    assert full[1].scene_ids == {1, 4} and full[2].scene_ids == {2, 5} and full[0].scene_ids == {3, 6}


def test_split_file_round_trip(tmp_path):
    ds = _ten_region_dataset()
    train, test = D.split_per_object(ds, 0.5, 1)
    D.save_split(tmp_path / "s.json", [train, test], {"mode": "per-object"})
    back = D.load_split(tmp_path / "s.json")
    assert back["train"] == train and back["test"] == test
