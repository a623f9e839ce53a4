import json
import logging
import pytest
import numpy as np
import pandas as pd
from proto_miner import data_io as dio
from proto_miner import settings
from proto_miner.model import Box3D, LabelSet, MiningConfig, ObjectLabel, \
    Proposal, PrototypeLabel, PseudoLabel, SceneRecord
from proto_miner.proto_bank import PrototypeBank, init_bank
from proto_miner.refine import Prediction
from proto_miner.utils import DimensionError, MissingGroundTruthError, \
    SchemaError

RANGE = (0.0, 0.0, 0.0, 10.0, 10.0, 3.0)


@pytest.fixture
def scene():
    proposals = [
        Proposal(feature=[0.1, 0.2, 0.3], scores=[0.5, 0.25],
                 box=Box3D(1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 0.1),
                 center=(1.0, 1.0, 0.5), centerness=0.7),
        Proposal(feature=[1.0 / 3.0, 0.0, -2.5], scores=[0.0, 1.0],
                 box=Box3D(4.0, 4.0, 0.5, 2.0, 1.0, 1.0),
                 center=(4.0, 4.0, 0.5)),
    ]
    gt = [ObjectLabel(0, Box3D(1.0, 1.0, 0.5, 1.2, 1.2, 1.0)),
          ObjectLabel(1, Box3D(4.0, 4.0, 0.5, 2.0, 1.0, 1.0))]
    return SceneRecord("scene_a", proposals, gt[:1], RANGE, gt_labels=gt)


@pytest.fixture
def small_spec():
    return dio.SynthSpec(n_scenes=3, n_objects=4, n_classes=3, feature_dim=6,
                         grid=3)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


HEADER = {"scene_id": "s", "point_range": list(RANGE), "has_gt": False}
PROPOSAL = {"record": "proposals", "center": [1, 1, 1], "feature": [1, 0],
            "scores": [0.5, 0.5], "box": [1, 1, 1, 1, 1, 1, 0]}

# Test scene files


def test_scene_file_is_byte_stable(scene, tmp_path):
    path = tmp_path / "scene_a.jsonl"
    dio.write_scene(scene, path)
    again = dio.read_scene(path, n_classes=2, feature_dim=3)
    assert again == scene
    assert dio.scene_to_text(again) == path.read_text()


def test_scene_header_first(scene):
    first = json.loads(dio.scene_to_text(scene).splitlines()[0])
    assert first == {"scene_id": "scene_a", "point_range": list(RANGE),
                     "has_gt": True}


def test_scene_lines_are_tagged_with_field_names(scene):
    lines = [json.loads(line)
             for line in dio.scene_to_text(scene).splitlines()[1:]]
    tags = [line["record"] for line in lines]
    assert tags == (["proposals"] * len(scene.proposals)
                    + ["sparse_labels"] * len(scene.sparse_labels)
                    + ["gt_labels"] * len(scene.gt_labels))
    assert list(lines[0])[-1] == "centerness"
    assert list(lines[1]) == ["record", "center", "feature", "scores", "box"]
    assert list(lines[-1]) == ["record", "class_id", "box"]


def test_scene_missing_field_names_line(tmp_path):
    record = dict(PROPOSAL)
    del record["feature"]
    path = write_lines(tmp_path / "s.jsonl", [HEADER, PROPOSAL, record])
    with pytest.raises(SchemaError, match=r"s.jsonl:3: missing field "
                                          r"'feature'"):
        dio.read_scene(path)


def test_scene_invalid_json(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps(HEADER) + "\n{not json\n")
    with pytest.raises(SchemaError, match="s.jsonl:2: invalid JSON"):
        dio.read_scene(path)


def test_scene_unknown_record_kind(tmp_path):
    path = write_lines(tmp_path / "s.jsonl",
                       [HEADER, dict(PROPOSAL, record="mesh")])
    with pytest.raises(SchemaError, match="field 'record'"):
        dio.read_scene(path)


def test_scene_non_finite_feature(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps(HEADER) + "\n"
                    + json.dumps(dict(PROPOSAL, feature=[float("nan"), 1.0]))
                    + "\n")
    with pytest.raises(SchemaError, match="s.jsonl:2"):
        dio.read_scene(path)


def test_scene_feature_length_against_corpus(tmp_path):
    path = write_lines(tmp_path / "s.jsonl", [HEADER, PROPOSAL])
    with pytest.raises(DimensionError, match="proposal 0 has feature length"):
        dio.read_scene(path, n_classes=2, feature_dim=3)


def test_scene_label_class_against_corpus(tmp_path):
    label = {"record": "sparse_labels", "class_id": 5,
             "box": [1, 1, 1, 1, 1, 1, 0]}
    path = write_lines(tmp_path / "s.jsonl", [HEADER, label])
    with pytest.raises(DimensionError, match="class_id 5"):
        dio.read_scene(path, n_classes=2)


def test_scene_gt_without_flag(tmp_path):
    label = {"record": "gt_labels", "class_id": 0,
             "box": [1, 1, 1, 1, 1, 1, 0]}
    path = write_lines(tmp_path / "s.jsonl", [HEADER, label])
    with pytest.raises(SchemaError, match="has_gt"):
        dio.read_scene(path)


def test_scene_empty_file(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text("")
    with pytest.raises(SchemaError, match="empty scene file"):
        dio.read_scene(path)

# Test label files


def test_label_file_round_trip(tmp_path):
    labels = LabelSet(
        sparse=[ObjectLabel(0, Box3D(1, 1, 1, 1, 1, 1))],
        pseudo=[PseudoLabel(1, Box3D(3, 3, 1, 1, 2, 1, 0.3), 0.8125)],
        prototype=[PrototypeLabel(4, 1), PrototypeLabel(2, 0)])
    path = dio.label_path(tmp_path, "scene_a")
    assert path.name == "scene_a.labels.jsonl"
    dio.write_labels(labels, path)
    assert dio.read_labels(path) == labels
    families = [json.loads(line)["family"]
                for line in path.read_text().splitlines()]
    assert families == ["sparse", "pseudo", "prototype", "prototype"]


def test_label_file_unknown_family(tmp_path):
    path = write_lines(tmp_path / "l.jsonl",
                       [{"family": "guess", "class_id": 0}])
    with pytest.raises(SchemaError, match="field 'family'"):
        dio.read_labels(path)


def test_label_file_negative_index(tmp_path):
    path = write_lines(tmp_path / "l.jsonl", [
        {"family": "prototype", "proposal_index": -1, "class_id": 0}])
    with pytest.raises(SchemaError, match="proposal_index"):
        dio.read_labels(path)

# Test prediction files


def test_predictions_take_argmax(tmp_path):
    path = write_lines(tmp_path / "p.jsonl", [
        {"box": [1, 1, 1, 1, 1, 1, 0], "scores": [0.1, 0.8]},
        {"box": [5, 5, 1, 1, 1, 1, 0], "scores": [0.6, 0.2],
         "centerness": 0.5}])
    preds = dio.read_predictions(path, n_classes=2)
    assert [(p.class_id, p.score) for p in preds] == [(1, 0.8), (0, 0.6)]
    assert preds[1].centerness == 0.5


def test_predictions_without_score_vector(tmp_path):
    path = tmp_path / "p.jsonl"
    dio.write_predictions([Prediction(2, 0.75, Box3D(1, 1, 1, 1, 1, 1))], 3,
                          path)
    assert json.loads(path.read_text())["scores"] == [0.0, 0.0, 0.75]


def test_predictions_wrong_length(tmp_path):
    path = write_lines(tmp_path / "p.jsonl", [
        {"box": [1, 1, 1, 1, 1, 1, 0], "scores": [0.1, 0.8]}])
    with pytest.raises(DimensionError):
        dio.read_predictions(path, n_classes=3)


def test_predictions_out_of_range_score(tmp_path):
    path = write_lines(tmp_path / "p.jsonl", [
        {"box": [1, 1, 1, 1, 1, 1, 0], "scores": [1.5, 0.0]}])
    with pytest.raises(SchemaError):
        dio.read_predictions(path)

# Test manifests and corpora


def test_manifest_checks_names():
    with pytest.raises(SchemaError, match="class names"):
        dio.CorpusManifest(1, 2, 4, ["chair"], [])
    with pytest.raises(SchemaError, match="format_version"):
        dio.CorpusManifest(2, 1, 4, ["chair"], [])


def test_load_corpus_without_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        dio.load_corpus(tmp_path)


def test_load_corpus_missing_scene(tmp_path):
    manifest = dio.CorpusManifest(1, 2, 3, ["a", "b"], ["gone.jsonl"])
    dio.write_manifest(manifest, tmp_path / settings.MANIFEST_FILE)
    with pytest.raises(SchemaError, match="missing scene files"):
        dio.load_corpus(tmp_path)


def test_load_corpus_duplicate_ids(scene, tmp_path):
    dio.write_scene(scene, tmp_path / "one.jsonl")
    dio.write_scene(scene, tmp_path / "two.jsonl")
    manifest = dio.CorpusManifest(1, 2, 3, ["a", "b"],
                                  ["one.jsonl", "two.jsonl"])
    dio.write_manifest(manifest, tmp_path / settings.MANIFEST_FILE)
    with pytest.raises(SchemaError, match="duplicate"):
        dio.load_corpus(tmp_path)


def test_save_and_load_corpus(small_spec, tmp_path):
    corpus = dio.synth_corpus(small_spec, seed=3)
    dio.save_corpus(corpus, tmp_path)
    loaded = dio.load_corpus(tmp_path, jobs=2)
    assert loaded.manifest == corpus.manifest
    assert loaded.scene_ids == corpus.scene_ids
    assert loaded.scenes == corpus.scenes
    assert sorted(loaded.predictions) == sorted(corpus.predictions)
    first = corpus.scenes[0]
    assert [p.class_id for p in loaded.predictions_for(first)] == \
        [p.class_id for p in corpus.predictions_for(first)]


def test_read_prediction_dir_skips_missing(tmp_path):
    dio.write_predictions([Prediction(0, 0.5, Box3D(1, 1, 1, 1, 1, 1))], 2,
                          tmp_path / "a.jsonl")
    found = dio.read_prediction_dir(tmp_path, ["a", "b"], 2)
    assert list(found) == ["a"]

# Test bank files


@pytest.fixture
def bank():
    cfg = MiningConfig(K=2, C=3, O=2, seed=9)
    return PrototypeBank(init_bank(cfg).prototypes, 17, 0.9,
                         np.array([5, 12]))


def test_bank_round_trip_is_exact(bank, tmp_path):
    path = tmp_path / "bank.txt"
    dio.write_bank(bank, path)
    loaded = dio.read_bank(path)
    assert loaded == bank
    header = path.read_text().splitlines()[0]
    assert header == "PROTOBANK v1 K=2 O=2 C=3 iter=17 mu=0.9 counts=5,12"


def test_bank_header_without_counts(bank, tmp_path):
    lines = dio.bank_to_text(bank).splitlines()
    lines[0] = lines[0].split(" counts=")[0]
    path = tmp_path / "bank.txt"
    path.write_text("\n".join(lines) + "\n")
    assert dio.read_bank(path).class_update_counts.tolist() == [0, 0]


@pytest.mark.parametrize("mutate, message", [
    (lambda lines: ["PROTOBANK v2"] + lines[1:], "expected header"),
    (lambda lines: lines[:-1], "prototype lines"),
    (lambda lines: lines[:1] + ["0.1 0.2"] + lines[2:], "expected 3 values"),
    (lambda lines: lines[:1] + ["nan 0.0 1.0"] + lines[2:], "non-finite"),
    (lambda lines: lines[:1] + ["a b c"] + lines[2:], ":2:"),
])
def test_bank_format_errors(bank, tmp_path, mutate, message):
    path = tmp_path / "bank.txt"
    path.write_text("\n".join(mutate(dio.bank_to_text(bank).splitlines()))
                    + "\n")
    with pytest.raises(SchemaError, match=message):
        dio.read_bank(path)


def test_export_bank_csv(bank, tmp_path):
    path = tmp_path / "out" / "bank.csv"
    table = dio.export_bank_csv(bank, ["chair", "table"], path)
    assert list(table.columns) == ["class_id", "class_name", "prototype",
                                   "f0", "f1", "f2"]
    assert table["class_name"].tolist() == ["chair", "chair", "table",
                                            "table"]
    assert table["prototype"].tolist() == [0, 1, 0, 1]
    pd.testing.assert_frame_equal(pd.read_csv(path), table)


def test_export_bank_csv_checks_names(bank, tmp_path):
    with pytest.raises(DimensionError):
        dio.export_bank_csv(bank, ["chair"], tmp_path / "bank.csv")

# Test `sparsify`


@pytest.fixture
def corpus(small_spec):
    return dio.synth_corpus(small_spec, seed=1)


def test_sparsify_one_per_scene(corpus):
    sparse = dio.sparsify(corpus, "one_per_scene", seed=4)
    for scene in sparse.scenes:
        assert len(scene.sparse_labels) == 1
        assert scene.sparse_labels[0] in scene.gt_labels
    assert dio.sparsify(corpus, "one_per_scene", seed=4) == sparse


def test_sparsify_n_per_scene(corpus):
    sparse = dio.sparsify(corpus, "n_per_scene", seed=0, n=3)
    assert all(len(s.sparse_labels) == 3 for s in sparse.scenes)
    capped = dio.sparsify(corpus, "n_per_scene", seed=0, n=10)
    assert all(len(s.sparse_labels) == 4 for s in capped.scenes)


def test_sparsify_one_per_class(corpus):
    sparse = dio.sparsify(corpus, "one_per_class_per_scene", seed=0)
    for scene in sparse.scenes:
        classes = [label.class_id for label in scene.sparse_labels]
        assert classes == sorted({label.class_id
                                  for label in scene.gt_labels})


def test_sparsify_scene_draw_ignores_other_scenes(corpus):
    whole = dio.sparsify(corpus, seed=2)
    head = dio.sparsify(dio.Corpus(corpus.manifest, corpus.scenes[:1]),
                        seed=2)
    assert whole.scenes[0] == head.scenes[0]


def test_sparsify_keeps_empty_scene(corpus, caplog):
    empty = SceneRecord("empty", [], [], RANGE, gt_labels=[])
    with caplog.at_level(logging.WARNING):
        sparse = dio.sparsify(dio.Corpus(corpus.manifest, [empty]))
    assert sparse.scenes[0].sparse_labels == ()
    assert "no ground-truth object" in caplog.text


def test_sparsify_requires_ground_truth(corpus):
    bare = SceneRecord("bare", [], [], RANGE)
    with pytest.raises(MissingGroundTruthError):
        dio.sparsify(dio.Corpus(corpus.manifest, [bare]))


@pytest.mark.parametrize("mode, n", [("all", 1), ("n_per_scene", 0)])
def test_sparsify_rejects_arguments(corpus, mode, n):
    with pytest.raises(ValueError):
        dio.sparsify(corpus, mode, n=n)

# Test the synthetic corpus


def test_class_directions_are_orthonormal():
    directions = dio.class_directions(4, 8, np.random.default_rng(0))
    assert directions.shape == (4, 8)
    assert np.allclose(directions @ directions.T, np.eye(4))
    with pytest.raises(DimensionError):
        dio.class_directions(4, 3, np.random.default_rng(0))


def test_synth_corpus_layout(small_spec, corpus):
    assert corpus.scene_ids == ["scene_0000", "scene_0001", "scene_0002"]
    assert corpus.manifest.class_names == ["class_0", "class_1", "class_2"]
    for scene in corpus.scenes:
        assert len(scene.gt_labels) == 4
        assert scene.sparse_labels == ()
        assert scene.n_proposals == 4 * 3 + 12 + 1
        scene.check_dimensions(3, 6)
    assert set(corpus.predictions) == set(corpus.scene_ids)


def test_synth_corpus_is_deterministic(small_spec):
    first = dio.synth_corpus(small_spec, seed=5)
    second = dio.synth_corpus(small_spec, seed=5)
    other = dio.synth_corpus(small_spec, seed=6)
    texts = [dio.scene_to_text(s) for s in first.scenes]
    assert texts == [dio.scene_to_text(s) for s in second.scenes]
    assert texts != [dio.scene_to_text(s) for s in other.scenes]


def test_synth_corpus_rotated_with_centerness(small_spec):
    spec = dio.SynthSpec(n_scenes=1, n_objects=4, n_classes=3,
                         feature_dim=6, grid=3, rotated=True,
                         centerness=True)
    scene = dio.synth_corpus(spec).scenes[0]
    assert any(not label.box.is_axis_aligned for label in scene.gt_labels)
    assert all(p.centerness is not None for p in scene.proposals)


def test_synth_corpus_rejects_crowded_grid():
    with pytest.raises(ValueError):
        dio.synth_corpus(dio.SynthSpec(n_objects=17, grid=4))
