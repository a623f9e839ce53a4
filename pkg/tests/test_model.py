import math
import pytest
import numpy as np
from hypothesis import given, strategies as st
from proto_miner import model
from proto_miner.model import Box3D, ObjectLabel, Proposal, SceneRecord, \
    LabelSet, MiningConfig, PrototypeLabel, PseudoLabel
from proto_miner.utils import ConfigError, DimensionError, FeatureError
from proto_miner import settings

RANGE = (0.0, 0.0, 0.0, 10.0, 10.0, 3.0)


def make_proposal(feature, scores=(0.5, 0.1), center=(1.0, 1.0, 1.0)):
    return Proposal(feature=feature, scores=scores,
                    box=Box3D(*center, 1.0, 1.0, 1.0), center=center)


@pytest.fixture
def scene():
    proposals = [make_proposal([3.0, 4.0]),
                 make_proposal([0.0, 2.0], center=(2.0, 2.0, 1.0))]
    label = ObjectLabel(0, Box3D(1.0, 1.0, 1.0, 2.0, 2.0, 2.0))
    return SceneRecord("s0", proposals, [label], RANGE, gt_labels=[label])

# Test `Box3D`


def test_box_volume_and_center():
    box = Box3D(1.0, 2.0, 3.0, 2.0, 3.0, 4.0)
    assert box.volume() == 24.0
    assert np.array_equal(box.center, [1.0, 2.0, 3.0])
    assert box.is_axis_aligned


@pytest.mark.parametrize("extent", [0.0, -1.0, float("nan"), float("inf")])
def test_box_rejects_bad_extent(extent):
    with pytest.raises(ValueError):
        Box3D(0.0, 0.0, 0.0, extent, 1.0, 1.0)


def test_box_wraps_yaw():
    box = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.0 * math.pi / 2.0)
    assert box.yaw == pytest.approx(-math.pi / 2.0)
    assert -math.pi <= box.yaw <= math.pi


def test_box_from_sequence_length():
    with pytest.raises(DimensionError):
        Box3D.from_sequence([0.0] * 6)
    box = Box3D.from_sequence([0, 0, 0, 1, 1, 1, 0.5])
    assert box.as_list() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5]


def test_bev_corners_counter_clockwise():
    corners = Box3D(0.0, 0.0, 0.0, 2.0, 1.0, 1.0).bev_corners()
    x, y = corners[:, 0], corners[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert signed == pytest.approx(2.0)


@given(st.floats(-100.0, 100.0))
def test_normalize_yaw_idempotent(yaw):
    once = model.normalize_yaw(yaw)
    assert -math.pi <= once <= math.pi
    assert model.normalize_yaw(once) == once

# Test `Proposal` and `SceneRecord`


def test_proposal_rejects_scores_out_of_range():
    with pytest.raises(ValueError):
        make_proposal([1.0, 0.0], scores=(1.2, 0.0))


def test_proposal_rejects_non_finite_feature():
    with pytest.raises(FeatureError):
        make_proposal([np.nan, 1.0])


def test_scene_rejects_empty_range():
    with pytest.raises(ValueError):
        SceneRecord("s", [], [], (0, 0, 0, 0, 1, 1))


def test_scene_rejects_sparse_outside_gt():
    label = ObjectLabel(0, Box3D(0, 0, 0, 1, 1, 1))
    other = ObjectLabel(0, Box3D(5, 5, 0, 1, 1, 1))
    with pytest.raises(ValueError):
        SceneRecord("s", [], [label], RANGE, gt_labels=[other])


def test_scene_rejects_mixed_feature_lengths():
    with pytest.raises(DimensionError):
        SceneRecord("s", [make_proposal([1.0, 0.0]),
                          make_proposal([1.0, 0.0, 0.0])], [], RANGE)


def test_check_dimensions_names_proposal(scene):
    with pytest.raises(DimensionError, match="proposal 0"):
        scene.check_dimensions(n_classes=2, feature_dim=3)
    with pytest.raises(DimensionError, match="class_id"):
        SceneRecord("s", [], [ObjectLabel(4, Box3D(0, 0, 0, 1, 1, 1))],
                    RANGE).check_dimensions(n_classes=2, feature_dim=2)


def test_scene_matrices(scene):
    assert scene.feature_matrix().shape == (2, 2)
    assert scene.score_matrix().shape == (2, 2)
    assert scene.center_matrix().shape == (2, 3)
    assert np.array_equal(scene.centerness_vector(), [1.0, 1.0])
    empty = SceneRecord("e", [], [], RANGE)
    assert empty.feature_matrix(4).shape == (0, 4)
    assert empty.score_matrix(3).shape == (0, 3)

# Test `LabelSet`


def test_label_set_rejects_duplicate_proposal():
    with pytest.raises(ValueError):
        LabelSet(prototype=[PrototypeLabel(1, 0), PrototypeLabel(1, 2)])


def test_label_set_counts():
    labels = LabelSet(
        sparse=[ObjectLabel(0, Box3D(0, 0, 0, 1, 1, 1))],
        pseudo=[PseudoLabel(1, Box3D(3, 3, 0, 1, 1, 1), 0.8)],
        prototype=[PrototypeLabel(0, 1), PrototypeLabel(2, 0)])
    assert labels.counts() == {"sparse": 1, "pseudo": 1, "prototype": 2}


def test_pseudo_label_score_range():
    with pytest.raises(ValueError):
        PseudoLabel(0, Box3D(0, 0, 0, 1, 1, 1), 1.5)

# Test `validate_config`


def test_validate_config_defaults():
    cfg = MiningConfig()
    assert model.validate_config(cfg) is cfg
    assert (cfg.sinkhorn_steps, cfg.kappa, cfg.mu, cfg.O) == (3, 0.05, 0.9,
                                                              10)
    assert cfg.warmup_iters == 1000
    assert (cfg.alpha_pro, cfg.alpha_cls, cfg.alpha_iou, cfg.alpha_col) == \
        (0.2, 0.2, 0.5, 0.2)


def test_validate_config_idempotent():
    cfg = MiningConfig(K=4, C=8)
    assert model.validate_config(model.validate_config(cfg)) == cfg


@pytest.mark.parametrize("overrides, message", [
    ({"mu": 1.5}, "momentum out of range"),
    ({"kappa": 0.0}, "temperature must be positive"),
    ({"O": 0}, "prototype count must be positive"),
    ({"K": 0}, "class count must be positive"),
    ({"C": 0}, "feature dimension must be positive"),
    ({"alpha_iou": 1.1}, "threshold alpha_iou out of range"),
    ({"alpha_pro": -0.1}, "threshold alpha_pro out of range"),
    ({"sinkhorn_steps": 0}, "sinkhorn steps must be positive"),
    ({"warmup_iters": -1}, "warm-up iterations must be non-negative"),
    ({"collision_metric": "volume"}, "unknown collision metric"),
])
def test_validate_config_messages(overrides, message):
    with pytest.raises(ConfigError, match=message):
        model.validate_config(MiningConfig(**overrides))


def test_config_from_mapping_coerces_types():
    cfg = MiningConfig.from_mapping({"K": "4", "kappa": "0.1",
                                     "use_centerness": "true",
                                     "collision_metric": "iou"})
    assert cfg.K == 4 and cfg.kappa == 0.1
    assert cfg.use_centerness is True
    assert cfg.collision_metric == "iou"


def test_config_from_mapping_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        MiningConfig.from_mapping({"kapa": "0.1"})


def test_config_from_mapping_rejects_bad_value():
    with pytest.raises(ConfigError):
        MiningConfig.from_mapping({"K": "four"})


def test_with_overrides_skips_none():
    cfg = MiningConfig().with_overrides(seed=None, mu=0.5)
    assert cfg.seed == settings.SEED and cfg.mu == 0.5

# Test `normalize_features`


def test_normalize_features_3_4_5(scene):
    normalized = model.normalize_features(scene)
    assert np.allclose(normalized.proposals[0].feature, [0.6, 0.8])
    assert normalized.sparse_labels == scene.sparse_labels
    assert normalized.point_range == scene.point_range


def test_normalize_features_keeps_unit_vector():
    unit = np.array([0.6, 0.8])
    scene = SceneRecord("s", [make_proposal(unit)], [], RANGE)
    normalized = model.normalize_features(scene)
    assert np.array_equal(normalized.proposals[0].feature, unit)


def test_normalize_features_zero_vector_names_index(scene):
    bad = SceneRecord("s", list(scene.proposals)
                      + [make_proposal([0.0, 0.0])], [], RANGE)
    with pytest.raises(FeatureError, match="proposal 2"):
        model.normalize_features(bad)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_features_idempotent(values):
    scene = SceneRecord("s", [make_proposal(values, scores=(0.1,))], [],
                        RANGE)
    once = model.normalize_features(scene)
    twice = model.normalize_features(once)
    assert np.array_equal(once.proposals[0].feature,
                          twice.proposals[0].feature)
    assert abs(np.linalg.norm(once.proposals[0].feature) - 1.0) < 1e-6
