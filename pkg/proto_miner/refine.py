"""
Multi-label cooperative refinement.

Detector predictions become pseudo labels after a score filter, a
class-agnostic IoU filter and a collision filter against the sparse
annotations. Foreground proposals left uncovered by sparse and pseudo boxes
then receive prototype labels.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import numpy as np
from proto_miner.box_geom import collision, contains_points, overlap
from proto_miner.label_mine import mine_prototype_labels
from proto_miner.model import (Box3D, LabelSet, MiningConfig, ObjectLabel,
                               PseudoLabel, SceneRecord)
from proto_miner.proto_bank import PrototypeBank

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    """
    One detector prediction: class, score in [0, 1] and box.

    `scores` keeps the full class-score vector when the prediction was read
    from a detector export.
    """

    class_id: int
    score: float
    box: Box3D
    centerness: float | None = None
    scores: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"prediction score must be in [0, 1], got "
                             f"{self.score}")

    @property
    def weighted_score(self) -> float:
        if self.centerness is None:
            return self.score
        return self.score * self.centerness


def predictions_from_scores(scores: np.ndarray, boxes: list[Box3D],
                            centerness: list | None = None
                            ) -> list[Prediction]:
    """
    Turns per-class score vectors into predictions (argmax class, max score).
    """
    if not boxes:
        return []
    scores = np.asarray(scores, dtype=np.float64).reshape(len(boxes), -1)
    centerness = centerness or [None] * len(boxes)
    return [Prediction(int(np.argmax(row)), float(row.max()), box, weight,
                       tuple(row.tolist()))
            for row, box, weight in zip(scores, boxes, centerness)]


def predictions_from_proposals(scene: SceneRecord) -> list[Prediction]:
    """
    Uses the proposals of a scene as its predictions.
    """
    return predictions_from_scores(
        scene.score_matrix(), [p.box for p in scene.proposals],
        [p.centerness for p in scene.proposals])


def score_filter(preds: list[Prediction], alpha_cls: float,
                 use_centerness: bool = False) -> list[Prediction]:
    """
    Keeps predictions scoring at least `alpha_cls`, in their input order.

    With `use_centerness` the score is first multiplied by the prediction
    centerness.
    """
    logger.debug(f"Score filter on {len(preds)} predictions, "
                 f"alpha_cls={alpha_cls}")
    if use_centerness:
        return [p for p in preds if p.weighted_score >= alpha_cls]
    return [p for p in preds if p.score >= alpha_cls]


def iou_filter(preds: list[Prediction], alpha_iou: float
               ) -> list[Prediction]:
    """
    Greedy class-agnostic suppression of duplicate predictions.

    Predictions are visited by decreasing score (ties by input index); one is
    kept when its IoU with every already kept prediction stays below
    `alpha_iou`. The survivors are returned in input order.

    Only kept predictions suppress, so the result is a superset of pairwise
    elimination (drop a box when any higher-ranked box overlaps it) and the
    two differ exactly when a box is overlapped only by suppressed ones.
    Through such chains a lower `alpha_iou` can keep more boxes: with A
    overlapping B, B overlapping C and D, and A barely touching C and D,
    a tight threshold removes B and revives C and D. Raising `alpha_cls` or
    `alpha_col` never adds pseudo labels.

    Parameters
    ----------
    preds : list of Prediction
        Candidate pseudo labels.
    alpha_iou : float
        IoU at or above which the lower-scored box is removed.

    Returns
    -------
    list of Prediction
        Subset of `preds`.
    """
    logger.debug(f"IoU filter on {len(preds)} predictions, "
                 f"alpha_iou={alpha_iou}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    kept = []
    for index in order:
        box = preds[index].box
        if all(overlap(box, preds[other].box).iou < alpha_iou
               for other in kept):
            kept.append(index)
    return [preds[index] for index in sorted(kept)]


def collision_filter(preds: list[Prediction], sparse_labels,
                     alpha_col: float, metric: str = "fraction"
                     ) -> list[Prediction]:
    """
    Removes predictions colliding with a sparse annotation.

    A prediction goes when its largest collision with a sparse box exceeds
    `alpha_col` (strictly). The collision is measured by
    `box_geom.collision`, by default as the share of the prediction volume
    inside the annotation.
    """
    logger.debug(f"Collision filter on {len(preds)} predictions against "
                 f"{len(sparse_labels)} sparse labels")
    boxes = [label.box for label in sparse_labels]
    if not boxes:
        return list(preds)
    return [p for p in preds
            if max(collision(p.box, box, metric) for box in boxes)
            <= alpha_col]


def make_pseudo_labels(preds: list[Prediction], scene: SceneRecord,
                       cfg: MiningConfig) -> list[PseudoLabel]:
    """
    Turns raw predictions of a scene into pseudo labels.

    Applies `score_filter`, then `iou_filter`, then `collision_filter`.

    Parameters
    ----------
    preds : list of Prediction
        Predictions of the detector on `scene`.
    scene : SceneRecord
        Source of the sparse annotations.
    cfg : MiningConfig
        Thresholds alpha_cls, alpha_iou, alpha_col and the collision metric.

    Returns
    -------
    list of PseudoLabel
        The surviving predictions with their scores.
    """
    logger.debug(f"Making pseudo labels for scene {scene.scene_id}")
    kept = score_filter(preds, cfg.alpha_cls, cfg.use_centerness)
    kept = iou_filter(kept, cfg.alpha_iou)
    kept = collision_filter(kept, scene.sparse_labels, cfg.alpha_col,
                            cfg.collision_metric)
    return [PseudoLabel(p.class_id, p.box, p.score) for p in kept]


def cooperate(scene: SceneRecord, pseudo: list[PseudoLabel],
              bank: PrototypeBank, cfg: MiningConfig) -> LabelSet:
    """
    Merges sparse, pseudo and prototype labels of a scene.

    Foreground proposals (best score at least alpha_pro) whose center lies in
    no sparse and no pseudo box, and inside the point range, are the missed
    objects; only they may receive prototype labels.

    Parameters
    ----------
    scene : SceneRecord
        Scene with normalized features.
    pseudo : list of PseudoLabel
        Output of `make_pseudo_labels`.
    bank : PrototypeBank
        Read-only bank snapshot; a bank still warming up gives no prototype
        labels.
    cfg : MiningConfig
        Thresholds.

    Returns
    -------
    LabelSet
        Sparse labels of the scene, `pseudo` and the residual prototype
        labels.
    """
    logger.debug(f"Cooperating {len(pseudo)} pseudo labels in scene "
                 f"{scene.scene_id}")
    centers = scene.center_matrix()
    outside_pseudo = np.ones(scene.n_proposals, dtype=bool)
    for label in pseudo:
        outside_pseudo &= ~contains_points(label.box, centers)
    mined = mine_prototype_labels(scene, bank, cfg, candidates=outside_pseudo)
    sparse = [ObjectLabel(label.class_id, label.box)
              for label in scene.sparse_labels]
    return LabelSet(sparse=sparse, pseudo=pseudo, prototype=mined.kept)
