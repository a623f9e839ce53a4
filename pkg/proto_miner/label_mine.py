"""
Prototype label matching.

Unlabeled proposals receive category-only labels from the affinity between
their features and the class-aware prototypes, weighted by the detector
scores, after removing background, sparse-labeled and out-of-range regions.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import numpy as np
from proto_miner.box_geom import contains_points
from proto_miner.model import MiningConfig, PrototypeLabel, SceneRecord
from proto_miner.proto_bank import PrototypeBank, is_warmed_up
from proto_miner.utils import DimensionError, WarmupError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropagationResult:
    """
    Intermediate and final products of prototype label matching.

    Attributes
    ----------
    affinity_reduced : np.ndarray
        N x K best prototype affinity per class.
    propagation : np.ndarray
        N x K propagation probability, scores times reduced affinities.
    labels : np.ndarray
        Argmax class of every row of the propagation matrix.
    kept : tuple of PrototypeLabel
        Labels surviving the three masks, in proposal order.
    foreground, outside_sparse, in_range : np.ndarray
        Foreground, non-sparse and in-range masks.
    """

    affinity_reduced: np.ndarray
    propagation: np.ndarray
    labels: np.ndarray
    kept: tuple[PrototypeLabel, ...]
    foreground: np.ndarray
    outside_sparse: np.ndarray
    in_range: np.ndarray


def affinity(features: np.ndarray, bank: PrototypeBank,
             cfg: MiningConfig) -> np.ndarray:
    """
    Dot products between features and every prototype.

    Parameters
    ----------
    features : np.ndarray
        N x C unit-norm features.
    bank : PrototypeBank
        A warmed-up bank.
    cfg : MiningConfig
        Gives the warm-up length.

    Returns
    -------
    np.ndarray
        N x K x O tensor with ``A[i, k, o] = <f_i, p_ko>``.

    Raises
    ------
    DimensionError
        If the feature size differs from the bank.
    WarmupError
        If the bank has not finished its warm-up.
    """
    features = np.asarray(features, dtype=np.float64)
    logger.debug(f"Affinity of {features.shape} features with bank "
                 f"{bank.shape}")
    if features.ndim != 2 or features.shape[1] != bank.shape[2]:
        raise DimensionError(f"features of shape {features.shape} do not "
                             f"match bank C={bank.shape[2]}")
    if not is_warmed_up(bank, cfg):
        logger.info(f"Bank at iteration {bank.iteration} is still warming up")
        raise WarmupError(f"bank at iteration {bank.iteration} has not "
                          f"reached warmup_iters={cfg.warmup_iters}")
    return np.einsum("nc,koc->nko", features, bank.prototypes)


def reduce_affinity(affinities: np.ndarray) -> np.ndarray:
    """
    Keeps the best prototype of each class: ``max_o A[i, k, o]``.
    """
    affinities = np.asarray(affinities)
    if affinities.shape[0] == 0:
        return np.zeros(affinities.shape[:2])
    return affinities.max(axis=2)


def propagate(scores: np.ndarray, affinity_reduced: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray]:
    """
    Combines detector scores with prototype affinities.

    Parameters
    ----------
    scores : np.ndarray
        N x K classification scores.
    affinity_reduced : np.ndarray
        N x K reduced affinities.

    Returns
    -------
    tuple of np.ndarray
        The element-wise product of scores and affinities, and its row-wise
        argmax with ties going to the lowest class index.

    Raises
    ------
    DimensionError
        If the two matrices differ in shape.

    Example
    -------
    >>> W, labels = propagate(np.array([[0.6, 0.3]]), np.array([[0.5, 0.9]]))
    >>> labels
    array([0])
    """
    scores = np.asarray(scores, dtype=np.float64)
    affinity_reduced = np.asarray(affinity_reduced, dtype=np.float64)
    if scores.shape != affinity_reduced.shape:
        raise DimensionError(f"scores {scores.shape} and affinities "
                             f"{affinity_reduced.shape} differ in shape")
    propagation = scores * affinity_reduced
    if propagation.shape[0] == 0:
        return propagation, np.zeros(0, dtype=np.int64)
    return propagation, np.argmax(propagation, axis=1)


def build_masks(scene: SceneRecord, scores: np.ndarray, cfg: MiningConfig
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Computes the foreground, non-sparse and in-range masks of a scene.

    - foreground: the best class score reaches `cfg.alpha_pro` (weighted by
      the proposal centerness when `cfg.use_centerness` is set).
    - non-sparse: the proposal center lies in no sparse label box.
    - in range: the proposal center lies in the closed point range.

    Returns
    -------
    tuple of np.ndarray
        Foreground, non-sparse and in-range boolean vectors of length N.
    """
    logger.debug(f"Building masks for scene {scene.scene_id}")
    scores = np.asarray(scores, dtype=np.float64)
    n_proposals = scene.n_proposals
    if n_proposals == 0:
        empty = np.zeros(0, dtype=bool)
        return empty, empty.copy(), empty.copy()
    best = scores.max(axis=1)
    if cfg.use_centerness:
        best = best * scene.centerness_vector()
    foreground = best >= cfg.alpha_pro
    centers = scene.center_matrix()
    inside_sparse = np.zeros(n_proposals, dtype=bool)
    for label in scene.sparse_labels:
        inside_sparse |= contains_points(label.box, centers)
    bounds = np.array(scene.point_range)
    in_range = np.all((centers >= bounds[:3]) & (centers <= bounds[3:]),
                      axis=1)
    return foreground, ~inside_sparse, in_range


def mine_prototype_labels(scene: SceneRecord, bank: PrototypeBank,
                          cfg: MiningConfig,
                          candidates: np.ndarray | None = None
                          ) -> PropagationResult:
    """
    Assigns prototype labels to the unlabeled foreground of a scene.

    Composes `affinity`, `reduce_affinity`, `propagate` and `build_masks`,
    and keeps ``(i, labels[i])`` for every proposal passing all three masks.
    A bank still warming up yields no labels instead of an error.

    Parameters
    ----------
    scene : SceneRecord
        Scene with normalized features.
    bank : PrototypeBank
        Prototype bank snapshot; only read.
    cfg : MiningConfig
        Thresholds and warm-up length.
    candidates : np.ndarray, optional
        Extra boolean mask restricting which proposals may be labeled.

    Returns
    -------
    PropagationResult
        Matrices, masks and kept labels of the scene.

    Raises
    ------
    DimensionError
        If the scene disagrees with the bank on C or K.
    """
    logger.debug(f"Mining prototype labels of scene {scene.scene_id}")
    n_classes, _, dim = bank.shape
    features = scene.feature_matrix(dim)
    scores = scene.score_matrix(n_classes)
    if features.shape[1] != dim or scores.shape[1] != n_classes:
        raise DimensionError(f"scene {scene.scene_id} does not match the "
                             f"bank (K={n_classes}, C={dim})")
    foreground, outside_sparse, in_range = build_masks(scene, scores, cfg)
    if not is_warmed_up(bank, cfg):
        logger.info(f"Bank still warming up ({bank.iteration}/"
                    f"{cfg.warmup_iters}); no prototype labels for "
                    f"scene {scene.scene_id}")
        zeros = np.zeros_like(scores)
        return PropagationResult(
            affinity_reduced=zeros, propagation=zeros.copy(),
            labels=np.zeros(len(scores), dtype=np.int64), kept=(),
            foreground=foreground, outside_sparse=outside_sparse,
            in_range=in_range)
    affinity_reduced = reduce_affinity(affinity(features, bank, cfg))
    propagation, labels = propagate(scores, affinity_reduced)
    keep = foreground & outside_sparse & in_range
    if candidates is not None:
        keep &= np.asarray(candidates, dtype=bool)
    kept = tuple(PrototypeLabel(int(index), int(labels[index]))
                 for index in np.flatnonzero(keep))
    logger.debug(f"Kept {len(kept)} of {len(labels)} prototype labels")
    return PropagationResult(affinity_reduced=affinity_reduced,
                             propagation=propagation, labels=labels,
                             kept=kept, foreground=foreground,
                             outside_sparse=outside_sparse,
                             in_range=in_range)
