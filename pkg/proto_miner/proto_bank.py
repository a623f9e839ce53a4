"""
Module containing the class-aware prototype bank and its clustering rule.

For every class with labeled features in a scene, the features are matched
to the class prototypes by Sinkhorn-Knopp, each feature goes to its argmax
prototype and every prototype that received features moves with momentum
toward their mean.
"""
from __future__ import annotations
from dataclasses import dataclass, replace
import logging
import numpy as np
from scipy.stats import truncnorm
from proto_miner import settings
from proto_miner.box_geom import contains_point
from proto_miner.model import MiningConfig, SceneRecord, unit_normalize
from proto_miner.ot_match import assign_rows, sinkhorn_match
from proto_miner.utils import DimensionError, InvariantError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """
    Class-aware prototypes and their training state.

    Attributes
    ----------
    prototypes : np.ndarray
        K x O x C array of unit-norm prototype vectors.
    iteration : int
        Number of scenes processed so far (the warm-up clock).
    mu : float
        Momentum coefficient of the update.
    class_update_counts : np.ndarray
        Number of updates each class received, length K.
    """

    prototypes: np.ndarray
    iteration: int
    mu: float
    class_update_counts: np.ndarray

    def __post_init__(self) -> None:
        prototypes = np.array(self.prototypes, dtype=np.float64)
        counts = np.array(self.class_update_counts, dtype=np.int64)
        if prototypes.ndim != 3:
            raise DimensionError(f"prototypes must be K x O x C, got shape "
                                 f"{prototypes.shape}")
        if counts.shape != (prototypes.shape[0],):
            raise DimensionError("class_update_counts must have length K")
        prototypes.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "prototypes", prototypes)
        object.__setattr__(self, "class_update_counts", counts)
        object.__setattr__(self, "iteration", int(self.iteration))
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.prototypes.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PrototypeBank):
            return NotImplemented
        return (np.array_equal(self.prototypes, other.prototypes)
                and self.iteration == other.iteration
                and self.mu == other.mu
                and np.array_equal(self.class_update_counts,
                                   other.class_update_counts))

    __hash__ = object.__hash__


@dataclass(frozen=True)
class ClassAssignment:
    """
    Diagnostics of one class update: how many features each prototype got.
    """

    class_id: int
    n_features: int
    prototype_counts: tuple[int, ...]
    residual: float


def init_bank(cfg: MiningConfig) -> PrototypeBank:
    """
    Draws the initial prototypes from a truncated normal distribution.

    Entries have mean 0 and standard deviation `cfg.init_std`, truncated at
    two standard deviations, then every prototype is L2-normalized. The draw
    only depends on `cfg.seed`.

    Parameters
    ----------
    cfg : MiningConfig
        Validated configuration giving K, O, C, mu and the seed.

    Returns
    -------
    PrototypeBank
        A bank at iteration 0.
    """
    logger.debug(f"Initializing bank K={cfg.K} O={cfg.O} C={cfg.C} "
                 f"seed={cfg.seed}")
    rng = np.random.default_rng(cfg.seed)
    bound = settings.INIT_TRUNCATION
    draws = truncnorm.rvs(-bound, bound, loc=0.0, scale=cfg.init_std,
                          size=(cfg.K, cfg.O, cfg.C), random_state=rng)
    return PrototypeBank(prototypes=unit_normalize(draws), iteration=0,
                         mu=cfg.mu, class_update_counts=np.zeros(cfg.K))


def collect_class_features(scene: SceneRecord, class_id: int) -> np.ndarray:
    """
    Selects the true-positive features of one class in a scene.

    A proposal is kept when its center lies inside a sparse label box of
    `class_id` and its own argmax score is `class_id`.

    Parameters
    ----------
    scene : SceneRecord
        Scene with normalized features.
    class_id : int
        Class to collect.

    Returns
    -------
    np.ndarray
        M x C matrix in proposal order; M may be 0.
    """
    boxes = [label.box for label in scene.sparse_labels
             if label.class_id == class_id]
    dim = len(scene.proposals[0].feature) if scene.proposals else 0
    rows = [proposal.feature for proposal in scene.proposals
            if boxes and int(np.argmax(proposal.scores)) == class_id
            and any(contains_point(box, proposal.center) for box in boxes)]
    logger.debug(f"Collected {len(rows)} features of class {class_id} in "
                 f"scene {scene.scene_id}")
    if not rows:
        return np.zeros((0, dim))
    return np.stack(rows)


def _cluster_class(prototypes: np.ndarray, features: np.ndarray,
                   cfg: MiningConfig) -> tuple[np.ndarray, np.ndarray, float]:
    plan = sinkhorn_match(features @ prototypes.T, cfg.kappa,
                          cfg.sinkhorn_steps)
    assignment = assign_rows(plan)
    mu = cfg.mu
    updated = prototypes.copy()
    for index in np.unique(assignment):
        mean = features[assignment == index].mean(axis=0)
        updated[index] = mu * prototypes[index] + (1.0 - mu) * mean
    updated = unit_normalize(updated)
    if np.any(np.linalg.norm(updated, axis=1) == 0.0):
        raise InvariantError("a prototype collapsed to the zero vector")
    return updated, assignment, plan.converged_residual


def _check_features(bank: PrototypeBank, class_id: int,
                    features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    n_classes, _, dim = bank.shape
    if not 0 <= class_id < n_classes:
        raise DimensionError(f"class_id {class_id} outside 0..{n_classes - 1}")
    if features.ndim != 2 or features.shape[1] != dim:
        raise DimensionError(f"class {class_id}: features of shape "
                             f"{features.shape} do not match bank C={dim}")
    if features.shape[0] == 0:
        raise ValueError(f"class {class_id}: at least one feature is needed")
    return features


def update_class(bank: PrototypeBank, class_id: int, features: np.ndarray,
                 cfg: MiningConfig) -> PrototypeBank:
    """
    Applies one momentum update to the prototypes of a class.

    Features are matched to the class prototypes with `sinkhorn_match`, each
    one is assigned to its argmax prototype, and every prototype with at
    least one feature becomes ``mu * p + (1 - mu) * mean(features)``,
    normalized back to unit length. Prototypes without features and all other
    classes are left untouched.

    Parameters
    ----------
    bank : PrototypeBank
        Current bank.
    class_id : int
        Class to update.
    features : np.ndarray
        M x C unit-norm features, M >= 1.
    cfg : MiningConfig
        Source of the momentum `mu`, kappa and the number of Sinkhorn
        steps; `cfg.mu` wins over the `mu` stored in a loaded bank.

    Returns
    -------
    PrototypeBank
        A new bank with the class updated and its counter incremented.

    Raises
    ------
    DimensionError
        If the feature size differs from the bank.
    """
    logger.debug(f"Updating class {class_id} with {len(features)} features")
    features = _check_features(bank, class_id, features)
    updated, _, _ = _cluster_class(bank.prototypes[class_id], features,
                                   cfg)
    prototypes = bank.prototypes.copy()
    prototypes[class_id] = updated
    counts = bank.class_update_counts.copy()
    counts[class_id] += 1
    return replace(bank, prototypes=prototypes, mu=cfg.mu,
                   class_update_counts=counts)


def process_scene(bank: PrototypeBank, scene: SceneRecord, cfg: MiningConfig
                  ) -> tuple[PrototypeBank, dict[int, ClassAssignment]]:
    """
    Runs class-aware prototype clustering on one scene.

    Every class with at least one true-positive feature is updated; the
    iteration counter grows by exactly one whatever the number of updated
    classes. The momentum is `cfg.mu` and the new bank records it.

    Returns
    -------
    tuple
        The new bank and, per updated class, its `ClassAssignment`.
    """
    logger.debug(f"Clustering scene {scene.scene_id} at iteration "
                 f"{bank.iteration}")
    n_classes, n_prototypes, _ = bank.shape
    prototypes = bank.prototypes.copy()
    counts = bank.class_update_counts.copy()
    diagnostics = {}
    for class_id in range(n_classes):
        features = collect_class_features(scene, class_id)
        if len(features) == 0:
            continue
        try:
            features = _check_features(bank, class_id, features)
            updated, assignment, residual = _cluster_class(
                prototypes[class_id], features, cfg)
        except (DimensionError, InvariantError) as exc:
            raise type(exc)(f"scene {scene.scene_id}, class {class_id}: "
                            f"{exc}") from exc
        prototypes[class_id] = updated
        counts[class_id] += 1
        diagnostics[class_id] = ClassAssignment(
            class_id=class_id, n_features=len(features),
            prototype_counts=tuple(int(n) for n in np.bincount(
                assignment, minlength=n_prototypes)),
            residual=residual)
    new_bank = PrototypeBank(prototypes=prototypes,
                             iteration=bank.iteration + 1, mu=cfg.mu,
                             class_update_counts=counts)
    return new_bank, diagnostics


def is_warmed_up(bank: PrototypeBank, cfg: MiningConfig) -> bool:
    """
    True once the bank has processed at least `cfg.warmup_iters` scenes.
    """
    return bank.iteration >= cfg.warmup_iters
