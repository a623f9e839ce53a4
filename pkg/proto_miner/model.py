"""
Module containing the shared data model and the validated mining
configuration used by every other module of `proto_miner`.
"""
from __future__ import annotations
from dataclasses import dataclass, fields, replace
import logging
import math
import numpy as np
from proto_miner import settings
from proto_miner.utils import ConfigError, DimensionError, FeatureError

logger = logging.getLogger(__name__)


def normalize_yaw(yaw: float) -> float:
    """
    Wraps an angle into [-pi, pi]; angles already in range are returned
    untouched so the operation is idempotent.
    """
    if -math.pi <= yaw <= math.pi:
        return float(yaw)
    return float((yaw + math.pi) % (2.0 * math.pi) - math.pi)


def unit_normalize(vectors: np.ndarray) -> np.ndarray:
    """
    L2-normalizes the last axis of `vectors`.

    Vectors whose norm is already 1 within `settings.UNIT_EXACT_TOL` are
    copied as they are, which makes the operation exactly idempotent.
    Zero vectors are returned as zeros; callers decide whether that is an
    error.

    Parameters
    ----------
    vectors : np.ndarray
        Array of shape (..., C).

    Returns
    -------
    np.ndarray
        Float64 array of the same shape.

    Example
    -------
    >>> unit_normalize(np.array([3.0, 4.0]))
    array([0.6, 0.8])
    """
    arr = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    rescale = np.abs(norms - 1.0) > settings.UNIT_EXACT_TOL
    safe = np.where(norms == 0.0, 1.0, norms)
    return np.where(rescale, arr / safe, arr)


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape "
                             f"{arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Box3D:
    """
    Oriented 3D box with seven degrees of freedom.

    Attributes
    ----------
    cx, cy, cz : float
        Center in meters.
    dx, dy, dz : float
        Full extents in meters, strictly positive.
    yaw : float
        Rotation about the vertical axis in radians, wrapped into [-pi, pi].
        Axis-aligned indoor boxes use ``yaw = 0``.

    Raises
    ------
    ValueError
        If a value is not finite or an extent is not strictly positive.

    Example
    -------
    >>> box = Box3D(0.0, 0.0, 0.5, 2.0, 1.0, 1.0)
    >>> box.volume()
    2.0
    """

    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "cz", "dx", "dy", "dz", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Box3D.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name in ("dx", "dy", "dz"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"Box3D.{name} must be strictly positive, "
                                 f"got {getattr(self, name)}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_sequence(cls, values) -> Box3D:
        """
        Builds a box from ``[cx, cy, cz, dx, dy, dz, yaw]``.
        """
        values = list(values)
        if len(values) != 7:
            raise DimensionError(f"a box needs 7 values, got {len(values)}")
        return cls(*values)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.cz, self.dx, self.dy, self.dz,
                self.yaw]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def is_axis_aligned(self) -> bool:
        return self.yaw == 0.0

    def volume(self) -> float:
        return self.dx * self.dy * self.dz

    def z_range(self) -> tuple[float, float]:
        return self.cz - self.dz / 2.0, self.cz + self.dz / 2.0

    def bev_corners(self) -> np.ndarray:
        """
        Returns the four ground-plane corners, counter-clockwise, shape (4, 2).
        """
        hx, hy = self.dx / 2.0, self.dy / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        cos, sin = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[cos, -sin], [sin, cos]])
        return local @ rotation.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class ObjectLabel:
    """
    A boxed label: sparse annotation or ground-truth object.
    """

    class_id: int
    box: Box3D

    def __post_init__(self) -> None:
        if int(self.class_id) < 0:
            raise ValueError(f"class_id must be non-negative, got "
                             f"{self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))


@dataclass(frozen=True)
class PseudoLabel:
    """
    A filtered detector prediction promoted to a training label.
    """

    class_id: int
    box: Box3D
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"pseudo label score must be in [0, 1], got "
                             f"{self.score}")


@dataclass(frozen=True)
class PrototypeLabel:
    """
    A category-only label attached to one proposal of a scene.
    """

    proposal_index: int
    class_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "proposal_index", int(self.proposal_index))
        object.__setattr__(self, "class_id", int(self.class_id))


@dataclass(frozen=True, eq=False)
class Proposal:
    """
    One detector query exported for mining.

    Attributes
    ----------
    feature : np.ndarray
        Projected feature, length C (one row of F).
    scores : np.ndarray
        Post-sigmoid classification scores in [0, 1], length K (one row of S).
    box : Box3D
        Box regressed by the detector for this query.
    center : tuple of float
        Query location used by range and containment tests.
    centerness : float, optional
        Centerness in [0, 1] for detectors that predict it.
    """

    feature: np.ndarray
    scores: np.ndarray
    box: Box3D
    center: tuple[float, float, float]
    centerness: float | None = None

    def __post_init__(self) -> None:
        feature = _frozen_array(self.feature, "feature")
        scores = _frozen_array(self.scores, "scores")
        if not np.all(np.isfinite(feature)):
            raise FeatureError("proposal feature must be finite")
        if not np.all((scores >= 0.0) & (scores <= 1.0)):
            raise ValueError("proposal scores must lie in [0, 1]")
        center = tuple(float(value) for value in self.center)
        if len(center) != 3 or not all(map(math.isfinite, center)):
            raise ValueError(f"proposal center must be 3 finite values, got "
                             f"{self.center}")
        object.__setattr__(self, "feature", feature)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "center", center)
        if self.centerness is not None:
            centerness = float(self.centerness)
            if not 0.0 <= centerness <= 1.0:
                raise ValueError(f"centerness must be in [0, 1], got "
                                 f"{centerness}")
            object.__setattr__(self, "centerness", centerness)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Proposal):
            return NotImplemented
        return (np.array_equal(self.feature, other.feature)
                and np.array_equal(self.scores, other.scores)
                and self.box == other.box and self.center == other.center
                and self.centerness == other.centerness)

    __hash__ = object.__hash__


@dataclass(frozen=True)
class SceneRecord:
    """
    One point-cloud scene as exported by a detector.

    Attributes
    ----------
    scene_id : str
        Identifier, also used for file names.
    proposals : tuple of Proposal
        The N proposals of the scene.
    sparse_labels : tuple of ObjectLabel
        The few annotated objects.
    gt_labels : tuple of ObjectLabel, optional
        Full ground truth, used for evaluation only.
    point_range : tuple of float
        ``(x_min, y_min, z_min, x_max, y_max, z_max)`` in meters.

    Raises
    ------
    DimensionError
        If proposals disagree on the feature or score length.
    ValueError
        If the point range is empty on an axis or a sparse label is not part
        of the ground truth.
    """

    scene_id: str
    proposals: tuple[Proposal, ...]
    sparse_labels: tuple[ObjectLabel, ...]
    point_range: tuple[float, ...]
    gt_labels: tuple[ObjectLabel, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "sparse_labels", tuple(self.sparse_labels))
        if self.gt_labels is not None:
            object.__setattr__(self, "gt_labels", tuple(self.gt_labels))
        point_range = tuple(float(value) for value in self.point_range)
        if len(point_range) != 6:
            raise DimensionError("point_range needs 6 values")
        if any(point_range[axis] >= point_range[axis + 3]
               for axis in range(3)):
            raise ValueError(f"point_range of scene {self.scene_id} must "
                             f"have min < max on every axis")
        object.__setattr__(self, "point_range", point_range)
        if self.proposals:
            dims = {len(p.feature) for p in self.proposals}
            classes = {len(p.scores) for p in self.proposals}
            if len(dims) > 1 or len(classes) > 1:
                raise DimensionError(f"proposals of scene {self.scene_id} "
                                     f"disagree on feature or score length")
        if self.gt_labels is not None:
            missing = [label for label in self.sparse_labels
                       if label not in self.gt_labels]
            if missing:
                raise ValueError(f"scene {self.scene_id}: sparse labels must "
                                 f"be a subset of the ground truth")

    @property
    def n_proposals(self) -> int:
        return len(self.proposals)

    def feature_matrix(self, dim: int | None = None) -> np.ndarray:
        """
        Stacks the proposal features into an N x C matrix.

        Parameters
        ----------
        dim : int, optional
            Feature size to use for the shape of an empty scene.
        """
        if not self.proposals:
            return np.zeros((0, dim or 0))
        return np.stack([p.feature for p in self.proposals])

    def score_matrix(self, n_classes: int | None = None) -> np.ndarray:
        """
        Stacks the proposal scores into an N x K matrix (S).
        """
        if not self.proposals:
            return np.zeros((0, n_classes or 0))
        return np.stack([p.scores for p in self.proposals])

    def center_matrix(self) -> np.ndarray:
        if not self.proposals:
            return np.zeros((0, 3))
        return np.array([p.center for p in self.proposals])

    def centerness_vector(self) -> np.ndarray:
        """
        Returns the proposal centerness, 1.0 where a proposal has none.
        """
        return np.array([1.0 if p.centerness is None else p.centerness
                         for p in self.proposals])

    def check_dimensions(self, n_classes: int, feature_dim: int) -> None:
        """
        Checks proposals and labels against the corpus K and C.

        Raises
        ------
        DimensionError
            Naming the first offending proposal or label.
        """
        for index, proposal in enumerate(self.proposals):
            if len(proposal.feature) != feature_dim:
                raise DimensionError(
                    f"scene {self.scene_id}: proposal {index} has feature "
                    f"length {len(proposal.feature)}, expected {feature_dim}")
            if len(proposal.scores) != n_classes:
                raise DimensionError(
                    f"scene {self.scene_id}: proposal {index} has "
                    f"{len(proposal.scores)} scores, expected {n_classes}")
        labels = self.sparse_labels + (self.gt_labels or ())
        for label in labels:
            if label.class_id >= n_classes:
                raise DimensionError(
                    f"scene {self.scene_id}: class_id {label.class_id} is "
                    f"not below K={n_classes}")


@dataclass(frozen=True)
class LabelSet:
    """
    The three label families of one scene: sparse annotations, pseudo labels
    and category-only prototype labels.
    """

    sparse: tuple[ObjectLabel, ...] = ()
    pseudo: tuple[PseudoLabel, ...] = ()
    prototype: tuple[PrototypeLabel, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sparse", tuple(self.sparse))
        object.__setattr__(self, "pseudo", tuple(self.pseudo))
        object.__setattr__(self, "prototype", tuple(self.prototype))
        indices = [label.proposal_index for label in self.prototype]
        if len(indices) != len(set(indices)):
            raise ValueError("a proposal carries at most one prototype label")

    def counts(self) -> dict[str, int]:
        return {"sparse": len(self.sparse), "pseudo": len(self.pseudo),
                "prototype": len(self.prototype)}


_BOOLEAN_STRINGS = {"true": True, "yes": True, "1": True,
                    "false": False, "no": False, "0": False}


def _coerce(name: str, kind: str, raw: str):
    try:
        if kind == "bool":
            return _BOOLEAN_STRINGS[raw.strip().lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read {name} from {raw!r}") from exc


@dataclass(frozen=True)
class MiningConfig:
    """
    Every threshold and hyperparameter of the mining engine.

    Defaults follow the published setting: 3 Sinkhorn steps at kappa 0.05,
    momentum 0.9, 10 prototypes per class, 1000 warm-up iterations and the
    thresholds alpha_pro = alpha_cls = 0.2, alpha_iou = 0.5, alpha_col = 0.2.

    Attributes
    ----------
    K, C, O : int
        Class count, feature size and prototypes per class.
    kappa : float
        Sinkhorn temperature.
    sinkhorn_steps : int
        Number of row/column renormalization passes.
    mu : float
        Momentum coefficient of the prototype update.
    warmup_iters : int
        Scenes to cluster before prototype labels are emitted.
    alpha_pro, alpha_cls, alpha_iou, alpha_col : float
        Foreground, pseudo-score, IoU and collision thresholds.
    seed : int
        Seed of every random draw.
    tau_con : float
        Temperature of the prototype-feature contrastive loss.
    collision_metric : str
        ``"fraction"`` (intersection over pseudo-box volume) or ``"iou"``.
    init_std : float
        Standard deviation of the truncated-normal prototype initialization.
    focal_alpha, focal_gamma : float
        Focal loss parameters of the prototype classification loss.
    use_centerness : bool
        Weights foreground and pseudo scores by proposal centerness.
    recall_iou_thresh : float
        IoU needed for a boxed label to match a ground-truth object.
    """

    K: int = settings.N_CLASSES
    C: int = settings.FEATURE_DIM
    O: int = settings.N_PROTOTYPES  # noqa: E741
    kappa: float = settings.KAPPA
    sinkhorn_steps: int = settings.SINKHORN_STEPS
    mu: float = settings.MU
    warmup_iters: int = settings.WARMUP_ITERS
    alpha_pro: float = settings.ALPHA_PRO
    alpha_cls: float = settings.ALPHA_CLS
    alpha_iou: float = settings.ALPHA_IOU
    alpha_col: float = settings.ALPHA_COL
    seed: int = settings.SEED
    tau_con: float = settings.TAU_CON
    collision_metric: str = settings.COLLISION_METRICS[0]
    init_std: float = settings.INIT_STD
    focal_alpha: float = settings.FOCAL_ALPHA
    focal_gamma: float = settings.FOCAL_GAMMA
    use_centerness: bool = False
    recall_iou_thresh: float = settings.RECALL_IOU_THRESH

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> MiningConfig:
        """
        Builds a configuration from raw string values, e.g. a parsed
        configuration file.

        Raises
        ------
        ConfigError
            On unknown keys or values that cannot be converted.
        """
        logger.debug(f"Building MiningConfig from keys {sorted(raw)}")
        kinds = {f.name: f.type for f in fields(cls) if f.init}
        unknown = sorted(set(raw) - set(kinds))
        if unknown:
            logger.info(f"Unknown configuration keys: {unknown}")
            raise ConfigError(f"unknown configuration keys: {unknown}")
        values = {name: _coerce(name, kinds[name], value)
                  for name, value in raw.items()}
        return cls(**values)

    def with_overrides(self, **overrides) -> MiningConfig:
        """
        Returns a copy with every non-None override applied.
        """
        overrides = {key: value for key, value in overrides.items()
                     if value is not None}
        return replace(self, **overrides)


def validate_config(cfg: MiningConfig) -> MiningConfig:
    """
    Checks every invariant of a mining configuration.

    Parameters
    ----------
    cfg : MiningConfig
        Configuration to check.

    Returns
    -------
    MiningConfig
        `cfg` itself, unchanged.

    Raises
    ------
    ConfigError
        With a distinct message for each violated invariant.

    Example
    -------
    >>> validate_config(MiningConfig()) == MiningConfig()
    True
    """
    logger.debug(f"Validating configuration {cfg}")
    checks = [
        (cfg.K >= 1, "class count must be positive"),
        (cfg.C >= 1, "feature dimension must be positive"),
        (cfg.O >= 1, "prototype count must be positive"),
        (math.isfinite(cfg.kappa) and cfg.kappa > 0,
         "temperature must be positive"),
        (cfg.sinkhorn_steps >= 1, "sinkhorn steps must be positive"),
        (0.0 <= cfg.mu <= 1.0, "momentum out of range"),
        (cfg.warmup_iters >= 0, "warm-up iterations must be non-negative"),
    ]
    for name in ("alpha_pro", "alpha_cls", "alpha_iou", "alpha_col"):
        value = getattr(cfg, name)
        checks.append((0.0 <= value <= 1.0, f"threshold {name} out of range"))
    checks += [
        (math.isfinite(cfg.tau_con) and cfg.tau_con > 0,
         "contrastive temperature must be positive"),
        (cfg.collision_metric in settings.COLLISION_METRICS,
         f"unknown collision metric {cfg.collision_metric!r}"),
        (cfg.init_std > 0, "initialization std must be positive"),
        (0.0 <= cfg.focal_alpha <= 1.0, "focal alpha out of range"),
        (cfg.focal_gamma >= 0, "focal gamma must be non-negative"),
        (0.0 <= cfg.recall_iou_thresh <= 1.0,
         "recall IoU threshold out of range"),
    ]
    for ok, message in checks:
        if not ok:
            logger.info(f"Invalid configuration: {message}")
            raise ConfigError(message)
    return cfg


def normalize_features(scene: SceneRecord) -> SceneRecord:
    """
    L2-normalizes every proposal feature of a scene.

    All other fields are kept. Features that already have unit norm are left
    bit-for-bit unchanged, so applying the function twice equals applying it
    once.

    Parameters
    ----------
    scene : SceneRecord
        Scene with finite, nonzero features.

    Returns
    -------
    SceneRecord
        A new scene whose features have unit L2 norm.

    Raises
    ------
    FeatureError
        If a feature has zero norm, naming the proposal index.
    """
    logger.debug(f"Normalizing features of scene {scene.scene_id}")
    proposals = []
    for index, proposal in enumerate(scene.proposals):
        if not np.any(proposal.feature):
            logger.info(f"Zero feature in scene {scene.scene_id}, "
                        f"proposal {index}")
            raise FeatureError(f"scene {scene.scene_id}: proposal {index} "
                               f"has a zero-norm feature")
        proposals.append(replace(proposal,
                                 feature=unit_normalize(proposal.feature)))
    return replace(scene, proposals=tuple(proposals))
