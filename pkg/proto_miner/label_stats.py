"""
Module measuring the quality of mined labels against full ground truth.

Precision of pseudo and prototype labels and the mean average recall (mAR)
of every combination of label families are accumulated as per-scene tallies
(pandas DataFrames indexed by class) that merge by plain summation.
"""
from __future__ import annotations
from dataclasses import dataclass
from functools import reduce
from itertools import combinations
import logging
import numpy as np
import pandas as pd
from proto_miner import settings
from proto_miner.box_geom import contains_point, overlap
from proto_miner.model import LabelSet, MiningConfig, SceneRecord
from proto_miner.proto_bank import PrototypeBank
from proto_miner.refine import Prediction, cooperate, make_pseudo_labels
from proto_miner.utils import (DimensionError, MissingGroundTruthError,
                               parallel_map)

logger = logging.getLogger(__name__)

FAMILY_SUBSETS = [subset for size in range(1, len(settings.FAMILIES) + 1)
                  for subset in combinations(settings.FAMILIES, size)]


def family_key(families) -> str:
    """
    Canonical column name of a family subset, e.g. ``"sparse+pseudo"``.

    Raises
    ------
    ValueError
        On an empty subset or an unknown family.
    """
    families = set(families)
    if not families:
        logger.info("Empty label family set")
        raise ValueError("at least one label family is needed")
    unknown = sorted(families - set(settings.FAMILIES))
    if unknown:
        logger.info(f"Unknown label families: {unknown}")
        raise ValueError(f"unknown label families: {unknown}")
    return "+".join(f for f in settings.FAMILIES if f in families)


TALLY_COLUMNS = ["gt", "sparse_total", "pseudo_total", "pseudo_correct",
                 "prototype_total", "prototype_correct"] + [
    f"recall:{family_key(subset)}" for subset in FAMILY_SUBSETS]


def _require_gt(scene: SceneRecord) -> tuple:
    if scene.gt_labels is None:
        logger.info(f"Scene {scene.scene_id} has no ground truth")
        raise MissingGroundTruthError(f"scene {scene.scene_id} has no "
                                      f"ground-truth labels")
    return scene.gt_labels


def _infer_classes(labels: LabelSet, scene: SceneRecord) -> int:
    if scene.proposals:
        return len(scene.proposals[0].scores)
    ids = [label.class_id for label in (scene.gt_labels or ())]
    ids += [label.class_id for label in labels.sparse + labels.pseudo
            + labels.prototype]
    return max(ids, default=-1) + 1


def match_pseudo_labels(labels: LabelSet, scene: SceneRecord,
                        iou_thresh: float = settings.RECALL_IOU_THRESH
                        ) -> list[bool]:
    """
    Greedy one-to-one matching of pseudo labels to ground-truth objects.

    Every same-class pair with IoU at least `iou_thresh` is a candidate;
    pairs are taken by decreasing IoU (ties by pseudo then ground-truth
    index) and a pair is accepted when neither side is matched yet.

    Returns
    -------
    list of bool
        Whether each pseudo label, in order, was matched.
    """
    gt = _require_gt(scene)
    pairs = []
    for i, pseudo in enumerate(labels.pseudo):
        for j, truth in enumerate(gt):
            if pseudo.class_id != truth.class_id:
                continue
            iou = overlap(pseudo.box, truth.box).iou
            if iou >= iou_thresh:
                pairs.append((-iou, i, j))
    matched = [False] * len(labels.pseudo)
    used = set()
    for _, i, j in sorted(pairs):
        if not matched[i] and j not in used:
            matched[i] = True
            used.add(j)
    return matched


def _precision_series(correct: np.ndarray, total: np.ndarray) -> pd.Series:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    return pd.Series(values, index=pd.RangeIndex(len(total), name="class_id"))


def pseudo_precision(labels: LabelSet, scene: SceneRecord,
                     iou_thresh: float = settings.RECALL_IOU_THRESH,
                     n_classes: int | None = None) -> pd.Series:
    """
    Per-class precision of the pseudo labels of a scene.

    Parameters
    ----------
    labels : LabelSet
        Labels of `scene`.
    scene : SceneRecord
        Scene carrying full ground truth.
    iou_thresh : float, optional
        IoU needed for a match, by default 0.25.
    n_classes : int, optional
        Length of the result; inferred from the scene when omitted.

    Returns
    -------
    pd.Series
        Precision indexed by class id, NaN for classes without pseudo labels
        (excluded from means).

    Raises
    ------
    MissingGroundTruthError
        If the scene has no ground truth.
    """
    tally = scene_tally(labels, scene, iou_thresh, n_classes)
    return _precision_series(tally["pseudo_correct"].to_numpy(),
                             tally["pseudo_total"].to_numpy())


def prototype_precision(labels: LabelSet, scene: SceneRecord,
                        n_classes: int | None = None) -> pd.Series:
    """
    Per-class precision of the prototype labels of a scene.

    A prototype label ``(i, k)`` is correct when proposal i is centered
    inside a ground-truth box of class k.
    """
    tally = scene_tally(labels, scene, n_classes=n_classes)
    return _precision_series(tally["prototype_correct"].to_numpy(),
                             tally["prototype_total"].to_numpy())


def _recalled(labels: LabelSet, scene: SceneRecord, iou_thresh: float
              ) -> dict[str, np.ndarray]:
    gt = _require_gt(scene)
    recalled = {family: np.zeros(len(gt), dtype=bool)
                for family in settings.FAMILIES}
    for j, truth in enumerate(gt):
        recalled["sparse"][j] = any(
            label.class_id == truth.class_id
            and overlap(label.box, truth.box).iou >= iou_thresh
            for label in labels.sparse)
        recalled["pseudo"][j] = any(
            label.class_id == truth.class_id
            and overlap(label.box, truth.box).iou >= iou_thresh
            for label in labels.pseudo)
        recalled["prototype"][j] = any(
            label.class_id == truth.class_id
            and contains_point(truth.box,
                               scene.proposals[label.proposal_index].center)
            for label in labels.prototype)
    return recalled


def scene_tally(labels: LabelSet, scene: SceneRecord,
                iou_thresh: float = settings.RECALL_IOU_THRESH,
                n_classes: int | None = None) -> pd.DataFrame:
    """
    Counts everything the quality report needs for one scene.

    Parameters
    ----------
    labels : LabelSet
        Labels mined for `scene`.
    scene : SceneRecord
        Scene carrying full ground truth.
    iou_thresh : float, optional
        IoU for boxed matches, by default 0.25.
    n_classes : int, optional
        Number of rows; inferred when omitted.

    Returns
    -------
    pd.DataFrame
        One row per class id with integer columns ``gt``, ``sparse_total``,
        ``pseudo_total``, ``pseudo_correct``, ``prototype_total``,
        ``prototype_correct`` and one ``recall:<families>`` column per family
        subset.
    """
    logger.debug(f"Tallying labels of scene {scene.scene_id}")
    gt = _require_gt(scene)
    for label in labels.prototype:
        if label.proposal_index >= scene.n_proposals:
            raise DimensionError(f"scene {scene.scene_id}: prototype label "
                                 f"points at proposal {label.proposal_index}"
                                 f" of {scene.n_proposals}")
    if n_classes is None:
        n_classes = _infer_classes(labels, scene)
    for family in settings.FAMILIES:
        for label in getattr(labels, family):
            if not 0 <= label.class_id < n_classes:
                logger.info(f"Scene {scene.scene_id} has a {family} label "
                            f"of class {label.class_id}")
                raise DimensionError(f"scene {scene.scene_id}: {family} "
                                     f"label class {label.class_id} outside"
                                     f" 0..{n_classes - 1}")
    counts = {name: np.zeros(n_classes, dtype=np.int64)
              for name in TALLY_COLUMNS}
    gt_classes = np.array([truth.class_id for truth in gt], dtype=np.int64)
    np.add.at(counts["gt"], gt_classes, 1)
    for label in labels.sparse:
        counts["sparse_total"][label.class_id] += 1
    for label, ok in zip(labels.pseudo,
                         match_pseudo_labels(labels, scene, iou_thresh)):
        counts["pseudo_total"][label.class_id] += 1
        counts["pseudo_correct"][label.class_id] += int(ok)
    for label in labels.prototype:
        center = scene.proposals[label.proposal_index].center
        ok = any(truth.class_id == label.class_id
                 and contains_point(truth.box, center) for truth in gt)
        counts["prototype_total"][label.class_id] += 1
        counts["prototype_correct"][label.class_id] += int(ok)
    recalled = _recalled(labels, scene, iou_thresh)
    for subset in FAMILY_SUBSETS:
        hit = np.zeros(len(gt), dtype=bool)
        for family in subset:
            hit |= recalled[family]
        np.add.at(counts[f"recall:{family_key(subset)}"], gt_classes[hit], 1)
    return pd.DataFrame(counts,
                        index=pd.RangeIndex(n_classes, name="class_id"))


def merge_tallies(tallies: list[pd.DataFrame]) -> pd.DataFrame:
    """
    Sums per-scene tallies; the merge is associative and order-free.
    """
    if not tallies:
        raise ValueError("no tallies to merge")
    return reduce(lambda a, b: a.add(b, fill_value=0), tallies).astype(
        np.int64)


def _as_pairs(labels, scenes) -> list[tuple[LabelSet, SceneRecord]]:
    if isinstance(scenes, SceneRecord):
        return [(labels, scenes)]
    return list(zip(labels, scenes, strict=True))


def per_class_recall(tally: pd.DataFrame, families) -> pd.Series:
    """
    Recall of each class for a family subset; NaN for classes without
    ground-truth objects.
    """
    key = family_key(families)
    gt = tally["gt"].to_numpy()
    return _precision_series(tally[f"recall:{key}"].to_numpy(), gt)


def recall_with(labels, scenes, families,
                iou_thresh: float = settings.RECALL_IOU_THRESH,
                n_classes: int | None = None) -> float:
    """
    Mean average recall of the ground truth by a subset of label families.

    A ground-truth object is recalled when an enabled sparse or pseudo label
    of its class overlaps it with IoU at least `iou_thresh`, or when an
    enabled prototype label of its class sits on a proposal centered inside
    it. mAR is the unweighted mean of the per-class recalls over classes with
    at least one ground-truth object.

    Parameters
    ----------
    labels : LabelSet or list of LabelSet
        Labels of one scene or of every scene.
    scenes : SceneRecord or list of SceneRecord
        The matching scenes, with ground truth.
    families : iterable of str
        Non-empty subset of ``{"sparse", "pseudo", "prototype"}``.
    iou_thresh : float, optional
        IoU for boxed matches, by default 0.25.
    n_classes : int, optional
        Class count; inferred when omitted.

    Returns
    -------
    float
        mAR in [0, 1], NaN when there is no ground-truth object at all.

    Raises
    ------
    ValueError
        On an empty or unknown family set.
    MissingGroundTruthError
        If a scene has no ground truth.

    Example
    -------
    >>> recall_with(label_set, scene, ["sparse", "pseudo"])  # doctest: +SKIP
    0.5
    """
    family_key(families)
    pairs = _as_pairs(labels, scenes)
    if n_classes is None:
        n_classes = max((_infer_classes(ls, sc) for ls, sc in pairs),
                        default=0)
    logger.debug(f"Recall of {sorted(families)} over {len(pairs)} scenes")
    tallies = [scene_tally(ls, sc, iou_thresh, n_classes) for ls, sc in pairs]
    if not tallies:
        return float("nan")
    recall = per_class_recall(merge_tallies(tallies), families)
    return float(recall.mean()) if recall.notna().any() else float("nan")


@dataclass(frozen=True, eq=False)
class QualityReport:
    """
    Corpus-level label statistics.

    Attributes
    ----------
    counts : pd.Series
        Number of labels of each family.
    precision : pd.DataFrame
        Per-class precision of pseudo and prototype labels, NaN where a class
        has no label of that family.
    recall : pd.DataFrame
        Per-class recall of every family subset, NaN for classes without
        ground truth.
    table : pd.DataFrame
        The four-row recall table (sparse / sparse+prototype / sparse+pseudo
        / all three) with check marks and mAR.
    """

    counts: pd.Series
    precision: pd.DataFrame
    recall: pd.DataFrame
    table: pd.DataFrame

    def mean_precision(self, family: str) -> float:
        return float(self.precision[family].mean())

    def mar(self, families) -> float:
        return float(self.recall[family_key(families)].mean())


def build_report(tally: pd.DataFrame, class_names: list[str] | None = None
                 ) -> QualityReport:
    """
    Turns a merged tally into a `QualityReport`.

    Parameters
    ----------
    tally : pd.DataFrame
        Output of `merge_tallies`.
    class_names : list of str, optional
        Names used as row labels; class ids are used when omitted.

    Returns
    -------
    QualityReport
        Counts, precision, recall and the four-row recall table.
    """
    logger.debug(f"Building report over {len(tally)} classes")
    names = (list(class_names) if class_names is not None
             else [str(k) for k in tally.index])
    counts = pd.Series({
        "sparse": int(tally["sparse_total"].sum()),
        "pseudo": int(tally["pseudo_total"].sum()),
        "prototype": int(tally["prototype_total"].sum()),
        "gt": int(tally["gt"].sum())}, name="count")
    precision = pd.DataFrame({
        "pseudo": _precision_series(tally["pseudo_correct"].to_numpy(),
                                    tally["pseudo_total"].to_numpy()).values,
        "prototype": _precision_series(
            tally["prototype_correct"].to_numpy(),
            tally["prototype_total"].to_numpy()).values}, index=names)
    recall = pd.DataFrame({family_key(s): per_class_recall(tally, s).values
                           for s in FAMILY_SUBSETS}, index=names)
    rows = []
    for families in settings.RECALL_TABLE_ROWS:
        marks = ["x" if family in families else ""
                 for family in ("sparse", "prototype", "pseudo")]
        rows.append(marks + [float(recall[family_key(families)].mean())])
    table = pd.DataFrame(rows, columns=settings.RECALL_TABLE_COLUMNS,
                         index=pd.RangeIndex(1, len(rows) + 1, name="Number"))
    return QualityReport(counts=counts, precision=precision, recall=recall,
                         table=table)


def evaluate_corpus(scenes: list[SceneRecord], label_sets: list[LabelSet],
                    n_classes: int, class_names: list[str] | None = None,
                    iou_thresh: float = settings.RECALL_IOU_THRESH,
                    jobs: int = 1) -> QualityReport:
    """
    Tallies every scene (in parallel when `jobs` > 1) and builds the report.

    Raises
    ------
    MissingGroundTruthError
        If a scene has no ground truth.
    """
    logger.debug(f"Evaluating {len(scenes)} scenes with jobs={jobs}")
    pairs = _as_pairs(label_sets, scenes)
    if not pairs:
        raise ValueError("cannot evaluate an empty corpus")
    tallies = parallel_map(
        lambda pair: scene_tally(pair[0], pair[1], iou_thresh, n_classes),
        pairs, jobs)
    return build_report(merge_tallies(tallies), class_names)


def _format_float(value: float) -> str:
    return f"{value:.4f}"


def report_to_text(report: QualityReport) -> str:
    """
    Renders a report as a plain-text document with the sections
    ``# counts``, ``# precision`` and ``# recall (mAR)``.
    """
    sections = [
        "# counts",
        report.counts.to_frame().to_string(),
        "",
        "# precision",
        report.precision.to_string(float_format=_format_float,
                                   na_rep="n/a"),
        f"mean pseudo {_format_float(report.mean_precision('pseudo'))} "
        f"mean prototype "
        f"{_format_float(report.mean_precision('prototype'))}",
        "",
        "# recall (mAR)",
        report.table.to_string(float_format=_format_float),
    ]
    return "\n".join(sections) + "\n"


def label_histogram(scenes: list[SceneRecord],
                    class_names: list[str]) -> pd.DataFrame:
    """
    Counts retained sparse labels and ground-truth objects per class.

    Example
    -------
    >>> label_histogram(scenes, ["chair", "table"])  # doctest: +SKIP
           sparse  gt
    chair       3  10
    table       1   4
    """
    logger.debug(f"Label histogram over {len(scenes)} scenes")
    sparse = np.zeros(len(class_names), dtype=np.int64)
    gt = np.zeros(len(class_names), dtype=np.int64)
    for scene in scenes:
        for label in scene.sparse_labels:
            sparse[label.class_id] += 1
        for label in scene.gt_labels or ():
            gt[label.class_id] += 1
    return pd.DataFrame({"sparse": sparse, "gt": gt},
                        index=list(class_names))


SWEEP_FAMILIES = {"alpha_pro": "prototype", "alpha_cls": "pseudo"}


def threshold_sweep(scenes: list[SceneRecord],
                    predictions: list[list[Prediction]],
                    bank: PrototypeBank, cfg: MiningConfig,
                    parameter: str = "alpha_pro",
                    thresholds: list[float] = settings.SWEEP_THRESHOLDS,
                    jobs: int = 1) -> pd.DataFrame:
    """
    Re-runs cooperative refinement for every value of one threshold.

    Parameters
    ----------
    scenes : list of SceneRecord
        Normalized scenes, with ground truth when recall is wanted.
    predictions : list of list of Prediction
        Detector predictions of every scene.
    bank : PrototypeBank
        Read-only bank snapshot.
    cfg : MiningConfig
        Base configuration; only `parameter` changes between rows.
    parameter : str, optional
        ``"alpha_pro"`` (prototype labels) or ``"alpha_cls"`` (pseudo
        labels).
    thresholds : list of float, optional
        Values to sweep.
    jobs : int, optional
        Worker threads over scenes.

    Returns
    -------
    pd.DataFrame
        One row per threshold with the pseudo and prototype label counts and,
        when every scene has ground truth, the mAR of sparse plus the swept
        family and of all three families.
    """
    if parameter not in SWEEP_FAMILIES:
        logger.info(f"Cannot sweep {parameter}")
        raise ValueError(f"can only sweep {sorted(SWEEP_FAMILIES)}, got "
                         f"{parameter!r}")
    logger.debug(f"Sweeping {parameter} over {thresholds}")
    family = SWEEP_FAMILIES[parameter]
    with_gt = bool(scenes) and all(s.gt_labels is not None for s in scenes)
    rows = []
    for threshold in thresholds:
        swept = cfg.with_overrides(**{parameter: threshold})

        def run(pair, swept=swept):
            scene, preds = pair
            return cooperate(scene, make_pseudo_labels(preds, scene, swept),
                             bank, swept)

        label_sets = parallel_map(run, list(zip(scenes, predictions)), jobs)
        row = {parameter: threshold,
               "pseudo": sum(len(ls.pseudo) for ls in label_sets),
               "prototype": sum(len(ls.prototype) for ls in label_sets)}
        if with_gt:
            tally = merge_tallies([scene_tally(ls, sc, cfg.recall_iou_thresh,
                                               cfg.K)
                                   for ls, sc in zip(label_sets, scenes)])
            row[f"mAR sparse+{family}"] = float(per_class_recall(
                tally, ["sparse", family]).mean())
            row["mAR all"] = float(per_class_recall(
                tally, settings.FAMILIES).mean())
        rows.append(row)
    return pd.DataFrame(rows)
