"""
Module containing the exchange formats of `proto_miner`.

- Corpus directories: a ``manifest.json`` and one JSON Lines file per scene,
  plus optional detector predictions.
- Label files: the three label families of a scene, one label per line.
- Prototype banks: the ``PROTOBANK v1`` text format.
- Sparse splits of fully annotated corpora and the synthetic corpus used to
  exercise the engine end to end.

Floats are always written with Python's shortest round-trip representation so
that reading a file back gives the same bits.
"""
from __future__ import annotations
from dataclasses import dataclass, field, replace
import json
import logging
import math
import re
from pathlib import Path
import numpy as np
import pandas as pd
from proto_miner import settings
from proto_miner.box_geom import overlap
from proto_miner.model import (Box3D, LabelSet, ObjectLabel, PrototypeLabel,
                               Proposal, PseudoLabel, SceneRecord)
from proto_miner.proto_bank import PrototypeBank
from proto_miner.refine import Prediction, predictions_from_scores
from proto_miner.utils import (DimensionError, MissingGroundTruthError,
                               SchemaError, parallel_map)

logger = logging.getLogger(__name__)

_BANK_HEADER = re.compile(
    r"^PROTOBANK v1 K=(\d+) O=(\d+) C=(\d+) iter=(\d+) mu=(\S+)"
    r"(?: counts=(\d+(?:,\d+)*))?$")


@dataclass(frozen=True)
class CorpusManifest:
    """
    Description of a corpus directory.

    Attributes
    ----------
    format_version : int
        Version of the exchange format, currently 1.
    K, C : int
        Class count and feature size shared by every scene.
    class_names : list of str
        One name per class id.
    scenes : list of str
        Scene file names relative to the corpus directory, in corpus order.
    predictions : str, optional
        Name of the sub-directory holding detector predictions.
    """

    format_version: int
    K: int
    C: int
    class_names: list[str]
    scenes: list[str]
    predictions: str | None = None

    def __post_init__(self) -> None:
        if len(self.class_names) != self.K:
            raise SchemaError(f"manifest lists {len(self.class_names)} class "
                              f"names for K={self.K}")
        if self.format_version != settings.FORMAT_VERSION:
            raise SchemaError(f"unsupported format_version "
                              f"{self.format_version}")

    def to_dict(self) -> dict:
        record = {"format_version": self.format_version, "K": self.K,
                  "C": self.C, "class_names": list(self.class_names),
                  "scenes": list(self.scenes)}
        if self.predictions is not None:
            record["predictions"] = self.predictions
        return record


@dataclass(frozen=True)
class Corpus:
    """
    A manifest, its scenes and, optionally, detector predictions per scene id.
    """

    manifest: CorpusManifest
    scenes: list[SceneRecord]
    predictions: dict[str, list[Prediction]] | None = field(default=None)

    @property
    def scene_ids(self) -> list[str]:
        return [scene.scene_id for scene in self.scenes]

    def predictions_for(self, scene: SceneRecord) -> list[Prediction] | None:
        if self.predictions is None:
            return None
        return self.predictions.get(scene.scene_id)


# Low-level helpers

def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def _floats(values) -> list[float]:
    return [float(value) for value in np.asarray(values).ravel().tolist()]


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def _read_lines(path) -> list[tuple[int, str]]:
    with open(path, encoding="utf-8") as handle:
        return [(number, line) for number, line in
                enumerate(handle.read().splitlines(), start=1)
                if line.strip()]


def _load_record(line: str, where: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{where}: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    return record


def _require(record: dict, name: str, where: str):
    if name not in record:
        raise SchemaError(f"{where}: missing field {name!r}")
    return record[name]


def _numbers(record: dict, name: str, where: str,
             length: int | None = None) -> list[float]:
    values = _require(record, name, where)
    if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool)
            for v in values):
        raise SchemaError(f"{where}: field {name!r} must be a list of "
                          f"numbers")
    if length is not None and len(values) != length:
        raise SchemaError(f"{where}: field {name!r} needs {length} values, "
                          f"got {len(values)}")
    return [float(value) for value in values]


def _integer(record: dict, name: str, where: str) -> int:
    value = _require(record, name, where)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise SchemaError(f"{where}: field {name!r} must be a non-negative "
                          f"integer")
    return value


def _number(record: dict, name: str, where: str) -> float:
    value = _require(record, name, where)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise SchemaError(f"{where}: field {name!r} must be a number")
    return float(value)


def _box(record: dict, where: str) -> Box3D:
    values = _numbers(record, "box", where, length=7)
    try:
        return Box3D(*values)
    except ValueError as exc:
        raise SchemaError(f"{where}: field 'box': {exc}") from exc


def _object_label(record: dict, where: str) -> ObjectLabel:
    return ObjectLabel(_integer(record, "class_id", where),
                       _box(record, where))


# Scenes

def scene_to_text(scene: SceneRecord) -> str:
    """
    Serializes a scene in its canonical JSON Lines form.

    The first line holds ``scene_id``, ``point_range`` and ``has_gt``; then
    every element of ``proposals``, ``sparse_labels`` and ``gt_labels`` gets
    its own line, tagged with that field name under ``record``. Keys come in
    a fixed order.
    """
    lines = [_dumps({"scene_id": scene.scene_id,
                     "point_range": _floats(scene.point_range),
                     "has_gt": scene.gt_labels is not None})]
    for proposal in scene.proposals:
        record = {"record": "proposals",
                  "center": _floats(proposal.center),
                  "feature": _floats(proposal.feature),
                  "scores": _floats(proposal.scores),
                  "box": proposal.box.as_list()}
        if proposal.centerness is not None:
            record["centerness"] = proposal.centerness
        lines.append(_dumps(record))
    for kind, labels in (("sparse_labels", scene.sparse_labels),
                         ("gt_labels", scene.gt_labels or ())):
        for label in labels:
            lines.append(_dumps({"record": kind, "class_id": label.class_id,
                                 "box": label.box.as_list()}))
    return "\n".join(lines) + "\n"


def write_scene(scene: SceneRecord, path) -> None:
    """
    Writes a scene file, see `scene_to_text`.
    """
    logger.debug(f"Writing scene {scene.scene_id} to {path}")
    _write_text(path, scene_to_text(scene))


def _proposal(record: dict, where: str) -> Proposal:
    centerness = record.get("centerness")
    if centerness is not None and (not isinstance(centerness, (int, float))
                                   or isinstance(centerness, bool)):
        raise SchemaError(f"{where}: field 'centerness' must be a number")
    try:
        return Proposal(feature=_numbers(record, "feature", where),
                        scores=_numbers(record, "scores", where),
                        box=_box(record, where),
                        center=_numbers(record, "center", where, length=3),
                        centerness=centerness)
    except SchemaError:
        raise
    except ValueError as exc:
        raise SchemaError(f"{where}: proposal: {exc}") from exc


def read_scene(path, n_classes: int | None = None,
               feature_dim: int | None = None) -> SceneRecord:
    """
    Reads a scene file.

    Parameters
    ----------
    path : str or Path
        Scene file in the canonical JSON Lines form.
    n_classes, feature_dim : int, optional
        Corpus K and C; when given every proposal and label is checked
        against them.

    Returns
    -------
    SceneRecord
        The scene, with features as stored (not normalized).

    Raises
    ------
    SchemaError
        On malformed content, with ``path:line`` and the field name.
    DimensionError
        If a proposal or label disagrees with `n_classes` or `feature_dim`.
    """
    logger.debug(f"Reading scene file {path}")
    lines = _read_lines(path)
    if not lines:
        raise SchemaError(f"{path}:1: empty scene file")
    number, line = lines[0]
    where = f"{path}:{number}"
    header = _load_record(line, where)
    scene_id = _require(header, "scene_id", where)
    if not isinstance(scene_id, str) or not scene_id:
        raise SchemaError(f"{where}: field 'scene_id' must be a non-empty "
                          f"string")
    point_range = _numbers(header, "point_range", where, length=6)
    has_gt = _require(header, "has_gt", where)
    if not isinstance(has_gt, bool):
        raise SchemaError(f"{where}: field 'has_gt' must be a boolean")
    proposals, sparse, gt = [], [], []
    for number, line in lines[1:]:
        where = f"{path}:{number}"
        record = _load_record(line, where)
        kind = _require(record, "record", where)
        if kind == "proposals":
            proposal = _proposal(record, where)
            _check_proposal(proposal, len(proposals), n_classes, feature_dim,
                            where)
            proposals.append(proposal)
        elif kind in ("sparse_labels", "gt_labels"):
            label = _object_label(record, where)
            if n_classes is not None and label.class_id >= n_classes:
                raise DimensionError(f"{where}: class_id {label.class_id} is "
                                     f"not below K={n_classes}")
            (sparse if kind == "sparse_labels" else gt).append(label)
        else:
            raise SchemaError(f"{where}: field 'record' must be one of "
                              f"{settings.RECORD_KINDS}, got {kind!r}")
    if gt and not has_gt:
        raise SchemaError(f"{path}: gt_labels records in a scene with "
                          f"has_gt false")
    try:
        return SceneRecord(scene_id=scene_id, proposals=proposals,
                           sparse_labels=sparse, point_range=point_range,
                           gt_labels=gt if has_gt else None)
    except DimensionError as exc:
        raise DimensionError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _check_proposal(proposal: Proposal, index: int, n_classes: int | None,
                    feature_dim: int | None, where: str) -> None:
    if feature_dim is not None and len(proposal.feature) != feature_dim:
        raise DimensionError(f"{where}: proposal {index} has feature length "
                             f"{len(proposal.feature)}, expected "
                             f"{feature_dim}")
    if n_classes is not None and len(proposal.scores) != n_classes:
        raise DimensionError(f"{where}: proposal {index} has "
                             f"{len(proposal.scores)} scores, expected "
                             f"{n_classes}")


# Labels

def labels_to_text(labels: LabelSet) -> str:
    """
    Serializes a label set: sparse, then pseudo, then prototype labels.
    """
    lines = [_dumps({"family": "sparse", "class_id": label.class_id,
                     "box": label.box.as_list()}) for label in labels.sparse]
    lines += [_dumps({"family": "pseudo", "class_id": label.class_id,
                      "box": label.box.as_list(), "score": label.score})
              for label in labels.pseudo]
    lines += [_dumps({"family": "prototype",
                      "proposal_index": label.proposal_index,
                      "class_id": label.class_id})
              for label in labels.prototype]
    return "".join(line + "\n" for line in lines)


def write_labels(labels: LabelSet, path) -> None:
    logger.debug(f"Writing {labels.counts()} labels to {path}")
    _write_text(path, labels_to_text(labels))


def read_labels(path) -> LabelSet:
    """
    Reads a label file written by `write_labels`.

    Raises
    ------
    SchemaError
        On malformed content, with ``path:line`` and the field name.
    """
    logger.debug(f"Reading label file {path}")
    sparse, pseudo, prototype = [], [], []
    for number, line in _read_lines(path):
        where = f"{path}:{number}"
        record = _load_record(line, where)
        family = _require(record, "family", where)
        try:
            if family == "sparse":
                sparse.append(_object_label(record, where))
            elif family == "pseudo":
                pseudo.append(PseudoLabel(_integer(record, "class_id", where),
                                          _box(record, where),
                                          _number(record, "score", where)))
            elif family == "prototype":
                prototype.append(PrototypeLabel(
                    _integer(record, "proposal_index", where),
                    _integer(record, "class_id", where)))
            else:
                raise SchemaError(f"{where}: field 'family' must be one of "
                                  f"{settings.FAMILIES}, got {family!r}")
        except SchemaError:
            raise
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    try:
        return LabelSet(sparse=sparse, pseudo=pseudo, prototype=prototype)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def label_path(directory, scene_id: str) -> Path:
    return Path(directory) / f"{scene_id}{settings.LABEL_SUFFIX}"


# Predictions

def predictions_to_text(predictions: list[Prediction], n_classes: int) -> str:
    """
    Serializes predictions in the proposal line schema (``box``, ``scores``,
    optional ``centerness``).

    Predictions without a score vector are written with their score at their
    class and zeros elsewhere.
    """
    lines = []
    for prediction in predictions:
        if prediction.scores is not None:
            scores = _floats(prediction.scores)
        else:
            scores = [0.0] * n_classes
            scores[prediction.class_id] = prediction.score
        record = {"box": prediction.box.as_list(), "scores": scores}
        if prediction.centerness is not None:
            record["centerness"] = prediction.centerness
        lines.append(_dumps(record))
    return "".join(line + "\n" for line in lines)


def write_predictions(predictions: list[Prediction], n_classes: int,
                      path) -> None:
    logger.debug(f"Writing {len(predictions)} predictions to {path}")
    _write_text(path, predictions_to_text(predictions, n_classes))


def read_predictions(path, n_classes: int | None = None
                     ) -> list[Prediction]:
    """
    Reads a predictions file; class is the argmax score, score the max.

    Raises
    ------
    SchemaError
        On malformed content.
    DimensionError
        If a score vector disagrees with `n_classes`.
    """
    logger.debug(f"Reading predictions file {path}")
    boxes, scores, centerness = [], [], []
    for number, line in _read_lines(path):
        where = f"{path}:{number}"
        record = _load_record(line, where)
        row = _numbers(record, "scores", where)
        if n_classes is not None and len(row) != n_classes:
            raise DimensionError(f"{where}: prediction has {len(row)} scores,"
                                 f" expected {n_classes}")
        if not row or not all(0.0 <= value <= 1.0 for value in row):
            raise SchemaError(f"{where}: field 'scores' must hold values in "
                              f"[0, 1]")
        boxes.append(_box(record, where))
        scores.append(row)
        centerness.append(record.get("centerness"))
    if not boxes:
        return []
    if len({len(row) for row in scores}) > 1:
        raise DimensionError(f"{path}: predictions disagree on the score "
                             f"length")
    return predictions_from_scores(np.array(scores), boxes, centerness)


# Manifests and corpora

def write_manifest(manifest: CorpusManifest, path) -> None:
    _write_text(path, json.dumps(manifest.to_dict(), indent=2) + "\n")


def read_manifest(path) -> CorpusManifest:
    """
    Reads and validates a ``manifest.json``.
    """
    logger.debug(f"Reading manifest {path}")
    with open(path, encoding="utf-8") as handle:
        record = _load_record(handle.read(), str(path))
    where = str(path)
    names = _require(record, "class_names", where)
    scenes = _require(record, "scenes", where)
    for name, values in (("class_names", names), ("scenes", scenes)):
        if not isinstance(values, list) or not all(
                isinstance(value, str) for value in values):
            raise SchemaError(f"{where}: field {name!r} must be a list of "
                              f"strings")
    predictions = record.get("predictions")
    if predictions is not None and not isinstance(predictions, str):
        raise SchemaError(f"{where}: field 'predictions' must be a string")
    n_classes = _integer(record, "K", where)
    feature_dim = _integer(record, "C", where)
    if n_classes == 0 or feature_dim == 0:
        raise SchemaError(f"{where}: K and C must be positive")
    return CorpusManifest(format_version=_integer(record, "format_version",
                                                  where),
                          K=n_classes, C=feature_dim, class_names=names,
                          scenes=scenes, predictions=predictions)


def load_corpus(directory, jobs: int = 1) -> Corpus:
    """
    Loads a corpus directory.

    Parameters
    ----------
    directory : str or Path
        Directory holding ``manifest.json``.
    jobs : int, optional
        Worker threads for reading scene files.

    Returns
    -------
    Corpus
        Scenes in manifest order, checked against the manifest K and C, and
        the predictions found in the predictions directory.

    Raises
    ------
    SchemaError
        If the manifest is malformed, a scene file is missing or two scenes
        share an id.
    DimensionError
        If a scene disagrees with the manifest K or C.
    """
    directory = Path(directory)
    logger.debug(f"Loading corpus {directory}")
    manifest_path = directory / settings.MANIFEST_FILE
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {settings.MANIFEST_FILE} in "
                                f"{directory}")
    manifest = read_manifest(manifest_path)
    missing = [name for name in manifest.scenes
               if not (directory / name).is_file()]
    if missing:
        raise SchemaError(f"{manifest_path}: missing scene files {missing}")
    scenes = parallel_map(
        lambda name: read_scene(directory / name, manifest.K, manifest.C),
        manifest.scenes, jobs)
    ids = [scene.scene_id for scene in scenes]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{manifest_path}: duplicate scene ids")
    predictions = None
    if manifest.predictions is not None:
        predictions = read_prediction_dir(directory / manifest.predictions,
                                          ids, manifest.K)
    return Corpus(manifest=manifest, scenes=scenes, predictions=predictions)


def read_prediction_dir(directory, scene_ids: list[str],
                        n_classes: int | None = None
                        ) -> dict[str, list[Prediction]]:
    """
    Reads ``<scene_id>.jsonl`` prediction files; scenes without a file are
    left out of the result.
    """
    directory = Path(directory)
    predictions = {}
    for scene_id in scene_ids:
        path = directory / f"{scene_id}{settings.SCENE_SUFFIX}"
        if path.is_file():
            predictions[scene_id] = read_predictions(path, n_classes)
    return predictions


def save_corpus(corpus: Corpus, directory) -> None:
    """
    Writes the manifest, every scene and the predictions of a corpus.
    """
    directory = Path(directory)
    logger.debug(f"Saving {len(corpus.scenes)} scenes to {directory}")
    manifest = corpus.manifest
    if corpus.predictions is not None and manifest.predictions is None:
        manifest = replace(manifest, predictions=settings.PREDICTIONS_DIR)
    write_manifest(manifest, directory / settings.MANIFEST_FILE)
    for name, scene in zip(manifest.scenes, corpus.scenes, strict=True):
        write_scene(scene, directory / name)
    for scene_id, predictions in (corpus.predictions or {}).items():
        write_predictions(predictions, manifest.K,
                          directory / manifest.predictions
                          / f"{scene_id}{settings.SCENE_SUFFIX}")


# Prototype banks

def bank_to_text(bank: PrototypeBank) -> str:
    """
    Serializes a bank in the ``PROTOBANK v1`` format.

    The header carries K, O, C, the iteration and mu, then the per-class
    update counts; K * O lines of C floats follow, class-major.
    """
    n_classes, n_prototypes, dim = bank.shape
    counts = ",".join(str(int(n)) for n in bank.class_update_counts)
    lines = [f"{settings.BANK_HEADER} K={n_classes} O={n_prototypes} "
             f"C={dim} iter={bank.iteration} mu={bank.mu!r} counts={counts}"]
    for vector in bank.prototypes.reshape(-1, dim):
        lines.append(" ".join(repr(value) for value in _floats(vector)))
    return "\n".join(lines) + "\n"


def write_bank(bank: PrototypeBank, path) -> None:
    logger.debug(f"Writing bank {bank.shape} at iteration {bank.iteration} "
                 f"to {path}")
    _write_text(path, bank_to_text(bank))


def read_bank(path) -> PrototypeBank:
    """
    Reads a ``PROTOBANK v1`` file.

    Raises
    ------
    SchemaError
        On a malformed header, a wrong number of lines or values, or a
        non-finite value, with ``path:line``.
    """
    logger.debug(f"Reading bank file {path}")
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    match = _BANK_HEADER.match(lines[0]) if lines else None
    if match is None:
        raise SchemaError(f"{path}:1: expected header '{settings.BANK_HEADER}"
                          f" K=<k> O=<o> C=<c> iter=<n> mu=<m>'")
    n_classes, n_prototypes, dim, iteration = (int(match.group(i))
                                               for i in range(1, 5))
    try:
        mu = float(match.group(5))
    except ValueError as exc:
        raise SchemaError(f"{path}:1: field 'mu' is not a number") from exc
    counts = ([int(n) for n in match.group(6).split(",")] if match.group(6)
              else [0] * n_classes)
    if len(counts) != n_classes:
        raise SchemaError(f"{path}:1: field 'counts' needs {n_classes} "
                          f"values")
    rows = lines[1:]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != n_classes * n_prototypes:
        raise SchemaError(f"{path}: expected {n_classes * n_prototypes} "
                          f"prototype lines, got {len(rows)}")
    values = []
    for number, row in enumerate(rows, start=2):
        tokens = row.split()
        if len(tokens) != dim:
            raise SchemaError(f"{path}:{number}: expected {dim} values, got "
                              f"{len(tokens)}")
        try:
            vector = [float(token) for token in tokens]
        except ValueError as exc:
            raise SchemaError(f"{path}:{number}: {exc}") from exc
        if not all(math.isfinite(value) for value in vector):
            raise SchemaError(f"{path}:{number}: non-finite prototype value")
        values.append(vector)
    prototypes = np.array(values, dtype=np.float64).reshape(
        n_classes, n_prototypes, dim)
    return PrototypeBank(prototypes=prototypes, iteration=iteration, mu=mu,
                         class_update_counts=counts)


def export_bank_csv(bank: PrototypeBank, class_names: list[str],
                    path) -> pd.DataFrame:
    """
    Dumps the prototypes as plain vectors for external plotting.

    Parameters
    ----------
    bank : PrototypeBank
        Bank to export.
    class_names : list of str
        One name per class.
    path : str or Path
        Destination CSV file.

    Returns
    -------
    pd.DataFrame
        The exported table: ``class_id``, ``class_name``, ``prototype`` and
        ``f0`` .. ``f{C-1}``, one row per prototype.
    """
    n_classes, n_prototypes, dim = bank.shape
    if len(class_names) != n_classes:
        raise DimensionError(f"{len(class_names)} class names for "
                             f"K={n_classes}")
    logger.debug(f"Exporting {n_classes * n_prototypes} prototypes to {path}")
    table = pd.DataFrame(bank.prototypes.reshape(-1, dim),
                         columns=[f"f{i}" for i in range(dim)])
    class_ids = np.repeat(np.arange(n_classes), n_prototypes)
    table.insert(0, "prototype", np.tile(np.arange(n_prototypes), n_classes))
    table.insert(0, "class_name", [class_names[k] for k in class_ids])
    table.insert(0, "class_id", class_ids)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, lineterminator="\n")
    return table


# Sparse splits

def _sparse_subset(gt: tuple[ObjectLabel, ...], mode: str, n: int,
                   rng: np.random.Generator) -> list[ObjectLabel]:
    if mode == "one_per_scene":
        return [gt[int(rng.integers(len(gt)))]]
    if mode == "n_per_scene":
        chosen = rng.choice(len(gt), size=min(n, len(gt)), replace=False)
        return [gt[i] for i in sorted(int(i) for i in chosen)]
    picked = []
    for class_id in sorted({label.class_id for label in gt}):
        members = [label for label in gt if label.class_id == class_id]
        picked.append(members[int(rng.integers(len(members)))])
    return picked


def sparsify(corpus: Corpus, mode: str = "one_per_scene", seed: int = 0,
             n: int = 1) -> Corpus:
    """
    Builds a sparse split by retaining a few ground-truth objects per scene.

    Parameters
    ----------
    corpus : Corpus
        Corpus whose scenes all carry ground truth.
    mode : str, optional
        ``"one_per_scene"`` (one uniformly chosen object), ``"n_per_scene"``
        (``min(n, |gt|)`` objects) or ``"one_per_class_per_scene"`` (one
        uniformly chosen instance of every class present).
    seed : int, optional
        Seed; the draw of scene i only depends on ``(seed, i)``.
    n : int, optional
        Objects per scene for ``"n_per_scene"``.

    Returns
    -------
    Corpus
        The same corpus with new sparse labels; ground truth is kept for
        evaluation.

    Raises
    ------
    ValueError
        On an unknown mode or a non-positive `n`.
    MissingGroundTruthError
        If a scene has no ground truth.
    """
    logger.debug(f"Sparsifying {len(corpus.scenes)} scenes, mode={mode}, "
                 f"seed={seed}")
    if mode not in settings.SPARSIFY_MODES:
        logger.info(f"Unknown sparsify mode {mode}")
        raise ValueError(f"unknown sparsify mode {mode!r}, expected one of "
                         f"{settings.SPARSIFY_MODES}")
    if n < 1:
        raise ValueError("n must be positive")
    scenes = []
    for index, scene in enumerate(corpus.scenes):
        if scene.gt_labels is None:
            logger.info(f"Scene {scene.scene_id} has no ground truth")
            raise MissingGroundTruthError(f"scene {scene.scene_id} has no "
                                          f"ground truth to sparsify")
        if not scene.gt_labels:
            logger.warning(f"Scene {scene.scene_id} has no ground-truth "
                           f"object; keeping it without sparse labels")
            scenes.append(replace(scene, sparse_labels=()))
            continue
        rng = np.random.default_rng([seed, index])
        scenes.append(replace(scene, sparse_labels=_sparse_subset(
            scene.gt_labels, mode, n, rng)))
    return replace(corpus, scenes=scenes)


# Synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of the synthetic corpus and its oracle detector.

    Objects sit in the cells of a square grid. Each object is either detected
    (a confident prediction, sometimes duplicated), missed with foreground
    proposal scores, or missed with background-level scores. Proposal
    features are the class direction plus isotropic noise of norm about
    `feature_noise`; class directions are orthonormal.

    Attributes
    ----------
    n_scenes, n_objects : int
        Corpus size and objects per scene.
    n_classes, feature_dim : int
        K and C, with C >= K.
    proposals_per_object, n_background, n_out_of_range : int
        Proposals emitted per object, on background and outside the range.
    feature_noise, score_noise : float
        Feature noise norm and standard deviation of the score noise.
    detect_rate, miss_low_rate : float
        Shares of detected objects and of objects missed with low scores.
    duplicate_rate, false_positive_rate : float
        Per-detection chance of a duplicate prediction and per-scene chance
        of a false-positive prediction.
    grid, cell_size : int, float
        Cells per side and cell size in meters.
    rotated : bool
        Draws random yaws instead of axis-aligned boxes.
    centerness : bool
        Attaches a centerness to proposals and predictions.
    """

    n_scenes: int = 100
    n_objects: int = 12
    n_classes: int = 4
    feature_dim: int = 16
    proposals_per_object: int = 3
    n_background: int = 12
    n_out_of_range: int = 1
    feature_noise: float = 0.3
    score_noise: float = 0.03
    detect_rate: float = 0.3
    miss_low_rate: float = 0.2
    duplicate_rate: float = 0.3
    false_positive_rate: float = 0.3
    grid: int = 4
    cell_size: float = 4.0
    rotated: bool = False
    centerness: bool = False
    class_names: tuple[str, ...] | None = None


def class_directions(n_classes: int, feature_dim: int,
                     rng: np.random.Generator) -> np.ndarray:
    """
    Draws K orthonormal directions in R^C, shape (K, C).

    Raises
    ------
    DimensionError
        If C < K.
    """
    if feature_dim < n_classes:
        logger.info(f"C={feature_dim} is smaller than K={n_classes}")
        raise DimensionError(f"orthogonal class directions need C >= K, got "
                             f"C={feature_dim}, K={n_classes}")
    basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, n_classes)))
    return basis.T.copy()


def _noisy_direction(direction: np.ndarray, noise: float,
                     rng: np.random.Generator) -> np.ndarray:
    dim = len(direction)
    vector = direction + noise * rng.standard_normal(dim) / math.sqrt(dim)
    return vector / np.linalg.norm(vector)


def _rotate(offset: np.ndarray, yaw: float) -> np.ndarray:
    cos, sin = math.cos(yaw), math.sin(yaw)
    return np.array([cos * offset[0] - sin * offset[1],
                     sin * offset[0] + cos * offset[1], offset[2]])


def _score_vector(true_class: int, top: float, n_classes: int, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    scores = top * rng.uniform(0.0, 0.5, n_classes)
    scores[true_class] = top
    if noise > 0:
        scores = scores + noise * rng.standard_normal(n_classes)
    return np.clip(scores, 0.0, 1.0)


def _synth_scene(spec: SynthSpec, directions: np.ndarray, scene_id: str,
                 rng: np.random.Generator
                 ) -> tuple[SceneRecord, list[Prediction]]:
    n_classes, dim = directions.shape
    side = spec.grid * spec.cell_size
    height = 3.0
    point_range = (0.0, 0.0, 0.0, side, side, height)
    cells = rng.permutation(spec.grid * spec.grid)
    object_cells, free_cells = cells[:spec.n_objects], cells[spec.n_objects:]

    def cell_center(cell) -> np.ndarray:
        row, col = divmod(int(cell), spec.grid)
        return np.array([(col + 0.5) * spec.cell_size,
                         (row + 0.5) * spec.cell_size])

    proposals, gt, predictions = [], [], []
    for cell in object_cells:
        class_id = int(rng.integers(n_classes))
        extent = np.array([rng.uniform(0.6, 2.0), rng.uniform(0.6, 2.0),
                           rng.uniform(0.5, 1.5)])
        xy = cell_center(cell) + rng.uniform(-0.5, 0.5, 2)
        yaw = float(rng.uniform(-math.pi, math.pi)) if spec.rotated else 0.0
        box = Box3D(xy[0], xy[1], extent[2] / 2.0, *extent, yaw)
        gt.append(ObjectLabel(class_id, box))
        fate = rng.random()
        if fate < spec.detect_rate:
            low, high = 0.6, 0.95
        elif fate < spec.detect_rate + spec.miss_low_rate:
            low, high = 0.05, 0.18
        else:
            low, high = 0.3, 0.6
        for _ in range(spec.proposals_per_object):
            relative = rng.uniform(-0.35, 0.35, 3)
            center = box.center + _rotate(relative * extent, yaw)
            proposal_box = Box3D(
                *(box.center + _rotate(rng.uniform(-0.1, 0.1, 3) * extent,
                                       yaw)),
                *(extent * rng.uniform(0.85, 1.15, 3)), yaw)
            iou = overlap(proposal_box, box).iou
            top = rng.uniform(low, high) * (0.75 + 0.25 * iou)
            proposals.append(Proposal(
                feature=_noisy_direction(directions[class_id],
                                         spec.feature_noise, rng),
                scores=_score_vector(class_id, top, n_classes,
                                     spec.score_noise, rng),
                box=proposal_box, center=center,
                centerness=(1.0 - float(np.abs(relative).max())
                            if spec.centerness else None)))
        if fate < spec.detect_rate:
            score = rng.uniform(0.7, 0.95)
            copies = 2 if rng.random() < spec.duplicate_rate else 1
            for copy in range(copies):
                jitter = rng.uniform(-0.03, 0.03, 3) * extent
                predicted = Box3D(*(box.center + _rotate(jitter, yaw)),
                                  *(extent * rng.uniform(0.97, 1.03, 3)), yaw)
                vector = rng.uniform(0.0, 0.1, n_classes)
                vector[class_id] = score - 0.05 * copy
                predictions.append(Prediction(
                    class_id, vector[class_id], predicted,
                    0.9 if spec.centerness else None,
                    tuple(vector.tolist())))
        elif fate >= spec.detect_rate + spec.miss_low_rate:
            vector = rng.uniform(0.0, 0.05, n_classes)
            vector[class_id] = rng.uniform(0.05, 0.15)
            predictions.append(Prediction(
                class_id, vector[class_id], box,
                0.5 if spec.centerness else None, tuple(vector.tolist())))

    def free_location() -> np.ndarray:
        if len(free_cells):
            xy = (cell_center(rng.choice(free_cells))
                  + rng.uniform(-0.4, 0.4, 2) * spec.cell_size)
        else:
            xy = rng.uniform(0.0, side, 2)
        return np.array([xy[0], xy[1], rng.uniform(0.1, height - 0.1)])

    for _ in range(spec.n_background):
        center = free_location()
        top = rng.uniform(0.0, 0.4)
        proposals.append(Proposal(
            feature=_noisy_direction(rng.standard_normal(dim), 0.0, rng),
            scores=_score_vector(int(rng.integers(n_classes)), top, n_classes,
                                 0.0, rng),
            box=Box3D(*center, *rng.uniform(0.3, 1.0, 3)), center=center,
            centerness=rng.uniform(0.0, 0.5) if spec.centerness else None))
    for _ in range(spec.n_out_of_range):
        center = np.array([side + rng.uniform(0.5, 2.0),
                           rng.uniform(0.0, side), height / 2.0])
        class_id = int(rng.integers(n_classes))
        proposals.append(Proposal(
            feature=_noisy_direction(directions[class_id],
                                     spec.feature_noise, rng),
            scores=_score_vector(class_id, rng.uniform(0.5, 0.8), n_classes,
                                 0.0, rng),
            box=Box3D(*center, 1.0, 1.0, 1.0), center=center,
            centerness=0.9 if spec.centerness else None))
    if rng.random() < spec.false_positive_rate:
        center = free_location()
        class_id = int(rng.integers(n_classes))
        vector = rng.uniform(0.0, 0.1, n_classes)
        vector[class_id] = rng.uniform(0.25, 0.5)
        predictions.append(Prediction(
            class_id, vector[class_id],
            Box3D(center[0], center[1], 0.5, *rng.uniform(0.6, 1.5, 2), 1.0),
            0.8 if spec.centerness else None, tuple(vector.tolist())))
    scene = SceneRecord(scene_id=scene_id, proposals=proposals,
                        sparse_labels=(), point_range=point_range,
                        gt_labels=gt)
    return scene, predictions


def synth_corpus(spec: SynthSpec, seed: int = 0) -> Corpus:
    """
    Generates a fully annotated synthetic corpus with detector predictions.

    Parameters
    ----------
    spec : SynthSpec
        Corpus and detector parameters.
    seed : int, optional
        Seed; the same seed always gives the same corpus.

    Returns
    -------
    Corpus
        Scenes with full ground truth and no sparse labels (see `sparsify`),
        plus predictions for every scene.

    Raises
    ------
    DimensionError
        If ``feature_dim < n_classes``.
    ValueError
        If the grid cannot hold the objects.
    """
    logger.debug(f"Generating synthetic corpus {spec} with seed {seed}")
    if spec.n_objects > spec.grid * spec.grid:
        raise ValueError(f"{spec.n_objects} objects do not fit a "
                         f"{spec.grid}x{spec.grid} grid")
    directions = class_directions(spec.n_classes, spec.feature_dim,
                                  np.random.default_rng(seed))
    names = (list(spec.class_names) if spec.class_names is not None
             else [f"class_{k}" for k in range(spec.n_classes)])
    scenes, predictions = [], {}
    for index in range(spec.n_scenes):
        scene_id = f"scene_{index:04d}"
        scene, preds = _synth_scene(spec, directions, scene_id,
                                    np.random.default_rng([seed, index + 1]))
        scenes.append(scene)
        predictions[scene_id] = preds
    manifest = CorpusManifest(
        format_version=settings.FORMAT_VERSION, K=spec.n_classes,
        C=spec.feature_dim, class_names=names,
        scenes=[f"{s.scene_id}{settings.SCENE_SUFFIX}" for s in scenes],
        predictions=settings.PREDICTIONS_DIR)
    return Corpus(manifest=manifest, scenes=scenes, predictions=predictions)
