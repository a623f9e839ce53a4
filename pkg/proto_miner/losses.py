"""
Loss terms of the mining module with analytic gradients.

- `info_nce`: prototype-feature contrastive loss.
- `focal_loss`: prototype classification loss.

Gradients are returned next to the values so a host trainer can inject them
into its own backward pass; prototypes are never differentiated.
"""
from __future__ import annotations
from dataclasses import dataclass, field
import logging
import numpy as np
from scipy.special import logsumexp, softmax
from proto_miner import settings
from proto_miner.model import PrototypeLabel
from proto_miner.proto_bank import PrototypeBank
from proto_miner.utils import DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossValue:
    """
    A loss value and its gradients, keyed by input name.
    """

    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)


def info_nce(anchor: np.ndarray, positive: np.ndarray,
             negatives: np.ndarray, temperature: float) -> LossValue:
    """
    Info-NCE loss of one anchor against one positive and its negatives.

    ``-log(exp(<a,p>/t) / (exp(<a,p>/t) + sum_n exp(<a,n>/t)))``, computed
    with a log-sum-exp.

    Parameters
    ----------
    anchor, positive : np.ndarray
        Unit-norm vectors of length C.
    negatives : np.ndarray
        Unit-norm vectors, shape (n, C) with n >= 1.
    temperature : float
        Softmax temperature, strictly positive.

    Returns
    -------
    LossValue
        Value and gradient with respect to ``"anchor"``.

    Raises
    ------
    ValueError
        On a non-positive temperature or an empty negative set.

    Example
    -------
    >>> value = info_nce(np.array([1.0, 0.0]), np.array([1.0, 0.0]),
    ...                  np.array([[0.0, 1.0]]), 1.0).value
    >>> round(value, 4)
    0.3133
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    anchor = np.asarray(anchor, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim == 1:
        negatives = negatives[None, :]
    if negatives.shape[0] == 0:
        raise ValueError("info_nce needs at least one negative")
    candidates = np.vstack([np.asarray(positive, dtype=np.float64),
                            negatives])
    if candidates.shape[1] != anchor.shape[0]:
        raise DimensionError("anchor and candidates differ in length")
    logits = candidates @ anchor / temperature
    value = float(logsumexp(logits) - logits[0])
    weights = softmax(logits)
    gradient = (weights @ candidates - candidates[0]) / temperature
    return LossValue(value=value, gradients={"anchor": gradient})


def focal_loss(pred_prob, target, alpha: float = settings.FOCAL_ALPHA,
               gamma: float = settings.FOCAL_GAMMA) -> LossValue:
    """
    Focal loss ``-alpha (1 - p_t)^gamma log(p_t)``.

    ``p_t`` is the predicted probability of the target: ``p`` for target 1,
    ``1 - p`` for target 0. Probabilities are clamped to
    ``[PROB_CLAMP, 1 - PROB_CLAMP]``; the gradient is zero outside that
    interval. Array inputs are summed.

    Parameters
    ----------
    pred_prob : float or np.ndarray
        Predicted probabilities.
    target : int or np.ndarray
        Binary targets of the same shape.
    alpha : float, optional
        Weight, by default `settings.FOCAL_ALPHA`.
    gamma : float, optional
        Focusing exponent, by default `settings.FOCAL_GAMMA`.

    Returns
    -------
    LossValue
        Value and gradient with respect to ``"pred_prob"``.
    """
    prob = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target)
    clamped = np.clip(prob, settings.PROB_CLAMP, 1.0 - settings.PROB_CLAMP)
    positive = target == 1
    p_t = np.where(positive, clamped, 1.0 - clamped)
    focus = (1.0 - p_t) ** gamma
    log_p = np.log(p_t)
    value = -alpha * focus * log_p
    d_pt = alpha * (gamma * (1.0 - p_t) ** (gamma - 1.0) * log_p
                    - focus / p_t) if gamma > 0 else -alpha / p_t
    gradient = np.where(positive, d_pt, -d_pt)
    gradient = np.where(clamped == prob, gradient, 0.0)
    return LossValue(value=float(value.sum()),
                     gradients={"pred_prob": gradient})


def prototype_contrastive_batch(features: np.ndarray,
                                kept_labels: list[PrototypeLabel],
                                bank: PrototypeBank,
                                temperature: float = settings.TAU_CON
                                ) -> LossValue:
    """
    Mean contrastive loss of the kept prototype labels of a scene.

    Each feature is pulled toward the prototype of its label class with the
    highest affinity and pushed away from every other prototype of the bank,
    same class included.

    Parameters
    ----------
    features : np.ndarray
        E x C unit-norm features, row e belonging to ``kept_labels[e]``.
    kept_labels : list of PrototypeLabel
        Labels produced by prototype label matching.
    bank : PrototypeBank
        Warmed-up bank snapshot.
    temperature : float, optional
        Contrastive temperature, by default `settings.TAU_CON`.

    Returns
    -------
    LossValue
        Mean value and gradient with respect to ``"features"`` (E x C). An
        empty label set gives 0 with an empty gradient.
    """
    n_classes, n_prototypes, dim = bank.shape
    features = np.asarray(features, dtype=np.float64).reshape(-1, dim)
    logger.debug(f"Contrastive batch over {len(kept_labels)} labels")
    if len(kept_labels) == 0:
        return LossValue(value=0.0,
                         gradients={"features": np.zeros((0, dim))})
    if len(features) != len(kept_labels):
        raise DimensionError(f"{len(features)} features for "
                             f"{len(kept_labels)} labels")
    flat = bank.prototypes.reshape(-1, dim)
    total = 0.0
    gradient = np.zeros_like(features)
    for row, (feature, label) in enumerate(zip(features, kept_labels)):
        best = int(np.argmax(bank.prototypes[label.class_id] @ feature))
        positive_index = label.class_id * n_prototypes + best
        negatives = np.delete(flat, positive_index, axis=0)
        if len(negatives) == 0:
            raise ValueError("a bank with one prototype has no negatives")
        loss = info_nce(feature, flat[positive_index], negatives, temperature)
        total += loss.value
        gradient[row] = loss.gradients["anchor"]
    count = len(kept_labels)
    return LossValue(value=total / count,
                     gradients={"features": gradient / count})


def prototype_classification_batch(scores: np.ndarray,
                                   kept_labels: list[PrototypeLabel],
                                   alpha: float = settings.FOCAL_ALPHA,
                                   gamma: float = settings.FOCAL_GAMMA
                                   ) -> LossValue:
    """
    Focal classification loss of the kept prototype labels of a scene.

    Every labeled proposal is trained toward a one-hot target over the K
    classes; the value is the mean over labeled proposals of the summed
    per-class focal loss.

    Parameters
    ----------
    scores : np.ndarray
        N x K detector probabilities of the scene.
    kept_labels : list of PrototypeLabel
        Prototype labels pointing into the rows of `scores`.

    Returns
    -------
    LossValue
        Value and gradient with respect to ``"scores"`` (N x K, zero on
        unlabeled rows).
    """
    scores = np.asarray(scores, dtype=np.float64)
    gradient = np.zeros_like(scores)
    if len(kept_labels) == 0:
        return LossValue(value=0.0, gradients={"scores": gradient})
    rows = np.array([label.proposal_index for label in kept_labels])
    targets = np.zeros((len(rows), scores.shape[1]), dtype=np.int64)
    targets[np.arange(len(rows)),
            [label.class_id for label in kept_labels]] = 1
    loss = focal_loss(scores[rows], targets, alpha, gamma)
    gradient[rows] = loss.gradients["pred_prob"] / len(rows)
    return LossValue(value=loss.value / len(rows),
                     gradients={"scores": gradient})


def total_loss(*terms: LossValue) -> float:
    """
    Unweighted sum of loss values, the way the stage objective adds its terms.
    """
    return float(sum(term.value for term in terms))
