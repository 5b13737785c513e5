# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import logging
import typing
from dataclasses import dataclass

import numpy as np

from pyrepack._utils import format_float
from pyrepack.classifier import (
    DecisionThreshold,
    Model,
    check_vector,
    predict_proba,
    predict_proba_matrix,
)
from pyrepack.exceptions import (
    DetectionError,
    FingerprintMismatchError,
    InvariantViolation,
    RepackError,
)
from pyrepack.features import FeatureVector, Label, LabeledDataset, nullify
from pyrepack.ranking import RankedBenignFeatures, top_k

log = logging.getLogger(__name__)

DEFAULT_K = 6
NOT_APPLIED = "NA"
REPORT_COLUMNS = "app_id,original_proba,followup_proba,final_label,diverged,delta"


@dataclass(frozen=True)
class DetectionResult:
    """
    The outcome of the metamorphic check on one app.

    followup_proba and delta are None when the app was already classified as
    malware, the relation is only applied to benign predictions.
    applied_features holds the top-k features that were actually present and
    switched off.
    """

    app_id: str
    original_proba: float
    followup_proba: typing.Optional[float]
    applied_features: typing.FrozenSet[int]
    final_label: str
    diverged: bool
    delta: typing.Optional[float]

    def __post_init__(self) -> None:
        if (self.followup_proba is None) != (self.delta is None):
            raise InvariantViolation("followup_proba and delta must both be set or both be absent")
        if self.followup_proba is None and (self.diverged or self.applied_features):
            raise InvariantViolation("Result for '%s' diverged without a follow-up prediction" % self.app_id)
        if self.final_label not in (Label.BENIGN, Label.MALWARE):
            raise InvariantViolation("Invalid final label '%s'" % self.final_label)
        if self.diverged and self.final_label != Label.MALWARE:
            raise InvariantViolation("Result for '%s' diverged but is not labeled malware" % self.app_id)


def _check_rank(m: Model, r: RankedBenignFeatures) -> None:
    if r.schema_fingerprint != m.schema_fingerprint:
        raise FingerprintMismatchError(m.schema_fingerprint, r.schema_fingerprint, "ranked benign features")


def _result(
    app_id: str,
    original: float,
    followup: typing.Optional[float],
    applied: typing.FrozenSet[int],
    t: DecisionThreshold,
) -> DetectionResult:
    if followup is None:
        return DetectionResult(app_id, original, None, frozenset(), Label.MALWARE, False, None)

    diverged = followup >= t.delta
    delta = 0.0 if not applied else followup - original
    return DetectionResult(
        app_id=app_id,
        original_proba=original,
        followup_proba=followup,
        applied_features=applied,
        final_label=Label.MALWARE if diverged else Label.BENIGN,
        diverged=diverged,
        delta=delta,
    )


def detect(
    m: Model,
    v: FeatureVector,
    r: RankedBenignFeatures,
    k: int = DEFAULT_K,
    t: typing.Optional[DecisionThreshold] = None,
) -> DetectionResult:
    """
    Classifies an app and, when it looks benign, classifies it again with the
    top-k benign features switched off. A benign prediction that turns into a
    malware prediction is flagged as likely repackaged malware. An app
    predicted as malware keeps that label and the follow-up is skipped.

    :param m: The trained model.
    :param v: The app to check.
    :param r: The ranked benign features of the development set.
    :param k: The number of top ranked features to switch off.
    :param t: The decision threshold, defaults to 0.5.
    :return: The DetectionResult.
    """
    t = t or DecisionThreshold()
    check_vector(m, v)
    _check_rank(m, r)
    features = top_k(r, k)

    original = predict_proba(m, v)
    if original >= t.delta:
        return _result(v.app_id, original, None, frozenset(), t)

    followup_vector = nullify(v, features)
    if followup_vector is v:
        return _result(v.app_id, original, original, frozenset(), t)

    applied = frozenset(i for i in features if v.bits[i])
    return _result(v.app_id, original, predict_proba(m, followup_vector), applied, t)


def probability_delta(m: Model, v: FeatureVector, r: RankedBenignFeatures, k: int = DEFAULT_K) -> float:
    """
    How far switching off the top-k benign features moves the malware
    probability, computed whatever the original prediction was.
    """
    check_vector(m, v)
    _check_rank(m, r)
    followup_vector = nullify(v, top_k(r, k))
    if followup_vector is v:
        return 0.0
    return predict_proba(m, followup_vector) - predict_proba(m, v)


def _followup_matrix(
    m: Model,
    dataset: LabeledDataset,
    r: RankedBenignFeatures,
    k: int,
) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dataset.schema_fingerprint != m.schema_fingerprint:
        raise FingerprintMismatchError(m.schema_fingerprint, dataset.schema_fingerprint, "dataset")
    _check_rank(m, r)
    features = np.array(sorted(top_k(r, k)), dtype=np.int64)

    x = dataset.matrix()
    original = predict_proba_matrix(m, x) if len(dataset) else np.zeros(0)
    if features.size == 0 or len(dataset) == 0:
        return original, original.copy(), np.zeros(len(dataset), dtype=bool)

    changed = x[:, features].any(axis=1)
    followup = original.copy()
    if changed.any():
        x_followup = x[changed].copy()
        x_followup[:, features] = 0.0
        followup[changed] = predict_proba_matrix(m, x_followup)

    return original, followup, changed


def probability_deltas(m: Model, dataset: LabeledDataset, r: RankedBenignFeatures, k: int = DEFAULT_K) -> np.ndarray:
    # Batch form of probability_delta, exactly 0.0 where nothing was switched off
    original, followup, changed = _followup_matrix(m, dataset, r, k)
    deltas = np.zeros(len(dataset))
    deltas[changed] = followup[changed] - original[changed]
    return deltas


def detect_batch(
    m: Model,
    dataset: LabeledDataset,
    r: RankedBenignFeatures,
    k: int = DEFAULT_K,
    t: typing.Optional[DecisionThreshold] = None,
) -> typing.List[DetectionResult]:
    """
    Runs detect over every sample of a dataset, the model is evaluated on the
    whole batch at once. Results are in the dataset order.

    :param m: The trained model.
    :param dataset: The apps to check.
    :param r: The ranked benign features.
    :param k: The number of top ranked features to switch off.
    :param t: The decision threshold.
    :return: One DetectionResult per sample.
    """
    t = t or DecisionThreshold()
    original, followup, changed = _followup_matrix(m, dataset, r, k)
    features = top_k(r, k)

    results = []
    for idx, sample in enumerate(dataset):
        try:
            p = float(original[idx])
            if p >= t.delta:
                results.append(_result(sample.app_id, p, None, frozenset(), t))
                continue

            applied: typing.FrozenSet[int] = frozenset()
            if changed[idx]:
                applied = frozenset(i for i in features if sample.bits[i])
            results.append(_result(sample.app_id, p, float(followup[idx]), applied, t))
        except RepackError as err:
            raise DetectionError(idx, err) from err

    diverged = sum(1 for res in results if res.diverged)
    log.info("Detected %d samples at k=%d, %d diverged after switching off benign features" % (len(results), k, diverged))
    return results


def write_detection_report(
    results: typing.Iterable[DetectionResult],
    path: str,
    k: int,
    threshold: DecisionThreshold,
    model_digest: str,
    rank_digest: str,
) -> None:
    lines = [
        "#k=%d" % k,
        "#threshold=%s" % format_float(threshold.delta),
        "#model=%s" % model_digest,
        "#rank=%s" % rank_digest,
        REPORT_COLUMNS,
    ]
    count = 0
    for res in results:
        followup = NOT_APPLIED if res.followup_proba is None else format_float(res.followup_proba)
        delta = NOT_APPLIED if res.delta is None else format_float(res.delta)
        lines.append(
            "%s,%s,%s,%s,%s,%s"
            % (res.app_id, format_float(res.original_proba), followup, res.final_label, str(res.diverged).lower(), delta)
        )
        count += 1

    with open(path, "wb") as fd:
        fd.write("".join("%s\n" % line for line in lines).encode("utf-8"))
    log.info("Wrote detection report of %d samples to '%s'" % (count, path))
