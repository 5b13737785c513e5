# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import logging
import os
import typing
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import confusion_matrix

from pyrepack._utils import format_float
from pyrepack.classifier import DecisionThreshold, Model, predict_proba_matrix
from pyrepack.datagen import Family
from pyrepack.exceptions import (
    ConfigError,
    DatasetError,
    FingerprintMismatchError,
    InvariantViolation,
    RankError,
)
from pyrepack.features import Label, LabeledDataset
from pyrepack.metamorphic import DetectionResult, detect_batch, probability_deltas
from pyrepack.ranking import RankedBenignFeatures

log = logging.getLogger(__name__)

UNDEFINED = "undefined"
SWEEP_FILE = "sweep.csv"
SCORES_FILE = "scores.csv"
DEFAULT_BINS = 20
DEFAULT_MAX_BENIGN_DROP = 0.03

GROUPS = (Family.BENIGN, Family.MALWARE, Family.REPACKAGED)


@dataclass(frozen=True)
class ConfusionMatrix:
    # malware is the positive class
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ConfigError("Confusion count %s cannot be negative" % name)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    """
    Standard detection metrics, None marks a metric that is undefined because
    its denominator is 0. benign_accuracy is the share of benign apps kept
    benign and malware_accuracy the share of malware detected (the recall).
    """

    accuracy: typing.Optional[float]
    precision: typing.Optional[float]
    recall: typing.Optional[float]
    f1: typing.Optional[float]
    benign_accuracy: typing.Optional[float]
    malware_accuracy: typing.Optional[float]


@dataclass(frozen=True)
class SweepPoint:
    k: int
    confusion: ConfusionMatrix
    metrics: Metrics
    metrics_vanilla_equivalent: Metrics
    repackaged_accuracy: typing.Optional[float] = None

    @property
    def benign_accuracy(self) -> typing.Optional[float]:
        return self.metrics.benign_accuracy

    @property
    def malware_accuracy(self) -> typing.Optional[float]:
        return self.metrics.malware_accuracy


@dataclass(frozen=True)
class DeltaHistogram:
    k: int
    edges: np.ndarray
    counts: typing.Dict[str, np.ndarray]
    means: typing.Dict[str, typing.Optional[float]]

    @property
    def total(self) -> int:
        return int(sum(int(c.sum()) for c in self.counts.values()))


def _ratio(numerator: int, denominator: int) -> typing.Optional[float]:
    return numerator / denominator if denominator else None


def _targets(labels: typing.Sequence[typing.Optional[str]]) -> np.ndarray:
    targets = np.zeros(len(labels), dtype=np.int64)
    for idx, label in enumerate(labels):
        if label not in (Label.BENIGN, Label.MALWARE):
            raise DatasetError("Sample %d has no ground truth label to evaluate against" % idx)
        targets[idx] = 1 if label == Label.MALWARE else 0
    return targets


def _count(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
    if not y_true.size:
        return ConfusionMatrix()
    tn, fp, fn, tp = (int(c) for c in confusion_matrix(y_true, y_pred, labels=[0, 1]).ravel())
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def confusion(
    results: typing.Sequence[DetectionResult],
    labels: typing.Sequence[typing.Optional[str]],
) -> ConfusionMatrix:
    """
    Counts the detection results against the ground truth, malware is the
    positive class.

    :param results: The detection results.
    :param labels: The ground truth label of each result, in the same order.
    :return: The ConfusionMatrix.
    """
    if len(results) != len(labels):
        raise DatasetError("Got %d results but %d labels" % (len(results), len(labels)))
    y_pred = np.array([1 if r.final_label == Label.MALWARE else 0 for r in results], dtype=np.int64)
    return _count(_targets(labels), y_pred)


def metrics_of(c: ConfusionMatrix) -> Metrics:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)

    f1: typing.Optional[float] = None
    if precision is not None and recall is not None:
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)

    return Metrics(
        accuracy=_ratio(c.tp + c.tn, c.total),
        precision=precision,
        recall=recall,
        f1=f1,
        benign_accuracy=_ratio(c.tn, c.tn + c.fp),
        malware_accuracy=recall,
    )


def classifier_metrics(m: Model, dataset: LabeledDataset, t: typing.Optional[DecisionThreshold] = None) -> Metrics:
    # Metrics of the plain classifier, used for held out data
    t = t or DecisionThreshold()
    if dataset.schema_fingerprint != m.schema_fingerprint:
        raise FingerprintMismatchError(m.schema_fingerprint, dataset.schema_fingerprint, "dataset")
    y_true = _targets([s.label for s in dataset])
    if not len(dataset):
        return metrics_of(ConfusionMatrix())
    y_pred = (predict_proba_matrix(m, dataset.matrix()) >= t.delta).astype(np.int64)
    return metrics_of(_count(y_true, y_pred))


def _group_of(family: typing.Optional[str], label: typing.Optional[str]) -> str:
    if family in GROUPS:
        return typing.cast(str, family)
    return label or Label.UNLABELED


def sweep_k(
    m: Model,
    dataset: LabeledDataset,
    r: RankedBenignFeatures,
    k_max: int,
    t: typing.Optional[DecisionThreshold] = None,
) -> typing.List[SweepPoint]:
    """
    Evaluates the detector for every k in 0..k_max. The k=0 point is the plain
    classifier. Every app the plain classifier flags must stay flagged at
    every k, a breach raises InvariantViolation.

    :param m: The trained model.
    :param dataset: Labeled apps, repackaged ones may be tagged with the
        repackaged family to get the repackaged accuracy slice.
    :param r: The ranked benign features.
    :param k_max: The largest k to evaluate.
    :param t: The decision threshold.
    :return: One SweepPoint per k.
    """
    t = t or DecisionThreshold()
    if k_max < 0 or k_max > len(r):
        raise RankError("k_max %d is outside of the %d ranked benign features" % (k_max, len(r)))

    labels = [s.label for s in dataset]
    repackaged = np.array([s.family == Family.REPACKAGED for s in dataset], dtype=bool)

    points: typing.List[SweepPoint] = []
    vanilla_flagged: typing.Optional[np.ndarray] = None
    vanilla_metrics: typing.Optional[Metrics] = None
    for k in range(k_max + 1):
        results = detect_batch(m, dataset, r, k, t)
        flagged = np.array([res.final_label == Label.MALWARE for res in results], dtype=bool)
        if vanilla_flagged is None:
            vanilla_flagged = flagged
        elif np.any(vanilla_flagged & ~flagged):
            missing = int(np.flatnonzero(vanilla_flagged & ~flagged)[0])
            raise InvariantViolation(
                "Sample '%s' is flagged by the plain classifier but not at k=%d" % (dataset[missing].app_id, k)
            )

        matrix = confusion(results, labels)
        metrics = metrics_of(matrix)
        if vanilla_metrics is None:
            vanilla_metrics = metrics

        repackaged_accuracy = float(flagged[repackaged].mean()) if repackaged.any() else None
        points.append(
            SweepPoint(
                k=k,
                confusion=matrix,
                metrics=metrics,
                metrics_vanilla_equivalent=vanilla_metrics,
                repackaged_accuracy=repackaged_accuracy,
            )
        )
        log.debug("k=%d malware accuracy %s benign accuracy %s" % (k, metrics.malware_accuracy, metrics.benign_accuracy))

    return points


def best_k(sweep: typing.Sequence[SweepPoint], max_benign_drop: float = DEFAULT_MAX_BENIGN_DROP) -> typing.Optional[int]:
    """
    Picks the operating point of a sweep, the k >= 1 with the best detection
    rate whose benign accuracy stays within max_benign_drop of k=0. The
    detection rate is the repackaged slice when it is tagged, otherwise the
    malware recall. Ties go to the smaller k.

    :param sweep: The sweep_k output.
    :param max_benign_drop: The largest allowed benign accuracy drop.
    :return: The chosen k or None when no k qualifies.
    """
    if not sweep:
        return None
    baseline = sweep[0].benign_accuracy

    best: typing.Optional[typing.Tuple[float, int]] = None
    for point in sweep[1:]:
        if baseline is not None and point.benign_accuracy is not None:
            if baseline - point.benign_accuracy > max_benign_drop + 1e-12:
                continue

        rate = point.repackaged_accuracy if point.repackaged_accuracy is not None else point.malware_accuracy
        if rate is None:
            continue
        if best is None or rate > best[0]:
            best = (rate, point.k)

    return None if best is None else best[1]


def delta_histogram(
    m: Model,
    dataset: LabeledDataset,
    r: RankedBenignFeatures,
    k: int,
    bins: int = DEFAULT_BINS,
) -> DeltaHistogram:
    """
    Bins how far switching off the top-k benign features moves each app's
    malware probability, per benign, malware and repackaged group.
    """
    if bins < 1:
        raise ConfigError("bins must be at least 1, got %d" % bins)

    deltas = probability_deltas(m, dataset, r, k)
    groups = np.array([_group_of(s.family, s.label) for s in dataset], dtype=object)
    edges = np.histogram_bin_edges(deltas, bins=bins, range=(-1.0, 1.0))

    counts: typing.Dict[str, np.ndarray] = {}
    means: typing.Dict[str, typing.Optional[float]] = {}
    present = list(GROUPS) + sorted(set(groups) - set(GROUPS))
    for group in present:
        values = deltas[groups == group]
        counts[group] = np.histogram(values, bins=edges)[0]
        means[group] = float(values.mean()) if values.size else None

    return DeltaHistogram(k=k, edges=edges, counts=counts, means=means)


def maliciousness_scores(m: Model, dataset: LabeledDataset) -> typing.List[typing.Tuple[str, str, float]]:
    # (app_id, group, 2p - 1) for every sample
    scores = 2.0 * predict_proba_matrix(m, dataset.matrix()) - 1.0 if len(dataset) else np.zeros(0)
    return [(s.app_id, _group_of(s.family, s.label), float(score)) for s, score in zip(dataset, scores)]


def _fmt(value: typing.Optional[float]) -> str:
    return UNDEFINED if value is None else format_float(value)


def _header(fingerprints: typing.Mapping[str, str]) -> typing.List[str]:
    return ["#%s=%s" % (key, fingerprints[key]) for key in sorted(fingerprints)]


def _write_lines(path: str, lines: typing.List[str]) -> None:
    with open(path, "wb") as fd:
        fd.write("".join("%s\n" % line for line in lines).encode("utf-8"))


def emit_report(
    sweep: typing.Sequence[SweepPoint],
    histograms: typing.Sequence[DeltaHistogram],
    path: str,
    fingerprints: typing.Optional[typing.Mapping[str, str]] = None,
) -> typing.List[str]:
    """
    Writes the sweep table and one table per delta histogram into a
    directory, each starting with the run fingerprints as '#key=value' lines.

    :param sweep: The sweep points.
    :param histograms: The delta histograms.
    :param path: The output directory, created if missing.
    :param fingerprints: Digests identifying the model, rank and data.
    :return: The paths written.
    """
    fingerprints = fingerprints or {}
    os.makedirs(path, exist_ok=True)
    written = []

    with_repackaged = any(p.repackaged_accuracy is not None for p in sweep)
    columns = "k,accuracy,precision,recall,f1,benign_acc,malware_acc"
    lines = _header(fingerprints) + [columns + (",repackaged_acc" if with_repackaged else "")]
    for point in sweep:
        metrics = point.metrics
        row = "%d,%s" % (
            point.k,
            ",".join(
                _fmt(v)
                for v in (
                    metrics.accuracy,
                    metrics.precision,
                    metrics.recall,
                    metrics.f1,
                    metrics.benign_accuracy,
                    metrics.malware_accuracy,
                )
            ),
        )
        if with_repackaged:
            row += ",%s" % _fmt(point.repackaged_accuracy)
        lines.append(row)

    sweep_path = os.path.join(path, SWEEP_FILE)
    _write_lines(sweep_path, lines)
    written.append(sweep_path)

    for histogram in histograms:
        groups = list(histogram.counts)
        lines = _header(fingerprints)
        lines += ["#mean_delta_%s=%s" % (g, _fmt(histogram.means[g])) for g in groups]
        lines.append("bin_low,bin_high,%s" % ",".join("count_%s" % g for g in groups))
        for idx in range(len(histogram.edges) - 1):
            counts = ",".join(str(int(histogram.counts[g][idx])) for g in groups)
            lines.append("%s,%s,%s" % (format_float(histogram.edges[idx]), format_float(histogram.edges[idx + 1]), counts))

        hist_path = os.path.join(path, "deltas_k%d.csv" % histogram.k)
        _write_lines(hist_path, lines)
        written.append(hist_path)

    log.info("Wrote %d report files to '%s'" % (len(written), path))
    return written


def emit_scores(
    scores: typing.Sequence[typing.Tuple[str, str, float]],
    path: str,
    fingerprints: typing.Optional[typing.Mapping[str, str]] = None,
) -> None:
    lines = _header(fingerprints or {}) + ["app_id,group,score"]
    lines += ["%s,%s,%s" % (app_id, group, format_float(score)) for app_id, group, score in scores]
    _write_lines(path, lines)
    log.info("Wrote %d maliciousness scores to '%s'" % (len(scores), path))
