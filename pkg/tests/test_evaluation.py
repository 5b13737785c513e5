import os

import numpy as np
import pytest

from pyrepack.classifier import DecisionThreshold, classify, predict_proba
from pyrepack.exceptions import (
    ConfigError,
    DatasetError,
    FingerprintMismatchError,
    InvariantViolation,
    RankError,
)
from pyrepack.evaluation import (
    ConfusionMatrix,
    DeltaHistogram,
    Metrics,
    SweepPoint,
    best_k,
    classifier_metrics,
    confusion,
    delta_histogram,
    emit_report,
    emit_scores,
    maliciousness_scores,
    metrics_of,
    sweep_k,
)
from pyrepack.features import FeatureVector, Label, LabeledDataset
from pyrepack.metamorphic import DetectionResult, probability_deltas
from pyrepack.ranking import ranking_from_counts

from . import linear_model, make_dataset, make_schema

WEIGHTS = [-2.0, -1.5, -1.0, -0.5, 1.0, 1.5, 0.5, 0.8]


def result(label, app_id="app"):
    if label == Label.MALWARE:
        return DetectionResult(app_id, 0.9, None, frozenset(), Label.MALWARE, False, None)
    return DetectionResult(app_id, 0.1, 0.1, frozenset(), Label.BENIGN, False, 0.0)


def benchmark_setup(count=2000, seed=0, tag_repackaged=False):
    """
    A linear model whose first four features lean benign, ranked most benign
    first, over random apps labeled by a noisy version of the model.
    """
    schema = make_schema(8)
    m = linear_model(schema.fingerprint, WEIGHTS, -0.5)
    r = ranking_from_counts({0: 40, 1: 30, 2: 20, 3: 10}, 40, "abc", schema.fingerprint)

    rng = np.random.default_rng(seed)
    samples = []
    for idx, bits in enumerate(rng.integers(0, 2, size=(count, 8))):
        label = Label.MALWARE if rng.random() < 0.4 else Label.BENIGN
        family = None
        if tag_repackaged and label == Label.MALWARE and rng.random() < 0.5:
            family = "repackaged"
        samples.append(FeatureVector("app-%d" % idx, bits, schema.fingerprint, label, family))
    return schema, m, LabeledDataset(schema.fingerprint, 8, samples), r


class TestConfusion(object):
    def test_all_correct(self):
        labels = [Label.MALWARE] * 4 + [Label.BENIGN] * 4
        actual = confusion([result(label) for label in labels], labels)
        assert actual == ConfusionMatrix(tp=4, fp=0, tn=4, fn=0)
        assert actual.total == 8

    def test_all_malware(self):
        labels = [Label.BENIGN, Label.BENIGN, Label.MALWARE, Label.MALWARE]
        actual = confusion([result(Label.MALWARE)] * 4, labels)
        assert actual == ConfusionMatrix(tp=2, fp=2, tn=0, fn=0)

    def test_mixed(self):
        labels = [Label.MALWARE, Label.MALWARE, Label.BENIGN, Label.BENIGN, Label.BENIGN]
        predicted = [Label.MALWARE, Label.BENIGN, Label.MALWARE, Label.BENIGN, Label.BENIGN]
        actual = confusion([result(p) for p in predicted], labels)
        assert actual == ConfusionMatrix(tp=1, fp=1, tn=2, fn=1)

    def test_empty(self):
        assert confusion([], []) == ConfusionMatrix(tp=0, fp=0, tn=0, fn=0)

    def test_length_mismatch(self):
        with pytest.raises(DatasetError) as exc:
            confusion([result(Label.MALWARE)], [])
        assert str(exc.value) == "Got 1 results but 0 labels"

    def test_unlabeled(self):
        with pytest.raises(DatasetError) as exc:
            confusion([result(Label.MALWARE)] * 2, [Label.MALWARE, None])
        assert str(exc.value) == "Sample 1 has no ground truth label to evaluate against"

    def test_negative_count(self):
        with pytest.raises(ConfigError) as exc:
            ConfusionMatrix(tp=1, fp=-1)
        assert str(exc.value) == "Confusion count fp cannot be negative"


class TestMetrics(object):
    def test_example(self):
        actual = metrics_of(ConfusionMatrix(tp=2, fp=1, tn=1, fn=0))
        assert actual.precision == pytest.approx(0.6667, abs=1e-4)
        assert actual.recall == 1.0
        assert actual.accuracy == 0.75
        assert actual.f1 == pytest.approx(0.8, abs=1e-12)
        assert actual.benign_accuracy == 0.5
        assert actual.malware_accuracy == 1.0

    def test_undefined_precision(self):
        actual = metrics_of(ConfusionMatrix(tp=0, fp=0, tn=3, fn=2))
        assert actual.precision is None
        assert actual.recall == 0.0
        assert actual.f1 is None
        assert actual.accuracy == 0.6

    def test_half_recall(self):
        actual = metrics_of(ConfusionMatrix(tp=3, fp=0, tn=0, fn=3))
        assert actual.recall == 0.5
        assert actual.benign_accuracy is None

    def test_zero_f1(self):
        actual = metrics_of(ConfusionMatrix(tp=0, fp=1, tn=0, fn=1))
        assert actual.precision == 0.0
        assert actual.recall == 0.0
        assert actual.f1 == 0.0

    def test_empty(self):
        assert metrics_of(ConfusionMatrix()) == Metrics(None, None, None, None, None, None)

    def test_matches_hand_coded(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            tp, fp, tn, fn = (int(c) for c in rng.integers(0, 50, size=4))
            actual = metrics_of(ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn))
            total = tp + fp + tn + fn

            if total:
                assert actual.accuracy == pytest.approx((tp + tn) / total, abs=1e-12)
                assert actual.accuracy * total == pytest.approx(tp + tn, abs=1e-9)
            if tp + fp:
                assert actual.precision == pytest.approx(tp / (tp + fp), abs=1e-12)
            else:
                assert actual.precision is None
            if tp + fn:
                assert actual.recall == pytest.approx(tp / (tp + fn), abs=1e-12)
            else:
                assert actual.recall is None
            if tn + fp:
                assert actual.benign_accuracy == pytest.approx(tn / (tn + fp), abs=1e-12)

            if tp:
                # harmonic mean of precision and recall
                p = tp / (tp + fp)
                r = tp / (tp + fn)
                assert actual.f1 == pytest.approx(2.0 / (1.0 / p + 1.0 / r), abs=1e-12)
                assert actual.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
            for value in (actual.accuracy, actual.precision, actual.recall, actual.f1):
                assert value is None or 0.0 <= value <= 1.0


class TestClassifierMetrics(object):
    def test_metrics(self, two_feature):
        schema, m = two_feature
        dataset = make_dataset(
            schema,
            [
                ([0, 1], Label.MALWARE, None),
                ([1, 1], Label.MALWARE, None),
                ([1, 0], Label.BENIGN, None),
                ([0, 0], Label.BENIGN, None),
            ],
        )
        # only [0, 1] is predicted malware
        actual = classifier_metrics(m, dataset)
        assert actual == metrics_of(ConfusionMatrix(tp=1, fp=0, tn=2, fn=1))

        actual = classifier_metrics(m, dataset, DecisionThreshold(0.3))
        assert actual == metrics_of(ConfusionMatrix(tp=2, fp=1, tn=1, fn=0))

    def test_empty(self, two_feature):
        schema, m = two_feature
        assert classifier_metrics(m, make_dataset(schema, [])) == Metrics(None, None, None, None, None, None)

    def test_schema_mismatch(self, two_feature, small_schema):
        _, m = two_feature
        with pytest.raises(FingerprintMismatchError):
            classifier_metrics(m, make_dataset(small_schema, [[0] * 8], label=Label.BENIGN))


class TestSweep(object):
    def test_monotone(self):
        _, m, dataset, r = benchmark_setup()
        sweep = sweep_k(m, dataset, r, 4)

        assert [p.k for p in sweep] == [0, 1, 2, 3, 4]
        for previous, point in zip(sweep, sweep[1:]):
            assert point.malware_accuracy >= previous.malware_accuracy
            assert point.benign_accuracy <= previous.benign_accuracy
            assert point.confusion.tp >= previous.confusion.tp
            assert point.confusion.fp >= previous.confusion.fp

        for point in sweep:
            assert point.confusion.total == len(dataset)
            assert point.metrics.accuracy * len(dataset) == pytest.approx(point.confusion.tp + point.confusion.tn)
            assert point.metrics_vanilla_equivalent == sweep[0].metrics
            assert point.repackaged_accuracy is None

        # removing benign leaning features has to find something on random apps
        assert sweep[4].malware_accuracy > sweep[0].malware_accuracy

    def test_k_zero_is_plain_classifier(self):
        _, m, dataset, r = benchmark_setup(500, seed=1)
        sweep = sweep_k(m, dataset, r, 0)

        assert len(sweep) == 1
        assert sweep[0].metrics == classifier_metrics(m, dataset)

        expected = ConfusionMatrix(
            tp=sum(1 for s in dataset if s.label == Label.MALWARE and classify(m, s) == Label.MALWARE),
            fp=sum(1 for s in dataset if s.label == Label.BENIGN and classify(m, s) == Label.MALWARE),
            tn=sum(1 for s in dataset if s.label == Label.BENIGN and classify(m, s) == Label.BENIGN),
            fn=sum(1 for s in dataset if s.label == Label.MALWARE and classify(m, s) == Label.BENIGN),
        )
        assert sweep[0].confusion == expected

    def test_repackaged_slice(self):
        _, m, dataset, r = benchmark_setup(1000, seed=2, tag_repackaged=True)
        sweep = sweep_k(m, dataset, r, 2)

        repackaged = [s for s in dataset if s.family == "repackaged"]
        expected = sum(1 for s in repackaged if predict_proba(m, s) >= 0.5) / len(repackaged)
        assert sweep[0].repackaged_accuracy == pytest.approx(expected, abs=1e-12)
        assert sweep[2].repackaged_accuracy >= sweep[0].repackaged_accuracy

    def test_k_max_out_of_range(self):
        _, m, dataset, r = benchmark_setup(10)
        with pytest.raises(RankError) as exc:
            sweep_k(m, dataset, r, 5)
        assert str(exc.value) == "k_max 5 is outside of the 4 ranked benign features"

    def test_superset_breach(self, mocker):
        _, m, dataset, r = benchmark_setup(2)

        def fake_detect(m, dataset, r, k, t):
            if k == 0:
                return [result(Label.MALWARE, "app-0"), result(Label.BENIGN, "app-1")]
            return [result(Label.BENIGN, "app-0"), result(Label.BENIGN, "app-1")]

        mocker.patch("pyrepack.evaluation.detect_batch", side_effect=fake_detect)
        with pytest.raises(InvariantViolation) as exc:
            sweep_k(m, dataset, r, 2)
        assert str(exc.value) == "Sample 'app-0' is flagged by the plain classifier but not at k=1"

    def test_unlabeled(self, two_feature):
        schema, m = two_feature
        r = ranking_from_counts({0: 1}, 1, "abc", schema.fingerprint)
        with pytest.raises(DatasetError):
            sweep_k(m, make_dataset(schema, [[1, 1]]), r, 1)


def sweep_point(k, benign_accuracy, malware_accuracy, repackaged_accuracy=None):
    metrics = Metrics(None, None, malware_accuracy, None, benign_accuracy, malware_accuracy)
    return SweepPoint(k, ConfusionMatrix(), metrics, metrics, repackaged_accuracy)


class TestBestK(object):
    def test_within_drop(self):
        sweep = [
            sweep_point(0, 0.99, 0.80),
            sweep_point(1, 0.98, 0.90),
            sweep_point(2, 0.97, 0.95),
            sweep_point(3, 0.95, 0.99),
        ]
        assert best_k(sweep) == 2
        assert best_k(sweep, max_benign_drop=0.05) == 3

    def test_drop_boundary_is_inclusive(self):
        sweep = [sweep_point(0, 0.99, 0.80), sweep_point(1, 0.96, 0.90)]
        assert best_k(sweep) == 1

    def test_ties_go_to_smaller_k(self):
        sweep = [sweep_point(0, 1.0, 0.5), sweep_point(1, 1.0, 0.7), sweep_point(2, 1.0, 0.7)]
        assert best_k(sweep) == 1

    def test_prefers_repackaged_slice(self):
        sweep = [
            sweep_point(0, 0.99, 0.80, 0.60),
            sweep_point(1, 0.99, 0.95, 0.70),
            sweep_point(2, 0.99, 0.90, 0.75),
        ]
        assert best_k(sweep) == 2

    @pytest.mark.parametrize(
        "sweep",
        [
            [],
            [sweep_point(0, 0.99, 0.8)],
            [sweep_point(0, 0.99, 0.8), sweep_point(1, 0.5, 1.0)],
            [sweep_point(0, 0.99, None), sweep_point(1, 0.99, None)],
        ],
    )
    def test_none(self, sweep):
        assert best_k(sweep) is None


class TestDeltaHistogram(object):
    def test_k_zero(self):
        _, m, dataset, r = benchmark_setup(300, seed=3, tag_repackaged=True)
        histogram = delta_histogram(m, dataset, r, 0)

        assert histogram.k == 0
        assert histogram.edges.tolist() == np.linspace(-1.0, 1.0, 21).tolist()
        assert histogram.total == 300
        for group, counts in histogram.counts.items():
            nonzero = np.flatnonzero(counts)
            assert len(nonzero) <= 1
            if len(nonzero):
                assert histogram.edges[nonzero[0]] <= 0.0 < histogram.edges[nonzero[0] + 1]
                assert histogram.means[group] == 0.0

    def test_groups(self):
        _, m, dataset, r = benchmark_setup(400, seed=4, tag_repackaged=True)
        histogram = delta_histogram(m, dataset, r, 3, bins=10)

        assert list(histogram.counts) == ["benign", "malware", "repackaged"]
        assert histogram.total == 400
        assert len(histogram.edges) == 11

        deltas = probability_deltas(m, dataset, r, 3)
        repackaged = [i for i, s in enumerate(dataset) if s.family == "repackaged"]
        assert histogram.means["repackaged"] == pytest.approx(float(deltas[repackaged].mean()), abs=1e-12)
        assert int(histogram.counts["repackaged"].sum()) == len(repackaged)
        # switching off benign leaning features never lowers the probability
        assert np.all(deltas >= 0.0)

    def test_empty_group_and_unlabeled(self, two_feature):
        schema, m = two_feature
        r = ranking_from_counts({0: 1}, 1, "abc", schema.fingerprint)
        dataset = make_dataset(schema, [([1, 1], Label.BENIGN, None), ([1, 0], None, None)])
        histogram = delta_histogram(m, dataset, r, 1, bins=4)

        assert list(histogram.counts) == ["benign", "malware", "repackaged", "unlabeled"]
        assert histogram.means["malware"] is None
        assert histogram.means["repackaged"] is None
        assert int(histogram.counts["unlabeled"].sum()) == 1
        assert histogram.total == 2

    def test_invalid_bins(self, two_feature):
        schema, m = two_feature
        r = ranking_from_counts({0: 1}, 1, "abc", schema.fingerprint)
        with pytest.raises(ConfigError) as exc:
            delta_histogram(m, make_dataset(schema, []), r, 1, bins=0)
        assert str(exc.value) == "bins must be at least 1, got 0"


def test_maliciousness_scores(two_feature):
    schema, m = two_feature
    dataset = make_dataset(
        schema,
        [([1, 1], Label.BENIGN, None), ([0, 1], Label.MALWARE, "repackaged"), ([0, 0], None, None)],
    )
    actual = maliciousness_scores(m, dataset)

    assert [(app_id, group) for app_id, group, _ in actual] == [
        ("app-0", "benign"),
        ("app-1", "repackaged"),
        ("app-2", "unlabeled"),
    ]
    for sample, (_, _, score) in zip(dataset, actual):
        assert score == pytest.approx(2 * predict_proba(m, sample) - 1, abs=1e-12)
        assert -1.0 <= score <= 1.0


def test_maliciousness_scores_empty(two_feature):
    schema, m = two_feature
    assert maliciousness_scores(m, make_dataset(schema, [])) == []


class TestEmitReport(object):
    def _inputs(self):
        first = ConfusionMatrix(tp=1, fp=0, tn=2, fn=1)
        second = ConfusionMatrix(tp=2, fp=2, tn=0, fn=0)
        sweep = [
            SweepPoint(0, first, metrics_of(first), metrics_of(first)),
            SweepPoint(1, second, metrics_of(second), metrics_of(first), repackaged_accuracy=0.25),
            SweepPoint(2, ConfusionMatrix(), metrics_of(ConfusionMatrix()), metrics_of(first)),
        ]
        histogram = DeltaHistogram(
            k=1,
            edges=np.array([-1.0, 0.0, 1.0]),
            counts={"benign": np.array([1, 0]), "malware": np.array([0, 2]), "repackaged": np.array([0, 0])},
            means={"benign": -0.5, "malware": 0.25, "repackaged": None},
        )
        return sweep, [histogram]

    def test_emit(self, tmp_path):
        sweep, histograms = self._inputs()
        out = str(tmp_path / "out" / "eval")
        written = emit_report(sweep, histograms, out, {"model": "aaa", "data": "bbb"})

        assert written == [os.path.join(out, "sweep.csv"), os.path.join(out, "deltas_k1.csv")]
        with open(written[0]) as fd:
            assert fd.read() == (
                "#data=bbb\n"
                "#model=aaa\n"
                "k,accuracy,precision,recall,f1,benign_acc,malware_acc,repackaged_acc\n"
                "0,0.75,1.0,0.5,0.6666666666666666,1.0,0.5,undefined\n"
                "1,0.5,0.5,1.0,0.6666666666666666,0.0,1.0,0.25\n"
                "2,undefined,undefined,undefined,undefined,undefined,undefined,undefined\n"
            )
        with open(written[1]) as fd:
            assert fd.read() == (
                "#data=bbb\n"
                "#model=aaa\n"
                "#mean_delta_benign=-0.5\n"
                "#mean_delta_malware=0.25\n"
                "#mean_delta_repackaged=undefined\n"
                "bin_low,bin_high,count_benign,count_malware,count_repackaged\n"
                "-1.0,0.0,1,0,0\n"
                "0.0,1.0,0,2,0\n"
            )

    def test_without_repackaged(self, tmp_path):
        first = ConfusionMatrix(tp=1, fp=0, tn=2, fn=1)
        sweep = [SweepPoint(k, first, metrics_of(first), metrics_of(first)) for k in range(3)]
        written = emit_report(sweep, [], str(tmp_path))

        with open(written[0]) as fd:
            lines = fd.read().splitlines()
        assert lines[0] == "k,accuracy,precision,recall,f1,benign_acc,malware_acc"
        assert len(lines) == 1 + 3

    def test_byte_identical(self, tmp_path):
        sweep, histograms = self._inputs()
        first = emit_report(sweep, histograms, str(tmp_path / "first"), {"model": "aaa"})
        second = emit_report(sweep, histograms, str(tmp_path / "second"), {"model": "aaa"})

        for a, b in zip(first, second):
            with open(a, "rb") as fd_a, open(b, "rb") as fd_b:
                assert fd_a.read() == fd_b.read()


def test_emit_scores(tmp_path):
    path = tmp_path / "scores.csv"
    emit_scores([("app-0", "benign", -0.5), ("app-1", "repackaged", 0.25)], str(path), {"model": "aaa"})
    assert path.read_text() == "#model=aaa\napp_id,group,score\napp-0,benign,-0.5\napp-1,repackaged,0.25\n"
