# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import logging
import typing
from dataclasses import dataclass

import numpy as np

from pyrepack._utils import decode_error_line, get_data_file, sha256_hex, to_unicode, unsigned_seed
from pyrepack.exceptions import (
    DatasetError,
    FeatureIndexError,
    FingerprintMismatchError,
    SchemaError,
)

log = logging.getLogger(__name__)

SCHEMA_HEADER = "#schema="
DEFAULT_SCHEMA_FILE = "default_schema.txt"
DEFAULT_SCHEMA_SIZE = 694

# Scanner count above which an app is vetted as malware, 0 is benign and
# anything in between is discarded.
MALWARE_DETECTION_MINIMUM = 10


class FeatureCategory(object):
    """
    The static analysis category a binary feature was extracted from. The
    Behavior category holds the single analysis derived feature (obfuscation
    or suspicious behaviour) that sits on top of the extracted ones.
    """

    PERMISSION = "Permission"
    PACKAGE = "Package"
    HARDWARE = "Hardware"
    INTENT = "Intent"
    CLASS = "Class"
    LEAK = "Leak"
    BEHAVIOR = "Behavior"

    ALL = (PERMISSION, PACKAGE, HARDWARE, INTENT, CLASS, LEAK, BEHAVIOR)


class Label(object):
    BENIGN = "benign"
    MALWARE = "malware"
    UNLABELED = "unlabeled"

    ALL = (BENIGN, MALWARE, UNLABELED)


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    category: str
    index: int

    @property
    def qualified_name(self) -> str:
        return "%s:%s" % (self.category, self.name)


class FeatureSchema(object):
    def __init__(self, features: typing.Sequence[FeatureDescriptor]) -> None:
        """
        The ordered list of binary features every vector, model and rank file
        is expressed in. The fingerprint is the sha256 of the ordered
        qualified feature names and is what other artifacts record to say
        which schema they were built against.

        :param features: The feature descriptors in index order.
        """
        seen: typing.Dict[str, int] = {}
        for idx, feature in enumerate(features):
            if feature.index != idx:
                raise SchemaError("Feature '%s' has index %d but is at position %d" % (feature.name, feature.index, idx))
            if feature.category not in FeatureCategory.ALL:
                raise SchemaError("Unknown feature category '%s'" % feature.category)

            qualified = feature.qualified_name
            if qualified in seen:
                raise SchemaError("Duplicate feature name '%s'" % qualified)
            seen[qualified] = idx

        self.features: typing.Tuple[FeatureDescriptor, ...] = tuple(features)
        self._index = seen
        self.fingerprint = sha256_hex("\n".join(f.qualified_name for f in self.features))

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> typing.Iterator[FeatureDescriptor]:
        return iter(self.features)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeatureSchema) and other.fingerprint == self.fingerprint

    def __hash__(self) -> int:
        return hash(self.fingerprint)

    def __repr__(self) -> str:
        return "<FeatureSchema features=%d fingerprint=%s>" % (len(self), self.fingerprint[:12])

    @property
    def names(self) -> typing.List[str]:
        return [f.qualified_name for f in self.features]

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError("Feature '%s' is not part of schema %s" % (name, self.fingerprint)) from None

    def name_of(self, index: int) -> str:
        if index < 0 or index >= len(self.features):
            raise FeatureIndexError(index, len(self.features))
        return self.features[index].qualified_name

    def categories(self) -> typing.Dict[str, int]:
        counts: typing.Dict[str, int] = {}
        for feature in self.features:
            counts[feature.category] = counts.get(feature.category, 0) + 1
        return counts

    def to_text(self) -> str:
        return "".join("%s\n" % name for name in self.names)

    @staticmethod
    def from_names(names: typing.Iterable[str]) -> "FeatureSchema":
        return parse_schema_text("\n".join(names))


class FeatureVector(object):
    def __init__(
        self,
        app_id: str,
        bits: typing.Any,
        schema_fingerprint: str,
        label: typing.Optional[str] = None,
        family: typing.Optional[str] = None,
    ) -> None:
        """
        The binary presence/absence representation of one app.

        :param app_id: The identity of the app, must not contain ',' or a new
            line so it fits the dataset row format.
        :param bits: A 1 dimensional array like of 0/1 values.
        :param schema_fingerprint: The fingerprint of the schema the bits are
            laid out in.
        :param label: benign, malware or None when the ground truth is unknown.
        :param family: Optional provenance tag such as 'repackaged'.
        """
        if not app_id or any(c in app_id for c in ",\r\n"):
            raise DatasetError("Invalid app_id %r" % app_id)
        if label == Label.UNLABELED:
            label = None
        if label is not None and label not in (Label.BENIGN, Label.MALWARE):
            raise DatasetError("Unknown label '%s'" % label)
        if family is not None and (not family or any(c in family for c in ",\r\n")):
            raise DatasetError("Invalid family tag %r" % family)

        arr = np.asarray(bits)
        if arr.ndim != 1:
            raise DatasetError("Feature vector for '%s' must be 1 dimensional" % app_id)
        if arr.size and not np.all((arr == 0) | (arr == 1)):
            raise DatasetError("Feature vector for '%s' contains a non-binary value" % app_id)

        self.app_id = app_id
        self.bits = arr.astype(np.uint8)
        self.bits.setflags(write=False)
        self.schema_fingerprint = schema_fingerprint
        self.label = label
        self.family = family

    def __len__(self) -> int:
        return int(self.bits.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (
            self.app_id == other.app_id
            and self.schema_fingerprint == other.schema_fingerprint
            and self.label == other.label
            and self.family == other.family
            and np.array_equal(self.bits, other.bits)
        )

    def __repr__(self) -> str:
        return "<FeatureVector app_id=%s label=%s active=%d>" % (self.app_id, self.label, self.popcount)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def with_bits(self, bits: typing.Any) -> "FeatureVector":
        return FeatureVector(self.app_id, bits, self.schema_fingerprint, label=self.label, family=self.family)

    @staticmethod
    def from_indices(
        app_id: str,
        indices: typing.Iterable[int],
        size: int,
        schema_fingerprint: str,
        label: typing.Optional[str] = None,
        family: typing.Optional[str] = None,
    ) -> "FeatureVector":
        bits = np.zeros(size, dtype=np.uint8)
        for idx in indices:
            if idx < 0 or idx >= size:
                raise FeatureIndexError(idx, size)
            if bits[idx]:
                raise DatasetError("Feature index %d is set more than once for '%s', value is not binary" % (idx, app_id))
            bits[idx] = 1
        return FeatureVector(app_id, bits, schema_fingerprint, label=label, family=family)


class LabeledDataset(object):
    def __init__(
        self,
        schema_fingerprint: str,
        feature_count: int,
        samples: typing.Sequence[FeatureVector],
    ) -> None:
        """
        An ordered collection of feature vectors that all share one schema.

        :param schema_fingerprint: The schema every sample is laid out in.
        :param feature_count: The schema size, recorded so an empty dataset
            still knows its width.
        :param samples: The feature vectors.
        """
        for idx, sample in enumerate(samples):
            if sample.schema_fingerprint != schema_fingerprint:
                raise FingerprintMismatchError(schema_fingerprint, sample.schema_fingerprint, "sample %d" % idx)
            if len(sample) != feature_count:
                raise DatasetError(
                    "Sample '%s' has %d features, expecting %d" % (sample.app_id, len(sample), feature_count)
                )

        self.schema_fingerprint = schema_fingerprint
        self.feature_count = feature_count
        self.samples: typing.Tuple[FeatureVector, ...] = tuple(samples)
        self._matrix: typing.Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> typing.Iterator[FeatureVector]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> FeatureVector:
        return self.samples[idx]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.schema_fingerprint == other.schema_fingerprint
            and self.feature_count == other.feature_count
            and self.samples == other.samples
        )

    def matrix(self) -> np.ndarray:
        """
        The samples stacked into a float64 matrix of shape (N, features). The
        result is cached and read only.
        """
        if self._matrix is None:
            if self.samples:
                matrix = np.vstack([s.bits for s in self.samples]).astype(np.float64)
            else:
                matrix = np.zeros((0, self.feature_count), dtype=np.float64)
            matrix.setflags(write=False)
            self._matrix = matrix

        return self._matrix

    def targets(self) -> np.ndarray:
        """
        The ground truth as 0 (benign) / 1 (malware), every sample must be
        labeled.
        """
        targets = np.zeros(len(self.samples), dtype=np.int64)
        for idx, sample in enumerate(self.samples):
            if sample.label is None:
                raise DatasetError("Sample %d '%s' has no ground truth label" % (idx, sample.app_id))
            targets[idx] = 1 if sample.label == Label.MALWARE else 0

        return targets

    def subset(self, indices: typing.Iterable[int]) -> "LabeledDataset":
        return LabeledDataset(self.schema_fingerprint, self.feature_count, [self.samples[i] for i in indices])

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.schema_fingerprint != self.schema_fingerprint:
            raise FingerprintMismatchError(self.schema_fingerprint, other.schema_fingerprint, "dataset")
        return LabeledDataset(self.schema_fingerprint, self.feature_count, self.samples + other.samples)

    def check_schema(self, schema_fingerprint: str, context: str = "dataset") -> None:
        if self.schema_fingerprint != schema_fingerprint:
            raise FingerprintMismatchError(schema_fingerprint, self.schema_fingerprint, context)


def parse_schema_text(text: str) -> FeatureSchema:
    """
    Parses schema text, one '<Category>:<Name>' feature per line. Blank lines
    are ignored, the order of the remaining lines is the index order.

    :param text: The schema text.
    :return: The FeatureSchema.
    """
    features = []
    seen: typing.Dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue

        category, sep, name = line.partition(":")
        category = category.strip()
        name = name.strip()
        if not sep or not name:
            raise SchemaError("Expecting '<Category>:<Name>' but got '%s'" % line, line_no)
        if "," in name:
            raise SchemaError("Feature name '%s' cannot contain ','" % name, line_no)
        if category not in FeatureCategory.ALL:
            raise SchemaError("Unknown feature category '%s'" % category, line_no)

        qualified = "%s:%s" % (category, name)
        if qualified in seen:
            raise SchemaError("Duplicate feature name '%s', first seen on line %d" % (qualified, seen[qualified]), line_no)
        seen[qualified] = line_no

        features.append(FeatureDescriptor(name=name, category=category, index=len(features)))

    if not features:
        raise SchemaError("Schema contains no features")

    return FeatureSchema(features)


def load_schema(path: str) -> FeatureSchema:
    log.debug("Loading feature schema from '%s'" % path)
    with open(path, "rb") as fd:
        data = fd.read()

    try:
        text = to_unicode(data)
    except UnicodeDecodeError as err:
        raise SchemaError("Schema file '%s' is not valid UTF-8" % path, decode_error_line(data, err)) from err

    schema = parse_schema_text(text)
    log.info("Loaded schema of %d features with fingerprint %s" % (len(schema), schema.fingerprint))
    return schema


def default_schema() -> FeatureSchema:
    """
    The bundled 694 feature schema. It holds the well known top benign
    features verbatim and placeholder names filling each category, real
    extractor output should ship its own schema file.
    """
    return parse_schema_text(get_data_file(DEFAULT_SCHEMA_FILE))


def parse_dataset_text(text: str, schema: FeatureSchema) -> LabeledDataset:
    """
    Parses dataset text. The first line is '#schema=<fingerprint>' followed by
    one row per app, 'app_id,label,<space separated set indices>[,family]'.

    :param text: The dataset text.
    :param schema: The schema the dataset must have been written against.
    :return: The LabeledDataset.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SCHEMA_HEADER):
        raise DatasetError("Dataset is missing the '%s<fingerprint>' header" % SCHEMA_HEADER, 1)

    fingerprint = lines[0][len(SCHEMA_HEADER) :].strip()
    if fingerprint != schema.fingerprint:
        raise FingerprintMismatchError(schema.fingerprint, fingerprint, "dataset header")

    size = len(schema)
    samples = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue

        fields = line.split(",")
        if len(fields) not in (3, 4):
            raise DatasetError("Expecting 3 or 4 comma separated fields but got %d" % len(fields), line_no)

        app_id = fields[0].strip()
        label = fields[1].strip()
        if label not in Label.ALL:
            raise DatasetError("Unknown label token '%s'" % label, line_no)
        family = fields[3].strip() if len(fields) == 4 and fields[3].strip() else None

        try:
            indices = [int(token) for token in fields[2].split()]
        except ValueError as err:
            raise DatasetError("Invalid feature index: %s" % err, line_no) from err

        try:
            samples.append(FeatureVector.from_indices(app_id, indices, size, schema.fingerprint, label, family))
        except FeatureIndexError as err:
            raise DatasetError("Vector length does not match the schema: %s" % err, line_no) from err
        except DatasetError as err:
            raise DatasetError(err.reason, line_no) from err

    return LabeledDataset(schema.fingerprint, size, samples)


def parse_dataset(path: str, schema: FeatureSchema) -> LabeledDataset:
    log.debug("Parsing dataset '%s'" % path)
    with open(path, "rb") as fd:
        data = fd.read()

    try:
        text = to_unicode(data)
    except UnicodeDecodeError as err:
        raise DatasetError("Dataset file '%s' is not valid UTF-8" % path, decode_error_line(data, err)) from err

    dataset = parse_dataset_text(text, schema)
    log.info("Parsed %d samples from '%s'" % (len(dataset), path))
    return dataset


def serialize_dataset(dataset: LabeledDataset) -> str:
    rows = ["%s%s\n" % (SCHEMA_HEADER, dataset.schema_fingerprint)]
    for sample in dataset:
        indices = " ".join(str(i) for i in sample.active_indices())
        row = "%s,%s,%s" % (sample.app_id, sample.label or Label.UNLABELED, indices)
        if sample.family is not None:
            row += ",%s" % sample.family
        rows.append(row + "\n")

    return "".join(rows)


def write_dataset(dataset: LabeledDataset, path: str) -> None:
    with open(path, "wb") as fd:
        fd.write(serialize_dataset(dataset).encode("utf-8"))
    log.info("Wrote %d samples to '%s'" % (len(dataset), path))


def nullify(v: FeatureVector, s: typing.Iterable[int]) -> FeatureVector:
    """
    Builds the follow-up vector with the selected features switched off. A
    feature that is already absent stays absent, the input is not modified.

    :param v: The source feature vector.
    :param s: The feature indices to set to 0.
    :return: A new FeatureVector with the same app_id, label and family.
    """
    size = len(v)
    indices = sorted(set(int(i) for i in s))
    for idx in indices:
        if idx < 0 or idx >= size:
            raise FeatureIndexError(idx, size)

    if not indices or not v.bits[indices].any():
        return v

    bits = v.bits.copy()
    bits[indices] = 0
    return v.with_bits(bits)


def label_from_detections(detections: int) -> typing.Optional[str]:
    """
    Converts the number of scanners that flagged an app to a ground truth
    label. Apps in the grey zone between are not trusted either way and get
    None so they can be left out of a dataset.

    :param detections: The number of scanners that flagged the app.
    :return: benign, malware or None.
    """
    if detections < 0:
        raise DatasetError("Detection count cannot be negative, got %d" % detections)
    if detections == 0:
        return Label.BENIGN
    if detections > MALWARE_DETECTION_MINIMUM:
        return Label.MALWARE
    return None


def split_dataset(
    dataset: LabeledDataset,
    fraction: float = 0.1,
    seed: int = 0,
) -> typing.Tuple[LabeledDataset, LabeledDataset]:
    """
    Deterministically splits a dataset into a training and held out part. Both
    parts keep the original sample order.

    :param dataset: The dataset to split.
    :param fraction: The share of samples to hold out, in [0, 1).
    :param seed: The seed of the split.
    :return: A tuple of (train, held_out).
    """
    if not 0.0 <= fraction < 1.0:
        raise DatasetError("Held out fraction must be in [0, 1), got %s" % fraction)

    rng = np.random.default_rng(unsigned_seed(seed))
    order = rng.permutation(len(dataset))
    held_count = int(round(len(dataset) * fraction))
    held = sorted(int(i) for i in order[:held_count])
    train = sorted(int(i) for i in order[held_count:])

    return dataset.subset(train), dataset.subset(held)
