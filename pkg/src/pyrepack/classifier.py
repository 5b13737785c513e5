# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import logging
import math
import struct
import typing
from dataclasses import asdict, dataclass, fields

import numpy as np

from pyrepack._utils import (
    check_seed,
    format_float,
    sha256_hex,
    to_unicode,
    unsigned_seed,
)
from pyrepack.exceptions import (
    ConfigError,
    FingerprintMismatchError,
    ModelFormatError,
    ModelVersionError,
    TrainingError,
)
from pyrepack.features import FeatureVector, Label, LabeledDataset

log = logging.getLogger(__name__)

MODEL_MAGIC = b"RPKM"
MODEL_FORMAT_VERSION = 1
OUTPUT_WIDTH = 2

Params = typing.Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    hidden_width: int = 200
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 128
    l2_penalty: float = 0.0
    seed: int = 0
    class_weighted: bool = False

    def __post_init__(self) -> None:
        for name in ("hidden_width", "epochs", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError("%s must be a positive integer, got %r" % (name, value))

        if self.hidden_width > 65536:
            raise ConfigError("hidden_width %d is larger than the supported 65536" % self.hidden_width)
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must be in (0, 1], got %r" % self.learning_rate)
        if not 0.0 <= self.l2_penalty <= 1.0:
            raise ConfigError("l2_penalty must be in [0, 1], got %r" % self.l2_penalty)
        check_seed(self.seed)

    @staticmethod
    def from_dict(data: typing.Dict[str, typing.Any]) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("Unknown training config keys: %s" % ", ".join(unknown))
        return TrainConfig(**data)

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return asdict(self)


@dataclass(frozen=True)
class DecisionThreshold:
    delta: float = 0.5

    def __post_init__(self) -> None:
        if not (isinstance(self.delta, (int, float)) and 0.0 <= self.delta <= 1.0):
            raise ConfigError("Decision threshold must be in [0, 1], got %r" % (self.delta,))


class Model(object):
    def __init__(
        self,
        schema_fingerprint: str,
        w1: typing.Any,
        b1: typing.Any,
        w2: typing.Any,
        b2: typing.Any,
        training_meta: typing.Optional[typing.Dict[str, str]] = None,
    ) -> None:
        """
        The single hidden layer network, input -> ReLU hidden -> softmax over
        (benign, malware).

        :param schema_fingerprint: The schema the input layer is laid out in.
        :param w1: Input to hidden weights, shape (features, hidden).
        :param b1: Hidden biases, shape (hidden,).
        :param w2: Hidden to output weights, shape (hidden, 2).
        :param b2: Output biases, shape (2,).
        :param training_meta: Key/value strings describing how it was trained.
        """
        w1 = np.array(w1, dtype=np.float64)
        b1 = np.array(b1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        b2 = np.array(b2, dtype=np.float64)

        if w1.ndim != 2 or w1.shape[0] < 1 or w1.shape[1] < 1:
            raise ModelFormatError("Input layer weights must be a non-empty 2D array, got shape %s" % (w1.shape,))
        hidden = w1.shape[1]
        if b1.shape != (hidden,) or w2.shape != (hidden, OUTPUT_WIDTH) or b2.shape != (OUTPUT_WIDTH,):
            raise ModelFormatError(
                "Inconsistent layer shapes: w1 %s, b1 %s, w2 %s, b2 %s" % (w1.shape, b1.shape, w2.shape, b2.shape)
            )
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError("Model parameter %s contains NaN or Inf values" % name)
            arr.setflags(write=False)

        self.schema_fingerprint = schema_fingerprint
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.training_meta: typing.Dict[str, str] = dict(training_meta or {})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return self.pack() == other.pack()

    def __repr__(self) -> str:
        return "<Model inputs=%d hidden=%d schema=%s>" % (self.input_width, self.hidden_width, self.schema_fingerprint[:12])

    @property
    def input_width(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden_width(self) -> int:
        return int(self.w1.shape[1])

    @property
    def params(self) -> Params:
        return self.w1, self.b1, self.w2, self.b2

    def digest(self) -> str:
        return sha256_hex(self.pack())

    def pack(self) -> bytes:
        try:
            b_fingerprint = bytes.fromhex(self.schema_fingerprint)
        except ValueError:
            b_fingerprint = b""
        if len(b_fingerprint) != 32:
            raise ModelFormatError("Schema fingerprint '%s' is not a sha256 hex digest" % self.schema_fingerprint)

        data = struct.pack("<4sH", MODEL_MAGIC, MODEL_FORMAT_VERSION)
        data += b_fingerprint
        data += struct.pack("<III", self.input_width, self.hidden_width, OUTPUT_WIDTH)
        for arr in self.params:
            data += arr.astype("<f8").tobytes(order="C")

        meta = "".join("%s=%s\n" % (k, v) for k, v in sorted(self.training_meta.items())).encode("utf-8")
        data += struct.pack("<I", len(meta))
        data += meta

        return data

    @staticmethod
    def unpack(data: bytes) -> "Model":
        if len(data) < 6:
            raise ModelFormatError("Model data is truncated, only %d bytes" % len(data))

        magic, version = struct.unpack("<4sH", data[0:6])
        if magic != MODEL_MAGIC:
            raise ModelFormatError("Model data does not start with the model magic bytes")
        if version != MODEL_FORMAT_VERSION:
            raise ModelVersionError(version, MODEL_FORMAT_VERSION)

        if len(data) < 50:
            raise ModelFormatError("Model header is truncated")
        b_fingerprint = data[6:38]
        if b_fingerprint == b"\x00" * 32:
            raise ModelFormatError("Model does not record the schema fingerprint it was trained against")
        input_width, hidden_width, output_width = struct.unpack("<III", data[38:50])
        if output_width != OUTPUT_WIDTH:
            raise ModelFormatError("Model has %d outputs, expecting %d" % (output_width, OUTPUT_WIDTH))

        shapes = [(input_width, hidden_width), (hidden_width,), (hidden_width, OUTPUT_WIDTH), (OUTPUT_WIDTH,)]
        offset = 50
        params = []
        for shape in shapes:
            length = 8 * math.prod(shape)
            if len(data) < offset + length:
                raise ModelFormatError("Model parameters are truncated")
            params.append(np.frombuffer(data[offset : offset + length], dtype="<f8").reshape(shape))
            offset += length

        if len(data) < offset + 4:
            raise ModelFormatError("Model training metadata is truncated")
        meta_length = struct.unpack("<I", data[offset : offset + 4])[0]
        offset += 4
        if len(data) != offset + meta_length:
            raise ModelFormatError("Model training metadata length does not match the remaining data")

        try:
            meta_text = to_unicode(data[offset:])
        except UnicodeDecodeError as err:
            raise ModelFormatError("Model training metadata is not valid UTF-8") from err

        meta: typing.Dict[str, str] = {}
        for line in meta_text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise ModelFormatError("Invalid training metadata line '%s'" % line)
            meta[key] = value

        log.debug("Unpacked model with %d inputs and %d hidden units" % (input_width, hidden_width))
        return Model(b_fingerprint.hex(), params[0], params[1], params[2], params[3], training_meta=meta)


def check_vector(m: Model, v: FeatureVector) -> None:
    if v.schema_fingerprint != m.schema_fingerprint:
        raise FingerprintMismatchError(m.schema_fingerprint, v.schema_fingerprint, "feature vector '%s'" % v.app_id)
    if len(v) != m.input_width:
        raise ModelFormatError("Feature vector '%s' has %d features, model expects %d" % (v.app_id, len(v), m.input_width))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: Params, x: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    w1, b1, w2, b2 = params
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ w2 + b2
    return z1, a1, logits


def predict_probabilities(m: Model, x: np.ndarray) -> np.ndarray:
    """
    The (benign, malware) softmax output for every row of x.

    :param m: The model.
    :param x: The input matrix of shape (N, features).
    :return: Array of shape (N, 2) where each row sums to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_width:
        raise ModelFormatError("Input matrix of shape %s does not fit a model of %d inputs" % (x.shape, m.input_width))
    logits = _forward(m.params, x)[2]
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def predict_proba_matrix(m: Model, x: np.ndarray) -> np.ndarray:
    return predict_probabilities(m, x)[:, 1]


def predict_proba(m: Model, v: FeatureVector) -> float:
    """
    The probability the model assigns to the app being malware.

    :param m: The model.
    :param v: The feature vector, must match the model's schema.
    :return: The malware probability in [0, 1].
    """
    check_vector(m, v)
    return float(predict_proba_matrix(m, v.bits[np.newaxis, :])[0])


def maliciousness(m: Model, v: FeatureVector) -> float:
    # -1 is certainly benign, 1 certainly malware
    return 2.0 * predict_proba(m, v) - 1.0


def classify(m: Model, v: FeatureVector, t: typing.Optional[DecisionThreshold] = None) -> str:
    t = t or DecisionThreshold()
    return Label.MALWARE if predict_proba(m, v) >= t.delta else Label.BENIGN


def cross_entropy_loss(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    l2_penalty: float = 0.0,
    sample_weight: typing.Optional[np.ndarray] = None,
) -> float:
    log_probs = _log_softmax(_forward(params, x)[2])
    weights = np.ones(x.shape[0]) if sample_weight is None else sample_weight
    loss = -float((weights * log_probs[np.arange(x.shape[0]), y]).sum() / weights.sum())
    return loss + 0.5 * l2_penalty * float((params[0] ** 2).sum() + (params[2] ** 2).sum())


def loss_and_gradients(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    l2_penalty: float = 0.0,
    sample_weight: typing.Optional[np.ndarray] = None,
) -> typing.Tuple[float, Params]:
    """
    The weighted mean cross-entropy of a batch and its gradients with respect
    to (w1, b1, w2, b2). The L2 penalty applies to the weights, not the
    biases.

    :param params: The (w1, b1, w2, b2) parameters.
    :param x: The batch inputs of shape (N, features).
    :param y: The batch targets, 0 benign and 1 malware.
    :param l2_penalty: The L2 penalty strength.
    :param sample_weight: Optional per sample weights.
    :return: A tuple of (loss, (dw1, db1, dw2, db2)).
    """
    w1, b1, w2, b2 = params
    n = x.shape[0]
    weights = np.ones(n) if sample_weight is None else sample_weight
    norm = weights.sum()

    z1, a1, logits = _forward(params, x)
    log_probs = _log_softmax(logits)
    rows = np.arange(n)
    loss = -float((weights * log_probs[rows, y]).sum() / norm)
    loss += 0.5 * l2_penalty * float((w1**2).sum() + (w2**2).sum())

    d_logits = np.exp(log_probs)
    d_logits[rows, y] -= 1.0
    d_logits *= (weights / norm)[:, np.newaxis]

    d_w2 = a1.T @ d_logits + l2_penalty * w2
    d_b2 = d_logits.sum(axis=0)
    d_z1 = (d_logits @ w2.T) * (z1 > 0)
    d_w1 = x.T @ d_z1 + l2_penalty * w1
    d_b1 = d_z1.sum(axis=0)

    return loss, (d_w1, d_b1, d_w2, d_b2)


def _init_params(rng: np.random.Generator, inputs: int, hidden: int) -> typing.List[np.ndarray]:
    r1 = math.sqrt(6.0 / (inputs + hidden))
    r2 = math.sqrt(6.0 / (hidden + OUTPUT_WIDTH))
    return [
        rng.uniform(-r1, r1, size=(inputs, hidden)),
        np.zeros(hidden),
        rng.uniform(-r2, r2, size=(hidden, OUTPUT_WIDTH)),
        np.zeros(OUTPUT_WIDTH),
    ]


def train(data: LabeledDataset, cfg: typing.Optional[TrainConfig] = None) -> Model:
    """
    Trains the network with plain mini-batch gradient descent on the
    cross-entropy loss. The result only depends on the data and the config,
    training the same data with the same seed produces a bit identical model.

    :param data: Labeled training data holding both classes.
    :param cfg: The training config.
    :return: The trained Model.
    """
    cfg = cfg or TrainConfig()
    n = len(data)
    if n == 0:
        raise TrainingError("Cannot train on an empty dataset")

    x = data.matrix()
    y = data.targets()
    malware_count = int(y.sum())
    if malware_count == 0 or malware_count == n:
        only = Label.MALWARE if malware_count else Label.BENIGN
        raise TrainingError("Training data only contains the class '%s', both classes are required" % only)

    sample_weight = np.ones(n)
    if cfg.class_weighted:
        sample_weight = np.where(y == 1, n / (2.0 * malware_count), n / (2.0 * (n - malware_count)))

    rng = np.random.default_rng(unsigned_seed(cfg.seed))
    params = _init_params(rng, data.feature_count, cfg.hidden_width)
    log.info(
        "Training network %d-%d-%d on %d samples (%d malware) for %d epochs"
        % (data.feature_count, cfg.hidden_width, OUTPUT_WIDTH, n, malware_count, cfg.epochs)
    )

    loss = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            batch_loss, grads = loss_and_gradients(
                (params[0], params[1], params[2], params[3]),
                x[batch],
                y[batch],
                cfg.l2_penalty,
                sample_weight[batch],
            )
            if not math.isfinite(batch_loss):
                raise TrainingError("Training loss diverged to %s" % batch_loss, epoch)

            for param, grad in zip(params, grads):
                param -= cfg.learning_rate * grad

        loss = cross_entropy_loss((params[0], params[1], params[2], params[3]), x, y, cfg.l2_penalty, sample_weight)
        if not math.isfinite(loss):
            raise TrainingError("Training loss diverged to %s" % loss, epoch)
        log.debug("Epoch %d/%d training loss %.6f" % (epoch, cfg.epochs, loss))

    log.info("Finished training with a final loss of %.6f" % loss)
    meta = {
        "batch_size": str(cfg.batch_size),
        "class_weighted": str(cfg.class_weighted).lower(),
        "epochs": str(cfg.epochs),
        "final_loss": format_float(loss),
        "hidden_width": str(cfg.hidden_width),
        "l2_penalty": format_float(cfg.l2_penalty),
        "learning_rate": format_float(cfg.learning_rate),
        "samples": str(n),
        "seed": str(cfg.seed),
    }

    try:
        return Model(data.schema_fingerprint, params[0], params[1], params[2], params[3], training_meta=meta)
    except ModelFormatError as err:
        raise TrainingError("Training produced invalid parameters: %s" % err, cfg.epochs) from err


def save_model(m: Model, path: str) -> None:
    with open(path, "wb") as fd:
        fd.write(m.pack())
    log.info("Saved model to '%s'" % path)


def load_model(path: str) -> Model:
    with open(path, "rb") as fd:
        data = fd.read()
    return Model.unpack(data)
