# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import logging
import math
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import Ridge

from pyrepack._utils import check_seed, derive_seed, format_float, sha256_hex
from pyrepack.classifier import Model, check_vector, predict_proba_matrix
from pyrepack.exceptions import ConfigError, ExplainError
from pyrepack.features import FeatureSchema, FeatureVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExplainConfig:
    """
    Controls the local surrogate fit.

    kernel_width of None means 0.75 * sqrt(active feature count) of the vector
    being explained.
    """

    num_samples: int = 1000
    kernel_width: typing.Optional[float] = None
    top_m: int = 10
    ridge_penalty: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_samples", "top_m"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError("%s must be a positive integer, got %r" % (name, value))

        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ConfigError("kernel_width must be positive, got %r" % self.kernel_width)
        if not (self.ridge_penalty >= 0 and math.isfinite(self.ridge_penalty)):
            raise ConfigError("ridge_penalty must be a finite non-negative number, got %r" % self.ridge_penalty)
        check_seed(self.seed)

    def width_for(self, active_count: int) -> float:
        if self.kernel_width is not None:
            return float(self.kernel_width)
        return 0.75 * math.sqrt(active_count)

    def digest(self) -> str:
        width = "auto" if self.kernel_width is None else format_float(self.kernel_width)
        return sha256_hex(
            "num_samples=%d;kernel_width=%s;top_m=%d;ridge_penalty=%s;seed=%d"
            % (self.num_samples, width, self.top_m, format_float(self.ridge_penalty), self.seed)
        )


@dataclass(frozen=True)
class Explanation:
    """
    The signed attribution of one prediction. A positive weight means the
    presence of the feature pushes the app towards malware, a negative weight
    towards benign. Contributions are sorted by magnitude, largest first.
    """

    app_id: str
    contributions: typing.Tuple[typing.Tuple[int, float], ...]
    intercept: float
    surrogate_fit_r2: float


def sample_perturbations(active_count: int, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draws the neighbourhood of an instance in its active feature space. Each
    row keeps (1) or drops (0) every active feature, the first row is the
    instance itself and the others drop every feature with probability 1/2.
    Inactive features are never switched on.

    :param active_count: The number of active features in the instance.
    :param num_samples: The number of rows to draw.
    :param rng: The random stream of this explanation.
    :return: A float64 mask matrix of shape (num_samples, active_count).
    """
    masks = rng.integers(0, 2, size=(num_samples, active_count)).astype(np.float64)
    masks[0, :] = 1.0
    return masks


def kernel_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """
    Exponential kernel exp(-d^2 / width^2) where d is the Hamming distance
    between a perturbation and the instance, the number of dropped active
    features. The weights are rescaled to a mean of 1, which only changes the
    scale of the whole weighted problem and keeps the distant samples from
    underflowing to 0.
    """
    hamming = masks.shape[1] - masks.sum(axis=1)
    distance_sq = hamming**2
    weights = np.exp(-(distance_sq - distance_sq.min()) / kernel_width**2)
    return weights * (weights.shape[0] / weights.sum())


def fit_surrogate(
    masks: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    ridge_penalty: float,
) -> typing.Tuple[np.ndarray, float, float]:
    """
    Weighted ridge regression of the targets on the mask columns with an
    unpenalised intercept.

    :param masks: The design matrix, one column per active feature.
    :param targets: The model output for each row.
    :param weights: The per row sample weights.
    :param ridge_penalty: The L2 penalty on the coefficients.
    :return: A tuple of (coefficients, intercept, weighted R^2 clipped to [0, 1]).
    """
    surrogate = Ridge(alpha=ridge_penalty, fit_intercept=True)
    try:
        surrogate.fit(masks, targets, sample_weight=weights)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise ExplainError("Surrogate regression failed: %s" % err) from err

    coef = np.asarray(surrogate.coef_, dtype=np.float64)
    if not np.all(np.isfinite(coef)):
        raise ExplainError("Surrogate regression produced non-finite coefficients")

    r2 = float(surrogate.score(masks, targets, sample_weight=weights))
    return coef, float(surrogate.intercept_), min(max(r2, 0.0), 1.0)


def explain(m: Model, v: FeatureVector, cfg: typing.Optional[ExplainConfig] = None) -> Explanation:
    """
    Explains the malware probability of one app with a local linear
    surrogate. The random stream is derived from the config seed and the
    app_id so the result does not depend on what else is explained or in what
    order.

    :param m: The model to explain.
    :param v: The app to explain, must match the model schema.
    :param cfg: The explanation config.
    :return: The Explanation holding at most top_m contributions.
    """
    cfg = cfg or ExplainConfig()
    check_vector(m, v)
    if cfg.top_m > len(v):
        raise ConfigError("top_m %d is larger than the schema of %d features" % (cfg.top_m, len(v)))

    active = v.active_indices()
    active_count = int(active.shape[0])
    if active_count == 0:
        raise ExplainError("App '%s' has no active features to perturb" % v.app_id)
    if cfg.num_samples < active_count + 1:
        raise ConfigError(
            "num_samples %d is too small to fit %d active features of '%s'" % (cfg.num_samples, active_count, v.app_id)
        )

    rng = np.random.default_rng(derive_seed(cfg.seed, v.app_id))
    masks = sample_perturbations(active_count, cfg.num_samples, rng)

    inputs = np.zeros((cfg.num_samples, len(v)), dtype=np.float64)
    inputs[:, active] = masks
    targets = predict_proba_matrix(m, inputs)

    weights = kernel_weights(masks, cfg.width_for(active_count))
    coef, intercept, r2 = fit_surrogate(masks, targets, weights, cfg.ridge_penalty)

    order = sorted(range(active_count), key=lambda j: (-abs(coef[j]), int(active[j])))[: cfg.top_m]
    contributions = tuple((int(active[j]), float(coef[j])) for j in order)
    log.debug("Explained '%s' over %d active features, R^2 %.4f" % (v.app_id, active_count, r2))

    return Explanation(app_id=v.app_id, contributions=contributions, intercept=intercept, surrogate_fit_r2=r2)


def explain_all(
    m: Model,
    samples: typing.Sequence[FeatureVector],
    cfg: typing.Optional[ExplainConfig] = None,
    threads: int = 1,
) -> typing.List[typing.Optional[Explanation]]:
    """
    Explains many apps, concurrently when threads > 1. Every explanation has
    its own random stream so the output is the same for any thread count.
    Apps with no active features have nothing to explain and get None.

    :param m: The model to explain.
    :param samples: The apps to explain.
    :param cfg: The explanation config.
    :param threads: The number of worker threads.
    :return: The explanations in the input order.
    """
    cfg = cfg or ExplainConfig()
    if threads < 1:
        raise ConfigError("threads must be at least 1, got %d" % threads)

    def explain_one(sample: FeatureVector) -> typing.Optional[Explanation]:
        if sample.popcount == 0:
            log.debug("Skipping '%s', it has no active features" % sample.app_id)
            return None
        return explain(m, sample, cfg)

    if threads == 1:
        return [explain_one(s) for s in samples]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(explain_one, samples))


def benign_features_of(e: Explanation) -> typing.FrozenSet[int]:
    return frozenset(idx for idx, weight in e.contributions if weight < 0)


def write_explanations(explanations: typing.Iterable[Explanation], schema: FeatureSchema, path: str) -> None:
    rows = ["app_id,feature_name,weight\n"]
    for e in explanations:
        for idx, weight in e.contributions:
            rows.append("%s,%s,%s\n" % (e.app_id, schema.name_of(idx), format_float(weight)))

    with open(path, "wb") as fd:
        fd.write("".join(rows).encode("utf-8"))
    log.info("Wrote %d explanation rows to '%s'" % (len(rows) - 1, path))
