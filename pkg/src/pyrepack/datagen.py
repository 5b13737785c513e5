# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import json
import logging
import math
import typing
import warnings
from dataclasses import dataclass, field

import numpy as np

from pyrepack import __version__
from pyrepack._utils import check_seed, format_float, sha256_hex, unsigned_seed
from pyrepack.exceptions import ConfigError
from pyrepack.features import (
    DEFAULT_SCHEMA_SIZE,
    FeatureCategory,
    FeatureSchema,
    FeatureVector,
    Label,
    LabeledDataset,
)

log = logging.getLogger(__name__)

# Minimum share of code a repackaged app keeps from the app it was built from
REPACKAGE_SHARE_MINIMUM = 0.8


class Family(object):
    BENIGN = "benign"
    MALWARE = "malware"
    REPACKAGED = "repackaged"

    ALL = (BENIGN, MALWARE, REPACKAGED)


# Features most often reported as benign-indicative over a vetted app corpus.
TOP_BENIGN_FEATURES = (
    "Class:java.lang.ClassLoader",
    "Intent:action.BATTERY_CHANGED",
    "Intent:action.PACKAGE_REPLACED",
    "Class:android.content.ContentResolver",
    "Intent:extra.CONTENT_ANNOTATIONS",
    "Intent:action.ACTION_SHUTDOWN",
    "Class:android.content.ContentProvider",
    "Permission:MANAGE_OWN_CALLS",
    "Intent:action.SEARCH",
    "Intent:action.ACTION_POWER_CONNECTED",
    "Class:android.net.ConnectivityManager",
    "Intent:action.EDIT",
    "Permission:CAMERA",
    "Class:android.telephony.TelephonyManager",
    "Intent:category.MONKEY",
    "Class:android.content.pm.PackageInstaller",
    "Package:org.apache.http.params",
    "Intent:action.MANAGED_PROFILE_UNLOCKED",
    "Class:android.net.http.SslCertificate",
    "Permission:CALL_PHONE",
)


class _ProfileGroup(object):
    """
    A block of features sharing one (benign, malware) presence probability.
    Sizes are for the 694 feature default schema and scale with the schema
    size.
    """

    def __init__(self, size: int, benign: float, malware: float) -> None:
        self.size = size
        self.benign = benign
        self.malware = malware

    def scaled_size(self, schema_size: int) -> int:
        return max(1, int(round(self.size * schema_size / DEFAULT_SCHEMA_SIZE)))


STRONG_BENIGN = _ProfileGroup(len(TOP_BENIGN_FEATURES), 0.6, 0.08)
MALICIOUS = _ProfileGroup(40, 0.03, 0.55)
WEAK_BENIGN = _ProfileGroup(60, 0.3, 0.18)
COMMON = _ProfileGroup(80, 0.2, 0.2)
BACKGROUND_PROBABILITY = 0.01


def default_profiles(schema: FeatureSchema) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Builds the per feature presence probabilities of benign and ordinary
    malware apps.

    The well known benign features (topped up from the Intent and Class
    categories on schemas that lack them) are common in benign apps and rare
    in malware. A disjoint malicious block is the reverse. A weak benign block
    leans slightly benign, a common block is shared by both classes and the
    remaining features are rare background noise. The blocks outside of the
    benign features are laid out by a shuffle seeded from the schema
    fingerprint, so the profiles only depend on the schema.

    :param schema: The feature schema.
    :return: A tuple of (benign_profile, malware_profile).
    """
    size = len(schema)
    if size == 0:
        raise ConfigError("Cannot build profiles for an empty schema")

    benign = np.full(size, BACKGROUND_PROBABILITY)
    malware = np.full(size, BACKGROUND_PROBABILITY)

    strong_size = STRONG_BENIGN.scaled_size(size)
    strong = [schema.index_of(name) for name in TOP_BENIGN_FEATURES if name in schema.names]
    fillers = [
        f.index for f in schema if f.category in (FeatureCategory.INTENT, FeatureCategory.CLASS) and f.index not in strong
    ]
    strong = (strong + fillers)[:strong_size]

    rng = np.random.default_rng(int(schema.fingerprint[:16], 16))
    strong_set = set(strong)
    remaining = [int(i) for i in rng.permutation(size) if int(i) not in strong_set]

    benign[strong] = STRONG_BENIGN.benign
    malware[strong] = STRONG_BENIGN.malware
    offset = 0
    for group in (MALICIOUS, WEAK_BENIGN, COMMON):
        block = remaining[offset : offset + group.scaled_size(size)]
        benign[block] = group.benign
        malware[block] = group.malware
        offset += len(block)

    return benign, malware


def _check_profile(name: str, profile: typing.Any, size: int) -> np.ndarray:
    arr = np.array(profile, dtype=np.float64)
    if arr.shape != (size,):
        raise ConfigError("%s must hold one probability per schema feature, expecting %d got %s" % (name, size, arr.shape))
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ConfigError("%s contains a probability outside of [0, 1]" % name)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GenConfig:
    """
    Describes a synthetic dataset. Profiles left as None use
    default_profiles(schema).
    """

    schema: FeatureSchema
    n_benign: int = 0
    n_malware: int = 0
    n_repackaged: int = 0
    benign_profile: typing.Optional[np.ndarray] = field(default=None, repr=False)
    malware_profile: typing.Optional[np.ndarray] = field(default=None, repr=False)
    share_fraction: float = 0.85
    payload_size: int = 12
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_benign", "n_malware", "n_repackaged"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("%s must be a non-negative integer, got %r" % (name, value))

        if isinstance(self.payload_size, bool) or not isinstance(self.payload_size, int) or self.payload_size < 1:
            raise ConfigError("payload_size must be a positive integer, got %r" % (self.payload_size,))
        if not (isinstance(self.share_fraction, (int, float)) and 0.0 <= self.share_fraction <= 1.0):
            raise ConfigError("share_fraction must be in [0, 1], got %r" % (self.share_fraction,))
        if self.share_fraction < REPACKAGE_SHARE_MINIMUM:
            warnings.warn(
                "share_fraction %s is below %s, the generated apps no longer meet the usual repackaging definition"
                % (self.share_fraction, REPACKAGE_SHARE_MINIMUM)
            )
        check_seed(self.seed)

        size = len(self.schema)
        benign, malware = self.benign_profile, self.malware_profile
        if benign is None or malware is None:
            defaults = default_profiles(self.schema)
            benign = defaults[0] if benign is None else benign
            malware = defaults[1] if malware is None else malware
        object.__setattr__(self, "benign_profile", _check_profile("benign_profile", benign, size))
        object.__setattr__(self, "malware_profile", _check_profile("malware_profile", malware, size))

        available = int(np.count_nonzero(self.malware_profile))
        if self.payload_size > available:
            raise ConfigError(
                "payload_size %d exceeds the %d features with a non-zero malware probability"
                % (self.payload_size, available)
            )

    @property
    def benign(self) -> np.ndarray:
        assert self.benign_profile is not None
        return self.benign_profile

    @property
    def malware(self) -> np.ndarray:
        assert self.malware_profile is not None
        return self.malware_profile

    @staticmethod
    def from_dict(data: typing.Dict[str, typing.Any], schema: FeatureSchema) -> "GenConfig":
        known = {
            "n_benign",
            "n_malware",
            "n_repackaged",
            "benign_profile",
            "malware_profile",
            "share_fraction",
            "payload_size",
            "seed",
        }
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("Unknown generator config keys: %s" % ", ".join(unknown))
        return GenConfig(schema=schema, **data)

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {
            "benign_profile_digest": _profile_digest(self.benign),
            "malware_profile_digest": _profile_digest(self.malware),
            "n_benign": self.n_benign,
            "n_malware": self.n_malware,
            "n_repackaged": self.n_repackaged,
            "payload_size": self.payload_size,
            "schema_fingerprint": self.schema.fingerprint,
            "seed": self.seed,
            "share_fraction": self.share_fraction,
        }


def _profile_digest(profile: np.ndarray) -> str:
    return sha256_hex(",".join(format_float(p) for p in profile))


def payload_pool(malware_profile: np.ndarray, payload_size: int) -> np.ndarray:
    """
    The features a malicious payload is drawn from, every feature whose
    malware probability is at least the payload_size-th highest one. Ties at
    the cut-off are all included.

    :param malware_profile: The malware presence probabilities.
    :param payload_size: The number of payload features to inject.
    :return: The sorted candidate feature indices.
    """
    available = int(np.count_nonzero(malware_profile))
    if payload_size < 1 or payload_size > available:
        raise ConfigError(
            "payload_size %d must be between 1 and the %d features with a non-zero malware probability"
            % (payload_size, available)
        )

    cutoff = np.sort(malware_profile)[::-1][payload_size - 1]
    return np.flatnonzero((malware_profile >= cutoff) & (malware_profile > 0))


def repackage(
    template: np.ndarray,
    share_fraction: float,
    pool: np.ndarray,
    payload_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Turns a benign app into a piggybacked one. A share of the template's set
    features is kept, rounded up, and payload_size features from the pool are
    switched on.

    :param template: The benign feature bits.
    :param share_fraction: The share of the set features to keep.
    :param pool: The payload candidate indices.
    :param payload_size: The number of payload features to set.
    :param rng: The generator random stream.
    :return: The new feature bits.
    """
    present = np.flatnonzero(template)
    keep_count = int(math.ceil(share_fraction * present.size))
    kept = rng.choice(present, size=keep_count, replace=False) if keep_count else np.zeros(0, dtype=np.int64)
    payload = rng.choice(pool, size=payload_size, replace=False)

    bits = np.zeros(template.shape[0], dtype=np.uint8)
    bits[kept] = 1
    bits[payload] = 1
    return bits


def _draw(profile: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(profile.shape[0]) < profile).astype(np.uint8)


def generate(cfg: GenConfig) -> LabeledDataset:
    """
    Generates the benign, ordinary malware and repackaged malware apps of a
    config, in that order. The output only depends on the config.

    :param cfg: The generator config.
    :return: The LabeledDataset, each sample tagged with its family.
    """
    rng = np.random.default_rng(unsigned_seed(cfg.seed))
    fingerprint = cfg.schema.fingerprint
    samples = []

    for idx in range(cfg.n_benign):
        bits = _draw(cfg.benign, rng)
        samples.append(FeatureVector("benign-%05d" % idx, bits, fingerprint, Label.BENIGN, Family.BENIGN))

    for idx in range(cfg.n_malware):
        bits = _draw(cfg.malware, rng)
        samples.append(FeatureVector("malware-%05d" % idx, bits, fingerprint, Label.MALWARE, Family.MALWARE))

    if cfg.n_repackaged:
        pool = payload_pool(cfg.malware, cfg.payload_size)
        for idx in range(cfg.n_repackaged):
            bits = repackage(_draw(cfg.benign, rng), cfg.share_fraction, pool, cfg.payload_size, rng)
            samples.append(FeatureVector("repack-%05d" % idx, bits, fingerprint, Label.MALWARE, Family.REPACKAGED))

    log.info(
        "Generated %d benign, %d malware and %d repackaged samples with seed %d"
        % (cfg.n_benign, cfg.n_malware, cfg.n_repackaged, cfg.seed)
    )
    return LabeledDataset(fingerprint, len(cfg.schema), samples)


def write_provenance(cfg: GenConfig, path: str) -> None:
    provenance = {
        "config": cfg.to_dict(),
        "generator": "pyrepack.datagen",
        "version": __version__,
    }
    with open(path, "wb") as fd:
        fd.write((json.dumps(provenance, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    log.info("Wrote generator provenance to '%s'" % path)
