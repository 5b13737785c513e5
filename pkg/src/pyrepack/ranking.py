# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import collections
import logging
import typing
from dataclasses import dataclass

from pyrepack._utils import decode_error_line, sha256_hex, to_unicode
from pyrepack.classifier import Model
from pyrepack.exceptions import FingerprintMismatchError, RankError, SchemaError
from pyrepack.explainer import ExplainConfig, benign_features_of, explain_all
from pyrepack.features import FeatureSchema, LabeledDataset

log = logging.getLogger(__name__)

RANK_COLUMNS = "rank,feature_name,count"


@dataclass(frozen=True)
class RankedBenignFeatures:
    """
    How often each feature was reported as pushing a development set
    prediction towards benign, most frequent first and ties broken by the
    lower feature index.
    """

    entries: typing.Tuple[typing.Tuple[int, int], ...]
    dev_set_size: int
    explain_config_digest: str
    schema_fingerprint: str
    skipped: int = 0

    def __post_init__(self) -> None:
        seen = set()
        previous: typing.Optional[typing.Tuple[int, int]] = None
        for idx, count in self.entries:
            if idx in seen:
                raise RankError("Feature %d is ranked more than once" % idx)
            seen.add(idx)
            if count < 1 or count > self.dev_set_size:
                raise RankError("Feature %d has count %d outside of [1, %d]" % (idx, count, self.dev_set_size))
            key = (-count, idx)
            if previous is not None and key < previous:
                raise RankError("Ranked entries are not sorted by count then index at feature %d" % idx)
            previous = key

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> typing.Dict[int, int]:
        return dict(self.entries)

    def digest(self) -> str:
        body = "schema=%s;dev_size=%d;explain_config=%s;skipped=%d;" % (
            self.schema_fingerprint,
            self.dev_set_size,
            self.explain_config_digest,
            self.skipped,
        )
        body += ";".join("%d:%d" % entry for entry in self.entries)
        return sha256_hex(body)


def ranking_from_counts(
    counts: typing.Mapping[int, int],
    dev_set_size: int,
    explain_config_digest: str,
    schema_fingerprint: str,
    skipped: int = 0,
) -> RankedBenignFeatures:
    entries = sorted(((int(i), int(c)) for i, c in counts.items() if c > 0), key=lambda e: (-e[1], e[0]))
    return RankedBenignFeatures(
        entries=tuple(entries),
        dev_set_size=dev_set_size,
        explain_config_digest=explain_config_digest,
        schema_fingerprint=schema_fingerprint,
        skipped=skipped,
    )


def rank_benign_features(
    m: Model,
    dev: LabeledDataset,
    cfg: typing.Optional[ExplainConfig] = None,
    threads: int = 1,
) -> RankedBenignFeatures:
    """
    Explains every development sample, whatever it is predicted as, and counts
    how often each feature shows up with a benign (negative) contribution.
    Apps with no active features have nothing to explain and are skipped.

    :param m: The trained model.
    :param dev: The development set.
    :param cfg: The explanation config, its digest is recorded in the result.
    :param threads: The number of explanations to run concurrently, the
        result does not depend on it.
    :return: The RankedBenignFeatures.
    """
    cfg = cfg or ExplainConfig()
    if len(dev) == 0:
        raise RankError("Cannot rank benign features over an empty development set")
    if dev.schema_fingerprint != m.schema_fingerprint:
        raise FingerprintMismatchError(m.schema_fingerprint, dev.schema_fingerprint, "development set")

    log.info("Ranking benign features over %d development samples with %d thread(s)" % (len(dev), threads))
    counts: typing.Counter[int] = collections.Counter()
    skipped = 0
    for explanation in explain_all(m, dev.samples, cfg, threads=threads):
        if explanation is None:
            skipped += 1
        else:
            counts.update(benign_features_of(explanation))

    ranking = ranking_from_counts(counts, len(dev), cfg.digest(), m.schema_fingerprint, skipped=skipped)
    log.info("Ranked %d benign features, skipped %d samples" % (len(ranking), skipped))
    return ranking


def top_k(r: RankedBenignFeatures, k: int) -> typing.FrozenSet[int]:
    if k < 0 or k > len(r.entries):
        raise RankError("k %d is outside of the %d ranked benign features" % (k, len(r.entries)))
    return frozenset(idx for idx, _ in r.entries[:k])


def serialize_rank(r: RankedBenignFeatures, schema: FeatureSchema) -> str:
    if r.schema_fingerprint != schema.fingerprint:
        raise FingerprintMismatchError(schema.fingerprint, r.schema_fingerprint, "ranking")

    lines = [
        "#schema=%s" % r.schema_fingerprint,
        "#dev_size=%d" % r.dev_set_size,
        "#explain_config=%s" % r.explain_config_digest,
        "#skipped=%d" % r.skipped,
        RANK_COLUMNS,
    ]
    for rank, (idx, count) in enumerate(r.entries, start=1):
        lines.append("%d,%s,%d" % (rank, schema.name_of(idx), count))

    return "".join("%s\n" % line for line in lines)


def parse_rank_text(text: str, schema: FeatureSchema) -> RankedBenignFeatures:
    header: typing.Dict[str, str] = {}
    counts: typing.Dict[int, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line == RANK_COLUMNS:
            continue

        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if not sep:
                raise RankError("Invalid rank file header on line %d: '%s'" % (line_no, line))
            header[key] = value
            continue

        fields = line.split(",")
        if len(fields) != 3:
            raise RankError("Expecting 'rank,feature_name,count' on line %d" % line_no)
        try:
            idx = schema.index_of(fields[1])
            count = int(fields[2])
        except (SchemaError, ValueError) as err:
            raise RankError("Invalid rank row on line %d: %s" % (line_no, err)) from err
        if idx in counts:
            raise RankError("Feature '%s' is ranked twice, line %d" % (fields[1], line_no))
        counts[idx] = count

    missing = [k for k in ("schema", "dev_size", "explain_config") if k not in header]
    if missing:
        raise RankError("Rank file is missing the header field(s): %s" % ", ".join(missing))
    if header["schema"] != schema.fingerprint:
        raise FingerprintMismatchError(schema.fingerprint, header["schema"], "rank file")

    try:
        dev_size = int(header["dev_size"])
        skipped = int(header.get("skipped", "0"))
    except ValueError as err:
        raise RankError("Invalid rank file header value: %s" % err) from err

    ranking = ranking_from_counts(counts, dev_size, header["explain_config"], schema.fingerprint, skipped=skipped)
    if len(ranking) != len(counts):
        raise RankError("Rank file contains features with a count of 0")
    return ranking


def save_rank(r: RankedBenignFeatures, schema: FeatureSchema, path: str) -> None:
    with open(path, "wb") as fd:
        fd.write(serialize_rank(r, schema).encode("utf-8"))
    log.info("Wrote %d ranked features to '%s'" % (len(r), path))


def load_rank(path: str, schema: FeatureSchema) -> RankedBenignFeatures:
    with open(path, "rb") as fd:
        data = fd.read()

    try:
        text = to_unicode(data)
    except UnicodeDecodeError as err:
        raise RankError("Rank file '%s' is not valid UTF-8 on line %d" % (path, decode_error_line(data, err))) from err

    return parse_rank_text(text, schema)
