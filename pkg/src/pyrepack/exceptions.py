# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import typing


class RepackError(Exception):
    # Base pyrepack Error
    pass


class _LineError(RepackError):
    # An error tied to a line of an input text file

    @property
    def reason(self) -> str:
        return self.args[0]

    @property
    def line(self) -> typing.Optional[int]:
        return self.args[1] if len(self.args) > 1 else None

    @property
    def message(self) -> str:
        if self.line is None:
            return self.reason
        return "%s (line %d)" % (self.reason, self.line)

    def __str__(self) -> str:
        return self.message


class SchemaError(_LineError):
    # Used when a feature schema file is malformed
    pass


class DatasetError(_LineError):
    # Used when a dataset file or row is malformed
    pass


class FingerprintMismatchError(RepackError):
    # Two artifacts were built against different feature schemas

    @property
    def expected(self) -> str:
        return self.args[0]

    @property
    def actual(self) -> str:
        return self.args[1]

    @property
    def context(self) -> str:
        return self.args[2] if len(self.args) > 2 else "input"

    @property
    def message(self) -> str:
        return "Schema fingerprint mismatch for %s: expected '%s' but got '%s'" % (
            self.context,
            self.expected,
            self.actual,
        )

    def __str__(self) -> str:
        return self.message


class FeatureIndexError(RepackError):
    # A feature index is outside of the schema

    @property
    def index(self) -> int:
        return self.args[0]

    @property
    def size(self) -> int:
        return self.args[1]

    @property
    def message(self) -> str:
        return "Feature index %d is out of range for a schema of %d features" % (self.index, self.size)

    def __str__(self) -> str:
        return self.message


class ModelFormatError(RepackError):
    # Any error while packing or unpacking a model file
    pass


class ModelVersionError(ModelFormatError):
    # The model file was written by an unsupported format version

    @property
    def found(self) -> int:
        return self.args[0]

    @property
    def supported(self) -> int:
        return self.args[1]

    @property
    def message(self) -> str:
        return "Unsupported model format version %d, this version of pyrepack reads version %d" % (
            self.found,
            self.supported,
        )

    def __str__(self) -> str:
        return self.message


class TrainingError(RepackError):
    # Training could not start or diverged

    @property
    def reason(self) -> str:
        return self.args[0]

    @property
    def epoch(self) -> typing.Optional[int]:
        return self.args[1] if len(self.args) > 1 else None

    @property
    def message(self) -> str:
        if self.epoch is None:
            return self.reason
        return "%s at epoch %d" % (self.reason, self.epoch)

    def __str__(self) -> str:
        return self.message


class ConfigError(RepackError):
    # A configuration value is outside of its valid range
    pass


class ExplainError(RepackError):
    # The local surrogate could not be built for a sample
    pass


class RankError(RepackError):
    # Ranking or rank file errors, including k outside of the ranked entries
    pass


class DetectionError(RepackError):
    # A batch detection aborted on a sample

    @property
    def index(self) -> int:
        return self.args[0]

    @property
    def cause(self) -> BaseException:
        return self.args[1]

    @property
    def message(self) -> str:
        return "Detection failed on sample %d: %s" % (self.index, self.cause)

    def __str__(self) -> str:
        return self.message


class InvariantViolation(RepackError):
    # An evaluation run broke a property that must hold by construction
    pass
