# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import hashlib
import pkgutil
import typing

from pyrepack.exceptions import ConfigError

_SEED_MIN = -(2**63)
_SEED_MAX = 2**64 - 1


def to_bytes(
    obj: typing.Any,
    encoding: str = "utf-8",
) -> bytes:
    """
    Makes sure the string is encoded as a byte string.

    :param obj: Byte string or unicode string to encode
    :param encoding: The encoding to use
    :return: The byte string that was encoded
    """
    if isinstance(obj, bytes):
        return obj

    return obj.encode(encoding)


def to_unicode(
    obj: typing.Any,
    encoding: str = "utf-8",
) -> str:
    """
    Makes sure the string is unicode string.

    :param obj: Byte string or unicode string to decode
    :param encoding: The encoding to use
    :return: The unicode string the was decoded
    """
    if obj is None:
        obj = str(None)

    if isinstance(obj, str):
        return obj

    return obj.decode(encoding)


def decode_error_line(data: bytes, err: UnicodeDecodeError) -> int:
    """1 based line of the byte that failed to decode."""
    return data.count(b"\n", 0, err.start) + 1


def sha256_hex(data: typing.Union[str, bytes]) -> str:
    return hashlib.sha256(to_bytes(data)).hexdigest()


def file_digest(path: str) -> str:
    """
    Get the sha256 hex digest of a file, read in chunks so large datasets are
    not loaded into memory twice.

    :param path: The path to the file.
    :return: The hex digest.
    """
    sha256 = hashlib.sha256()
    with open(path, "rb") as fd:
        for data in iter((lambda: fd.read(65536)), b""):
            sha256.update(data)

    return sha256.hexdigest()


def check_seed(seed: typing.Any, name: str = "seed") -> int:
    """
    Validates a seed is a 64-bit integer, signed or unsigned.

    :param seed: The seed value to check.
    :param name: The config field name used in the error message.
    :return: The seed as an int.
    """
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("%s must be an integer, got %r" % (name, seed))

    if seed < _SEED_MIN or seed > _SEED_MAX:
        raise ConfigError("%s %d does not fit in 64 bits" % (name, seed))

    return seed


def unsigned_seed(seed: int) -> int:
    # numpy only accepts non-negative seed material
    return seed & 0xFFFFFFFFFFFFFFFF


def derive_seed(seed: int, key: str) -> typing.List[int]:
    """
    Derives the seed material for a per-item random stream from a run seed and
    a stable key like an app_id. The result does not depend on the order the
    items are processed in.

    :param seed: The run seed.
    :param key: The item key.
    :return: Seed material for numpy.random.default_rng.
    """
    key_hash = int(sha256_hex(key)[:16], 16)
    return [unsigned_seed(seed), key_hash]


def format_float(value: float) -> str:
    # repr is the shortest string that round trips, stable across runs
    return repr(float(value))


def get_data_file(name: str) -> str:
    """
    Get the contents of a text file stored in pyrepack/data.

    :param name: The filename in pyrepack/data.
    :return: The file contents.
    """
    data = pkgutil.get_data("pyrepack", "data/%s" % name)
    if data is None:  # pragma: no cover
        raise FileNotFoundError("Package data file '%s' is missing" % name)

    return to_unicode(data)
