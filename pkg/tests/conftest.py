import os

import pytest
import yaml

from pyrepack.features import FeatureSchema, default_schema

from . import linear_model, make_schema

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def data_path(name):
    return os.path.join(DATA_DIR, name)


def load_hand_model(name):
    """
    Loads one of the hand built linear models in data/hand_models.yml.

    :param name: The model key in the yml file.
    :return: A tuple of (schema, model).
    """
    with open(data_path("hand_models.yml"), "rb") as fd:
        meta = yaml.load(fd, Loader=yaml.SafeLoader)

    if name not in meta:
        raise Exception("Hand model '%s' is not defined in hand_models.yml" % name)

    details = meta[name]
    schema = FeatureSchema.from_names(details["features"])
    return schema, linear_model(schema.fingerprint, details["weights"], details["bias"])


@pytest.fixture(scope="session")
def bundled_schema():
    return default_schema()


@pytest.fixture()
def small_schema():
    return make_schema(8)


@pytest.fixture()
def two_feature():
    return load_hand_model("two_feature")


@pytest.fixture()
def six_feature():
    return load_hand_model("six_feature")
