import math

import numpy as np

from pyrepack.classifier import Model
from pyrepack.features import FeatureSchema, FeatureVector, LabeledDataset

# Keeps the single hidden unit of a linear model inside the linear part of ReLU
_HIDDEN_OFFSET = 1000.0


def sigmoid(value):
    return 1.0 / (1.0 + math.exp(-value))


def linear_model(fingerprint, weights, bias=0.0):
    """
    Builds a network whose malware probability is sigmoid(x . weights + bias).
    One hidden unit carries x . weights plus a large offset so the ReLU never
    clips it, the malware output adds it back with the bias.
    """
    weights = np.asarray(weights, dtype=np.float64)
    w1 = weights.reshape(-1, 1)
    b1 = np.array([_HIDDEN_OFFSET])
    w2 = np.array([[0.0, 1.0]])
    b2 = np.array([0.0, bias - _HIDDEN_OFFSET])
    return Model(fingerprint, w1, b1, w2, b2)


def make_schema(size, category="Permission"):
    return FeatureSchema.from_names(["%s:FEATURE_%03d" % (category, i) for i in range(size)])


def make_dataset(schema, rows, label=None, family=None):
    """
    Builds a dataset from a list of bit lists, app_ids are app-0, app-1, ...
    label and family apply to every sample unless rows holds
    (bits, label, family) tuples.
    """
    samples = []
    for idx, row in enumerate(rows):
        bits, row_label, row_family = (row if isinstance(row, tuple) else (row, label, family))
        samples.append(FeatureVector("app-%d" % idx, bits, schema.fingerprint, row_label, row_family))
    return LabeledDataset(schema.fingerprint, len(schema), samples)
