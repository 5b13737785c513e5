import json
import math

import numpy as np
import pytest
import yaml

from pyrepack import __version__
from pyrepack.datagen import (
    TOP_BENIGN_FEATURES,
    Family,
    GenConfig,
    default_profiles,
    generate,
    payload_pool,
    repackage,
    write_provenance,
)
from pyrepack.exceptions import ConfigError
from pyrepack.features import FeatureSchema, Label, load_schema, serialize_dataset

from . import make_schema
from .conftest import data_path


class TestDefaultProfiles(object):
    def test_bundled_schema(self, bundled_schema):
        benign, malware = default_profiles(bundled_schema)

        assert benign.shape == (694,)
        assert malware.shape == (694,)
        assert np.all((benign >= 0.0) & (benign <= 1.0))
        assert np.all((malware >= 0.0) & (malware <= 1.0))

        for name in TOP_BENIGN_FEATURES:
            idx = bundled_schema.index_of(name)
            assert benign[idx] == 0.6
            assert malware[idx] == 0.08

        assert int(np.sum(malware == 0.55)) == 40
        assert int(np.sum(benign == 0.3)) == 60
        assert int(np.sum((benign == 0.2) & (malware == 0.2))) == 80
        assert int(np.sum((benign == 0.01) & (malware == 0.01))) == 694 - 200

    def test_profiles_are_separable(self, bundled_schema):
        benign, malware = default_profiles(bundled_schema)
        assert int(np.sum(np.abs(benign - malware) >= 0.5)) >= 30

        # the malicious block is disjoint from the benign features
        assert not np.any((benign >= 0.5) & (malware >= 0.5))

    def test_deterministic(self, bundled_schema):
        first = default_profiles(bundled_schema)
        second = default_profiles(bundled_schema)
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])

    def test_small_schema(self):
        schema = load_schema(data_path("small_schema.txt"))
        benign, malware = default_profiles(schema)

        assert benign[schema.index_of("Class:java.lang.ClassLoader")] == 0.6
        assert sorted(malware.tolist()) == [0.01, 0.01, 0.08, 0.18, 0.2, 0.55]
        assert sorted(benign.tolist()) == [0.01, 0.01, 0.03, 0.2, 0.3, 0.6]

    def test_depends_on_schema(self):
        first = default_profiles(make_schema(100, category="Intent"))
        second = default_profiles(make_schema(100, category="Class"))
        assert not np.array_equal(first[1], second[1])

    def test_empty_schema(self):
        with pytest.raises(ConfigError) as exc:
            default_profiles(FeatureSchema([]))
        assert str(exc.value) == "Cannot build profiles for an empty schema"

    def test_benign_popcount(self, bundled_schema):
        cfg = GenConfig(schema=bundled_schema, n_benign=10000, seed=11)
        popcounts = generate(cfg).matrix().sum(axis=1)

        expected = float(cfg.benign.sum())
        assert abs(popcounts.mean() - expected) <= 0.1 * expected


class TestGenConfig(object):
    def test_defaults(self, bundled_schema):
        cfg = GenConfig(schema=bundled_schema)
        assert cfg.n_benign == 0
        assert cfg.n_malware == 0
        assert cfg.n_repackaged == 0
        assert cfg.share_fraction == 0.85
        assert cfg.payload_size == 12
        assert cfg.seed == 0

        benign, malware = default_profiles(bundled_schema)
        assert np.array_equal(cfg.benign, benign)
        assert np.array_equal(cfg.malware, malware)
        with pytest.raises(ValueError):
            cfg.benign[0] = 0.5

    def test_custom_profiles(self, small_schema):
        benign = [0.5] * 8
        malware = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
        cfg = GenConfig(schema=small_schema, benign_profile=benign, malware_profile=malware, payload_size=2)
        assert cfg.benign.tolist() == benign
        assert cfg.malware.tolist() == malware

    @pytest.mark.parametrize(
        "kwargs, expected",
        [
            ({"n_benign": -1}, "n_benign must be a non-negative integer, got -1"),
            ({"n_malware": 1.0}, "n_malware must be a non-negative integer, got 1.0"),
            ({"n_repackaged": True}, "n_repackaged must be a non-negative integer, got True"),
            ({"payload_size": 0}, "payload_size must be a positive integer, got 0"),
            ({"share_fraction": 1.5}, "share_fraction must be in [0, 1], got 1.5"),
            ({"share_fraction": "high"}, "share_fraction must be in [0, 1], got 'high'"),
            ({"seed": 2.5}, "seed must be an integer, got 2.5"),
            (
                {"benign_profile": [0.5] * 7},
                "benign_profile must hold one probability per schema feature, expecting 8 got (7,)",
            ),
            ({"malware_profile": [0.5] * 7 + [1.5]}, "malware_profile contains a probability outside of [0, 1]"),
            (
                {"malware_profile": [0.0] * 5 + [0.5] * 3},
                "payload_size 12 exceeds the 3 features with a non-zero malware probability",
            ),
        ],
    )
    def test_invalid(self, small_schema, kwargs, expected):
        with pytest.raises(ConfigError) as exc:
            GenConfig(schema=small_schema, **kwargs)
        assert str(exc.value) == expected

    def test_low_share_warns(self, bundled_schema):
        with pytest.warns(UserWarning, match="share_fraction 0.5 is below 0.8"):
            cfg = GenConfig(schema=bundled_schema, share_fraction=0.5)
        assert cfg.share_fraction == 0.5

    def test_from_yaml(self, bundled_schema):
        with open(data_path("gen_small.yml"), "rb") as fd:
            data = yaml.load(fd, Loader=yaml.SafeLoader)

        cfg = GenConfig.from_dict(data, bundled_schema)
        assert cfg.n_benign == 60
        assert cfg.n_malware == 30
        assert cfg.n_repackaged == 10
        assert cfg.share_fraction == 0.85
        assert cfg.payload_size == 12
        assert cfg.seed == 5

    def test_from_dict_unknown(self, bundled_schema):
        with pytest.raises(ConfigError) as exc:
            GenConfig.from_dict({"n_benign": 1, "schema": "x", "obfuscate": True}, bundled_schema)
        assert str(exc.value) == "Unknown generator config keys: obfuscate, schema"

    def test_to_dict(self, bundled_schema):
        cfg = GenConfig(schema=bundled_schema, n_benign=3, n_malware=2, n_repackaged=1, seed=-4)
        actual = cfg.to_dict()

        assert sorted(actual) == [
            "benign_profile_digest",
            "malware_profile_digest",
            "n_benign",
            "n_malware",
            "n_repackaged",
            "payload_size",
            "schema_fingerprint",
            "seed",
            "share_fraction",
        ]
        assert actual["schema_fingerprint"] == bundled_schema.fingerprint
        assert actual["seed"] == -4
        assert actual["benign_profile_digest"] != actual["malware_profile_digest"]
        assert GenConfig(schema=bundled_schema, n_benign=3, n_malware=2, n_repackaged=1, seed=-4).to_dict() == actual


class TestPayloadPool(object):
    @pytest.mark.parametrize(
        "profile, payload_size, expected",
        [
            ([0.1, 0.5, 0.5, 0.2, 0.0], 2, [1, 2]),
            ([0.1, 0.5, 0.5, 0.2, 0.0], 3, [1, 2, 3]),
            ([0.5, 0.5, 0.5, 0.1], 1, [0, 1, 2]),
            ([0.1, 0.5, 0.5, 0.2, 0.0], 4, [0, 1, 2, 3]),
        ],
    )
    def test_pool(self, profile, payload_size, expected):
        assert payload_pool(np.array(profile), payload_size).tolist() == expected

    @pytest.mark.parametrize("payload_size", [0, 5])
    def test_invalid(self, payload_size):
        with pytest.raises(ConfigError) as exc:
            payload_pool(np.array([0.1, 0.5, 0.5, 0.2, 0.0]), payload_size)
        assert str(exc.value) == (
            "payload_size %d must be between 1 and the 4 features with a non-zero malware probability" % payload_size
        )


class TestRepackage(object):
    @pytest.mark.parametrize("share_fraction", [0.8, 0.85, 1.0])
    def test_shares_template(self, share_fraction):
        rng = np.random.default_rng(3)
        pool = np.arange(90, 100)
        for _ in range(500):
            template = (rng.random(100) < 0.3).astype(np.uint8)
            template[90:] = 0
            bits = repackage(template, share_fraction, pool, 2, rng)

            present = set(np.flatnonzero(template).tolist())
            kept = set(np.flatnonzero(bits[:90]).tolist())
            assert kept <= present
            assert len(kept) == math.ceil(share_fraction * len(present))
            if present:
                assert len(kept) / len(present) >= 0.8
            assert int(bits[90:].sum()) == 2

    def test_full_share_keeps_template(self):
        rng = np.random.default_rng(4)
        template = np.array([1, 0, 1, 1, 0, 0, 0, 0], dtype=np.uint8)
        bits = repackage(template, 1.0, np.array([6, 7]), 1, rng)

        assert np.all(bits[:6] == template[:6])
        assert int(bits[6:].sum()) == 1

    def test_empty_template(self):
        bits = repackage(np.zeros(6, dtype=np.uint8), 0.85, np.array([4, 5]), 2, np.random.default_rng(0))
        assert bits.tolist() == [0, 0, 0, 0, 1, 1]


class TestGenerate(object):
    def test_empty(self, bundled_schema):
        dataset = generate(GenConfig(schema=bundled_schema))
        assert len(dataset) == 0
        assert dataset.schema_fingerprint == bundled_schema.fingerprint
        assert dataset.feature_count == 694

    def test_counts_and_order(self, bundled_schema):
        dataset = generate(GenConfig(schema=bundled_schema, n_benign=4, n_malware=3, n_repackaged=2, seed=1))

        assert [s.app_id for s in dataset] == [
            "benign-00000",
            "benign-00001",
            "benign-00002",
            "benign-00003",
            "malware-00000",
            "malware-00001",
            "malware-00002",
            "repack-00000",
            "repack-00001",
        ]
        assert [s.label for s in dataset] == [Label.BENIGN] * 4 + [Label.MALWARE] * 5
        assert [s.family for s in dataset] == [Family.BENIGN] * 4 + [Family.MALWARE] * 3 + [Family.REPACKAGED] * 2

    def test_repackaged_carry_payload(self, bundled_schema):
        cfg = GenConfig(schema=bundled_schema, n_repackaged=50, seed=2)
        pool = set(payload_pool(cfg.malware, cfg.payload_size).tolist())
        for sample in generate(cfg):
            assert sample.label == Label.MALWARE
            assert len(pool & set(sample.active_indices().tolist())) >= cfg.payload_size

    def test_deterministic(self, bundled_schema):
        cfg = GenConfig(schema=bundled_schema, n_benign=5000, n_malware=1000, n_repackaged=1000, seed=7)
        first = generate(cfg)
        second = generate(cfg)

        assert len(first) == 7000
        assert sum(1 for s in first if s.label == Label.MALWARE) == 2000
        assert serialize_dataset(first) == serialize_dataset(second)

    def test_distinct_seeds(self, bundled_schema):
        first = generate(GenConfig(schema=bundled_schema, n_benign=20, n_malware=5, n_repackaged=5, seed=1))
        second = generate(GenConfig(schema=bundled_schema, n_benign=20, n_malware=5, n_repackaged=5, seed=2))
        assert first != second

    def test_negative_seed(self, bundled_schema):
        dataset = generate(GenConfig(schema=bundled_schema, n_benign=2, seed=-1))
        assert len(dataset) == 2


def test_write_provenance(bundled_schema, tmp_path):
    cfg = GenConfig(schema=bundled_schema, n_benign=3, n_malware=2, n_repackaged=1, seed=9)
    path = tmp_path / "data.provenance.json"
    write_provenance(cfg, str(path))

    text = path.read_text()
    assert text.endswith("}\n")
    actual = json.loads(text)
    assert actual == {
        "config": cfg.to_dict(),
        "generator": "pyrepack.datagen",
        "version": __version__,
    }
    assert list(actual) == ["config", "generator", "version"]
