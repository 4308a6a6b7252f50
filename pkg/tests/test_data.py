"""Synthetic generator and bag-file format tests."""

import numpy as np
import pytest

from mammoth import data as dt
from mammoth.errors import BagParseError, ConfigError
from mammoth.metrics import adjusted_rand_index, kmeans


class TestMakeConcepts:
    def test_two_concepts_one_dim_symmetric(self):
        means = dt.make_concepts(2, 1, sep=6.0, rng=np.random.default_rng(0))
        a = abs(means[0, 0])
        np.testing.assert_allclose(means[0, 0], -means[1, 0], atol=1e-12)
        assert 2 * a >= 6.0 - 1e-9

    def test_min_pairwise_distance(self):
        means = dt.make_concepts(8, 16, sep=5.0, rng=np.random.default_rng(1),
                                 sigma=1.5)
        diff = means[:, None] - means[None, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        min_dist = dist[np.triu_indices(8, 1)].min()
        assert min_dist >= 5.0 * 1.5 - 1e-9

    def test_deterministic(self):
        a = dt.make_concepts(4, 8, 6.0, np.random.default_rng(42))
        b = dt.make_concepts(4, 8, 6.0, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_unsatisfiable_separation(self):
        with pytest.raises(ConfigError):
            dt.make_concepts(8, 1, 6.0, np.random.default_rng(0))


class TestRules:
    def test_parse_roundtrip(self):
        rule = dt.LabelRule.parse("co_occurrence:0,1,0.25")
        assert rule.kind == "co_occurrence" and rule.concepts == (0, 1)
        assert rule.rho == 0.25
        assert dt.LabelRule.parse("majority").kind == "majority"
        assert dt.LabelRule.parse("presence:3,0.5").concepts == (3,)

    def test_parse_rejects_unknown(self):
        with pytest.raises(ConfigError):
            dt.LabelRule.parse("sorcery:1,2")

    def test_presence_rule(self):
        rule = dt.LabelRule.parse("presence:0,0.5")
        assert rule.label(np.array([0, 0, 0, 1, 1]), 2) == 1
        assert rule.label(np.array([0, 1, 1, 1, 1]), 2) == 0

    def test_co_occurrence_needs_both(self):
        rule = dt.LabelRule.parse("co_occurrence:0,1,0.1")
        assert rule.label(np.array([0] * 10), 3) == 0
        assert rule.label(np.array([0] * 5 + [1] * 5), 3) == 1

    def test_majority(self):
        rule = dt.LabelRule.parse("majority")
        assert rule.label(np.array([2, 2, 0]), 3) == 2


class TestSampleBag:
    def _spec(self, **kw):
        base = dict(concepts=4, dim=8, sigma=1.0, sep=6.0, n_range=(20, 30))
        base.update(kw)
        return dt.SynthSpec(**base)

    def test_zero_sigma_gives_exact_means(self):
        spec = self._spec(sigma=0.0, rule="majority")
        means = dt.make_concepts(4, 8, 6.0, np.random.default_rng(2))
        bag = dt.sample_bag(spec, means, np.random.default_rng(3))
        np.testing.assert_allclose(bag.features,
                                   means[bag.concept_assignments].astype(np.float32))

    def test_label_matches_rule(self):
        spec = self._spec(rule="presence:0,0.5")
        means = dt.make_concepts(4, 8, 6.0, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        for desired in (0, 1):
            bag = dt.sample_bag(spec, means, rng, desired_label=desired)
            assert bag.label == desired
            frac = (bag.concept_assignments == 0).mean()
            assert (frac >= 0.5) == bool(desired)

    def test_n_in_range(self):
        spec = self._spec(rule="majority")
        means = dt.make_concepts(4, 8, 6.0, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        for _ in range(10):
            bag = dt.sample_bag(spec, means, rng)
            assert 20 <= bag.features.shape[0] <= 30


class TestBagFiles:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        bag = dt.Bag(rng.standard_normal((7, 5)).astype(np.float32), 3,
                     rng.integers(0, 4, size=7).astype(np.uint16), "b0")
        path = tmp_path / "bag.milb"
        dt.write_bag(bag, path)
        loaded = dt.read_bag(path)
        np.testing.assert_array_equal(loaded.features, bag.features)
        np.testing.assert_array_equal(loaded.concept_assignments,
                                      bag.concept_assignments)
        assert loaded.label == 3

    def test_truncation_names_offset(self, tmp_path):
        rng = np.random.default_rng(9)
        bag = dt.Bag(rng.standard_normal((4, 3)).astype(np.float32), 0,
                     np.zeros(4, dtype=np.uint16), "b1")
        path = tmp_path / "bag.milb"
        dt.write_bag(bag, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(BagParseError, match="byte"):
            dt.read_bag(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bag.milb"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(BagParseError, match="magic"):
            dt.read_bag(path)


class TestDatasetGeneration:
    def test_split_sizes_and_balance(self):
        spec = dt.SynthSpec(train_bags=40, val_bags=10, test_bags=10, seed=0)
        out = dt.generate_dataset(spec, np.random.default_rng(spec.seed))
        splits = out["splits"]
        assert [len(splits[s]) for s in ("train", "val", "test")] == [40, 10, 10]
        labels = [b.label for b in splits["train"]]
        frac = np.mean(labels)
        assert 0.4 <= frac <= 0.6

    def test_deterministic_under_seed(self, tmp_path):
        def gen(where):
            spec = dt.SynthSpec(train_bags=6, val_bags=2, test_bags=2, seed=3)
            out = dt.generate_dataset(spec, np.random.default_rng(spec.seed))
            dt.write_dataset(out, where)
            return sorted((p.name, p.read_bytes()) for p in where.iterdir())

        a = gen(tmp_path / "a")
        b = gen(tmp_path / "b")
        assert a == b

    def test_manifest_roundtrip(self, tmp_path):
        spec = dt.SynthSpec(train_bags=4, val_bags=2, test_bags=2, seed=1)
        out = dt.generate_dataset(spec, np.random.default_rng(spec.seed))
        manifest = dt.write_dataset(out, tmp_path)
        splits = dt.load_manifest(manifest)
        assert len(splits["train"]) == 4
        orig = out["splits"]["train"][0]
        match = [b for b in splits["train"] if b.bag_id == orig.bag_id][0]
        np.testing.assert_array_equal(match.features, orig.features)

    def test_kmeans_recovers_concepts(self):
        # generator sanity oracle: sep=6 concepts are cleanly clusterable
        # (enough bags that every concept has a real point mass)
        spec = dt.SynthSpec(train_bags=30, val_bags=0, test_bags=0, seed=2)
        out = dt.generate_dataset(spec, np.random.default_rng(spec.seed))
        feats = np.vstack([b.features for b in out["splits"]["train"]])
        truth = np.concatenate([b.concept_assignments
                                for b in out["splits"]["train"]])
        assign, _ = kmeans(feats, spec.concepts, rng=np.random.default_rng(11))
        assert adjusted_rand_index(assign, truth) >= 0.95


class TestConflictingBags:
    def test_structure(self):
        bags = dt.make_conflicting_bags(dim=8, bags_per_class=3, n_per_bag=20,
                                        rng=np.random.default_rng(12))
        assert len(bags) == 6
        for bag in bags:
            major = np.bincount(bag.concept_assignments, minlength=2).argmax()
            assert major == bag.label
            assert (bag.concept_assignments == 1 - bag.label).sum() == 4
