import numpy as np
import pytest

from bamssl import data as ds
from bamssl.errors import ConfigurationError, InputError


class TestGenerators:
    def test_blob_counts(self):
        d = ds.make_blobs(4, 100, 2, 3.0, seed=0)
        assert d.inputs.shape == (400, 2)
        assert np.bincount(d.labels).tolist() == [100] * 4

    def test_deterministic(self):
        a, b = ds.make_blobs(3, 50, 5, 2.0, seed=7), ds.make_blobs(3, 50, 5, 2.0, seed=7)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        m1, m2 = ds.make_moons(60, 0.1, 3), ds.make_moons(60, 0.1, 3)
        assert m1.inputs.tobytes() == m2.inputs.tobytes()

    def test_separable_limit(self):
        d = ds.make_blobs(4, 200, 2, 1e4, seed=1)
        centres = np.array([d.inputs[d.labels == c].mean(axis=0) for c in range(4)])
        nearest = np.argmin(((d.inputs[:, None] - centres[None]) ** 2).sum(-1), axis=1)
        assert np.array_equal(nearest, d.labels)

    def test_moons_balanced(self):
        d = ds.make_moons(100, 0.05, 0)
        assert np.bincount(d.labels).tolist() == [50, 50]

    @pytest.mark.parametrize("kw", [{"K": 1}, {"n_per_class": 0}, {"d": 1}])
    def test_invalid_sizes(self, kw):
        with pytest.raises(ConfigurationError):
            ds.make_blobs(**{"K": 3, "n_per_class": 5, "d": 2, **kw})


class TestSplit:
    def test_four_labels_per_class(self):
        split = ds.split_ssl(ds.make_blobs(4, 50, seed=0), labels_per_class=4, test_fraction=0.2)
        assert len(split.labeled_y) == 16
        assert np.bincount(split.labeled_y).tolist() == [4] * 4
        assert np.bincount(split.test_y).tolist() == [10] * 4
        assert split.class_counts.tolist() == [36] * 4

    def test_disjoint_and_complete(self):
        split = ds.split_ssl(ds.make_blobs(3, 40, seed=1), labels_per_class=5, test_per_class=10)
        sets = [set(split.labeled_idx), set(split.unlabeled_idx), set(split.test_idx)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert len(sets[0] | sets[1] | sets[2]) == 120

    def test_all_labeled(self):
        split = ds.split_ssl(ds.make_blobs(2, 10, seed=0), labels_per_class=10, test_fraction=0.0)
        assert len(split.unlabeled_y) == 0

    def test_same_seed(self):
        data = ds.make_blobs(3, 30, seed=2)
        a = ds.split_ssl(data, labels_per_class=2, seed=5)
        b = ds.split_ssl(data, labels_per_class=2, seed=5)
        assert np.array_equal(a.labeled_idx, b.labeled_idx)
        assert np.array_equal(a.unlabeled_idx, b.unlabeled_idx)

    def test_label_fraction(self):
        split = ds.split_ssl(ds.make_blobs(2, 50, seed=0), label_fraction=0.1, test_per_class=0)
        assert np.bincount(split.labeled_y).tolist() == [5, 5]

    def test_too_many_labels(self):
        with pytest.raises(ConfigurationError):
            ds.split_ssl(ds.make_blobs(2, 10, seed=0), labels_per_class=11, test_fraction=0.0)


class TestLongTail:
    def test_balanced(self):
        assert ds.long_tail_counts(5, 300, 1.0) == [300] * 5

    def test_tail_class(self):
        assert ds.long_tail_counts(10, 5000, 100)[-1] == 50

    @pytest.mark.parametrize("alpha, total, labeled", [(10, 20431, 2041), (100, 12406, 1236)])
    def test_table_totals(self, alpha, total, labeled):
        counts = ds.long_tail_counts(10, 5000, alpha)
        assert abs(sum(counts) - total) / total <= 0.003
        n_l = sum(ds.labeled_count(n) for n in counts)
        assert abs(n_l - labeled) / labeled <= 0.01

    @pytest.mark.parametrize("alpha", [10, 50, 100])
    def test_ratio(self, alpha):
        c = ds.long_tail_counts(10, 500, alpha)
        assert alpha * 0.98 <= max(c) / min(c) <= alpha * 1.02

    def test_label_rule(self):
        assert ds.labeled_count(3) == 1
        assert ds.labeled_count(50) == 5
        assert ds.labeled_count(0.4) == 1

    def test_curation(self):
        counts = [50, 20, 3]
        data = ds.make_blobs(3, 70, seed=0)
        split = ds.curate_long_tail(data, counts, seed=1, test_per_class=10)
        assert split.class_counts.tolist() == counts
        assert np.bincount(split.labeled_y, minlength=3).tolist() == [5, 2, 1]
        assert np.bincount(split.test_y).tolist() == [10, 10, 10]
        assert not set(split.labeled_idx) & set(split.unlabeled_idx)

    def test_insufficient(self):
        with pytest.raises(ConfigurationError):
            ds.curate_long_tail(ds.make_blobs(2, 10, seed=0), [10, 5], seed=0)

    def test_alpha_below_one(self):
        with pytest.raises(ConfigurationError):
            ds.long_tail_counts(3, 100, 0.5)


class TestAugment:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        assert np.array_equal(ds.augment(x, ds.AugmentPolicy("weak", 0.0), rng), x)

    def test_weak_noise_std(self):
        rng = np.random.default_rng(0)
        x = np.zeros((10_000, 1))
        diff = ds.augment(x, ds.AugmentPolicy("weak", 0.05), rng) - x
        assert abs(diff.std() - 0.05) < 0.05 * 0.03

    def test_full_dropout(self, rng):
        out = ds.augment(rng.normal(size=(4, 3)), ds.AugmentPolicy("strong", 0.2, 0.2, 1.0), rng)
        assert np.all(out == 0)

    def test_shape_preserved(self, rng):
        _, strong = ds.default_policies()
        assert ds.augment(np.ones((7, 2)), strong, rng).shape == (7, 2)

    def test_weak_must_be_weaker(self):
        with pytest.raises(ConfigurationError):
            ds.default_policies(0.3, 0.2)

    def test_reproducible(self):
        _, strong = ds.default_policies()
        x = np.ones((5, 2))
        a = ds.augment(x, strong, np.random.default_rng(4))
        b = ds.augment(x, strong, np.random.default_rng(4))
        assert a.tobytes() == b.tobytes()


class TestCSV:
    def test_hand_parse(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label,b\n1.5,cat,2\n-3,dog,0.25\n4,cat,1e2\n")
        d = ds.load_csv(p)
        assert d.inputs.tolist() == [[1.5, 2.0], [-3.0, 0.25], [4.0, 100.0]]
        assert d.labels.tolist() == [0, 1, 0]
        assert d.class_names == ["cat", "dog"]

    def test_constant_column_normalized(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y,label\n5,1,0\n5,2,1\n5,3,0\n")
        d = ds.load_csv(p, normalize=True)
        assert np.all(d.inputs[:, 0] == 0)
        assert d.inputs[:, 1].mean() == pytest.approx(0.0, abs=1e-15)

    def test_numeric_labels_sort_numerically(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,label\n0,10\n1,9\n2,10\n")
        assert ds.load_csv(p).labels.tolist() == [1, 0, 1]

    def test_missing_label_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n1,2\n")
        with pytest.raises(InputError, match="label"):
            ds.load_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,label\n1,0\n2\n")
        with pytest.raises(InputError, match="row 3"):
            ds.load_csv(p)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,label\n1,0\nabc,1\n")
        with pytest.raises(InputError, match="row 3"):
            ds.load_csv(p)

    def test_split_round_trip(self, tmp_path):
        split = ds.split_ssl(ds.make_blobs(3, 20, seed=0), labels_per_class=2, test_per_class=5)
        p = tmp_path / "s.csv"
        ds.write_split_csv(p, split)
        back = ds.read_split_csv(p)
        for name in ("labeled_x", "labeled_y", "unlabeled_x", "unlabeled_y", "test_x", "test_y"):
            assert np.array_equal(getattr(back, name), getattr(split, name)), name
        assert back.K == 3


def test_support_sampler_balanced(rng):
    labels = np.array([0, 0, 0, 1, 2, 2])
    idx = ds.class_balanced_support(labels, 4, 3, rng)
    assert np.bincount(labels[idx]).tolist() == [4, 4, 4]
