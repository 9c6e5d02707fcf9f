import numpy as np
import pytest

from radialrouter import clustering as cl
from radialrouter.errors import ConfigError, DimensionError, ValidationError


def two_blobs(per_blob=20, d=16, seed=0, separation=12.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((per_blob, d))
    b = rng.standard_normal((per_blob, d)) + separation / np.sqrt(d)
    labels = np.array([0] * per_blob + [1] * per_blob)
    return np.vstack([a, b]), labels


def nearest_centroid_purity(coords, labels):
    purity_hits = 0
    centroids = [coords[labels == k].mean(axis=0) for k in np.unique(labels)]
    for x, lbl in zip(coords, labels):
        d = [np.linalg.norm(x - c) for c in centroids]
        purity_hits += int(np.argmin(d) == lbl)
    return purity_hits / len(labels)


class TestTsne:
    def test_separates_two_blobs(self):
        x, labels = two_blobs()
        coords = cl.tsne_project(x, perplexity=10, iterations=500, seed=0)
        assert coords.shape == (40, 2)
        assert nearest_centroid_purity(coords, labels) == 1.0

    def test_identical_points_stay_finite(self):
        x = np.ones((8, 4))
        coords = cl.tsne_project(x, perplexity=2, iterations=100, seed=1)
        assert np.isfinite(coords).all()

    def test_deterministic_for_fixed_seed(self):
        x, _ = two_blobs(per_blob=10)
        c1 = cl.tsne_project(x, perplexity=5, iterations=120, seed=3)
        c2 = cl.tsne_project(x, perplexity=5, iterations=120, seed=3)
        np.testing.assert_array_equal(c1, c2)

    def test_too_few_points_rejected(self):
        with pytest.raises(DimensionError):
            cl.tsne_project(np.ones((3, 4)))

    def test_perplexity_clamped_with_warning(self):
        x, _ = two_blobs(per_blob=5)
        with pytest.warns(UserWarning, match="clamp"):
            cl.tsne_project(x, perplexity=30, iterations=50, seed=0)

    def test_rotation_invariant_purity(self):
        x, labels = two_blobs(per_blob=15, d=8, seed=4)
        x = x - x.mean(axis=0)
        rng = np.random.default_rng(5)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        rotated = x @ q
        base = cl.tsne_project(x, perplexity=6, iterations=300, seed=6)
        rot = cl.tsne_project(rotated, perplexity=6, iterations=300, seed=6)
        assert nearest_centroid_purity(base, labels) == \
               nearest_centroid_purity(rot, labels)

    def test_pca_prereduction_path(self):
        x, labels = two_blobs(per_blob=12, d=64, seed=7)
        coords = cl.tsne_project(x, perplexity=5, iterations=300, seed=8)
        assert nearest_centroid_purity(coords, labels) == 1.0


class TestKmeans:
    def test_well_separated_pairs(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
        groups = cl.kmeans(pts, 2, seed=0)
        a = {qid for qid, g in groups.assignment.items() if g == groups.group("0")}
        assert a == {"0", "1"}
        assert {"2", "3"} == set(groups.assignment) - a

    def test_n_equals_m_zero_inertia(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        groups = cl.kmeans(pts, 3, seed=1)
        assert groups.metadata["inertia"] == pytest.approx(0.0, abs=1e-12)
        assert len(set(groups.assignment.values())) == 3

    def test_n_greater_than_m_rejected(self):
        with pytest.raises(ConfigError):
            cl.kmeans(np.ones((2, 2)), 3)

    def test_beats_random_assignments(self):
        rng = np.random.default_rng(2)
        pts = np.vstack([rng.standard_normal((15, 2)) + off
                         for off in ([0, 0], [8, 0], [0, 8])])
        groups = cl.kmeans(pts, 3, seed=3)
        inertia = groups.metadata["inertia"]

        def assignment_inertia(labels):
            total = 0.0
            for k in range(3):
                members = pts[labels == k]
                if len(members):
                    total += float(((members - members.mean(axis=0)) ** 2).sum())
            return total

        for _ in range(50):
            labels = rng.integers(0, 3, size=len(pts))
            assert inertia <= assignment_inertia(labels) + 1e-9


class TestGroupsFile:
    def test_roundtrip_identical(self, tmp_path):
        pts = np.random.default_rng(4).standard_normal((10, 2))
        groups = cl.kmeans(pts, 3, seed=5, ids=[f"q{i}" for i in range(10)])
        p = tmp_path / "groups.json"
        groups.save(p)
        loaded = cl.SemanticGroups.load(p)
        assert loaded.assignment == groups.assignment
        assert loaded.n_groups == groups.n_groups
        loaded.save(tmp_path / "groups2.json")
        assert (tmp_path / "groups.json").read_bytes() == \
               (tmp_path / "groups2.json").read_bytes()

    def test_every_query_assigned_once(self):
        pts = np.random.default_rng(6).standard_normal((12, 2))
        ids = [f"q{i}" for i in range(12)]
        groups = cl.kmeans(pts, 4, seed=7, ids=ids)
        assert sorted(groups.assignment) == sorted(ids)
        assert set(groups.assignment.values()) <= set(range(1, 5))


class TestSampling:
    def make_groups(self):
        assignment = {"a0": 1, "a1": 1, "a2": 1, "b0": 2, "b1": 2, "c0": 3}
        return cl.SemanticGroups(assignment=assignment,
                                 centroids=np.zeros((3, 2)), n_groups=3)

    def test_all_same_group_skips(self):
        groups = self.make_groups()
        rng = np.random.default_rng(0)
        assert cl.sample_contrastive_pair(["a0", "a1", "a2"], groups, "a0",
                                          2, rng) is None

    def test_single_partner_always_chosen(self):
        groups = self.make_groups()
        rng = np.random.default_rng(1)
        for _ in range(20):
            pos, negs = cl.sample_contrastive_pair(
                ["a0", "a1", "b0", "c0"], groups, "a0", 2, rng)
            assert pos == "a1"
            assert set(negs) == {"b0", "c0"}

    def test_fewer_negatives_than_h_uses_all(self):
        groups = self.make_groups()
        rng = np.random.default_rng(2)
        pos, negs = cl.sample_contrastive_pair(["a0", "a1", "b0"], groups,
                                               "a0", 4, rng)
        assert negs == ["b0"]

    def test_anchor_must_be_in_batch(self):
        groups = self.make_groups()
        with pytest.raises(ValidationError):
            cl.sample_contrastive_pair(["a0"], groups, "b0", 1,
                                       np.random.default_rng(3))

    def test_negative_frequencies_uniform(self):
        """Chi-square style check: each eligible negative within 3 sigma."""
        groups = self.make_groups()
        batch = ["a0", "a1", "b0", "b1", "c0"]
        rng = np.random.default_rng(4)
        counts = {"b0": 0, "b1": 0, "c0": 0}
        trials = 10_000
        for _ in range(trials):
            _, negs = cl.sample_contrastive_pair(batch, groups, "a0", 2, rng)
            for n in negs:
                counts[n] += 1
        # each draw picks 2 of 3 eligible: expectation 2/3 per negative
        expected = trials * 2 / 3
        sigma = np.sqrt(trials * (2 / 3) * (1 / 3))
        for n, c in counts.items():
            assert abs(c - expected) < 3 * sigma, f"{n}: {c} vs {expected}"


class TestPipeline:
    def test_semantic_groups_purity(self):
        x, labels = two_blobs(per_blob=15, d=16, seed=9)
        ids = [f"q{i}" for i in range(len(labels))]
        groups = cl.semantic_groups(ids, x, n_groups=2, perplexity=6,
                                    iterations=300, seed=10)
        # group labels may be permuted; check split purity
        got = np.array([groups.assignment[q] for q in ids])
        same = (got[:15] == got[0]).all() and (got[15:] == got[15]).all()
        assert same and got[0] != got[15]

    def test_projected_coordinates_emitted(self, tmp_path):
        x, labels = two_blobs(per_blob=8, d=8, seed=11)
        ids = [f"q{i}" for i in range(len(labels))]
        groups = cl.semantic_groups(ids, x, n_groups=2, perplexity=4,
                                    iterations=100, seed=12)
        assert set(groups.coordinates) == set(ids)
        assert all(len(v) == 2 for v in groups.coordinates.values())
        p = tmp_path / "groups.json"
        groups.save(p)
        loaded = cl.SemanticGroups.load(p)
        assert loaded.coordinates == groups.coordinates
