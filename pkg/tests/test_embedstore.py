import numpy as np
import pytest

from grasp import embedstore as es
from grasp.errors import FormatError
from helpers import brute_force_topk


class TestMatrixIO:
    def test_binary_round_trip(self, tmp_path):
        m = es.matrix_from_array(np.arange(6, dtype=np.float64).reshape(2, 3))
        path = tmp_path / "m.gemb"
        es.save_embedding_matrix(m, path)
        loaded = es.load_embedding_matrix(path)
        assert loaded.rows == 2 and loaded.dim == 3
        np.testing.assert_array_equal(loaded.values, m.values)
        assert not loaded.normalized

    def test_tsv_identity(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("0\t1.0 0.0\n1\t0.0 1.0\n", encoding="utf-8")
        loaded = es.load_embedding_matrix(path)
        np.testing.assert_array_equal(loaded.values, np.eye(2))

    def test_tsv_inconsistent_width(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("0\t1.0 2.0\n1\t1.0 2.0 3.0\n", encoding="utf-8")
        with pytest.raises(FormatError, match="line 2"):
            es.load_embedding_matrix(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.gemb"
        m = es.matrix_from_array(np.ones((2, 2)))
        es.save_embedding_matrix(m, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        # a corrupted magic falls through to the TSV parser and fails there
        with pytest.raises(FormatError):
            es.load_embedding_matrix(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.gemb"
        es.save_embedding_matrix(es.matrix_from_array(np.ones((2, 2))), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="byte"):
            es.load_embedding_matrix(path)

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "m.gemb"
        es.save_embedding_matrix(es.matrix_from_array(np.ones((1, 2))), path)
        data = bytearray(path.read_bytes())
        data[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="non-finite"):
            es.load_embedding_matrix(path)

    def test_values_are_read_only(self):
        m = es.matrix_from_array(np.ones((2, 2)))
        with pytest.raises(ValueError):
            m.values[0, 0] = 5.0


class TestNormalize:
    def test_three_four_five(self):
        m = es.matrix_from_array(np.array([[3.0, 4.0]]))
        n = es.normalize_rows(m)
        np.testing.assert_allclose(n.values, [[0.6, 0.8]], atol=1e-12)
        assert n.normalized

    def test_unit_row_unchanged(self):
        m = es.matrix_from_array(np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(es.normalize_rows(m).values, m.values, atol=1e-12)

    def test_zero_row_flagged(self):
        m = es.matrix_from_array(np.array([[0.0, 0.0], [1.0, 1.0]]))
        n = es.normalize_rows(m)
        assert n.zero_row_count == 1
        np.testing.assert_array_equal(n.values[0], [0.0, 0.0])


class TestTopK:
    def test_duplicate_beats_orthogonal(self):
        m = es.normalize_rows(es.matrix_from_array(np.array([[1.0, 0], [1.0, 0], [0, 1.0]])))
        assert es.topk_neighbors(m, 0, 1) == [(1, 1.0)]

    def test_only_candidate(self):
        m = es.normalize_rows(es.matrix_from_array(np.array([[1.0, 0], [0, 1.0]])))
        (idx, sim), = es.topk_neighbors(m, 0, 1)
        assert idx == 1 and abs(sim) < 1e-12

    def test_tie_broken_by_ascending_index(self):
        rows = np.array([
            [1.0, 0.0], [0.0, 1.0], [0.5, 0.5],
            [1.0, 0.0],  # duplicate of the query at index 3
            [0.3, 0.9],
            [1.0, 0.0],  # and at index 5
        ])
        m = es.normalize_rows(es.matrix_from_array(rows))
        top2 = es.topk_neighbors(m, 0, 2)
        assert [idx for idx, _ in top2] == [3, 5]
        assert all(abs(sim - 1.0) < 1e-12 for _, sim in top2)

    def test_k_out_of_range(self):
        m = es.normalize_rows(es.matrix_from_array(np.eye(3)))
        with pytest.raises(ValueError):
            es.topk_neighbors(m, 0, 3)

    def test_requires_normalized(self):
        m = es.matrix_from_array(np.eye(3) * 2.0)
        with pytest.raises(ValueError):
            es.topk_neighbors(m, 0, 1)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(123)
        for trial in range(8):
            rows = int(rng.integers(5, 40))
            dim = int(rng.integers(2, 16))
            values = rng.standard_normal((rows, dim))
            m = es.normalize_rows(es.matrix_from_array(values))
            k = int(rng.integers(1, rows))
            for row in range(0, rows, 3):
                got = es.topk_neighbors(m, row, k)
                expected = brute_force_topk(values, row, k)
                assert [i for i, _ in got] == [i for i, _ in expected]
                np.testing.assert_allclose(
                    [s for _, s in got], [s for _, s in expected], atol=1e-6
                )

    def test_self_exclusion_property(self):
        rng = np.random.default_rng(9)
        values = rng.standard_normal((30, 6))
        m = es.normalize_rows(es.matrix_from_array(values))
        for row in range(30):
            assert row not in [i for i, _ in es.topk_neighbors(m, row, 10)]

    def test_permutation_equivariance(self):
        # neighbors of the permuted query map back through the permutation
        # (random data is tie-free, so order is preserved too)
        rng = np.random.default_rng(17)
        values = rng.standard_normal((12, 5))
        m = es.normalize_rows(es.matrix_from_array(values))
        perm = rng.permutation(12)
        mp = es.normalize_rows(es.matrix_from_array(values[perm]))
        inverse = np.argsort(perm)
        for row in range(12):
            base = [i for i, _ in es.topk_neighbors(m, row, 4)]
            permuted = [perm[i] for i, _ in es.topk_neighbors(mp, inverse[row], 4)]
            assert permuted == base

    def test_zero_row_query_gets_smallest_indices(self):
        values = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        m = es.normalize_rows(es.matrix_from_array(values))
        got = [i for i, _ in es.topk_neighbors(m, 0, 2)]
        assert got == [1, 2]


class TestNeighborCache:
    def test_identical_rows_pool_to_themselves(self):
        v = np.array([2.0, -1.0, 0.5])
        m = es.matrix_from_array(np.stack([v, v, v]))
        cache = es.build_neighbor_cache(m, 2)
        for row in range(3):
            np.testing.assert_allclose(cache.pooled_means[row], v, atol=1e-12)

    def test_pool_of_orthogonal_neighbors(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0] / np.sqrt(2)])
        cache = es.build_neighbor_cache(es.matrix_from_array(rows), 2)
        np.testing.assert_allclose(cache.pooled_means[2], [0.5, 0.5], atol=1e-12)

    def test_pooled_mean_matches_definition(self):
        rng = np.random.default_rng(31)
        values = rng.standard_normal((25, 7)) * 3.0
        m = es.matrix_from_array(values)
        cache = es.build_neighbor_cache(m, 4)
        for row in range(25):
            np.testing.assert_allclose(
                cache.pooled_means[row], values[cache.neighbor_ids[row]].mean(axis=0),
                atol=1e-6,
            )
            assert row not in cache.neighbor_ids[row]

    def test_pooling_scales_linearly(self):
        rng = np.random.default_rng(4)
        values = rng.standard_normal((10, 3))
        base = es.build_neighbor_cache(es.matrix_from_array(values), 3)
        scaled = es.build_neighbor_cache(es.matrix_from_array(values * 2.5), 3)
        np.testing.assert_array_equal(base.neighbor_ids, scaled.neighbor_ids)
        np.testing.assert_allclose(scaled.pooled_means, base.pooled_means * 2.5, atol=1e-9)

    def test_block_size_is_output_invisible(self):
        rng = np.random.default_rng(77)
        m = es.matrix_from_array(rng.standard_normal((40, 6)))
        a = es.build_neighbor_cache(m, 5, block=3)
        b = es.build_neighbor_cache(m, 5, block=512)
        np.testing.assert_array_equal(a.neighbor_ids, b.neighbor_ids)
        np.testing.assert_array_equal(a.pooled_means, b.pooled_means)

    def test_cache_file_round_trip_and_determinism(self, tmp_path):
        rng = np.random.default_rng(55)
        m = es.matrix_from_array(rng.standard_normal((20, 4)))
        cache = es.build_neighbor_cache(m, 3)
        p1, p2 = tmp_path / "a.gnbc", tmp_path / "b.gnbc"
        es.save_neighbor_cache(cache, p1)
        es.save_neighbor_cache(es.build_neighbor_cache(m, 3), p2)
        assert p1.read_bytes() == p2.read_bytes()
        loaded = es.load_neighbor_cache(p1)
        assert loaded.k == 3
        np.testing.assert_array_equal(loaded.neighbor_ids, cache.neighbor_ids)
        np.testing.assert_allclose(
            loaded.pooled_means, cache.pooled_means.astype(np.float32), atol=0
        )

    def test_cache_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gnbc"
        path.write_bytes(b"NOPE" + b"\x00" * 30)
        with pytest.raises(FormatError, match="magic"):
            es.load_neighbor_cache(path)

    def test_k_bounds(self):
        m = es.matrix_from_array(np.eye(3))
        with pytest.raises(ValueError):
            es.build_neighbor_cache(m, 3)


class TestSynthCorpus:
    def test_zero_noise_exact_centroids(self):
        _, _, items = es.synth_corpus(20, 12, 4, dim=4, noise=0.0, seed=1)
        eye = np.eye(4)
        for i in range(12):
            np.testing.assert_array_equal(items.values[i], eye[i % 4])

    def test_zero_noise_in_cluster_retrieval(self):
        _, _, items = es.synth_corpus(10, 16, 4, dim=6, noise=0.0, seed=2)
        m = es.normalize_rows(items)
        for row in range(16):
            cluster = row % 4
            for idx, sim in es.topk_neighbors(m, row, 3):  # cluster size 4 -> k=3
                assert idx % 4 == cluster
                assert abs(sim - 1.0) < 1e-12

    def test_seed_determinism(self):
        a = es.synth_corpus(30, 20, 4, dim=8, noise=0.2, seed=9)
        b = es.synth_corpus(30, 20, 4, dim=8, noise=0.2, seed=9)
        assert a[0].sequences == b[0].sequences
        np.testing.assert_array_equal(a[1].values, b[1].values)
        np.testing.assert_array_equal(a[2].values, b[2].values)

    def test_sequence_lengths_clamped(self):
        ds, _, _ = es.synth_corpus(200, 40, 4, dim=8, noise=0.1, seed=3)
        lengths = ds.user_frequency
        assert lengths.min() >= 3 and lengths.max() <= 50

    def test_infeasible_parameters(self):
        with pytest.raises(ValueError):
            es.synth_corpus(10, 4, 8, dim=16, noise=0.0, seed=0)
        with pytest.raises(ValueError):
            es.synth_corpus(10, 20, 8, dim=4, noise=0.0, seed=0)

    def test_log_round_trip(self, tmp_path):
        from grasp.dataset import load_interactions

        ds, _, _ = es.synth_corpus(25, 15, 3, dim=4, noise=0.1, seed=6)
        path = tmp_path / "log.tsv"
        es.write_interaction_log(ds, path)
        loaded = load_interactions(path, min_user_len=1, min_item_freq=1)
        assert loaded.interaction_count == ds.interaction_count
        for u in range(loaded.user_count):
            raw_u = int(loaded.user_raw_ids[u])
            assert [int(loaded.item_raw_ids[i]) for i in loaded.sequences[u]] == ds.sequences[raw_u]
