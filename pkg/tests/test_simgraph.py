import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import oracles
from idfree import autodiff as ad
from idfree import gradcheck, simgraph
from idfree.sparse import SparseCSR


def random_graph(rng, n, p=0.5, m=None):
    m = n if m is None else m
    return rng.random((n, m)) * (rng.random((n, m)) < p)


class TestCosineTopk:
    def test_identical_rows(self):
        g = simgraph.cosine_topk(np.array([[1.0, 0.0], [1.0, 0.0]]), 1).csr
        assert_allclose(g.to_dense(), [[0, 1], [1, 0]])

    def test_orthogonal_rows_clamp_to_zero(self):
        g = simgraph.cosine_topk(np.array([[1.0, 0.0], [0.0, 1.0]]), 1).csr
        assert g.nnz == 2
        assert_array_equal(g.vals, [0.0, 0.0])

    def test_eight_rows_against_dense_argsort(self, rng):
        x = rng.standard_normal((8, 3))
        g = simgraph.cosine_topk(x, 3).csr
        dense, mask = oracles.cosine_topk(x, 3)
        assert_allclose(g.to_dense(), dense, atol=1e-6)
        pattern = np.zeros((8, 8), dtype=bool)
        pattern[g.row_ids(), g.col_idx] = True
        assert_array_equal(pattern, mask)

    def test_negative_similarity_clamped(self):
        # with k = n - 1 every other row is kept, including opposite vectors
        g = simgraph.cosine_topk(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 1.0]]), 2).csr
        assert g.vals.min() == 0.0
        assert np.all(g.vals <= 1.0)

    def test_zero_row_has_zero_similarity(self):
        g = simgraph.cosine_topk(np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 1.0]]), 2).csr
        assert not np.isnan(g.vals).any()
        assert_array_equal(g.to_dense()[0], 0)

    def test_no_self_loops_and_row_bound(self, rng):
        g = simgraph.cosine_topk(rng.standard_normal((12, 4)), 5).csr
        assert np.all(g.row_ids() != g.col_idx)
        assert np.all(g.row_nnz() <= 5)

    @pytest.mark.parametrize("block", [1, 2, 3, 7, 100])
    def test_block_size_does_not_matter(self, rng, block):
        x = rng.standard_normal((11, 4))
        ref = simgraph.cosine_topk(x, 4).csr
        got = simgraph.cosine_topk(x, 4, block_size=block).csr
        assert_array_equal(got.col_idx, ref.col_idx)
        # a one-row block goes through a different BLAS kernel: ulp-level drift only
        assert_allclose(got.vals, ref.vals, rtol=0, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        x = rng.standard_normal((9, 3))
        perm = rng.permutation(9)
        g = simgraph.cosine_topk(x, 3).csr.to_dense()
        gp = simgraph.cosine_topk(x[perm], 3).csr.to_dense()
        assert_allclose(gp, g[np.ix_(perm, perm)], atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            simgraph.cosine_topk(np.ones((1, 2)), 1)
        with pytest.raises(ValueError):
            simgraph.cosine_topk(np.ones((3, 2)), 0)


class TestFuse:
    def test_overlap_sum(self):
        a = SparseCSR.from_coo([0], [1], [0.5], (2, 2))
        b = SparseCSR.from_coo([0], [1], [0.3], (2, 2))
        assert_allclose(simgraph.fuse_modal_graphs(a, b).to_dense(), [[0, 0.8], [0, 0]])

    def test_disjoint_union(self):
        a = SparseCSR.from_coo([0], [1], [0.5], (2, 2))
        b = SparseCSR.from_coo([1], [0], [0.3], (2, 2))
        assert_allclose(simgraph.fuse_modal_graphs(a, b).to_dense(), [[0, 0.5], [0.3, 0]])

    def test_random_against_dense(self, rng):
        a, b = random_graph(rng, 6), random_graph(rng, 6)
        out = simgraph.fuse_modal_graphs(SparseCSR.from_dense(a), SparseCSR.from_dense(b))
        assert_allclose(out.to_dense(), a + b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            simgraph.fuse_modal_graphs(SparseCSR.identity(2), SparseCSR.identity(3))


def _gate(rng, d, zero=False):
    if zero:
        return {"W0": np.zeros((d, d)), "W1": np.zeros((d, d)), "b0": np.zeros(d), "b1": np.zeros(d)}
    return {"W0": rng.standard_normal((d, d)), "W1": rng.standard_normal((d, d)),
            "b0": rng.standard_normal(d), "b1": rng.standard_normal(d)}


class TestAdaptiveWeights:
    def test_zero_gate_halves_every_edge(self, rng):
        g = SparseCSR.from_dense(random_graph(rng, 5))
        h = rng.standard_normal((5, 3))
        out = simgraph.adaptive_weights(g, h, h, _gate(rng, 3, zero=True))
        assert_allclose(out.vals.value, 0.5 * g.vals, rtol=1e-6)

    def test_zero_edge_stays_zero(self, rng):
        g = SparseCSR.from_coo([0, 1], [1, 0], [0.0, 1.0], (2, 2))
        h = rng.standard_normal((2, 3))
        out = simgraph.adaptive_weights(g, h, h, _gate(rng, 3))
        assert out.vals.value[0] == 0.0

    @pytest.mark.parametrize("pairing", ["cross", "same"])
    def test_against_per_edge_loop(self, rng, pairing):
        dense = random_graph(rng, 4, 0.6)
        ht, hv = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        gate = _gate(rng, 3)
        with ad.precision(64):
            out = simgraph.adaptive_weights(SparseCSR.from_dense(dense), ht, hv, gate, pairing)
        h_dst = hv if pairing == "cross" else ht
        expect = oracles.adaptive_weights(dense, ht, h_dst, gate["W0"], gate["W1"], gate["b0"], gate["b1"])
        assert_allclose(out.detach().to_dense(), expect, atol=1e-6)

    def test_output_bounded_by_input(self, rng):
        g = SparseCSR.from_dense(random_graph(rng, 6))
        h = 5 * rng.standard_normal((6, 4))
        out = simgraph.adaptive_weights(g, h, h, _gate(rng, 4)).vals.value
        assert np.all(out >= 0) and np.all(out <= g.vals + 1e-7)

    def test_gradient(self):
        res = [r for r in gradcheck.op_checks(0) if r.name == "adaptive_weights"][0]
        assert res.rel_err < 1e-4

    def test_bad_pairing(self, rng):
        with pytest.raises(ValueError):
            simgraph.adaptive_weights(SparseCSR.identity(2), np.ones((2, 2)), np.ones((2, 2)),
                                      _gate(rng, 2), "diagonal")


class TestAssemble:
    def test_smallest_graph(self):
        aug = simgraph.assemble_augmented(SparseCSR.from_dense([[1.0]]), SparseCSR.empty(1, 1),
                                          SparseCSR.empty(1, 1))
        assert_array_equal(aug.A.to_dense(), [[0, 1], [1, 0]])

    def test_empty_similarity_blocks(self, rng):
        r = random_graph(rng, 3, 0.5, 4)
        aug = simgraph.assemble_augmented(SparseCSR.from_dense(r), SparseCSR.empty(3, 3),
                                          SparseCSR.empty(4, 4))
        assert_array_equal(aug.A.to_dense(), oracles.augmented(r, np.zeros((3, 3)), np.zeros((4, 4))))

    def test_random_blocks(self, rng):
        r, ru, ri = random_graph(rng, 3, 0.5, 5), random_graph(rng, 3), random_graph(rng, 5)
        aug = simgraph.assemble_augmented(*(SparseCSR.from_dense(m) for m in (r, ru, ri)))
        assert aug.A.is_canonical()
        assert_array_equal(aug.A.to_dense(), oracles.augmented(r, ru, ri))

    def test_traced_matches_constant(self, rng):
        r, ru, ri = random_graph(rng, 3, 0.5, 4), random_graph(rng, 3), random_graph(rng, 4)
        sr, su, si = (SparseCSR.from_dense(m) for m in (r, ru, ri))
        with ad.precision(64):
            traced = simgraph.assemble_traced(sr, ad.TracedCSR(su, ad.constant(su.vals)), si)
        assert_array_equal(traced.detach().to_dense(), oracles.augmented(r, ru, ri))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            simgraph.assemble_augmented(SparseCSR.empty(2, 3), SparseCSR.empty(2, 2),
                                        SparseCSR.empty(2, 2))


class TestLaplacian:
    def test_unit_degrees(self):
        out = simgraph.laplacian_normalize(SparseCSR.from_dense([[0.0, 1.0], [1.0, 0.0]]))
        assert_allclose(out.to_dense(), [[0, 1], [1, 0]])

    def test_scale_cancels(self):
        out = simgraph.laplacian_normalize(SparseCSR.from_dense([[0.0, 2.0], [2.0, 0.0]]))
        assert_allclose(out.to_dense(), [[0, 1], [1, 0]])

    def test_random_symmetric_against_dense(self, rng):
        a = random_graph(rng, 6)
        a = a + a.T
        a[5] = a[:, 5] = 0         # one isolated node
        out = simgraph.laplacian_normalize(SparseCSR.from_dense(a)).to_dense()
        assert_allclose(out, oracles.laplacian(a), atol=1e-6)
        assert_array_equal(out[5], 0)

    def test_traced_matches_constant(self, rng):
        a = SparseCSR.from_dense(random_graph(rng, 5))
        with ad.precision(64):
            traced = simgraph.laplacian_normalize(ad.TracedCSR(a, ad.constant(a.vals)))
        assert_allclose(traced.detach().vals, simgraph.laplacian_normalize(a).vals, rtol=1e-12)

    def test_spectral_radius(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 50))
            a = random_graph(rng, n, 0.2)
            a = a + a.T
            rho = np.abs(np.linalg.eigvals(simgraph.laplacian_normalize(SparseCSR.from_dense(a)).to_dense())).max()
            assert rho <= 1 + 1e-9

    def test_negative_entry(self):
        with pytest.raises(ValueError, match="nonnegative"):
            simgraph.laplacian_normalize(SparseCSR.from_dense([[0.0, -1.0], [1.0, 0.0]]))


class TestDenoise:
    def _aug(self, rng, nu=4, ni=5):
        r = (rng.random((nu, ni)) < 0.6).astype(float)
        return simgraph.assemble_augmented(SparseCSR.from_dense(r), SparseCSR.from_dense(random_graph(rng, nu)),
                                           SparseCSR.from_dense(random_graph(rng, ni)))

    def test_rho_zero_is_identity(self, rng):
        aug = self._aug(rng)
        out = simgraph.denoise(aug, 0.0, np.random.default_rng(0))
        assert_array_equal(out.A.to_dense(), aug.A.to_dense())

    def test_half_of_ten_edges(self):
        r = SparseCSR.from_dense(np.eye(10))
        aug = simgraph.assemble_augmented(r, SparseCSR.empty(10, 10), SparseCSR.empty(10, 10))
        out = simgraph.denoise(aug, 0.5, np.random.default_rng(0))
        dense = out.A.to_dense()
        assert dense[:10, 10:].sum() == 5
        assert_array_equal(dense, dense.T)

    def test_similarity_blocks_untouched(self, rng):
        aug = self._aug(rng)
        out = simgraph.denoise(aug, 0.7, np.random.default_rng(1)).A.to_dense()
        full = aug.A.to_dense()
        assert_array_equal(out[:4, :4], full[:4, :4])
        assert_array_equal(out[4:, 4:], full[4:, 4:])
        assert_array_equal(out[:4, 4:], out[4:, :4].T)

    def test_deterministic_given_seed(self, rng):
        r = SparseCSR.from_dense((rng.random((6, 6)) < 0.5).astype(float))
        a = simgraph.denoise_interactions(r, 0.8, np.random.default_rng(3))
        b = simgraph.denoise_interactions(r, 0.8, np.random.default_rng(3))
        assert_array_equal(a.to_dense(), b.to_dense())

    def test_keep_count(self):
        assert simgraph.keep_count(10, 0.5) == 5
        assert simgraph.keep_count(2541, 0.8) == 509
        assert simgraph.keep_count(3, 0.9) == 1
        assert simgraph.keep_count(10, 0.0) == 10

    def test_single_draw_frequency_matches_weights(self):
        # keeping one edge per draw makes the inclusion probability exactly
        # proportional to 1/sqrt(d_u d_i)
        r_dense = np.array([[1, 1, 1, 0], [1, 0, 0, 0], [0, 1, 0, 1]], dtype=float)
        r = SparseCSR.from_dense(r_dense)
        rho = 1 - 1 / r.nnz
        du, di = r.row_nnz(), r.col_counts()
        w = 1 / np.sqrt(du[r.row_ids()] * di[r.col_idx])
        p = w / w.sum()
        rng = np.random.default_rng(0)
        n = 10_000
        counts = np.zeros(r.nnz)
        for _ in range(n):
            kept = simgraph.denoise_interactions(r, rho, rng)
            assert kept.nnz == 1
            j = np.flatnonzero((r.row_ids() == kept.row_ids()[0]) & (r.col_idx == kept.col_idx[0]))
            counts[j] += 1
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma)

    def test_bad_rho(self):
        with pytest.raises(ValueError):
            simgraph.denoise_interactions(SparseCSR.identity(2), 1.0, np.random.default_rng(0))


class TestInferenceGraphs:
    def test_delegates_to_cosine_topk(self, rng):
        fu, fi = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
        ru, ri = simgraph.inference_graphs(fu, fi, 3)
        assert_allclose(ru.to_dense(), oracles.cosine_topk(fu, 3)[0], atol=1e-6)
        assert_allclose(ri.to_dense(), oracles.cosine_topk(fi, 3)[0], atol=1e-6)

    def test_two_users_are_mutual_neighbours(self, rng):
        ru, _ = simgraph.inference_graphs(rng.standard_normal((2, 3)), rng.standard_normal((3, 3)), 1)
        assert_array_equal(ru.row_ids(), [0, 1])
        assert_array_equal(ru.col_idx, [1, 0])
