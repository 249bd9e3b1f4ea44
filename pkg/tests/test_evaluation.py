import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_force_retrieval

from crossmodal_reid import cmc, evaluate_protocol, evaluate_retrieval, mean_ap, project_2d, rank_gallery
from crossmodal_reid.evaluation import rank_all
from crossmodal_reid.exceptions import ParameterError, ProtocolError


def random_instance(rng):
    k = int(rng.integers(1, 6))
    d = int(rng.integers(1, 6))
    n_gallery = int(rng.integers(k, 51))
    gallery_ids = np.concatenate([np.arange(k), rng.integers(k, size=n_gallery - k)])
    query_ids = rng.integers(k, size=int(rng.integers(1, 31)))
    # coarse values make exact distance ties common
    gallery = rng.integers(-2, 3, size=(n_gallery, d)).astype(float)
    query = rng.integers(-2, 3, size=(query_ids.size, d)).astype(float)
    if rng.random() < 0.5:
        gallery = gallery + rng.normal(size=gallery.shape)
        query = query + rng.normal(size=query.shape)
    return query, query_ids, gallery, gallery_ids


class TestRanking:
    def test_query_in_gallery_ranks_first(self, rng):
        gallery = rng.normal(size=(10, 4))
        assert rank_gallery(gallery[6], gallery)[0] == 6

    def test_one_dimensional_example(self):
        assert rank_gallery([0.0], [[0.0], [3.0], [1.0]]).tolist() == [0, 2, 1]

    def test_ties_keep_index_order(self):
        assert rank_gallery([0.0], [[1.0], [-1.0], [1.0]]).tolist() == [0, 1, 2]

    def test_empty_gallery(self):
        with pytest.raises(ParameterError):
            rank_gallery([0.0], np.empty((0, 1)))

    @given(st.integers(0, 2**31), st.floats(-100, 100))
    def test_translation_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        # integer-valued points keep distances exact under the shift
        gallery = rng.integers(-5, 6, size=(12, 3)).astype(float)
        query = rng.integers(-5, 6, size=3).astype(float)
        shift = np.round(shift)
        assert np.array_equal(rank_gallery(query, gallery), rank_gallery(query + shift, gallery + shift))

    def test_rank_all_matches_rank_gallery(self, rng):
        q, g = rng.normal(size=(5, 3)), rng.normal(size=(9, 3))
        assert np.array_equal(rank_all(q, g), np.stack([rank_gallery(x, g) for x in q]))


class TestMetrics:
    def test_all_first_rank(self):
        assert cmc([[0, 1]], [7], [7, 8])[0] == 1.0

    def test_enumerated_curve(self):
        curve = cmc([[0, 1, 2], [0, 1, 2]], [0, 1], [0, 2, 1])
        assert curve.tolist() == [0.5, 0.5, 1.0]

    def test_single_relevant_at_rank_one(self):
        assert mean_ap([[0, 1]], [1], [1, 2]) == 1.0

    def test_single_relevant_at_rank_two_of_five(self):
        assert mean_ap([[0, 1, 2, 3, 4]], [1], [0, 1, 2, 3, 4]) == 0.5

    def test_relevant_at_ranks_one_and_three(self):
        assert abs(mean_ap([[0, 1, 2]], [5], [5, 6, 5]) - (1 + 2 / 3) / 2) <= 1e-15

    def test_query_without_match(self):
        with pytest.raises(ProtocolError):
            cmc([[0, 1]], [3], [1, 2])

    def test_against_brute_force_on_200_instances(self):
        for seed in range(200):
            q, qid, g, gid = random_instance(np.random.default_rng(seed))
            curve, m_ap = evaluate_retrieval(q, qid, g, gid)
            ref_curve, ref_map = brute_force_retrieval(q, qid, g, gid)
            assert np.max(np.abs(curve - np.array(ref_curve))) <= 1e-12, seed
            assert abs(m_ap - ref_map) <= 1e-12, seed

    @given(st.integers(0, 2**31))
    def test_curve_is_monotone_and_ends_at_one(self, seed):
        q, qid, g, gid = random_instance(np.random.default_rng(seed))
        curve, _ = evaluate_retrieval(q, qid, g, gid)
        assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
        assert np.all((curve >= 0) & (curve <= 1))

    @given(st.integers(0, 2**31))
    def test_map_is_invariant_to_query_order(self, seed):
        rng = np.random.default_rng(seed)
        q, qid, g, gid = random_instance(rng)
        perm = rng.permutation(len(qid))
        assert evaluate_retrieval(q[perm], qid[perm], g, gid)[1] == pytest.approx(evaluate_retrieval(q, qid, g, gid)[1], abs=1e-15)


class TestProtocol:
    def test_single_trial_on_whole_pool_equals_direct(self, rng):
        q, qid, g, gid = random_instance(rng)
        report = evaluate_protocol(q, qid, g, gid, trials=1, shots=None, rng=0)
        curve, m_ap = evaluate_retrieval(q, qid, g, gid)
        assert report.mAP == m_ap and np.array_equal(report.curve, curve)

    def test_reproducible(self, rng):
        q, qid, g, gid = random_instance(rng)
        a = evaluate_protocol(q, qid, g, gid, trials=10, shots=1, rng=3)
        b = evaluate_protocol(q, qid, g, gid, trials=10, shots=1, rng=3)
        assert a.to_text() == b.to_text()

    def test_separated_clusters_are_perfect(self, rng):
        centres = rng.normal(size=(6, 8)) * 100
        gid = np.repeat(np.arange(6), 4)
        qid = np.repeat(np.arange(6), 3)
        g = centres[gid] + rng.normal(size=(24, 8))
        q = centres[qid] + rng.normal(size=(18, 8))
        report = evaluate_protocol(q, qid, g, gid, trials=10, shots=1, rng=0)
        assert all(row["mAP"] == 1.0 and row["rank1"] == 1.0 for row in report.per_trial)

    def test_report_structure(self, rng):
        q, qid, g, gid = random_instance(rng)
        report = evaluate_protocol(q, qid, g, gid, trials=10, shots=1, rng=1)
        assert report.trials == 10 and len(report.per_trial) == 10
        assert report.mAP == pytest.approx(np.mean([r["mAP"] for r in report.per_trial]), abs=1e-15)
        assert report.std["mAP"] == pytest.approx(np.std([r["mAP"] for r in report.per_trial]), abs=1e-15)
        assert report.cmc[1] <= report.cmc[10] <= report.cmc[20]
        table = report.to_text().split("[trials]\n")[1].splitlines()
        assert len(table) == 1 + 10 + 1 and table[-1].startswith("mean\t")

    def test_single_shot_gallery_has_one_sample_per_identity(self, rng):
        gid = np.repeat(np.arange(5), 3)
        report = evaluate_protocol(rng.normal(size=(5, 2)), np.arange(5), rng.normal(size=(15, 2)), gid,
                                   trials=3, shots=1, rng=0)
        assert len(report.curve) == 5

    def test_draw_larger_than_pool(self, rng):
        with pytest.raises(ProtocolError):
            evaluate_protocol(rng.normal(size=(2, 2)), [0, 1], rng.normal(size=(2, 2)), [0, 1], shots=2)


class TestProjection:
    def test_two_dimensional_input_is_recovered(self, rng):
        X = rng.normal(size=(50, 2)) @ np.array([[3.0, 0.5], [0.5, 1.0]])
        X -= X.mean(0)
        proj = project_2d(X)
        assert np.allclose(proj.points.var(0).sum(), X.var(0).sum(), rtol=1e-12)
        assert np.allclose(np.abs(np.linalg.det(proj.components)), 1.0)
        assert np.allclose(proj.points @ proj.components.T, X, atol=1e-12)

    def test_antipodal_points(self):
        proj = project_2d([[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]])
        assert np.allclose(proj.points[0], -proj.points[1])
        assert np.allclose(proj.points[:, 1], 0.0, atol=1e-12)

    def test_variance_matches_top_eigenvalues(self, rng):
        X = rng.normal(size=(200, 64)) * np.linspace(0.1, 3.0, 64)
        top = np.sort(np.linalg.eigvalsh(np.cov(X.T, bias=True)))[::-1][:2]
        assert abs(project_2d(X).points.var(0).sum() - top.sum()) <= 1e-8

    def test_sign_convention(self, rng):
        proj = project_2d(rng.normal(size=(20, 5)))
        for j in range(2):
            first = proj.components[np.flatnonzero(np.abs(proj.components[:, j]) > 1e-12)[0], j]
            assert first > 0

    def test_zero_variance_is_flagged(self):
        proj = project_2d(np.ones((4, 3)))
        assert proj.degenerate and np.all(proj.points == 0)

    def test_too_few_points(self):
        with pytest.raises(ParameterError):
            project_2d([[1.0, 2.0]])
