import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossmodal_reid import EncoderConfig, TwoStreamEncoder, encode, gem_pool, load_checkpoint, non_local
from crossmodal_reid.exceptions import DimensionError, DomainError, ParameterError, ParseError
from crossmodal_reid.numerics import Tensor, grad_check


def nl_params(rng, c, k=None, zero_wz=False):
    k = k or max(c // 2, 1)
    P = {name: rng.normal(size=(c, k)) for name in ("theta", "phi", "g")}
    P["wz"] = np.zeros((k, c)) if zero_wz else rng.normal(size=(k, c))
    return P


def small_encoder(seed=0, non_local=True, num_classes=0):
    cfg = EncoderConfig(input_shape=(4, 2, 2), private_widths=(5,), shared_widths=(6, 6), embedding_dim=3,
                        non_local=non_local, num_classes=num_classes, seed=seed)
    return TwoStreamEncoder(cfg)


class TestGemPool:
    def test_average_limit(self):
        assert gem_pool(np.array([[[1.0, 2.0]]]), 1.0).data.tolist() == [1.5]

    def test_p_three(self):
        expected = float(mpmath.cbrt(mpmath.mpf("4.5")))
        assert gem_pool(np.array([[[1.0, 2.0]]]), 3.0).data[0] == pytest.approx(expected, rel=1e-14)

    def test_constant_map(self):
        X = np.stack([np.full((3, 2), c) for c in (0.5, 2.0, 7.0)])
        assert np.allclose(gem_pool(X, 4.2).data, [0.5, 2.0, 7.0], rtol=1e-13)

    @pytest.mark.parametrize("seed", range(10))
    def test_p_one_is_channel_mean(self, seed):
        X = np.random.default_rng(seed).uniform(0, 5, size=(4, 3, 5))
        assert np.max(np.abs(gem_pool(X, 1.0).data - X.mean(axis=(1, 2)))) <= 1e-12

    def test_monotone_in_p(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X = rng.uniform(0, 3, size=(3, 2, 4))
            p1, p2 = sorted(rng.uniform(1, 8, size=2))
            assert np.all(gem_pool(X, p2).data >= gem_pool(X, p1).data - 1e-12)

    def test_p_is_learnable(self, rng):
        X = rng.uniform(0.1, 2.0, size=(3, 2, 2))
        p = Tensor(3.0, requires_grad=True)
        (gem_pool(X, p) * rng.normal(size=3)).sum().backward()
        assert p.grad is not None and abs(float(p.grad)) > 1e-6

    def test_errors(self):
        with pytest.raises(ParameterError):
            gem_pool(np.ones((1, 2, 2)), 0.9)
        with pytest.raises(DomainError):
            gem_pool(-np.ones((1, 2, 2)), 2.0)
        with pytest.raises(DimensionError):
            gem_pool(np.ones((2, 2)), 2.0)


class TestNonLocal:
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_zero_projection_is_bitwise_identity(self, c, h, w, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(c, h, w)) * 10
        out = non_local(X, nl_params(rng, c, zero_wz=True)).data
        assert out.tobytes() == X.tobytes()

    def test_shape(self, rng):
        assert non_local(rng.normal(size=(4, 2, 2)), nl_params(rng, 4)).shape == (4, 2, 2)

    def test_single_position_closed_form(self, rng):
        # one position: the attention weight is exactly 1
        X = rng.normal(size=(4, 1, 1))
        P = nl_params(rng, 4)
        x = X[:, 0, 0]
        expected = x @ P["g"] @ P["wz"] + x
        assert np.allclose(non_local(X, P).data[:, 0, 0], expected, atol=1e-14)

    def test_against_direct_attention(self, rng):
        X = rng.normal(size=(4, 3, 2))
        P = nl_params(rng, 4)
        t = X.reshape(4, -1).T
        s = (t @ P["theta"]) @ (t @ P["phi"]).T
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        expected = (a @ (t @ P["g"]) @ P["wz"] + t).T.reshape(X.shape)
        assert np.allclose(non_local(X, P).data, expected, atol=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            non_local(rng.normal(size=(4, 2, 2)), nl_params(rng, 3))


class TestTwoStreamEncoder:
    def test_deterministic(self, rng):
        enc = small_encoder()
        x = rng.normal(size=(4, 2, 2))
        assert encode(x, "visible", enc).tobytes() == encode(x, "visible", enc).tobytes()

    def test_streams_have_independent_parameters(self, rng):
        enc = small_encoder()
        x = rng.normal(size=(4, 2, 2))
        assert not np.allclose(encode(x, "visible", enc), encode(x, "infrared", enc))
        assert not np.allclose(enc.params["visible.stage0.weight"].data, enc.params["infrared.stage0.weight"].data)

    def test_identical_architecture_and_shared_stage(self):
        enc = small_encoder()
        vis = {k[len("visible."):]: t.shape for k, t in enc.params.items() if k.startswith("visible.")}
        ir = {k[len("infrared."):]: t.shape for k, t in enc.params.items() if k.startswith("infrared.")}
        assert vis == ir
        assert any(k.startswith("shared.") for k in enc.params)

    def test_unknown_modality(self, rng):
        with pytest.raises(ParameterError):
            encode(rng.normal(size=(4, 2, 2)), "ultraviolet", small_encoder())

    def test_wrong_input_shape(self, rng):
        with pytest.raises(DimensionError):
            encode(rng.normal(size=(3, 2, 2)), "visible", small_encoder())

    def test_initialisation_bounds(self):
        enc = small_encoder()
        w = enc.params["shared.stage1.weight"].data
        assert np.all(np.abs(w) <= 1 / np.sqrt(6))
        assert enc.p == 3.0

    def test_batch_permutation_consistency(self, rng):
        enc = small_encoder()
        X = rng.normal(size=(6, 4, 2, 2))
        perm = rng.permutation(6)
        assert np.allclose(enc.embed(X, "infrared")[perm], enc.embed(X[perm], "infrared"), atol=1e-14)

    def test_joint_forward_matches_separate_forwards(self, rng):
        enc = small_encoder()
        Xv, Xi = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(2, 4, 2, 2))
        ev, ei, pv, pi = enc.forward_pair(Xv, Xi, params=enc.frozen())
        assert np.allclose(ev.data, enc.embed(Xv, "visible"), atol=1e-14)
        assert np.allclose(ei.data, enc.embed(Xi, "infrared"), atol=1e-14)
        assert pv.shape == (3, 5) and pi.shape == (2, 5)

    def test_zero_projection_matches_disabled_block(self, rng):
        with_nl = small_encoder(non_local=True)
        with_nl.params["nonlocal.wz"].data[:] = 0.0
        without = small_encoder(non_local=False)
        X = rng.normal(size=(3, 4, 2, 2))
        assert with_nl.embed(X, "visible").tobytes() == without.embed(X, "visible").tobytes()

    @pytest.mark.parametrize("modality", ["visible", "infrared"])
    def test_gradient_of_embedding_sum(self, modality, rng):
        enc = small_encoder(seed=3)
        for t in enc.params.values():
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
        X = rng.normal(size=(2, 4, 2, 2))
        other = "infrared" if modality == "visible" else "visible"
        used = {k: v for k, v in enc.params.items() if not k.startswith(other)}
        report = grad_check(lambda P: enc.forward(X, modality, params=P)[0].sum(), used, tol=1e-4)
        assert report.passed, (report.worst, report.max_rel_error)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        enc = small_encoder(seed=5, num_classes=4)
        enc.params["gem.p"].data = np.array(2.75)
        path = tmp_path / "m.ckpt"
        enc.save(path, meta={"note": "x"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "x"}
        assert loaded.config == enc.config
        for k, t in enc.params.items():
            assert loaded.params[k].data.shape == t.data.shape
            assert loaded.params[k].data.tobytes() == t.data.tobytes()
        X = rng.normal(size=(3, 4, 2, 2))
        assert loaded.embed(X, "infrared").tobytes() == enc.embed(X, "infrared").tobytes()

    def test_file_is_reproducible(self, tmp_path):
        enc = small_encoder()
        enc.save(tmp_path / "a.ckpt")
        enc.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("not a checkpoint")
        with pytest.raises(ParseError):
            load_checkpoint(path)
