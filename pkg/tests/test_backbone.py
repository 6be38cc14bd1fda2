import numpy as np
import pytest

from grasp.backbone import (
    BackboneConfig,
    Gru4Rec,
    SasRec,
    build_backbone,
    gru4rec_forward,
    load_backbone_checkpoint,
    sasrec_forward,
    save_backbone_checkpoint,
    score,
)
from helpers import finite_diff, rel_error


def gru(h=4, n_layers=1, seed=0, dropout=0.0, max_seq_len=50):
    return Gru4Rec(
        BackboneConfig(kind="gru4rec", h=h, max_seq_len=max_seq_len,
                       n_layers=n_layers, dropout=dropout),
        seed=seed,
    )


def sas(h=4, n_layers=2, n_heads=1, seed=0, dropout=0.0, max_seq_len=50):
    return SasRec(
        BackboneConfig(kind="sasrec", h=h, max_seq_len=max_seq_len,
                       n_layers=n_layers, n_heads=n_heads, dropout=dropout),
        seed=seed,
    )


class TestGru4Rec:
    def test_zero_inputs_zero_biases_stay_at_fixed_point(self):
        model = gru(h=3)
        out = gru4rec_forward(np.zeros((5, 3)), model)
        np.testing.assert_array_equal(out.per_position, np.zeros((5, 3)))
        np.testing.assert_array_equal(out.final, np.zeros(3))

    def test_single_position(self):
        model = gru(h=4, seed=1)
        out = gru4rec_forward(np.random.default_rng(0).standard_normal((1, 4)), model)
        assert out.per_position.shape == (1, 4)
        np.testing.assert_array_equal(out.per_position[0], out.final)

    def test_empty_sequence_errors(self):
        with pytest.raises(ValueError):
            gru4rec_forward(np.zeros((0, 4)), gru())

    def test_prefix_property(self):
        model = gru(h=4, n_layers=2, seed=2)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 4))
        base = gru4rec_forward(x, model).per_position
        edited = x.copy()
        edited[4:] = rng.standard_normal((2, 4))
        out = gru4rec_forward(edited, model).per_position
        np.testing.assert_array_equal(base[:4], out[:4])
        assert not np.allclose(base[4:], out[4:])

    def test_left_padding_does_not_leak(self):
        model = gru(h=4, seed=4)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        plain = gru4rec_forward(x, model).per_position
        padded = np.zeros((1, 5, 4))
        padded[0, 2:] = x
        mask = np.array([[False, False, True, True, True]])
        out, _ = model.forward(padded, mask)
        np.testing.assert_allclose(out[0, 2:], plain, atol=1e-12)
        np.testing.assert_array_equal(out[0, :2], np.zeros((2, 4)))


class TestSasRec:
    def test_causal_mask(self):
        model = sas(seed=6)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 4))
        base = sasrec_forward(x, model).per_position
        edited = x.copy()
        edited[3] = rng.standard_normal(4)
        out = sasrec_forward(edited, model).per_position
        np.testing.assert_array_equal(base[:3], out[:3])
        assert not np.allclose(base[3:], out[3:])

    def test_singleton_attention_weight_is_one(self):
        model = sas(seed=8)
        x = np.random.default_rng(9).standard_normal((1, 1, 4))
        out, cache = model.forward(x, np.ones((1, 1), dtype=bool))
        layer_caches = cache[5]
        attn_weights = layer_caches[0][5]
        np.testing.assert_array_equal(attn_weights, np.ones((1, 1, 1, 1)))

    def test_position_permutation_changes_outputs(self):
        model = sas(seed=10)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 4))
        swapped = x.copy()
        swapped[[1, 2]] = swapped[[2, 1]]
        a = sasrec_forward(x, model).final
        b = sasrec_forward(swapped, model).final
        assert not np.allclose(a, b)

    def test_too_long_errors(self):
        model = sas(max_seq_len=3)
        with pytest.raises(ValueError):
            sasrec_forward(np.zeros((4, 4)), model)

    def test_left_padding_does_not_leak(self):
        model = sas(seed=12)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 4))
        plain = sasrec_forward(x, model).per_position
        padded = np.zeros((1, 6, 4))
        padded[0, 3:] = x
        mask = np.array([[False] * 3 + [True] * 3])
        out, _ = model.forward(padded, mask)
        np.testing.assert_allclose(out[0, 3:], plain, atol=1e-10)
        np.testing.assert_array_equal(out[0, :3], np.zeros((3, 4)))

    def test_no_nan_on_random_inputs(self):
        for kind_model in (gru(h=8, n_layers=2, seed=14), sas(h=8, n_layers=2, seed=14)):
            rng = np.random.default_rng(15)
            x = rng.standard_normal((2, 7, 8)) * 5.0
            mask = np.ones((2, 7), dtype=bool)
            mask[1, :3] = False
            out, _ = kind_model.forward(x * mask[..., None], mask)
            assert np.isfinite(out).all()
            assert out.shape == (2, 7, 8)

    def test_multi_head_shapes(self):
        model = sas(h=8, n_heads=2, seed=16)
        out = sasrec_forward(np.random.default_rng(17).standard_normal((5, 8)), model)
        assert out.per_position.shape == (5, 8)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            BackboneConfig(kind="sasrec", h=6, n_heads=4)


class TestGradients:
    @pytest.mark.parametrize("make_model", [
        lambda: gru(h=4, n_layers=2, seed=20),
        lambda: sas(h=4, n_layers=2, seed=21, max_seq_len=8),
    ], ids=["gru4rec", "sasrec"])
    def test_param_and_input_gradients(self, make_model):
        model = make_model()
        rng = np.random.default_rng(22)
        B, L, h = 2, 3, 4
        x = rng.standard_normal((B, L, h))
        mask = np.ones((B, L), dtype=bool)
        mask[1, 0] = False
        x = x * mask[..., None]
        upstream = rng.standard_normal((B, L, h)) * mask[..., None]

        def scalar():
            out, _ = model.forward(x, mask)
            return float((out * upstream).sum())

        out, cache = model.forward(x, mask)
        d_x, grads = model.backward(cache, upstream)

        for name, tensor in model.params.items():
            fd = finite_diff(scalar, tensor, step=1e-5)
            assert rel_error(grads[name], fd) < 1e-3, name

        fd_x = finite_diff(scalar, x, step=1e-5)
        # padded slots receive no gradient by construction
        assert rel_error(d_x, fd_x * mask[..., None]) < 1e-3

    def test_dropout_masks_are_cached_consistently(self):
        model = sas(h=4, n_layers=1, seed=23, dropout=0.5)
        rng = np.random.default_rng(24)
        x = rng.standard_normal((2, 4, 4))
        mask = np.ones((2, 4), dtype=bool)
        out, cache = model.forward(x, mask, training=True, rng=np.random.default_rng(0))
        d_x, grads = model.backward(cache, np.ones_like(out))
        assert np.isfinite(d_x).all()
        assert all(np.isfinite(g).all() for g in grads.values())


class TestCausalitySuite:
    @pytest.mark.parametrize("kind", ["gru4rec", "sasrec"])
    def test_randomized_suffix_perturbation(self, kind):
        rng = np.random.default_rng(30)
        for trial in range(25):
            h = int(rng.choice([2, 4]))
            L = int(rng.integers(2, 7))
            cfg = BackboneConfig(kind=kind, h=h, max_seq_len=16,
                                 n_layers=int(rng.integers(1, 3)), dropout=0.0)
            model = build_backbone(cfg, seed=trial)
            x = rng.standard_normal((L, h))
            t = int(rng.integers(1, L))
            edited = x.copy()
            edited[t:] = rng.standard_normal((L - t, h))
            fwd = gru4rec_forward if kind == "gru4rec" else sasrec_forward
            np.testing.assert_array_equal(
                fwd(x, model).per_position[:t], fwd(edited, model).per_position[:t]
            )


class TestScore:
    def test_orthogonal(self):
        assert score([1.0, 0.0], [0.0, 1.0]) == 0.5

    def test_closed_form(self):
        assert score([1.0, 0.0], [3.0, 0.0]) == pytest.approx(0.9525741, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(31)
        o, i = rng.standard_normal(5), rng.standard_normal(5)
        assert score(o, i) == score(i, o)


class TestDeterminismAndCheckpoints:
    @pytest.mark.parametrize("kind", ["gru4rec", "sasrec"])
    def test_seeded_init_is_reproducible(self, kind):
        cfg = BackboneConfig(kind=kind, h=8)
        a = build_backbone(cfg, seed=42)
        b = build_backbone(cfg, seed=42)
        c = build_backbone(cfg, seed=43)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)

    @pytest.mark.parametrize("kind", ["gru4rec", "sasrec"])
    def test_checkpoint_round_trip(self, kind, tmp_path):
        cfg = BackboneConfig(kind=kind, h=4, max_seq_len=12, n_layers=2)
        model = build_backbone(cfg, seed=5)
        path = tmp_path / "bk.gbkb"
        save_backbone_checkpoint(model, path)
        loaded = load_backbone_checkpoint(path)
        assert loaded.cfg.kind == kind
        assert loaded.cfg.h == 4 and loaded.cfg.max_seq_len == 12
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(
                loaded.params[name], tensor.astype(np.float32).astype(np.float64)
            )
