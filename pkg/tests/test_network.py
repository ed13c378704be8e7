import numpy as np
import pytest

from xviewsr import network as N
from xviewsr import tensor as T
from xviewsr.exceptions import DimensionError
from xviewsr.tensor import Tensor
from xviewsr.volume import lerp_depth


@pytest.fixture(scope="module")
def cfg():
    return N.NetConfig(base_width=8, fusion_width=4)


@pytest.fixture(scope="module")
def params(cfg):
    return N.init_params(cfg, seed=3, zero_head=False)


def test_init_is_deterministic(cfg):
    a = N.init_params(cfg, seed=11)
    b = N.init_params(cfg, seed=11)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.any(a["head.w"].data) and not np.any(a["fuse.head.w"].data)


def test_parameter_groups(params):
    groups = params.groups()
    assert {g.split(".")[0] for g in groups} == {"enc", "mrnla", "dec", "head", "fuse"}
    fuse = [n for g, names in groups.items() if g.startswith("fuse") for n in names]
    assert set(params.fusion_names()) == set(fuse)
    assert not set(params.fusion_names()) & set(params.reconstruction_names())


class TestEncoder:
    def test_level_shapes(self, params):
        pyr = N.encode(np.random.default_rng(0).normal(size=(16, 16)), params)
        shapes = [tuple(f.shape[1:]) for f in pyr]
        assert shapes == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]

    def test_weight_sharing(self, params, rng):
        img = rng.normal(size=(16, 8))
        pyr = N.encode(np.stack([img, img]), params)
        for f in pyr:
            assert np.array_equal(f.data[0], f.data[1])

    def test_zero_input_is_translation_invariant(self, params):
        f0 = N.encode(np.zeros((24, 24)), params)[0].data[0]
        # interior positions see only zero padding-free windows
        interior = f0[:, 2:-2, 2:-2]
        assert np.allclose(interior, interior[:, :1, :1])

    def test_indivisible_rejected(self, params):
        with pytest.raises(DimensionError):
            N.encode(np.zeros((12, 16)), params)


class TestDecoder:
    def test_reference_free_path_ignores_attention(self, cfg, params, rng):
        slices = rng.uniform(size=(2, 4, 16))
        out_a, rel = N.reconstruct_slices(slices, None, params, cfg, r=5)
        p2 = N.ModelParams({k: Tensor(v.data.copy()) for k, v in params.items()})
        for k in p2:
            if k.startswith("mrnla."):
                p2[k].data = rng.normal(size=p2[k].shape)
        out_b, _ = N.reconstruct_slices(slices, None, p2, cfg, r=5)
        assert np.array_equal(out_a.data, out_b.data)
        assert all(v is None for v in rel.values())

    def test_zero_inputs_are_deterministic(self, cfg, params):
        refs = N.encode_references(np.zeros((2, 16, 16)), params)
        a, _ = N.reconstruct_slices(np.zeros((1, 4, 16)), refs, params, cfg, 5)
        b, _ = N.reconstruct_slices(np.zeros((1, 4, 16)), refs, params, cfg, 5)
        assert np.array_equal(a.data, b.data)
        assert np.all(np.isfinite(a.data))

    def test_output_shape(self, cfg, params, rng):
        # 5 sparse rows at r=5 gives 21 dense rows; width 16 is kept
        out, rel = N.reconstruct_slices(rng.uniform(size=(3, 5, 16)),
                                        N.encode_references(rng.uniform(size=(2, 24, 16)), params),
                                        params, cfg, 5)
        assert out.shape == (3, 21, 16)
        assert rel[0].shape[0] == 2

    def test_query_24x16(self, cfg, params, rng):
        pyr = N.encode(rng.uniform(size=(1, 1, 24, 16)), params)
        out, _ = N.enhance_and_decode(pyr, None, params, cfg)
        assert out.shape == (1, 1, 24, 16)


class TestViewReconstruction:
    def test_zero_head_is_linear_interpolation(self, cfg, rng):
        p = N.init_params(cfg, seed=0)
        v = rng.uniform(size=(4, 16, 16))
        for r in (1, 3):
            out = N.reconstruct_view(v, "coronal", [0, 2], r, p, cfg)
            assert np.array_equal(out, lerp_depth(v, r))

    def test_stack_extract_round_trip(self, cfg, params, rng):
        v = rng.uniform(size=(4, 16, 16))
        vol = N.reconstruct_view(v, "sagittal", [1], 5, params, cfg, chunk=5)
        slices = N.through_plane_slices(vol, "sagittal")
        for i in (0, 7, 15):
            single, _ = N.reconstruct_slices(N.through_plane_slices(v, "sagittal", [i]),
                                             N.encode_references(v[[1]], params), params, cfg, 5)
            np.testing.assert_allclose(slices[i], single.data[0], atol=1e-12)

    def test_views_share_shape(self, cfg, params, rng):
        v = rng.uniform(size=(3, 8, 16))
        cor = N.reconstruct_view(v, "coronal", [0], 5, params, cfg)
        sag = N.reconstruct_view(v, "sagittal", [0], 5, params, cfg)
        assert cor.shape == sag.shape == (11, 8, 16)

    def test_plane_transposes_invert(self, rng):
        v = rng.normal(size=(3, 4, 5))
        for plane in ("coronal", "sagittal"):
            assert np.array_equal(N.slices_to_volume(N.through_plane_slices(v, plane), plane), v)
        with pytest.raises(ValueError):
            N.through_plane_slices(v, "axial")


class TestResidualFusion:
    def test_zero_phi_is_average(self, cfg, rng):
        p = N.init_params(cfg, seed=1)
        a, b = rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8))
        np.testing.assert_array_equal(N.residual_fuse(a, b, p).data, 0.5 * (a + b))

    def test_idempotent_average(self, cfg, rng):
        p = N.init_params(cfg, seed=1)
        v = rng.uniform(size=(3, 8, 8))
        np.testing.assert_array_equal(N.residual_fuse(v, v, p).data, v)

    def test_per_slice_evaluation(self, params, rng):
        a, b = rng.uniform(size=(4, 10, 6)), rng.uniform(size=(4, 10, 6))
        whole = N.residual_fuse(a, b, params).data
        for z in range(4):
            one = N.residual_fuse(a[z:z + 1], b[z:z + 1], params).data[0]
            assert np.array_equal(whole[z], one)

    def test_shallow_variant(self, rng):
        p = N.init_params(N.NetConfig(fusion_depth=0), seed=2, zero_head=False)
        a, b = rng.uniform(size=(2, 5, 5)), rng.uniform(size=(2, 5, 5))
        out = N.residual_fuse(a, b, p).data
        x = np.stack([a, b], axis=1)
        phi = T.conv2d(x, p["fuse.head.w"], p["fuse.head.b"], 1).data[:, 0]
        np.testing.assert_allclose(out, 0.5 * (a + b) + phi, atol=1e-14)

    def test_shape_mismatch(self, params):
        with pytest.raises(DimensionError):
            N.residual_fuse(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)), params)


def test_composite_gradients():
    from xviewsr.verification import run_composite_suite
    bad = [r.line() for r in run_composite_suite(seed=5) if not r.passed]
    assert not bad, bad
