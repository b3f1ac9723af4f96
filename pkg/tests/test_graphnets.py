import numpy as np
import pytest

from meshsplat import meshes as M
from meshsplat import tensor as T
from meshsplat.gradcheck import finite_diff_check
from meshsplat.graphnets import (AnchorGenerator, ChebLayer, GraphUnet, cheb_conv,
                                 decode_appearance, decode_geometry, mesh_features)
from meshsplat.tensor import Tensor


@pytest.fixture(scope="module")
def ico_ops():
    mesh = M.icosphere(0)  # 12 vertices
    return mesh, M.build_operators(mesh)


@pytest.fixture(scope="module")
def unet_setup():
    # radius 12 so zero-init scale cap (10% of diagonal) sits above 1
    mesh = M.icosphere(2, radius=12.0)
    ops = M.build_operators(mesh)
    hier = M.build_hierarchy(mesh, levels=2, factor=3.0)
    return mesh, ops, hier


def test_cheb_k1_identity(ico_ops):
    _, ops = ico_ops
    layer = ChebLayer(1, 3, 3, np.random.default_rng(0))
    layer.theta.data[0] = np.eye(3)
    x = np.random.default_rng(1).normal(size=(12, 3))
    y = cheb_conv(x, ops, layer)
    assert np.allclose(y.data, x)


def test_cheb_linearity(ico_ops):
    _, ops = ico_ops
    rng = np.random.default_rng(2)
    layer = ChebLayer(4, 2, 3, rng)
    x = rng.normal(size=(12, 2))
    w = rng.normal(size=(12, 2))
    with T.no_grad():
        lhs = cheb_conv(2.0 * x + 3.0 * w, ops, layer).data - layer.bias.data
        rhs = (2.0 * (cheb_conv(x, ops, layer).data - layer.bias.data)
               + 3.0 * (cheb_conv(w, ops, layer).data - layer.bias.data))
    assert np.abs(lhs - rhs).max() < 1e-9


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_cheb_matches_dense_spectral_oracle(ico_ops, k):
    """Chebyshev recurrence equals dense eigendecomposition filtering."""
    _, ops = ico_ops
    rng = np.random.default_rng(k)
    f_in, f_out = 3, 2
    layer = ChebLayer(k, f_in, f_out, rng)
    x = rng.normal(size=(12, f_in))

    lam, u = np.linalg.eigh(ops.scaled_laplacian.toarray())
    # polynomial of the scaled spectrum applied per (in,out) filter pair
    t = np.zeros((k, len(lam)))
    t[0] = 1.0
    if k > 1:
        t[1] = lam
    for i in range(2, k):
        t[i] = 2.0 * lam * t[i - 1] - t[i - 2]
    expected = np.zeros((12, f_out))
    for i in range(k):
        filt = u @ np.diag(t[i]) @ u.T
        expected += filt @ x @ layer.theta.data[i]
    expected += layer.bias.data
    got = cheb_conv(x, ops, layer)
    assert np.abs(got.data - expected).max() < 1e-8


def test_cheb_order_cap(ico_ops):
    with pytest.raises(ValueError, match="exceeds"):
        ChebLayer(17, 2, 2, np.random.default_rng(0))


def test_cheb_shape_mismatch(ico_ops):
    _, ops = ico_ops
    layer = ChebLayer(2, 3, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="graph size"):
        cheb_conv(np.zeros((5, 3)), ops, layer)


def test_cheb_gradients(ico_ops):
    _, ops = ico_ops
    rng = np.random.default_rng(5)
    layer = ChebLayer(3, 2, 2, rng)
    x = Tensor(rng.normal(size=(12, 2)), requires_grad=True)
    res = finite_diff_check(
        lambda: T.tsum(cheb_conv(x, ops, layer) ** 2),
        [x, layer.theta, layer.bias], step=1e-6)
    assert res.max_rel_error < 1e-6


# -- U-net ---------------------------------------------------------------------


def test_encode_bottleneck_is_8dim(unet_setup):
    mesh, ops, hier = unet_setup
    unet = GraphUnet(ops, hier, out_width=10, expr_dim=8, seed=0)
    z, _ = unet.encode(mesh_features(mesh))
    assert z.data.shape == (8,)


def test_encode_deterministic_and_translation_sensitive(unet_setup):
    mesh, ops, hier = unet_setup
    unet = GraphUnet(ops, hier, out_width=10, expr_dim=8, seed=0)
    z1, _ = unet.encode(mesh_features(mesh))
    z2, _ = unet.encode(mesh_features(mesh))
    assert np.array_equal(z1.data, z2.data)
    moved = M.TriMesh(mesh.vertices + np.array([0.5, 0.0, 0.0]), mesh.faces)
    z3, _ = unet.encode(mesh_features(moved))
    assert not np.allclose(z1.data, z3.data)


def test_zero_head_produces_rest_pose(unet_setup):
    mesh, ops, hier = unet_setup
    gen = AnchorGenerator(mesh, ops, hier, expr_dim=4, seed=0)
    assert gen.scale_max >= 2.0  # large template keeps exp(0)=1 below the soft cap knee
    cloud, f_g = gen.generate_anchors(mesh, np.zeros(4))
    assert cloud.count == mesh.n_vertices
    assert np.allclose(cloud.centers.data, mesh.vertices)
    assert np.allclose(cloud.scales.data, 1.0)
    assert np.allclose(cloud.rotations.data, [1.0, 0, 0, 0])
    assert np.allclose(cloud.colors.data, 0.5)
    assert np.allclose(cloud.opacities.data, 0.5)
    assert f_g.data.shape == (16,)


def test_anchor_ranges_after_perturbation(unet_setup):
    mesh, ops, hier = unet_setup
    gen = AnchorGenerator(mesh, ops, hier, expr_dim=4, seed=1)
    rng = np.random.default_rng(9)
    for p in gen.parameters():
        p.data += rng.normal(0, 0.2, size=p.data.shape)
    cloud, _ = gen.generate_anchors(mesh, rng.normal(size=4))
    cloud.validate(scale_max=gen.scale_max)
    qn = np.linalg.norm(cloud.rotations.data, axis=1)
    assert np.abs(qn - 1.0).max() < 1e-9


def test_expression_changes_decoder_not_encoder(unet_setup):
    mesh, ops, hier = unet_setup
    gen = AnchorGenerator(mesh, ops, hier, expr_dim=4, seed=2)
    rng = np.random.default_rng(11)
    for p in gen.parameters():
        p.data += rng.normal(0, 0.1, size=p.data.shape)
    feats = mesh_features(mesh)
    z1, _ = gen.geo.encode(feats)
    c1, _ = gen.generate_anchors(mesh, np.zeros(4))
    c2, _ = gen.generate_anchors(mesh, np.full(4, 0.7))
    z2, _ = gen.geo.encode(feats)
    assert np.array_equal(z1.data, z2.data)
    assert not np.allclose(c1.colors.data, c2.colors.data)


def small_unet(out_width, seed):
    # tiny net keeps the per-coordinate FD probes cheap
    mesh = M.icosphere(1, radius=12.0)  # 42 vertices
    ops = M.build_operators(mesh)
    hier = M.build_hierarchy(mesh, levels=2, factor=1.6)
    unet = GraphUnet(ops, hier, out_width=out_width, expr_dim=2, k=2,
                     widths=(3, 5), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in unet.parameters():
        p.data += rng.normal(0, 0.1, size=p.data.shape)
    return mesh, unet, rng


def test_decode_geometry_gradcheck():
    mesh, unet, rng = small_unet(10, 3)
    feats = mesh_features(mesh)
    e = rng.normal(size=2)

    def forward():
        z, skips = unet.encode(feats)
        raw = unet.decode(z, e, skips)
        delta_mu, quat, scales = decode_geometry(raw, 0.5, 4.0)
        return T.tmean(delta_mu) + T.tmean(quat ** 2) + T.tmean(scales)

    params = [unet.enc1.theta, unet.head.theta, unet.bottleneck_b, unet.dec1.bias]
    res = finite_diff_check(forward, params, step=1e-6)
    assert res.max_rel_error < 1e-5, res


def test_decode_appearance_gradcheck():
    mesh, unet, rng = small_unet(4, 5)
    feats = mesh_features(mesh)
    e = rng.normal(size=2)

    def forward():
        z, skips = unet.encode(feats)
        raw = unet.decode(z, e, skips)
        colors, opac = decode_appearance(raw)
        return T.tmean(colors) + T.tmean(opac)

    params = [unet.enc2.theta, unet.head.bias, unet.dec2.bias, unet.enc1.bias]
    res = finite_diff_check(forward, params, step=1e-6)
    assert res.max_rel_error < 1e-5, res


def test_full_unet_gradcheck_42_vertices():
    mesh = M.icosphere(1, radius=12.0)  # 42 vertices
    ops = M.build_operators(mesh)
    hier = M.build_hierarchy(mesh, levels=2, factor=1.6)
    gen = AnchorGenerator(mesh, ops, hier, expr_dim=2, k=2, widths=(3, 5), seed=7)
    rng = np.random.default_rng(8)
    for p in gen.parameters():
        p.data += rng.normal(0, 0.1, size=p.data.shape)
    e = rng.normal(size=2)

    def forward():
        cloud, f_g = gen.generate_anchors(mesh, e)
        return (T.tmean(cloud.centers) + T.tmean(cloud.scales)
                + T.tmean(cloud.colors) + T.tmean(f_g ** 2))

    params = [gen.geo.enc1.theta, gen.geo.head.theta, gen.app.head.theta,
              gen.app.bottleneck_b]
    res = finite_diff_check(forward, params, step=1e-6)
    assert res.max_rel_error < 1e-4, res


def test_skip_connections_flag(unet_setup):
    mesh, ops, hier = unet_setup
    unet = GraphUnet(ops, hier, out_width=10, expr_dim=4, use_skips=True, seed=9)
    z, skips = unet.encode(mesh_features(mesh))
    raw = unet.decode(z, np.zeros(4), skips)
    assert raw.data.shape == (mesh.n_vertices, 10)


def test_ksh_nonzero_rejected(unet_setup):
    mesh, ops, hier = unet_setup
    with pytest.raises(NotImplementedError):
        AnchorGenerator(mesh, ops, hier, expr_dim=4, k_sh=1)
