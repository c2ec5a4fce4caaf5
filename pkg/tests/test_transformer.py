"""Denoiser tests: attention against brute-force token loops, exact trivial
cases, residual wiring, the U-shaped pipeline, and gradient fidelity."""

import numpy as np
import pytest

from cassikit.cassi import HsiCube
from cassikit.errors import ParameterError, ShapeError
from cassikit.hqs import LnltSettings
from cassikit.params import Initializer, ParamStore
from cassikit.tensor import Tensor, fd_gradcheck, mul, reduce_mean
from cassikit.transformer import (GDFN_EXPANSION, LnltConfig, SECTIONS,
                                  _block_weights, _msa_weights,
                                  _register_block, _register_msa,
                                  attention_to_cubes, block_forward, gdfn,
                                  lnlt_denoise, lnlt_weights, local_msa,
                                  nonlocal_msa, qkv_project,
                                  register_lnlt_params, settings_to_config)

from conftest import make_rng


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def msa_fixture(seed, c, heads, tokens, randomize=True):
    """An MSA weight set with non-trivial biases and position offsets."""
    store = ParamStore()
    _register_msa(Initializer(store, seed), "msa", c, heads, tokens)
    if randomize:
        rng = make_rng(seed + 1)
        store["msa.pos"]._assign(rng.normal(size=store["msa.pos"].shape) * 0.2)
        for name in store.names():
            if name.endswith(".b"):
                store[name]._assign(rng.normal(size=store[name].shape) * 0.05)
    return store, _msa_weights(store, "msa")


def msa_arrays(store):
    return {name[len("msa."):]: store[name].copy_array() for name in store.names()}


def np_pointwise(x, w, b):
    return x @ w[0, 0] + b


def np_depthwise3(x, w, b):
    h, wd, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += xp[di:di + h, dj:dj + wd, :] * w[di, dj, 0, :]
    return out + b


def np_qkv(x, arrs, name):
    t = np_pointwise(x, arrs[f"{name}.point.w"], arrs[f"{name}.point.b"])
    return np_depthwise3(t, arrs[f"{name}.depth.w"], arrs[f"{name}.depth.b"])


def np_attend(q, k, v, pos_head, scale):
    """Single-head attention over token rows, softmax per query."""
    out = np.zeros_like(v)
    for t in range(q.shape[0]):
        logits = q[t] @ k.T * scale + pos_head[t]
        e = np.exp(logits - logits.max())
        out[t] = (e / e.sum()) @ v
    return out


def oracle_local(x, arrs, m, heads):
    h, w, c = x.shape
    d = c // heads
    q, k, v = (np_qkv(x, arrs, n) for n in ("q", "k", "v"))
    mixed = np.zeros_like(x)
    for wi in range(0, h, m):
        for wj in range(0, w, m):
            sl = (slice(wi, wi + m), slice(wj, wj + m))
            qw, kw, vw = (t[sl].reshape(m * m, c) for t in (q, k, v))
            ow = np.zeros((m * m, c))
            for head in range(heads):
                cs = slice(head * d, (head + 1) * d)
                ow[:, cs] = np_attend(qw[:, cs], kw[:, cs], vw[:, cs],
                                      arrs["pos"][head], 1.0 / np.sqrt(d))
            mixed[sl] = ow.reshape(m, m, c)
    return np_pointwise(mixed, arrs["proj.w"], arrs["proj.b"]) + x


def oracle_nonlocal(x, arrs, n, heads):
    h, w, c = x.shape
    bh, bw = h // n, w // n
    width = bh * bw * c
    d = width // heads
    q, k, v = (np_qkv(x, arrs, name) for name in ("q", "k", "v"))

    def cells(t):
        return np.stack([t[a * bh:(a + 1) * bh, b * bw:(b + 1) * bw, :].reshape(-1)
                         for a in range(n) for b in range(n)])

    qt, kt, vt = cells(q), cells(k), cells(v)
    out = np.zeros((n * n, width))
    for head in range(heads):
        cs = slice(head * d, (head + 1) * d)
        out[:, cs] = np_attend(qt[:, cs], kt[:, cs], vt[:, cs],
                               arrs["pos"][head], 1.0 / np.sqrt(d))
    mixed = np.zeros_like(x)
    for a in range(n):
        for b in range(n):
            mixed[a * bh:(a + 1) * bh, b * bw:(b + 1) * bw, :] = \
                out[a * n + b].reshape(bh, bw, c)
    return np_pointwise(mixed, arrs["proj.w"], arrs["proj.b"]) + x


def identity_msa(c, heads, tokens):
    """Zero queries and keys, identity value path, identity projection."""
    store = ParamStore()
    _register_msa(Initializer(store, 0), "msa", c, heads, tokens)
    eye = np.eye(c)[None, None]
    delta = np.zeros((3, 3, 1, c))
    delta[1, 1, 0, :] = 1.0
    for name in ("q", "k"):
        store[f"msa.{name}.point.w"]._assign(np.zeros((1, 1, c, c)))
        store[f"msa.{name}.depth.w"]._assign(np.zeros((3, 3, 1, c)))
    store["msa.v.point.w"]._assign(eye.copy())
    store["msa.v.depth.w"]._assign(delta)
    store["msa.proj.w"]._assign(eye.copy())
    return _msa_weights(store, "msa")


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ParameterError):
        LnltConfig(base_channels=0)
    with pytest.raises(ParameterError):
        LnltConfig(heads=(1, 2))
    with pytest.raises(ParameterError):
        LnltConfig(base_channels=6, heads=(4, 2, 1))  # 6 % 4 != 0
    cfg = LnltConfig(base_channels=8)
    assert [cfg.level_channels(i) for i in range(3)] == [8, 16, 32]


def test_settings_mirror_converts():
    settings = LnltSettings(base_channels=16, local_window=4, nonlocal_grid=2)
    cfg = settings_to_config(settings)
    assert cfg.base_channels == 16
    assert cfg.local_window == 4
    assert settings_to_config(cfg) is cfg


def test_position_biases_start_at_zero():
    store = ParamStore()
    cfg = LnltConfig(base_channels=8, local_window=4, nonlocal_grid=2)
    register_lnlt_params(Initializer(store, 3), cfg, n_bands=4)
    pos_names = [n for n in store.names() if n.endswith(".pos")]
    assert len(pos_names) == 2 * len(SECTIONS) * cfg.blocks_per_level
    for name in pos_names:
        np.testing.assert_array_equal(store[name].data, 0.0)


def test_weight_view_checks_band_count():
    store = ParamStore()
    cfg = LnltConfig(base_channels=8, local_window=4, nonlocal_grid=2)
    register_lnlt_params(Initializer(store, 3), cfg, n_bands=4)
    lnlt_weights(store, cfg, n_bands=4)
    with pytest.raises(ShapeError):
        lnlt_weights(store, cfg, n_bands=6)


# ---------------------------------------------------------------------------
# attention against brute force
# ---------------------------------------------------------------------------

def test_qkv_projection_matches_composition():
    rng = make_rng(60)
    store, w = msa_fixture(61, c=4, heads=2, tokens=16)
    x = rng.normal(size=(6, 6, 4))
    got = qkv_project(Tensor(x), w.q).data
    arrs = msa_arrays(store)
    np.testing.assert_allclose(got, np_qkv(x, arrs, "q"), atol=1e-12)


@pytest.mark.parametrize("m,heads", [(4, 1), (4, 2), (8, 4), (8, 1)])
def test_local_attention_matches_loops(m, heads):
    c = 8
    store, w = msa_fixture(62 + m + heads, c=c, heads=heads, tokens=m * m)
    x = make_rng(63 + m).normal(size=(16, 16, c))
    got = local_msa(Tensor(x), w, m, heads).data
    want = oracle_local(x, msa_arrays(store), m, heads)
    assert np.abs(got - want).max() <= 1e-5


@pytest.mark.parametrize("n,heads", [(2, 1), (2, 2), (4, 4), (4, 1)])
def test_nonlocal_attention_matches_loops(n, heads):
    c = 8
    store, w = msa_fixture(64 + n + heads, c=c, heads=heads, tokens=n * n)
    x = make_rng(65 + n).normal(size=(16, 16, c))
    got = nonlocal_msa(Tensor(x), w, n, heads).data
    want = oracle_nonlocal(x, msa_arrays(store), n, heads)
    assert np.abs(got - want).max() <= 1e-5


def test_uniform_local_attention_is_window_mean_plus_input():
    """Zero Q/K and identity V turn each window into its token mean."""
    c, m = 4, 4
    w = identity_msa(c, heads=2, tokens=m * m)
    x = make_rng(66).normal(size=(8, 8, c))
    got = local_msa(Tensor(x), w, m, heads=2).data
    want = np.zeros_like(x)
    for wi in range(0, 8, m):
        for wj in range(0, 8, m):
            sl = (slice(wi, wi + m), slice(wj, wj + m))
            want[sl] = x[sl].reshape(-1, c).mean(axis=0)
    np.testing.assert_allclose(got, want + x, atol=1e-6)


def test_uniform_nonlocal_attention_averages_grid_cells():
    c, n = 4, 2
    w = identity_msa(c, heads=1, tokens=n * n)
    x = make_rng(67).normal(size=(8, 8, c))
    got = nonlocal_msa(Tensor(x), w, n, heads=1).data
    cells = x.reshape(n, 4, n, 4, c).transpose(0, 2, 1, 3, 4)  # [n, n, bh, bw, c]
    mean_cell = cells.reshape(n * n, 4, 4, c).mean(axis=0)
    want = np.tile(mean_cell, (n, n, 1))
    np.testing.assert_allclose(got, want + x, atol=1e-6)


def test_attention_rows_are_distributions():
    store, w = msa_fixture(68, c=8, heads=2, tokens=16)
    x = make_rng(69).normal(size=(8, 8, 8))
    _, attn_l = local_msa(Tensor(x), w, 4, 2, return_attn=True)
    assert attn_l.shape == (4, 2, 16, 16)  # [windows, heads, M^2, M^2]
    np.testing.assert_allclose(attn_l.sum(axis=-1), 1.0, atol=1e-12)
    assert attn_l.min() >= 0.0

    store_nl, w_nl = msa_fixture(70, c=8, heads=2, tokens=4)
    _, attn_nl = nonlocal_msa(Tensor(x), w_nl, 2, 2, return_attn=True)
    assert attn_nl.shape == (2, 4, 4)  # [heads, N^2, N^2]
    np.testing.assert_allclose(attn_nl.sum(axis=-1), 1.0, atol=1e-12)


def test_nonlocal_token_count_is_size_independent():
    """Doubling the image size must not grow the attention matrices."""
    n, heads, c = 2, 2, 4
    shapes = []
    for hw in (8, 16):
        store, w = msa_fixture(71, c=c, heads=heads, tokens=n * n)
        x = make_rng(72).normal(size=(hw, hw, c))
        _, attn = nonlocal_msa(Tensor(x), w, n, heads, return_attn=True)
        shapes.append(attn.shape)
    assert shapes[0] == shapes[1] == (heads, n * n, n * n)


def test_attention_divisibility_checks():
    store, w = msa_fixture(73, c=4, heads=2, tokens=16)
    with pytest.raises(ShapeError):
        local_msa(Tensor(np.ones((6, 6, 4))), w, 4, 2)
    with pytest.raises(ShapeError):
        nonlocal_msa(Tensor(np.ones((6, 6, 4))), w, 4, 2)
    with pytest.raises(ShapeError):
        local_msa(Tensor(np.ones((8, 8, 4))), w, 4, 3)  # channels % heads


# ---------------------------------------------------------------------------
# feed-forward and block wiring
# ---------------------------------------------------------------------------

def gdfn_fixture(seed, c):
    store = ParamStore()
    init = Initializer(store, seed)
    e = GDFN_EXPANSION * c
    init.conv("g.b1.point", 1, 1, c, e)
    init.conv("g.b1.depth", 3, 3, 1, e)
    init.conv("g.b2.point", 1, 1, c, e)
    init.conv("g.b2.depth", 3, 3, 1, e)
    init.conv("g.proj", 1, 1, e, c)
    from cassikit.transformer import GdfnWeights
    return store, GdfnWeights(
        b1_point_w=store["g.b1.point.w"], b1_point_b=store["g.b1.point.b"],
        b1_depth_w=store["g.b1.depth.w"], b1_depth_b=store["g.b1.depth.b"],
        b2_point_w=store["g.b2.point.w"], b2_point_b=store["g.b2.point.b"],
        b2_depth_w=store["g.b2.depth.w"], b2_depth_b=store["g.b2.depth.b"],
        proj_w=store["g.proj.w"], proj_b=store["g.proj.b"])


def test_gdfn_matches_manual_composition():
    store, w = gdfn_fixture(74, c=4)
    rng = make_rng(75)
    for name in store.names():
        if name.endswith(".b"):
            store[name]._assign(rng.normal(size=store[name].shape) * 0.05)
    x = rng.normal(size=(6, 6, 4))
    got = gdfn(Tensor(x), w).data

    def branch(prefix):
        t = np_pointwise(x, store[f"g.{prefix}.point.w"].data, store[f"g.{prefix}.point.b"].data)
        return np_depthwise3(t, store[f"g.{prefix}.depth.w"].data, store[f"g.{prefix}.depth.b"].data)

    b1, b2 = branch("b1"), branch("b2")
    act = 0.5 * b1 * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (b1 + 0.044715 * b1 ** 3)))
    want = np_pointwise(act * b2, store["g.proj.w"].data, store["g.proj.b"].data) + x
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gdfn_expansion_width():
    store, w = gdfn_fixture(76, c=8)
    assert w.b1_point_w.shape == (1, 1, 8, 16)
    assert w.proj_w.shape == (1, 1, 16, 8)


def test_zeroed_block_passes_normalized_input_through():
    """With every conv kernel at zero each sub-module reduces to x + 0."""
    cfg = LnltConfig(base_channels=4, heads=(2, 2, 2), local_window=4, nonlocal_grid=2)
    store = ParamStore()
    _register_block(Initializer(store, 77), "blk", 4, 2, cfg)
    for name in store.names():
        if name.endswith(".w"):
            store[name]._assign(np.zeros(store[name].shape))
    w = _block_weights(store, "blk")
    x = make_rng(78).normal(size=(8, 8, 4))
    got = block_forward(Tensor(x), w, cfg, heads=2).data

    def ln(a):
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5)

    # both attention modules and the feed-forward collapse to zero residuals,
    # leaving exactly the three stacked normalizations
    np.testing.assert_allclose(got, ln(ln(ln(x))), atol=1e-12)


def test_block_gradients_match_finite_differences():
    cfg = LnltConfig(base_channels=8, heads=(2, 2, 4), local_window=4, nonlocal_grid=2)
    store = ParamStore()
    _register_block(Initializer(store, 79), "blk", 8, 2, cfg)
    w = _block_weights(store, "blk")
    x = Tensor(make_rng(80).normal(size=(8, 8, 8)) * 0.5)
    probe = Tensor(make_rng(81).normal(size=(8, 8, 8)))

    def f(params):
        return reduce_mean(mul(block_forward(x, w, cfg, heads=2), probe))

    report = fd_gradcheck(f, store, n_samples=60, seed=82)
    assert report.passed, f"max rel err {report.max_rel_err:.3e}"
    assert len(report.rows) >= 50


# ---------------------------------------------------------------------------
# full denoiser
# ---------------------------------------------------------------------------

def denoiser_fixture(n_bands=4, seed=83):
    settings = LnltSettings(base_channels=8, local_window=4, nonlocal_grid=4)
    store = ParamStore()
    register_lnlt_params(Initializer(store, seed), settings_to_config(settings), n_bands)
    return settings, store, lnlt_weights(store, settings, n_bands)


def test_denoiser_preserves_shape_and_is_finite():
    settings, store, weights = denoiser_fixture()
    x = HsiCube(Tensor(make_rng(84).random((16, 16, 4)) * 2.0))
    out = lnlt_denoise(x, 0.7, weights, settings)
    assert out.shape == (16, 16, 4)
    assert np.isfinite(out.numpy()).all()


def test_denoiser_output_is_input_plus_residual():
    """Zeroing the final conv forces the residual, and so the change, to zero."""
    settings, store, weights = denoiser_fixture()
    store["lnlt.out.w"]._assign(np.zeros(store["lnlt.out.w"].shape))
    store["lnlt.out.b"]._assign(np.zeros(store["lnlt.out.b"].shape))
    x = HsiCube(Tensor(make_rng(85).random((16, 16, 4))))
    out = lnlt_denoise(x, 0.7, weights, settings)
    np.testing.assert_array_equal(out.numpy(), x.numpy())


def test_denoiser_conditions_on_eta():
    settings, store, weights = denoiser_fixture()
    x = HsiCube(Tensor(make_rng(86).random((16, 16, 4))))
    out_lo = lnlt_denoise(x, 0.1, weights, settings).numpy()
    out_hi = lnlt_denoise(x, 5.0, weights, settings).numpy()
    assert not np.array_equal(out_lo, out_hi)
    out_scalar = lnlt_denoise(x, Tensor(np.array(0.1)), weights, settings).numpy()
    np.testing.assert_array_equal(out_lo, out_scalar)


def test_denoiser_divisibility_and_eta_shape_checks():
    settings, store, weights = denoiser_fixture()
    with pytest.raises(ShapeError):
        lnlt_denoise(HsiCube(Tensor(np.ones((12, 16, 4)))), 1.0, weights, settings)
    with pytest.raises(ShapeError):
        lnlt_denoise(HsiCube(Tensor(np.ones((16, 16, 4)))), np.ones(2), weights, settings)


def test_denoiser_collects_attention_for_every_section():
    settings, store, weights = denoiser_fixture()
    x = HsiCube(Tensor(make_rng(87).random((16, 16, 4))))
    out, maps = lnlt_denoise(x, 0.7, weights, settings, collect_attention=True)
    tags = sorted(maps)
    assert tags == sorted(f"{s}.0.{kind}" for s in SECTIONS for kind in ("local", "nonlocal"))
    m2 = settings.local_window ** 2
    n2 = settings.nonlocal_grid ** 2
    for tag, arr in maps.items():
        if tag.endswith(".local"):
            assert arr.ndim == 4 and arr.shape[2:] == (m2, m2)
        else:
            assert arr.shape[1:] == (n2, n2)
        np.testing.assert_allclose(arr.sum(axis=-1), 1.0, atol=1e-12)
    cubes = attention_to_cubes(maps)
    for tag, cube in cubes.items():
        assert cube.ndim == 3 and cube.shape[0] == cube.shape[1]


def test_denoiser_gradients_match_finite_differences():
    settings, store, weights = denoiser_fixture()
    x = HsiCube(Tensor(make_rng(88).random((16, 16, 4))))
    probe = Tensor(make_rng(89).normal(size=(16, 16, 4)))

    def f(params):
        out = lnlt_denoise(x, 0.7, weights, settings)
        return reduce_mean(mul(out.data, probe))

    report = fd_gradcheck(f, store, n_samples=20, seed=90)
    assert report.passed, f"max rel err {report.max_rel_err:.3e}"
