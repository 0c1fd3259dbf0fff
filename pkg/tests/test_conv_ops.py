import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import rel_err
from twolevel_gc import block_jacobi as bj
from twolevel_gc import conv_ops as ops
from twolevel_gc.conv_ops import GroupSpec, ProtoCoarseParams, TwoLevelParams
from twolevel_gc.errors import ConfigurationError
from twolevel_gc.tensor import conv1x1, conv2d


def delta_local(spec):
    local = np.zeros(spec.local_shape())
    c = spec.d // 2
    for k in range(spec.groups):
        for i in range(min(spec.m_local, spec.n_local)):
            local[k, i, i, c, c] = 1.0
    return local


# -- GroupSpec / params -------------------------------------------------------------

def test_group_spec_shapes():
    spec = GroupSpec(8, 12, 4)
    assert spec.d0 == 3
    assert spec.local_shape() == (4, 3, 2, 3, 3)
    assert spec.restrict_shape() == (4, 1, 2, 3, 3)
    assert spec.mix_shape() == (4, 3, 4)


@pytest.mark.parametrize("args", [(6, 8, 4), (8, 6, 4), (4, 4, 0), (4, 4, 2, 2), (4, 4, 2, 3, 4)])
def test_group_spec_rejects(args):
    with pytest.raises(ConfigurationError):
        GroupSpec(*args)


def test_params_validate(rng):
    spec = GroupSpec(4, 4, 2)
    TwoLevelParams.random(spec, rng).validate(spec)
    with pytest.raises(ConfigurationError, match="coarse_mix"):
        TwoLevelParams(np.zeros(spec.local_shape()), np.zeros(spec.restrict_shape()), np.zeros((2, 2, 3))).validate(spec)
    with pytest.raises(ConfigurationError, match="a0"):
        ProtoCoarseParams(np.zeros((3, 3)), np.zeros((2, 2))).validate(spec)


def test_he_init_scales(rng):
    spec = GroupSpec(64, 64, 4)
    p = TwoLevelParams.he_init(spec, rng)
    assert abs(p.local.std() - np.sqrt(2 / (16 * 9))) < 0.01
    assert abs(p.coarse_mix.std() - np.sqrt(2 / 4)) < 0.1
    z = TwoLevelParams.he_init(spec, rng, zero_coarse=True)
    assert not z.coarse_restrict.any() and not z.coarse_mix.any()


# -- standard / group convolution --------------------------------------------------------

def test_standard_conv_basics(rng):
    x = rng.standard_normal((2, 3, 3))
    k = rng.standard_normal((2, 2, 3, 3))
    np.testing.assert_array_equal(ops.standard_conv(x, k), conv2d(x, k))
    np.testing.assert_array_equal(ops.standard_conv(np.zeros_like(x), k), np.zeros((2, 3, 3)))
    A = bj.materialize(lambda v: ops.standard_conv(v, k), x.shape)
    assert rel_err(A @ x.ravel(), ops.standard_conv(x, k).ravel()) < 1e-12


def test_group_conv_single_group_is_standard(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    k = rng.standard_normal((6, 4, 3, 3))
    np.testing.assert_array_equal(ops.group_conv(x, GroupSpec(4, 6, 1), k[None]), ops.standard_conv(x, k))


def test_group_conv_identity():
    spec = GroupSpec(2, 2, 2)
    x = np.random.default_rng(0).standard_normal((2, 4, 4))
    np.testing.assert_array_equal(ops.group_conv(x, spec, delta_local(spec)), x)


def test_group_conv_equals_block_diagonal_standard_conv(rng):
    spec = GroupSpec(4, 4, 2)
    local = rng.standard_normal(spec.local_shape())
    x = rng.standard_normal((4, 5, 5))
    full = ops.assemble_block_kernel(spec, local)
    assert not full[:2, 2:].any() and not full[2:, :2].any()
    assert rel_err(ops.group_conv(x, spec, local), ops.standard_conv(x, full)) < 1e-12
    np.testing.assert_array_equal(ops.diagonal_blocks(full, spec), local)


def test_group_conv_divisibility_error(rng):
    spec = GroupSpec(4, 4, 2)
    with pytest.raises(ConfigurationError):
        ops.group_conv(rng.standard_normal((6, 3, 3)), spec, rng.standard_normal(spec.local_shape()))
    with pytest.raises(ConfigurationError):
        ops.group_conv(rng.standard_normal((4, 3, 3)), spec, rng.standard_normal((2, 2, 2, 1, 1)))


@given(n_g=st.sampled_from([(1, 1), (2, 1), (2, 2), (4, 2), (4, 4), (6, 3), (8, 4), (8, 2)]),
       mult=st.sampled_from([1, 2]), d=st.sampled_from([1, 3]), hw=st.integers(2, 4),
       seed=st.integers(0, 10 ** 6))
def test_one_level_jacobi_bridge(n_g, mult, d, hw, seed):
    n, N = n_g
    m = min(8, n * mult)
    if m % N:
        m = n
    r = np.random.default_rng(seed)
    spec = GroupSpec(n, m, N, d)
    full = r.standard_normal((m, n, d, d))
    local = ops.diagonal_blocks(full, spec)
    G = bj.materialize(lambda x: ops.group_conv(x, spec, local), (n, hw, hw))
    A = bj.materialize(lambda x: ops.standard_conv(x, full), (n, hw, hw))
    M = bj.jacobi_approx(A, bj.DirectSumDecomposition.uniform(m * hw * hw, N),
                         bj.DirectSumDecomposition.uniform(n * hw * hw, N))
    assert rel_err(G, M) <= 1e-12


def test_group_locality(rng):
    spec = GroupSpec(8, 12, 4)
    local = rng.standard_normal(spec.local_shape())
    x = rng.standard_normal((8, 5, 5))
    base = ops.group_conv(x, spec, local)
    for j in range(4):
        xp = x.copy()
        xp[2 * j] += rng.standard_normal((5, 5))
        diff = ops.group_conv(xp, spec, local) - base
        for k in range(4):
            block = diff[3 * k:3 * k + 3]
            if k == j:
                assert np.abs(block).max() > 0
            else:
                assert not block.any()


# -- coarse space ------------------------------------------------------------------

def test_coarse_restrict_zero_and_sum():
    spec = GroupSpec(4, 4, 2, d=3, d0=1)
    x = np.random.default_rng(3).standard_normal((4, 3, 3))
    out = ops.coarse_restrict(x, spec, np.ones(spec.restrict_shape()))
    np.testing.assert_array_equal(out[0], x[0] + x[1])
    np.testing.assert_array_equal(out[1], x[2] + x[3])
    assert not ops.coarse_restrict(np.zeros_like(x), spec, np.ones(spec.restrict_shape())).any()


def test_coarse_restrict_locality(rng):
    spec = GroupSpec(4, 4, 2)
    k = rng.standard_normal(spec.restrict_shape())
    x = rng.standard_normal((4, 4, 4))
    xp = x.copy()
    xp[0] += 1.0
    a, b = ops.coarse_restrict(x, spec, k), ops.coarse_restrict(xp, spec, k)
    np.testing.assert_array_equal(a[1], b[1])
    assert np.abs(a[0] - b[0]).max() > 0


def test_coarse_proto_apply_examples(rng):
    spec = GroupSpec(4, 4, 2)
    x0 = rng.standard_normal((2, 3, 3))
    proto = ProtoCoarseParams(np.eye(2), np.ones((2, 2)))
    out = ops.coarse_proto_apply(x0, proto, spec)
    np.testing.assert_array_equal(out, x0[[0, 0, 1, 1]])
    assert not ops.coarse_proto_apply(x0, ProtoCoarseParams(np.zeros((2, 2)), np.ones((2, 2))), spec).any()


def test_coarse_proto_apply_two_stage_oracle(rng):
    spec = GroupSpec(4, 4, 2)
    proto = ProtoCoarseParams.random(spec, rng)
    x0 = rng.standard_normal((2, 4, 4))
    y0 = conv1x1(x0, proto.a0)
    distribute = np.zeros((4, 2))
    for k in range(2):
        distribute[2 * k:2 * k + 2, k] = proto.distribute[k]
    assert rel_err(ops.coarse_proto_apply(x0, proto, spec), conv1x1(y0, distribute)) < 1e-12


def test_coarse_combined_apply_examples(rng):
    spec = GroupSpec(4, 4, 2)
    x0 = rng.standard_normal((2, 3, 3))
    assert not ops.coarse_combined_apply(x0, np.zeros(spec.mix_shape()), spec).any()
    sel = np.zeros(spec.mix_shape())
    sel[0] = [[1, 0], [0, 1]]
    sel[1] = [[0, 1], [0, 1]]
    np.testing.assert_array_equal(ops.coarse_combined_apply(x0, sel, spec), x0[[0, 1, 1, 1]])
    mix = rng.standard_normal(spec.mix_shape())
    stacked = mix.reshape(4, 2)
    assert rel_err(ops.coarse_combined_apply(x0, mix, spec), conv1x1(x0, stacked)) < 1e-12
    with pytest.raises(ConfigurationError):
        ops.coarse_combined_apply(rng.standard_normal((3, 3, 3)), mix, spec)


def test_subsume_prototype_formula(rng):
    spec = GroupSpec(4, 6, 2)
    S = ops.subsume_prototype(ProtoCoarseParams(np.eye(2), np.ones((2, 3))), spec)
    expected = np.zeros((2, 3, 2))
    expected[0, :, 0] = 1
    expected[1, :, 1] = 1
    np.testing.assert_array_equal(S, expected)
    assert not ops.subsume_prototype(ProtoCoarseParams(np.zeros((2, 2)), np.ones((2, 3))), spec).any()
    proto = ProtoCoarseParams.random(spec, rng)
    S = ops.subsume_prototype(proto, spec)
    for k in range(2):
        np.testing.assert_array_equal(S[k], np.outer(proto.distribute[k], proto.a0[k]))


@pytest.mark.parametrize("N", [2, 4])
def test_subsumption_identity(rng, N):
    spec = GroupSpec(8, 12, N)
    for _ in range(20):
        proto = ProtoCoarseParams.random(spec, rng)
        x0 = rng.standard_normal((N, 5, 5))
        assert rel_err(ops.coarse_combined_apply(x0, ops.subsume_prototype(proto, spec), spec),
                       ops.coarse_proto_apply(x0, proto, spec)) <= 1e-12


def test_subsumption_rank_gap(rng):
    spec = GroupSpec(8, 12, 4)
    S_proto = ops.subsume_prototype(ProtoCoarseParams.random(spec, rng), spec)
    S_rand = rng.standard_normal(spec.mix_shape())
    for k in range(4):
        assert np.linalg.matrix_rank(S_proto[k]) <= 1
        assert np.linalg.matrix_rank(S_rand[k]) == min(spec.m_local, spec.groups)


# -- two-level operators --------------------------------------------------------------

def test_two_level_proto(rng):
    spec = GroupSpec(8, 12, 4)
    local = rng.standard_normal(spec.local_shape())
    restrict = rng.standard_normal(spec.restrict_shape())
    x = rng.standard_normal((8, 5, 5))
    zero = ProtoCoarseParams(np.zeros((4, 4)), rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(ops.two_level_proto(x, spec, local, restrict, zero), ops.group_conv(x, spec, local))
    proto = ProtoCoarseParams.random(spec, rng)
    assert not ops.two_level_proto(np.zeros_like(x), spec, local, restrict, proto).any()
    final = TwoLevelParams(local, restrict, ops.subsume_prototype(proto, spec))
    assert rel_err(ops.two_level_proto(x, spec, local, restrict, proto), ops.two_level(x, spec, final)) <= 1e-12


def test_two_level_reductions(rng):
    spec = GroupSpec(8, 12, 4)
    p = TwoLevelParams.random(spec, rng).with_zero_coarse()
    x = rng.standard_normal((3, 8, 5, 5))
    np.testing.assert_array_equal(ops.two_level(x, spec, p), ops.group_conv(x, spec, p.local))
    spec1 = GroupSpec(4, 6, 1)
    p1 = TwoLevelParams.random(spec1, rng).with_zero_coarse()
    x1 = rng.standard_normal((4, 5, 5))
    np.testing.assert_array_equal(ops.two_level(x1, spec1, p1), ops.standard_conv(x1, p1.local[0]))


def test_two_level_dense_oracle(rng):
    spec = GroupSpec(4, 4, 2)
    p = TwoLevelParams.random(spec, rng)
    A = bj.materialize(lambda v: ops.two_level(v, spec, p), (4, 4, 4))
    for _ in range(3):
        x = rng.standard_normal((4, 4, 4))
        assert rel_err(A @ x.ravel(), ops.two_level(x, spec, p).ravel()) < 1e-12


def test_two_level_additivity_is_exact(rng):
    spec = GroupSpec(8, 12, 4)
    p = TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((2, 8, 5, 5))
    coarse = ops.coarse_combined_apply(ops.coarse_restrict(x, spec, p.coarse_restrict), p.coarse_mix, spec)
    y = ops.two_level(x, spec, p)
    # fixed evaluation order: the sum reproduces the output bit for bit
    np.testing.assert_array_equal(y, ops.group_conv(x, spec, p.local) + coarse)
    # the difference form carries one rounding of the sum
    assert rel_err(y - ops.group_conv(x, spec, p.local), coarse) < 1e-14


def test_two_level_linear_in_params(rng):
    spec = GroupSpec(4, 4, 2)
    p, q = TwoLevelParams.random(spec, rng), TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((4, 4, 4))
    # bilinear coarse path: linear in (local, mix) with the restriction fixed
    s = TwoLevelParams(p.local + q.local, p.coarse_restrict, p.coarse_mix + q.coarse_mix)
    q_same = TwoLevelParams(q.local, p.coarse_restrict, q.coarse_mix)
    assert rel_err(ops.two_level(x, spec, s), ops.two_level(x, spec, p) + ops.two_level(x, spec, q_same)) < 1e-12


def test_two_level_intergroup_coupling(rng):
    spec = GroupSpec(8, 12, 4)
    p = TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((8, 5, 5))
    base = ops.two_level(x, spec, p)
    for c in range(8):
        xp = x.copy()
        xp[c, 2, 2] += 1.0
        diff = ops.two_level(xp, spec, p) - base
        for k in range(4):
            assert np.abs(diff[3 * k:3 * k + 3]).max() > 0


def test_two_level_shape_errors(rng):
    spec = GroupSpec(4, 4, 2)
    p = TwoLevelParams.random(GroupSpec(4, 8, 2), rng)
    with pytest.raises(ConfigurationError):
        ops.two_level(rng.standard_normal((4, 3, 3)), spec, p)


# -- shuffle ------------------------------------------------------------------------

def test_shuffle_examples():
    x = np.arange(4.0)[:, None, None] * np.ones((4, 2, 2))
    np.testing.assert_array_equal(ops.channel_shuffle(x, 2)[:, 0, 0], [0, 2, 1, 3])
    np.testing.assert_array_equal(ops.channel_shuffle(x, 1), x)
    np.testing.assert_array_equal(ops.shuffle_order(6, 3), [0, 2, 4, 1, 3, 5])
    with pytest.raises(ConfigurationError):
        ops.channel_shuffle(x, 3)


@given(c_g=st.sampled_from([(4, 2), (6, 3), (12, 4), (8, 8), (5, 1)]), seed=st.integers(0, 1000))
def test_shuffle_inverse(c_g, seed):
    c, g = c_g
    x = np.random.default_rng(seed).standard_normal((2, c, 2, 2))
    np.testing.assert_array_equal(ops.channel_unshuffle(ops.channel_shuffle(x, g), g), x)
    np.testing.assert_array_equal(ops.channel_shuffle(ops.channel_unshuffle(x, g), g), x)


# -- serialization ------------------------------------------------------------------

def test_params_roundtrip(tmp_path, rng):
    spec = GroupSpec(8, 12, 4, 3, 1)
    p = TwoLevelParams.random(spec, rng)
    ops.save_params(tmp_path, spec, p)
    spec2, p2 = ops.load_params(tmp_path)
    assert spec2 == spec
    for role in ("local", "coarse_restrict", "coarse_mix"):
        np.testing.assert_array_equal(getattr(p2, role), getattr(p, role))
    import json
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["records"]) == 12
    assert {r["role"] for r in manifest["records"]} == {"local", "coarse_restrict", "coarse_mix"}
    assert manifest["records"][0]["shape"] == [3, 2, 3, 3]
