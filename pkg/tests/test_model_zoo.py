import itertools

import pytest

from twolevel_gc.errors import ConfigurationError
from twolevel_gc.model_zoo import (
    Conv,
    Linear,
    Norm,
    build_toy_arch,
    layer_param_count,
    mobilenetv2,
    model_param_count,
    preset,
    wideresnet,
)


def test_layer_count_examples():
    pc = layer_param_count(64, 64, 3, 3, 4, "gc2l")
    assert pc.per_processor == 2304 + 144 + 64 == 2512
    assert pc.total == 4 * 2512
    assert layer_param_count(16, 16, 3, N=1, variant="sc").total == 2304
    gc = layer_param_count(64, 64, 3, 3, 4, "gc")
    assert gc.per_processor == 2304 == pc.per_processor - (144 + 64)
    assert gc.total == 9 * 64 * 64 // 4
    assert layer_param_count(64, 64, 3, 3, 4, "shuffle") == gc


@pytest.mark.parametrize("n,m,N,d,d0", [(n, m, N, d, d0) for n, m, N, d, d0 in itertools.product(
    (8, 16, 48), (8, 24, 64), (1, 2, 4, 8), (1, 3, 5), (1, 3)) if n % N == 0 and m % N == 0])
def test_gc2l_formula_grid(n, m, N, d, d0):
    pc = layer_param_count(n, m, d, d0, N, "gc2l")
    assert pc.per_processor * N * N == d * d * m * n + N * N * (d0 * d0 * n // N + m)
    assert pc.per_processor == d * d * m * n // N ** 2 + d0 * d0 * n // N + m
    assert pc.total == N * pc.per_processor == sum(pc.breakdown.values())
    sc = layer_param_count(n, m, d, d0, N, "sc")
    assert sc.total == d * d * m * n
    assert sc.per_processor == -(-d * d * m * n // N)


def test_layer_count_errors():
    with pytest.raises(ConfigurationError):
        layer_param_count(6, 8, 3, N=4, variant="gc")
    with pytest.raises(ConfigurationError):
        layer_param_count(8, 8, 3, variant="dense")


def test_gc_total_at_one_group_equals_sc():
    for arch in (wideresnet(16, 2), mobilenetv2(), build_toy_arch()):
        assert model_param_count(arch, "gc", 1).total == model_param_count(arch, "sc", 1).total


def test_wideresnet_structure():
    arch = wideresnet(28, 10)
    convs = arch.convs()
    assert len([c for c in convs if c.d == 3]) == 25
    assert len([c for c in convs if c.d == 1]) == 3
    assert convs[-1].out_ch == 640
    assert isinstance(arch.layers[-1], Linear) and arch.layers[-1].out_f == 10
    assert not convs[0].convertible
    with pytest.raises(ConfigurationError):
        wideresnet(27, 10)


def test_wideresnet_sc_total():
    assert model_param_count(wideresnet(28, 10), "sc", 1).total == 36479194
    assert abs(36479194 / 36.48e6 - 1) < 0.005


# table values in millions, per processor
WRN_GC = {2: 18.25, 4: 9.14, 8: 4.58, 16: 2.30}
WRN_GC2L = {2: 18.35, 4: 9.25, 8: 4.74, 16: 2.54}


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_wideresnet_grouped_counts(N):
    arch = wideresnet(28, 10)
    gc = model_param_count(arch, "gc", N).per_processor
    gc2l = model_param_count(arch, "gc2l", N).per_processor
    assert abs(gc / (WRN_GC[N] * 1e6) - 1) < 0.02
    assert abs(gc2l / (WRN_GC2L[N] * 1e6) - 1) < 0.02


@pytest.mark.parametrize("variant", ["gc", "gc2l", "shuffle"])
def test_per_processor_monotone(variant):
    arch = wideresnet(28, 10)
    counts = [model_param_count(arch, variant, N).per_processor for N in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(counts, counts[1:]))
    workers = [model_param_count(arch, variant, N).per_worker for N in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(workers, workers[1:]))


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_gc2l_minus_gc_is_coarse_terms(N):
    arch = wideresnet(28, 10)
    gc = model_param_count(arch, "gc", N)
    gc2l = model_param_count(arch, "gc2l", N)
    extra = sum(c.d ** 2 * c.in_ch // N + c.out_ch for c in arch.convs() if c.convertible)
    assert gc2l.per_processor - gc.per_processor == N * extra
    assert gc2l.per_worker - gc.per_worker == extra
    assert gc2l.by_role["coarse_mix"] == N * sum(c.out_ch for c in arch.convs() if c.convertible)


def test_mobilenetv2_counts():
    arch = mobilenetv2()
    assert model_param_count(arch, "sc", 1).total == 3504872
    assert abs(3504872 / 3.50e6 - 1) < 0.02
    assert all(not c.convertible for c in arch.convs() if c.depthwise)
    assert all(c.convertible for c in arch.convs() if c.d == 1)
    gc = model_param_count(arch, "gc", 2)
    assert gc.by_role["other"] == model_param_count(arch, "sc", 1).by_role["other"]


def test_toy_arch():
    arch = build_toy_arch(3, 16, "gc2l", 4)
    pc = model_param_count(arch)
    rows = {(r.layer, r.role): r for r in pc.rows}
    for i in range(3):
        expect = layer_param_count(16, 16, 3, 3, 4, "gc2l")
        got = sum(rows[(f"layer{i}.conv", role)].per_worker for role in expect.breakdown)
        assert got == expect.per_processor
    sc = model_param_count(build_toy_arch(3, 16, "sc", 1))
    assert sc.by_role["local"] == 3 * 9 * 16 * 16
    gc = model_param_count(build_toy_arch(3, 16, "gc", 4))
    assert pc.total - gc.total == 3 * (9 * 16 // 4 + 16) * 4
    assert pc.total == sum(pc.by_role.values()) == sum(r.total for r in pc.rows)
    with pytest.raises(ConfigurationError):
        build_toy_arch(3, 18, "gc", 4)


def test_divisibility_error_names_layer():
    with pytest.raises(ConfigurationError, match="layer block0.project"):
        model_param_count(mobilenetv2(), "gc", 3)


def test_preset_lookup():
    assert preset("wideresnet-16-4").name == "wideresnet-16-4"
    assert preset("mobilenetv2").name == "mobilenetv2"
    assert preset("toy").name.startswith("toy")
    with pytest.raises(ConfigurationError):
        preset("resnet50")


def test_with_variant_leaves_fixed_layers():
    arch = wideresnet(16, 2).with_variant("gc2l", 4)
    assert arch.convs()[0].variant == "sc"
    assert all(c.variant == "gc2l" for c in arch.convs() if c.convertible)
    with pytest.raises(ConfigurationError):
        arch.with_variant("nope", 2)


def test_norm_counts_two_per_channel():
    arch = build_toy_arch(1, 8)
    norms = [l for l in arch.layers if isinstance(l, Norm)]
    pc = model_param_count(arch)
    assert pc.by_role["BN"] == sum(2 * n.channels for n in norms)
    assert isinstance(arch.layers[0], Conv)
