"""Property suites shared by ``t2lc verify`` and the test-suite.

Each check returns a :class:`CheckResult` whose ``metric`` must not exceed
``threshold``.  A threshold of 0 means bit-for-bit equality.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff, block_jacobi as bj, conv_ops as ops, dist_sim
from .conv_ops import GroupSpec, ProtoCoarseParams, TwoLevelParams

SUITES = ("algebra", "gradients", "distributed")
GRADCHECK_OPS = ("conv2d", "conv1x1", "standard_conv", "group_conv", "coarse_restrict",
                 "coarse_combined_apply", "coarse_proto_apply", "two_level", "two_level_proto")
GRAD_TOL = 1e-5
ALGEBRA_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    metric: float
    threshold: float

    @property
    def passed(self):
        return bool(self.metric <= self.threshold)


def rel_error(a, b):
    """``max|a - b| / max|b|`` (absolute when ``b`` is all zeros)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return float("inf")
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    return diff / scale if scale > 0 else diff


def max_abs_diff(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


# -- algebra ----------------------------------------------------------------------

def jacobi_bridge(n=4, m=4, groups=2, hw=3, d=3, seed=0):
    """Dense group conv vs block-Jacobi part of the dense standard conv with the same diagonal blocks."""
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups, d)
    full = rng.standard_normal((m, n, d, d))
    local = ops.diagonal_blocks(full, spec)
    shape = (n, hw, hw)
    G = bj.materialize(lambda x: ops.group_conv(x, spec, local), shape)
    A = bj.materialize(lambda x: ops.standard_conv(x, full), shape)
    rows = bj.DirectSumDecomposition.uniform(m * hw * hw, groups)
    cols = bj.DirectSumDecomposition.uniform(n * hw * hw, groups)
    return rel_error(G, bj.jacobi_approx(A, rows, cols))


def two_level_dense_oracle(n=4, m=4, groups=2, hw=4, d=3, seed=0):
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups, d)
    params = TwoLevelParams.random(spec, rng)
    M = bj.materialize(lambda x: ops.two_level(x, spec, params), (n, hw, hw))
    x = rng.standard_normal((n, hw, hw))
    return rel_error(ops.two_level(x, spec, params).ravel(), M @ x.ravel())


def subsumption(n=8, m=12, groups=4, hw=5, draws=100, seed=0):
    """Worst relative error of combined-apply(subsume(proto)) vs proto-apply over random draws."""
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups)
    worst = 0.0
    for _ in range(draws):
        proto = ProtoCoarseParams.random(spec, rng)
        x0 = rng.standard_normal((groups, hw, hw))
        got = ops.coarse_combined_apply(x0, ops.subsume_prototype(proto, spec), spec)
        worst = max(worst, rel_error(got, ops.coarse_proto_apply(x0, proto, spec)))
    return worst


def gc_reduces_to_sc(n=8, m=12, hw=5, seed=0):
    rng = np.random.default_rng(seed)
    kernel = rng.standard_normal((m, n, 3, 3))
    x = rng.standard_normal((2, n, hw, hw))
    return max_abs_diff(ops.group_conv(x, GroupSpec(n, m, 1), kernel[None]), ops.standard_conv(x, kernel))


def gc2l_reduces_to_gc(n=8, m=12, groups=4, hw=5, seed=0):
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups)
    params = TwoLevelParams.random(spec, rng).with_zero_coarse()
    x = rng.standard_normal((2, n, hw, hw))
    return max_abs_diff(ops.two_level(x, spec, params), ops.group_conv(x, spec, params.local))


def additivity(n=8, m=12, groups=4, hw=5, seed=0):
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups)
    p = TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((n, hw, hw))
    coarse = ops.coarse_combined_apply(ops.coarse_restrict(x, spec, p.coarse_restrict), p.coarse_mix, spec)
    return max_abs_diff(ops.two_level(x, spec, p), ops.group_conv(x, spec, p.local) + coarse)


def shuffle_roundtrip(channels=12, groups=4, hw=3, seed=0):
    x = np.random.default_rng(seed).standard_normal((channels, hw, hw))
    return max_abs_diff(ops.channel_unshuffle(ops.channel_shuffle(x, groups), groups), x)


def algebra_suite(seed=0, draws=100):
    out = [CheckResult(f"jacobi_bridge[N={N}]", jacobi_bridge(groups=N, seed=seed), ALGEBRA_TOL)
           for N in (1, 2, 4)]
    out.append(CheckResult("two_level_dense_oracle", two_level_dense_oracle(seed=seed), ALGEBRA_TOL))
    out += [CheckResult(f"subsumption[N={N}]", subsumption(groups=N, draws=draws, seed=seed), ALGEBRA_TOL)
            for N in (2, 4)]
    out.append(CheckResult("gc_N1_equals_sc", gc_reduces_to_sc(seed=seed), 0.0))
    out.append(CheckResult("gc2l_zero_coarse_equals_gc", gc2l_reduces_to_gc(seed=seed), 0.0))
    out.append(CheckResult("two_level_additivity", additivity(seed=seed), 0.0))
    out.append(CheckResult("shuffle_roundtrip", shuffle_roundtrip(seed=seed), 0.0))
    return out


# -- gradients --------------------------------------------------------------------

def gradient_suite(seed=0, seeds=3, h=1e-6, op_ids=GRADCHECK_OPS):
    out = []
    for op_id in op_ids:
        worst = 0.0
        for s in range(seed, seed + seeds):
            args, spec = autodiff.sample_args(op_id, s)
            worst = max(worst, autodiff.finite_diff_check(op_id, args, spec, seed=s, h=h))
        out.append(CheckResult(f"gradcheck[{op_id}]", worst, GRAD_TOL))
    return out


# -- distributed ------------------------------------------------------------------

def distributed_case(groups, n=None, m=None, hw=5, batch=2, seed=0):
    """Serial vs simulated-distributed forward/backward for one configuration.

    Returns a dict of metrics: relative errors, message counts and the expected counts.
    """
    n = n or 2 * groups
    m = m or 3 * groups
    rng = np.random.default_rng(seed)
    spec = GroupSpec(n, m, groups)
    params = TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((batch, n, hw, hw))
    g = rng.standard_normal((batch, m, hw, hw))
    y_serial = ops.two_level(x, spec, params)
    dx_serial, gp_serial = autodiff.two_level_vjp(x, spec, params, g)

    cluster = dist_sim.Cluster(spec, params)
    y, fwd = cluster.forward(x)
    dx, gp, bwd = cluster.backward(g)
    y_rev, _ = dist_sim.forward_distributed(spec, params, x, order=list(reversed(range(groups))))
    y_thr, _ = dist_sim.forward_distributed(spec, params, x, threads=True)
    grad_err = max(rel_error(getattr(gp, k), getattr(gp_serial, k))
                   for k in ("local", "coarse_restrict", "coarse_mix"))
    return {
        "forward_rel_error": rel_error(y, y_serial),
        "forward_abs_diff": max_abs_diff(y, y_serial),
        "backward_rel_error": max(rel_error(dx, dx_serial), grad_err),
        "schedule_diff": max(max_abs_diff(y_rev, y), max_abs_diff(y_thr, y)),
        "messages": fwd.messages,
        "scalars_per_sample": fwd.activation_scalars_per_sample,
        "parameter_scalars": fwd.parameter_scalars + bwd.parameter_scalars,
        "backward_messages": bwd.messages,
        "expected_messages": groups * (groups - 1),
        "expected_scalars": groups * (groups - 1) * hw * hw,
    }


def distributed_suite(seed=0, group_list=(2, 4, 8), hw=5):
    out = []
    for N in group_list:
        r = distributed_case(N, hw=hw, seed=seed)
        out += [
            CheckResult(f"forward_equivalence[N={N}]", r["forward_rel_error"], ALGEBRA_TOL),
            CheckResult(f"backward_equivalence[N={N}]", r["backward_rel_error"], ALGEBRA_TOL),
            CheckResult(f"schedule_independence[N={N}]", r["schedule_diff"], 0.0),
            CheckResult(f"message_count_excess[N={N}]",
                        abs(r["messages"] - r["expected_messages"])
                        + abs(r["backward_messages"] - r["expected_messages"]), 0.0),
            CheckResult(f"payload_excess[N={N}]", abs(r["scalars_per_sample"] - r["expected_scalars"]), 0.0),
            CheckResult(f"parameter_scalars[N={N}]", r["parameter_scalars"], 0.0),
        ]
    return out


def run_suite(name, seed=0):
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    if name == "algebra":
        return algebra_suite(seed)
    if name == "gradients":
        return gradient_suite(seed)
    if name == "distributed":
        return distributed_suite(seed)
    raise ValueError(f"unknown suite {name!r}")
