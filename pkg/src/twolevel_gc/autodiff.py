"""Vector-Jacobian products for every operator, and a finite-difference checker.

Every operator here is linear in its input and in each parameter block, so the
input gradient is the transposed operator applied to the upstream tensor and a
kernel gradient is a correlation of the (padded) input with the upstream.

Ops are addressed by name through :data:`OPS`.  Each op takes a dict of
arrays (``"x"`` plus named parameters) and an optional :class:`GroupSpec`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import conv_ops as ops
from .conv_ops import GroupSpec, ProtoCoarseParams, TwoLevelParams
from .errors import ConfigurationError
from .tensor import as_batch, check_kernel, pad_same, split_groups


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_params: dict = field(default_factory=dict)


def _match(g, like):
    # upstream arrives batched or not, like the forward output
    return g if like.ndim == 4 else g[0]


# -- primitive adjoints ----------------------------------------------------------

def conv2d_vjp(x, kernel, g):
    x4, _ = as_batch(x)
    kernel = check_kernel(kernel, x4.shape[1])
    g4, _ = as_batch(g)
    m, _, d, _ = kernel.shape
    if g4.shape != (x4.shape[0], m) + x4.shape[2:]:
        raise ConfigurationError(f"upstream shape {g.shape} does not match conv output")
    p = (d - 1) // 2
    g4 = np.ascontiguousarray(g4)
    dxp = _kernels.corr_grad_input(g4, np.ascontiguousarray(kernel))
    dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p]
    dk = _kernels.corr_grad_weight(pad_same(x4, d), g4, d)
    return _match(np.ascontiguousarray(dx), np.asarray(x)), dk


def conv1x1_vjp(x, weights, g):
    dx, dk = conv2d_vjp(x, np.asarray(weights, dtype=np.float64)[:, :, None, None], g)
    return dx, dk[:, :, 0, 0]


def _concat_groups(parts, like):
    return _match(np.concatenate([as_batch(p)[0] for p in parts], axis=1), like)


def group_conv_vjp(x, spec, local, g):
    xs = split_groups(x, spec.groups)
    gs = split_groups(g, spec.groups)
    pairs = [conv2d_vjp(xk, local[k], gs[k]) for k, xk in enumerate(xs)]
    return _concat_groups([p[0] for p in pairs], np.asarray(x)), np.stack([p[1] for p in pairs])


def coarse_restrict_vjp(x, spec, kernels, g):
    xs = split_groups(x, spec.groups)
    gs = split_groups(g, spec.groups)
    pairs = [conv2d_vjp(xk, kernels[k], gs[k]) for k, xk in enumerate(xs)]
    return _concat_groups([p[0] for p in pairs], np.asarray(x)), np.stack([p[1] for p in pairs])


def coarse_combined_vjp(x0, coarse_mix, spec, g):
    gs = split_groups(g, spec.groups)
    dx0 = None
    dmix = []
    for k in range(spec.groups):
        dxk, dsk = conv1x1_vjp(x0, coarse_mix[k], gs[k])
        dx0 = dxk if dx0 is None else dx0 + dxk   # fixed group-index order
        dmix.append(dsk)
    return dx0, np.stack(dmix)


def coarse_proto_vjp(x0, proto, spec, g):
    z = ops.conv1x1(x0, proto.a0)
    zs = split_groups(z, spec.groups)
    gs = split_groups(g, spec.groups)
    dz_parts, ddist = [], []
    for k in range(spec.groups):
        dzk, dwk = conv1x1_vjp(zs[k], proto.distribute[k][:, None], gs[k])
        dz_parts.append(dzk)
        ddist.append(dwk[:, 0])
    dz = _concat_groups(dz_parts, np.asarray(x0))
    dx0, da0 = conv1x1_vjp(x0, proto.a0, dz)
    return dx0, da0, np.stack(ddist)


def two_level_vjp(x, spec, params, g):
    dx_local, dlocal = group_conv_vjp(x, spec, params.local, g)
    x0 = ops.coarse_restrict(x, spec, params.coarse_restrict)
    dx0, dmix = coarse_combined_vjp(x0, params.coarse_mix, spec, g)
    dx_coarse, drestrict = coarse_restrict_vjp(x, spec, params.coarse_restrict, dx0)
    return dx_local + dx_coarse, TwoLevelParams(dlocal, drestrict, dmix)


def two_level_proto_vjp(x, spec, local, restrict_kernels, proto, g):
    dx_local, dlocal = group_conv_vjp(x, spec, local, g)
    x0 = ops.coarse_restrict(x, spec, restrict_kernels)
    dx0, da0, ddist = coarse_proto_vjp(x0, proto, spec, g)
    dx_coarse, drestrict = coarse_restrict_vjp(x, spec, restrict_kernels, dx0)
    return dx_local + dx_coarse, drestrict, dlocal, da0, ddist


# -- registry -------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    name: str
    param_keys: tuple
    forward: object   # (args, spec) -> output
    backward: object  # (args, spec, g) -> dict of gradients keyed like args
    sample: object    # (rng, config) -> (args, spec)


def _proto(args):
    return ProtoCoarseParams(args["a0"], args["distribute"])


def _two_level_params(args):
    return TwoLevelParams(args["local"], args["coarse_restrict"], args["coarse_mix"])


def _spec_from(cfg):
    return GroupSpec(cfg.get("n", 8), cfg.get("m", 12), cfg.get("groups", 4), cfg.get("d", 3), cfg.get("d0"))


def _image(rng, c, cfg):
    hw = cfg.get("hw", 5)
    shape = (c, hw, hw) if cfg.get("batch") is None else (cfg["batch"], c, hw, hw)
    return rng.standard_normal(shape)


def _sample_conv2d(rng, cfg):
    n, m, d = cfg.get("n", 3), cfg.get("m", 4), cfg.get("d", 3)
    return {"x": _image(rng, n, cfg), "kernel": rng.standard_normal((m, n, d, d))}, None


def _sample_conv1x1(rng, cfg):
    n, m = cfg.get("n", 3), cfg.get("m", 4)
    return {"x": _image(rng, n, cfg), "weights": rng.standard_normal((m, n))}, None


def _sample_group(rng, cfg):
    spec = _spec_from(cfg)
    return {"x": _image(rng, spec.n, cfg), "local": rng.standard_normal(spec.local_shape())}, spec


def _sample_restrict(rng, cfg):
    spec = _spec_from(cfg)
    return {"x": _image(rng, spec.n, cfg), "kernels": rng.standard_normal(spec.restrict_shape())}, spec


def _sample_combined(rng, cfg):
    spec = _spec_from(cfg)
    return {"x": _image(rng, spec.groups, cfg), "coarse_mix": rng.standard_normal(spec.mix_shape())}, spec


def _sample_proto_apply(rng, cfg):
    spec = _spec_from(cfg)
    p = ProtoCoarseParams.random(spec, rng)
    return {"x": _image(rng, spec.groups, cfg), "a0": p.a0, "distribute": p.distribute}, spec


def _sample_two_level(rng, cfg):
    spec = _spec_from(cfg)
    p = TwoLevelParams.random(spec, rng)
    return {"x": _image(rng, spec.n, cfg), "local": p.local,
            "coarse_restrict": p.coarse_restrict, "coarse_mix": p.coarse_mix}, spec


def _sample_two_level_proto(rng, cfg):
    spec = _spec_from(cfg)
    p = ProtoCoarseParams.random(spec, rng)
    return {"x": _image(rng, spec.n, cfg), "local": rng.standard_normal(spec.local_shape()),
            "coarse_restrict": rng.standard_normal(spec.restrict_shape()),
            "a0": p.a0, "distribute": p.distribute}, spec


def _sample_shuffle(rng, cfg):
    c = cfg.get("m", 12)
    return {"x": _image(rng, c, cfg)}, _spec_from({**cfg, "n": c, "m": c})


def _bw_conv2d(a, s, g):
    dx, dk = conv2d_vjp(a["x"], a["kernel"], g)
    return {"x": dx, "kernel": dk}


def _bw_conv1x1(a, s, g):
    dx, dw = conv1x1_vjp(a["x"], a["weights"], g)
    return {"x": dx, "weights": dw}


def _bw_group(a, s, g):
    dx, dl = group_conv_vjp(a["x"], s, a["local"], g)
    return {"x": dx, "local": dl}


def _bw_restrict(a, s, g):
    dx, dk = coarse_restrict_vjp(a["x"], s, a["kernels"], g)
    return {"x": dx, "kernels": dk}


def _bw_combined(a, s, g):
    dx, dm = coarse_combined_vjp(a["x"], a["coarse_mix"], s, g)
    return {"x": dx, "coarse_mix": dm}


def _bw_proto_apply(a, s, g):
    dx, da0, dd = coarse_proto_vjp(a["x"], _proto(a), s, g)
    return {"x": dx, "a0": da0, "distribute": dd}


def _bw_two_level(a, s, g):
    dx, gp = two_level_vjp(a["x"], s, _two_level_params(a), g)
    return {"x": dx, "local": gp.local, "coarse_restrict": gp.coarse_restrict, "coarse_mix": gp.coarse_mix}


def _bw_two_level_proto(a, s, g):
    dx, dr, dl, da0, dd = two_level_proto_vjp(a["x"], s, a["local"], a["coarse_restrict"], _proto(a), g)
    return {"x": dx, "local": dl, "coarse_restrict": dr, "a0": da0, "distribute": dd}


OPS = {
    op.name: op for op in [
        Op("conv2d", ("kernel",), lambda a, s: ops.conv2d(a["x"], a["kernel"]), _bw_conv2d, _sample_conv2d),
        Op("standard_conv", ("kernel",), lambda a, s: ops.standard_conv(a["x"], a["kernel"]), _bw_conv2d,
           _sample_conv2d),
        Op("conv1x1", ("weights",), lambda a, s: ops.conv1x1(a["x"], a["weights"]), _bw_conv1x1, _sample_conv1x1),
        Op("group_conv", ("local",), lambda a, s: ops.group_conv(a["x"], s, a["local"]), _bw_group, _sample_group),
        Op("coarse_restrict", ("kernels",), lambda a, s: ops.coarse_restrict(a["x"], s, a["kernels"]),
           _bw_restrict, _sample_restrict),
        Op("coarse_combined_apply", ("coarse_mix",),
           lambda a, s: ops.coarse_combined_apply(a["x"], a["coarse_mix"], s), _bw_combined, _sample_combined),
        Op("coarse_proto_apply", ("a0", "distribute"),
           lambda a, s: ops.coarse_proto_apply(a["x"], _proto(a), s), _bw_proto_apply, _sample_proto_apply),
        Op("two_level", ("local", "coarse_restrict", "coarse_mix"),
           lambda a, s: ops.two_level(a["x"], s, _two_level_params(a)), _bw_two_level, _sample_two_level),
        Op("two_level_proto", ("local", "coarse_restrict", "a0", "distribute"),
           lambda a, s: ops.two_level_proto(a["x"], s, a["local"], a["coarse_restrict"], _proto(a)),
           _bw_two_level_proto, _sample_two_level_proto),
        Op("channel_shuffle", (), lambda a, s: ops.channel_shuffle(a["x"], s.groups),
           lambda a, s, g: {"x": ops.channel_unshuffle(g, s.groups)}, _sample_shuffle),
    ]
}


def get_op(op_id):
    try:
        return OPS[op_id]
    except KeyError:
        raise ConfigurationError(f"unknown op {op_id!r}; known: {', '.join(sorted(OPS))}") from None


def sample_args(op_id, seed=0, **config):
    """Random arguments for ``op_id`` at the default gradcheck shapes (overridable)."""
    return get_op(op_id).sample(np.random.default_rng(seed), config)


def vjp(op_id, args, upstream, spec=None):
    op = get_op(op_id)
    out = op.forward(args, spec)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ConfigurationError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    grads = op.backward(args, spec, upstream)
    return GradBundle(grads["x"], {k: grads[k] for k in op.param_keys})


# -- finite differences ------------------------------------------------------------

@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    worst_key: str
    worst_index: tuple
    coordinates: int


def finite_diff_report(op_id, args, spec=None, seed=0, h=1e-6):
    """Central differences of ``<r, op(theta)>`` against :func:`vjp`, coordinate by coordinate.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ConfigurationError(f"step h must be positive, got {h}")
    op = get_op(op_id)
    args = {k: np.array(v, dtype=np.float64) for k, v in args.items()}
    rng = np.random.default_rng(seed)
    out = op.forward(args, spec)
    r = rng.standard_normal(out.shape)
    analytic = vjp(op_id, args, r, spec)
    analytic = {"x": analytic.d_input, **analytic.d_params}

    worst = (0.0, "x", ())
    count = 0
    for key in ("x",) + op.param_keys:
        theta = args[key]
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            fp = float(np.sum(r * op.forward(args, spec)))
            theta[idx] = orig - h
            fm = float(np.sum(r * op.forward(args, spec)))
            theta[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[key][idx])
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise FloatingPointError(
                    f"{op_id}: non-finite gradient at {key}{list(idx)} (analytic={ana}, numeric={num})"
                )
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            count += 1
            if err > worst[0]:
                worst = (err, key, idx)
    return GradCheckReport(op_id, worst[0], worst[1], worst[2], count)


def finite_diff_check(op_id, args, spec=None, seed=0, h=1e-6):
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(op_id, args, spec, seed, h).max_rel_error
