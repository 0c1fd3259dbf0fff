"""Standard, group and two-level group convolutions.

Channel groups are contiguous: group ``k`` owns input channels
``[k*n/N, (k+1)*n/N)`` and output channels ``[k*m/N, (k+1)*m/N)``.

Parameter layout (stacked arrays, one leading axis per group):

* ``local``           ``(N, m/N, n/N, d, d)``   the block-diagonal kernels A_k
* ``coarse_restrict`` ``(N, 1, n/N, d0, d0)``   one representative-channel kernel per group
* ``coarse_mix``      ``(N, m/N, N)``           S_k, mixing all N representatives into group k

The two-level operator is ``group_conv(x) + coarse_combined_apply(coarse_restrict(x))``,
evaluated in that order.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    as_batch,
    channel_concat,
    conv1x1,
    conv2d,
    load_tensor,
    save_tensor,
    split_groups,
)


@dataclass(frozen=True)
class GroupSpec:
    n: int
    m: int
    groups: int
    d: int = 3
    d0: int = None

    def __post_init__(self):
        if self.d0 is None:
            object.__setattr__(self, "d0", self.d)
        N = self.groups
        if N < 1:
            raise ConfigurationError(f"group count must be positive, got {N}")
        if self.n % N or self.m % N:
            raise ConfigurationError(
                f"{N} groups must divide both n={self.n} and m={self.m}"
            )
        for name in ("d", "d0"):
            size = getattr(self, name)
            if size < 1 or size % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd integer, got {size}")

    @property
    def n_local(self):
        return self.n // self.groups

    @property
    def m_local(self):
        return self.m // self.groups

    def local_shape(self):
        return (self.groups, self.m_local, self.n_local, self.d, self.d)

    def restrict_shape(self):
        return (self.groups, 1, self.n_local, self.d0, self.d0)

    def mix_shape(self):
        return (self.groups, self.m_local, self.groups)


def _check_shape(name, arr, shape):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ConfigurationError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def _check_input(x, channels):
    x4, _ = as_batch(x)
    if x4.shape[1] != channels:
        raise ConfigurationError(f"input has {x4.shape[1]} channels, expected {channels}")


@dataclass(frozen=True)
class TwoLevelParams:
    local: np.ndarray
    coarse_restrict: np.ndarray
    coarse_mix: np.ndarray

    def validate(self, spec):
        _check_shape("local", self.local, spec.local_shape())
        _check_shape("coarse_restrict", self.coarse_restrict, spec.restrict_shape())
        _check_shape("coarse_mix", self.coarse_mix, spec.mix_shape())
        return self

    def with_zero_coarse(self):
        return replace(
            self,
            coarse_restrict=np.zeros_like(self.coarse_restrict),
            coarse_mix=np.zeros_like(self.coarse_mix),
        )

    @classmethod
    def random(cls, spec, rng, scale=1.0):
        return cls(
            scale * rng.standard_normal(spec.local_shape()),
            scale * rng.standard_normal(spec.restrict_shape()),
            scale * rng.standard_normal(spec.mix_shape()),
        )

    @classmethod
    def he_init(cls, spec, rng, zero_coarse=False):
        """Fan-in scaled normal init; S_k uses fan-in N."""
        local = rng.standard_normal(spec.local_shape()) * np.sqrt(2.0 / (spec.n_local * spec.d ** 2))
        restrict = rng.standard_normal(spec.restrict_shape()) * np.sqrt(2.0 / (spec.n_local * spec.d0 ** 2))
        mix = rng.standard_normal(spec.mix_shape()) * np.sqrt(2.0 / spec.groups)
        params = cls(local, restrict, mix)
        return params.with_zero_coarse() if zero_coarse else params


@dataclass(frozen=True)
class ProtoCoarseParams:
    a0: np.ndarray          # (N, N)
    distribute: np.ndarray  # (N, m/N)

    def validate(self, spec):
        _check_shape("a0", self.a0, (spec.groups, spec.groups))
        _check_shape("distribute", self.distribute, (spec.groups, spec.m_local))
        return self

    @classmethod
    def random(cls, spec, rng):
        return cls(
            rng.standard_normal((spec.groups, spec.groups)),
            rng.standard_normal((spec.groups, spec.m_local)),
        )


# -- operators -----------------------------------------------------------------

def standard_conv(x, kernel):
    """The SC baseline: a full d x d convolution from n to m channels."""
    return conv2d(x, kernel)


def group_conv(x, spec, local):
    local = _check_shape("local", local, spec.local_shape())
    _check_input(x, spec.n)
    parts = split_groups(x, spec.groups)
    return channel_concat([conv2d(xk, local[k]) for k, xk in enumerate(parts)])


def coarse_restrict(x, spec, kernels):
    """R_0 x: channel k is a single-output convolution over group k's channels."""
    kernels = _check_shape("coarse_restrict", kernels, spec.restrict_shape())
    _check_input(x, spec.n)
    parts = split_groups(x, spec.groups)
    return channel_concat([conv2d(xk, kernels[k]) for k, xk in enumerate(parts)])


def coarse_proto_apply(x0, proto, spec):
    """R~_0^T A_0 x0: mix the N coarse channels, then spread channel k over group k."""
    proto.validate(spec)
    _check_input(x0, spec.groups)
    z = conv1x1(x0, proto.a0)
    zs = split_groups(z, spec.groups)
    return channel_concat([conv1x1(zk, proto.distribute[k][:, None]) for k, zk in enumerate(zs)])


def coarse_combined_apply(x0, coarse_mix, spec):
    """R-bar_0^T x0: group k of the output is ``S_k x0`` (all N coarse channels)."""
    coarse_mix = _check_shape("coarse_mix", coarse_mix, spec.mix_shape())
    _check_input(x0, spec.groups)
    return channel_concat([conv1x1(x0, coarse_mix[k]) for k in range(spec.groups)])


def subsume_prototype(proto, spec):
    """S_k[i, j] = w_k[i] * a0[k, j]: the prototype coarse map as a full 1x1 mixing."""
    proto.validate(spec)
    return np.einsum("ki,kj->kij", proto.distribute, proto.a0)


def two_level_proto(x, spec, local, restrict_kernels, proto):
    y = group_conv(x, spec, local)
    return y + coarse_proto_apply(coarse_restrict(x, spec, restrict_kernels), proto, spec)


def two_level(x, spec, params):
    params.validate(spec)
    y = group_conv(x, spec, params.local)
    return y + coarse_combined_apply(coarse_restrict(x, spec, params.coarse_restrict), params.coarse_mix, spec)


def shuffle_order(channels, groups):
    if groups < 1 or channels % groups:
        raise ConfigurationError(f"{groups} groups do not divide {channels} channels")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def channel_shuffle(x, groups):
    """Transpose shuffle: view channels as a groups x (c/groups) grid and read it column-wise."""
    x4, batched = as_batch(x)
    y = x4[:, shuffle_order(x4.shape[1], groups)]
    return y if batched else y[0]


def channel_unshuffle(x, groups):
    x4, batched = as_batch(x)
    inverse = np.argsort(shuffle_order(x4.shape[1], groups))
    y = x4[:, inverse]
    return y if batched else y[0]


# -- kernel assembly -----------------------------------------------------------

def assemble_block_kernel(spec, local):
    """Full (m, n, d, d) kernel with ``local[k]`` on the diagonal blocks and zeros elsewhere."""
    local = _check_shape("local", local, spec.local_shape())
    full = np.zeros((spec.m, spec.n, spec.d, spec.d))
    for k in range(spec.groups):
        full[k * spec.m_local:(k + 1) * spec.m_local, k * spec.n_local:(k + 1) * spec.n_local] = local[k]
    return full


def diagonal_blocks(kernel, spec):
    kernel = _check_shape("kernel", kernel, (spec.m, spec.n, spec.d, spec.d))
    return np.stack([
        kernel[k * spec.m_local:(k + 1) * spec.m_local, k * spec.n_local:(k + 1) * spec.n_local]
        for k in range(spec.groups)
    ])


# -- parameter files -----------------------------------------------------------

def save_params(directory, spec, params):
    """One T2LC file per kernel plus ``manifest.json`` listing (role, group, shape)."""
    params.validate(spec)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for role in ("local", "coarse_restrict", "coarse_mix"):
        stacked = getattr(params, role)
        for k in range(spec.groups):
            fname = f"{role}_{k}.t2lc"
            save_tensor(directory / fname, stacked[k])
            records.append({"role": role, "group": k, "shape": list(stacked[k].shape), "file": fname})
    manifest = {
        "spec": {"n": spec.n, "m": spec.m, "groups": spec.groups, "d": spec.d, "d0": spec.d0},
        "records": records,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_params(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = GroupSpec(**manifest["spec"])
    parts = {"local": {}, "coarse_restrict": {}, "coarse_mix": {}}
    for rec in manifest["records"]:
        arr = load_tensor(directory / rec["file"])
        if list(arr.shape) != rec["shape"]:
            raise ConfigurationError(f"{rec['file']} has shape {arr.shape}, manifest says {rec['shape']}")
        parts[rec["role"]][rec["group"]] = arr
    stacked = {role: np.stack([p[k] for k in range(spec.groups)]) for role, p in parts.items()}
    return spec, TwoLevelParams(**stacked).validate(spec)
