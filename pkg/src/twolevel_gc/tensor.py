"""Dense image tensors and the two convolution primitives.

Tensors are plain float64 numpy arrays shaped ``(C, H, W)`` or, batched,
``(B, C, H, W)``.  Kernels are ``(out, in, d, d)`` arrays with odd ``d``.
All convolutions are stride-1 cross-correlations with zero same-padding of
width ``(d - 1) // 2`` and no bias.
"""

import struct
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigurationError

MAGIC = b"T2LC"
FORMAT_VERSION = 1


def as_batch(x):
    """Return ``(x4, batched)`` with ``x4`` always four-dimensional float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ConfigurationError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {x.shape}")


def _unbatch(y, batched):
    return y if batched else y[0]


def check_kernel(kernel, in_channels=None):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ConfigurationError(f"kernel must be (out, in, d, d), got {kernel.shape}")
    d = kernel.shape[2]
    if d % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got d={d}")
    if in_channels is not None and kernel.shape[1] != in_channels:
        raise ConfigurationError(
            f"kernel expects {kernel.shape[1]} input channels, input has {in_channels}"
        )
    return kernel


def pad_same(x4, d):
    p = (d - 1) // 2
    if p == 0:
        return np.ascontiguousarray(x4)
    B, C, H, W = x4.shape
    out = np.zeros((B, C, H + 2 * p, W + 2 * p))
    out[:, :, p:p + H, p:p + W] = x4
    return out


def conv2d(x, kernel):
    """Same-padded d x d cross-correlation from n to m channels.

    ``out[o, y, x] = sum_{i,u,v} kernel[o, i, u, v] * x_pad[i, y+u, x+v]``,
    accumulated in (i, u, v) order.
    """
    x4, batched = as_batch(x)
    kernel = check_kernel(kernel, x4.shape[1])
    out = _kernels.corr_forward(pad_same(x4, kernel.shape[2]), np.ascontiguousarray(kernel))
    return _unbatch(out, batched)


def conv1x1(x, weights):
    """Per-pixel channel mixing by an ``(m, n)`` matrix."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ConfigurationError(f"1x1 weights must be a matrix, got shape {weights.shape}")
    x4, _ = as_batch(x)
    if weights.shape[1] != x4.shape[1]:
        raise ConfigurationError(
            f"1x1 weights take {weights.shape[1]} channels, input has {x4.shape[1]}"
        )
    # same code path as conv2d so d=1 results agree bit for bit
    return conv2d(x, weights[:, :, None, None])


def channel_slice(x, start, stop):
    x4, batched = as_batch(x)
    c = x4.shape[1]
    if not (0 <= start <= stop <= c):
        raise ConfigurationError(f"channel range [{start}, {stop}) outside 0..{c}")
    return _unbatch(x4[:, start:stop], batched)


def channel_concat(parts):
    if not parts:
        raise ConfigurationError("nothing to concatenate")
    arrays = [as_batch(p) for p in parts]
    batched = arrays[0][1]
    ref = arrays[0][0].shape
    for a, b in arrays:
        if b != batched or a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
            raise ConfigurationError(
                f"cannot concatenate tensors of shapes {[p.shape for p, _ in arrays]}"
            )
    return _unbatch(np.concatenate([a for a, _ in arrays], axis=1), batched)


def split_groups(x, groups):
    """Slice channels into ``groups`` contiguous equal parts."""
    x4, batched = as_batch(x)
    c = x4.shape[1]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{groups} groups do not divide {c} channels")
    size = c // groups
    return [_unbatch(x4[:, k * size:(k + 1) * size], batched) for k in range(groups)]


# -- binary format -------------------------------------------------------------

def encode_tensor(arr):
    """Serialize to ``T2LC`` bytes: magic, version, ndim, dims (u32 LE), float64 LE data."""
    arr = np.asarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack(f"<II{arr.ndim}I", FORMAT_VERSION, arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf):
    if buf[:4] != MAGIC:
        raise ValueError("not a T2LC tensor (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported T2LC version {version}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise ValueError(f"T2LC payload holds {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)


def save_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())
