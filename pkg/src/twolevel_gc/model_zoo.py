"""Network descriptors and parameter accounting.

An :class:`ArchSpec` is a flat, ordered list of layers, each tagged with the
block it belongs to.  Convolutions marked ``convertible`` take the variant the
network is built with (``sc``, ``gc``, ``gc2l`` or ``shuffle``); the others
always stay standard convolutions.

Counting conventions
--------------------
:func:`layer_param_count` follows the sharding of the simulated workers:

* SC:            total ``d^2 m n``,      per-processor ``ceil(d^2 m n / N)``
* GC / Shuffle:  total ``d^2 m n / N``,  per-processor ``d^2 m n / N^2``
* GC-2L:         per-processor ``d^2 m n / N^2 + d0^2 n / N + m``, total ``N *`` that

:func:`model_param_count` reports three numbers for a whole network:

* ``total``          every trainable parameter of the network
* ``per_worker``     what one of N simulated workers stores: converted layers at
                     their per-processor count, other convolutions split N ways,
                     batch-norm / depthwise / fully-connected parameters replicated
* ``per_processor``  the column of the published WideResNet/MobileNetV2 tables,
                     which charges a converted layer at its whole grouped size
                     (SC layers split N ways, batch-norm / depthwise / fully-connected
                     replicated).  For SC at N=1 this is the plain total.
"""

from dataclasses import dataclass, field, replace

from .errors import ConfigurationError

VARIANTS = ("sc", "gc", "gc2l", "shuffle")
GROUPED = ("gc", "gc2l", "shuffle")


@dataclass(frozen=True)
class Conv:
    name: str
    in_ch: int
    out_ch: int
    d: int = 3
    stride: int = 1
    convertible: bool = True
    depthwise: bool = False
    variant: str = "sc"
    block: str = ""


@dataclass(frozen=True)
class Norm:
    name: str
    channels: int
    block: str = ""


@dataclass(frozen=True)
class Act:
    name: str
    block: str = ""


@dataclass(frozen=True)
class Pool:
    name: str
    block: str = ""


@dataclass(frozen=True)
class Linear:
    name: str
    in_f: int
    out_f: int
    bias: bool = True
    block: str = ""


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    variant: str = "sc"
    groups: int = 1
    d0: int = None   # coarse restriction kernel size; None means "same as d"

    def with_variant(self, variant, groups):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        layers = tuple(
            replace(layer, variant=variant if layer.convertible else "sc") if isinstance(layer, Conv) else layer
            for layer in self.layers
        )
        return replace(self, layers=layers, variant=variant, groups=groups)

    def convs(self):
        return [layer for layer in self.layers if isinstance(layer, Conv)]


@dataclass
class ParamCount:
    total: int
    per_processor: int
    breakdown: dict = field(default_factory=dict)   # role -> total count


@dataclass
class LayerRow:
    layer: str
    role: str
    total: int
    per_processor: int   # table convention
    per_worker: int


@dataclass
class ModelParamCount:
    arch: str
    variant: str
    groups: int
    total: int
    per_processor: int
    per_worker: int
    rows: list
    by_role: dict


def _ceil_div(a, b):
    return -(-a // b)


def layer_param_count(n, m, d, d0=None, N=1, variant="sc"):
    d0 = d if d0 is None else d0
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    full = d * d * m * n
    if variant == "sc":
        return ParamCount(full, _ceil_div(full, N), {"local": full})
    if N < 1 or n % N or m % N:
        raise ConfigurationError(f"{N} groups must divide n={n} and m={m}")
    local_per = d * d * (m // N) * (n // N)
    if variant in ("gc", "shuffle"):
        return ParamCount(local_per * N, local_per, {"local": local_per * N})
    restrict_per = d0 * d0 * (n // N)
    per = local_per + restrict_per + m
    return ParamCount(per * N, per, {"local": local_per * N, "coarse_restrict": restrict_per * N,
                                     "coarse_mix": m * N})


def model_param_count(arch, variant=None, N=None):
    """Sum parameter counts over ``arch`` built with ``variant`` and ``N`` groups."""
    if variant is not None or N is not None:
        arch = arch.with_variant(variant or arch.variant, N or arch.groups)
    N = arch.groups
    rows, by_role = [], {}
    total = per_processor = per_worker = 0

    def add(name, role, count, table_share, worker_share):
        nonlocal total, per_processor, per_worker
        rows.append(LayerRow(name, role, count, table_share, worker_share))
        by_role[role] = by_role.get(role, 0) + count
        total += count
        per_processor += table_share
        per_worker += worker_share

    for layer in arch.layers:
        if isinstance(layer, Conv):
            if layer.depthwise:
                count = layer.d * layer.d * layer.out_ch
                add(layer.name, "other", count, count, count)
                continue
            if not layer.convertible:
                count = layer.d * layer.d * layer.in_ch * layer.out_ch
                share = _ceil_div(count, N)
                add(layer.name, "other", count, share, share)
                continue
            try:
                pc = layer_param_count(layer.in_ch, layer.out_ch, layer.d,
                                       arch.d0 if arch.d0 is not None else layer.d, N, layer.variant)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {layer.name}: {exc}") from None
            grouped = layer.variant in GROUPED
            for role, count in pc.breakdown.items():
                if grouped:
                    table_share, worker_share = count, count // N
                else:
                    table_share = worker_share = _ceil_div(count, N)
                add(layer.name, role, count, table_share, worker_share)
        elif isinstance(layer, Norm):
            count = 2 * layer.channels
            add(layer.name, "BN", count, count, count)
        elif isinstance(layer, Linear):
            count = layer.in_f * layer.out_f + (layer.out_f if layer.bias else 0)
            add(layer.name, "FC", count, count, count)
    return ModelParamCount(arch.name, arch.variant, N, total, per_processor, per_worker, rows, by_role)


# -- presets ----------------------------------------------------------------------

def wideresnet(l=28, w=10, classes=10, convert_shortcuts=True):
    """WideResNet-l-w with pre-activation residual units (BN-ReLU-conv, twice, plus skip).

    Stage widths are 16w, 32w, 64w with (l - 4) / 6 units each.  The 3 -> 16 stem
    stays a standard convolution; 1x1 projection shortcuts are converted along
    with the 3x3 convolutions unless ``convert_shortcuts`` is False.
    """
    if l < 10 or (l - 4) % 6:
        raise ConfigurationError(f"WideResNet depth must satisfy l = 4 (mod 6), l >= 10; got {l}")
    units = (l - 4) // 6
    layers = [Conv("conv1", 3, 16, 3, convertible=False, block="stem")]
    cin = 16
    for s, (width, stride) in enumerate(zip((16 * w, 32 * w, 64 * w), (1, 2, 2)), start=1):
        for u in range(units):
            blk = f"stage{s}.unit{u}"
            st = stride if u == 0 else 1
            layers += [
                Norm(f"{blk}.bn1", cin, blk), Act(f"{blk}.relu1", blk),
                Conv(f"{blk}.conv1", cin, width, 3, st, block=blk),
                Norm(f"{blk}.bn2", width, blk), Act(f"{blk}.relu2", blk),
                Conv(f"{blk}.conv2", width, width, 3, block=blk),
            ]
            if cin != width or st != 1:
                layers.append(Conv(f"{blk}.shortcut", cin, width, 1, st, convertible=convert_shortcuts, block=blk))
            cin = width
    layers += [Norm("bn_final", cin, "head"), Act("relu_final", "head"), Pool("avgpool", "head"),
               Linear("fc", cin, classes, block="head")]
    return ArchSpec(f"wideresnet-{l}-{w}", tuple(layers))


MOBILENETV2_SETTINGS = (
    # expansion t, output channels c, repeats n, first stride s
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenetv2(classes=1000, last_channels=1280):
    """MobileNetV2 (width 1.0).  All 1x1 convolutions are convertible; 3x3 depthwise and the stem are not."""
    layers = [Conv("stem", 3, 32, 3, 2, convertible=False, block="stem"), Norm("stem.bn", 32, "stem"),
              Act("stem.relu", "stem")]
    cin = 32
    idx = 0
    for t, c, n, s in MOBILENETV2_SETTINGS:
        for r in range(n):
            blk = f"block{idx}"
            hidden = cin * t
            if t != 1:
                layers += [Conv(f"{blk}.expand", cin, hidden, 1, block=blk), Norm(f"{blk}.bn0", hidden, blk),
                           Act(f"{blk}.relu0", blk)]
            layers += [
                Conv(f"{blk}.dw", hidden, hidden, 3, s if r == 0 else 1, convertible=False, depthwise=True,
                     block=blk),
                Norm(f"{blk}.bn1", hidden, blk), Act(f"{blk}.relu1", blk),
                Conv(f"{blk}.project", hidden, c, 1, block=blk), Norm(f"{blk}.bn2", c, blk),
            ]
            cin = c
            idx += 1
    layers += [Conv("head.conv", cin, last_channels, 1, block="head"), Norm("head.bn", last_channels, "head"),
               Act("head.relu", "head"), Pool("avgpool", "head"), Linear("fc", last_channels, classes, block="head")]
    return ArchSpec("mobilenetv2", tuple(layers))


def build_toy_arch(depth=3, width=16, variant="sc", N=1, in_channels=3, classes=10, d=3):
    """Small trainable stack: SC stem, ``depth`` variant convs of ``width`` channels, GAP, FC.

    Every convolution is followed by a per-channel affine scaling and ReLU.
    """
    if width % N:
        raise ConfigurationError(f"{N} groups do not divide width {width}")
    layers = [Conv("stem", in_channels, width, d, convertible=False, block="stem"),
              Norm("stem.affine", width, "stem"), Act("stem.relu", "stem")]
    for i in range(depth):
        blk = f"layer{i}"
        layers += [Conv(f"{blk}.conv", width, width, d, block=blk), Norm(f"{blk}.affine", width, blk),
                   Act(f"{blk}.relu", blk)]
    layers += [Pool("gap", "head"), Linear("fc", width, classes, block="head")]
    arch = ArchSpec(f"toy-{depth}x{width}", tuple(layers))
    arch = arch.with_variant(variant, N)
    model_param_count(arch)   # surfaces divisibility problems by layer name
    return arch


def preset(name):
    """Look up ``wideresnet-L-W``, ``mobilenetv2`` or ``toy``."""
    if name == "mobilenetv2":
        return mobilenetv2()
    if name == "toy":
        return build_toy_arch()
    if name.startswith("wideresnet-"):
        try:
            _, l, w = name.split("-")
            return wideresnet(int(l), int(w))
        except ValueError:
            pass
    raise ConfigurationError(f"unknown architecture {name!r}")
