"""SGD training of small networks built from the convolution variants.

Networks are described by :class:`~twolevel_gc.model_zoo.ArchSpec` (see
:func:`~twolevel_gc.model_zoo.build_toy_arch`).  Supported layers: stride-1
convolutions of any variant, per-channel affine scaling (in place of batch
norm), ReLU, global average pooling and a fully-connected classifier.

The optimizer is classical momentum SGD with coupled weight decay::

    v <- momentum * v + (grad + weight_decay * theta)
    theta <- theta - lr * v

Training is single-threaded and deterministic for a given seed.
"""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dist_sim
from .autodiff import conv2d_vjp, group_conv_vjp, two_level_vjp
from .conv_ops import GroupSpec, TwoLevelParams, channel_shuffle, channel_unshuffle, group_conv, two_level
from .errors import ConfigurationError, DivergenceError, IngestionError
from .model_zoo import Act, Conv, Linear, Norm, Pool, build_toy_arch
from .tensor import conv2d

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD = 3073


@dataclass
class Hyper:
    batch_size: int = 128
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 30
    lr: float = 0.1
    lr_drops: tuple = ((60, 0.1), (120, 0.1), (160, 0.1))   # (epoch, multiplier), 1-based epochs
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be non-negative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")

    def lr_at(self, epoch):
        lr = self.lr
        for at, mult in self.lr_drops:
            if epoch >= at:
                lr *= mult
        return lr


# -- data -----------------------------------------------------------------------------

@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    provenance: str
    augment: bool = False

    def train_batch(self, idx, epoch, seed):
        x = self.x_train[idx]
        if self.augment:
            x = np.stack([_augment(self.x_train[i], np.random.default_rng([seed, epoch, int(i)])) for i in idx])
        return x, self.y_train[idx]


def _augment(img, rng, pad=4):
    """Zero-pad by ``pad`` pixels, random crop back to size, random horizontal flip."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[:, top:top + h, left:left + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def synth_dataset(seed, classes=10, per_class=60, channels=3, hw=8, test_per_class=20, noise=1.0,
                  smooth=1):
    """Gaussian blobs around per-class image templates.

    Templates are standard normal images blurred by a ``(2*smooth+1)``-wide box
    filter; samples are ``template + noise * N(0, 1)``.  Deterministic in ``seed``.
    """
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes, channels, hw, hw))
    if smooth:
        k = 2 * smooth + 1
        padded = np.pad(templates, ((0, 0), (0, 0), (smooth, smooth), (smooth, smooth)), mode="wrap")
        templates = sum(padded[:, :, u:u + hw, v:v + hw] for u in range(k) for v in range(k)) / k
        templates /= templates.std(axis=(1, 2, 3), keepdims=True)

    def draw(count):
        labels = np.repeat(np.arange(classes), count)
        x = templates[labels] + noise * rng.standard_normal((labels.size, channels, hw, hw))
        return x, labels

    x_train, y_train = draw(per_class)
    x_test, y_test = draw(test_per_class)
    return Dataset(x_train, y_train, x_test, y_test, classes, f"synthetic(seed={seed})")


def _read_cifar_file(path, records, out=None):
    if not path.exists():
        raise IngestionError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    expected = records * CIFAR_RECORD
    if raw.size < expected:
        full = raw.size // CIFAR_RECORD
        raise IngestionError(
            f"{path}: truncated at byte offset {raw.size}; record {full} incomplete "
            f"(expected {expected} bytes)"
        )
    if raw.size > expected:
        raise IngestionError(f"{path}: {raw.size - expected} trailing bytes after offset {expected}")
    table = raw.reshape(records, CIFAR_RECORD)
    labels = table[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestionError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    if out is None:
        out = np.empty((records, 3, 32, 32), dtype=np.float32)
    np.divide(table[:, 1:].reshape(records, 3, 32, 32), 255.0, out=out, dtype=np.float32)
    return out, labels


CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


def load_cifar10(directory, normalize=False, augment=False, records_per_file=10000):
    """Read the binary CIFAR-10 batches (1 label byte + 3072 pixel bytes, R/G/B planes).

    Pixels are scaled to [0, 1] and stored as float32 to keep the full set near 700 MB;
    the convolutions promote each batch to float64.
    """
    directory = Path(directory)
    r = records_per_file
    x_train = np.empty((len(CIFAR_TRAIN_FILES) * r, 3, 32, 32), dtype=np.float32)
    y_train = np.empty(len(CIFAR_TRAIN_FILES) * r, dtype=np.int64)
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        _, y_train[i * r:(i + 1) * r] = _read_cifar_file(directory / name, r, x_train[i * r:(i + 1) * r])
    x_test, y_test = _read_cifar_file(directory / CIFAR_TEST_FILE, r)
    if normalize:
        mean = CIFAR_MEAN[None, :, None, None].astype(np.float32)
        std = CIFAR_STD[None, :, None, None].astype(np.float32)
        for x in (x_train, x_test):
            x -= mean
            x /= std
    return Dataset(x_train, y_train, x_test, y_test, 10, f"cifar10({directory})", augment=augment)


# -- model ----------------------------------------------------------------------------

def _group_spec(layer, N):
    return GroupSpec(layer.in_ch, layer.out_ch, N, layer.d)


def _check_trainable(arch):
    for layer in arch.layers:
        if isinstance(layer, Conv) and (layer.stride != 1 or layer.depthwise):
            raise ConfigurationError(f"layer {layer.name}: trainer supports stride-1, non-depthwise convs only")


COARSE_INITS = ("he", "zero")


def init_params(arch, seed, coarse_init="he"):
    """Fan-in scaled normal init.  Each layer draws from its own stream, local kernels first,
    so GC and GC-2L nets with the same seed share every non-coarse parameter.

    ``coarse_init="zero"`` zeroes the coarse mixing weights, so a GC-2L net starts out
    computing exactly the GC net of the same seed.
    """
    if coarse_init not in COARSE_INITS:
        raise ConfigurationError(f"coarse_init must be one of {COARSE_INITS}, got {coarse_init!r}")
    _check_trainable(arch)
    params = {}
    for li, layer in enumerate(arch.layers):
        rng = np.random.default_rng([seed, li])
        if isinstance(layer, Conv):
            n, m, d = layer.in_ch, layer.out_ch, layer.d
            if layer.variant == "sc":
                params[f"{layer.name}.kernel"] = rng.standard_normal((m, n, d, d)) * np.sqrt(2.0 / (n * d * d))
            else:
                tl = TwoLevelParams.he_init(_group_spec(layer, arch.groups), rng)
                params[f"{layer.name}.local"] = tl.local
                if layer.variant == "gc2l":
                    params[f"{layer.name}.coarse_restrict"] = tl.coarse_restrict
                    mix = tl.coarse_mix if coarse_init == "he" else np.zeros_like(tl.coarse_mix)
                    params[f"{layer.name}.coarse_mix"] = mix
        elif isinstance(layer, Norm):
            params[f"{layer.name}.gamma"] = np.ones(layer.channels)
            params[f"{layer.name}.beta"] = np.zeros(layer.channels)
        elif isinstance(layer, Linear):
            params[f"{layer.name}.weight"] = rng.standard_normal((layer.out_f, layer.in_f)) / np.sqrt(layer.in_f)
            params[f"{layer.name}.bias"] = np.zeros(layer.out_f)
    return params


def _two_level_params(params, name):
    return TwoLevelParams(params[f"{name}.local"], params[f"{name}.coarse_restrict"], params[f"{name}.coarse_mix"])


def forward(arch, params, x, distributed=False):
    """Return ``(logits, tape, comm)``; ``tape`` holds what :func:`backward` needs."""
    N = arch.groups
    tape = []
    comm = dist_sim.CommReport(batch=x.shape[0])
    h = x
    for layer in arch.layers:
        if isinstance(layer, Conv):
            v = layer.variant
            if v == "sc":
                out, extra = conv2d(h, params[f"{layer.name}.kernel"]), None
            elif v in ("gc", "shuffle"):
                spec = _group_spec(layer, N)
                local = params[f"{layer.name}.local"]
                if distributed:
                    out, rep = dist_sim.group_forward_distributed(spec, local, h)
                    comm = comm.merged(rep)
                else:
                    out = group_conv(h, spec, local)
                if v == "shuffle":
                    out = channel_shuffle(out, N)
                extra = None
            else:
                spec = _group_spec(layer, N)
                tl = _two_level_params(params, layer.name)
                if distributed:
                    cluster = dist_sim.Cluster(spec, tl)
                    out, rep = cluster.forward(h)
                    comm = comm.merged(rep)
                    extra = cluster
                else:
                    out, extra = two_level(h, spec, tl), None
            tape.append(h if extra is None else (h, extra))
            h = out
        elif isinstance(layer, Norm):
            tape.append(h)
            h = h * params[f"{layer.name}.gamma"][None, :, None, None] + params[f"{layer.name}.beta"][None, :, None, None]
        elif isinstance(layer, Act):
            tape.append(h > 0)
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Pool):
            tape.append(h.shape)
            h = h.mean(axis=(2, 3))
        elif isinstance(layer, Linear):
            tape.append(h)
            h = h @ params[f"{layer.name}.weight"].T + params[f"{layer.name}.bias"]
    return h, tape, comm


def backward(arch, params, tape, g, distributed=False):
    grads = {}
    comm = dist_sim.CommReport(batch=g.shape[0])
    N = arch.groups
    for layer, saved in zip(reversed(arch.layers), reversed(tape)):
        if isinstance(layer, Linear):
            grads[f"{layer.name}.weight"] = g.T @ saved
            grads[f"{layer.name}.bias"] = g.sum(axis=0)
            g = g @ params[f"{layer.name}.weight"]
        elif isinstance(layer, Pool):
            B, C, H, W = saved
            g = np.broadcast_to(g[:, :, None, None] / (H * W), saved).copy()
        elif isinstance(layer, Act):
            g = g * saved
        elif isinstance(layer, Norm):
            grads[f"{layer.name}.gamma"] = (g * saved).sum(axis=(0, 2, 3))
            grads[f"{layer.name}.beta"] = g.sum(axis=(0, 2, 3))
            g = g * params[f"{layer.name}.gamma"][None, :, None, None]
        elif isinstance(layer, Conv):
            v = layer.variant
            if v == "sc":
                g, grads[f"{layer.name}.kernel"] = conv2d_vjp(saved, params[f"{layer.name}.kernel"], g)
            elif v in ("gc", "shuffle"):
                spec = _group_spec(layer, N)
                if v == "shuffle":
                    g = channel_unshuffle(g, N)
                local = params[f"{layer.name}.local"]
                if distributed:
                    g, grads[f"{layer.name}.local"], rep = dist_sim.group_backward_distributed(spec, local, saved, g)
                    comm = comm.merged(rep)
                else:
                    g, grads[f"{layer.name}.local"] = group_conv_vjp(saved, spec, local, g)
            else:
                if distributed:
                    _, cluster = saved
                    g, gp, rep = cluster.backward(g)
                    comm = comm.merged(rep)
                else:
                    g, gp = two_level_vjp(saved, _group_spec(layer, N), _two_level_params(params, layer.name), g)
                grads[f"{layer.name}.local"] = gp.local
                grads[f"{layer.name}.coarse_restrict"] = gp.coarse_restrict
                grads[f"{layer.name}.coarse_mix"] = gp.coarse_mix
    return grads, comm


def softmax_cross_entropy(logits, labels):
    """Mean loss, gradient w.r.t. logits, number of correct predictions."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = labels.size
    loss = -logp[np.arange(B), labels].mean()
    probs = np.exp(logp)
    probs[np.arange(B), labels] -= 1.0
    correct = int((logits.argmax(axis=1) == labels).sum())
    return float(loss), probs / B, correct


def evaluate(arch, params, x, y, batch_size=512):
    """Mean loss and accuracy over ``(x, y)``, accumulated in sample order."""
    total, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        logits, _, _ = forward(arch, params, x[start:start + batch_size])
        loss, _, c = softmax_cross_entropy(logits, y[start:start + batch_size])
        total += loss * len(y[start:start + batch_size])
        correct += c
    return total / len(y), correct / len(y)


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    for key, theta in params.items():
        g = grads[key] + weight_decay * theta
        v = velocity.get(key)
        v = g if v is None else momentum * v + g
        velocity[key] = v
        params[key] = theta - lr * v


# -- training --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float
    wall_time: float


@dataclass
class History:
    meta: dict
    initial_loss: float
    records: list = field(default_factory=list)
    params: dict = None
    comm: object = None

    @property
    def final_train_loss(self):
        return self.records[-1].train_loss if self.records else self.initial_loss

    @property
    def final_test_acc(self):
        return self.records[-1].test_acc if self.records else float("nan")

    def train_losses(self):
        return [r.train_loss for r in self.records]


HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "wall_time")


def train(arch, dataset, hyper, distributed=False, init=None, step_callback=None, coarse_init="he"):
    """Mini-batch momentum SGD; returns a :class:`History` carrying the final parameters.

    ``init`` overrides the seeded initialization (e.g. a checkpoint).  ``train_loss``
    per epoch is the sample-weighted mean of the mini-batch losses seen during it.
    """
    _check_trainable(arch)
    if distributed and any(layer.variant not in ("gc", "gc2l") for layer in arch.convs() if layer.convertible):
        raise ConfigurationError("distributed training needs the gc or gc2l variant")
    params = {k: v.copy() for k, v in (init or init_params(arch, hyper.seed, coarse_init)).items()}
    velocity = {}
    initial_loss, _ = evaluate(arch, params, dataset.x_train, dataset.y_train)
    meta = {"arch": arch.name, "variant": arch.variant, "groups": arch.groups,
            "distributed": distributed, "dataset": dataset.provenance,
            "coarse_init": "checkpoint" if init else coarse_init, **asdict(hyper)}
    history = History(meta, initial_loss)
    comm = dist_sim.CommReport(batch=1)
    n = len(dataset.y_train)
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        lr = hyper.lr_at(epoch)
        order = np.random.default_rng([hyper.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            xb, yb = dataset.train_batch(idx, epoch, hyper.seed)
            logits, tape, c_fwd = forward(arch, params, xb, distributed)
            loss, dlogits, c = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", epoch, step)
            grads, c_bwd = backward(arch, params, tape, dlogits, distributed)
            if distributed:
                comm = comm.merged(c_fwd).merged(c_bwd)
            sgd_step(params, grads, velocity, lr, hyper.momentum, hyper.weight_decay)
            if step_callback is not None:
                step_callback(step, params)
            loss_sum += loss * len(idx)
            correct += c
            step += 1
        test_loss, test_acc = evaluate(arch, params, dataset.x_test, dataset.y_test)
        history.records.append(EpochRecord(epoch, loss_sum / n, correct / n, test_loss, test_acc, lr,
                                           time.perf_counter() - t0))
    history.params = params
    history.comm = comm if distributed else None
    return history


def gc2l_from_gc(gc_arch, gc_params):
    """GC-2L architecture and parameters equal to a GC network (coarse parts zero)."""
    arch = gc_arch.with_variant("gc2l", gc_arch.groups)
    params = {k: v.copy() for k, v in gc_params.items()}
    for layer in arch.convs():
        if layer.variant == "gc2l":
            spec = _group_spec(layer, arch.groups)
            params[f"{layer.name}.coarse_restrict"] = np.zeros(spec.restrict_shape())
            params[f"{layer.name}.coarse_mix"] = np.zeros(spec.mix_shape())
    return arch, params


# -- desk-scale comparison task ----------------------------------------------------------
# Small enough that SC, GC and GC-2L (width 16, N=4) each train 30 epochs over three
# seeds in about two minutes on one core, hard enough that the variants separate.

DESK_TASK = {"per_class": 100, "noise": 2.0, "smooth": 1, "hw": 6}
DESK_HYPER = {"lr": 0.02, "epochs": 30}
DESK_COARSE_INIT = "zero"


def desk_dataset(seed):
    return synth_dataset(seed, **DESK_TASK)


def desk_hyper(seed, **overrides):
    return Hyper(**{**DESK_HYPER, "seed": seed, **overrides})


# -- variant comparison ----------------------------------------------------------------

@dataclass
class CompareRow:
    variant: str
    groups: int
    seed: int
    final_train_loss: float
    test_acc: float
    status: str = "ok"


def compare_variants(dataset, hyper, seeds, groups_list, variants=("sc", "gc", "gc2l", "shuffle"),
                     depth=3, width=16, progress=None, coarse_init="he"):
    """Train every (variant, N, seed); failed runs are recorded and skipped in the summary.

    ``dataset`` is a :class:`Dataset` shared by all runs or a callable ``seed -> Dataset``.
    SC does not depend on N, so it is trained once per seed and reported under each N.
    """
    if len(seeds) < 3:
        raise ConfigurationError(f"a comparison needs at least 3 seeds, got {len(seeds)}")
    rows = []
    sc_cache = {}
    for N in groups_list:
        for variant in variants:
            for seed in seeds:
                h = replace_seed(hyper, seed)
                data = dataset(seed) if callable(dataset) else dataset
                try:
                    if variant == "sc" and seed in sc_cache:
                        hist = sc_cache[seed]
                    else:
                        arch = build_toy_arch(depth, width, variant, 1 if variant == "sc" else N,
                                              in_channels=data.x_train.shape[1], classes=data.classes)
                        hist = train(arch, data, h, coarse_init=coarse_init)
                        if variant == "sc":
                            sc_cache[seed] = hist
                    row = CompareRow(variant, N, seed, hist.final_train_loss, hist.final_test_acc)
                except (DivergenceError, ConfigurationError) as exc:
                    row = CompareRow(variant, N, seed, float("nan"), float("nan"), f"failed: {exc}")
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def summarize(rows):
    """Mean final train loss and test accuracy per (variant, N) over successful runs."""
    out = {}
    for row in rows:
        if row.status != "ok":
            continue
        out.setdefault((row.variant, row.groups), []).append(row)
    return {key: (float(np.mean([r.final_train_loss for r in rs])), float(np.mean([r.test_acc for r in rs])),
                  len(rs)) for key, rs in out.items()}


def replace_seed(hyper, seed):
    """Copy of ``hyper`` with a different seed."""
    return Hyper(**{**asdict(hyper), "seed": seed})
