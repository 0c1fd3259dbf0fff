"""Simulated N-worker execution of the two-level group convolution.

Worker ``k`` owns group ``k``: the combined kernel ``[A_k; R_0|V_k]`` of shape
``(m/N + 1, n/N, d, d)`` and the coarse mixing matrix ``S_k``.  A forward pass
runs four barrier-separated phases:

1. ``local``     one combined convolution per worker -> m/N local channels + 1 representative
2. ``gather``    all-gather of representatives, N(N-1) point-to-point messages
3. ``coarse``    worker k applies ``S_k`` to the gathered N channels, no communication
4. ``assemble``  output group k = local part + coarse part, concatenated in group order

The backward pass mirrors it; the adjoint of the all-gather is a reduce-scatter
with the same message count.  Every message goes through a :class:`Router` that
records a trace and refuses parameter payloads.
"""

import threading
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import conv1x1_vjp, conv2d_vjp
from .conv_ops import TwoLevelParams
from .errors import ConfigurationError, ProtocolError
from .tensor import as_batch, conv1x1, conv2d, split_groups

REPRESENTATIVE = "representative_channel"
PARAMETER = "parameter"


@dataclass
class WorkerShard:
    group_id: int
    combined_kernel: np.ndarray   # (m/N + 1, n/N, d, d)
    coarse_mix: np.ndarray        # (m/N, N)

    @property
    def local_kernel(self):
        return self.combined_kernel[:-1]

    @property
    def restrict_kernel(self):
        return self.combined_kernel[-1:]

    @property
    def param_count(self):
        return self.combined_kernel.size + self.coarse_mix.size


@dataclass(frozen=True)
class Message:
    phase: str
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray

    @property
    def scalars(self):
        return int(self.payload.size)

    @property
    def byte_size(self):
        return 8 * self.scalars

    def log_line(self):
        return f"{self.phase}\t{self.sender}\t{self.receiver}\t{self.kind}\t{self.scalars}"


@dataclass
class CommReport:
    messages: int = 0
    activation_scalars: int = 0
    parameter_scalars: int = 0
    batch: int = 1
    phases: dict = field(default_factory=dict)

    @property
    def activation_scalars_per_sample(self):
        return self.activation_scalars // self.batch

    def merged(self, other):
        phases = {k: dict(v) for k, v in self.phases.items()}
        for name, stats in other.phases.items():
            cur = phases.setdefault(name, {"messages": 0, "scalars": 0})
            cur["messages"] += stats["messages"]
            cur["scalars"] += stats["scalars"]
        return CommReport(
            self.messages + other.messages,
            self.activation_scalars + other.activation_scalars,
            self.parameter_scalars + other.parameter_scalars,
            self.batch,
            phases,
        )


class Router:
    """In-process message fabric: FIFO per (sender, receiver), with a recorded trace."""

    def __init__(self):
        self._queues = defaultdict(deque)
        self._lock = threading.Lock()
        self.trace = []

    def send(self, msg):
        if msg.kind == PARAMETER:
            raise ProtocolError(f"worker {msg.sender} tried to send parameters to {msg.receiver}")
        with self._lock:
            self._queues[msg.sender, msg.receiver].append(msg)
            self.trace.append(msg)

    def receive(self, sender, receiver, phase):
        with self._lock:
            queue = self._queues[sender, receiver]
            if not queue or queue[0].phase != phase:
                raise ProtocolError(f"worker {receiver} expected a {phase} message from {sender}, none queued")
            return queue.popleft()

    def report(self, batch=1):
        rep = CommReport(batch=batch)
        for msg in self.trace:
            assert msg.kind != PARAMETER
            rep.messages += 1
            rep.activation_scalars += msg.scalars
            stats = rep.phases.setdefault(msg.phase, {"messages": 0, "scalars": 0})
            stats["messages"] += 1
            stats["scalars"] += msg.scalars
        return rep


# -- sharding ---------------------------------------------------------------------

def shard_params(spec, params):
    params.validate(spec)
    if spec.d0 != spec.d:
        raise ConfigurationError(
            f"combined local/restriction kernel needs d0 == d (got d={spec.d}, d0={spec.d0})"
        )
    return [
        WorkerShard(k, np.concatenate([params.local[k], params.coarse_restrict[k]], axis=0),
                    params.coarse_mix[k].copy())
        for k in range(spec.groups)
    ]


def unshard_params(shards):
    shards = sorted(shards, key=lambda s: s.group_id)
    return TwoLevelParams(
        np.stack([s.local_kernel for s in shards]),
        np.stack([s.restrict_kernel for s in shards]),
        np.stack([s.coarse_mix for s in shards]),
    )


def shard_param_count(spec):
    """Parameters held by one worker: d^2 (m/N)(n/N) + d0^2 (n/N) + m."""
    return spec.d ** 2 * spec.m_local * spec.n_local + spec.d0 ** 2 * spec.n_local + spec.m


def worker_local_forward(shard, x_k):
    """One combined convolution, split into (local output, representative channel)."""
    x4, batched = as_batch(x_k)
    if x4.shape[1] != shard.combined_kernel.shape[1]:
        raise ConfigurationError(
            f"worker {shard.group_id} expects {shard.combined_kernel.shape[1]} channels, got {x4.shape[1]}"
        )
    out = conv2d(x_k, shard.combined_kernel)
    if batched:
        return out[:, :-1], out[:, -1:]
    return out[:-1], out[-1:]


# -- workers ----------------------------------------------------------------------

class Worker:
    def __init__(self, shard, groups):
        self.shard = shard
        self.k = shard.group_id
        self.groups = groups
        self.reset()

    def reset(self):
        self.x = None
        self.local_out = None
        self.representative = None
        self.gathered = None
        self.coarse_out = None
        # backward state
        self.upstream = None
        self.d_coarse_in = None
        self.d_representative = None
        self.grads = None
        self.d_x = None

    # forward phases
    def local_forward(self, x_k):
        self.x = x_k
        self.local_out, self.representative = worker_local_forward(self.shard, x_k)

    def send_representative(self, router):
        if self.representative is None:
            raise ProtocolError(f"worker {self.k} has no representative channel to send")
        for j in range(self.groups):
            if j != self.k:
                router.send(Message("gather", self.k, j, REPRESENTATIVE, self.representative))

    def collect_representatives(self, router):
        parts = []
        for j in range(self.groups):
            if j == self.k:
                parts.append(self.representative)
            else:
                parts.append(router.receive(j, self.k, "gather").payload)
        self.gathered = np.concatenate(parts, axis=-3)

    def coarse_apply(self):
        if self.gathered is None:
            raise ProtocolError(f"worker {self.k}: coarse apply before the gather completed")
        self.coarse_out = conv1x1(self.gathered, self.shard.coarse_mix)

    def output(self):
        return self.local_out + self.coarse_out

    # backward phases
    def coarse_backward(self, g_k):
        if self.gathered is None:
            raise ProtocolError(f"worker {self.k}: backward before forward")
        self.upstream = g_k
        self.d_coarse_in, d_mix = conv1x1_vjp(self.gathered, self.shard.coarse_mix, g_k)
        self.grads = {"coarse_mix": d_mix}

    def send_coarse_grads(self, router):
        for j in range(self.groups):
            if j != self.k:
                router.send(Message("reduce_scatter", self.k, j, REPRESENTATIVE,
                                    self.d_coarse_in[..., j:j + 1, :, :]))

    def reduce_coarse_grads(self, router):
        total = None
        for j in range(self.groups):   # fixed group-index order
            if j == self.k:
                part = self.d_coarse_in[..., j:j + 1, :, :]
            else:
                part = router.receive(j, self.k, "reduce_scatter").payload
            total = part if total is None else total + part
        self.d_representative = total

    def local_backward(self):
        g = np.concatenate([self.upstream, self.d_representative], axis=-3)
        self.d_x, d_combined = conv2d_vjp(self.x, self.shard.combined_kernel, g)
        self.grads["combined"] = d_combined


class Cluster:
    """N simulated workers plus a router.

    ``order`` fixes the stepping order of workers inside each phase (a
    permutation of group ids); ``threads=True`` runs each phase on a thread
    pool instead.  Results do not depend on either choice.
    """

    def __init__(self, spec, params, order=None, threads=False):
        self.spec = spec
        self.shards = shard_params(spec, params)
        self.workers = [Worker(s, spec.groups) for s in self.shards]
        self.order = list(range(spec.groups)) if order is None else list(order)
        if sorted(self.order) != list(range(spec.groups)):
            raise ConfigurationError(f"order {order} is not a permutation of the group ids")
        self.threads = threads
        self.router = Router()            # forward traffic of the latest pass
        self.backward_router = Router()   # backward traffic of the latest pass

    def _phase(self, fn):
        if self.threads and len(self.workers) > 1:
            with ThreadPoolExecutor(max_workers=len(self.workers)) as pool:
                list(pool.map(fn, [self.workers[k] for k in self.order]))
        else:
            for k in self.order:
                fn(self.workers[k])

    def forward(self, x):
        x4, batched = as_batch(x)
        if x4.shape[1] != self.spec.n:
            raise ConfigurationError(f"input has {x4.shape[1]} channels, expected {self.spec.n}")
        self.router = Router()
        parts = split_groups(x, self.spec.groups)
        for w in self.workers:
            w.reset()
        self._phase(lambda w: w.local_forward(parts[w.k]))
        gather_representatives(self.workers, self.router, self._phase)
        coarse_apply_distributed(self.workers, self._phase)
        y = np.concatenate([w.output() for w in self.workers], axis=-3)
        return y, self.router.report(batch=x4.shape[0])

    def backward(self, upstream):
        g4, _ = as_batch(upstream)
        router = self.backward_router = Router()
        gs = split_groups(upstream, self.spec.groups)
        self._phase(lambda w: w.coarse_backward(gs[w.k]))
        self._phase(lambda w: w.send_coarse_grads(router))
        self._phase(lambda w: w.reduce_coarse_grads(router))
        self._phase(lambda w: w.local_backward())
        dx = np.concatenate([w.d_x for w in self.workers], axis=-3)
        m_local = self.spec.m_local
        grads = TwoLevelParams(
            np.stack([w.grads["combined"][:m_local] for w in self.workers]),
            np.stack([w.grads["combined"][m_local:] for w in self.workers]),
            np.stack([w.grads["coarse_mix"] for w in self.workers]),
        )
        return dx, grads, router.report(batch=g4.shape[0])


def gather_representatives(workers, router, phase=None):
    """All-gather: afterwards every worker holds all N representatives in group order."""
    phase = phase or (lambda fn: [fn(w) for w in workers])
    missing = [w.k for w in workers if w.representative is None]
    if missing:
        raise ProtocolError(f"workers {missing} have not produced a representative channel")
    phase(lambda w: w.send_representative(router))
    phase(lambda w: w.collect_representatives(router))


def coarse_apply_distributed(workers, phase=None):
    phase = phase or (lambda fn: [fn(w) for w in workers])
    phase(lambda w: w.coarse_apply())
    return [w.coarse_out for w in workers]


def forward_distributed(spec, params, x, order=None, threads=False):
    """Run the two-level convolution on simulated workers; returns ``(y, CommReport)``."""
    cluster = Cluster(spec, params, order=order, threads=threads)
    y, report = cluster.forward(x)
    return y, report


def backward_distributed(spec, params, x, upstream, order=None, threads=False):
    """Forward then backward on simulated workers; returns ``(dx, grads, CommReport)``."""
    cluster = Cluster(spec, params, order=order, threads=threads)
    _, fwd = cluster.forward(x)
    dx, grads, bwd = cluster.backward(upstream)
    return dx, grads, fwd.merged(bwd)


def forward_trace(spec, params, x, **kwargs):
    cluster = Cluster(spec, params, **kwargs)
    cluster.forward(x)
    return [m.log_line() for m in cluster.router.trace]


def group_forward_distributed(spec, local, x):
    """Group convolution on simulated workers: each worker convolves its own slice, no messages."""
    parts = split_groups(x, spec.groups)
    y = np.concatenate([conv2d(parts[k], local[k]) for k in range(spec.groups)], axis=-3)
    return y, CommReport(batch=as_batch(x)[0].shape[0])


def group_backward_distributed(spec, local, x, upstream):
    parts = split_groups(x, spec.groups)
    gs = split_groups(upstream, spec.groups)
    pairs = [conv2d_vjp(parts[k], local[k], gs[k]) for k in range(spec.groups)]
    dx = np.concatenate([p[0] for p in pairs], axis=-3)
    return dx, np.stack([p[1] for p in pairs]), CommReport(batch=as_batch(x)[0].shape[0])
