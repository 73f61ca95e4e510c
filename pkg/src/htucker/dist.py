"""Message-passing backend: one worker per tree node, channels on tree edges.

The distribution model mirrors the storage layout: worker ``t`` owns node
``t``'s data of every distributed tensor (so co-distributed tensors keep
same-node data on the same worker), and may talk only to its father and
sons.  The controller thread drives protocols through per-worker command
queues (orchestration, not tensor traffic); all tensor data between
workers flows through the instrumented :class:`InProcessTransport`, which
rejects any send that is not a tree edge.

Every protocol reuses the node kernels of :mod:`htucker.arith`, so results
agree with the serial reference up to the deterministic floating-point
order of the identical contractions.

Timing: each worker accumulates a logical clock -- its own per-thread CPU
time for compute sections, joined with ``max`` on every receive.  The
maximum final clock over all workers is the protocol makespan: the wall
time of the operation in the intended deployment of one dedicated
processor per worker.  The controller wall time (which on a desk machine
mostly measures how few cores it has) is recorded alongside.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, SimpleQueue

import numpy as np

from . import arith
from .arith import TruncationControl
from .format import GeneralizedMatrix, HTensor, HTOperator
from .kernels import sym_eig_desc
from .tree import DimensionTree

_WIRE_MAGIC = b"HTMS"

# protocol ids
P_EVAL, P_INNER, P_ORTH, P_TRUNC = 1, 2, 3, 4

# message tags
ROW_UP, GRAM_UP, RFACTOR_UP, BHAT_DOWN, QTRUNC_UP, SCALAR_DOWN = 1, 2, 3, 4, 5, 6

_RECV_TIMEOUT = 300.0


class NonNeighborSend(RuntimeError):
    """A worker attempted to address a node that is not a tree neighbor."""


class ProtocolError(RuntimeError):
    """Unexpected message tag or sequence; carries the offending node id."""


@dataclass
class Message:
    """One tensor-data message on a tree edge.

    ``clock`` is measurement metadata (sender's logical time) and is not
    part of the wire format.
    """

    protocol: int
    tag: int
    source: int
    seq: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clock: float = 0.0


def encode_message(msg: Message) -> bytes:
    """Wire encoding: 16-byte header, then u32 rank + u32 dims + f64 data.

    Header: magic ``HTMS``, u8 protocol id, u8 tag, u16 reserved, u32
    source node id, u32 sequence number.  All little-endian; bit-exact
    across transports.
    """
    payload = np.ascontiguousarray(msg.payload, dtype="<f8")
    out = bytearray()
    out += _WIRE_MAGIC
    out += struct.pack("<BBHII", msg.protocol, msg.tag, 0, msg.source, msg.seq)
    out += struct.pack("<I", payload.ndim)
    out += struct.pack(f"<{payload.ndim}I", *payload.shape)
    out += payload.tobytes()
    return bytes(out)


def decode_message(blob: bytes) -> Message:
    if blob[:4] != _WIRE_MAGIC:
        raise ProtocolError("bad wire magic")
    protocol, tag, _, source, seq = struct.unpack_from("<BBHII", blob, 4)
    (ndim,) = struct.unpack_from("<I", blob, 16)
    shape = struct.unpack_from(f"<{ndim}I", blob, 20)
    data = np.frombuffer(blob, dtype="<f8", offset=20 + 4 * ndim).reshape(shape)
    return Message(protocol, tag, source, seq, data.copy())


class InProcessTransport:
    """Per-edge FIFO channels between workers of one topology.

    Only the tree edges passed at construction exist; any other (src, dst)
    pair raises :class:`NonNeighborSend`.  Message counts per tag are kept
    for the protocol audits.  With ``wire_mode`` every message is pushed
    through its byte encoding, proving the wire format carries the
    protocols bit-exactly.
    """

    def __init__(self, edges: list[tuple[int, int]], wire_mode: bool = False):
        self._queues: dict[tuple[int, int], SimpleQueue] = {}
        for father, son in edges:
            self._queues[(father, son)] = SimpleQueue()
            self._queues[(son, father)] = SimpleQueue()
        self._seq = {pair: 0 for pair in self._queues}
        self._wire_mode = wire_mode
        self._lock = threading.Lock()
        self._counts: dict[int, int] = {}

    def send(self, src: int, dst: int, msg: Message) -> None:
        queue = self._queues.get((src, dst))
        if queue is None:
            raise NonNeighborSend(f"node {src} may not send to non-neighbor {dst}")
        msg.seq = self._seq[(src, dst)]
        self._seq[(src, dst)] += 1
        with self._lock:
            self._counts[msg.tag] = self._counts.get(msg.tag, 0) + 1
        if self._wire_mode:
            decoded = decode_message(encode_message(msg))
            decoded.clock = msg.clock
            msg = decoded
        queue.put(msg)

    def recv(self, dst: int, src: int, timeout: float = _RECV_TIMEOUT) -> Message:
        queue = self._queues.get((src, dst))
        if queue is None:
            raise NonNeighborSend(f"node {dst} may not receive from non-neighbor {src}")
        try:
            return queue.get(timeout=timeout)
        except Empty:
            raise ProtocolError(f"node {dst} timed out waiting for node {src}") from None

    def reset_counters(self) -> None:
        with self._lock:
            self._counts = {}

    def message_count(self, tag: int | None = None) -> int:
        with self._lock:
            if tag is None:
                return sum(self._counts.values())
            return self._counts.get(tag, 0)


@dataclass
class Timing:
    """Measurements of one protocol run."""

    wall_seconds: float
    makespan_seconds: float
    messages: int


class _Worker(threading.Thread):
    """Owns one tree node's data; executes protocol steps on command."""

    def __init__(self, topo: "Topology", node):
        super().__init__(name=f"ht-worker-{node.index}", daemon=True)
        self.topo = topo
        self.node = node
        self.commands: SimpleQueue = SimpleQueue()
        self.store: dict[int, object] = {}
        self.clock = 0.0

    # -- plumbing ---------------------------------------------------------

    def run(self) -> None:
        while True:
            cmd = self.commands.get()
            if cmd[0] == "stop":
                return
            self.clock = 0.0
            try:
                value = getattr(self, "_cmd_" + cmd[0])(*cmd[1:])
                self.topo.results.put(("done", self.node.index, self.clock, value))
            except Exception as exc:  # noqa: BLE001 - forwarded to controller
                self.topo.results.put(("error", self.node.index, exc))

    def _send(self, dst: int, protocol: int, tag: int, payload: np.ndarray) -> None:
        self.topo.transport.send(
            self.node.index, dst,
            Message(protocol, tag, self.node.index, payload=payload, clock=self.clock),
        )

    def _recv(self, src: int, tag: int) -> Message:
        msg = self.topo.transport.recv(self.node.index, src)
        if msg.tag != tag:
            raise ProtocolError(
                f"node {self.node.index}: expected tag {tag} from {src}, got {msg.tag}"
            )
        self.clock = max(self.clock, msg.clock)
        return msg

    def _compute(self):
        return _ComputeSection(self)

    # -- data placement ----------------------------------------------------

    def _cmd_scatter(self, handle: int, data) -> None:
        self.store[handle] = data

    def _cmd_gather(self, handle: int):
        return self.store[handle]

    def _cmd_free(self, handle: int) -> None:
        self.store.pop(handle, None)

    # -- protocols ----------------------------------------------------------

    def _cmd_eval(self, handle: int, index: tuple[int, ...]):
        node = self.node
        if node.is_leaf:
            with self._compute():
                row = self.store[handle][index[node.dim - 1], :]
            self._send(node.father, P_EVAL, ROW_UP, row)
            return None
        r1 = self._recv(node.sons[0], ROW_UP).payload
        r2 = self._recv(node.sons[1], ROW_UP).payload
        if node.is_root:
            with self._compute():
                value = arith.eval_root(self.store[handle], r1, r2)
            return value
        with self._compute():
            row = arith.eval_inner_row(self.store[handle], r1, r2)
        self._send(node.father, P_EVAL, ROW_UP, row)
        return None

    def _cmd_inner(self, ha: int, hc: int):
        node = self.node
        if node.is_leaf:
            with self._compute():
                phi = arith.phi_leaf(self.store[ha], self.store[hc])
            self._send(node.father, P_INNER, GRAM_UP, phi)
            return None
        p1 = self._recv(node.sons[0], GRAM_UP).payload
        p2 = self._recv(node.sons[1], GRAM_UP).payload
        if node.is_root:
            with self._compute():
                value = arith.phi_root(self.store[ha], self.store[hc], p1, p2)
            return value
        with self._compute():
            phi = arith.phi_inner(self.store[ha], self.store[hc], p1, p2)
        self._send(node.father, P_INNER, GRAM_UP, phi)
        return None

    def _cmd_orth(self, handle: int) -> None:
        node = self.node
        if node.is_leaf:
            with self._compute():
                q, r = arith.orth_leaf(self.store[handle])
                self.store[handle] = q
            self._send(node.father, P_ORTH, RFACTOR_UP, r)
            return
        r1 = self._recv(node.sons[0], RFACTOR_UP).payload
        r2 = self._recv(node.sons[1], RFACTOR_UP).payload
        if node.is_root:
            with self._compute():
                self.store[handle] = arith.orth_root(self.store[handle], r1, r2)
            return
        with self._compute():
            core, r = arith.orth_inner(self.store[handle], r1, r2)
            self.store[handle] = core
        self._send(node.father, P_ORTH, RFACTOR_UP, r)

    def _cmd_truncate(self, handle: int, ctl: TruncationControl, non_root_count: int) -> None:
        node = self.node
        if node.is_root:
            with self._compute():
                root = self.store[handle]
                bh1, bh2 = arith.gram_children(root[None, :, :], np.ones((1, 1)))
            self._send(node.sons[0], P_TRUNC, BHAT_DOWN, bh1)
            self._send(node.sons[1], P_TRUNC, BHAT_DOWN, bh2)
            q1 = self._recv(node.sons[0], QTRUNC_UP).payload
            q2 = self._recv(node.sons[1], QTRUNC_UP).payload
            with self._compute():
                self.store[handle] = q1.T @ root @ q2
            return
        bhat = self._recv(node.father, BHAT_DOWN).payload
        if node.is_leaf:
            with self._compute():
                q, lam = sym_eig_desc(bhat)
                r = arith.select_rank(lam, ctl, node.index, non_root_count)
                q = q[:, :r]
                self.store[handle] = self.store[handle] @ q
            self._send(node.father, P_TRUNC, QTRUNC_UP, q)
            return
        with self._compute():
            core = self.store[handle]
            bh1, bh2 = arith.gram_children(core, bhat)
        self._send(node.sons[0], P_TRUNC, BHAT_DOWN, bh1)
        self._send(node.sons[1], P_TRUNC, BHAT_DOWN, bh2)
        with self._compute():
            q, lam = sym_eig_desc(bhat)
            r = arith.select_rank(lam, ctl, node.index, non_root_count)
            q = q[:, :r]
        q1 = self._recv(node.sons[0], QTRUNC_UP).payload
        q2 = self._recv(node.sons[1], QTRUNC_UP).payload
        with self._compute():
            self.store[handle] = arith.truncate_inner(core, q, q1, q2)
        self._send(node.father, P_TRUNC, QTRUNC_UP, q)

    def _cmd_add(self, ha: int, hc: int, out: int) -> None:
        node = self.node
        with self._compute():
            a, c = self.store[ha], self.store[hc]
            if node.is_leaf:
                self.store[out] = arith.add_leaf(a, c)
            elif node.is_root:
                self.store[out] = arith.add_root(a, c)
            else:
                self.store[out] = arith.add_inner(a, c)

    def _cmd_apply(self, hop: int, ha: int, out: int) -> None:
        node = self.node
        with self._compute():
            op, a = self.store[hop], self.store[ha]
            if node.is_leaf:
                self.store[out] = arith.apply_leaf(op, a)
            elif node.is_root:
                self.store[out] = arith.apply_root(op, a)
            else:
                self.store[out] = arith.apply_inner(op, a)

    def _cmd_scale(self, handle: int, out: int, alpha: float) -> None:
        with self._compute():
            data = self.store[handle]
            if self.node.is_root:
                data = alpha * data
            self.store[out] = data

    def _cmd_leafmap(self, handle: int, out: int, dim: int, matrix) -> None:
        # single-leaf frame replacement (grid transfers); no communication
        with self._compute():
            data = self.store[handle]
            if self.node.is_leaf and self.node.dim == dim:
                data = matrix @ data
            self.store[out] = data


class _ComputeSection:
    """Times one compute block with per-thread CPU time; optionally gated
    by the HT_THREADS concurrency semaphore."""

    def __init__(self, worker: _Worker):
        self.worker = worker

    def __enter__(self):
        sem = self.worker.topo.semaphore
        if sem is not None:
            sem.acquire()
        self.start = time.thread_time()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.worker.clock += time.thread_time() - self.start
        sem = self.worker.topo.semaphore
        if sem is not None:
            sem.release()
        return False


class Topology:
    """A running worker topology for one dimension tree.

    Use :func:`spawn_topology`; close with :meth:`shutdown` or as a
    context manager.  No fault tolerance: a failing worker aborts the
    operation and poisons the topology.
    """

    def __init__(self, tree: DimensionTree, transport: InProcessTransport | None = None):
        self.tree = tree
        self.transport = transport or InProcessTransport(tree.edges())
        self.results: SimpleQueue = SimpleQueue()
        cap = int(os.environ.get("HT_THREADS", "0") or "0")
        self.semaphore = threading.BoundedSemaphore(cap) if cap > 0 else None
        self.workers = [_Worker(self, node) for node in tree.nodes]
        self._next_handle = 0
        self._broken = False
        self.last_timing: Timing | None = None
        for w in self.workers:
            w.start()

    # -- controller plumbing ------------------------------------------------

    def _new_handle(self) -> int:
        self._next_handle += 1
        return self._next_handle

    def _run(self, command: tuple, want_values: bool = False):
        if self._broken:
            raise RuntimeError("topology is poisoned by an earlier worker failure")
        self.transport.reset_counters()
        start = time.perf_counter()
        for w in self.workers:
            w.commands.put(command)
        values: dict[int, object] = {}
        makespan = 0.0
        for _ in self.workers:
            item = self.results.get()
            if item[0] == "error":
                self._broken = True
                raise RuntimeError(f"worker {item[1]} failed") from item[2]
            _, node_id, clock, value = item
            makespan = max(makespan, clock)
            if value is not None:
                values[node_id] = value
        wall = time.perf_counter() - start
        self.last_timing = Timing(wall, makespan, self.transport.message_count())
        return values if want_values else None

    def shutdown(self) -> None:
        for w in self.workers:
            w.commands.put(("stop",))
        for w in self.workers:
            w.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.shutdown()
        return False


@dataclass
class DistTensor:
    """Handle to one tensor distributed over a topology."""

    topology: Topology
    handle: int
    orthogonal: bool = False

    @property
    def tree(self) -> DimensionTree:
        return self.topology.tree

    def free(self) -> None:
        self.topology._run(("free", self.handle))


@dataclass
class DistOperator:
    """Handle to one operator distributed over a topology."""

    topology: Topology
    handle: int


def spawn_topology(tree: DimensionTree,
                   transport: InProcessTransport | None = None) -> Topology:
    """Start ``2 d - 1`` workers wired along the tree edges."""
    return Topology(tree, transport)


def scatter(topology: Topology, tensor: HTensor) -> DistTensor:
    """Place node ``t``'s data on worker ``t``."""
    handle = topology._new_handle()
    for w in topology.workers:
        node = w.node
        if node.is_leaf:
            data = tensor.leaves[node.index]
        elif node.is_root:
            data = tensor.root_matrix
        else:
            data = tensor.transfer[node.index]
        w.commands.put(("scatter", handle, data))
    for _ in topology.workers:
        topology.results.get()
    return DistTensor(topology, handle, orthogonal=tensor.orthogonal)


def scatter_operator(topology: Topology, op: HTOperator) -> DistOperator:
    handle = topology._new_handle()
    for w in topology.workers:
        node = w.node
        if node.is_leaf:
            data = op.leaves[node.index]
        elif node.is_root:
            data = op.root_matrix
        else:
            data = op.transfer[node.index]
        w.commands.put(("scatter", handle, data))
    for _ in topology.workers:
        topology.results.get()
    return DistOperator(topology, handle)


def gather(handle: DistTensor) -> HTensor:
    """Collect a distributed tensor back into one :class:`HTensor`."""
    topo = handle.topology
    values = topo._run(("gather", handle.handle), want_values=True)
    tree = topo.tree
    leaves = {n.index: values[n.index] for n in tree.leaves}
    transfer = {n.index: values[n.index] for n in tree.inner_nodes}
    return HTensor(tree, leaves, transfer, values[0], orthogonal=handle.orthogonal)


def dist_evaluate(handle: DistTensor, index) -> float:
    """Distributed entry evaluation: leaf rows flow up to the root."""
    index = tuple(int(i) for i in index)
    values = handle.topology._run(("eval", handle.handle, index), want_values=True)
    return values[0]


def dist_inner_product(ha: DistTensor, hc: DistTensor) -> float:
    """Distributed inner product: one Gram message per non-root node."""
    if ha.topology is not hc.topology:
        raise ValueError("tensors are not co-distributed on one topology")
    values = ha.topology._run(("inner", ha.handle, hc.handle), want_values=True)
    return values[0]


def dist_norm(ha: DistTensor) -> float:
    return float(np.sqrt(max(0.0, dist_inner_product(ha, ha))))


def dist_orthogonalize(handle: DistTensor) -> None:
    """In-place distributed orthogonalization (R factors flow upward)."""
    handle.topology._run(("orth", handle.handle))
    handle.orthogonal = True


def dist_truncate(handle: DistTensor, ctl: TruncationControl) -> None:
    """In-place distributed truncation.

    Orthogonalizes first if needed, then runs one downward reduced-Gram
    wave and one upward truncated-eigenvector wave.
    """
    if not handle.orthogonal:
        dist_orthogonalize(handle)
    non_root_count = len(handle.tree.nodes) - 1
    handle.topology._run(("truncate", handle.handle, ctl, non_root_count))
    handle.orthogonal = False


def dist_add(ha: DistTensor, hc: DistTensor) -> DistTensor:
    """Node-local block concatenation; exchanges zero messages."""
    if ha.topology is not hc.topology:
        raise ValueError("tensors are not co-distributed on one topology")
    topo = ha.topology
    out = topo._new_handle()
    topo._run(("add", ha.handle, hc.handle, out))
    return DistTensor(topo, out)


def dist_apply_operator(hop: DistOperator, ha: DistTensor) -> DistTensor:
    """Node-local Kronecker products; exchanges zero messages."""
    if hop.topology is not ha.topology:
        raise ValueError("operator and tensor are not co-distributed")
    topo = ha.topology
    out = topo._new_handle()
    topo._run(("apply", hop.handle, ha.handle, out))
    return DistTensor(topo, out)


def dist_scale(ha: DistTensor, alpha: float) -> DistTensor:
    topo = ha.topology
    out = topo._new_handle()
    topo._run(("scale", ha.handle, out, float(alpha)))
    return DistTensor(topo, out, orthogonal=ha.orthogonal)


def dist_leaf_map(ha: DistTensor, dim: int, matrix: np.ndarray) -> DistTensor:
    """Replace one leaf frame by ``matrix @ frame`` (grid transfers)."""
    topo = ha.topology
    out = topo._new_handle()
    topo._run(("leafmap", ha.handle, out, int(dim), matrix))
    return DistTensor(topo, out)
