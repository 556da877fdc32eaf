"""Master-worker execution of the ALS/GD drivers over row-sharded
compressed transposes.

Protocol (all messages framed by a 16-byte little-endian header: magic
"DFTO", version u16, kind u16, iteration u32, payload length u32):

  Setup            master -> worker, once: worker id and its per-mode COO
                   slices plus output-row ranges.
  FactorBroadcast  master -> worker: full factor state.  mode 1..3 requests
                   that mode's ShardResult; mode 0 requests a
                   PartialObjective (the data inner product over the
                   worker's entries) at the broadcast factors, tagged with a
                   line-search trial index.
  FactorUpdate     master -> worker: one re-solved factor (ALS).  For modes
                   1 and 2 it doubles as the request for the next mode's
                   shard; mode 3 is a pure sync.
  ShardResult      worker -> master: the worker's output rows of N.
  PartialObjective worker -> master: sum over owned entries of x * xhat.
  StepSize         master -> worker: accepted GD step, informational.
  Shutdown         master -> worker: end of run.

Per-worker output rows are whole rows of N (partitions cut only on
output-row boundaries), so the master assembles N by concatenation in
worker order and the result is bit-identical to the serial kernels.
Workers validate that iteration tags never decrease; any mismatch or
transport failure aborts the run (no fault tolerance).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .mttkrp import FlopCounter, MttkrpPlan, factor_pair, mttkrp_dfacto, plan_from_parts
from .solvers import (
    FactorModel,
    IterationStats,
    ObjectiveParts,
    SolverAbort,
    SolverConfig,
    apply_step,
    backtracking_line_search,
    fit_value,
    init_factors,
    model_norm2,
    model_values_at,
    normalize_columns,
    objective_value,
    relative_change,
    solve_normal_eq,
)
from .sparse_core import SparseTensorCoo, build_views, gram_hadamard, transpose_compress

MAGIC = b"DFTO"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")

KIND_SETUP = 0
KIND_FACTOR_BROADCAST = 1
KIND_SHARD_RESULT = 2
KIND_FACTOR_UPDATE = 3
KIND_PARTIAL_OBJECTIVE = 4
KIND_STEP_SIZE = 5
KIND_SHUTDOWN = 6


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# messages

@dataclass
class Setup:
    worker_id: int
    n_workers: int
    dims: tuple[int, int, int]
    # per mode 1..3: (out_lo, out_hi, entries as (n, 4) float64 [i j k value])
    blocks: dict
    iteration: int = 0
    kind: int = KIND_SETUP


@dataclass
class FactorBroadcast:
    iteration: int
    mode: int  # 1..3: shard request; 0: partial-objective request
    trial: int
    weights: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    kind: int = KIND_FACTOR_BROADCAST


@dataclass
class ShardResult:
    iteration: int
    mode: int
    row_lo: int
    row_hi: int
    rows: np.ndarray
    kind: int = KIND_SHARD_RESULT


@dataclass
class FactorUpdate:
    iteration: int
    mode: int
    weights: np.ndarray
    factor: np.ndarray
    kind: int = KIND_FACTOR_UPDATE


@dataclass
class PartialObjective:
    iteration: int
    trial: int
    value: float
    mode: int = 0
    kind: int = KIND_PARTIAL_OBJECTIVE


@dataclass
class StepSize:
    iteration: int
    alpha: float
    mode: int = 0
    kind: int = KIND_STEP_SIZE


@dataclass
class Shutdown:
    iteration: int
    mode: int = 0
    kind: int = KIND_SHUTDOWN


def _pack_matrix(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.tobytes()


def _unpack_matrix(buf: memoryview, offset: int):
    rows, cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    n = rows * cols * 8
    arr = np.frombuffer(buf[offset:offset + n], dtype="<f8").reshape(rows, cols).copy()
    return arr, offset + n


def encode_message(msg) -> bytes:
    if isinstance(msg, Setup):
        payload = struct.pack("<II", msg.worker_id, msg.n_workers)
        payload += struct.pack("<QQQ", *msg.dims)
        for mode in (1, 2, 3):
            lo, hi, entries = msg.blocks[mode]
            payload += struct.pack("<IQQ", mode, lo, hi) + _pack_matrix(entries)
    elif isinstance(msg, FactorBroadcast):
        payload = struct.pack("<II", msg.mode, msg.trial)
        payload += _pack_matrix(msg.weights)
        payload += _pack_matrix(msg.a) + _pack_matrix(msg.b) + _pack_matrix(msg.c)
    elif isinstance(msg, ShardResult):
        payload = struct.pack("<I", msg.mode) + struct.pack("<QQ", msg.row_lo, msg.row_hi)
        payload += _pack_matrix(msg.rows)
    elif isinstance(msg, FactorUpdate):
        payload = struct.pack("<I", msg.mode) + _pack_matrix(msg.weights)
        payload += _pack_matrix(msg.factor)
    elif isinstance(msg, PartialObjective):
        payload = struct.pack("<IId", msg.mode, msg.trial, msg.value)
    elif isinstance(msg, StepSize):
        payload = struct.pack("<Id", msg.mode, msg.alpha)
    elif isinstance(msg, Shutdown):
        payload = struct.pack("<I", msg.mode)
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    header = _HEADER.pack(MAGIC, VERSION, msg.kind, msg.iteration, len(payload))
    return header + payload


def decode_message(data: bytes):
    if len(data) < _HEADER.size:
        raise ProtocolError("short message")
    magic, version, kind, iteration, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    buf = memoryview(data)[_HEADER.size:]
    if len(buf) != length:
        raise ProtocolError(f"payload length mismatch: {len(buf)} != {length}")
    if kind == KIND_SETUP:
        worker_id, n_workers = struct.unpack_from("<II", buf, 0)
        dims = struct.unpack_from("<QQQ", buf, 8)
        offset = 32
        blocks = {}
        for _ in range(3):
            mode, lo, hi = struct.unpack_from("<IQQ", buf, offset)
            offset += 20
            entries, offset = _unpack_matrix(buf, offset)
            blocks[mode] = (lo, hi, entries)
        return Setup(worker_id, n_workers, tuple(int(d) for d in dims), blocks, iteration)
    if kind == KIND_FACTOR_BROADCAST:
        mode, trial = struct.unpack_from("<II", buf, 0)
        offset = 8
        weights, offset = _unpack_matrix(buf, offset)
        a, offset = _unpack_matrix(buf, offset)
        b, offset = _unpack_matrix(buf, offset)
        c, offset = _unpack_matrix(buf, offset)
        return FactorBroadcast(iteration, mode, trial, weights.ravel(), a, b, c)
    if kind == KIND_SHARD_RESULT:
        (mode,) = struct.unpack_from("<I", buf, 0)
        lo, hi = struct.unpack_from("<QQ", buf, 4)
        rows, _ = _unpack_matrix(buf, 20)
        return ShardResult(iteration, mode, lo, hi, rows)
    if kind == KIND_FACTOR_UPDATE:
        (mode,) = struct.unpack_from("<I", buf, 0)
        weights, offset = _unpack_matrix(buf, 4)
        factor, _ = _unpack_matrix(buf, offset)
        return FactorUpdate(iteration, mode, weights.ravel(), factor)
    if kind == KIND_PARTIAL_OBJECTIVE:
        mode, trial, value = struct.unpack_from("<IId", buf, 0)
        return PartialObjective(iteration, trial, value, mode)
    if kind == KIND_STEP_SIZE:
        mode, alpha = struct.unpack_from("<Id", buf, 0)
        return StepSize(iteration, alpha, mode)
    if kind == KIND_SHUTDOWN:
        return Shutdown(iteration)
    raise ProtocolError(f"unknown message kind {kind}")


# ---------------------------------------------------------------------------
# transports

class QueueTransport:
    """In-process duplex channel; messages still pass through the codec so
    both bindings exercise identical serialization."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    @classmethod
    def pair(cls):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, msg) -> None:
        self._outbox.put(encode_message(msg))

    def recv(self):
        data = self._inbox.get()
        if data is None:
            raise ProtocolError("channel closed")
        return decode_message(data)

    def close(self) -> None:
        self._outbox.put(None)


class TcpTransport:
    """Length-prefixed TCP binding (the header carries the payload length)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, msg) -> None:
        self._sock.sendall(encode_message(msg))

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self._sock.recv(min(n, 1 << 20))
            if not chunk:
                raise ProtocolError("connection closed mid-message")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self):
        header = self._read_exact(_HEADER.size)
        _, _, _, _, length = _HEADER.unpack(header)
        return decode_message(header + self._read_exact(length))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# ---------------------------------------------------------------------------
# partitioning

@dataclass(frozen=True)
class ModeShare:
    """One worker's slice for one mode: compressed-transpose slot range,
    the rowmap slice, and the owned output rows of N."""

    slot_lo: int
    slot_hi: int
    rowmap: np.ndarray
    out_lo: int
    out_hi: int


@dataclass(frozen=True)
class Partition:
    worker_id: int
    shares: dict  # mode -> ModeShare


def partition_rows(views, workers: int) -> list[Partition]:
    """Contiguous row shards of each compressed transpose, balanced by stored
    entries via greedy prefix splitting of the cumulative counts.

    Cuts happen only on output-row boundaries of N so that shard results
    merge by concatenation; empty shards are allowed when workers exceed
    rows.  Deterministic given (views, workers).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    per_mode_bounds = {}
    for mode in (1, 2, 3):
        weights = np.diff(views.flattening(mode).rowptr)  # entries per out row
        cum = np.cumsum(weights)
        total = int(cum[-1]) if cum.size else 0
        thresholds = [total * (w + 1) / workers for w in range(workers - 1)]
        cuts = np.searchsorted(cum, thresholds, side="left") + 1
        bounds = np.concatenate(([0], np.minimum(cuts, weights.size), [weights.size]))
        bounds = np.maximum.accumulate(bounds)
        per_mode_bounds[mode] = bounds
    parts = []
    for w in range(workers):
        shares = {}
        for mode in (1, 2, 3):
            paired = {1: 2, 2: 3, 3: 1}[mode]
            rowmap = views.rowmap(paired)
            out_cols = {1: views.dims[2], 2: views.dims[0], 3: views.dims[1]}[mode]
            out_of_slot = rowmap // out_cols
            lo = int(per_mode_bounds[mode][w])
            hi = int(per_mode_bounds[mode][w + 1])
            slot_lo, slot_hi = np.searchsorted(out_of_slot, [lo, hi], side="left")
            shares[mode] = ModeShare(int(slot_lo), int(slot_hi),
                                     rowmap[slot_lo:slot_hi], lo, hi)
        parts.append(Partition(w, shares))
    return parts


def _mode_out_index(t: SparseTensorCoo, mode: int) -> np.ndarray:
    return (t.ii, t.jj, t.kk)[mode - 1]


def _entries_matrix(t: SparseTensorCoo, mask) -> np.ndarray:
    return np.column_stack([
        t.ii[mask].astype(np.float64), t.jj[mask].astype(np.float64),
        t.kk[mask].astype(np.float64), t.values[mask],
    ]) if np.any(mask) else np.zeros((0, 4))


def make_setup(t: SparseTensorCoo, part: Partition, n_workers: int) -> Setup:
    blocks = {}
    for mode in (1, 2, 3):
        share = part.shares[mode]
        out_idx = _mode_out_index(t, mode)
        mask = (out_idx >= share.out_lo) & (out_idx < share.out_hi)
        blocks[mode] = (share.out_lo, share.out_hi, _entries_matrix(t, mask))
    return Setup(part.worker_id, n_workers, t.dims, blocks)


# ---------------------------------------------------------------------------
# worker

_FLAT_FOR_MODE = {
    # mode -> (transpose row index builder, xhatT column index, out divisor key)
    1: lambda ii, jj, kk, I, J, K: (kk + ii * K, jj, J, K),
    2: lambda ii, jj, kk, I, J, K: (ii + jj * I, kk, K, I),
    3: lambda ii, jj, kk, I, J, K: (jj + kk * J, ii, I, J),
}


def _build_share_plan(entries: np.ndarray, dims, mode: int, out_lo: int, out_hi: int):
    """Worker-side plan over an output-row slice; row arithmetic matches the
    serial builder exactly (same transpose_compress routine)."""
    I, J, K = dims
    ii = entries[:, 0].astype(np.int64)
    jj = entries[:, 1].astype(np.int64)
    kk = entries[:, 2].astype(np.int64)
    vals = entries[:, 3]
    flat, sec, sec_dim, div = _FLAT_FOR_MODE[mode](ii, jj, kk, I, J, K)
    xhatT, rowmap = transpose_compress(flat, sec, vals, sec_dim)
    local_rowmap = rowmap - out_lo * div  # shift into the local row block
    return plan_from_parts(mode, xhatT, local_rowmap, out_hi - out_lo, div)


class WorkerState:
    """Per-worker data and the message dispatch loop."""

    def __init__(self, setup: Setup):
        self.worker_id = setup.worker_id
        self.dims = setup.dims
        self.plans = {}
        self.ranges = {}
        for mode in (1, 2, 3):
            lo, hi, entries = setup.blocks[mode]
            self.ranges[mode] = (int(lo), int(hi))
            self.plans[mode] = _build_share_plan(entries, setup.dims, mode, int(lo), int(hi))
        _, _, e1 = setup.blocks[1]
        self.obj_ii = e1[:, 0].astype(np.int64)
        self.obj_jj = e1[:, 1].astype(np.int64)
        self.obj_kk = e1[:, 2].astype(np.int64)
        self.obj_vals = e1[:, 3].copy()
        self.model: FactorModel | None = None
        self.last_iteration = 0

    def _check_iteration(self, msg) -> None:
        if msg.iteration < self.last_iteration:
            raise ProtocolError(
                f"stale iteration tag {msg.iteration} < {self.last_iteration}")
        self.last_iteration = msg.iteration

    def compute_shard(self, mode: int) -> ShardResult:
        f1, f2 = factor_pair(self.model.factors(), mode)
        rows = worker_compute_shard(self.plans[mode], f1, f2)
        lo, hi = self.ranges[mode]
        return ShardResult(self.last_iteration, mode, lo, hi, rows)

    def partial_objective(self, trial: int) -> PartialObjective:
        inner = float(self.obj_vals @ model_values_at(
            self.obj_ii, self.obj_jj, self.obj_kk, self.model))
        return PartialObjective(self.last_iteration, trial, inner)

    def handle(self, msg):
        """Returns the reply message, or None."""
        self._check_iteration(msg)
        if isinstance(msg, FactorBroadcast):
            self.model = FactorModel(msg.a, msg.b, msg.c, msg.weights)
            if msg.mode == 0:
                return self.partial_objective(msg.trial)
            return self.compute_shard(msg.mode)
        if isinstance(msg, FactorUpdate):
            setattr(self.model, "ABC"[msg.mode - 1], msg.factor)
            self.model.weights = msg.weights
            if msg.mode < 3:
                return self.compute_shard(msg.mode + 1)
            return None
        if isinstance(msg, StepSize):
            return None
        raise ProtocolError(f"unexpected message kind {msg.kind}")


def worker_compute_shard(plan: MttkrpPlan, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """The two-SpMV kernel restricted to one worker's rows; identical
    arithmetic to the serial kernel on the same rows."""
    return mttkrp_dfacto(plan, f1, f2)


def worker_serve(transport) -> None:
    """Blocking worker loop: Setup, then dispatch until Shutdown."""
    msg = transport.recv()
    if not isinstance(msg, Setup):
        raise ProtocolError(f"expected Setup, got kind {msg.kind}")
    state = WorkerState(msg)
    while True:
        msg = transport.recv()
        if isinstance(msg, Shutdown):
            return
        reply = state.handle(msg)
        if reply is not None:
            transport.send(reply)


# ---------------------------------------------------------------------------
# master

class _Cluster:
    def __init__(self, transports, iteration=0):
        self.transports = list(transports)
        self.iteration = iteration

    def broadcast(self, msg) -> None:
        for tr in self.transports:
            tr.send(msg)

    def gather_shards(self, mode: int, out_rows: int, rank: int) -> np.ndarray:
        """Collect one ShardResult per worker and assemble N by worker order
        (fixed merge order: worker id, then row index)."""
        out = np.zeros((out_rows, rank))
        covered = 0
        for tr in self.transports:
            msg = tr.recv()
            if not isinstance(msg, ShardResult) or msg.mode != mode:
                raise ProtocolError(f"expected ShardResult mode {mode}")
            if msg.iteration != self.iteration:
                raise ProtocolError(
                    f"iteration tag mismatch: {msg.iteration} != {self.iteration}")
            if msg.row_hi > msg.row_lo:
                out[msg.row_lo:msg.row_hi] = msg.rows
            covered += msg.row_hi - msg.row_lo
        if covered != out_rows:
            raise ProtocolError(f"shards cover {covered} rows, expected {out_rows}")
        return out

    def gather_inner(self, trial: int) -> float:
        total = 0.0
        for tr in self.transports:
            msg = tr.recv()
            if not isinstance(msg, PartialObjective) or msg.trial != trial:
                raise ProtocolError("expected PartialObjective for this trial")
            if msg.iteration != self.iteration:
                raise ProtocolError("iteration tag mismatch in partial objective")
            total += msg.value
        return total


def master_run(t: SparseTensorCoo, config: SolverConfig, transports):
    """Drive a distributed factorization over connected workers.

    Shards are shipped at setup; per iteration the master broadcasts factor
    state, assembles the workers' N rows, performs the R x R solves (ALS) or
    the gradient/line-search bookkeeping (GD), and records stats.  The
    trajectory matches the serial solver from the same seed.
    """
    views = build_views(t)
    parts = partition_rows(views, len(transports))
    cluster = _Cluster(transports)
    for part, tr in zip(parts, transports):
        tr.send(make_setup(t, part, len(transports)))
    pattern_sizes = {mode: views.rowmap({1: 2, 2: 3, 3: 1}[mode]).size
                     for mode in (1, 2, 3)}
    xnorm2 = float(t.values @ t.values)
    model = init_factors(t.dims, config.rank, config.seed)
    counter = FlopCounter()

    def parts_at(trial_model: FactorModel, trial: int) -> ObjectiveParts:
        # Objective round: fold the weights into A master-side so workers
        # never need them, then sum the per-worker data inner products.
        cluster.broadcast(FactorBroadcast(
            cluster.iteration, 0, trial, np.ones(trial_model.rank),
            trial_model.folded_a(), trial_model.B, trial_model.C))
        inner = cluster.gather_inner(trial)
        return ObjectiveParts(xnorm2, inner, model_norm2(trial_model))

    lam = config.reg
    history = []
    try:
        cluster.iteration = 0
        parts0 = parts_at(model, 0)
        history.append(IterationStats(0, objective_value(parts0, lam, model),
                                      fit_value(parts0)))
        for it in range(1, config.max_iters + 1):
            cluster.iteration = it
            counter.reset()
            stalled = False
            fallback = False
            t_mttkrp = t_solve = t_norm = t_ls = 0.0
            if config.algorithm == "als":
                for mode in (1, 2, 3):
                    t0 = time.perf_counter()
                    if mode == 1:
                        cluster.broadcast(FactorBroadcast(
                            it, 1, 0, model.weights, model.A, model.B, model.C))
                    n = cluster.gather_shards(mode, t.dims[mode - 1], config.rank)
                    counter.add((t.nnz + pattern_sizes[mode]) * config.rank)
                    t1 = time.perf_counter()
                    f1, f2 = factor_pair(model.factors(), mode)
                    gram = gram_hadamard(f2.T @ f2, f1.T @ f1, lam)
                    updated, fb = solve_normal_eq(n, gram)
                    fallback = fallback or fb
                    t2 = time.perf_counter()
                    if lam == 0.0:
                        updated, norms = normalize_columns(updated)
                        weights = norms
                    else:
                        weights = np.ones(config.rank)
                    setattr(model, "ABC"[mode - 1], updated)
                    model.weights = weights
                    t3 = time.perf_counter()
                    cluster.broadcast(FactorUpdate(it, mode, weights, updated))
                    t_mttkrp += (t1 - t0) * 1e3
                    t_solve += (t2 - t1) * 1e3
                    t_norm += (t3 - t2) * 1e3
                # FactorUpdate(3) is a pure sync; stats come from a
                # dedicated objective round at the folded factors.
                parts = parts_at(model, 0)
                objective = objective_value(parts, lam, model)
                stats = IterationStats(it, objective, fit_value(parts),
                                       ms_mttkrp=t_mttkrp, ms_solve=t_solve,
                                       ms_normalize=t_norm,
                                       lstsq_fallback=fallback)
            else:
                t0 = time.perf_counter()
                grads = []
                for mode in (1, 2, 3):
                    cluster.broadcast(FactorBroadcast(
                        it, mode, 0, model.weights, model.A, model.B, model.C))
                    n = cluster.gather_shards(mode, t.dims[mode - 1], config.rank)
                    counter.add((t.nnz + pattern_sizes[mode]) * config.rank)
                    f1, f2 = factor_pair(model.factors(), mode)
                    gram = gram_hadamard(f2.T @ f2, f1.T @ f1, lam)
                    grads.append(-n + model.factors()[mode - 1] @ gram)
                grads = tuple(grads)
                t1 = time.perf_counter()
                f0 = history[-1].objective
                trial_counter = [0]

                def evaluate(trial_model):
                    trial_counter[0] += 1
                    parts = parts_at(trial_model, trial_counter[0])
                    return objective_value(parts, lam, trial_model), parts

                ls = backtracking_line_search(evaluate, model, grads, f0, config)
                t2 = time.perf_counter()
                if ls.stalled:
                    stalled = True
                    stats = IterationStats(it, f0, history[-1].fit,
                                           ms_mttkrp=(t1 - t0) * 1e3,
                                           ms_linesearch=(t2 - t1) * 1e3,
                                           stalled=True)
                else:
                    cluster.broadcast(StepSize(it, ls.alpha))
                    model = apply_step(model, grads, ls.alpha)
                    stats = IterationStats(it, ls.objective, fit_value(ls.parts),
                                           ms_mttkrp=(t1 - t0) * 1e3,
                                           ms_linesearch=(t2 - t1) * 1e3)
            stats.flops = counter.multiply_adds
            history.append(stats)
            if not np.isfinite(stats.objective):
                raise SolverAbort(it, f"objective became {stats.objective}")
            if stalled:
                break
            if relative_change(history[-2].objective, stats.objective) < config.tol:
                break
    finally:
        try:
            cluster.broadcast(Shutdown(cluster.iteration))
        except Exception:
            pass
    return model, history


# ---------------------------------------------------------------------------
# harness helpers

def launch_inproc_workers(n: int):
    """Spawn n worker threads over queue transports; returns (master-side
    transports, threads)."""
    masters = []
    threads = []
    for _ in range(n):
        master_side, worker_side = QueueTransport.pair()
        th = threading.Thread(target=worker_serve, args=(worker_side,), daemon=True)
        th.start()
        masters.append(master_side)
        threads.append(th)
    return masters, threads


def serve_tcp_worker(host: str, port: int, ready_callback=None) -> None:
    """Listen for one master connection and serve it to completion.
    ready_callback, when given, receives the bound (host, port)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    if ready_callback is not None:
        ready_callback(srv.getsockname()[:2])
    conn, _ = srv.accept()
    srv.close()
    transport = TcpTransport(conn)
    try:
        worker_serve(transport)
    finally:
        transport.close()


def connect_workers(addresses, timeout: float = 10.0):
    """Connect to worker TCP endpoints, in order."""
    transports = []
    for addr in addresses:
        host, port = addr.rsplit(":", 1)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, int(port)), timeout=timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        transports.append(TcpTransport(sock))
    return transports
