import socket
import threading

import numpy as np
import pytest

from spcp.distributed import (
    FactorBroadcast,
    FactorUpdate,
    PartialObjective,
    ProtocolError,
    QueueTransport,
    Setup,
    ShardResult,
    Shutdown,
    StepSize,
    TcpTransport,
    WorkerState,
    connect_workers,
    decode_message,
    encode_message,
    launch_inproc_workers,
    make_setup,
    master_run,
    partition_rows,
    serve_tcp_worker,
    worker_compute_shard,
)
from spcp.mttkrp import build_plan, factor_pair, mttkrp_dfacto
from spcp.solvers import SolverConfig, solve
from spcp.sparse_core import SparseTensorCoo, build_views

from conftest import example_factors, example_tensor, random_coo


def tensor_with_row_nnz(row_nnz):
    """Tensor whose mode-1 rows have the given entry counts."""
    ii, jj, kk = [], [], []
    for i, count in enumerate(row_nnz):
        for c in range(count):
            ii.append(i)
            jj.append(c % 3)
            kk.append(c // 3)
    vals = np.arange(1.0, len(ii) + 1)
    dims = (len(row_nnz), 3, max(max(kk) + 1, 1))
    return SparseTensorCoo.from_entries(dims, ii, jj, kk, vals)


class TestCodec:
    def test_roundtrip_all_kinds(self, rng):
        entries = np.column_stack([rng.integers(0, 3, 5), rng.integers(0, 4, 5),
                                   rng.integers(0, 2, 5), rng.random(5)]).astype(float)
        msgs = [
            Setup(2, 4, (3, 4, 2), {1: (0, 2, entries), 2: (1, 3, entries),
                                    3: (0, 1, np.zeros((0, 4)))}),
            FactorBroadcast(7, 2, 5, np.ones(3), rng.random((3, 3)),
                            rng.random((4, 3)), rng.random((2, 3))),
            ShardResult(9, 1, 4, 7, rng.random((3, 2))),
            FactorUpdate(3, 2, np.ones(2), rng.random((4, 2))),
            PartialObjective(11, 6, 3.25),
            StepSize(4, 0.125),
            Shutdown(5),
        ]
        for msg in msgs:
            got = decode_message(encode_message(msg))
            assert type(got) is type(msg)
            assert got.iteration == msg.iteration
            for attr in ("mode", "trial", "alpha", "value", "row_lo", "row_hi",
                         "worker_id", "n_workers", "dims"):
                if hasattr(msg, attr):
                    assert getattr(got, attr) == getattr(msg, attr), attr
            for attr in ("weights", "a", "b", "c", "rows", "factor"):
                if hasattr(msg, attr):
                    np.testing.assert_array_equal(getattr(got, attr), getattr(msg, attr))
        got = decode_message(encode_message(msgs[0]))
        for mode in (1, 2, 3):
            assert got.blocks[mode][:2] == msgs[0].blocks[mode][:2]
            np.testing.assert_array_equal(got.blocks[mode][2], msgs[0].blocks[mode][2])

    def test_bad_magic_rejected(self):
        data = bytearray(encode_message(Shutdown(0)))
        data[:4] = b"NOPE"
        with pytest.raises(ProtocolError, match="magic"):
            decode_message(bytes(data))

    def test_length_mismatch_rejected(self):
        data = encode_message(StepSize(1, 0.5))
        with pytest.raises(ProtocolError):
            decode_message(data[:-2])


class TestPartition:
    def test_greedy_prefix_spec_case(self):
        t = tensor_with_row_nnz([5, 1, 1, 1, 1, 5])
        parts = partition_rows(build_views(t), 2)
        assert (parts[0].shares[1].out_lo, parts[0].shares[1].out_hi) == (0, 3)
        assert (parts[1].shares[1].out_lo, parts[1].shares[1].out_hi) == (3, 6)

    def test_equal_rows_split_in_half(self):
        t = tensor_with_row_nnz([2, 2, 2, 2])
        parts = partition_rows(build_views(t), 2)
        assert (parts[0].shares[1].out_lo, parts[0].shares[1].out_hi) == (0, 2)
        assert (parts[1].shares[1].out_lo, parts[1].shares[1].out_hi) == (2, 4)

    def test_single_worker_full_range(self, rng):
        t = random_coo(rng)
        parts = partition_rows(build_views(t), 1)
        for mode in (1, 2, 3):
            share = parts[0].shares[mode]
            assert (share.out_lo, share.out_hi) == (0, t.dims[mode - 1])

    def test_more_workers_than_rows(self):
        t = tensor_with_row_nnz([1, 1])
        parts = partition_rows(build_views(t), 5)
        spans = [(p.shares[1].out_lo, p.shares[1].out_hi) for p in parts]
        assert spans[0][0] == 0 and spans[-1][1] == 2
        total = sum(hi - lo for lo, hi in spans)
        assert total == 2  # empty shards allowed

    def test_cover_and_disjoint_all_modes(self, rng):
        for workers in (2, 3, 4):
            t = random_coo(rng, max_dim=10, max_nnz=200)
            views = build_views(t)
            parts = partition_rows(views, workers)
            for mode in (1, 2, 3):
                spans = [(p.shares[mode].out_lo, p.shares[mode].out_hi) for p in parts]
                assert spans[0][0] == 0
                assert spans[-1][1] == t.dims[mode - 1]
                for (_, hi), (lo, _) in zip(spans, spans[1:]):
                    assert hi == lo
                slots = np.concatenate([p.shares[mode].rowmap for p in parts])
                paired = {1: 2, 2: 3, 3: 1}[mode]
                np.testing.assert_array_equal(slots, views.rowmap(paired))


class TestShards:
    def test_single_worker_matches_serial(self, rng):
        t = random_coo(rng, max_dim=9)
        views = build_views(t)
        part = partition_rows(views, 1)[0]
        setup = make_setup(t, part, 1)
        state = WorkerState(setup)
        model_factors = tuple(rng.random((d, 2)) for d in t.dims)
        for mode in (1, 2, 3):
            f1, f2 = factor_pair(model_factors, mode)
            serial = mttkrp_dfacto(build_plan(views, mode), f1, f2)
            shard = worker_compute_shard(state.plans[mode], f1, f2)
            np.testing.assert_array_equal(shard, serial)

    def test_golden_two_workers_mode1(self):
        t = example_tensor()
        B, C = example_factors()
        views = build_views(t)
        parts = partition_rows(views, 2)
        merged = np.zeros((2, 2))
        for part in parts:
            state = WorkerState(make_setup(t, part, 2))
            share = part.shares[1]
            rows = worker_compute_shard(state.plans[1], B, C)
            merged[share.out_lo:share.out_hi] = rows
        np.testing.assert_array_equal(merged, [[57.0, 69.0], [73.0, 123.0]])

    def test_random_shardings_merge_exactly(self, rng):
        for _ in range(10):
            t = random_coo(rng, max_dim=12, max_nnz=250)
            views = build_views(t)
            workers = int(rng.integers(2, 5))
            parts = partition_rows(views, workers)
            states = [WorkerState(make_setup(t, p, workers)) for p in parts]
            factors = tuple(rng.standard_normal((d, 3)) for d in t.dims)
            for mode in (1, 2, 3):
                f1, f2 = factor_pair(factors, mode)
                serial = mttkrp_dfacto(build_plan(views, mode), f1, f2)
                merged = np.zeros_like(serial)
                for part, state in zip(parts, states):
                    share = part.shares[mode]
                    merged[share.out_lo:share.out_hi] = worker_compute_shard(
                        state.plans[mode], f1, f2)
                np.testing.assert_array_equal(merged, serial)


class TestWorkerStateMachine:
    def test_stale_iteration_rejected(self, rng):
        t = random_coo(rng, max_dim=5)
        state = WorkerState(make_setup(t, partition_rows(build_views(t), 1)[0], 1))
        model = tuple(rng.random((d, 2)) for d in t.dims)
        fb = FactorBroadcast(5, 1, 0, np.ones(2), *model)
        state.handle(fb)
        with pytest.raises(ProtocolError, match="stale"):
            state.handle(FactorBroadcast(4, 1, 0, np.ones(2), *model))


def run_cluster(t, config, workers, transport):
    if transport == "queue":
        channels, threads = launch_inproc_workers(workers)
    else:
        channels = []
        threads = []
        for _ in range(workers):
            ready = []
            event = threading.Event()

            def cb(addr, ready=ready, event=event):
                ready.append(addr)
                event.set()

            th = threading.Thread(target=serve_tcp_worker,
                                  args=("127.0.0.1", 0, cb), daemon=True)
            th.start()
            event.wait(5.0)
            host, port = ready[0]
            channels.extend(connect_workers([f"{host}:{port}"]))
            threads.append(th)
    try:
        return master_run(t, config, channels)
    finally:
        for th in threads:
            th.join(timeout=5.0)


class TestMasterRun:
    @pytest.mark.parametrize("algo", ["als", "gd"])
    def test_single_worker_bitwise_identical(self, rng, algo):
        t = random_coo(rng, max_dim=10, max_nnz=150)
        config = SolverConfig(rank=2, algorithm=algo, max_iters=5, tol=1e-30,
                              seed=11, reg=0.05)
        serial_model, serial_hist = solve(t, config)
        dist_model, dist_hist = run_cluster(t, config, 1, "queue")
        assert [s.objective for s in dist_hist] == [s.objective for s in serial_hist]
        assert [s.fit for s in dist_hist] == [s.fit for s in serial_hist]
        assert [s.flops for s in dist_hist] == [s.flops for s in serial_hist]
        for got, want in zip(dist_model.factors(), serial_model.factors()):
            np.testing.assert_array_equal(got, want)
        np.testing.assert_array_equal(dist_model.weights, serial_model.weights)

    @pytest.mark.parametrize("transport", ["queue", "tcp"])
    @pytest.mark.parametrize("workers", [2, 4])
    def test_multi_worker_matches_serial(self, rng, transport, workers):
        t = random_coo(rng, max_dim=12, max_nnz=250)
        config = SolverConfig(rank=3, algorithm="als", max_iters=4, tol=1e-30, seed=3)
        _, serial_hist = solve(t, config)
        _, dist_hist = run_cluster(t, config, workers, transport)
        assert len(dist_hist) == len(serial_hist)
        for s, d in zip(serial_hist, dist_hist):
            assert abs(d.objective - s.objective) <= 1e-10 * max(1.0, abs(s.objective))
            assert abs(d.fit - s.fit) <= 1e-10

    def test_gd_step_sizes_match_serial(self, rng):
        t = random_coo(rng, max_dim=9, max_nnz=120)
        config = SolverConfig(rank=2, algorithm="gd", max_iters=6, tol=1e-30, seed=7)
        _, serial_hist = solve(t, config)
        _, dist_hist = run_cluster(t, config, 2, "queue")
        for s, d in zip(serial_hist[1:], dist_hist[1:]):
            assert abs(d.objective - s.objective) <= 1e-10 * max(1.0, abs(s.objective))
            assert d.stalled == s.stalled

    def test_deterministic_across_runs(self, rng):
        t = random_coo(rng, max_dim=8, max_nnz=100)
        config = SolverConfig(rank=2, algorithm="als", max_iters=3, tol=1e-30, seed=5)
        _, h1 = run_cluster(t, config, 2, "queue")
        _, h2 = run_cluster(t, config, 2, "queue")
        assert [s.objective for s in h1] == [s.objective for s in h2]
